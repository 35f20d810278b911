//! Whitespace tokenizer over a fixed vocabulary, and query templating.

use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEG: &str = "<seg>";
pub const UNK: &str = "<unk>";

pub const QUERY_PREFIX: &str = "Please segment the";
pub const QUERY_SUFFIX: &str = "in the image";
pub const RESPONSE: &str = "Sure , it is <seg> .";

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, SEG, UNK];

const WORDS: &[&str] = &[
    "Please", "segment", "the", "in", "image", "Sure", ",", "it", "is", ".", "shape", "on", "left", "right",
    "middle", "largest", "smallest", "background", "circle", "square", "triangle", "red", "green", "blue",
    "yellow", "purple", "orange", "white",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(WORDS.iter().copied()).expect("built-in words are unique")
    }
}

impl Vocabulary {
    /// Specials first (so their ids are stable), then `words` in order.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(ModelError::Config(format!("invalid vocabulary word {w:?}")));
            }
            if tokens.iter().any(|t| t == w) {
                return Err(ModelError::Config(format!("duplicate vocabulary word {w:?}")));
            }
            tokens.push(w.to_string());
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    fn special(&self, token: &str) -> usize {
        self.id(token).expect("specials are always present")
    }

    pub fn pad(&self) -> usize {
        self.special(PAD)
    }

    pub fn bos(&self) -> usize {
        self.special(BOS)
    }

    pub fn eos(&self) -> usize {
        self.special(EOS)
    }

    pub fn seg(&self) -> usize {
        self.special(SEG)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.special(UNK);
        text.split_whitespace().map(|w| self.id(w).unwrap_or(unk)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A tokenized segmentation request together with its response template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegQuery {
    pub raw_text: String,
    /// Query tokens only.
    pub query_ids: Vec<usize>,
    /// `<bos> query response <eos>`, the sequence the text encoder reads.
    pub token_ids: Vec<usize>,
    /// Indices of `<seg>` inside `token_ids`.
    pub seg_positions: Vec<usize>,
    /// Index in `token_ids` where the response starts.
    pub response_start: usize,
}

impl SegQuery {
    pub fn new(vocab: &Vocabulary, raw_text: &str, response: &str) -> Result<Self> {
        let query_ids = vocab.encode(raw_text);
        let response_ids = vocab.encode(response);
        let mut token_ids = vec![vocab.bos()];
        token_ids.extend(&query_ids);
        let response_start = token_ids.len();
        token_ids.extend(&response_ids);
        token_ids.push(vocab.eos());
        let seg = vocab.seg();
        let seg_positions: Vec<usize> = (response_start..token_ids.len()).filter(|&i| token_ids[i] == seg).collect();
        if seg_positions.is_empty() {
            return Err(ModelError::Query(format!("response template {response:?} has no {SEG} token")));
        }
        Ok(Self {
            raw_text: raw_text.to_string(),
            query_ids,
            token_ids,
            seg_positions,
            response_start,
        })
    }

    /// Next-token targets for every position: response tokens and the final
    /// `<eos>` are supervised, the query part is not.
    pub fn text_targets(&self) -> Vec<Option<usize>> {
        (0..self.token_ids.len())
            .map(|i| {
                let next = i + 1;
                (next >= self.response_start && next < self.token_ids.len()).then(|| self.token_ids[next])
            })
            .collect()
    }
}

fn strip_article(object: &str) -> &str {
    let t = object.trim();
    for article in ["the ", "a ", "an ", "The ", "A ", "An "] {
        if let Some(rest) = t.strip_prefix(article) {
            return rest.trim_start();
        }
    }
    t
}

/// `"Please segment the {object} in the image"`, without a doubled article.
pub fn query_text(object: &str) -> Result<String> {
    let object = strip_article(object);
    if object.is_empty() {
        return Err(ModelError::Query("empty object description".into()));
    }
    let object = object.split_whitespace().collect::<Vec<_>>().join(" ");
    Ok(format!("{QUERY_PREFIX} {object} {QUERY_SUFFIX}"))
}

pub fn build_query(vocab: &Vocabulary, object: &str) -> Result<SegQuery> {
    SegQuery::new(vocab, &query_text(object)?, RESPONSE)
}
