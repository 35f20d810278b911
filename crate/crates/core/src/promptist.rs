//! Rule-based decomposition of editing instructions into an [`EditPlan`].
//!
//! Categories are tried in a fixed order (remove, addition, replace,
//! background, global); the first rule that produces a complete plan wins.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Appended to local prompts by [`refine_prompt`].
pub const REFINE_SUFFIX: &str = ", detailed, naturally lit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditCategory {
    Remove,
    Addition,
    Replace,
    Background,
    Global,
}

impl EditCategory {
    pub const ALL: [EditCategory; 5] = [
        EditCategory::Remove,
        EditCategory::Addition,
        EditCategory::Replace,
        EditCategory::Background,
        EditCategory::Global,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditCategory::Remove => "Remove",
            EditCategory::Addition => "Addition",
            EditCategory::Replace => "Replace",
            EditCategory::Background => "Background",
            EditCategory::Global => "Global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for EditCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub instruction: String,
    pub category: EditCategory,
    /// Segmentation target; empty for global edits.
    pub editing_object: String,
    pub target_prompt: String,
    /// Normalised `[x0, y0, x1, y1]`.
    pub region_hint: Option<[f64; 4]>,
    #[serde(default)]
    pub low_confidence: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptistError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("editing object is empty")]
    EmptyObject,
    #[error("expected an Addition plan, got {0}")]
    NotAddition(EditCategory),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

pub fn valid_bbox(b: &[f64; 4]) -> bool {
    b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && b[0] < b[2] && b[1] < b[3]
}

impl EditPlan {
    /// Checks the structural contract every plan must meet.
    pub fn validate(&self) -> Result<(), PromptistError> {
        let bad = |m: &str| Err(PromptistError::InvalidPlan(m.to_string()));
        if let Some(b) = &self.region_hint {
            if !valid_bbox(b) {
                return bad("region_hint is not an ordered box inside [0, 1]");
            }
        }
        if self.target_prompt.trim().is_empty() {
            return bad("target_prompt is empty");
        }
        match self.category {
            EditCategory::Addition if self.region_hint.is_none() => bad("Addition plan without region_hint"),
            EditCategory::Remove | EditCategory::Replace | EditCategory::Background | EditCategory::Addition
                if self.editing_object.trim().is_empty() =>
            {
                bad("editing_object is empty")
            }
            _ => Ok(()),
        }
    }
}

const DETERMINERS: &[&str] = &["the", "a", "an", "this", "that", "these", "those", "some", "my", "its", "their"];
const IMAGE_WORDS: &[&str] = &["image", "picture", "photo", "photograph", "scene", "frame", "painting"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "to", "into", "onto", "near", "next", "beside", "under", "above", "behind", "over", "below",
    "between", "inside", "from",
];

fn normalise(instruction: &str) -> Vec<String> {
    instruction
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '\'')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn position(words: &[String], targets: &[&str]) -> Option<usize> {
    words.iter().position(|w| targets.contains(&w.as_str()))
}

/// Cuts trailing "in/of/from the image" style references and politeness words.
fn trim_scene_reference(words: &[String]) -> &[String] {
    let mut end = words.len();
    while end > 0 && ["please", "now"].contains(&words[end - 1].as_str()) {
        end -= 1;
    }
    for i in 0..end {
        if PREPOSITIONS.contains(&words[i].as_str()) || words[i] == "of" {
            let rest = &words[i + 1..end];
            let rest = rest.strip_prefix(&["the".to_string()]).unwrap_or(rest);
            if rest.len() == 1 && IMAGE_WORDS.contains(&rest[0].as_str()) {
                return &words[..i];
            }
        }
    }
    &words[..end]
}

fn strip_determiners(words: &[String]) -> &[String] {
    let start = words.iter().position(|w| !DETERMINERS.contains(&w.as_str())).unwrap_or(words.len());
    &words[start..]
}

fn join(words: &[String]) -> String {
    words.join(" ")
}

fn refers_to_whole_image(words: &[String]) -> bool {
    let w = strip_determiners(words);
    w.is_empty() || (w.len() == 1 && (w[0] == "it" || w[0] == "everything" || IMAGE_WORDS.contains(&w[0].as_str())))
}

fn plan(instruction: &str, category: EditCategory, object: String, target: String) -> EditPlan {
    EditPlan {
        instruction: instruction.to_string(),
        category,
        editing_object: object,
        target_prompt: target,
        region_hint: None,
        low_confidence: false,
    }
}

fn parse_remove(instruction: &str, words: &[String]) -> Option<EditPlan> {
    let t = position(words, &["remove", "delete", "erase"])?;
    let np = trim_scene_reference(&words[t + 1..]);
    let object = join(strip_determiners(np));
    if object.is_empty() {
        return None;
    }
    let target = format!("the scene without the {object}");
    Some(plan(instruction, EditCategory::Remove, object, target))
}

fn parse_addition(instruction: &str, words: &[String]) -> Option<EditPlan> {
    let t = position(words, &["add", "insert", "put"])?;
    let rest = &words[t + 1..];
    let end = rest
        .iter()
        .position(|w| PREPOSITIONS.contains(&w.as_str()))
        .unwrap_or(rest.len());
    let np = &rest[..end];
    let object = join(strip_determiners(np));
    if object.is_empty() {
        return None;
    }
    let mut p = plan(instruction, EditCategory::Addition, object, join(np));
    p.region_hint = Some(addition_box(words, 1.0, 1.0));
    Some(p)
}

/// `(object words, target words)` of a replace-style construction.
fn replace_parts(words: &[String]) -> Option<(Vec<String>, Vec<String>)> {
    let patterns: &[(&str, &[&str])] = &[
        ("replace", &["with", "by"]),
        ("swap", &["with", "for"]),
        ("change", &["into", "to"]),
        ("make", &["into"]),
        ("turn", &["into"]),
        ("transform", &["into"]),
        ("convert", &["into", "to"]),
    ];
    for (verb, connectors) in patterns {
        let Some(v) = words.iter().position(|w| w == verb) else {
            continue;
        };
        let Some(c) = words[v + 1..].iter().position(|w| connectors.contains(&w.as_str())).map(|c| c + v + 1) else {
            continue;
        };
        let object = trim_scene_reference(&words[v + 1..c]).to_vec();
        let target = trim_scene_reference(&words[c + 1..]).to_vec();
        if !object.is_empty() && !target.is_empty() {
            return Some((object, target));
        }
    }
    None
}

fn parse_replace(instruction: &str, words: &[String]) -> Option<EditPlan> {
    let (object, target) = replace_parts(words)?;
    if refers_to_whole_image(&object) {
        return None;
    }
    let object = join(strip_determiners(&object));
    if object == "background" || object == "backdrop" {
        return Some(plan(instruction, EditCategory::Background, "background".into(), join(&target)));
    }
    Some(plan(instruction, EditCategory::Replace, object, join(&target)))
}

fn parse_background(instruction: &str, words: &[String]) -> Option<EditPlan> {
    let b = position(words, &["background", "backdrop"])?;
    let target = match replace_parts(words) {
        Some((_, t)) => join(&t),
        None => {
            let rest = trim_scene_reference(&words[b + 1..]);
            let skip = rest
                .iter()
                .position(|w| !["to", "into", "with", "be", "look", "like", "as"].contains(&w.as_str()))
                .unwrap_or(rest.len());
            join(&rest[skip..])
        }
    };
    let target = if target.is_empty() { instruction.trim().to_string() } else { target };
    Some(plan(instruction, EditCategory::Background, "background".into(), target))
}

fn parse_global(instruction: &str, words: &[String]) -> Option<EditPlan> {
    if let Some((object, target)) = replace_parts(words) {
        if refers_to_whole_image(&object) {
            return Some(plan(instruction, EditCategory::Global, String::new(), join(&target)));
        }
    }
    // "make it winter", "make the photo look like autumn"
    let v = position(words, &["make", "turn", "render", "style", "stylize", "stylise"])?;
    let rest = &words[v + 1..];
    let (subject, tail) = strip_determiners(rest).split_first()?;
    if !(subject == "it" || subject == "everything" || IMAGE_WORDS.contains(&subject.as_str())) {
        return None;
    }
    let skip = tail
        .iter()
        .position(|w| !["look", "like", "as", "appear", "be", "in", "more"].contains(&w.as_str()))
        .unwrap_or(tail.len());
    let target = join(&tail[skip..]);
    if target.is_empty() {
        return None;
    }
    Some(plan(instruction, EditCategory::Global, String::new(), target))
}

/// Decomposes an instruction. Never fails for nonempty input: anything no
/// rule understands becomes a low-confidence global plan carrying the full text.
pub fn parse_instruction(instruction: &str) -> Result<EditPlan, PromptistError> {
    if instruction.trim().is_empty() {
        return Err(PromptistError::EmptyInstruction);
    }
    let words = normalise(instruction);
    let rules: [fn(&str, &[String]) -> Option<EditPlan>; 5] =
        [parse_remove, parse_addition, parse_replace, parse_background, parse_global];
    for rule in rules {
        if let Some(p) = rule(instruction, &words) {
            return Ok(p);
        }
    }
    let mut p = plan(instruction, EditCategory::Global, String::new(), instruction.trim().to_string());
    p.low_confidence = true;
    Ok(p)
}

fn has(words: &[String], any: &[&str]) -> bool {
    words.iter().any(|w| any.contains(&w.as_str()))
}

fn addition_box(words: &[String], width: f64, height: f64) -> [f64; 4] {
    let row = if has(words, &["top", "upper"]) {
        Some(0)
    } else if has(words, &["bottom", "lower"]) {
        Some(2)
    } else {
        None
    };
    let col = if has(words, &["left"]) {
        Some(0)
    } else if has(words, &["right"]) {
        Some(2)
    } else {
        None
    };
    let (row, col) = match (row, col, has(words, &["corner"])) {
        (None, None, true) => (2, 2),
        (Some(r), None, true) => (r, 2),
        (None, Some(c), true) => (2, c),
        (r, c, _) => (r.unwrap_or(1), c.unwrap_or(1)),
    };
    let scale = if has(words, &["small", "tiny", "little"]) {
        0.5
    } else if has(words, &["large", "big", "huge"]) {
        1.5
    } else {
        1.0
    };
    let side = width.min(height) / 3.0 * scale;
    let (sx, sy) = (side / width, side / height);
    let (cx, cy) = ((col as f64 + 0.5) / 3.0, (row as f64 + 0.5) / 3.0);
    [
        (cx - sx / 2.0).max(0.0),
        (cy - sy / 2.0).max(0.0),
        (cx + sx / 2.0).min(1.0),
        (cy + sy / 2.0).min(1.0),
    ]
}

/// Placement box for an Addition plan: a cell of a 3×3 grid picked by
/// spatial words (centre by default), side one third of the shorter image
/// side, halved for "small" and enlarged 1.5× for "large".
pub fn compute_addition_region(plan: &EditPlan, image_w: usize, image_h: usize) -> Result<[f64; 4], PromptistError> {
    if plan.category != EditCategory::Addition {
        return Err(PromptistError::NotAddition(plan.category));
    }
    let words = normalise(&plan.instruction);
    Ok(addition_box(&words, image_w.max(1) as f64, image_h.max(1) as f64))
}

/// Box implied by spatial words in any instruction, or the centre cell.
pub fn spatial_box(instruction: &str) -> [f64; 4] {
    addition_box(&normalise(instruction), 1.0, 1.0)
}

fn singular(w: &str) -> &str {
    w.strip_suffix('s').filter(|s| s.len() > 2).unwrap_or(w)
}

/// Deletes "determiner + modifiers + head noun" of `object` from a caption,
/// together with one adjacent "and" or comma. `None` if the noun is absent.
pub fn caption_without(caption: &str, object: &str) -> Option<String> {
    let obj = normalise(object);
    let np_end = obj.iter().position(|w| PREPOSITIONS.contains(&w.as_str()) || w == "of").unwrap_or(obj.len());
    let np = strip_determiners(&obj[..np_end]);
    let (head, modifiers) = np.split_last()?;
    let mut tokens: Vec<String> = caption.split_whitespace().map(str::to_string).collect();
    let bare = |t: &str| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    let i = tokens.iter().position(|t| singular(&bare(t)) == singular(head))?;
    let mut start = i;
    while start > 0 && modifiers.contains(&bare(&tokens[start - 1])) {
        start -= 1;
    }
    let counts = ["one", "two", "three", "four", "five", "several", "many"];
    if start > 0 && (DETERMINERS.contains(&bare(&tokens[start - 1]).as_str()) || counts.contains(&bare(&tokens[start - 1]).as_str())) {
        start -= 1;
    }
    let trailing_comma = tokens[i].ends_with(',');
    tokens.drain(start..=i);
    if start < tokens.len() && bare(&tokens[start]) == "and" {
        tokens.remove(start);
    } else if trailing_comma {
        // "a cup, a book" -> "a book"
    } else if start > 0 && bare(&tokens[start - 1]) == "and" {
        tokens.remove(start - 1);
    } else if start > 0 && tokens[start - 1].ends_with(',') {
        let t = &mut tokens[start - 1];
        t.pop();
    }
    Some(tokens.join(" "))
}

/// Produces the final text prompt for the inpainter. Local edits get an
/// object-focused prompt; scene-level edits describe the whole result.
pub fn refine_prompt(plan: &EditPlan, scene_caption: Option<&str>) -> String {
    let caption = scene_caption.map(str::trim).filter(|c| !c.is_empty());
    match plan.category {
        EditCategory::Replace | EditCategory::Addition => format!("{}{REFINE_SUFFIX}", plan.target_prompt),
        EditCategory::Remove => match caption {
            Some(c) => caption_without(c, &plan.editing_object)
                .unwrap_or_else(|| format!("{c}, without the {}", plan.editing_object)),
            None => plan.target_prompt.clone(),
        },
        EditCategory::Background => {
            format!("{}, with {} in the background", caption.unwrap_or("the scene"), plan.target_prompt)
        }
        EditCategory::Global => {
            let t = &plan.target_prompt;
            let article = normalise(t).first().is_some_and(|w| ["a", "an", "the"].contains(&w.as_str()));
            let joiner = if article { "as" } else { "in" };
            format!("{}, {joiner} {t}", caption.unwrap_or("the scene"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parsed(s: &str) -> EditPlan {
        parse_instruction(s).unwrap()
    }

    #[test]
    fn replace_example() {
        let p = parsed("Make the middle animal in the image into a cute cat");
        assert_eq!(p.category, EditCategory::Replace);
        assert_eq!(p.editing_object, "middle animal");
        assert_eq!(p.target_prompt, "a cute cat");
        assert!(!p.low_confidence);
        assert_eq!(refine_prompt(&p, None), "a cute cat, detailed, naturally lit");
    }

    #[test]
    fn remove_example() {
        let p = parsed("Remove the cup on the table");
        assert_eq!(p.category, EditCategory::Remove);
        assert_eq!(p.editing_object, "cup on the table");
        assert_eq!(
            refine_prompt(&p, Some("a table with a cup and a book")),
            "a table with a book"
        );
    }

    #[test]
    fn empty_is_error_and_gibberish_falls_back() {
        assert_eq!(parse_instruction("   "), Err(PromptistError::EmptyInstruction));
        let p = parsed("something nice please");
        assert_eq!(p.category, EditCategory::Global);
        assert!(p.low_confidence);
        assert_eq!(p.target_prompt, "something nice please");
    }

    #[test]
    fn precedence_and_background_rules() {
        assert_eq!(parsed("remove the dog and add a cat").category, EditCategory::Remove);
        assert_eq!(parsed("add a hat and replace the shoes with boots").category, EditCategory::Addition);
        let bg = parsed("change the background to a sunny beach");
        assert_eq!(bg.category, EditCategory::Background);
        assert_eq!(bg.target_prompt, "a sunny beach");
        assert_eq!(parsed("make the background snowy").target_prompt, "snowy");
        let g = parsed("make it winter");
        assert_eq!((g.category, g.target_prompt.as_str()), (EditCategory::Global, "winter"));
        assert_eq!(parsed("turn the photo into a watercolor painting").category, EditCategory::Global);
    }

    #[test]
    fn addition_regions() {
        let p = parsed("add a bird in the top left");
        let b = compute_addition_region(&p, 512, 512).unwrap();
        assert!(b[0].abs() < 1e-12 && b[1].abs() < 1e-12);
        assert!((b[2] - 1.0 / 3.0).abs() < 1e-12 && (b[3] - 1.0 / 3.0).abs() < 1e-12);

        let p = parsed("add a small lamp in the center");
        let b = compute_addition_region(&p, 512, 512).unwrap();
        assert!((b[2] - b[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!(((b[0] + b[2]) / 2.0 - 0.5).abs() < 1e-12);

        let p = parsed("insert a vase");
        let b = compute_addition_region(&p, 300, 200).unwrap();
        assert!(((b[0] + b[2]) / 2.0 - 0.5).abs() < 1e-12 && ((b[1] + b[3]) / 2.0 - 0.5).abs() < 1e-12);
        assert!(((b[2] - b[0]) * 300.0 - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(p.editing_object, "vase");
        assert_eq!(p.target_prompt, "a vase");

        let g = parsed("make it winter");
        assert_eq!(compute_addition_region(&g, 10, 10), Err(PromptistError::NotAddition(EditCategory::Global)));
    }

    #[test]
    fn scene_prompts() {
        let g = parsed("make it winter");
        assert_eq!(refine_prompt(&g, Some("a quiet street")), "a quiet street, in winter");
        let bg = parsed("replace the background with a forest");
        assert_eq!(refine_prompt(&bg, Some("a dog")), "a dog, with a forest in the background");
        assert_eq!(caption_without("a book and a cup", "cup").unwrap(), "a book");
        assert_eq!(caption_without("two red apples, a pear", "red apple").unwrap(), "a pear");
        assert_eq!(caption_without("a cat", "dog"), None);
    }

    #[test]
    fn plan_validation() {
        let mut p = parsed("add a bird in the top left");
        assert!(p.validate().is_ok());
        p.region_hint = None;
        assert!(p.validate().is_err());
        let mut r = parsed("replace the cat with a dog");
        r.editing_object.clear();
        assert!(r.validate().is_err());
        let mut bad = parsed("remove the cat");
        bad.region_hint = Some([0.5, 0.1, 0.4, 0.9]);
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn parser_is_total(s in "[a-zA-Z ,.!']{1,60}") {
            match parse_instruction(&s) {
                Ok(p) => {
                    prop_assert!(p.validate().is_ok(), "{:?}", p);
                    if p.category == EditCategory::Addition {
                        let b = compute_addition_region(&p, 64, 48).unwrap();
                        prop_assert!(valid_bbox(&b));
                    }
                }
                Err(e) => prop_assert_eq!(e, PromptistError::EmptyInstruction),
            }
        }

        #[test]
        fn addition_boxes_are_ordered(
            pos in prop::sample::select(vec!["", "top", "bottom", "left", "right", "top left", "bottom right corner", "corner", "left corner", "upper"]),
            size in prop::sample::select(vec!["", "small", "large", "huge"]),
            w in 1usize..2000,
            h in 1usize..2000,
        ) {
            let p = parsed(&format!("add a {size} box at the {pos}"));
            let b = compute_addition_region(&p, w, h).unwrap();
            prop_assert!(valid_bbox(&b), "{:?}", b);
        }
    }
}
