//! Client for an external multimodal planner that returns [`EditPlan`]s.
//!
//! Wire format: `POST {instruction, image}` with the image as base64 PNG; the
//! reply is `{category, editing_object, target_prompt, region_hint}`. Anything
//! that goes wrong (network, status, schema, invariants) falls back to the
//! local rule parser.

use std::io::Read;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::promptist::{parse_instruction, valid_bbox, EditCategory, EditPlan, PromptistError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MllmClientConfig {
    pub endpoint: String,
    /// Overall budget in seconds shared by all attempts.
    pub timeout_secs: f64,
    /// Extra attempts after the first.
    pub retries: u32,
}

impl Default for MllmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_secs: 10.0,
            retries: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "lowercase")]
pub enum PlanSource {
    Remote,
    Fallback(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOutcome {
    pub plan: EditPlan,
    pub source: PlanSource,
}

#[derive(Serialize)]
struct Request<'a> {
    instruction: &'a str,
    image: String,
}

#[derive(Deserialize)]
struct Reply {
    category: String,
    editing_object: String,
    target_prompt: String,
    #[serde(default)]
    region_hint: Option<Vec<f64>>,
}

/// Turns a raw reply body into a plan that satisfies every plan invariant.
pub fn plan_from_reply(instruction: &str, body: &str) -> Result<EditPlan, String> {
    let reply: Reply = serde_json::from_str(body).map_err(|e| format!("malformed reply: {e}"))?;
    let category =
        EditCategory::parse(&reply.category).ok_or_else(|| format!("unknown category {:?}", reply.category))?;
    let region_hint = match reply.region_hint {
        None => None,
        Some(v) => {
            let b: [f64; 4] = v
                .try_into()
                .map_err(|v: Vec<f64>| format!("region_hint has {} values", v.len()))?;
            if !valid_bbox(&b) {
                return Err(format!("region_hint {b:?} is not a box in [0, 1]"));
            }
            Some(b)
        }
    };
    let plan = EditPlan {
        instruction: instruction.to_string(),
        category,
        editing_object: reply.editing_object.trim().to_string(),
        target_prompt: reply.target_prompt.trim().to_string(),
        region_hint,
        low_confidence: false,
    };
    plan.validate().map_err(|e| e.to_string())?;
    Ok(plan)
}

fn attempt(cfg: &MllmClientConfig, body: &str, remaining: Duration, instruction: &str) -> Result<EditPlan, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(remaining))
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .post(&cfg.endpoint)
        .header("content-type", "application/json")
        .send(body)
        .map_err(|e| format!("request failed: {e}"))?;
    let status = resp.status();
    let mut text = String::new();
    resp.body_mut()
        .as_reader()
        .read_to_string(&mut text)
        .map_err(|e| format!("reading reply failed: {e}"))?;
    if !status.is_success() {
        return Err(format!("endpoint returned {status}"));
    }
    plan_from_reply(instruction, &text)
}

/// Asks the remote planner, falling back to [`parse_instruction`] on any failure.
pub fn mllm_analyze(cfg: &MllmClientConfig, image_png: &[u8], instruction: &str) -> Result<AnalyzeOutcome, PromptistError> {
    if instruction.trim().is_empty() {
        return Err(PromptistError::EmptyInstruction);
    }
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.timeout_secs.max(0.0));
    let body = serde_json::to_string(&Request {
        instruction,
        image: base64::engine::general_purpose::STANDARD.encode(image_png),
    })
    .expect("request serialises");
    let mut reason = String::from("no endpoint configured");
    if !cfg.endpoint.is_empty() {
        for n in 0..=cfg.retries {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                reason = format!("{reason}; deadline reached");
                break;
            }
            match attempt(cfg, &body, remaining, instruction) {
                Ok(plan) => {
                    return Ok(AnalyzeOutcome {
                        plan,
                        source: PlanSource::Remote,
                    })
                }
                Err(e) => {
                    log::debug!("planner attempt {} failed: {e}", n + 1);
                    reason = e;
                }
            }
        }
    }
    log::warn!("falling back to rule-based planning: {reason}");
    Ok(AnalyzeOutcome {
        plan: parse_instruction(instruction)?,
        source: PlanSource::Fallback(reason),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_validation() {
        let ok = r#"{"category":"Replace","editing_object":"cat","target_prompt":"a dog","region_hint":null}"#;
        let p = plan_from_reply("x", ok).unwrap();
        assert_eq!((p.category, p.editing_object.as_str()), (EditCategory::Replace, "cat"));
        let unknown = r#"{"category":"Recolor","editing_object":"cat","target_prompt":"red","region_hint":null}"#;
        assert!(plan_from_reply("x", unknown).unwrap_err().contains("Recolor"));
        let short = r#"{"category":"Addition","editing_object":"cat","target_prompt":"a cat","region_hint":[0.1,0.2]}"#;
        assert!(plan_from_reply("x", short).is_err());
        let no_box = r#"{"category":"Addition","editing_object":"cat","target_prompt":"a cat"}"#;
        assert!(plan_from_reply("x", no_box).is_err());
        assert!(plan_from_reply("x", "not json").is_err());
    }

    #[test]
    fn no_endpoint_falls_back() {
        let out = mllm_analyze(&MllmClientConfig::default(), b"", "remove the cat").unwrap();
        assert_eq!(out.plan.category, EditCategory::Remove);
        assert!(matches!(out.source, PlanSource::Fallback(_)));
        assert_eq!(mllm_analyze(&MllmClientConfig::default(), b"", ""), Err(PromptistError::EmptyInstruction));
    }
}
