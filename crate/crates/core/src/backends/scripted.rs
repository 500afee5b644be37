//! Deterministic test double for every model-backed role.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde_json::json;

use super::synthetic::{probe_feature, SyntheticJudge, SyntheticSpec};
use super::{BackendError, ImageJudge, TextReasoner};
use crate::agents::{ReasonerEnvelope, Role, RoleInput};
use crate::memory::{token_budget, token_estimate};

pub type ReplyFn = Arc<dyn Fn(&ReasonerEnvelope) -> Result<String, BackendError> + Send + Sync>;

#[derive(Clone)]
pub enum Policy {
    /// The same reply every time.
    Reply(String),
    /// Call `k` gets reply `k`; the last reply repeats.
    Sequence(Vec<String>),
    Fn(ReplyFn),
    /// Skill selection by keyword overlap between prompt and manifest.
    KeywordSelect,
    /// Prompt enhancement that keeps the user prompt as the tail.
    Enhance,
    /// One "Is there a <f> in the image?" probe per feature.
    FeatureProbes,
    /// Raise emphasis on the lowest-indexed failing feature by one.
    FixOne,
    /// Always declare that no edit helps (the loop resamples).
    NoOp,
    /// First sentence of the trace, cut to the compression budget.
    ExtractiveFirstSentence,
    /// Exact judging of synthetic feature maps.
    FeatureJudge,
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Reply(r) => f.debug_tuple("Reply").field(r).finish(),
            Policy::Sequence(s) => f.debug_tuple("Sequence").field(s).finish(),
            Policy::Fn(_) => f.write_str("Fn(..)"),
            Policy::KeywordSelect => f.write_str("KeywordSelect"),
            Policy::Enhance => f.write_str("Enhance"),
            Policy::FeatureProbes => f.write_str("FeatureProbes"),
            Policy::FixOne => f.write_str("FixOne"),
            Policy::NoOp => f.write_str("NoOp"),
            Policy::ExtractiveFirstSentence => f.write_str("ExtractiveFirstSentence"),
            Policy::FeatureJudge => f.write_str("FeatureJudge"),
        }
    }
}

#[derive(Debug, Default)]
pub struct ScriptedReasoner {
    policies: HashMap<Role, Policy>,
    calls: Mutex<HashMap<Role, usize>>,
    captured: Option<Mutex<Vec<ReasonerEnvelope>>>,
}

impl ScriptedReasoner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Policies used by the synthetic backend, with the given refiner.
    pub fn synthetic_defaults(refiner: Policy) -> Self {
        Self::new()
            .with(Role::PlannerSelect, Policy::KeywordSelect)
            .with(Role::PlannerApply, Policy::Enhance)
            .with(Role::Decomposer, Policy::FeatureProbes)
            .with(Role::Verifier, Policy::FeatureJudge)
            .with(Role::Refiner, refiner)
            .with(Role::Compressor, Policy::ExtractiveFirstSentence)
    }

    pub fn with(mut self, role: Role, policy: Policy) -> Self {
        self.policies.insert(role, policy);
        self
    }

    /// Keep a copy of every envelope received.
    pub fn with_capture(mut self) -> Self {
        self.captured = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn captured(&self) -> Vec<ReasonerEnvelope> {
        self.captured
            .as_ref()
            .map(|c| c.lock().expect("capture lock").clone())
            .unwrap_or_default()
    }

    pub fn calls(&self, role: Role) -> usize {
        self.calls.lock().expect("call lock").get(&role).copied().unwrap_or(0)
    }

    fn respond(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        if let Some(c) = &self.captured {
            c.lock().expect("capture lock").push(envelope.clone());
        }
        let call = {
            let mut calls = self.calls.lock().expect("call lock");
            let n = calls.entry(envelope.role).or_insert(0);
            *n += 1;
            *n - 1
        };
        let policy = self
            .policies
            .get(&envelope.role)
            .ok_or(BackendError::UnscriptedRole(envelope.role))?;
        match policy {
            Policy::Reply(r) => Ok(r.clone()),
            Policy::Sequence(replies) => replies
                .get(call.min(replies.len().saturating_sub(1)))
                .cloned()
                .ok_or(BackendError::UnscriptedRole(envelope.role)),
            Policy::Fn(f) => f(envelope),
            Policy::KeywordSelect => with_input(envelope, keyword_select),
            Policy::Enhance => with_input(envelope, enhance),
            Policy::FeatureProbes => with_input(envelope, feature_probes),
            Policy::FixOne => with_input(envelope, fix_one),
            Policy::NoOp => with_input(envelope, no_op),
            Policy::ExtractiveFirstSentence => with_input(envelope, first_sentence),
            Policy::FeatureJudge => SyntheticJudge.judge(envelope),
        }
    }
}

impl TextReasoner for ScriptedReasoner {
    fn complete(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.respond(envelope)
    }
}

impl ImageJudge for ScriptedReasoner {
    fn judge(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.respond(envelope)
    }
}

fn with_input(
    envelope: &ReasonerEnvelope,
    f: fn(&RoleInput) -> Option<String>,
) -> Result<String, BackendError> {
    f(&envelope.input).ok_or_else(|| {
        BackendError::InvalidResponse(format!(
            "policy does not handle {} input",
            envelope.role
        ))
    })
}

const KEYWORD_STOPWORDS: &[&str] = &[
    "with", "that", "this", "image", "images", "prompt", "prompts", "from", "into", "when",
    "such", "more", "than", "their", "which", "where", "other", "about", "every", "make",
    "makes", "scene", "scenes", "drawing",
];

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn keyword_select(input: &RoleInput) -> Option<String> {
    let RoleInput::PlannerSelect {
        user_prompt,
        manifest,
        max_skills,
    } = input
    else {
        return None;
    };
    let prompt_words: BTreeSet<String> = words(user_prompt).collect();
    let lower = user_prompt.trim_start().to_lowercase();
    let mut scored: Vec<(usize, usize, &str)> = manifest
        .iter()
        .enumerate()
        .map(|(pos, h)| {
            let prefixed = lower.starts_with(&format!("{}:", h.name.to_lowercase()));
            let keywords: BTreeSet<String> = words(&h.name)
                .chain(words(&h.description))
                .filter(|w| w.chars().count() >= 4 && !KEYWORD_STOPWORDS.contains(&w.as_str()))
                .collect();
            let overlap = keywords.intersection(&prompt_words).count();
            let score = if prefixed { 1000 + overlap } else { overlap };
            (score, pos, h.name.as_str())
        })
        .filter(|(score, ..)| *score > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let chosen: Vec<&str> = scored.iter().take(*max_skills).map(|s| s.2).collect();
    Some(json!({ "skills": chosen }).to_string())
}

fn enhance(input: &RoleInput) -> Option<String> {
    let RoleInput::PlannerApply { user_prompt, skills } = input else {
        return None;
    };
    let prompt = if skills.is_empty() {
        format!("High quality, detailed rendering. {}", user_prompt.trim())
    } else {
        format!(
            "High quality, detailed rendering following the {} guidance. {}",
            skills.join(" and "),
            user_prompt.trim()
        )
    };
    Some(json!({ "prompt": prompt }).to_string())
}

fn feature_probes(input: &RoleInput) -> Option<String> {
    let RoleInput::Decomposer { user_prompt, .. } = input else {
        return None;
    };
    let spec = SyntheticSpec::parse(user_prompt);
    let features: Vec<String> = if spec.features.is_empty() {
        let mut seen = Vec::new();
        for w in words(user_prompt) {
            if !seen.contains(&w) {
                seen.push(w);
            }
        }
        seen
    } else {
        spec.features.into_iter().map(|(f, _)| f).collect()
    };
    let probes: Vec<String> = features
        .iter()
        .map(|f| format!("Is there a {f} in the image?"))
        .collect();
    Some(json!({ "criteria": probes }).to_string())
}

fn fix_one(input: &RoleInput) -> Option<String> {
    let RoleInput::Refiner {
        current,
        criteria,
        verdicts,
        history,
    } = input
    else {
        return None;
    };
    let failing: Vec<u32> = criteria
        .iter()
        .zip(verdicts)
        .filter(|(_, &v)| !v)
        .map(|(c, _)| c.id)
        .collect();
    let memory_note = match history.iter().rev().find_map(|r| r.experience.as_deref()) {
        Some(e) => format!(" Memory from {} earlier attempt(s) says: {e}", history.len()),
        None => format!(" There are {} earlier attempt(s) without notes.", history.len()),
    };
    let target = criteria
        .iter()
        .zip(verdicts)
        .find_map(|(c, &v)| (!v).then(|| probe_feature(&c.probe).map(|f| (c, f))).flatten());
    let Some((criterion, feature)) = target else {
        let reasoning = format!(
            "No failing criterion names a feature I can strengthen (failing: {failing:?}).{memory_note}"
        );
        return Some(json!({ "reasoning": reasoning, "no_change": true }).to_string());
    };
    let mut spec = SyntheticSpec::parse(&current.text);
    let before = spec.emphasis(&feature).unwrap_or(0);
    match spec.features.iter_mut().find(|(f, _)| *f == feature) {
        Some((_, e)) => *e += 1,
        None => spec.features.push((feature.clone(), 1)),
    }
    let prompt = spec.rewrite(&current.text);
    let reasoning = format!(
        "Criterion {} failed because {feature} was missing from the image. \
         Raising the emphasis on {feature} from {before} to {} so the generator keeps it. \
         Failing criteria this round: {failing:?}; the others are left for later rounds.{memory_note}",
        criterion.id,
        before + 1
    );
    Some(json!({ "reasoning": reasoning, "prompt": prompt }).to_string())
}

fn no_op(input: &RoleInput) -> Option<String> {
    let RoleInput::Refiner {
        criteria, verdicts, ..
    } = input
    else {
        return None;
    };
    let failing: Vec<u32> = criteria
        .iter()
        .zip(verdicts)
        .filter(|(_, &v)| !v)
        .map(|(c, _)| c.id)
        .collect();
    let reasoning = format!(
        "Keeping the prompt unchanged and resampling. Failing criteria were {failing:?}; \
         a fresh sample may include the missing features."
    );
    Some(json!({ "reasoning": reasoning, "no_change": true }).to_string())
}

fn first_sentence(input: &RoleInput) -> Option<String> {
    let RoleInput::Compressor { trace, .. } = input else {
        return None;
    };
    let trimmed = trace.trim();
    let end = trimmed
        .char_indices()
        .find(|&(i, c)| {
            matches!(c, '.' | '!' | '?')
                && trimmed[i + c.len_utf8()..]
                    .chars()
                    .next()
                    .is_none_or(char::is_whitespace)
        })
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(trimmed.len());
    let sentence = &trimmed[..end];
    let budget = token_budget(token_estimate(trace)).max(1);
    let text = sentence
        .split_whitespace()
        .take(budget)
        .collect::<Vec<_>>()
        .join(" ");
    Some(json!({ "experience": text }).to_string())
}
