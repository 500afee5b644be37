//! Reply parsing. Each schema accepts a JSON object (optionally inside a
//! markdown code fence) and falls back to a line-based form:
//!
//! - skill selection: `SKILLS: a, b` or `NONE`
//! - enhanced prompt: `PROMPT: ...`
//! - criteria: numbered lines `1. Is ...?`
//! - verdicts: numbered lines `1. yes - rationale`
//! - refinement: `REASONING: ...` followed by `PROMPT: ...` or `NO_CHANGE`
//! - experience: `EXPERIENCE: ...`

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use super::{ExpectedSchema, ParsedReply, Payload, SchemaMismatch, Verdict};
use crate::types::normalize_probe;

static NUMBERED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:[-*]\s*)?(\d{1,4})\s*[.):]\s*(.+?)\s*$").unwrap());

static VERDICT_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*]\s*)?(?:criterion\s*|q\s*)?(\d{1,4})\s*[.):\-]\s*\**(yes|no|true|false|pass|fail)\b\**\s*[-:,.–]*\s*(.*?)\s*$",
    )
    .unwrap()
});

pub fn parse(raw: &str, schema: ExpectedSchema) -> Result<ParsedReply, SchemaMismatch> {
    let payload = match schema {
        ExpectedSchema::SkillSelection => parse_selection(raw),
        ExpectedSchema::EnhancedPrompt => parse_prompt(raw),
        ExpectedSchema::CriteriaList => parse_criteria(raw),
        ExpectedSchema::VerdictList { count } => parse_verdicts(raw, count),
        ExpectedSchema::Refinement => parse_refinement(raw),
        ExpectedSchema::Experience => parse_experience(raw),
    }
    .map_err(|reason| SchemaMismatch {
        schema,
        reason,
        raw: raw.to_string(),
    })?;
    Ok(ParsedReply {
        schema,
        payload,
        raw_text: raw.to_string(),
    })
}

/// Finds the first JSON object in `raw`: the whole text, a fenced code
/// block, or the span between the first `{` and the last `}`.
fn json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let trimmed = raw.trim();
    let mut candidates: Vec<&str> = vec![trimmed];
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            candidates.push(body[..end].trim());
        }
    }
    if let (Some(a), Some(b)) = (trimmed.find('{'), trimmed.rfind('}')) {
        if a < b {
            candidates.push(&trimmed[a..=b]);
        }
    }
    candidates.into_iter().find_map(|c| match serde_json::from_str::<Value>(c) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    })
}

/// Text following `MARKER:` (case-insensitive) at the start of a line, up
/// to the next line that starts another known marker.
fn marker_section(raw: &str, marker: &str, stop: &[&str]) -> Option<String> {
    let mut lines = raw.lines();
    let mut out: Vec<&str> = Vec::new();
    let mut found = false;
    for line in lines.by_ref() {
        if let Some(rest) = strip_marker(line, marker) {
            found = true;
            if !rest.trim().is_empty() {
                out.push(rest);
            }
            break;
        }
    }
    if !found {
        return None;
    }
    for line in lines {
        if stop
            .iter()
            .any(|m| strip_marker(line, m).is_some() || line.trim().eq_ignore_ascii_case(m))
        {
            break;
        }
        out.push(line);
    }
    let text = out.join("\n").trim().to_string();
    Some(text)
}

fn strip_marker<'a>(line: &'a str, marker: &str) -> Option<&'a str> {
    let t = line.trim_start();
    let head = t.get(..marker.len())?;
    if !head.eq_ignore_ascii_case(marker) {
        return None;
    }
    let rest = &t[marker.len()..];
    rest.strip_prefix(':').map(str::trim_start)
}

fn non_empty_str(v: &Value, what: &str) -> Result<String, String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Value::String(_) => Err(format!("{what} is empty")),
        _ => Err(format!("{what} is not a string")),
    }
}

fn parse_selection(raw: &str) -> Result<Payload, String> {
    if let Some(obj) = json_object(raw) {
        let skills = obj.get("skills").ok_or("missing `skills` key")?;
        return match skills {
            Value::Array(items) => items
                .iter()
                .map(|v| non_empty_str(v, "skill name"))
                .collect::<Result<Vec<_>, _>>()
                .map(Payload::SelectedSkills),
            Value::Null => Ok(Payload::SelectedSkills(Vec::new())),
            _ => Err("`skills` is not a list".into()),
        };
    }
    let trimmed = raw.trim();
    if trimmed.eq_ignore_ascii_case("none") || trimmed.eq_ignore_ascii_case("skills: none") {
        return Ok(Payload::SelectedSkills(Vec::new()));
    }
    if let Some(list) = marker_section(raw, "SKILLS", &[]) {
        if list.eq_ignore_ascii_case("none") || list.is_empty() {
            return Ok(Payload::SelectedSkills(Vec::new()));
        }
        return Ok(Payload::SelectedSkills(
            list.split([',', '\n'])
                .map(|s| s.trim().trim_matches('"').to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        ));
    }
    Err("no skill selection found".into())
}

fn parse_prompt(raw: &str) -> Result<Payload, String> {
    if let Some(obj) = json_object(raw) {
        let p = obj.get("prompt").ok_or("missing `prompt` key")?;
        return non_empty_str(p, "prompt").map(Payload::PromptText);
    }
    match marker_section(raw, "PROMPT", &[]) {
        Some(p) if !p.is_empty() => Ok(Payload::PromptText(p)),
        Some(_) => Err("prompt is empty".into()),
        None => Err("no prompt found".into()),
    }
}

fn parse_criteria(raw: &str) -> Result<Payload, String> {
    let probes: Vec<String> = if let Some(obj) = json_object(raw) {
        match obj.get("criteria") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    Value::Object(o) => o
                        .get("probe")
                        .or_else(|| o.get("question"))
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| "criterion object without `probe`".to_string()),
                    _ => Err("criterion is not a string".to_string()),
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err("`criteria` is not a list".into()),
            None => return Err("missing `criteria` key".into()),
        }
    } else {
        raw.lines()
            .filter_map(|l| NUMBERED.captures(l).map(|c| c[2].to_string()))
            .collect()
    };
    if probes.is_empty() {
        return Err("no criteria found".into());
    }
    probes
        .iter()
        .map(|p| normalize_probe(p).ok_or_else(|| "empty criterion".to_string()))
        .collect::<Result<Vec<_>, _>>()
        .map(Payload::Criteria)
}

fn answer_bit(answer: &str) -> Option<bool> {
    match answer.trim().to_ascii_lowercase().as_str() {
        "yes" | "true" | "pass" | "1" => Some(true),
        "no" | "false" | "fail" | "0" => Some(false),
        _ => None,
    }
}

/// Best-effort per-criterion parse. Slot `j` is `None` when criterion
/// `j + 1` has no unambiguous answer.
/// A reply with more entries than criteria is discarded whole.
pub fn parse_verdicts_partial(raw: &str, count: usize) -> Vec<Option<Verdict>> {
    let mut slots: Vec<Option<Verdict>> = vec![None; count];
    if declared_verdict_count(raw).is_some_and(|d| d > count) {
        return slots;
    }
    let mut conflicted = vec![false; count];
    let mut put = |id: usize, v: Verdict, slots: &mut Vec<Option<Verdict>>| {
        if id == 0 || id > count {
            return;
        }
        let slot = &mut slots[id - 1];
        match slot {
            Some(prev) if prev.pass != v.pass => conflicted[id - 1] = true,
            Some(_) => {}
            None => *slot = Some(v),
        }
    };

    if let Some(obj) = json_object(raw) {
        if let Some(Value::Array(items)) = obj.get("verdicts") {
            for (pos, item) in items.iter().enumerate() {
                let (id, answer, rationale) = match item {
                    Value::Object(o) => (
                        o.get("id").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos + 1),
                        match o.get("answer").or_else(|| o.get("verdict")) {
                            Some(Value::String(s)) => answer_bit(s),
                            Some(Value::Bool(b)) => Some(*b),
                            Some(Value::Number(n)) => n.as_u64().and_then(|n| answer_bit(&n.to_string())),
                            _ => None,
                        },
                        o.get("rationale").and_then(Value::as_str).unwrap_or("").to_string(),
                    ),
                    Value::String(s) => (pos + 1, answer_bit(s), String::new()),
                    Value::Bool(b) => (pos + 1, Some(*b), String::new()),
                    Value::Number(n) => (pos + 1, n.as_u64().and_then(|n| answer_bit(&n.to_string())), String::new()),
                    _ => (pos + 1, None, String::new()),
                };
                if let Some(pass) = answer {
                    put(id, Verdict { pass, rationale }, &mut slots);
                }
            }
        }
    } else {
        for line in raw.lines() {
            if let Some(c) = VERDICT_LINE.captures(line) {
                let Ok(id) = c[1].parse::<usize>() else { continue };
                if let Some(pass) = answer_bit(&c[2]) {
                    put(
                        id,
                        Verdict {
                            pass,
                            rationale: c[3].to_string(),
                        },
                        &mut slots,
                    );
                }
            }
        }
    }
    for (slot, bad) in slots.iter_mut().zip(conflicted) {
        if bad {
            *slot = None;
        }
    }
    slots
}

fn parse_verdicts(raw: &str, count: usize) -> Result<Payload, String> {
    if count == 0 {
        return Err("no criteria to judge".into());
    }
    let declared = declared_verdict_count(raw);
    if let Some(d) = declared {
        if d != count {
            return Err(format!("expected {count} verdicts, reply has {d}"));
        }
    }
    let partial = parse_verdicts_partial(raw, count);
    let missing: Vec<usize> = partial
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i + 1)
        .collect();
    if !missing.is_empty() {
        return Err(format!(
            "expected {count} verdicts, missing or ambiguous: {missing:?}"
        ));
    }
    Ok(Payload::Verdicts(partial.into_iter().flatten().collect()))
}

/// Number of verdict entries the reply claims to contain, when countable.
fn declared_verdict_count(raw: &str) -> Option<usize> {
    if let Some(obj) = json_object(raw) {
        return match obj.get("verdicts") {
            Some(Value::Array(items)) => Some(items.len()),
            _ => Some(0),
        };
    }
    let n = raw.lines().filter(|l| VERDICT_LINE.is_match(l)).count();
    Some(n)
}

fn parse_refinement(raw: &str) -> Result<Payload, String> {
    if let Some(obj) = json_object(raw) {
        let trace = match obj.get("reasoning") {
            Some(Value::String(s)) => s.trim().to_string(),
            Some(_) => return Err("`reasoning` is not a string".into()),
            None => String::new(),
        };
        let no_change = matches!(obj.get("no_change"), Some(Value::Bool(true)));
        let prompt = match obj.get("prompt") {
            Some(v @ Value::String(_)) => Some(non_empty_str(v, "prompt")?),
            Some(Value::Null) | None => None,
            Some(_) => return Err("`prompt` is not a string".into()),
        };
        if prompt.is_none() && !no_change {
            return Err("neither `prompt` nor `no_change` given".into());
        }
        return Ok(Payload::Refinement {
            prompt,
            trace,
            no_change,
        });
    }
    let trace = marker_section(raw, "REASONING", &["PROMPT", "NO_CHANGE"]).unwrap_or_default();
    let no_change = raw.lines().any(|l| l.trim().eq_ignore_ascii_case("NO_CHANGE"));
    let prompt = marker_section(raw, "PROMPT", &["REASONING"]).filter(|p| !p.is_empty());
    if prompt.is_none() && !no_change {
        return Err("no refined prompt found".into());
    }
    Ok(Payload::Refinement {
        prompt,
        trace,
        no_change,
    })
}

fn parse_experience(raw: &str) -> Result<Payload, String> {
    if let Some(obj) = json_object(raw) {
        let e = obj.get("experience").ok_or("missing `experience` key")?;
        return non_empty_str(e, "experience").map(Payload::ExperienceText);
    }
    match marker_section(raw, "EXPERIENCE", &[]) {
        Some(e) if !e.is_empty() => Ok(Payload::ExperienceText(e)),
        Some(_) => Err("experience is empty".into()),
        None => Err("no experience found".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn verdict_bits(raw: &str, n: usize) -> Result<Vec<bool>, SchemaMismatch> {
        parse(raw, ExpectedSchema::VerdictList { count: n }).map(|r| match r.payload {
            Payload::Verdicts(v) => v.into_iter().map(|v| v.pass).collect(),
            other => panic!("unexpected payload {other:?}"),
        })
    }

    #[test]
    fn explicit_empty_selection() {
        let r = parse(r#"{"skills": []}"#, ExpectedSchema::SkillSelection).unwrap();
        assert_eq!(r.payload, Payload::SelectedSkills(vec![]));
        let r = parse("NONE", ExpectedSchema::SkillSelection).unwrap();
        assert_eq!(r.payload, Payload::SelectedSkills(vec![]));
        let r = parse("SKILLS: Text Rendering, Spatial Intelligence", ExpectedSchema::SkillSelection)
            .unwrap();
        assert_eq!(
            r.payload,
            Payload::SelectedSkills(vec!["Text Rendering".into(), "Spatial Intelligence".into()])
        );
        assert!(parse("I think text rendering", ExpectedSchema::SkillSelection).is_err());
        assert!(parse(r#"{"skills": [""]}"#, ExpectedSchema::SkillSelection).is_err());
    }

    #[test]
    fn line_verdicts() {
        assert_eq!(verdict_bits("1. yes\n2. no\n3. yes", 3).unwrap(), vec![true, false, true]);
        assert_eq!(
            verdict_bits("1) YES - red is visible\n2: No, the cube is blue", 2).unwrap(),
            vec![true, false]
        );
    }

    #[test]
    fn verdict_count_mismatch() {
        let err = verdict_bits("1. yes\n2. no", 3).unwrap_err();
        assert!(err.reason.contains("expected 3"), "{}", err.reason);
        assert!(verdict_bits("1. yes\n2. no\n3. yes\n4. no", 3).is_err());
        assert!(verdict_bits(r#"{"verdicts": ["yes", "no"]}"#, 3).is_err());
    }

    #[test]
    fn json_verdicts_with_rationales() {
        let raw = r#"```json
{"verdicts": [{"id": 1, "answer": "yes", "rationale": "red"}, {"id": 2, "answer": "no", "rationale": "round"}]}
```"#;
        let r = parse(raw, ExpectedSchema::VerdictList { count: 2 }).unwrap();
        assert_eq!(
            r.payload,
            Payload::Verdicts(vec![
                Verdict { pass: true, rationale: "red".into() },
                Verdict { pass: false, rationale: "round".into() }
            ])
        );
    }

    #[test]
    fn maybe_is_not_an_answer() {
        assert!(verdict_bits("1. yes\n2. maybe\n3. no", 3).is_err());
        let partial = parse_verdicts_partial("1. yes\n2. maybe\n3. no", 3);
        assert_eq!(partial.iter().map(|v| v.as_ref().map(|v| v.pass)).collect::<Vec<_>>(),
            vec![Some(true), None, Some(false)]);
    }

    #[test]
    fn conflicting_duplicate_is_ambiguous() {
        let partial = parse_verdicts_partial("1. yes\n1. no\n2. yes", 3);
        assert!(partial[0].is_none());
        assert!(partial[1].as_ref().unwrap().pass);
        assert!(partial[2].is_none());
    }

    #[test]
    fn surplus_entries_void_the_partial_parse() {
        let partial = parse_verdicts_partial("1. yes\n2. yes\n3. yes\n4. yes", 3);
        assert!(partial.iter().all(Option::is_none));
    }

    #[test]
    fn criteria_json_and_lines() {
        let r = parse(r#"{"criteria": ["Is there a cat in the image"]}"#, ExpectedSchema::CriteriaList)
            .unwrap();
        assert_eq!(r.payload, Payload::Criteria(vec!["Is there a cat in the image?".into()]));
        let r = parse("Here you go:\n1. Are there two apples?\n2. Are the apples red?\n3) Is there a wooden table?",
            ExpectedSchema::CriteriaList).unwrap();
        assert_eq!(
            r.payload,
            Payload::Criteria(vec![
                "Are there two apples?".into(),
                "Are the apples red?".into(),
                "Is there a wooden table?".into()
            ])
        );
        assert!(parse("no list here", ExpectedSchema::CriteriaList).is_err());
        assert!(parse(r#"{"criteria": []}"#, ExpectedSchema::CriteriaList).is_err());
    }

    #[test]
    fn refinement_forms() {
        let r = parse(r#"{"reasoning": "cube not red", "prompt": "a bright red cube"}"#,
            ExpectedSchema::Refinement).unwrap();
        assert_eq!(r.payload, Payload::Refinement {
            prompt: Some("a bright red cube".into()),
            trace: "cube not red".into(),
            no_change: false
        });
        let r = parse("REASONING: nothing more to try\nNO_CHANGE", ExpectedSchema::Refinement).unwrap();
        assert_eq!(r.payload, Payload::Refinement {
            prompt: None,
            trace: "nothing more to try".into(),
            no_change: true
        });
        let r = parse("REASONING:\nthe cube is blue\nso say red twice\nPROMPT:\na red, red cube",
            ExpectedSchema::Refinement).unwrap();
        assert_eq!(r.payload, Payload::Refinement {
            prompt: Some("a red, red cube".into()),
            trace: "the cube is blue\nso say red twice".into(),
            no_change: false
        });
        assert!(parse(r#"{"reasoning": "hmm"}"#, ExpectedSchema::Refinement).is_err());
    }

    #[test]
    fn prompt_and_experience() {
        let r = parse(r#"{"prompt": "  a cat  "}"#, ExpectedSchema::EnhancedPrompt).unwrap();
        assert_eq!(r.payload, Payload::PromptText("a cat".into()));
        assert!(parse(r#"{"prompt": ""}"#, ExpectedSchema::EnhancedPrompt).is_err());
        let r = parse("EXPERIENCE: color words fixed the color check", ExpectedSchema::Experience).unwrap();
        assert_eq!(r.payload, Payload::ExperienceText("color words fixed the color check".into()));
        assert!(parse("", ExpectedSchema::Experience).is_err());
    }

    fn all_schemas() -> Vec<ExpectedSchema> {
        vec![
            ExpectedSchema::SkillSelection,
            ExpectedSchema::EnhancedPrompt,
            ExpectedSchema::CriteriaList,
            ExpectedSchema::VerdictList { count: 3 },
            ExpectedSchema::Refinement,
            ExpectedSchema::Experience,
        ]
    }

    proptest! {
        #[test]
        fn parser_never_panics(raw in "\\PC{0,200}") {
            for schema in all_schemas() {
                let _ = parse(&raw, schema);
            }
            let _ = parse_verdicts_partial(&raw, 4);
        }

        #[test]
        fn parser_never_panics_on_jsonish(raw in "[{}\\[\\]\":,0-9a-z \\n]{0,80}") {
            for schema in all_schemas() {
                let _ = parse(&raw, schema);
            }
        }

        #[test]
        fn well_formed_verdicts_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..12)) {
            let raw = bits.iter().enumerate()
                .map(|(i, &b)| format!("{}. {}", i + 1, if b { "yes" } else { "no" }))
                .collect::<Vec<_>>().join("\n");
            prop_assert_eq!(verdict_bits(&raw, bits.len()).unwrap(), bits);
        }
    }
}
