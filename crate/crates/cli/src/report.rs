//! `inspect` and `skills`.

use std::io::{self, Write};
use std::path::Path;

use gems_core::engine::select_best;
use gems_core::skills::{self, SkillRegistry, ValidationReport, SKILL_FILE};
use gems_core::types::{Outcome, Trajectory};
use serde_json::json;

const EXCERPT_CHARS: usize = 48;

fn excerpt(text: &str, max: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max {
        flat
    } else {
        let cut: String = flat.chars().take(max.saturating_sub(3)).collect();
        format!("{cut}...")
    }
}

/// Iteration the report marks: the success iteration, or the best one on
/// exhaustion. Aborted and unfinished runs mark nothing.
pub fn marked_iteration(t: &Trajectory) -> Option<u32> {
    t.outcome.map(|o| o.final_iteration())
}

pub fn write_inspect(t: &Trajectory, warnings: &[String], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "run: {}", t.run_id)?;
    writeln!(out, "prompt: {}", excerpt(&t.user_prompt.text, 200))?;
    let skills = if t.triggered_skills.is_empty() {
        "none".to_string()
    } else {
        t.triggered_skills.join(", ")
    };
    writeln!(out, "triggered skills: {skills}")?;
    writeln!(out, "criteria: {}", t.criteria.len())?;
    for c in &t.criteria {
        writeln!(out, "  {}. {}", c.id, c.probe)?;
    }
    let marked = marked_iteration(t);
    writeln!(out, "   iter  pass    {:<w$}  experience", "prompt", w = EXCERPT_CHARS)?;
    for r in &t.iterations {
        let mark = if Some(r.iteration) == marked { '*' } else { ' ' };
        let pass = format!("{}/{}", r.pass_count(), r.verdicts.len());
        let exp = r.experience.as_deref().map(|e| excerpt(e, EXCERPT_CHARS)).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{mark} {:>5}  {pass:<6}  {:<w$}  {exp}",
            r.iteration,
            excerpt(&r.prompt, EXCERPT_CHARS),
            w = EXCERPT_CHARS
        )?;
    }
    match (t.outcome, &t.abort) {
        (Some(Outcome::EarlySuccess { iteration }), _) => {
            writeln!(out, "outcome: early_success at iteration {iteration}")?;
        }
        (Some(Outcome::BudgetExhausted { iteration }), _) => {
            writeln!(out, "outcome: budget_exhausted")?;
            let counts: Vec<String> = t.pass_counts().iter().map(usize::to_string).collect();
            writeln!(out, "best-of: iteration {iteration} (pass counts {})", counts.join(", "))?;
        }
        (None, Some(a)) => {
            let at = a.iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default();
            writeln!(out, "outcome: aborted during {}{at}: {}", a.phase.as_str(), a.reason)?;
        }
        (None, None) => writeln!(out, "outcome: in progress")?,
    }
    if !t.warnings.is_empty() {
        writeln!(out, "warnings: {}", t.warnings.len())?;
        for w in &t.warnings {
            let at = w.iteration.map(|i| format!(" #{i}")).unwrap_or_default();
            writeln!(out, "  [{}{at}] {}", w.phase.as_str(), w.message)?;
        }
    }
    for w in warnings {
        writeln!(out, "load warning: {w}")?;
    }
    Ok(())
}

pub fn inspect_json(t: &Trajectory, warnings: &[String]) -> serde_json::Value {
    json!({
        "trajectory": t,
        "marked_iteration": marked_iteration(t),
        "best_iteration": select_best(t),
        "load_warnings": warnings,
    })
}

/// Prints the manifest. Fails if any body was read while listing.
pub fn skills_list(registry: &SkillRegistry, json_mode: bool, out: &mut dyn Write, err: &mut dyn Write) -> io::Result<bool> {
    for d in registry.diagnostics() {
        writeln!(err, "warning: {d}")?;
    }
    let manifest = registry.expose_manifest();
    if json_mode {
        writeln!(out, "{}", json!({ "skills": manifest.headers, "manifest_bytes": manifest.byte_size() }))?;
    } else {
        for h in &manifest.headers {
            writeln!(out, "{}: {}", h.name, h.description)?;
        }
        writeln!(out, "{} skill(s), {} manifest bytes", manifest.headers.len(), manifest.byte_size())?;
    }
    let leaked: Vec<String> = registry
        .ledger_all()
        .into_iter()
        .filter(|(_, l)| l.body_loads > 0 || l.body_bytes_exposed > 0)
        .map(|(n, _)| n)
        .collect();
    if !leaked.is_empty() {
        writeln!(err, "error: skill bodies were read while listing: {}", leaked.join(", "))?;
        return Ok(false);
    }
    Ok(true)
}

/// Validates one skill, or every skill under a root directory.
pub fn skills_validate(path: &Path) -> Vec<ValidationReport> {
    if path.is_dir() && !path.join(SKILL_FILE).exists() {
        let registry = skills::scan(path).ok();
        let mut dirs: Vec<_> = std::fs::read_dir(path)
            .map(|rd| rd.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect())
            .unwrap_or_default();
        dirs.sort();
        if dirs.is_empty() {
            return Vec::new();
        }
        return dirs.iter().map(|d| skills::validate(d, registry.as_ref())).collect();
    }
    vec![skills::validate(path, None)]
}

pub fn write_validation(reports: &[ValidationReport], out: &mut dyn Write) -> io::Result<()> {
    if reports.is_empty() {
        writeln!(out, "no skills found")?;
    }
    for r in reports {
        if r.is_valid() {
            writeln!(out, "ok: {}", r.path.display())?;
        }
        for v in &r.violations {
            writeln!(out, "{}: {v}", r.path.display())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn excerpts_are_flat_and_bounded() {
        assert_eq!(excerpt("a\n b   c", 10), "a b c");
        let long = "word ".repeat(40);
        let e = excerpt(&long, 20);
        assert_eq!(e.chars().count(), 20);
        assert!(e.ends_with("..."));
    }
}
