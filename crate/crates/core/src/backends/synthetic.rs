//! Synthetic world: a noisy feature-map generator and an exact judge.
//!
//! A prompt's spec is read from the text after its last `features:` marker.
//! Tokens are separated by whitespace or commas; `name^k` gives feature
//! `name` an emphasis of `k`. Repeated features add up their emphasis.
//!
//! Feature `f` is included iff a uniform draw `u < min(1, p + g * emphasis(f))`.
//! Draws come from ChaCha8 seeded with the iteration's sub-seed, one per
//! feature in order of first appearance.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, GeneratedImage, ImageGenerator, ImageJudge};
use crate::agents::{ReasonerEnvelope, RoleInput};
use crate::types::{Criterion, ImageArtifact, MediaKind, Prompt, VerificationVector};

const MARKER: &str = "features:";

static PROBE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bis there (?:an? )?(\S+) in the image\?").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub base_inclusion_probability: f64,
    pub emphasis_gain: f64,
}

impl SyntheticWorldConfig {
    pub fn new(p: f64, g: f64) -> Self {
        Self {
            base_inclusion_probability: p,
            emphasis_gain: g,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = self.base_inclusion_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("base inclusion probability {p} is outside [0, 1]"));
        }
        if !self.emphasis_gain.is_finite() || self.emphasis_gain < 0.0 {
            return Err(format!("emphasis gain {} must be finite and >= 0", self.emphasis_gain));
        }
        Ok(())
    }

    pub fn inclusion_probability(&self, emphasis: u32) -> f64 {
        (self.base_inclusion_probability + self.emphasis_gain * f64::from(emphasis)).min(1.0)
    }
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self::new(0.5, 0.25)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyntheticSpec {
    /// Features in order of first appearance, with accumulated emphasis.
    pub features: Vec<(String, u32)>,
}

fn valid_feature(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '-')
}

impl SyntheticSpec {
    /// Never fails; text without a `features:` tail yields an empty spec.
    pub fn parse(prompt: &str) -> Self {
        let lower = prompt.to_lowercase();
        let Some(pos) = lower.rfind(MARKER) else {
            return Self::default();
        };
        // to_lowercase can change byte lengths, so re-locate the tail in the original
        let tail = match prompt.get(pos + MARKER.len()..) {
            Some(t) if lower.len() == prompt.len() => t,
            _ => &lower[pos + MARKER.len()..],
        };
        let mut features: Vec<(String, u32)> = Vec::new();
        for token in tail.split(|c: char| c.is_whitespace() || c == ',') {
            let (name, emphasis) = match token.split_once('^') {
                Some((n, k)) => match k.parse::<u32>() {
                    Ok(k) => (n, k),
                    Err(_) => continue,
                },
                None => (token, 0),
            };
            let name = name.to_lowercase();
            if !valid_feature(&name) {
                continue;
            }
            match features.iter_mut().find(|(f, _)| *f == name) {
                Some((_, e)) => *e = e.saturating_add(emphasis),
                None => features.push((name, emphasis)),
            }
        }
        Self { features }
    }

    pub fn emphasis(&self, feature: &str) -> Option<u32> {
        self.features
            .iter()
            .find(|(f, _)| f == feature)
            .map(|(_, e)| *e)
    }

    /// Renders the spec back into tail form, `a b^2 c`.
    pub fn tail(&self) -> String {
        self.features
            .iter()
            .map(|(f, e)| if *e == 0 { f.clone() } else { format!("{f}^{e}") })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `prompt` with its feature tail replaced by this spec.
    pub fn rewrite(&self, prompt: &str) -> String {
        let lower = prompt.to_lowercase();
        match lower.rfind(MARKER) {
            Some(pos) if lower.len() == prompt.len() => {
                format!("{}{MARKER} {}", &prompt[..pos], self.tail())
            }
            _ => format!("{} {MARKER} {}", prompt.trim_end(), self.tail()),
        }
    }
}

/// Feature named by a probe of the form "Is there a <feature> in the image?".
pub fn probe_feature(probe: &str) -> Option<String> {
    PROBE
        .captures(probe)
        .map(|c| c[1].to_lowercase())
        .filter(|f| valid_feature(f))
}

#[derive(Serialize, Deserialize)]
struct FeatureMap {
    features: Vec<String>,
}

/// Decodes synthetic artifact content.
pub fn feature_map(content: &[u8]) -> Option<Vec<String>> {
    serde_json::from_slice::<FeatureMap>(content)
        .ok()
        .map(|m| m.features)
}

#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    world: SyntheticWorldConfig,
}

impl SyntheticGenerator {
    pub fn new(world: SyntheticWorldConfig) -> Self {
        Self { world }
    }

    pub fn draw(&self, spec: &SyntheticSpec, sub_seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        spec.features
            .iter()
            .filter(|(_, e)| {
                let u: f64 = rng.random();
                u < self.world.inclusion_probability(*e)
            })
            .map(|(f, _)| f.clone())
            .collect()
    }
}

impl ImageGenerator for SyntheticGenerator {
    fn generate(&self, prompt: &Prompt, sub_seed: u64) -> Result<GeneratedImage, BackendError> {
        let spec = SyntheticSpec::parse(&prompt.text);
        let features = self.draw(&spec, sub_seed);
        let content = serde_json::to_vec(&FeatureMap { features }).expect("feature map serializes");
        let metadata = BTreeMap::from([
            ("backend".to_string(), "synthetic".to_string()),
            ("seed".to_string(), sub_seed.to_string()),
            ("p".to_string(), self.world.base_inclusion_probability.to_string()),
            ("g".to_string(), self.world.emphasis_gain.to_string()),
        ]);
        Ok(GeneratedImage {
            content,
            media_kind: MediaKind::SyntheticFeatureMap,
            metadata,
        })
    }
}

/// Exact judging of a feature map. Returns the vector plus one warning per
/// probe that names no feature (those verdicts are 0).
pub fn synthetic_verify(artifact: &ImageArtifact, criteria: &[Criterion]) -> (VerificationVector, Vec<String>) {
    let present = feature_map(&artifact.content).unwrap_or_default();
    let mut warnings = Vec::new();
    let mut verdicts = Vec::with_capacity(criteria.len());
    let mut rationales = Vec::with_capacity(criteria.len());
    for c in criteria {
        match probe_feature(&c.probe) {
            Some(f) => {
                let hit = present.contains(&f);
                verdicts.push(hit);
                rationales.push(format!("{f} {}", if hit { "present" } else { "absent" }));
            }
            None => {
                warnings.push(format!("criterion {} names no feature: {}", c.id, c.probe));
                verdicts.push(false);
                rationales.push("unmappable criterion".to_string());
            }
        }
    }
    (
        VerificationVector {
            iteration: artifact.iteration,
            verdicts,
            rationales,
        },
        warnings,
    )
}

/// Judge for feature maps. Probes naming no feature get an `unmappable`
/// answer, which the verifier treats as unparseable and fails closed.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticJudge;

impl ImageJudge for SyntheticJudge {
    fn judge(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        let RoleInput::Verifier { criteria } = &envelope.input else {
            return Err(BackendError::InvalidResponse(
                "synthetic judge only answers verifier envelopes".into(),
            ));
        };
        let image = envelope.attached_images.first().ok_or_else(|| {
            BackendError::InvalidResponse("verifier envelope carries no image".into())
        })?;
        let present = feature_map(&image.bytes).unwrap_or_default();
        let lines: Vec<String> = criteria
            .iter()
            .map(|c| match probe_feature(&c.probe) {
                Some(f) if present.contains(&f) => format!("{}. yes - {f} is present", c.id),
                Some(f) => format!("{}. no - {f} is absent", c.id),
                None => format!("{}. unmappable - probe names no feature", c.id),
            })
            .collect();
        Ok(lines.join("\n"))
    }
}
