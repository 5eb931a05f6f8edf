//! Text-driven editing with a trained mapper.

use thiserror::Error;

use crate::mapper::{mapper_forward, ConditionMode, MapperError, MapperParams};
use crate::relevance::{apply_filter, channel_relevance, FilterConfig, RelevanceError, RelevanceMatrix};
use crate::store::TextTable;
use crate::world::{SyntheticWorld, WorldError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("no target attributes given")]
    NoAttributes,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("prompt `{0}` is not in the text table")]
    MissingPrompt(String),
    #[error("a relevance matrix is required when beta > 0")]
    MissingRelevance,
    #[error("dimension mismatch: {what} has {actual}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("interpolation weight {0} outside [0, 1]")]
    Omega(f64),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// Builds prompts of the form `face` and `face with A and B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub category: String,
    pub with: String,
    pub joiner: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            category: "face".into(),
            with: " with ".into(),
            joiner: " and ".into(),
        }
    }
}

impl PromptTemplate {
    pub fn new(category: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            ..Self::default()
        }
    }

    /// The bare category for no attributes; repeated attributes appear once,
    /// in first-mention order.
    pub fn prompt<S: AsRef<str>>(&self, attrs: &[S]) -> String {
        let mut uniq: Vec<&str> = Vec::new();
        for a in attrs {
            if !uniq.contains(&a.as_ref()) {
                uniq.push(a.as_ref());
            }
        }
        if uniq.is_empty() {
            self.category.clone()
        } else {
            format!("{}{}{}", self.category, self.with, uniq.join(&self.joiner))
        }
    }
}

/// Whole-prompt text embeddings.
pub trait TextEmbedder {
    fn embed(&self, template: &PromptTemplate, attrs: &[&str]) -> Result<Vec<f64>>;
}

impl TextEmbedder for TextTable {
    fn embed(&self, template: &PromptTemplate, attrs: &[&str]) -> Result<Vec<f64>> {
        let p = template.prompt(attrs);
        self.get(&p).ok_or(InferenceError::MissingPrompt(p))
    }
}

impl TextEmbedder for SyntheticWorld {
    fn embed(&self, _: &PromptTemplate, attrs: &[&str]) -> Result<Vec<f64>> {
        self.text_embed(attrs).map_err(|e| match e {
            WorldError::UnknownAttribute(a) => InferenceError::UnknownAttribute(a),
            other => InferenceError::UnknownAttribute(other.to_string()),
        })
    }
}

/// Source and target text embeddings of one edit.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPair {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl TextPair {
    /// `Δt = t_target - t_source`.
    pub fn delta(&self) -> Vec<f64> {
        self.target.iter().zip(&self.source).map(|(t, s)| t - s).collect()
    }

    /// The mapper condition for `mode` at inference time.
    pub fn condition(&self, mode: ConditionMode) -> Vec<f64> {
        match mode {
            ConditionMode::Delta => self.delta(),
            ConditionMode::Naive => self.target.clone(),
        }
    }
}

/// Embed `category` and `category with <target>`.
pub fn text_pair<E: TextEmbedder + ?Sized>(embedder: &E, template: &PromptTemplate, target: &[&str]) -> Result<TextPair> {
    text_pair_between(embedder, template, &[], target)
}

/// Embed two arbitrary attribute sets; attributes named in both cancel.
pub fn text_pair_between<E: TextEmbedder + ?Sized>(
    embedder: &E,
    template: &PromptTemplate,
    source: &[&str],
    target: &[&str],
) -> Result<TextPair> {
    if target.is_empty() && source.is_empty() {
        return Err(InferenceError::NoAttributes);
    }
    Ok(TextPair {
        source: embedder.embed(template, source)?,
        target: embedder.embed(template, target)?,
    })
}

/// `Δt` for the prompt pair (`category`, `category with attrs`).
pub fn build_text_delta<E: TextEmbedder + ?Sized>(attrs: &[&str], embedder: &E, template: &PromptTemplate) -> Result<Vec<f64>> {
    if attrs.is_empty() {
        return Err(InferenceError::NoAttributes);
    }
    Ok(text_pair(embedder, template, attrs)?.delta())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    /// `s' = s + Δs_filtered`
    pub edited: Vec<f64>,
    pub delta_filtered: Vec<f64>,
    /// Mapper output before filtering and scaling.
    pub delta_raw: Vec<f64>,
    /// Channels zeroed by the filter.
    pub zeroed: usize,
}

/// Predict, filter and apply one edit.
///
/// A zero `Δt` returns `s` unchanged without running the mapper.
pub fn edit(
    params: &MapperParams,
    mode: ConditionMode,
    s: &[f64],
    i: &[f64],
    texts: &TextPair,
    rs: Option<&RelevanceMatrix>,
    cfg: &FilterConfig,
) -> Result<EditResult> {
    cfg.validate()?;
    let arch = params.arch;
    let check = |what, expected: usize, actual: usize| {
        if expected == actual {
            Ok(())
        } else {
            Err(InferenceError::Dimension { what, expected, actual })
        }
    };
    check("style code", arch.style_dim(), s.len())?;
    check("image embedding", arch.clip_dim, i.len())?;
    check("source text", arch.clip_dim, texts.source.len())?;
    check("target text", arch.clip_dim, texts.target.len())?;
    if cfg.beta > 0.0 && rs.is_none() {
        return Err(InferenceError::MissingRelevance);
    }
    if let Some(rs) = rs {
        check("relevance rows", arch.style_dim(), rs.style_dim())?;
        check("relevance columns", arch.clip_dim, rs.clip_dim())?;
    }

    let dt = texts.delta();
    if dt.iter().all(|&v| v == 0.0) {
        let zero = vec![0.0; s.len()];
        return Ok(EditResult {
            edited: s.to_vec(),
            delta_filtered: zero.clone(),
            delta_raw: zero,
            zeroed: 0,
        });
    }

    let (raw, _) = mapper_forward(params, s, i, &texts.condition(mode))?;
    let (filtered, zeroed) = match rs {
        Some(rs) => {
            let r = channel_relevance(rs, &dt)?;
            let f = apply_filter(&raw, &r, cfg)?;
            let z = r.iter().filter(|&&rc| !cfg.keeps(rc)).count();
            (f, z)
        }
        None => (raw.iter().map(|v| cfg.strength * v).collect(), 0),
    };
    Ok(EditResult {
        edited: s.iter().zip(&filtered).map(|(a, b)| a + b).collect(),
        delta_filtered: filtered,
        delta_raw: raw,
        zeroed,
    })
}

/// `s_I = ω·a + (1 - ω)·b`.
pub fn interpolate(a: &[f64], b: &[f64], omega: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(InferenceError::Omega(omega));
    }
    if a.len() != b.len() {
        return Err(InferenceError::Dimension {
            what: "interpolation endpoint",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| omega * x + (1.0 - omega) * y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::MapperArch;
    use crate::numerics::{cosine, Init};
    use crate::world::{gen_world, WorldConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prompts() {
        let t = PromptTemplate::default();
        assert_eq!(t.prompt::<&str>(&[]), "face");
        assert_eq!(t.prompt(&["smile"]), "face with smile");
        assert_eq!(t.prompt(&["smile", "bangs", "smile"]), "face with smile and bangs");
    }

    #[test]
    fn table_lookup_and_errors() {
        let mut table = TextTable::new();
        table.push("face", &[1.0, 0.0]);
        table.push("face with smile", &[0.6, 0.8]);
        let t = PromptTemplate::default();
        let dt = build_text_delta(&["smile"], &table, &t).unwrap();
        assert!((dt[0] + 0.4).abs() < 1e-6 && (dt[1] - 0.8).abs() < 1e-6);
        assert_eq!(
            build_text_delta(&["beard"], &table, &t),
            Err(InferenceError::MissingPrompt("face with beard".into()))
        );
        assert_eq!(build_text_delta(&[], &table, &t), Err(InferenceError::NoAttributes));
    }

    #[test]
    fn shared_attributes_cancel() {
        let w = gen_world(&WorldConfig::default(), 2).unwrap();
        let t = PromptTemplate::default();
        let both = text_pair_between(&w, &t, &["bangs"], &["bangs", "smile"]).unwrap().delta();
        let only = text_pair(&w, &t, &["smile"]).unwrap().delta();
        assert!(cosine(&both, &only) > 0.99);
        let same = text_pair_between(&w, &t, &["bangs"], &["bangs"]).unwrap().delta();
        assert!(same.iter().all(|&v| v == 0.0));
        let rev = text_pair_between(&w, &t, &["smile"], &[]).unwrap();
        for (a, b) in rev.condition(ConditionMode::Delta).iter().zip(&only) {
            assert!((a + b).abs() < 1e-15);
        }
        assert_eq!(
            build_text_delta(&["moustache"], &w, &t),
            Err(InferenceError::UnknownAttribute("moustache".into()))
        );
    }

    #[test]
    fn text_delta_aligns_with_image_delta() {
        let w = gen_world(&WorldConfig::default(), 5).unwrap();
        let t = PromptTemplate::default();
        let s = w.style_mean.clone();
        let i0 = w.image_embed(&s, None);
        for a in &w.attributes {
            let dt = build_text_delta(&[a.name.as_str()], &w, &t).unwrap();
            let s2: Vec<f64> = s.iter().zip(&a.direction).map(|(x, d)| x + 0.05 * d).collect();
            let di: Vec<f64> = w.image_embed(&s2, None).iter().zip(&i0).map(|(x, y)| x - y).collect();
            assert!(cosine(&dt, &di) >= 0.9, "{}: {}", a.name, cosine(&dt, &di));
        }
    }

    fn params(arch: MapperArch) -> MapperParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        MapperParams::new(arch, Init::KaimingUniform, &mut rng).unwrap()
    }

    #[test]
    fn zero_text_delta_is_identity() {
        let arch = MapperArch::tiny();
        let p = params(arch);
        let s: Vec<f64> = (0..arch.style_dim()).map(|c| c as f64 * 0.01).collect();
        let i = vec![0.125; 64];
        let t = vec![0.0; 64];
        let texts = TextPair {
            source: t.clone(),
            target: t,
        };
        let rs = RelevanceMatrix {
            rows: ndarray::Array2::zeros((arch.style_dim(), 64)),
            probe: 0.1,
            samples: 1,
        };
        let out = edit(&p, ConditionMode::Delta, &s, &i, &texts, Some(&rs), &FilterConfig::default()).unwrap();
        assert_eq!(out.edited, s);
    }

    #[test]
    fn edit_errors_and_plain_path() {
        let arch = MapperArch::tiny();
        let p = params(arch);
        let s = vec![0.0; arch.style_dim()];
        let i = vec![0.125; 64];
        let mut target = vec![0.0; 64];
        target[0] = 1.0;
        let texts = TextPair {
            source: vec![0.125; 64],
            target,
        };
        assert_eq!(
            edit(&p, ConditionMode::Delta, &s, &i, &texts, None, &FilterConfig::default()),
            Err(InferenceError::MissingRelevance)
        );
        assert!(matches!(
            edit(&p, ConditionMode::Delta, &s[1..], &i, &texts, None, &FilterConfig::default()),
            Err(InferenceError::Dimension { .. })
        ));
        let plain = FilterConfig {
            beta: 0.0,
            strength: 2.0,
        };
        let out = edit(&p, ConditionMode::Delta, &s, &i, &texts, None, &plain).unwrap();
        let (raw, _) = mapper_forward(&p, &s, &i, &texts.delta()).unwrap();
        assert_eq!(out.delta_raw, raw);
        for (f, r) in out.delta_filtered.iter().zip(&raw) {
            assert_eq!(*f, 2.0 * r);
        }
        let again = edit(&p, ConditionMode::Delta, &s, &i, &texts, None, &plain).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = vec![0.3, -1.7, 2.25];
        let b = vec![-0.3, 1.7, -2.25];
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap(), vec![0.0; 3]);
        assert_eq!(interpolate(&a, &b, 1.5), Err(InferenceError::Omega(1.5)));
        assert!(interpolate(&a, &b, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_affine_in_omega(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6), w in 0.0f64..1.0) {
            let mid = interpolate(&a, &b, w).unwrap();
            for k in 0..6 {
                let expect = b[k] + w * (a[k] - b[k]);
                prop_assert!((mid[k] - expect).abs() < 1e-12);
            }
        }
    }
}
