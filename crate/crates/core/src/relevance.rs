//! Per-channel relevance of style channels to directions in embedding space,
//! and the threshold filter built on it.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, norm};
use crate::store::{FindingKind, ValidationReport, NORM_TOLERANCE};

/// Mean-difference norms below this make a channel dead (zero row).
pub const DEAD_CHANNEL_NORM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelevanceError {
    #[error("per-channel sample count must be at least 1")]
    NoSamples,
    #[error("probe magnitude must be positive, got {0}")]
    BadProbe(f64),
    #[error("style samples have width {actual}, encoder expects {expected}")]
    StyleWidth { expected: usize, actual: usize },
    #[error("need at least one style sample")]
    EmptySampleSet,
    #[error("text direction has zero norm")]
    ZeroText,
    #[error("dimension mismatch: {what} has {actual}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("negative threshold {0}")]
    NegativeBeta(f64),
}

pub type Result<T> = std::result::Result<T, RelevanceError>;

/// Maps a style code to a unit-norm image embedding.
pub trait StyleEncoder: Sync {
    fn style_dim(&self) -> usize;
    fn clip_dim(&self) -> usize;
    fn encode(&self, s: &[f64]) -> Vec<f64>;
}

/// Rows are per-channel unit directions (or exactly zero for dead channels).
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    pub rows: Array2<f32>,
    /// Mean probe half-width across channels.
    pub probe: f64,
    /// Samples averaged per channel.
    pub samples: u32,
}

impl RelevanceMatrix {
    pub fn style_dim(&self) -> usize {
        self.rows.nrows()
    }

    pub fn clip_dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, c: usize) -> Vec<f64> {
        self.rows.row(c).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn row_norm(&self, c: usize) -> f64 {
        self.rows.row(c).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_dead(&self, c: usize) -> bool {
        self.rows.row(c).iter().all(|&v| v == 0.0)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for c in 0..self.style_dim() {
            if let Some(col) = self.rows.row(c).iter().position(|v| !v.is_finite()) {
                report.record(FindingKind::NonFiniteImage, (c, col));
            } else if !self.is_dead(c) && (self.row_norm(c) - 1.0).abs() > NORM_TOLERANCE {
                report.record(FindingKind::NormViolation, (c, 0));
            }
        }
        report
    }
}

/// How far to push each channel in either direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// The same half-width for every channel.
    Fixed(f64),
    /// A fraction of each channel's standard deviation over the sample set.
    StdFraction(f64),
}

impl Default for Probe {
    fn default() -> Self {
        Probe::StdFraction(0.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelevanceConfig {
    pub probe: Probe,
    pub samples: usize,
    pub seed: u64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            probe: Probe::default(),
            samples: 256,
            seed: 0,
        }
    }
}

fn channel_deltas(styles: ArrayView2<'_, f64>, probe: Probe) -> Result<Vec<f64>> {
    match probe {
        Probe::Fixed(d) if d > 0.0 && d.is_finite() => Ok(vec![d; styles.ncols()]),
        Probe::Fixed(d) => Err(RelevanceError::BadProbe(d)),
        Probe::StdFraction(f) if f > 0.0 && f.is_finite() => {
            let std = styles.std_axis(Axis(0), 0.0);
            // A constant channel still gets a usable probe.
            Ok(std.iter().map(|&s| f * if s > 0.0 { s } else { 1.0 }).collect())
        }
        Probe::StdFraction(f) => Err(RelevanceError::BadProbe(f)),
    }
}

/// Estimate the relevance matrix against `encoder`.
///
/// Channel `c` draws `cfg.samples` source codes from `styles` (with
/// replacement, from a stream seeded by `cfg.seed` and `c`), averages the
/// symmetric difference `enc(s + δ e_c) - enc(s - δ e_c)` and normalises it.
pub fn estimate_relevance<E: StyleEncoder + ?Sized>(
    encoder: &E,
    styles: ArrayView2<'_, f64>,
    cfg: &RelevanceConfig,
) -> Result<RelevanceMatrix> {
    if cfg.samples < 1 {
        return Err(RelevanceError::NoSamples);
    }
    if styles.nrows() == 0 {
        return Err(RelevanceError::EmptySampleSet);
    }
    let style_dim = encoder.style_dim();
    if styles.ncols() != style_dim {
        return Err(RelevanceError::StyleWidth {
            expected: style_dim,
            actual: styles.ncols(),
        });
    }
    let deltas = channel_deltas(styles, cfg.probe)?;
    let clip = encoder.clip_dim();
    let m = cfg.samples;

    let rows: Vec<Vec<f32>> = (0..style_dim)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64 + 1);
            let mut acc = vec![0.0; clip];
            let mut s = vec![0.0; style_dim];
            for _ in 0..m {
                let pick = rng.random_range(0..styles.nrows());
                s.iter_mut().zip(styles.row(pick)).for_each(|(d, &v)| *d = v);
                let base = s[c];
                s[c] = base + deltas[c];
                let plus = encoder.encode(&s);
                s[c] = base - deltas[c];
                let minus = encoder.encode(&s);
                for ((a, p), q) in acc.iter_mut().zip(&plus).zip(&minus) {
                    *a += p - q;
                }
            }
            let n = norm(&acc) / m as f64;
            if n < DEAD_CHANNEL_NORM {
                vec![0.0f32; clip]
            } else {
                let scale = 1.0 / norm(&acc);
                acc.iter().map(|v| (v * scale) as f32).collect()
            }
        })
        .collect();

    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Ok(RelevanceMatrix {
        rows: Array2::from_shape_vec((style_dim, clip), flat).expect("relevance shape"),
        probe: deltas.iter().sum::<f64>() / style_dim.max(1) as f64,
        samples: u32::try_from(m).unwrap_or(u32::MAX),
    })
}

/// `r_c = Rs[c] · Δt / ‖Δt‖`.
pub fn channel_relevance(rs: &RelevanceMatrix, delta_t: &[f64]) -> Result<Vec<f64>> {
    if delta_t.len() != rs.clip_dim() {
        return Err(RelevanceError::Dimension {
            what: "text direction",
            expected: rs.clip_dim(),
            actual: delta_t.len(),
        });
    }
    let n = norm(delta_t);
    if n == 0.0 {
        return Err(RelevanceError::ZeroText);
    }
    let unit: Vec<f64> = delta_t.iter().map(|v| v / n).collect();
    Ok((0..rs.style_dim()).map(|c| dot(&rs.row(c), &unit)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub beta: f64,
    pub strength: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            beta: 0.03,
            strength: 1.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.beta.is_nan() {
            return Err(RelevanceError::NegativeBeta(self.beta));
        }
        Ok(())
    }

    /// Whether a channel with relevance `r` survives.
    pub fn keeps(&self, r: f64) -> bool {
        r.abs() >= self.beta
    }
}

/// Zero every channel with `|r_c| < β` and scale the survivors.
pub fn apply_filter(delta_s: &[f64], r: &[f64], cfg: &FilterConfig) -> Result<Vec<f64>> {
    if delta_s.len() != r.len() {
        return Err(RelevanceError::Dimension {
            what: "relevance vector",
            expected: delta_s.len(),
            actual: r.len(),
        });
    }
    Ok(delta_s
        .iter()
        .zip(r)
        .map(|(&d, &rc)| if cfg.keeps(rc) { cfg.strength * d } else { 0.0 })
        .collect())
}

/// Indices of the channels `apply_filter` would zero.
pub fn zeroed_channels(r: &[f64], cfg: &FilterConfig) -> Vec<usize> {
    r.iter()
        .enumerate()
        .filter(|(_, &rc)| !cfg.keeps(rc))
        .map(|(c, _)| c)
        .collect()
}
