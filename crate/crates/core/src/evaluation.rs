//! Desk-scale metrics against the synthetic world, and PCA export.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{edit, text_pair, InferenceError, PromptTemplate};
use crate::mapper::{ConditionMode, MapperParams};
use crate::numerics::cosine;
use crate::relevance::{FilterConfig, RelevanceMatrix};
use crate::store::EmbeddingDataset;
use crate::training::{train, TrainConfig, TrainError};
use crate::world::{least_squares_map, EmbeddingPair, SyntheticWorld, WorldError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("dimension mismatch: {what} has {actual}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(EvalError::Dimension { what, expected, actual })
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cosine statistics of raw `(i, t)` pairs versus `(Δi, Δt)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub raw_mean: f64,
    pub raw_std: f64,
    pub delta_mean: f64,
    pub delta_std: f64,
    pub pairs: usize,
}

impl GapStats {
    /// `delta_mean - raw_mean`.
    pub fn margin(&self) -> f64 {
        self.delta_mean - self.raw_mean
    }

    pub fn to_csv(&self) -> String {
        format!(
            "pairs,raw_mean,raw_std,delta_mean,delta_std,margin\n{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            self.pairs,
            self.raw_mean,
            self.raw_std,
            self.delta_mean,
            self.delta_std,
            self.margin()
        )
    }
}

pub fn gap_stats(raw: &[(Vec<f64>, Vec<f64>)], delta: &[(Vec<f64>, Vec<f64>)]) -> Result<GapStats> {
    let got = raw.len().min(delta.len());
    if got < 2 {
        return Err(EvalError::TooFew { needed: 2, got });
    }
    let r: Vec<f64> = raw.iter().map(|(a, b)| cosine(a, b)).collect();
    let d: Vec<f64> = delta.iter().map(|(a, b)| cosine(a, b)).collect();
    let (raw_mean, raw_std) = mean_std(&r);
    let (delta_mean, delta_std) = mean_std(&d);
    Ok(GapStats {
        raw_mean,
        raw_std,
        delta_mean,
        delta_std,
        pairs: got,
    })
}

pub fn gap_stats_of_pairs(pairs: &[EmbeddingPair]) -> Result<GapStats> {
    let raw: Vec<_> = pairs.iter().map(|p| (p.image.clone(), p.text.clone())).collect();
    let delta: Vec<_> = pairs
        .iter()
        .map(|p| (p.delta_image.clone(), p.delta_text.clone()))
        .collect();
    gap_stats(&raw, &delta)
}

/// `cos(Δs_pred, Δs_true)`, 0 when either is zero.
pub fn direction_accuracy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("prediction", truth.len(), pred.len())?;
    Ok(cosine(pred, truth))
}

/// Fraction of the squared magnitude of `delta` outside `support`; 0 for a
/// zero vector.
pub fn leakage(delta: &[f64], support: &[usize]) -> f64 {
    let total: f64 = delta.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = support.iter().filter_map(|&c| delta.get(c)).map(|v| v * v).sum();
    ((total - inside) / total).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Source codes drawn per attribute.
    pub sources: usize,
    pub seed: u64,
    pub filter: FilterConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sources: 64,
            seed: 0,
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMetrics {
    pub name: String,
    pub accuracy: f64,
    pub leakage: f64,
    /// Total variance of the edited code `s + Δs` across sources.
    pub edited_variance: f64,
}

/// Per-attribute averages of one model on the world.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMetrics {
    pub label: String,
    pub attributes: Vec<AttributeMetrics>,
}

impl ModeMetrics {
    fn avg(&self, f: impl Fn(&AttributeMetrics) -> f64) -> f64 {
        self.attributes.iter().map(f).sum::<f64>() / self.attributes.len().max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.avg(|a| a.accuracy)
    }

    pub fn leakage(&self) -> f64 {
        self.avg(|a| a.leakage)
    }

    /// Cross-source variance of the edited code, averaged over attributes.
    pub fn cross_source_variance(&self) -> f64 {
        self.avg(|a| a.edited_variance)
    }
}

/// Source codes and noiseless image embeddings used for attribute `k`.
fn eval_sources(world: &SyntheticWorld, cfg: &EvalConfig, k: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k as u64 + 1);
    (0..cfg.sources)
        .map(|_| {
            let s = world.sample_style(&mut rng);
            let i = world.image_embed(&s, None);
            (s, i)
        })
        .collect()
}

fn total_variance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let dim = rows.first().map_or(0, |r| r.len());
    (0..dim)
        .map(|c| {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

fn summarize(
    world: &SyntheticWorld,
    k: usize,
    sources: &[(Vec<f64>, Vec<f64>)],
    deltas: Vec<Vec<f64>>,
) -> AttributeMetrics {
    let a = &world.attributes[k];
    let oracle = world
        .oracle_direction(&[a.name.as_str()], &sources[0].0)
        .expect("attribute from the world");
    let n = deltas.len() as f64;
    let accuracy = deltas.iter().map(|d| cosine(d, &oracle)).sum::<f64>() / n;
    let leak = deltas.iter().map(|d| leakage(d, &a.support)).sum::<f64>() / n;
    let edited: Vec<Vec<f64>> = sources
        .iter()
        .zip(&deltas)
        .map(|((s, _), d)| s.iter().zip(d).map(|(x, y)| x + y).collect())
        .collect();
    AttributeMetrics {
        name: a.name.clone(),
        accuracy,
        leakage: leak,
        edited_variance: total_variance(&edited),
    }
}

/// Single-attribute text edits with a trained mapper, scored against the oracle.
pub fn evaluate_mapper(
    world: &SyntheticWorld,
    params: &MapperParams,
    mode: ConditionMode,
    rs: Option<&RelevanceMatrix>,
    cfg: &EvalConfig,
) -> Result<ModeMetrics> {
    if cfg.sources < 2 {
        return Err(EvalError::TooFew {
            needed: 2,
            got: cfg.sources,
        });
    }
    let template = PromptTemplate::default();
    let attributes = (0..world.attributes.len())
        .into_par_iter()
        .map(|k| {
            let name = world.attributes[k].name.as_str();
            let texts = text_pair(world, &template, &[name])?;
            let sources = eval_sources(world, cfg, k);
            let deltas = sources
                .iter()
                .map(|(s, i)| edit(params, mode, s, i, &texts, rs, &cfg.filter).map(|e| e.delta_filtered))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(summarize(world, k, &sources, deltas))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeMetrics {
        label: mode.as_str().into(),
        attributes,
    })
}

/// Global linear baseline: `Δs' = W Δt` with `W` fitted by least squares on
/// dataset pairs `(Δi, Δs)`.
pub fn evaluate_linear_baseline(
    world: &SyntheticWorld,
    dataset: &EmbeddingDataset,
    pairs: usize,
    cfg: &EvalConfig,
) -> Result<ModeMetrics> {
    if dataset.len() < 2 {
        return Err(EvalError::TooFew {
            needed: 2,
            got: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let idx: Vec<(usize, usize)> = (0..pairs)
        .map(|_| crate::training::sample_pair(dataset.len(), &mut rng).expect("two records"))
        .collect();
    let images = dataset.images().mapv(f64::from);
    let styles = dataset.styles().mapv(f64::from);
    let di = ndarray::Array2::from_shape_fn((pairs, dataset.clip_dim()), |(r, c)| {
        images[[idx[r].1, c]] - images[[idx[r].0, c]]
    });
    let ds = ndarray::Array2::from_shape_fn((pairs, dataset.style_dim()), |(r, c)| {
        styles[[idx[r].1, c]] - styles[[idx[r].0, c]]
    });
    let w = least_squares_map(di.view(), ds.view())?;
    let template = PromptTemplate::default();
    let mut attributes = Vec::with_capacity(world.attributes.len());
    for k in 0..world.attributes.len() {
        let texts = text_pair(world, &template, &[world.attributes[k].name.as_str()])?;
        let pred = w.dot(&ndarray::Array1::from(texts.delta())).to_vec();
        let sources = eval_sources(world, cfg, k);
        let deltas = vec![pred; sources.len()];
        attributes.push(summarize(world, k, &sources, deltas));
    }
    Ok(ModeMetrics {
        label: "lstsq".into(),
        attributes,
    })
}

/// One row per model: accuracy, leakage and cross-source variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ModeMetrics>,
}

impl ComparisonReport {
    pub fn get(&self, label: &str) -> Option<&ModeMetrics> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,accuracy,leakage,cross_source_variance\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9}",
                r.label,
                r.accuracy(),
                r.leakage(),
                r.cross_source_variance()
            );
        }
        out
    }

    /// Per-attribute table in plain text.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<6} accuracy {:.4}  leakage {:.4}  variance {:.4}",
                r.label,
                r.accuracy(),
                r.leakage(),
                r.cross_source_variance()
            );
            for a in &r.attributes {
                let _ = writeln!(out, "  {:<12} {:.4}  {:.4}", a.name, a.accuracy, a.leakage);
            }
        }
        out
    }
}

/// Train the delta and naive mappers with the same config apart from the
/// mode, then score both.
pub fn compare_modes(
    world: &SyntheticWorld,
    dataset: &EmbeddingDataset,
    base: &TrainConfig,
    rs: Option<&RelevanceMatrix>,
    cfg: &EvalConfig,
) -> Result<ComparisonReport> {
    let mut rows = Vec::with_capacity(2);
    for mode in [ConditionMode::Delta, ConditionMode::Naive] {
        let config = TrainConfig {
            mode,
            ..base.clone()
        };
        let (ck, _) = train(config, dataset)?;
        rows.push(evaluate_mapper(world, &ck.params, mode, rs, cfg)?);
    }
    Ok(ComparisonReport { rows })
}

/// Two-component PCA of labelled point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(label, index within its set, pc1, pc2)`
    pub points: Vec<(String, usize, f64, f64)>,
    /// Explained-variance ratios of the two components.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

impl Projection {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,index,pc1,pc2\n");
        for (label, i, a, b) in &self.points {
            let _ = writeln!(out, "{label},{i},{a:.9},{b:.9}");
        }
        out
    }
}

/// Project every point onto the top two principal axes of the pooled,
/// mean-centred data. Each axis is signed so its largest-magnitude entry is
/// positive.
pub fn export_projection(sets: &[(&str, &[Vec<f64>])]) -> Result<Projection> {
    let all: Vec<(&str, usize, &Vec<f64>)> = sets
        .iter()
        .flat_map(|(label, pts)| pts.iter().enumerate().map(move |(i, p)| (*label, i, p)))
        .collect();
    if all.len() < 2 {
        return Err(EvalError::TooFew {
            needed: 2,
            got: all.len(),
        });
    }
    let dim = all[0].2.len();
    for (_, _, p) in &all {
        check_len("point", dim, p.len())?;
    }
    let n = all.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|c| all.iter().map(|p| p.2[c]).sum::<f64>() / n).collect();
    let x = DMatrix::from_fn(all.len(), dim, |r, c| all[r].2[c] - mean[c]);
    let cov = x.transpose() * &x / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let pick = |k: usize| -> (Vec<f64>, f64) {
        let Some(&j) = order.get(k) else {
            return (vec![0.0; dim], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let ratio = if total > 0.0 { eig.eigenvalues[j].max(0.0) / total } else { 0.0 };
        (v, ratio)
    };
    let (c1, r1) = pick(0);
    let (c2, r2) = pick(1);
    let points = (0..all.len())
        .map(|r| {
            let row = x.row(r);
            let a: f64 = row.iter().zip(&c1).map(|(x, y)| x * y).sum();
            let b: f64 = row.iter().zip(&c2).map(|(x, y)| x * y).sum();
            (all[r].0.to_string(), all[r].1, a, b)
        })
        .collect();
    Ok(Projection {
        points,
        explained: [r1, r2],
        components: [c1, c2],
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, norm};
    use crate::world::{gen_world, WorldConfig};

    #[test]
    fn gap_stats_trivial_cases() {
        let e = |k: usize| {
            let mut v = vec![0.0; 3];
            v[k] = 1.0;
            v
        };
        let same = vec![(e(0), e(0)), (e(1), e(1))];
        let orth = vec![(e(0), e(1)), (e(1), e(2))];
        let s = gap_stats(&same, &orth).unwrap();
        assert_eq!((s.raw_mean, s.raw_std), (1.0, 0.0));
        assert_eq!(s.delta_mean, 0.0);
        assert_eq!(s.margin(), -1.0);
        assert!(matches!(gap_stats(&same[..1], &orth), Err(EvalError::TooFew { .. })));
    }

    #[test]
    fn default_world_has_the_gap() {
        let w = gen_world(&WorldConfig::default(), 7).unwrap();
        let s = gap_stats_of_pairs(&w.paired_embeddings(1000, 1)).unwrap();
        assert!(s.margin() >= 0.3, "{s:?}");
        assert!(s.to_csv().starts_with("pairs,raw_mean"));
    }

    #[test]
    fn accuracy_and_leakage_extremes() {
        let t = [1.0, -2.0, 0.5];
        assert!((direction_accuracy(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((direction_accuracy(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!(direction_accuracy(&t[..2], &t).is_err());

        let d = [0.0, 3.0, 4.0, 0.0];
        assert_eq!(leakage(&d, &[1, 2]), 0.0);
        assert_eq!(leakage(&d, &[0, 3]), 1.0);
        assert!((leakage(&d, &[1]) - 16.0 / 25.0).abs() < 1e-15);
        assert_eq!(leakage(&[0.0; 4], &[0]), 0.0);
    }

    #[test]
    fn projection_of_two_points_is_a_line() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![3.0, 2.0, -1.0];
        let p = export_projection(&[("x", &[a.clone(), b.clone()])]).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-12);
        let gap = ((a[0] - b[0]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        assert!(((p.points[0].2 - p.points[1].2).abs() - gap).abs() < 1e-12);
        for pt in &p.points {
            assert!(pt.3.abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_centred_and_matches_power_iteration() {
        let w = gen_world(&WorldConfig::default(), 2).unwrap();
        let pairs = w.paired_embeddings(200, 3);
        let images: Vec<Vec<f64>> = pairs.iter().map(|p| p.image.clone()).collect();
        let texts: Vec<Vec<f64>> = pairs.iter().map(|p| p.text.clone()).collect();
        let p = export_projection(&[("image", &images), ("text", &texts)]).unwrap();
        let m1: f64 = p.points.iter().map(|x| x.2).sum::<f64>() / p.points.len() as f64;
        let m2: f64 = p.points.iter().map(|x| x.3).sum::<f64>() / p.points.len() as f64;
        assert!(m1.abs() < 1e-12 && m2.abs() < 1e-12);
        let csv = p.to_csv();
        assert_eq!(csv.lines().next(), Some("label,index,pc1,pc2"));
        assert_eq!(csv.lines().count(), 401);

        // Independent oracle: power iteration with deflation on the covariance.
        let pts: Vec<&Vec<f64>> = images.iter().chain(&texts).collect();
        let n = pts.len() as f64;
        let dim = pts[0].len();
        let mean: Vec<f64> = (0..dim).map(|c| pts.iter().map(|x| x[c]).sum::<f64>() / n).collect();
        let mut cov = vec![vec![0.0; dim]; dim];
        for x in &pts {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
                }
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
        let mut ratios = Vec::new();
        for _ in 0..2 {
            let mut v = vec![1.0; dim];
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let mut u: Vec<f64> = (0..dim).map(|i| dot(&cov[i], &v)).collect();
                let nu = norm(&u);
                u.iter_mut().for_each(|x| *x /= nu);
                let next = (0..dim).map(|i| dot(&cov[i], &u)).collect::<Vec<_>>();
                let l = dot(&u, &next);
                let done = (l - lambda).abs() < 1e-16;
                lambda = l;
                v = u;
                if done {
                    break;
                }
            }
            ratios.push(lambda / trace);
            for i in 0..dim {
                for j in 0..dim {
                    cov[i][j] -= lambda * v[i] * v[j];
                }
            }
        }
        assert!((ratios[0] - p.explained[0]).abs() < 1e-8, "{ratios:?} {:?}", p.explained);
        assert!((ratios[1] - p.explained[1]).abs() < 1e-8, "{ratios:?} {:?}", p.explained);
    }

    #[test]
    fn identical_configs_give_identical_rows() {
        let w = gen_world(&WorldConfig::default(), 1).unwrap();
        let d = w.gen_dataset(200, 2);
        let base = TrainConfig {
            steps: 5,
            batch_size: 8,
            val_pairs: 8,
            ..Default::default()
        };
        let cfg = EvalConfig {
            sources: 4,
            filter: FilterConfig {
                beta: 0.0,
                strength: 1.0,
            },
            ..Default::default()
        };
        let a = compare_modes(&w, &d, &base, None, &cfg).unwrap();
        let b = compare_modes(&w, &d, &base, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert!(a.to_csv().starts_with("model,accuracy,leakage,cross_source_variance\ndelta,"));
        let base_row = evaluate_linear_baseline(&w, &d, 400, &cfg).unwrap();
        assert_eq!(base_row.attributes.len(), 8);
    }
}
