//! A fully known stand-in for a style-based generator paired with a
//! contrastive image/text encoder.
//!
//! Style codes are mapped to a feature space by a generator `G`, projected to
//! the embedding space by `A` and normalised, so `i = normalize(A (G s + b))`.
//! Every attribute owns a disjoint set of style channels and moves the image
//! embedding along its own direction. Text embeddings live in the same space
//! but carry a constant offset (the modality gap), so raw image/text pairs
//! disagree while image and text *differences* line up.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{Level, StyleLayout};
use crate::numerics::{dot, norm};
use crate::relevance::StyleEncoder;
use crate::store::EmbeddingDataset;

pub const DEFAULT_ATTRIBUTE_NAMES: [&str; 8] = [
    "smile",
    "eyeglasses",
    "bangs",
    "black hair",
    "blond hair",
    "beard",
    "makeup",
    "curly hair",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("cannot place {needed} disjoint attribute supports; only {available} slots of the requested size exist")]
    InfeasibleSupport { needed: usize, available: usize },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("least-squares input has {0}")]
    LeastSquares(String),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Linear,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub layout: StyleLayout,
    pub clip_dim: usize,
    pub feature_dim: usize,
    pub attributes: usize,
    /// Channels per attribute support.
    pub support: usize,
    /// Std of Gaussian noise added to the image embedding before normalisation.
    pub image_noise: f64,
    /// Std of the isotropic style jitter on top of attribute activations.
    pub style_noise: f64,
    /// Std of the per-channel style means.
    pub mean_scale: f64,
    /// Embedding-space displacement of one unit of attribute activation,
    /// relative to the unit-norm mean image.
    pub attribute_strength: f64,
    /// Embedding-space norm of a non-attribute channel's column.
    pub background_strength: f64,
    pub text_strength: f64,
    /// Relative perturbation of each attribute's text direction away from its
    /// image direction.
    pub text_jitter: f64,
    /// Norm of the modality-gap offset relative to the unit text base.
    pub gap: f64,
    /// Activation change used for oracle edits.
    pub edit_scale: f64,
    pub nonlinearity: Nonlinearity,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            layout: StyleLayout::tiny(),
            clip_dim: 64,
            feature_dim: 96,
            attributes: 8,
            support: 8,
            image_noise: 0.01,
            style_noise: 0.02,
            mean_scale: 1.0,
            attribute_strength: 0.7,
            background_strength: 0.5,
            text_strength: 0.5,
            text_jitter: 0.1,
            gap: 0.5,
            edit_scale: 2.0,
            nonlinearity: Nonlinearity::Linear,
        }
    }
}

impl WorldConfig {
    pub fn style_dim(&self) -> usize {
        self.layout.total()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.into()));
        if self.layout.validate().is_err() {
            return bad("layout counts must be at least 1");
        }
        if self.attributes == 0 || self.support == 0 {
            return bad("attributes and support must be at least 1");
        }
        if self.clip_dim < self.attributes + 2 {
            return bad("clip_dim must exceed the attribute count by at least 2");
        }
        if self.feature_dim < self.clip_dim {
            return bad("feature_dim must be at least clip_dim");
        }
        let scales = [
            self.image_noise,
            self.style_noise,
            self.mean_scale,
            self.background_strength,
            self.text_jitter,
        ];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise and scale parameters must be finite and non-negative");
        }
        if !(self.gap > 0.0) || !(self.attribute_strength > 0.0) || !(self.text_strength > 0.0) {
            return bad("gap, attribute_strength and text_strength must be positive");
        }
        if !(self.edit_scale > 0.0) {
            return bad("edit_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    /// Sorted style channels carrying this attribute.
    pub support: Vec<usize>,
    /// Unit style-space direction, zero outside `support`.
    pub direction: Vec<f64>,
    /// Unit embedding-space direction the attribute moves images along.
    pub image_direction: Vec<f64>,
    /// Text-side displacement added by mentioning the attribute.
    pub text_direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    /// `clip_dim × feature_dim`, orthonormal rows.
    pub projection: Array2<f64>,
    /// `feature_dim × style_dim`.
    pub generator: Array2<f64>,
    pub bias: Array1<f64>,
    pub style_mean: Vec<f64>,
    pub attributes: Vec<Attribute>,
    /// Embedding of the bare category prompt before the gap is added.
    pub text_base: Vec<f64>,
    pub gap_offset: Vec<f64>,
    /// `projection · generator`, cached for the linear path.
    clip_map: Array2<f64>,
    clip_bias: Array1<f64>,
}

fn gaussian_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn normalized(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out);
    out
}

/// Gram-Schmidt on `count` random Gaussian vectors of length `dim`.
fn random_orthonormal(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(dim, rng);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if norm(&v) > 1e-6 {
            normalize_in_place(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Candidate support blocks: contiguous `support`-wide slots inside each
/// coarse/medium layer row and inside the fine group.
fn support_slots(layout: &StyleLayout, support: usize) -> Vec<usize> {
    let mut slots = Vec::new();
    let mut unit = |start: usize, width: usize| {
        for k in 0..width / support {
            slots.push(start + k * support);
        }
    };
    for r in 0..layout.coarse_layers {
        unit(r * layout.coarse_dim, layout.coarse_dim);
    }
    let c = layout.coarse_channels();
    for r in 0..layout.medium_layers {
        unit(c + r * layout.medium_dim, layout.medium_dim);
    }
    unit(c + layout.medium_channels(), layout.fine_dim);
    slots
}

pub fn gen_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (clip, feat, style) = (config.clip_dim, config.feature_dim, config.style_dim());
    let k = config.attributes;

    let rows = random_orthonormal(clip, feat, &mut rng);
    let projection = Array2::from_shape_fn((clip, feat), |(i, j)| rows[i][j]);

    // mean image, gap, then one direction per attribute
    let basis = random_orthonormal(k + 2, clip, &mut rng);
    let mean_direction = basis[0].clone();
    let gap_direction = basis[1].clone();

    let mut slots = support_slots(&config.layout, config.support);
    if slots.len() < k {
        return Err(WorldError::InfeasibleSupport {
            needed: k,
            available: slots.len(),
        });
    }
    slots.shuffle(&mut rng);

    let alpha = config.attribute_strength / (config.support as f64).sqrt();
    let background = config.background_strength / (clip as f64).sqrt();
    let mut generator = Array2::from_shape_fn((feat, style), |_| background * rng.sample::<f64, _>(StandardNormal));

    let mut attributes = Vec::with_capacity(k);
    for a in 0..k {
        let start = slots[a];
        let support: Vec<usize> = (start..start + config.support).collect();
        let v = basis[a + 2].clone();
        // feature-space preimage of v under the orthonormal projection
        let lifted = projection.t().dot(&Array1::from(v.clone()));
        let mut direction = vec![0.0; style];
        let scale = 1.0 / (config.support as f64).sqrt();
        for &c in &support {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            direction[c] = sign * scale;
            generator.column_mut(c).assign(&(&lifted * (sign * alpha)));
        }

        let mut jitter = gaussian_vec(clip, &mut rng);
        for b in [&mean_direction, &gap_direction] {
            let p = dot(&jitter, b);
            jitter.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        normalize_in_place(&mut jitter);
        let mut text: Vec<f64> = v.iter().zip(&jitter).map(|(x, j)| x + config.text_jitter * j).collect();
        normalize_in_place(&mut text);
        text.iter_mut().for_each(|x| *x *= config.text_strength);

        let name = DEFAULT_ATTRIBUTE_NAMES
            .get(a)
            .map_or_else(|| format!("attr{a}"), |s| s.to_string());
        attributes.push(Attribute {
            name,
            support,
            direction,
            image_direction: v,
            text_direction: text,
        });
    }

    let style_mean: Vec<f64> = (0..style)
        .map(|_| config.mean_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // choose the bias so the mean style code lands exactly on the mean direction
    let shifted = generator.dot(&Array1::from(style_mean.clone()));
    let target = Array1::from(mean_direction.clone()) - projection.dot(&shifted);
    let bias = projection.t().dot(&target);

    let clip_map = projection.dot(&generator);
    let clip_bias = projection.dot(&bias);
    Ok(SyntheticWorld {
        config: config.clone(),
        seed,
        projection,
        generator,
        bias,
        style_mean,
        attributes,
        text_base: mean_direction,
        gap_offset: gap_direction.iter().map(|x| x * config.gap).collect(),
        clip_map,
        clip_bias,
    })
}

/// Paired raw and delta embeddings for one single-attribute edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub attribute: usize,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub delta_image: Vec<f64>,
    pub delta_text: Vec<f64>,
}

impl SyntheticWorld {
    pub fn style_dim(&self) -> usize {
        self.config.style_dim()
    }

    pub fn clip_dim(&self) -> usize {
        self.config.clip_dim
    }

    pub fn layout(&self) -> StyleLayout {
        self.config.layout
    }

    pub fn attribute_names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| WorldError::UnknownAttribute(name.to_string()))
    }

    /// `A·G`, the linear map from style channels to the embedding space.
    pub fn clip_map(&self) -> &Array2<f64> {
        &self.clip_map
    }

    /// Embedding before normalisation and without noise.
    pub fn pre_embedding(&self, s: &[f64]) -> Vec<f64> {
        let s = Array1::from(s.to_vec());
        let x = match self.config.nonlinearity {
            Nonlinearity::Linear => self.clip_map.dot(&s) + &self.clip_bias,
            Nonlinearity::Tanh => {
                let h = (self.generator.dot(&s) + &self.bias).mapv(f64::tanh);
                self.projection.dot(&h)
            }
        };
        x.to_vec()
    }

    /// `normalize(A (G s + b) + noise)`; noiseless when `noise` is `None`.
    pub fn image_embed(&self, s: &[f64], noise: Option<&mut dyn rand::RngCore>) -> Vec<f64> {
        let mut x = self.pre_embedding(s);
        if let Some(rng) = noise {
            let sigma = self.config.image_noise;
            x.iter_mut()
                .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
        }
        normalized(&x)
    }

    /// Text embedding of the category prompt mentioning `attrs` (each counted once).
    pub fn text_embed<S: AsRef<str>>(&self, attrs: &[S]) -> Result<Vec<f64>> {
        Ok(normalized(&self.text_pre_embedding(attrs)?))
    }

    /// [`text_embed`](Self::text_embed) before normalisation.
    pub fn text_pre_embedding<S: AsRef<str>>(&self, attrs: &[S]) -> Result<Vec<f64>> {
        let mut seen = Vec::new();
        let mut y: Vec<f64> = self.text_base.iter().zip(&self.gap_offset).map(|(b, g)| b + g).collect();
        for a in attrs {
            let idx = self.attribute_index(a.as_ref())?;
            if seen.contains(&idx) {
                continue;
            }
            seen.push(idx);
            y.iter_mut()
                .zip(&self.attributes[idx].text_direction)
                .for_each(|(v, u)| *v += u);
        }
        Ok(y)
    }

    /// Draw one style code: channel means, Gaussian attribute activations, isotropic jitter.
    pub fn sample_style(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .style_mean
            .iter()
            .map(|m| m + self.config.style_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for attr in &self.attributes {
            let a: f64 = rng.sample(StandardNormal);
            for &c in &attr.support {
                s[c] += a * attr.direction[c];
            }
        }
        s
    }

    /// `n` records of (image embedding, style code), stored at 32-bit.
    pub fn gen_dataset(&self, n: usize, seed: u64) -> EmbeddingDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (clip, style) = (self.clip_dim(), self.style_dim());
        let mut images = Array2::<f32>::zeros((n, clip));
        let mut styles = Array2::<f32>::zeros((n, style));
        for r in 0..n {
            let s = self.sample_style(&mut rng);
            let i = self.image_embed(&s, Some(&mut rng));
            images.row_mut(r).iter_mut().zip(&i).for_each(|(d, v)| *d = *v as f32);
            styles.row_mut(r).iter_mut().zip(&s).for_each(|(d, v)| *d = *v as f32);
        }
        EmbeddingDataset::new(images, styles)
    }

    /// Ground-truth edit `Σ edit_scale · d_attr`. The world is stationary, so
    /// the source code does not change the direction.
    pub fn oracle_direction<S: AsRef<str>>(&self, attrs: &[S], _source: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.style_dim()];
        let mut seen = Vec::new();
        for a in attrs {
            let idx = self.attribute_index(a.as_ref())?;
            if seen.contains(&idx) {
                continue;
            }
            seen.push(idx);
            out.iter_mut()
                .zip(&self.attributes[idx].direction)
                .for_each(|(o, d)| *o += self.config.edit_scale * d);
        }
        Ok(out)
    }

    /// Union of the supports of `attrs`.
    pub fn support_of<S: AsRef<str>>(&self, attrs: &[S]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for a in attrs {
            out.extend(&self.attributes[self.attribute_index(a.as_ref())?].support);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Group of an attribute's support (all of it lies in one group).
    pub fn attribute_level(&self, idx: usize) -> Level {
        self.layout()
            .locate(self.attributes[idx].support[0])
            .expect("support inside layout")
            .0
    }

    /// `n` single-attribute edits, cycling through attributes, each yielding
    /// a raw (edited image, target text) pair and the matching delta pair.
    pub fn paired_embeddings(&self, n: usize, seed: u64) -> Vec<EmbeddingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_text = self.text_embed::<&str>(&[]).expect("empty prompt");
        (0..n)
            .map(|k| {
                let attribute = k % self.attributes.len();
                let name = self.attributes[attribute].name.clone();
                let s = self.sample_style(&mut rng);
                let edit = self.oracle_direction(&[&name], &s).expect("known attribute");
                let s2: Vec<f64> = s.iter().zip(&edit).map(|(a, b)| a + b).collect();
                let i1 = self.image_embed(&s, Some(&mut rng));
                let i2 = self.image_embed(&s2, Some(&mut rng));
                let text = self.text_embed(&[&name]).expect("known attribute");
                EmbeddingPair {
                    attribute,
                    delta_image: i2.iter().zip(&i1).map(|(a, b)| a - b).collect(),
                    delta_text: text.iter().zip(&source_text).map(|(a, b)| a - b).collect(),
                    image: i2,
                    text,
                }
            })
            .collect()
    }
}

impl StyleEncoder for SyntheticWorld {
    fn style_dim(&self) -> usize {
        self.config.style_dim()
    }

    fn clip_dim(&self) -> usize {
        self.config.clip_dim
    }

    fn encode(&self, s: &[f64]) -> Vec<f64> {
        self.image_embed(s, None)
    }
}

/// Least-squares linear map `W` (`style × clip`) minimising
/// `Σ ‖W Δi - Δs‖²` over the rows of `delta_images` / `delta_styles`.
/// Rank-deficient inputs get the minimum-norm solution.
pub fn least_squares_map(delta_images: ArrayView2<'_, f64>, delta_styles: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = delta_images.nrows();
    if n == 0 || delta_styles.nrows() != n {
        return Err(WorldError::LeastSquares("mismatched or empty rows".into()));
    }
    let x = DMatrix::from_fn(n, delta_images.ncols(), |i, j| delta_images[[i, j]]);
    let y = DMatrix::from_fn(n, delta_styles.ncols(), |i, j| delta_styles[[i, j]]);
    let svd = x.svd(true, true);
    let solution = svd
        .solve(&y, 1e-12)
        .map_err(|e| WorldError::LeastSquares(e.to_string()))?;
    // solution is clip × style; return its transpose
    Ok(Array2::from_shape_fn((solution.ncols(), solution.nrows()), |(i, j)| solution[(j, i)]))
}
