//! The coarse-to-fine Delta Mapper.
//!
//! Three modules, each with a coarse, medium and fine sub-module:
//!
//! * **Style** maps the source style code level by level. Coarse and medium
//!   groups are `layers × dim` blocks; one shared stack is applied to every
//!   layer row of a group.
//! * **Condition** maps `concat(cond, i1)` to one embedding per level, sized
//!   like a single row of the matching style group.
//! * **Fusion** takes `concat(style row, condition embedding)` per row (the
//!   condition embedding is replicated across the group's rows) and emits the
//!   predicted style delta for that level.
//!
//! The naive latent mapper uses the exact same topology; only the meaning of
//! the condition vector changes (target embedding instead of a delta), which
//! is carried by [`ConditionMode`].

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Init, LinearStack, NumericsError, Parameters, StackCache, DEFAULT_SLOPE};

/// Layers per sub-module.
pub const STACK_DEPTH: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapperError {
    #[error("style vector has {actual} channels, layout expects {expected}")]
    StyleLength { expected: usize, actual: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("{what} has width {actual}, expected {expected}")]
    InputWidth {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("batch inputs disagree on row count")]
    BatchRows,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, MapperError>;

/// Partition of the style vector into coarse, medium and fine groups, in that
/// concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleLayout {
    pub coarse_layers: usize,
    pub coarse_dim: usize,
    pub medium_layers: usize,
    pub medium_dim: usize,
    pub fine_dim: usize,
}

impl StyleLayout {
    /// 3×512 coarse, 4×512 medium, 2464 fine: 6048 channels.
    pub const fn paper() -> Self {
        Self {
            coarse_layers: 3,
            coarse_dim: 512,
            medium_layers: 4,
            medium_dim: 512,
            fine_dim: 2464,
        }
    }

    /// 3×32 coarse, 4×32 medium, 128 fine: 352 channels.
    pub const fn tiny() -> Self {
        Self {
            coarse_layers: 3,
            coarse_dim: 32,
            medium_layers: 4,
            medium_dim: 32,
            fine_dim: 128,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn coarse_channels(&self) -> usize {
        self.coarse_layers * self.coarse_dim
    }

    pub fn medium_channels(&self) -> usize {
        self.medium_layers * self.medium_dim
    }

    pub fn total(&self) -> usize {
        self.coarse_channels() + self.medium_channels() + self.fine_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("coarse_layers", self.coarse_layers),
            ("coarse_dim", self.coarse_dim),
            ("medium_layers", self.medium_layers),
            ("medium_dim", self.medium_dim),
            ("fine_dim", self.fine_dim),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(MapperError::InvalidLayout(format!("{name} must be at least 1"))),
            None => Ok(()),
        }
    }

    /// Which group a channel index falls into, with (row, column) inside it.
    pub fn locate(&self, channel: usize) -> Option<(Level, usize, usize)> {
        let c = self.coarse_channels();
        let m = self.medium_channels();
        if channel < c {
            Some((Level::Coarse, channel / self.coarse_dim, channel % self.coarse_dim))
        } else if channel < c + m {
            let k = channel - c;
            Some((Level::Medium, k / self.medium_dim, k % self.medium_dim))
        } else if channel < self.total() {
            Some((Level::Fine, 0, channel - c - m))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Coarse,
    Medium,
    Fine,
}

/// One value per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Levels<T> {
    pub coarse: T,
    pub medium: T,
    pub fine: T,
}

impl<T> Levels<T> {
    pub fn get(&self, level: Level) -> &T {
        match level {
            Level::Coarse => &self.coarse,
            Level::Medium => &self.medium,
            Level::Fine => &self.fine,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Levels<U> {
        Levels {
            coarse: f(&self.coarse),
            medium: f(&self.medium),
            fine: f(&self.fine),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.coarse, &self.medium, &self.fine].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [&mut self.coarse, &mut self.medium, &mut self.fine].into_iter()
    }
}

/// A style vector split into its three groups.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleGroups {
    /// `coarse_layers × coarse_dim`
    pub coarse: Array2<f64>,
    /// `medium_layers × medium_dim`
    pub medium: Array2<f64>,
    pub fine: Array1<f64>,
}

pub fn split_style(s: &[f64], layout: &StyleLayout) -> Result<StyleGroups> {
    if s.len() != layout.total() {
        return Err(MapperError::StyleLength {
            expected: layout.total(),
            actual: s.len(),
        });
    }
    let c = layout.coarse_channels();
    let m = layout.medium_channels();
    Ok(StyleGroups {
        coarse: Array2::from_shape_vec((layout.coarse_layers, layout.coarse_dim), s[..c].to_vec())
            .expect("coarse shape"),
        medium: Array2::from_shape_vec((layout.medium_layers, layout.medium_dim), s[c..c + m].to_vec())
            .expect("medium shape"),
        fine: Array1::from(s[c + m..].to_vec()),
    })
}

pub fn join_style(groups: &StyleGroups) -> Vec<f64> {
    groups
        .coarse
        .iter()
        .chain(groups.medium.iter())
        .chain(groups.fine.iter())
        .copied()
        .collect()
}

/// What the condition vector means. The network is identical in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Condition is an embedding difference: Δi while training, Δt at inference.
    Delta,
    /// Condition is the target embedding itself: i2 while training, t at inference.
    Naive,
}

impl ConditionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionMode::Delta => "delta",
            ConditionMode::Naive => "naive",
        }
    }

    /// Build the training condition from source and target image embeddings.
    pub fn training_condition(&self, i1: &[f64], i2: &[f64]) -> Vec<f64> {
        match self {
            ConditionMode::Delta => i2.iter().zip(i1).map(|(b, a)| b - a).collect(),
            ConditionMode::Naive => i2.to_vec(),
        }
    }
}

impl std::str::FromStr for ConditionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "delta" => Ok(Self::Delta),
            "naive" => Ok(Self::Naive),
            other => Err(format!("unknown condition mode `{other}` (expected delta or naive)")),
        }
    }
}

/// Static shape of a mapper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapperArch {
    pub layout: StyleLayout,
    pub clip_dim: usize,
    pub slope: f64,
}

impl MapperArch {
    pub fn new(layout: StyleLayout, clip_dim: usize) -> Self {
        Self {
            layout,
            clip_dim,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn paper() -> Self {
        Self::new(StyleLayout::paper(), 512)
    }

    pub fn tiny() -> Self {
        Self::new(StyleLayout::tiny(), 64)
    }

    pub fn style_dim(&self) -> usize {
        self.layout.total()
    }

    /// Per-level row width: the width of one coarse/medium layer, or the whole fine group.
    pub fn level_dims(&self) -> Levels<usize> {
        Levels {
            coarse: self.layout.coarse_dim,
            medium: self.layout.medium_dim,
            fine: self.layout.fine_dim,
        }
    }

    pub fn level_rows(&self) -> Levels<usize> {
        Levels {
            coarse: self.layout.coarse_layers,
            medium: self.layout.medium_layers,
            fine: 1,
        }
    }
}

/// All weights of the nine sub-modules.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    pub arch: MapperArch,
    pub style: Levels<LinearStack>,
    pub condition: Levels<LinearStack>,
    pub fusion: Levels<LinearStack>,
}

const MODULE_NAMES: [&str; 9] = [
    "style.coarse",
    "style.medium",
    "style.fine",
    "condition.coarse",
    "condition.medium",
    "condition.fine",
    "fusion.coarse",
    "fusion.medium",
    "fusion.fine",
];

impl MapperParams {
    pub fn new<R: Rng + ?Sized>(arch: MapperArch, init: Init, rng: &mut R) -> Result<Self> {
        arch.layout.validate()?;
        if arch.clip_dim == 0 {
            return Err(MapperError::InvalidLayout("clip_dim must be at least 1".into()));
        }
        let dims = arch.level_dims();
        let cond_in = 2 * arch.clip_dim;
        let mut stack = |i: usize, o: usize| LinearStack::mlp(i, o, STACK_DEPTH, arch.slope, init, rng);
        let style = Levels {
            coarse: stack(dims.coarse, dims.coarse),
            medium: stack(dims.medium, dims.medium),
            fine: stack(dims.fine, dims.fine),
        };
        let condition = Levels {
            coarse: stack(cond_in, dims.coarse),
            medium: stack(cond_in, dims.medium),
            fine: stack(cond_in, dims.fine),
        };
        let fusion = Levels {
            coarse: stack(2 * dims.coarse, dims.coarse),
            medium: stack(2 * dims.medium, dims.medium),
            fine: stack(2 * dims.fine, dims.fine),
        };
        Ok(Self {
            arch,
            style,
            condition,
            fusion,
        })
    }

    pub fn zeros(arch: MapperArch) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::new(arch, Init::Zeros, &mut rng)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Levels<LinearStack>| l.map(LinearStack::zeros_like);
        Self {
            arch: self.arch,
            style: z(&self.style),
            condition: z(&self.condition),
            fusion: z(&self.fusion),
        }
    }

    /// The nine stacks in storage order: Style c/m/f, Condition c/m/f, Fusion c/m/f.
    pub fn stacks(&self) -> [&LinearStack; 9] {
        [
            &self.style.coarse,
            &self.style.medium,
            &self.style.fine,
            &self.condition.coarse,
            &self.condition.medium,
            &self.condition.fine,
            &self.fusion.coarse,
            &self.fusion.medium,
            &self.fusion.fine,
        ]
    }

    pub fn stacks_mut(&mut self) -> [&mut LinearStack; 9] {
        [
            &mut self.style.coarse,
            &mut self.style.medium,
            &mut self.style.fine,
            &mut self.condition.coarse,
            &mut self.condition.medium,
            &mut self.condition.fine,
            &mut self.fusion.coarse,
            &mut self.fusion.medium,
            &mut self.fusion.fine,
        ]
    }

    pub fn module_names() -> [&'static str; 9] {
        MODULE_NAMES
    }

    /// Rebuild from nine stacks in storage order, checking every shape
    /// against `arch`.
    pub fn from_stacks(arch: MapperArch, stacks: Vec<LinearStack>) -> Result<Self> {
        let expected = Self::zeros(arch)?;
        if stacks.len() != 9 {
            return Err(MapperError::InvalidLayout(format!("expected 9 stacks, got {}", stacks.len())));
        }
        for ((got, want), name) in stacks.iter().zip(expected.stacks()).zip(MODULE_NAMES) {
            let shapes = |s: &LinearStack| -> Vec<(usize, usize)> {
                s.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect()
            };
            if shapes(got) != shapes(want) {
                return Err(MapperError::InvalidLayout(format!(
                    "{name}: layer shapes {:?} do not match layout {:?}",
                    shapes(got),
                    shapes(want)
                )));
            }
        }
        let mut it = stacks.into_iter();
        let mut next = || it.next().expect("nine stacks");
        Ok(Self {
            arch,
            style: Levels { coarse: next(), medium: next(), fine: next() },
            condition: Levels { coarse: next(), medium: next(), fine: next() },
            fusion: Levels { coarse: next(), medium: next(), fine: next() },
        })
    }

    pub fn add_scaled(&mut self, other: &MapperParams, k: f64) {
        for (a, b) in self.stacks_mut().into_iter().zip(other.stacks()) {
            a.add_scaled(b, k);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.stacks_mut() {
            a.scale(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.stacks().iter().all(|s| s.is_finite())
    }

    /// Forward a batch; each argument holds one sample per row.
    pub fn forward(
        &self,
        s1: ArrayView2<'_, f64>,
        i1: ArrayView2<'_, f64>,
        cond: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, MapperActivations)> {
        let arch = &self.arch;
        let b = s1.nrows();
        if i1.nrows() != b || cond.nrows() != b {
            return Err(MapperError::BatchRows);
        }
        check_width("s1", arch.style_dim(), s1.ncols())?;
        check_width("i1", arch.clip_dim, i1.ncols())?;
        check_width("condition", arch.clip_dim, cond.ncols())?;

        let condition_input = concatenate(Axis(1), &[cond, i1]).expect("same row count");
        let rows = arch.level_rows();
        let dims = arch.level_dims();
        let ranges = group_ranges(&arch.layout);

        let mut out_parts = Vec::with_capacity(3);
        let mut level_acts = Vec::with_capacity(3);
        for (level, range) in [Level::Coarse, Level::Medium, Level::Fine].into_iter().zip(ranges) {
            let r = *rows.get(level);
            let d = *dims.get(level);
            let group = s1
                .slice(s![.., range])
                .to_owned()
                .into_shape_with_order((b * r, d))
                .expect("group reshape");
            let (style_embed, style_cache) = self.style.get(level).forward(group.view())?;
            let (cond_embed, cond_cache) = self.condition.get(level).forward(condition_input.view())?;

            let mut fusion_in = Array2::zeros((b * r, 2 * d));
            fusion_in.slice_mut(s![.., ..d]).assign(&style_embed);
            for sample in 0..b {
                let e = cond_embed.row(sample);
                for row in 0..r {
                    fusion_in.slice_mut(s![sample * r + row, d..]).assign(&e);
                }
            }
            let (fused, fusion_cache) = self.fusion.get(level).forward(fusion_in.view())?;
            out_parts.push(fused.into_shape_with_order((b, r * d)).expect("output reshape"));
            level_acts.push(LevelActivations {
                style_embed,
                cond_embed,
                style_cache,
                cond_cache,
                fusion_cache,
            });
        }
        let views: Vec<_> = out_parts.iter().map(|p| p.view()).collect();
        let out = concatenate(Axis(1), &views).expect("same row count");
        let mut it = level_acts.into_iter();
        let acts = MapperActivations {
            batch: b,
            levels: Levels {
                coarse: it.next().unwrap(),
                medium: it.next().unwrap(),
                fine: it.next().unwrap(),
            },
        };
        Ok((out, acts))
    }

    /// Backpropagate `d_out` (one row per sample, style width) through a
    /// cached forward pass. Parameter gradients are summed over the batch.
    pub fn backward(&self, acts: &MapperActivations, d_out: ArrayView2<'_, f64>) -> Result<MapperGradients> {
        let arch = &self.arch;
        let b = acts.batch;
        if d_out.nrows() != b {
            return Err(MapperError::BatchRows);
        }
        check_width("output gradient", arch.style_dim(), d_out.ncols())?;
        let rows = arch.level_rows();
        let dims = arch.level_dims();
        let ranges = group_ranges(&arch.layout);
        let clip = arch.clip_dim;

        let mut grads = self.zeros_like();
        let mut d_s1 = Array2::zeros((b, arch.style_dim()));
        let mut d_cond_in = Array2::<f64>::zeros((b, 2 * clip));

        for (level, range) in [Level::Coarse, Level::Medium, Level::Fine].into_iter().zip(ranges) {
            let r = *rows.get(level);
            let d = *dims.get(level);
            let la = acts.levels.get(level);
            let d_fused = d_out
                .slice(s![.., range.clone()])
                .to_owned()
                .into_shape_with_order((b * r, d))
                .expect("gradient reshape");
            let (d_fusion_in, g_fusion) = self.fusion.get(level).backward(&la.fusion_cache, d_fused.view())?;

            let d_style_embed = d_fusion_in.slice(s![.., ..d]);
            let mut d_cond_embed = Array2::<f64>::zeros((b, d));
            for sample in 0..b {
                let mut acc = d_cond_embed.row_mut(sample);
                for row in 0..r {
                    acc += &d_fusion_in.slice(s![sample * r + row, d..]);
                }
            }
            let (d_group, g_style) = self.style.get(level).backward(&la.style_cache, d_style_embed)?;
            let (d_ci, g_cond) = self.condition.get(level).backward(&la.cond_cache, d_cond_embed.view())?;
            d_cond_in += &d_ci;
            d_s1.slice_mut(s![.., range])
                .assign(&d_group.into_shape_with_order((b, r * d)).expect("gradient reshape"));

            match level {
                Level::Coarse => {
                    grads.style.coarse = g_style;
                    grads.condition.coarse = g_cond;
                    grads.fusion.coarse = g_fusion;
                }
                Level::Medium => {
                    grads.style.medium = g_style;
                    grads.condition.medium = g_cond;
                    grads.fusion.medium = g_fusion;
                }
                Level::Fine => {
                    grads.style.fine = g_style;
                    grads.condition.fine = g_cond;
                    grads.fusion.fine = g_fusion;
                }
            }
        }
        Ok(MapperGradients {
            params: grads,
            d_s1,
            d_cond: d_cond_in.slice(s![.., ..clip]).to_owned(),
            d_i1: d_cond_in.slice(s![.., clip..]).to_owned(),
        })
    }
}

fn check_width(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(MapperError::InputWidth { what, expected, actual })
    }
}

fn group_ranges(layout: &StyleLayout) -> [std::ops::Range<usize>; 3] {
    let c = layout.coarse_channels();
    let m = layout.medium_channels();
    [0..c, c..c + m, c + m..layout.total()]
}

/// Intermediate values of one level.
#[derive(Debug, Clone)]
pub struct LevelActivations {
    /// Style embedding, one row per (sample, layer).
    pub style_embed: Array2<f64>,
    /// Condition embedding, one row per sample.
    pub cond_embed: Array2<f64>,
    style_cache: StackCache,
    cond_cache: StackCache,
    fusion_cache: StackCache,
}

impl LevelActivations {
    /// The concatenated `[style row, condition embedding]` batch fed to Fusion.
    pub fn fusion_input(&self) -> &Array2<f64> {
        self.fusion_cache.input()
    }
}

#[derive(Debug, Clone)]
pub struct MapperActivations {
    pub batch: usize,
    pub levels: Levels<LevelActivations>,
}

#[derive(Debug, Clone)]
pub struct MapperGradients {
    pub params: MapperParams,
    pub d_s1: Array2<f64>,
    pub d_i1: Array2<f64>,
    pub d_cond: Array2<f64>,
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row vector shape")
}

/// Single-sample forward pass: `Δs' = DeltaMapper(s1, i1, cond)`.
pub fn mapper_forward(
    params: &MapperParams,
    s1: &[f64],
    i1: &[f64],
    cond: &[f64],
) -> Result<(Vec<f64>, MapperActivations)> {
    let (out, acts) = params.forward(row(s1), row(i1), row(cond))?;
    Ok((out.into_raw_vec_and_offset().0, acts))
}

/// Single-sample backward pass.
pub fn mapper_backward(params: &MapperParams, acts: &MapperActivations, d_out: &[f64]) -> Result<MapperGradients> {
    params.backward(acts, row(d_out))
}

/// The naive latent mapper, `Δs' = LatentMapper(s1, i1, target)`. Same
/// network and code path as [`mapper_forward`]; `target` is the full target
/// embedding rather than a difference.
pub fn naive_forward(params: &MapperParams, s1: &[f64], i1: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    mapper_forward(params, s1, i1, target).map(|(out, _)| out)
}

impl Parameters for MapperParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.stacks().into_iter().flat_map(|s| s.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stacks_mut().into_iter().flat_map(|s| s.tensors_mut()).collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.stacks()
            .into_iter()
            .zip(MODULE_NAMES)
            .flat_map(|(s, m)| s.tensor_names().into_iter().map(move |n| format!("{m}.{n}")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, grad_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> MapperArch {
        MapperArch::new(
            StyleLayout {
                coarse_layers: 2,
                coarse_dim: 4,
                medium_layers: 2,
                medium_dim: 4,
                fine_dim: 8,
            },
            8,
        )
    }

    fn random_inputs(arch: &MapperArch, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        (v(arch.style_dim()), v(arch.clip_dim), v(arch.clip_dim))
    }

    /// Perturb every weight and bias so no pre-activation sits at the kink.
    fn random_params(arch: MapperArch, seed: u64) -> MapperParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MapperParams::new(arch, Init::KaimingUniform, &mut rng).unwrap();
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        p
    }

    #[test]
    fn split_paper_layout() {
        let layout = StyleLayout::paper();
        assert_eq!(layout.total(), 6048);
        let s: Vec<f64> = (0..6048).map(f64::from).collect();
        let g = split_style(&s, &layout).unwrap();
        assert_eq!(g.coarse.dim(), (3, 512));
        assert_eq!(g.medium.dim(), (4, 512));
        assert_eq!(g.fine.len(), 2464);
    }

    #[test]
    fn split_small_layout_in_order() {
        let layout = StyleLayout {
            coarse_layers: 1,
            coarse_dim: 2,
            medium_layers: 1,
            medium_dim: 2,
            fine_dim: 2,
        };
        let g = split_style(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &layout).unwrap();
        assert_eq!(g.coarse.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(g.medium.row(0).to_vec(), vec![3.0, 4.0]);
        assert_eq!(g.fine.to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn split_rejects_wrong_length() {
        assert!(matches!(
            split_style(&[0.0; 10], &StyleLayout::tiny()),
            Err(MapperError::StyleLength { expected: 352, actual: 10 })
        ));
    }

    #[test]
    fn layout_rejects_zero_counts() {
        let mut l = StyleLayout::tiny();
        l.medium_layers = 0;
        assert!(l.validate().is_err());
    }

    #[test]
    fn locate_channels() {
        let l = StyleLayout::tiny();
        assert_eq!(l.locate(0), Some((Level::Coarse, 0, 0)));
        assert_eq!(l.locate(33), Some((Level::Coarse, 1, 1)));
        assert_eq!(l.locate(96), Some((Level::Medium, 0, 0)));
        assert_eq!(l.locate(224), Some((Level::Fine, 0, 0)));
        assert_eq!(l.locate(352), None);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = MapperArch::tiny();
        let p = MapperParams::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, i, c) = random_inputs(&arch, &mut rng);
        let (out, _) = mapper_forward(&p, &s, &i, &c).unwrap();
        assert_eq!(out.len(), 352);
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(naive_forward(&p, &s, &i, &c).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_and_delta_share_topology() {
        let arch = small_arch();
        let p = random_params(arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, i, c) = random_inputs(&arch, &mut rng);
        assert_eq!(mapper_forward(&p, &s, &i, &c).unwrap().0, naive_forward(&p, &s, &i, &c).unwrap());
    }

    #[test]
    fn broadcast_with_single_coarse_layer() {
        let arch = MapperArch::new(
            StyleLayout {
                coarse_layers: 1,
                coarse_dim: 3,
                medium_layers: 2,
                medium_dim: 2,
                fine_dim: 4,
            },
            5,
        );
        let p = random_params(arch, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, i, c) = random_inputs(&arch, &mut rng);
        let (_, acts) = mapper_forward(&p, &s, &i, &c).unwrap();
        let la = &acts.levels.coarse;
        let mut expected = la.style_embed.row(0).to_vec();
        expected.extend(la.cond_embed.row(0).iter());
        assert_eq!(la.fusion_input().row(0).to_vec(), expected);
        // medium: condition embedding replicated across both rows
        let lm = &acts.levels.medium;
        assert_eq!(lm.fusion_input().slice(s![0, 2..]), lm.fusion_input().slice(s![1, 2..]));
    }

    #[test]
    fn batch_forward_equals_per_sample_forward() {
        let arch = small_arch();
        let p = random_params(arch, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<_> = (0..3).map(|_| random_inputs(&arch, &mut rng)).collect();
        let stack = |k: usize, n: usize| {
            let flat: Vec<f64> = samples
                .iter()
                .flat_map(|t| match k {
                    0 => t.0.clone(),
                    1 => t.1.clone(),
                    _ => t.2.clone(),
                })
                .collect();
            Array2::from_shape_vec((3, n), flat).unwrap()
        };
        let (s, i, c) = (stack(0, arch.style_dim()), stack(1, 8), stack(2, 8));
        let (out, _) = p.forward(s.view(), i.view(), c.view()).unwrap();
        for (k, t) in samples.iter().enumerate() {
            let (single, _) = mapper_forward(&p, &t.0, &t.1, &t.2).unwrap();
            for (a, b) in out.row(k).iter().zip(&single) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_everywhere() {
        let arch = small_arch();
        let p = random_params(arch, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s, i, c) = random_inputs(&arch, &mut rng);
        let (_, acts) = mapper_forward(&p, &s, &i, &c).unwrap();
        let g = mapper_backward(&p, &acts, &vec![0.0; arch.style_dim()]).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(g.d_s1.iter().chain(g.d_i1.iter()).chain(g.d_cond.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = small_arch();
        let p = random_params(arch, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (s, i, c) = random_inputs(&arch, &mut rng);
        let w: Vec<f64> = (0..arch.style_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (_, acts) = mapper_forward(&p, &s, &i, &c).unwrap();
        let g = mapper_backward(&p, &acts, &w).unwrap();

        let loss_p = |q: &MapperParams| dot(&mapper_forward(q, &s, &i, &c).unwrap().0, &w);
        let r = grad_check(loss_p, &p, &g.params, 1e-6, usize::MAX);
        assert!(r.max_rel_error < 1e-6, "{r:?}");

        let r = grad_check(
            |v: &Vec<f64>| dot(&mapper_forward(&p, v, &i, &c).unwrap().0, &w),
            &s,
            &g.d_s1.row(0).to_vec(),
            1e-6,
            usize::MAX,
        );
        assert!(r.max_rel_error < 1e-6, "s1 {r:?}");
        let r = grad_check(
            |v: &Vec<f64>| dot(&mapper_forward(&p, &s, v, &c).unwrap().0, &w),
            &i,
            &g.d_i1.row(0).to_vec(),
            1e-6,
            usize::MAX,
        );
        assert!(r.max_rel_error < 1e-6, "i1 {r:?}");
        let r = grad_check(
            |v: &Vec<f64>| dot(&mapper_forward(&p, &s, &i, v).unwrap().0, &w),
            &c,
            &g.d_cond.row(0).to_vec(),
            1e-6,
            usize::MAX,
        );
        assert!(r.max_rel_error < 1e-6, "cond {r:?}");
        assert!(g.d_cond.iter().any(|v| v.abs() > 1e-6), "condition must influence output");
    }

    #[test]
    fn forward_rejects_bad_widths() {
        let arch = small_arch();
        let p = MapperParams::zeros(arch).unwrap();
        let err = mapper_forward(&p, &[0.0; 24], &[0.0; 7], &[0.0; 8]).unwrap_err();
        assert_eq!(err, MapperError::InputWidth { what: "i1", expected: 8, actual: 7 });
    }

    #[test]
    fn from_stacks_checks_shapes() {
        let arch = small_arch();
        let p = random_params(arch, 12);
        let stacks: Vec<LinearStack> = p.stacks().into_iter().cloned().collect();
        assert_eq!(MapperParams::from_stacks(arch, stacks.clone()).unwrap(), p);
        let mut swapped = stacks;
        swapped.swap(0, 3);
        assert!(MapperParams::from_stacks(arch, swapped).is_err());
    }

    proptest::proptest! {
        #[test]
        fn split_join_inverts(
            cl in 1usize..4, cd in 1usize..6, ml in 1usize..4, md in 1usize..6, fd in 1usize..10,
            seed in 0u64..1000,
        ) {
            let layout = StyleLayout { coarse_layers: cl, coarse_dim: cd, medium_layers: ml, medium_dim: md, fine_dim: fd };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..layout.total()).map(|_| rng.random_range(-5.0..5.0)).collect();
            proptest::prop_assert_eq!(join_style(&split_style(&s, &layout).unwrap()), s);
        }
    }
}
