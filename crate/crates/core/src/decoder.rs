//! Sparse-to-dense decoder: token reprojection, coarse refinement,
//! progressive fusion and the probability head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffgraph::{sigmoid, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::he_normal;
use crate::error::{Error, Result};
use crate::tokenizer::SparseTokenSet;
use crate::volume::{Dims, MaskVolume, Spacing};

/// What the fusion stages receive as the level-`s` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    /// Dense encoder features at every fusion stage; tokens enter only at
    /// the coarsest level.
    Dense,
    /// Reprojected tokens plus encoder features restricted to the cells of
    /// the selected tokens, at every level.
    TokenGated,
}

impl SkipMode {
    pub fn name(self) -> &'static str {
        match self {
            SkipMode::Dense => "dense",
            SkipMode::TokenGated => "token_gated",
        }
    }
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(SkipMode::Dense),
            "token_gated" => Ok(SkipMode::TokenGated),
            _ => Err(Error::Config(format!(
                "unknown skip mode {s:?} (expected dense or token_gated)"
            ))),
        }
    }
}

/// Per-level grids with tokens at their anchors and zeros elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGridSet {
    pub grids: Vec<Tensor>,
    pub occupancy: Vec<Vec<bool>>,
}

/// Places every selected token's feature at its anchor on its level.
pub fn reproject(ts: &SparseTokenSet, lattices: &[Dims]) -> Result<SparseGridSet> {
    let width = ts.tokens.first().map_or(1, |t| t.feature.len());
    let mut grids: Vec<Tensor> = lattices
        .iter()
        .map(|&l| Tensor::zeros(&Tensor::feature_shape(width, l)))
        .collect();
    let mut occupancy: Vec<Vec<bool>> = lattices.iter().map(|l| vec![false; l.len()]).collect();
    for t in &ts.tokens {
        let lvl = t.level.checked_sub(1).filter(|&l| l < lattices.len()).ok_or_else(|| {
            Error::InvalidArgument(format!("token level {} outside 1..={}", t.level, lattices.len()))
        })?;
        let lat = lattices[lvl];
        let (d, h, w) = t.coord;
        if d >= lat.d || h >= lat.h || w >= lat.w || t.feature.len() != width {
            return Err(Error::InvalidArgument(format!(
                "token at {:?} (width {}) does not fit level {} lattice {lat}",
                t.coord,
                t.feature.len(),
                t.level
            )));
        }
        let site = lat.index(d, h, w);
        let plane = lat.len();
        for (c, &v) in t.feature.iter().enumerate() {
            grids[lvl].data_mut()[c * plane + site] = v;
        }
        occupancy[lvl][site] = true;
    }
    Ok(SparseGridSet { grids, occupancy })
}

/// Two 3×3×3 conv + ReLU layers.
#[derive(Debug, Clone)]
pub struct ConvPair {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ConvPair {
    fn register<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w1 = store.add(format!("{name}.w1"), he_normal(rng, &[cout, cin, 3, 3, 3], cin * 27, 2.0));
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(&[cout]));
        let w2 = store.add(format!("{name}.w2"), he_normal(rng, &[cout, cout, 3, 3, 3], cout * 27, 2.0));
        let b2 = store.add(format!("{name}.b2"), Tensor::zeros(&[cout]));
        ConvPair { w1, b1, w2, b2 }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let y = tape.conv3d(x, w1, Some(b1), 1)?;
        let y = tape.relu(y);
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        let y = tape.conv3d(y, w2, Some(b2), 1)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Per-level `(C_s, C_tok)` map back from token width.
    pub back: Vec<ParamId>,
    pub phi: ConvPair,
    /// Fusion stage for levels `1..L`, index `s - 1`.
    pub psi: Vec<ConvPair>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl DecoderParams {
    pub fn register<R: Rng>(store: &mut ParamStore, channels: &[usize], token_dim: usize, rng: &mut R) -> Self {
        let l = channels.len();
        let back = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| store.add(format!("dec.back{}.w", i + 1), he_normal(rng, &[c, token_dim], token_dim, 1.0)))
            .collect();
        let phi = ConvPair::register(store, "dec.phi", channels[l - 1], channels[l - 1], rng);
        let psi = (0..l - 1)
            .map(|s| ConvPair::register(store, &format!("dec.psi{}", s + 1), channels[s + 1] + channels[s], channels[s], rng))
            .collect();
        let head_w = store.add("dec.head.w", he_normal(rng, &[1, channels[0]], channels[0], 1.0));
        let head_b = store.add("dec.head.b", Tensor::zeros(&[1]));
        DecoderParams {
            back,
            phi,
            psi,
            head_w,
            head_b,
        }
    }
}

/// `G^(L) = φ(F̃^(L))`.
pub fn refine_coarse(tape: &mut Tape, g: Var, params: &DecoderParams) -> Result<Var> {
    params.phi.apply(tape, g)
}

/// `G^(s) = ψ_s(concat(U₂(G^(s+1)), skip))`; the upsample lands directly on
/// the skip lattice.
pub fn fuse_step(tape: &mut Tape, g_next: Var, skip: Var, stage: &ConvPair) -> Result<Var> {
    let target = tape.value(skip).spatial();
    let up = tape.upsample2(g_next, target)?;
    let cat = tape.concat(up, skip)?;
    stage.apply(tape, cat)
}

/// Head logits upsampled ×2 onto `out`, then the sigmoid.
pub fn predict(tape: &mut Tape, g1: Var, params: &DecoderParams, out: Dims) -> Result<Var> {
    let (w, b) = (tape.param(params.head_w), tape.param(params.head_b));
    let logits = tape.pointwise(g1, w, Some(b))?;
    let up = tape.upsample2(logits, out)?;
    Ok(tape.sigmoid(up))
}

/// Forward-only probability volume from level-1 decoder features.
pub fn predict_mask(store: &ParamStore, params: &DecoderParams, g1: &Tensor, out: Dims) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let g = tape.input(g1.clone());
    let p = predict(&mut tape, g, params, out)?;
    Ok(tape.value(p).data().to_vec())
}

/// `1` where `p ≥ θ`.
pub fn binarize(p: &[f64], dims: Dims, spacing: Spacing, theta: f64) -> Result<MaskVolume> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("threshold {theta} outside [0, 1]")));
    }
    let labels = p.iter().map(|&v| u8::from(v >= theta)).collect();
    MaskVolume::new(dims, labels).map(|m| m.with_spacing(spacing))
}

/// Probability of a single logit, for callers outside the tape.
pub fn probability(logit: f64) -> f64 {
    sigmoid(logit)
}
