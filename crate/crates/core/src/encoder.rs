//! Hierarchical encoder: a stride-2 convolution pyramid and the fixed-size
//! candidate token pool pooled from it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffgraph::kernels::{partition_pool, Partition};
use crate::diffgraph::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Dims;

/// Default per-level token split, fine to coarse.
pub const DEFAULT_LAYOUT: [usize; 4] = [256, 96, 36, 12];
pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Lattice extents of levels `1..=levels`: floor-halving per level.
pub fn level_dims(input: Dims, levels: usize) -> Result<Vec<Dims>> {
    let min = 1usize << levels;
    if input.d < min || input.h < min || input.w < min {
        return Err(Error::InvalidArgument(format!(
            "volume {input} too small for {levels} levels (each axis needs >= {min})"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = input;
    for _ in 0..levels {
        cur = cur.halved();
        out.push(cur);
    }
    Ok(out)
}

/// Partition of one level's lattice into token cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    /// 1-based pyramid level.
    pub level: usize,
    pub lattice: Dims,
    pub cells: [usize; 3],
    pub partition: Partition,
}

impl LevelGrid {
    pub fn new(level: usize, lattice: Dims, cells: [usize; 3]) -> Result<Self> {
        for (g, n) in cells.iter().zip(lattice.as_array()) {
            if *g == 0 || *g > n {
                return Err(Error::InvalidArgument(format!(
                    "{cells:?} cells do not fit lattice {lattice}"
                )));
            }
        }
        Ok(LevelGrid {
            level,
            lattice,
            cells,
            partition: Partition::grid(lattice, cells),
        })
    }

    pub fn count(&self) -> usize {
        self.cells.iter().product()
    }

    /// `[start, end)` per axis of cell `j` (lexicographic `(d, h, w)` order).
    pub fn bounds(&self, j: usize) -> [(usize, usize); 3] {
        let g = Dims::from_array(self.cells);
        let (d, h, w) = g.coord(j);
        [
            self.partition.axes[0][d],
            self.partition.axes[1][h],
            self.partition.axes[2][w],
        ]
    }

    /// Minimum corner of cell `j` on the level lattice.
    pub fn anchor(&self, j: usize) -> (usize, usize, usize) {
        let b = self.bounds(j);
        (b[0].0, b[1].0, b[2].0)
    }

    pub fn anchor_site(&self, j: usize) -> usize {
        let (d, h, w) = self.anchor(j);
        self.lattice.index(d, h, w)
    }

    pub fn cell_extent(&self, j: usize) -> [usize; 3] {
        let b = self.bounds(j);
        [b[0].1 - b[0].0, b[1].1 - b[1].0, b[2].1 - b[2].0]
    }
}

/// Factorisations `count = gd·gh·gw` with every factor within the lattice.
fn factorizations(lattice: Dims, count: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for gd in 1..=lattice.d.min(count) {
        if count % gd != 0 {
            continue;
        }
        let rest = count / gd;
        for gh in 1..=lattice.h.min(rest) {
            if rest % gh == 0 && rest / gh <= lattice.w {
                out.push([gd, gh, rest / gh]);
            }
        }
    }
    out
}

/// Coarsest regular grid with exactly `count` cells: the most isotropic
/// cells (smallest maximum extent, then smallest extent sum), ties broken
/// by the lexicographically smallest grid.
pub fn choose_grid(lattice: Dims, count: usize) -> Option<[usize; 3]> {
    let n = lattice.as_array();
    // the last cell on each axis absorbs the remainder
    let key = |g: &[usize; 3]| {
        let e: Vec<usize> = (0..3).map(|a| n[a] - (g[a] - 1) * (n[a] / g[a])).collect();
        (e[0].max(e[1]).max(e[2]), e[0] + e[1] + e[2])
    };
    factorizations(lattice, count)
        .into_iter()
        .min_by(|a, b| key(a).cmp(&key(b)).then(a.cmp(b)))
}

/// Per-level candidate counts, fine level first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout(pub Vec<usize>);

impl Default for TokenLayout {
    fn default() -> Self {
        TokenLayout(DEFAULT_LAYOUT.to_vec())
    }
}

impl std::fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for TokenLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let counts = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad layout entry {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenLayout(counts))
    }
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// Cell grids for each level; fails when a count cannot tile its lattice.
    pub fn grids(&self, lattices: &[Dims]) -> Result<Vec<LevelGrid>> {
        if lattices.len() != self.0.len() {
            return Err(Error::Config(format!(
                "layout has {} levels, pyramid has {}",
                self.0.len(),
                lattices.len()
            )));
        }
        self.0
            .iter()
            .zip(lattices)
            .enumerate()
            .map(|(i, (&count, &lattice))| {
                let cells = choose_grid(lattice, count).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "level {} lattice {lattice} cannot be split into {count} cells",
                        i + 1
                    ))
                })?;
                LevelGrid::new(i + 1, lattice, cells)
            })
            .collect()
    }

    /// The lattice-compatible layout with the same total that is closest to
    /// this one in L1 distance. Ties go to the layout holding the most
    /// tokens at the coarsest levels. Returns `self` when already compatible.
    pub fn fit(&self, lattices: &[Dims]) -> Result<TokenLayout> {
        if self.grids(lattices).is_ok() {
            return Ok(self.clone());
        }
        if lattices.len() != self.0.len() {
            return Err(Error::Config(format!(
                "layout has {} levels, pyramid has {}",
                self.0.len(),
                lattices.len()
            )));
        }
        let total = self.total();
        let feasible: Vec<Vec<usize>> = lattices
            .iter()
            .map(|&l| {
                let mut v: Vec<usize> = (1..=total.min(l.len()))
                    .filter(|&c| !factorizations(l, c).is_empty())
                    .collect();
                v.reverse();
                v
            })
            .collect();
        // search coarse to fine, larger counts first
        let order: Vec<usize> = (0..lattices.len()).rev().collect();
        let mut best: Option<(usize, Vec<usize>)> = None;
        let mut cur = vec![0; lattices.len()];
        search(&order, 0, total, 0, &feasible, &self.0, &mut cur, &mut best);
        best.map(|(_, c)| TokenLayout(c)).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no layout of {total} tokens fits lattices {:?}",
                lattices.iter().map(|l| l.to_string()).collect::<Vec<_>>()
            ))
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn search(
    order: &[usize],
    depth: usize,
    remaining: usize,
    cost: usize,
    feasible: &[Vec<usize>],
    target: &[usize],
    cur: &mut Vec<usize>,
    best: &mut Option<(usize, Vec<usize>)>,
) {
    if let Some((b, _)) = best {
        if cost >= *b {
            return;
        }
    }
    if depth == order.len() {
        if remaining == 0 {
            *best = Some((cost, cur.clone()));
        }
        return;
    }
    let lvl = order[depth];
    let rest_max: usize = order[depth + 1..]
        .iter()
        .map(|&l| feasible[l].first().copied().unwrap_or(0))
        .sum();
    let rest_min = order.len() - depth - 1;
    for &c in &feasible[lvl] {
        if c > remaining || remaining - c > rest_max || remaining - c < rest_min {
            continue;
        }
        cur[lvl] = c;
        let step = c.abs_diff(target[lvl]);
        search(order, depth + 1, remaining - c, cost + step, feasible, target, cur, best);
    }
}

/// One candidate token: a pooled feature vector and its spatial anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCandidate {
    pub feature: Vec<f64>,
    pub level: usize,
    pub coord: (usize, usize, usize),
    pub cell: [usize; 3],
}

/// Ordered candidate pool: level-major (fine first), then lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub tokens: Vec<TokenCandidate>,
    pub counts: Vec<usize>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(level index, index within level)` of every pool entry.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.counts
            .iter()
            .map(|&c| {
                let o = acc;
                acc += c;
                o
            })
            .collect()
    }
}

/// Per-level dense encoder features `F_enc`, fine first.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn lattices(&self) -> Vec<Dims> {
        self.levels.iter().map(|t| t.spatial()).collect()
    }
}

/// Pools one token per cell on every level.
pub fn pool_candidates(pyr: &PyramidFeatures, layout: &TokenLayout) -> Result<CandidatePool> {
    let grids = layout.grids(&pyr.lattices())?;
    let mut tokens = Vec::with_capacity(layout.total());
    for (grid, feats) in grids.iter().zip(&pyr.levels) {
        let pooled = partition_pool(feats, &grid.partition)?;
        let c = pooled.channels();
        let n = grid.count();
        for j in 0..n {
            tokens.push(TokenCandidate {
                feature: (0..c).map(|ch| pooled.data()[ch * n + j]).collect(),
                level: grid.level,
                coord: grid.anchor(j),
                cell: grid.cell_extent(j),
            });
        }
    }
    Ok(CandidatePool {
        tokens,
        counts: layout.0.clone(),
    })
}

/// Parameter handles of the encoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// Stride-2 conv weight and bias per level (level 1 is the stem).
    pub down: Vec<(ParamId, ParamId)>,
    /// Per-level token projection `(C_tok, C_level)`.
    pub proj: Vec<ParamId>,
}

pub(crate) fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

impl EncoderParams {
    pub fn register<R: Rng>(store: &mut ParamStore, channels: &[usize], token_dim: usize, rng: &mut R) -> Self {
        let mut down = Vec::with_capacity(channels.len());
        let mut proj = Vec::with_capacity(channels.len());
        let mut cin = 1;
        for (i, &c) in channels.iter().enumerate() {
            let w = he_normal(rng, &[c, cin, 3, 3, 3], cin * 27, 2.0);
            let wid = store.add(format!("enc.down{}.w", i + 1), w);
            let bid = store.add(format!("enc.down{}.b", i + 1), Tensor::zeros(&[c]));
            down.push((wid, bid));
            cin = c;
        }
        for (i, &c) in channels.iter().enumerate() {
            let w = he_normal(rng, &[token_dim, c], c, 1.0);
            proj.push(store.add(format!("enc.proj{}.w", i + 1), w));
        }
        EncoderParams { down, proj }
    }

    pub fn levels(&self) -> usize {
        self.down.len()
    }
}

/// Records the pyramid on `tape`: level ℓ is `relu(conv_s2(level ℓ−1))`,
/// cropped to the floor-half lattice.
pub fn encode(tape: &mut Tape, x: Var, params: &EncoderParams) -> Result<Vec<Var>> {
    let dims = level_dims(tape.value(x).spatial(), params.levels())?;
    let mut cur = x;
    let mut out = Vec::with_capacity(dims.len());
    for (&(w, b), &lattice) in params.down.iter().zip(&dims) {
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.conv3d(cur, w, Some(b), 2)?;
        let y = tape.crop(y, lattice)?;
        cur = tape.relu(y);
        out.push(cur);
    }
    Ok(out)
}

/// Forward-only pyramid for a normalised single-channel field.
pub fn build_pyramid(store: &ParamStore, params: &EncoderParams, field: &Tensor) -> Result<PyramidFeatures> {
    let mut tape = Tape::new(store);
    let x = tape.input(field.clone());
    let levels = encode(&mut tape, x, params)?;
    Ok(PyramidFeatures {
        levels: levels.into_iter().map(|v| tape.value(v).clone()).collect(),
    })
}

/// Pooled and projected tokens of every level as `(C_tok, n_level)` vars.
pub fn project_tokens(
    tape: &mut Tape,
    levels: &[Var],
    grids: &[LevelGrid],
    params: &EncoderParams,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(levels.len());
    for ((&feat, grid), &proj) in levels.iter().zip(grids).zip(&params.proj) {
        let pooled = tape.partition_pool(feat, grid.partition.clone())?;
        let c = tape.value(pooled).channels();
        let flat = tape.reshape(pooled, &[c, grid.count()])?;
        let w = tape.param(proj);
        out.push(tape.pointwise(flat, w, None)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pyramid_dims_for_32_cube() {
        let dims = level_dims(Dims::cube(32), 4).unwrap();
        assert_eq!(dims, vec![Dims::cube(16), Dims::cube(8), Dims::cube(4), Dims::cube(2)]);
        assert!(level_dims(Dims::new(32, 15, 32), 4).is_err());
    }

    #[test]
    fn grid_choice_prefers_isotropic_cells() {
        assert_eq!(choose_grid(Dims::cube(16), 256), Some([4, 8, 8]));
        assert_eq!(choose_grid(Dims::cube(4), 36), Some([3, 3, 4]));
        assert_eq!(choose_grid(Dims::cube(2), 12), None);
        assert_eq!(choose_grid(Dims::cube(8), 1), Some([1, 1, 1]));
    }

    #[test]
    fn default_layout_fits_64_cube_unchanged() {
        let lat = level_dims(Dims::cube(64), 4).unwrap();
        let l = TokenLayout::default();
        assert_eq!(l.fit(&lat).unwrap(), l);
        assert_eq!(l.grids(&lat).unwrap().iter().map(|g| g.count()).sum::<usize>(), 400);
    }

    #[test]
    fn default_layout_refit_for_32_cube() {
        let lat = level_dims(Dims::cube(32), 4).unwrap();
        let fitted = TokenLayout::default().fit(&lat).unwrap();
        assert_eq!(fitted.total(), 400);
        assert_eq!(fitted, TokenLayout(vec![256, 100, 36, 8]));
        assert!(fitted.grids(&lat).is_ok());
    }

    #[test]
    fn small_layout_fit() {
        let lat = level_dims(Dims::cube(8), 3).unwrap();
        let fitted = TokenLayout(vec![12, 2, 1]).fit(&lat).unwrap();
        assert_eq!(fitted.0, vec![12, 2, 1]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = EncoderParams::register(&mut store, &[2, 3, 4, 5], 4, &mut rng);
        let field = Tensor::zeros(&[1, 32, 32, 32]);
        let pyr = build_pyramid(&store, &params, &field).unwrap();
        assert_eq!(pyr.levels.len(), 4);
        for (lvl, t) in pyr.levels.iter().enumerate() {
            assert_eq!(t.channels(), [2, 3, 4, 5][lvl]);
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}
