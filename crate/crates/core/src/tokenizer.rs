//! Codebook quantization, boundary-aware scoring and sparse top-K selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffgraph::kernels::avg_pool3d;
use crate::diffgraph::Tensor;
use crate::encoder::{CandidatePool, LevelGrid};
use crate::error::{Error, Result};
use crate::volume::Dims;

/// `M` prototypes of width `C_tok`, stored row-major as an `(M, C_tok)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    prototypes: Tensor,
}

impl Codebook {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        if prototypes.rank() != 2 || prototypes.shape()[0] < 2 || prototypes.shape()[1] == 0 {
            return Err(Error::Shape(format!(
                "codebook needs shape (M >= 2, C >= 1), got {:?}",
                prototypes.shape()
            )));
        }
        if !prototypes.all_finite() {
            return Err(Error::NonFinite("codebook prototype".into()));
        }
        Ok(Codebook { prototypes })
    }

    /// Zero-mean Gaussian rows with standard deviation `sigma`.
    pub fn gaussian(m: usize, dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidArgument(format!("codebook sigma {sigma}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * dim).map(|_| normal.sample(&mut rng)).collect();
        Codebook::new(Tensor::new(&[m, dim], data)?)
    }

    pub fn len(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let c = self.dim();
        &self.prototypes.data()[k * c..(k + 1) * c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn into_tensor(self) -> Tensor {
        self.prototypes
    }

    /// Nearest prototype by squared L2 distance; ties go to the lower index.
    pub fn nearest(&self, t: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.len() {
            let d2: f64 = self.row(k).iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best
    }
}

/// Per-candidate quantization results, in pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPool {
    pub codes: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    /// `‖t − c_k‖₂`.
    pub distances: Vec<f64>,
}

impl QuantizedPool {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.vectors[i].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Quantizes token vectors given as the columns of a `(C, N)` tensor.
pub fn quantize_columns(tokens: &Tensor, cb: &Codebook) -> Result<QuantizedPool> {
    if tokens.rank() != 2 || tokens.shape()[0] != cb.dim() {
        return Err(Error::Shape(format!(
            "tokens {:?} against codebook width {}",
            tokens.shape(),
            cb.dim()
        )));
    }
    let (c, n) = (tokens.shape()[0], tokens.shape()[1]);
    let features: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..c).map(|ch| tokens.data()[ch * n + j]).collect())
        .collect();
    Ok(quantize_vectors(features.iter().map(Vec::as_slice), cb))
}

pub fn quantize(pool: &CandidatePool, cb: &Codebook) -> Result<QuantizedPool> {
    if let Some(t) = pool.tokens.iter().find(|t| t.feature.len() != cb.dim()) {
        return Err(Error::Shape(format!(
            "token width {} against codebook width {}",
            t.feature.len(),
            cb.dim()
        )));
    }
    Ok(quantize_vectors(pool.tokens.iter().map(|t| t.feature.as_slice()), cb))
}

fn quantize_vectors<'a>(tokens: impl Iterator<Item = &'a [f64]>, cb: &Codebook) -> QuantizedPool {
    let mut q = QuantizedPool {
        codes: Vec::new(),
        vectors: Vec::new(),
        distances: Vec::new(),
    };
    for t in tokens {
        let (k, d2) = cb.nearest(t);
        q.codes.push(k);
        q.vectors.push(cb.row(k).to_vec());
        q.distances.push(d2.sqrt());
    }
    q
}

/// Usage count of every prototype.
pub fn prototype_freq(codes: &[usize], m: usize) -> Vec<usize> {
    let mut freq = vec![0; m];
    for &k in codes {
        freq[k] += 1;
    }
    freq
}

/// Central-difference gradient magnitude, one-sided on the faces.
pub fn gradient_magnitude(field: &[f64], dims: Dims) -> Vec<f64> {
    let [nd, nh, nw] = dims.as_array();
    let diff = |n: usize, i: usize, at: &dyn Fn(usize) -> f64| -> f64 {
        if n < 2 {
            0.0
        } else if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            (at(i + 1) - at(i - 1)) / 2.0
        }
    };
    let mut out = vec![0.0; dims.len()];
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let gd = diff(nd, d, &|i| field[dims.index(i, h, w)]);
                let gh = diff(nh, h, &|i| field[dims.index(d, i, w)]);
                let gw = diff(nw, w, &|i| field[dims.index(d, h, i)]);
                out[dims.index(d, h, w)] = (gd * gd + gh * gh + gw * gw).sqrt();
            }
        }
    }
    out
}

/// Boundary proximity of every candidate (pool order) from the normalised
/// input field: per-level min-max normalised mean gradient magnitude over the
/// token's cell, measured on the input averaged down to that level.
pub fn boundary_proximity(field: &[f64], dims: Dims, grids: &[LevelGrid]) -> Result<Vec<f64>> {
    if field.len() != dims.len() {
        return Err(Error::Shape(format!("field of {} values for {dims}", field.len())));
    }
    let input = Tensor::from_field(dims, field.to_vec())?;
    let mut out = Vec::new();
    for grid in grids {
        let f = 1usize << grid.level;
        let pooled = avg_pool3d(&input, [f, f, f])?;
        let pd = pooled.spatial();
        let lat = grid.lattice;
        let mut level = vec![0.0; lat.len()];
        for d in 0..lat.d {
            for h in 0..lat.h {
                for w in 0..lat.w {
                    level[lat.index(d, h, w)] = pooled.data()[pd.index(d, h, w)];
                }
            }
        }
        let mag = gradient_magnitude(&level, lat);
        let raw: Vec<f64> = (0..grid.count())
            .map(|j| {
                let b = grid.bounds(j);
                let mut acc = 0.0;
                for d in b[0].0..b[0].1 {
                    for h in b[1].0..b[1].1 {
                        for w in b[2].0..b[2].1 {
                            acc += mag[lat.index(d, h, w)];
                        }
                    }
                }
                acc / ((b[0].1 - b[0].0) * (b[1].1 - b[1].0) * (b[2].1 - b[2].0)) as f64
            })
            .collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend(raw.iter().map(|&r| if hi > lo { (r - lo) / (hi - lo) } else { 0.0 }));
    }
    Ok(out)
}

/// `‖t^q‖ · P_b · ln(N / freq)`.
pub fn score(norm: f64, pb: f64, freq: usize, n: usize) -> f64 {
    norm * pb * diversity(freq, n)
}

pub fn diversity(freq: usize, n: usize) -> f64 {
    (n as f64 / freq as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    pub norm: f64,
    pub boundary: f64,
    pub diversity: f64,
    pub total: f64,
}

/// Score records for a quantized pool given per-candidate boundary terms.
pub fn score_pool(q: &QuantizedPool, boundary: &[f64], m: usize) -> Result<Vec<ScoreRecord>> {
    if boundary.len() != q.len() {
        return Err(Error::Shape(format!(
            "{} boundary terms for {} candidates",
            boundary.len(),
            q.len()
        )));
    }
    let n = q.len();
    let freq = prototype_freq(&q.codes, m);
    Ok((0..n)
        .map(|i| {
            let norm = q.norm(i);
            let div = diversity(freq[q.codes[i]], n);
            ScoreRecord {
                norm,
                boundary: boundary[i],
                diversity: div,
                total: norm * boundary[i] * div,
            }
        })
        .collect())
}

/// Indices of the `k` largest scores, ordered by descending score then
/// ascending index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "K = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Random,
    UniformGrid,
    Hierarchical,
    Boundary,
    Vq,
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Random,
        Strategy::UniformGrid,
        Strategy::Hierarchical,
        Strategy::Boundary,
        Strategy::Vq,
        Strategy::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::UniformGrid => "uniform-grid",
            Strategy::Hierarchical => "hierarchical",
            Strategy::Boundary => "boundary",
            Strategy::Vq => "vq",
            Strategy::Combined => "combined",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (expected one of {})",
                    Strategy::ALL.map(Strategy::name).join(", ")
                ))
            })
    }
}

/// Largest-remainder apportionment of `k` picks proportional to `counts`.
pub fn proportional_quotas(counts: &[usize], k: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * k / n).collect();
    let mut left = k - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // remainder (c·k mod n) compared exactly; ties to the earlier level
    order.sort_by(|&a, &b| ((counts[b] * k) % n).cmp(&((counts[a] * k) % n)).then(a.cmp(&b)));
    for &l in &order {
        if left == 0 {
            break;
        }
        if quota[l] < counts[l] {
            quota[l] += 1;
            left -= 1;
        }
    }
    quota
}

/// Selected pool indices under `strategy`, ordered by descending full score
/// then ascending index.
pub fn select_strategy(
    strategy: Strategy,
    records: &[ScoreRecord],
    counts: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = records.len();
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Shape(format!("layout {counts:?} for a pool of {n}")));
    }
    let totals: Vec<f64> = records.iter().map(|r| r.total).collect();
    if strategy == Strategy::Combined {
        return select_topk(&totals, k);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("K = {k} outside 1..={n}")));
    }
    let mut picked: Vec<usize> = match strategy {
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, n, k).into_vec()
        }
        Strategy::UniformGrid => (0..k).map(|i| i * n / k).collect(),
        Strategy::Hierarchical => {
            let mut out = Vec::with_capacity(k);
            let mut offset = 0;
            for (&c, q) in counts.iter().zip(proportional_quotas(counts, k)) {
                let local = &totals[offset..offset + c];
                if q > 0 {
                    out.extend(select_topk(local, q)?.into_iter().map(|i| i + offset));
                }
                offset += c;
            }
            out
        }
        Strategy::Boundary => {
            let b: Vec<f64> = records.iter().map(|r| r.boundary).collect();
            select_topk(&b, k)?
        }
        Strategy::Vq => {
            let v: Vec<f64> = records.iter().map(|r| r.norm * r.diversity).collect();
            select_topk(&v, k)?
        }
        Strategy::Combined => unreachable!(),
    };
    picked.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedToken {
    pub pool_index: usize,
    pub level: usize,
    pub coord: (usize, usize, usize),
    pub cell: [usize; 3],
    pub code: usize,
    pub score: f64,
    /// Quantized feature `t^q`.
    pub feature: Vec<f64>,
}

/// The `K` tokens handed to the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTokenSet {
    pub tokens: Vec<SelectedToken>,
}

impl SparseTokenSet {
    pub fn build(pool: &CandidatePool, q: &QuantizedPool, records: &[ScoreRecord], picked: &[usize]) -> Self {
        let tokens = picked
            .iter()
            .map(|&i| {
                let c = &pool.tokens[i];
                SelectedToken {
                    pool_index: i,
                    level: c.level,
                    coord: c.coord,
                    cell: c.cell,
                    code: q.codes[i],
                    score: records[i].total,
                    feature: q.vectors[i].clone(),
                }
            })
            .collect();
        SparseTokenSet { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Selected tokens per level (1-based levels, `levels` entries).
    pub fn level_counts(&self, levels: usize) -> Vec<usize> {
        let mut c = vec![0; levels];
        for t in &self.tokens {
            c[t.level - 1] += 1;
        }
        c
    }
}
