//! Training losses and evaluation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tokenizer::SparseTokenSet;
use crate::volume::{Dims, MaskVolume, Spacing};

pub const BCE_CLAMP: f64 = 1e-7;
pub const BOUNDARY_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub bce: f64,
    pub vq: f64,
    pub beta: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 1.0,
            bce: 0.5,
            vq: 0.1,
            beta: 0.25,
            eps: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dice, self.bce, self.vq, self.beta, self.eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.eps <= 0.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn check_len(pred: usize, target: usize) -> Result<()> {
    if pred != target {
        return Err(Error::Shape(format!("prediction has {pred} voxels, target {target}")));
    }
    Ok(())
}

/// `1 − (2Σyp + ε)/(Σy + Σp + ε)`.
pub fn dice_loss(pred: &[f64], target: &MaskVolume, eps: f64) -> Result<f64> {
    check_len(pred.len(), target.labels.len())?;
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(&target.labels) {
        let y = f64::from(y);
        inter += y * p;
        sy += y;
        sp += p;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sy + sp + eps))
}

/// Mean binary cross-entropy with predictions clamped to `[δ, 1 − δ]`.
pub fn bce_loss(pred: &[f64], target: &MaskVolume) -> Result<f64> {
    check_len(pred.len(), target.labels.len())?;
    let mut acc = 0.0;
    for (&p, &y) in pred.iter().zip(&target.labels) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        acc += if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-acc / pred.len() as f64)
}

pub fn total_loss(dice: f64, bce: f64, vq: f64, w: &LossWeights) -> f64 {
    w.dice * dice + w.bce * bce + w.vq * vq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &MaskVolume, target: &MaskVolume) -> Result<Self> {
        if pred.dims != target.dims {
            return Err(Error::Shape(format!("masks {} and {}", pred.dims, target.dims)));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.labels.iter().zip(&target.labels) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn dice(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn dice_score(pred: &MaskVolume, target: &MaskVolume) -> Result<Option<f64>> {
    Ok(Confusion::of(pred, target)?.dice())
}

pub fn iou(pred: &MaskVolume, target: &MaskVolume) -> Result<Option<f64>> {
    Ok(Confusion::of(pred, target)?.iou())
}

pub fn sensitivity(pred: &MaskVolume, target: &MaskVolume) -> Result<Option<f64>> {
    Ok(Confusion::of(pred, target)?.sensitivity())
}

pub fn precision(pred: &MaskVolume, target: &MaskVolume) -> Result<Option<f64>> {
    Ok(Confusion::of(pred, target)?.precision())
}

/// Foreground voxels with at least one 6-neighbour in the background; the
/// outside of the volume counts as background.
pub fn surface(mask: &MaskVolume) -> Vec<(usize, usize, usize)> {
    let dims = mask.dims;
    let fg = |d: isize, h: isize, w: isize| -> bool {
        if d < 0 || h < 0 || w < 0 || d >= dims.d as isize || h >= dims.h as isize || w >= dims.w as isize {
            return false;
        }
        mask.labels[dims.index(d as usize, h as usize, w as usize)] == 1
    };
    let mut out = Vec::new();
    for d in 0..dims.d {
        for h in 0..dims.h {
            for w in 0..dims.w {
                let (id, ih, iw) = (d as isize, h as isize, w as isize);
                if !fg(id, ih, iw) {
                    continue;
                }
                let nbrs = [
                    (id - 1, ih, iw),
                    (id + 1, ih, iw),
                    (id, ih - 1, iw),
                    (id, ih + 1, iw),
                    (id, ih, iw - 1),
                    (id, ih, iw + 1),
                ];
                if nbrs.iter().any(|&(a, b, c)| !fg(a, b, c)) {
                    out.push((d, h, w));
                }
            }
        }
    }
    out
}

/// Linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

fn nearest_distances(from: &[(usize, usize, usize)], to: &[(usize, usize, usize)], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&(d, h, w)| {
            to.iter()
                .map(|&(d2, h2, w2)| {
                    let a = (d as f64 - d2 as f64) * s[0];
                    let b = (h as f64 - h2 as f64) * s[1];
                    let c = (w as f64 - w2 as f64) * s[2];
                    a * a + b * b + c * c
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// 95th percentile of the symmetric surface distances in physical units;
/// `None` when either mask is empty. Brute force, O(|S_a|·|S_b|).
pub fn hd95(a: &MaskVolume, b: &MaskVolume, spacing: Spacing) -> Result<Option<f64>> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("masks {} and {}", a.dims, b.dims)));
    }
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let s = spacing.as_f64();
    let mut all = nearest_distances(&sa, &sb, s);
    all.extend(nearest_distances(&sb, &sa, s));
    Ok(percentile(&mut all, 0.95))
}

/// Fraction of the `m` prototypes used at least once.
pub fn codebook_utilization(codes: &[usize], m: usize) -> f64 {
    let mut used = vec![false; m];
    for &k in codes {
        used[k] = true;
    }
    used.iter().filter(|&&u| u).count() as f64 / m as f64
}

/// Ground-truth surface dilated by a Euclidean ball of `radius` voxels.
pub fn dilated_surface(gt: &MaskVolume, radius: f64) -> Vec<bool> {
    let dims = gt.dims;
    let r = radius.floor() as isize;
    let mut out = vec![false; dims.len()];
    for (d, h, w) in surface(gt) {
        for dd in -r..=r {
            for dh in -r..=r {
                for dw in -r..=r {
                    if ((dd * dd + dh * dh + dw * dw) as f64) > radius * radius {
                        continue;
                    }
                    let (a, b, c) = (d as isize + dd, h as isize + dh, w as isize + dw);
                    if a >= 0 && b >= 0 && c >= 0 && (a as usize) < dims.d && (b as usize) < dims.h && (c as usize) < dims.w {
                        out[dims.index(a as usize, b as usize, c as usize)] = true;
                    }
                }
            }
        }
    }
    out
}

/// Full-resolution `[start, end)` box covered by a token's cell.
pub fn token_box(level: usize, coord: (usize, usize, usize), cell: [usize; 3], dims: Dims) -> [(usize, usize); 3] {
    let f = 1usize << level;
    let c = [coord.0, coord.1, coord.2];
    let n = dims.as_array();
    [0, 1, 2].map(|a| ((c[a] * f).min(n[a]), ((c[a] + cell[a]) * f).min(n[a])))
}

/// Fraction of selected tokens whose full-resolution cell meets the dilated
/// ground-truth surface; `None` for an empty ground truth.
pub fn boundary_token_ratio(ts: &SparseTokenSet, gt: &MaskVolume, radius: f64) -> Option<f64> {
    if gt.count() == 0 || ts.is_empty() {
        return None;
    }
    let dims = gt.dims;
    let near = dilated_surface(gt, radius);
    let hits = ts
        .tokens
        .iter()
        .filter(|t| {
            let b = token_box(t.level, t.coord, t.cell, dims);
            (b[0].0..b[0].1).any(|d| (b[1].0..b[1].1).any(|h| (b[2].0..b[2].1).any(|w| near[dims.index(d, h, w)])))
        })
        .count();
    Some(hits as f64 / ts.len() as f64)
}

pub fn compression_ratio(dims: Dims, k: usize) -> f64 {
    dims.len() as f64 / k as f64
}

/// Evaluation metrics for one case, or their mean over a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub hd95: Option<f64>,
    pub codebook_utilization: Option<f64>,
    pub boundary_token_ratio: Option<f64>,
    pub compression_ratio: Option<f64>,
    pub wall_ms: f64,
}

pub const METRIC_KEYS: [&str; 8] = [
    "dice",
    "iou",
    "hd95",
    "sensitivity",
    "precision",
    "codebook_utilization",
    "boundary_token_ratio",
    "compression_ratio",
];

impl MetricsReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "dice" => self.dice,
            "iou" => self.iou,
            "hd95" => self.hd95,
            "sensitivity" => self.sensitivity,
            "precision" => self.precision,
            "codebook_utilization" => self.codebook_utilization,
            "boundary_token_ratio" => self.boundary_token_ratio,
            "compression_ratio" => self.compression_ratio,
            _ => None,
        }
    }

    fn slot(&mut self, key: &str) -> &mut Option<f64> {
        match key {
            "dice" => &mut self.dice,
            "iou" => &mut self.iou,
            "hd95" => &mut self.hd95,
            "sensitivity" => &mut self.sensitivity,
            "precision" => &mut self.precision,
            "codebook_utilization" => &mut self.codebook_utilization,
            "boundary_token_ratio" => &mut self.boundary_token_ratio,
            _ => &mut self.compression_ratio,
        }
    }

    /// Mean over cases with undefined entries skipped; the second value
    /// counts the skipped entries per metric key.
    pub fn mean(cases: &[MetricsReport]) -> (MetricsReport, Vec<(&'static str, usize)>) {
        let mut out = MetricsReport::default();
        let mut skipped = Vec::new();
        for key in METRIC_KEYS {
            let vals: Vec<f64> = cases.iter().filter_map(|c| c.get(key)).collect();
            if vals.len() < cases.len() {
                skipped.push((key, cases.len() - vals.len()));
            }
            *out.slot(key) = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        }
        out.wall_ms = cases.iter().map(|c| c.wall_ms).sum::<f64>() / cases.len().max(1) as f64;
        (out, skipped)
    }

    /// `key=value` lines, `prefix` prepended to every key.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        for key in METRIC_KEYS {
            match self.get(key) {
                Some(v) => writeln!(s, "{prefix}{key}={v}").unwrap(),
                None => writeln!(s, "{prefix}{key}=undefined").unwrap(),
            }
        }
        writeln!(s, "{prefix}wall_ms={}", self.wall_ms).unwrap();
        s
    }

    /// Parses the output of [`MetricsReport::to_kv`] for the given prefix.
    pub fn from_kv(text: &str, prefix: &str) -> Result<MetricsReport> {
        let mut out = MetricsReport::default();
        let mut seen = 0;
        for line in text.lines() {
            let Some(rest) = line.strip_prefix(prefix) else { continue };
            let Some((key, value)) = rest.split_once('=') else { continue };
            let parsed = if value == "undefined" {
                None
            } else {
                Some(value.parse::<f64>().map_err(|_| Error::Format(format!("bad metric line {line:?}")))?)
            };
            if key == "wall_ms" {
                out.wall_ms = parsed.unwrap_or(0.0);
            } else if METRIC_KEYS.contains(&key) {
                *out.slot(key) = parsed;
                seen += 1;
            }
        }
        if seen < METRIC_KEYS.len() {
            return Err(Error::Format(format!("report section {prefix:?} is missing metrics")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, on: &[usize]) -> MaskVolume {
        let mut labels = vec![0; dims.len()];
        for &i in on {
            labels[i] = 1;
        }
        MaskVolume::new(dims, labels).unwrap()
    }

    #[test]
    fn loss_fixed_points() {
        let y = mask(Dims::cube(4), &[0, 5, 17, 40]);
        let p: Vec<f64> = y.labels.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(dice_loss(&p, &y, 1e-5).unwrap(), 0.0);
        assert!((bce_loss(&vec![0.5; 64], &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&p, &y).unwrap() - 1e-7).abs() < 1e-12);
        assert!((total_loss(0.2, 0.4, 0.1, &LossWeights::default()) - 0.41).abs() < 1e-15);
    }

    #[test]
    fn overlap_metrics() {
        let dims = Dims::cube(3);
        let a = mask(dims, &[1, 2, 3]);
        let b = mask(dims, &[3, 4]);
        let c = Confusion::of(&a, &b).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 2, 1));
        assert_eq!(c.dice(), Some(0.4));
        assert_eq!(c.iou(), Some(0.25));
        let empty = mask(dims, &[]);
        assert_eq!(dice_score(&empty, &empty).unwrap(), None);
    }

    #[test]
    fn hd95_cases() {
        let dims = Dims::new(1, 1, 8);
        let a = mask(dims, &[1]);
        let b = mask(dims, &[4]);
        assert_eq!(hd95(&a, &b, Spacing::default()).unwrap(), Some(3.0));
        assert_eq!(hd95(&a, &a, Spacing::default()).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &mask(dims, &[]), Spacing::default()).unwrap(), None);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 0.0, 2.0];
        assert_eq!(percentile(&mut v, 0.5), Some(2.0));
        assert_eq!(percentile(&mut v, 0.95), Some(3.8));
    }

    #[test]
    fn utilization_and_compression() {
        assert_eq!(codebook_utilization(&[3, 3, 3], 512), 1.0 / 512.0);
        assert_eq!(codebook_utilization(&[0, 1, 2, 3], 4), 1.0);
        assert_eq!(compression_ratio(Dims::new(100, 512, 512), 100), 262_144.0);
    }

    #[test]
    fn report_round_trip() {
        let r = MetricsReport {
            dice: Some(0.8),
            iou: Some(0.8 / 1.2),
            hd95: None,
            compression_ratio: Some(327.68),
            ..Default::default()
        };
        let text = r.to_kv("case.a.");
        assert_eq!(MetricsReport::from_kv(&text, "case.a.").unwrap(), r);
    }
}
