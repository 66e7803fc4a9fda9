//! Optimisation loop, evaluation and checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, StopMetric};
use crate::decoder::binarize;
use crate::diffgraph::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{prepare_input, Model};
use crate::objective::{
    boundary_token_ratio, codebook_utilization, compression_ratio, hd95, Confusion, MetricsReport, BOUNDARY_RADIUS,
};
use crate::volume::{MaskVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(c: &Config) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay; gradients are zeroed after.
/// A non-finite gradient aborts before any parameter changes.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, h: &AdamHyper) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            w[j] -= lr * h.weight_decay * w[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= lr * mh / (vh.sqrt() + h.eps);
        }
    }
    store.zero_grad();
    Ok(())
}

/// Cosine annealing from `base` at epoch 0 to `min` at `total`.
pub fn cosine_lr(epoch: usize, base: f64, min: f64, total: usize) -> f64 {
    let frac = epoch.min(total) as f64 / total.max(1) as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

pub const RUNLOG_HEADER: &str = "epoch,train_loss,val_loss,val_dice,val_iou,lr,wall_ms";

impl RunLog {
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "epoch {} logged after epoch {}",
                    r.epoch, last.epoch
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_iou, r.lr, r.wall_ms
            )
            .unwrap();
        }
        s
    }

    fn metric(r: &EpochRecord, m: StopMetric) -> f64 {
        match m {
            StopMetric::Dice => r.val_dice,
            StopMetric::Loss => -r.val_loss,
        }
    }

    /// Index of the first record attaining the best validation value.
    pub fn best(&self, m: StopMetric) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if best.is_none_or(|b| Self::metric(r, m) > Self::metric(&self.records[b], m)) {
                best = Some(i);
            }
        }
        best
    }
}

/// True once the monitored value has gone `patience` epochs without a
/// strict improvement.
pub fn early_stop(log: &RunLog, patience: usize, metric: StopMetric) -> bool {
    match log.best(metric) {
        Some(b) => log.len() - 1 - b >= patience,
        None => false,
    }
}

/// A labelled volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume3D,
    pub mask: MaskVolume,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume3D, mask: MaskVolume) -> Result<Case> {
        if volume.dims != mask.dims {
            return Err(Error::Shape(format!(
                "volume {} and mask {} differ",
                volume.dims, mask.dims
            )));
        }
        Ok(Case {
            id: id.into(),
            volume,
            mask,
        })
    }
}

/// Seed of the random selection strategy for the case at `index`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Prepared {
    field: Vec<f64>,
    target: Vec<f64>,
    case: usize,
}

fn prepare(cases: &[Case], cfg: &Config) -> Vec<Prepared> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| Prepared {
            field: prepare_input(&c.volume, cfg.normalization).0,
            target: c.mask.labels.iter().map(|&v| f64::from(v)).collect(),
            case: i,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub best: Model,
    pub last: Model,
    pub log: RunLog,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient stopped training; `best` and
    /// `last` then hold the last good parameters.
    pub aborted: Option<String>,
}

/// Validation loss, Dice and IoU of `model` on prepared cases.
fn validate(model: &Model, cases: &[Case], prepared: &[Prepared]) -> Result<(f64, f64, f64)> {
    let cfg = &model.config;
    let (mut loss, mut dice, mut iou, mut defined) = (0.0, 0.0, 0.0, 0usize);
    for (p, c) in prepared.iter().zip(cases) {
        let mut tape = Tape::new(&model.store);
        let f = model.forward(&mut tape, &p.field, c.volume.dims, Some(&p.target), case_seed(cfg.seed, p.case))?;
        loss += tape.value(f.loss.expect("target given").total).item();
        let pred = binarize(tape.value(f.prob).data(), c.volume.dims, c.volume.spacing, cfg.theta)?;
        let conf = Confusion::of(&pred, &c.mask)?;
        if let (Some(d), Some(i)) = (conf.dice(), conf.iou()) {
            dice += d;
            iou += i;
            defined += 1;
        }
    }
    let n = prepared.len() as f64;
    let k = defined.max(1) as f64;
    Ok((loss / n, dice / k, iou / k))
}

/// Trains from fresh parameters; see [`train_model`].
pub fn train(config: &Config, train_set: &[Case], val_set: &[Case]) -> Result<TrainOutcome> {
    train_model(Model::new(config)?, train_set, val_set, &mut |_| {})
}

/// Epoch loop: forward, loss, backward and AdamW over batches, then
/// validation, cosine schedule and early stopping. `observer` sees every
/// logged epoch.
pub fn train_model(
    mut model: Model,
    train_set: &[Case],
    val_set: &[Case],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if model.config.input_dims.is_none() {
        model.config.input_dims = Some(train_set[0].volume.dims);
    }
    let cfg = model.config.clone();
    let hyper = AdamHyper::from_config(&cfg);
    let train_p = prepare(train_set, &cfg);
    let val_p = prepare(val_set, &cfg);

    let first: Vec<(&[f64], _)> = train_p
        .iter()
        .take(cfg.batch_size)
        .map(|p| (p.field.as_slice(), train_set[p.case].volume.dims))
        .collect();
    model.init_codebook(&first)?;

    let mut state = OptimizerState::new(&model.store);
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::default();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.base_lr, cfg.min_lr, cfg.max_epochs);
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &train_p[i];
                let dims = train_set[p.case].volume.dims;
                let (loss, grads) = {
                    let mut tape = Tape::new(&model.store);
                    let f = model.forward(&mut tape, &p.field, dims, Some(&p.target), case_seed(cfg.seed, p.case))?;
                    let total = f.loss.expect("target given").total;
                    let loss = tape.value(total).item();
                    if !loss.is_finite() {
                        aborted = Some(format!("non-finite loss at epoch {epoch}, case {}", train_set[p.case].id));
                        break 'epochs;
                    }
                    (loss, tape.backward(total)?.into_params())
                };
                train_loss += loss;
                model.store.accumulate(&grads, scale);
            }
            if let Err(e) = adamw_step(&mut model.store, &mut state, lr, &hyper) {
                aborted = Some(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
        }
        let (val_loss, val_dice, val_iou) = validate(&model, val_set, &val_p)?;
        let record = EpochRecord {
            epoch,
            train_loss: train_loss / train_p.len() as f64,
            val_loss,
            val_dice,
            val_iou,
            lr,
            wall_ms: if cfg.log_wall_time {
                started.elapsed().as_millis() as f64
            } else {
                0.0
            },
        };
        if !(val_loss.is_finite()) {
            aborted = Some(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        log.push(record)?;
        observer(&record);
        if log.best(cfg.stop_metric) == Some(log.len() - 1) {
            best = model.clone();
            best_epoch = epoch;
        }
        if early_stop(&log, cfg.patience, cfg.stop_metric) {
            stopped_early = true;
            break;
        }
    }
    let last = if aborted.is_some() { best.clone() } else { model };
    Ok(TrainOutcome {
        best,
        last,
        log,
        best_epoch,
        stopped_early,
        aborted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cases: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
    /// Per metric, how many cases had an undefined value.
    pub undefined: Vec<(&'static str, usize)>,
}

impl Evaluation {
    /// `key=value` report: aggregate first, then one section per case.
    pub fn to_report(&self) -> String {
        let mut s = format!("cases={}\n", self.cases.len());
        for (key, n) in &self.undefined {
            writeln!(s, "undefined.{key}={n}").unwrap();
        }
        s.push_str(&self.aggregate.to_kv("mean."));
        for (id, r) in &self.cases {
            s.push_str(&r.to_kv(&format!("case.{id}.")));
        }
        s
    }
}

/// Metrics of one case.
pub fn evaluate_case(model: &Model, case: &Case, index: usize, theta: f64) -> Result<MetricsReport> {
    let started = Instant::now();
    let pred = model.predict(&case.volume, case_seed(model.config.seed, index))?;
    let wall = started.elapsed().as_secs_f64() * 1e3;
    let mask = binarize(&pred.prob, case.volume.dims, case.volume.spacing, theta)?;
    let conf = Confusion::of(&mask, &case.mask)?;
    Ok(MetricsReport {
        dice: conf.dice(),
        iou: conf.iou(),
        sensitivity: conf.sensitivity(),
        precision: conf.precision(),
        hd95: hd95(&mask, &case.mask, case.volume.spacing)?,
        codebook_utilization: Some(codebook_utilization(&pred.codes, model.config.codebook_size)),
        boundary_token_ratio: boundary_token_ratio(&pred.tokens, &case.mask, BOUNDARY_RADIUS),
        compression_ratio: Some(compression_ratio(case.volume.dims, pred.tokens.len())),
        wall_ms: if model.config.log_wall_time { wall } else { 0.0 },
    })
}

/// Per-case metrics and their mean, undefined values excluded and counted.
pub fn evaluate(model: &Model, cases: &[Case], theta: f64) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let per: Vec<(String, MetricsReport)> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((c.id.clone(), evaluate_case(model, c, i, theta)?)))
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = per.iter().map(|(_, r)| r.clone()).collect();
    let (aggregate, undefined) = MetricsReport::mean(&reports);
    Ok(Evaluation {
        cases: per,
        aggregate,
        undefined,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Named-tensor container: magic, version, config text, an index of
/// `(name, shape)` entries, then every tensor as little-endian f64 in index
/// order.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for p in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
    let config = Config::from_text(text)?;
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        index.push((name, shape));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in index {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        params.push((name, Tensor::new(&shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.at
        )));
    }
    Model::from_params(&config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, dice: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 0.0,
            val_loss: 1.0 - dice,
            val_dice: dice,
            val_iou: 0.0,
            lr: 0.0,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 1e-4, 1e-6, 300), 1e-4);
        assert!((cosine_lr(300, 1e-4, 1e-6, 300) - 1e-6).abs() < 1e-20);
        assert!((cosine_lr(150, 1e-4, 1e-6, 300) - 5.05e-5).abs() < 1e-18);
    }

    #[test]
    fn early_stop_counts() {
        let mut log = RunLog::default();
        for e in 0..31 {
            log.push(record(e, 0.5)).unwrap();
            assert_eq!(early_stop(&log, 30, StopMetric::Dice), e == 30);
        }
        let mut log = RunLog::default();
        let mut fired = None;
        for e in 1..=60 {
            log.push(record(e, if e <= 5 { e as f64 / 10.0 } else { 0.1 })).unwrap();
            if fired.is_none() && early_stop(&log, 30, StopMetric::Dice) {
                fired = Some(e);
            }
        }
        assert_eq!(fired, Some(35));
        assert!(log.push(record(3, 0.1)).is_err());
    }

    #[test]
    fn adamw_decay_only() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full(&[3], 2.0));
        let mut st = OptimizerState::new(&store);
        let h = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        };
        adamw_step(&mut store, &mut st, 1e-4, &h).unwrap();
        assert!(store.iter().next().unwrap().value.data().iter().all(|&v| v == 2.0 * (1.0 - 1e-9)));
        adamw_step(&mut store, &mut st, 0.0, &h).unwrap();
        assert!(store.iter().next().unwrap().value.data().iter().all(|&v| v == 2.0 * (1.0 - 1e-9)));
    }

    #[test]
    fn adamw_rejects_nan() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 1.0));
        store.get_mut(id).grad.data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(&store);
        let h = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        assert!(adamw_step(&mut store, &mut st, 1e-3, &h).is_err());
        assert_eq!(store.get(id).value.data(), &[1.0]);
    }
}
