//! One-axis sweeps: train and evaluate once per value under a shared seed.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::Strategy;
use crate::trainer::{evaluate, train_model, Case};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Tokens,
    Codebook,
    Strategy,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(Axis::Tokens),
            "codebook" => Ok(Axis::Codebook),
            "strategy" => Ok(Axis::Strategy),
            _ => Err(Error::Config(format!(
                "unknown axis {s:?} (expected tokens, codebook or strategy)"
            ))),
        }
    }
}

/// `base` with the swept setting replaced by `value`.
pub fn apply_axis(base: &Config, axis: Axis, value: &str) -> Result<Config> {
    let mut c = base.clone();
    match axis {
        Axis::Tokens => c.k = value.parse().map_err(|_| Error::Config(format!("token count {value:?} is not an integer")))?,
        Axis::Codebook => {
            c.codebook_size = value
                .parse()
                .map_err(|_| Error::Config(format!("codebook size {value:?} is not an integer")))?
        }
        Axis::Strategy => c.strategy = value.parse::<Strategy>()?,
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub hd95: Option<f64>,
    pub time_ms: f64,
    pub util: Option<f64>,
    pub boundary_ratio: Option<f64>,
}

pub const SWEEP_HEADER: &str = "value,dice,iou,hd95,time_ms,util,boundary_ratio";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:?}"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.value,
            cell(r.dice),
            cell(r.iou),
            cell(r.hd95),
            r.time_ms,
            cell(r.util),
            cell(r.boundary_ratio)
        )
        .unwrap();
    }
    s
}

/// Trains on `train` with `cfg`, then evaluates the best parameters on `eval`.
pub fn run_point(cfg: &Config, value: &str, train: &[Case], eval: &[Case]) -> Result<SweepRow> {
    let started = Instant::now();
    let out = train_model(Model::new(cfg)?, train, train, &mut |_| {})?;
    if let Some(why) = out.aborted {
        return Err(Error::NonFinite(format!("sweep value {value}: {why}")));
    }
    let ev = evaluate(&out.best, eval, cfg.theta)?;
    let a = ev.aggregate;
    Ok(SweepRow {
        value: value.to_string(),
        dice: a.dice,
        iou: a.iou,
        hd95: a.hd95,
        time_ms: if cfg.log_wall_time {
            started.elapsed().as_millis() as f64
        } else {
            0.0
        },
        util: a.codebook_utilization,
        boundary_ratio: a.boundary_token_ratio,
    })
}

/// Validates every value first so a bad entry fails before any training.
pub fn sweep(base: &Config, axis: Axis, values: &[String], train: &[Case], eval: &[Case]) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(c, v)| run_point(c, v, train, eval))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_apply() {
        let base = Config::default();
        assert_eq!(apply_axis(&base, Axis::Tokens, "25").unwrap().k, 25);
        assert_eq!(apply_axis(&base, Axis::Codebook, "16").unwrap().codebook_size, 16);
        assert_eq!(apply_axis(&base, Axis::Strategy, "random").unwrap().strategy, Strategy::Random);
        assert!(apply_axis(&base, Axis::Strategy, "best").is_err());
        assert!(apply_axis(&base, Axis::Tokens, "1000").is_err());
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn csv_layout() {
        let row = SweepRow {
            value: "25".into(),
            dice: Some(0.5),
            iou: Some(1.0 / 3.0),
            hd95: None,
            time_ms: 0.0,
            util: Some(0.25),
            boundary_ratio: Some(0.75),
        };
        let csv = sweep_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines[1], "25,0.5,0.3333333333333333,undefined,0,0.25,0.75");
    }
}
