//! Depth metrics, median scaling and the baseline rows of an evaluation
//! report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{DepthMap, Mask};

pub const REPORT_SCHEMA: &str = "report-1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub d_min_eval: f64,
    pub d_max_eval: f64,
    pub use_median_scaling: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            d_min_eval: 0.1,
            d_max_eval: 100.0,
            use_median_scaling: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min_eval > 0.0 && self.d_max_eval > self.d_min_eval && self.d_max_eval.is_finite()) {
            return Err(Error::invalid(format!(
                "evaluation caps need 0 < min < max, got ({}, {})",
                self.d_min_eval, self.d_max_eval
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricsReport {
    fn to_array(self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    fn from_array(a: [f64; 7]) -> Self {
        MetricsReport {
            abs_rel: a[0],
            sq_rel: a[1],
            rmse: a[2],
            rmse_log: a[3],
            delta1: a[4],
            delta2: a[5],
            delta3: a[6],
        }
    }

    /// Unweighted mean of per-sample reports.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Evaluation("cannot average zero reports".into()));
        }
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.to_array()) {
                *a += v;
            }
        }
        Ok(Self::from_array(acc.map(|a| a / reports.len() as f64)))
    }
}

fn check_pair(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if pred.values().shape() != gt.values().shape() {
        return Err(Error::invalid(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.values().shape(),
            gt.values().shape()
        )));
    }
    Ok(())
}

/// Ground-truth pixels inside the evaluation caps.
pub fn valid_mask(gt: &DepthMap, cfg: &EvalConfig) -> Mask {
    let data = gt
        .values()
        .data()
        .iter()
        .map(|&d| d >= cfg.d_min_eval && d <= cfg.d_max_eval)
        .collect();
    Mask::new(gt.height(), gt.width(), data)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_scale(pred: &DepthMap, gt: &DepthMap, valid: &Mask) -> Result<DepthMap> {
    check_pair(pred, gt)?;
    let pick = |m: &DepthMap| -> Vec<f64> {
        m.values()
            .data()
            .iter()
            .zip(valid.data())
            .filter(|(_, &ok)| ok)
            .map(|(&d, _)| d)
            .collect()
    };
    let g = pick(gt);
    if g.is_empty() {
        return Err(Error::Evaluation("median scaling needs at least one valid pixel".into()));
    }
    let ratio = median(g) / median(pick(pred));
    Ok(pred.scaled(ratio))
}

/// Metrics over ground-truth pixels inside the caps, predictions clamped to
/// the caps. No scaling is applied here.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    check_pair(pred, gt)?;
    let mut n = 0usize;
    let mut acc = [0.0; 7];
    for (&p, &g) in pred.values().data().iter().zip(gt.values().data()) {
        if !(g >= cfg.d_min_eval && g <= cfg.d_max_eval) {
            continue;
        }
        let p = p.clamp(cfg.d_min_eval, cfg.d_max_eval);
        let diff = p - g;
        let ratio = (p / g).max(g / p);
        acc[0] += diff.abs() / g;
        acc[1] += diff * diff / g;
        acc[2] += diff * diff;
        acc[3] += (p.ln() - g.ln()).powi(2);
        acc[4] += f64::from(u8::from(ratio < 1.25));
        acc[5] += f64::from(u8::from(ratio < 1.25 * 1.25));
        acc[6] += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Evaluation("no ground-truth pixels inside the evaluation caps".into()));
    }
    let m = acc.map(|a| a / n as f64);
    Ok(MetricsReport {
        abs_rel: m[0],
        sq_rel: m[1],
        rmse: m[2].sqrt(),
        rmse_log: m[3].sqrt(),
        delta1: m[4],
        delta2: m[5],
        delta3: m[6],
    })
}

/// The depth at the last observed frame, unchanged.
pub fn copy_last_baseline(depth_at_t: &DepthMap) -> DepthMap {
    depth_at_t.clone()
}

/// Median scaling when enabled, then metrics.
pub fn evaluate_prediction(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> Result<MetricsReport> {
    if cfg.use_median_scaling {
        let scaled = median_scale(pred, gt, &valid_mask(gt, cfg))?;
        compute_metrics(&scaled, gt, cfg)
    } else {
        compute_metrics(pred, gt, cfg)
    }
}

/// One forecast with the ground truth needed for every row.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub sequence: String,
    pub t: usize,
    pub prediction: DepthMap,
    pub gt_future: DepthMap,
    pub gt_last: DepthMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub sequence: String,
    pub samples: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub metrics: MetricsReport,
    pub per_sequence: Vec<SequenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub code_version: String,
    pub config: EvalConfig,
    pub samples: usize,
    pub rows: Vec<MethodRow>,
    /// Free-form context from the caller (checkpoint, horizon, ...).
    #[serde(default)]
    pub context: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn method_row(method: &str, samples: &[EvalSample], per_sample: &[MetricsReport]) -> Result<MethodRow> {
    let mut by_seq: BTreeMap<&str, Vec<MetricsReport>> = BTreeMap::new();
    for (s, m) in samples.iter().zip(per_sample) {
        by_seq.entry(&s.sequence).or_default().push(*m);
    }
    let per_sequence = by_seq
        .into_iter()
        .map(|(seq, ms)| {
            Ok(SequenceRow {
                sequence: seq.to_string(),
                samples: ms.len(),
                metrics: MetricsReport::mean(&ms)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MethodRow {
        method: method.to_string(),
        metrics: MetricsReport::mean(per_sample)?,
        per_sequence,
    })
}

/// Rows `model`, `copy_last` and `oracle`, each the unweighted mean over
/// samples. Median scaling, when enabled, applies to the model row only: the
/// baselines are metric depth already.
pub fn evaluate_run(samples: &[EvalSample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Evaluation("evaluation set is empty".into()));
    }
    let mut model = Vec::with_capacity(samples.len());
    let mut copy = Vec::with_capacity(samples.len());
    let mut oracle = Vec::with_capacity(samples.len());
    for s in samples {
        model.push(evaluate_prediction(&s.prediction, &s.gt_future, cfg)?);
        copy.push(compute_metrics(&copy_last_baseline(&s.gt_last), &s.gt_future, cfg)?);
        oracle.push(compute_metrics(&s.gt_future, &s.gt_future, cfg)?);
    }
    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: *cfg,
        samples: samples.len(),
        rows: vec![
            method_row("model", samples, &model)?,
            method_row("copy_last", samples, &copy)?,
            method_row("oracle", samples, &oracle)?,
        ],
        context: BTreeMap::new(),
    })
}
