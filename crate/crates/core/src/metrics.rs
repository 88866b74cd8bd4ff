//! Distance-based beam accuracy and missing-modality reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "run,drop_set,Y1,Y2,Y3,dba,top1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbaConfig {
    pub thresholds: [u32; 3],
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self { thresholds: [1, 2, 3] }
    }
}

impl DbaConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.thresholds;
        if !(a < b && b < c) {
            return Err(Error::Config("metrics: thresholds must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbaScore {
    pub y: [f64; 3],
    pub score: f64,
}

fn check(preds: &[usize], truths: &[usize], classes: usize) -> Result<()> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal nonempty prediction and truth lists, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    if let Some(&b) = preds.iter().chain(truths).find(|&&b| b >= classes) {
        return Err(Error::LabelOutOfRange { label: b, classes });
    }
    Ok(())
}

/// `Y_i` is the fraction of predictions within `d_i` beams of the truth.
/// Thresholds need only be nondecreasing here so that `(0, 0, 0)` can be
/// evaluated.
pub fn dba_score(preds: &[usize], truths: &[usize], thresholds: [u32; 3], classes: usize) -> Result<DbaScore> {
    check(preds, truths, classes)?;
    if thresholds[0] > thresholds[1] || thresholds[1] > thresholds[2] {
        return Err(Error::InvalidArgument("thresholds must be nondecreasing".into()));
    }
    let n = preds.len();
    let hits = thresholds.map(|d| {
        preds
            .iter()
            .zip(truths)
            .filter(|(&p, &t)| p.abs_diff(t) <= d as usize)
            .count()
    });
    // integer sums keep the all-zero-threshold score identical to top-1
    Ok(DbaScore {
        y: hits.map(|h| h as f64 / n as f64),
        score: hits.iter().sum::<usize>() as f64 / (3 * n) as f64,
    })
}

pub fn top1(preds: &[usize], truths: &[usize], classes: usize) -> Result<f64> {
    check(preds, truths, classes)?;
    Ok(preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64)
}

/// Label for a set of dropped modalities.
pub fn drop_label(drop: &[String]) -> String {
    if drop.is_empty() {
        "none".to_string()
    } else {
        drop.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub run: String,
    pub drop_set: Vec<String>,
    pub dba: DbaScore,
    pub top1: f64,
    /// Identity of the evaluation data.
    pub dataset: String,
}

impl EvalRun {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.run,
            drop_label(&self.drop_set),
            self.dba.y[0],
            self.dba.y[1],
            self.dba.y[2],
            self.dba.score,
            self.top1
        )
    }
}

pub fn metrics_csv(runs: &[EvalRun]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in runs {
        s.push_str(&r.csv_row());
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Degradation {
    pub drop_set: Vec<String>,
    pub baseline: f64,
    pub score: f64,
    pub degradation: f64,
}

/// Baseline DBA minus each drop-set DBA.
pub fn ablation_report(baseline: &EvalRun, runs: &[EvalRun]) -> Result<Vec<Degradation>> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no drop-set runs".into()));
    }
    runs.iter()
        .map(|r| {
            if r.dataset != baseline.dataset {
                return Err(Error::Incompatible(format!(
                    "run `{}` was evaluated on different data than the baseline",
                    r.run
                )));
            }
            Ok(Degradation {
                drop_set: r.drop_set.clone(),
                baseline: baseline.dba.score,
                score: r.dba.score,
                degradation: baseline.dba.score - r.dba.score,
            })
        })
        .collect()
}

pub fn degradation_csv(rows: &[Degradation]) -> String {
    let mut s = String::from("drop_set,baseline_dba,dba,degradation\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            drop_label(&r.drop_set),
            r.baseline,
            r.score,
            r.degradation
        ));
    }
    s
}
