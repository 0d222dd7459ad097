//! Segmentation metrics and run aggregation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Spacing};

/// Group name of the row aggregating every run.
pub const OVERALL: &str = "overall";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    pred.check_dims(gt.dims())?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    /// 1.0 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// 0.0 when any factor of the denominator is zero.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (
            self.tp as f64,
            self.fp as f64,
            self.fn_ as f64,
            self.tn as f64,
        );
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if factors.contains(&0.0) {
            return 0.0;
        }
        let denom = (factors[0] * factors[1]).sqrt() * (factors[2] * factors[3]).sqrt();
        ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
    }
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, gt)?.dice())
}

pub fn mcc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, gt)?.mcc())
}

/// Absolute volume difference in millilitres.
pub fn delta_v(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64> {
    pred.check_dims(gt.dims())?;
    if !(spacing.sx > 0.0 && spacing.sy > 0.0 && spacing.sz > 0.0) {
        return Err(Error::InvalidParam(format!("spacing must be positive, got {spacing:?}")));
    }
    let diff = pred.count().abs_diff(gt.count());
    Ok(diff as f64 * spacing.voxel_mm3() / 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub group: String,
    pub dice: f64,
    pub mcc: f64,
    pub delta_v_ml: f64,
}

impl RunMetrics {
    pub fn evaluate(
        run_id: impl Into<String>,
        group: impl Into<String>,
        pred: &BinaryMask,
        gt: &BinaryMask,
        spacing: Spacing,
    ) -> Result<Self> {
        let c = confusion(pred, gt)?;
        Ok(Self {
            run_id: run_id.into(),
            group: group.into(),
            dice: c.dice(),
            mcc: c.mcc(),
            delta_v_ml: delta_v(pred, gt, spacing)?,
        })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_mcc: f64,
    pub std_mcc: f64,
    pub mean_delta_v_ml: f64,
    pub std_delta_v_ml: f64,
}

impl GroupSummary {
    fn of(group: &str, runs: &[&RunMetrics]) -> Self {
        let col = |f: fn(&RunMetrics) -> f64| {
            mean_std(&runs.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or((0.0, 0.0))
        };
        let (mean_dice, std_dice) = col(|r| r.dice);
        let (mean_mcc, std_mcc) = col(|r| r.mcc);
        let (mean_delta_v_ml, std_delta_v_ml) = col(|r| r.delta_v_ml);
        Self {
            group: group.to_string(),
            n: runs.len(),
            mean_dice,
            std_dice,
            mean_mcc,
            std_mcc,
            mean_delta_v_ml,
            std_delta_v_ml,
        }
    }
}

/// One row per group present in `runs` (sorted by name) followed by the
/// overall row. Standard deviations are population ones.
pub fn aggregate(runs: &[RunMetrics]) -> Result<Vec<GroupSummary>> {
    if runs.is_empty() {
        return Err(Error::InvalidParam("no runs to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.group.as_str()).or_default().push(r);
    }
    let mut out: Vec<GroupSummary> = groups
        .iter()
        .map(|(g, rs)| GroupSummary::of(g, rs))
        .collect();
    out.push(GroupSummary::of(OVERALL, &runs.iter().collect::<Vec<_>>()));
    Ok(out)
}

/// Header `run_id,group,dice,mcc,delta_v_ml`.
pub fn write_runs_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(input: R) -> Result<Vec<RunMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_summary_csv<W: Write>(rows: &[GroupSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One point of a rho sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub mean_ds: f64,
    pub std_ds: f64,
    pub mean_dv: f64,
    pub std_dv: f64,
    pub mean_svx_count: f64,
}

/// Header `rho,mean_ds,std_ds,mean_dv,std_dv,mean_svx_count`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
