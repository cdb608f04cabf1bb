use std::path::Path;

use serde::Serialize;

use super::ttc::TtcModel;
use super::{fmt_f64, volume_tensor, write_csv};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::error::{MorphError, Result};
use crate::phantom_data::Dataset;
use crate::survival_eval::{
    balanced_accuracy, kaplan_meier, label_at_horizon, log_rank_test, roc_auc, youden_threshold, LogRank,
};
use crate::ttc_head::{risk_group, risk_score, sigmoidal_cdf, CdfParams, ConversionRecord, RiskGroup, HORIZON_MONTHS};

/// Slope used by the oracle predictor.
const ORACLE_A: f64 = 1e-3;
/// Oracle `b` bounds (normalised time) for already-converted and never-converting scans.
const ORACLE_B_RANGE: (f64, f64) = (1e-9, 1e6);

/// Source of `(a, b)` per scan.
pub enum Predictor<'a> {
    Model(&'a TtcModel),
    /// `b` from the phantom's true conversion time.
    Oracle,
    /// The same parameters for every scan.
    Constant(CdfParams),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub scan_id: String,
    pub eye_id: String,
    pub visit: usize,
    pub a: f64,
    pub b: f64,
    /// `p(t)` at every evaluation horizon.
    pub p: Vec<f64>,
    pub r: f64,
    pub risk_group: RiskGroup,
    #[serde(skip)]
    pub record: ConversionRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub fold: usize,
    pub t_months: f64,
    pub auc: Option<f64>,
    pub bal_acc: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmRow {
    pub time: f64,
    pub survival: f64,
    pub group: RiskGroup,
}

#[derive(Debug, Clone)]
pub struct EvalBundle {
    pub fold: usize,
    pub horizons: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    pub predictions: Vec<PredictionRow>,
    pub km: Vec<KmRow>,
    pub logrank: Option<LogRank>,
}

fn oracle_params(conversion_time: f64, scan_time: f64) -> CdfParams {
    let b = ((conversion_time - scan_time) / HORIZON_MONTHS).clamp(ORACLE_B_RANGE.0, ORACLE_B_RANGE.1);
    CdfParams { a: ORACLE_A, b }
}

/// Predictions for every scan of the listed eyes; `p` is left empty.
pub(crate) fn predict_scans(pred: &Predictor, data: &Dataset, ids: &[String]) -> Result<Vec<PredictionRow>> {
    let shape = data.shape();
    let mut out = Vec::new();
    for id in ids {
        let eye = data.index.eye(id)?;
        for (j, v) in eye.visits.iter().enumerate() {
            let params = match pred {
                Predictor::Oracle => oracle_params(eye.conversion_time_true, v.time_months),
                Predictor::Constant(p) => *p,
                Predictor::Model(m) => {
                    let (vol, _) = data.load_visit(v)?;
                    m.forward(&volume_tensor(vol, shape)?)?.params()
                }
            };
            let r = risk_score(params);
            out.push(PredictionRow {
                scan_id: format!("{id}_v{j:02}"),
                eye_id: id.clone(),
                visit: j,
                a: params.a,
                b: params.b,
                p: Vec::new(),
                r,
                risk_group: risk_group(r),
                record: v.record,
            });
        }
    }
    Ok(out)
}

fn probabilities(rows: &mut [PredictionRow], horizons: &[f64]) {
    for row in rows {
        let params = CdfParams { a: row.a, b: row.b };
        row.p = horizons.iter().map(|&t| sigmoidal_cdf(params, t / HORIZON_MONTHS)).collect();
    }
}

/// Scores and labels at horizon index `k`, for scans with a defined label.
fn labelled(rows: &[PredictionRow], horizons: &[f64], k: usize) -> (Vec<f64>, Vec<bool>) {
    rows.iter()
        .filter_map(|r| label_at_horizon(&r.record, horizons[k]).map(|l| (r.p[k], l)))
        .unzip()
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

/// Mean AUC over horizons where both classes occur.
pub(crate) fn validation_auc(rows: &[PredictionRow], horizons: &[f64]) -> Result<Option<f64>> {
    let mut rows = rows.to_vec();
    probabilities(&mut rows, horizons);
    let mut aucs = Vec::new();
    for k in 0..horizons.len() {
        let (s, l) = labelled(&rows, horizons, k);
        if both_classes(&l) {
            aucs.push(roc_auc(&s, &l)?);
        }
    }
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

/// Per-eye survival data: risk group of the first visit, time from it to
/// the conversion visit (event) or to the last visit (censored).
fn per_eye_survival(rows: &[PredictionRow], data: &Dataset) -> Result<Vec<(RiskGroup, f64, bool)>> {
    let mut out = Vec::new();
    for row in rows.iter().filter(|r| r.visit == 0) {
        let eye = data.index.eye(&row.eye_id)?;
        let t0 = eye.visits[0].time_months;
        let (time, event) = match eye.visits.iter().find(|v| v.converted) {
            Some(v) => (v.time_months - t0, true),
            None => (eye.visits.last().expect("non-empty").time_months - t0, false),
        };
        out.push((row.risk_group, time, event));
    }
    Ok(out)
}

/// Metrics, predictions and survival curves on the test eyes of `fold`.
pub fn evaluate(pred: &Predictor, data: &Dataset, fold: usize, horizons: &[f64]) -> Result<EvalBundle> {
    let split = data
        .index
        .folds
        .get(fold)
        .ok_or_else(|| MorphError::Domain(format!("dataset has no fold {fold}")))?;
    let mut rows = predict_scans(pred, data, &split.test)?;
    probabilities(&mut rows, horizons);
    let per_t: Vec<(Vec<f64>, Vec<bool>)> = (0..horizons.len()).map(|k| labelled(&rows, horizons, k)).collect();
    let defined: Vec<&(Vec<f64>, Vec<bool>)> = per_t.iter().filter(|(_, l)| both_classes(l)).collect();
    let threshold = if defined.is_empty() {
        None
    } else {
        let scores: Vec<Vec<f64>> = defined.iter().map(|d| d.0.clone()).collect();
        let labels: Vec<Vec<bool>> = defined.iter().map(|d| d.1.clone()).collect();
        Some(youden_threshold(&scores, &labels)?)
    };
    let mut metrics = Vec::new();
    for (k, (s, l)) in per_t.iter().enumerate() {
        let (auc, bal_acc) = match threshold.filter(|_| both_classes(l)) {
            Some(tau) => {
                let predicted: Vec<bool> = s.iter().map(|&p| p >= tau).collect();
                (Some(roc_auc(s, l)?), Some(balanced_accuracy(&predicted, l)?))
            }
            None => (None, None),
        };
        metrics.push(MetricRow {
            fold,
            t_months: horizons[k],
            auc,
            bal_acc,
            threshold,
        });
    }
    let surv = per_eye_survival(&rows, data)?;
    let mut km = Vec::new();
    let mut groups = Vec::new();
    for g in RiskGroup::ALL {
        let samples: Vec<(f64, bool)> = surv.iter().filter(|s| s.0 == g).map(|s| (s.1, s.2)).collect();
        if samples.is_empty() {
            continue;
        }
        let curve = kaplan_meier(&samples)?;
        km.push(KmRow {
            time: 0.0,
            survival: 1.0,
            group: g,
        });
        for (&time, &survival) in curve.times.iter().zip(&curve.values) {
            km.push(KmRow { time, survival, group: g });
        }
        groups.push(samples);
    }
    let logrank = if groups.len() >= 2 { log_rank_test(&groups).ok() } else { None };
    Ok(EvalBundle {
        fold,
        horizons: horizons.to_vec(),
        metrics,
        predictions: rows,
        km,
        logrank,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), fmt_f64)
}

fn horizon_label(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        fmt_f64(t)
    }
}

impl EvalBundle {
    pub fn metrics_csv_rows(&self) -> Vec<String> {
        self.metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{}",
                    m.fold,
                    horizon_label(m.t_months),
                    opt(m.auc),
                    opt(m.bal_acc),
                    opt(m.threshold)
                )
            })
            .collect()
    }

    pub fn predictions_header(&self) -> String {
        let ps: Vec<String> = self.horizons.iter().map(|&t| format!("p@{}", horizon_label(t))).collect();
        format!("scan_id,a,b,{},r,risk_group", ps.join(","))
    }

    pub fn predictions_csv_rows(&self) -> Vec<String> {
        self.predictions
            .iter()
            .map(|p| {
                let ps: Vec<String> = p.p.iter().map(|&v| fmt_f64(v)).collect();
                format!("{},{},{},{},{},{}", p.scan_id, fmt_f64(p.a), fmt_f64(p.b), ps.join(","), fmt_f64(p.r), p.risk_group)
            })
            .collect()
    }

    pub fn km_csv_rows(&self) -> Vec<String> {
        self.km.iter().map(|k| format!("{},{},{}", fmt_f64(k.time), fmt_f64(k.survival), k.group)).collect()
    }
}

/// Writes `metrics.csv`, `predictions.csv`, `km.csv` and `logrank.csv` for
/// one or more evaluated folds.
pub fn write_eval_outputs(out: &Path, bundles: &[EvalBundle]) -> Result<Vec<String>> {
    let first = bundles.first().ok_or(MorphError::Empty("write_eval_outputs"))?;
    write_csv(&out.join("metrics.csv"), "fold,t_months,auc,bal_acc,threshold", bundles.iter().flat_map(|b| b.metrics_csv_rows()))?;
    write_csv(&out.join("predictions.csv"), &first.predictions_header(), bundles.iter().flat_map(|b| b.predictions_csv_rows()))?;
    write_csv(&out.join("km.csv"), "time,survival,group", bundles.iter().flat_map(|b| b.km_csv_rows()))?;
    write_csv(
        &out.join("logrank.csv"),
        "fold,chi2,dof,p_value",
        bundles.iter().map(|b| match &b.logrank {
            Some(l) => format!("{},{},{},{}", b.fold, fmt_f64(l.chi2), l.dof, fmt_f64(l.p_value)),
            None => format!("{},null,null,null", b.fold),
        }),
    )?;
    Ok(["metrics.csv", "predictions.csv", "km.csv", "logrank.csv"].map(String::from).to_vec())
}

/// A tensor-free checkpoint that evaluates with the ground-truth predictor.
pub fn write_oracle_checkpoint(dir: &Path, cfg: &RunConfig, fold: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointKind::Oracle, cfg);
    ck.manifest.fold = Some(fold);
    ck.save(dir)?;
    Ok(ck)
}
