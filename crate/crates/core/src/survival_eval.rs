//! Population-level evaluation: horizon labels, Kaplan–Meier curves, the
//! log-rank test, ROC-AUC, Youden thresholding and balanced accuracy.

use serde::Serialize;

use crate::error::{MorphError, Result};
use crate::ttc_head::{ConversionRecord, RiskGroup};

/// Binary status at `t` months: `Some(true)` converted, `Some(false)` still
/// unconverted, `None` when `t` falls strictly inside the censoring interval.
pub fn label_at_horizon(record: &ConversionRecord, t: f64) -> Option<bool> {
    if record.t_plus <= t {
        Some(true)
    } else if record.t_minus >= t {
        Some(false)
    } else {
        None
    }
}

/// One right-censored observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalSample {
    pub time: f64,
    /// `true` when the event was observed at `time`.
    pub event: bool,
    pub group: RiskGroup,
}

/// Right-continuous survival step function starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFunction {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Survival just after each entry of `times`.
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            i => self.values[i - 1],
        }
    }
}

fn sorted(samples: &[(f64, bool)]) -> Result<Vec<(f64, bool)>> {
    if samples.iter().any(|s| !s.0.is_finite()) {
        return Err(MorphError::InvalidArgument("survival", "times must be finite".into()));
    }
    let mut s = samples.to_vec();
    // Events before censorings at equal times.
    s.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    Ok(s)
}

/// Product-limit estimator over `(time, event)` pairs.
pub fn kaplan_meier(samples: &[(f64, bool)]) -> Result<StepFunction> {
    if samples.is_empty() {
        return Err(MorphError::Empty("kaplan_meier"));
    }
    let s = sorted(samples)?;
    let mut at_risk = s.len();
    let mut surv = 1.0;
    let mut out = StepFunction { times: Vec::new(), values: Vec::new() };
    let mut i = 0;
    while i < s.len() {
        let t = s[i].0;
        let (mut deaths, mut total) = (0, 0);
        while i < s.len() && s[i].0 == t {
            deaths += usize::from(s[i].1);
            total += 1;
            i += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(surv);
        }
        at_risk -= total;
    }
    Ok(out)
}

/// Result of [`log_rank_test`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRank {
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// k-sample log-rank test with `k - 1` degrees of freedom.
pub fn log_rank_test(groups: &[Vec<(f64, bool)>]) -> Result<LogRank> {
    let k = groups.len();
    if k < 2 {
        return Err(MorphError::InvalidArgument("log_rank_test", format!("need at least 2 groups, got {k}")));
    }
    if let Some(g) = groups.iter().position(|g| g.is_empty()) {
        return Err(MorphError::Domain(format!("log-rank group {g} has no samples")));
    }
    let mut pooled: Vec<(f64, bool, usize)> = Vec::new();
    for (g, s) in groups.iter().enumerate() {
        for &(t, e) in sorted(s)?.iter() {
            pooled.push((t, e, g));
        }
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut at_risk: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    let mut observed = vec![0.0; k];
    let mut expected = vec![0.0; k];
    let mut cov = vec![vec![0.0; k]; k];
    let mut risk_mass = vec![0.0; k];
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let mut deaths = vec![0.0; k];
        let mut leaving = vec![0.0; k];
        while i < pooled.len() && pooled[i].0 == t {
            let (_, e, g) = pooled[i];
            if e {
                deaths[g] += 1.0;
            }
            leaving[g] += 1.0;
            i += 1;
        }
        let d: f64 = deaths.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for g in 0..k {
                observed[g] += deaths[g];
                expected[g] += d * at_risk[g] / n;
                risk_mass[g] += at_risk[g];
            }
            if n > 1.0 {
                let f = d * (n - d) / (n * n * (n - 1.0));
                for a in 0..k {
                    for b in 0..k {
                        let delta = if a == b { n * at_risk[a] } else { 0.0 };
                        cov[a][b] += f * (delta - at_risk[a] * at_risk[b]);
                    }
                }
            }
        }
        for g in 0..k {
            at_risk[g] -= leaving[g];
        }
    }
    if let Some(g) = risk_mass.iter().position(|&m| m == 0.0) {
        return Err(MorphError::Domain(format!("log-rank group {g} has zero at-risk mass at every event time")));
    }
    let m = k - 1;
    let diff: Vec<f64> = (0..m).map(|g| observed[g] - expected[g]).collect();
    let sub: Vec<Vec<f64>> = (0..m).map(|a| cov[a][..m].to_vec()).collect();
    let chi2 = if diff.iter().all(|v| v.abs() < 1e-12) {
        0.0
    } else {
        let x = solve(sub, diff.clone()).ok_or_else(|| MorphError::Domain("log-rank covariance is singular".into()))?;
        diff.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().max(0.0)
    };
    Ok(LogRank {
        chi2,
        dof: m,
        p_value: chi2_survival(chi2, m as f64),
    })
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale.max(1e-300) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(s, x)`.
pub fn gamma_q(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < s + 1.0 {
        1.0 - gamma_p_series(s, x)
    } else {
        gamma_q_fraction(s, x)
    }
}

fn gamma_p_series(s: f64, x: f64) -> f64 {
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut a = s;
    for _ in 0..10_000 {
        a += 1.0;
        term *= x / a;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    (sum.ln() - x + s * x.ln() - ln_gamma(s)).exp()
}

fn gamma_q_fraction(s: f64, x: f64) -> f64 {
    // Modified Lentz evaluation of the continued fraction.
    let tiny = 1e-300;
    let mut b = x + 1.0 - s;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - s);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + s * x.ln() - ln_gamma(s)).exp() * h
}

/// Upper tail of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_survival(x: f64, dof: f64) -> f64 {
    gamma_q(dof / 2.0, x / 2.0).clamp(0.0, 1.0)
}

fn check_binary(op: &'static str, n: usize, labels: &[bool]) -> Result<(usize, usize)> {
    if n != labels.len() {
        return Err(crate::error::shape_err(op, "len", n, labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MorphError::Domain(format!("{op}: both classes must be present ({pos} positive, {neg} negative)")));
    }
    Ok((pos, neg))
}

/// Mann–Whitney probability that a positive outscores a negative, ties ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary("roc_auc", scores.len(), labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MorphError::NonFinite("roc_auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the midrank sum of positives keeps everything integral.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u64;
        let p = order[i..j].iter().filter(|&&o| labels[o]).count() as u64;
        twice_rank_sum += p * twice_mid;
        i = j;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// `(sensitivity + specificity) / 2`.
pub fn balanced_accuracy(pred: &[bool], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary("balanced_accuracy", pred.len(), labels)?;
    let tp = pred.iter().zip(labels).filter(|(p, l)| **p && **l).count();
    let tn = pred.iter().zip(labels).filter(|(p, l)| !**p && !**l).count();
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Sensitivity + specificity - 1 when predicting positive for `score >= tau`.
pub fn youden_j(scores: &[f64], labels: &[bool], tau: f64) -> Result<f64> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= tau).collect();
    Ok(2.0 * balanced_accuracy(&pred, labels)? - 1.0)
}

/// Threshold maximising the mean Youden J over the time points. Candidates
/// are midpoints between consecutive distinct scores (pooled over all time
/// points); ties resolve to the smallest candidate.
pub fn youden_threshold(scores_by_t: &[Vec<f64>], labels_by_t: &[Vec<bool>]) -> Result<f64> {
    if scores_by_t.is_empty() || scores_by_t.len() != labels_by_t.len() {
        return Err(MorphError::InvalidArgument("youden_threshold", "need one score and label set per time point".into()));
    }
    for (s, l) in scores_by_t.iter().zip(labels_by_t) {
        check_binary("youden_threshold", s.len(), l)?;
    }
    let mut all: Vec<f64> = scores_by_t.iter().flatten().copied().collect();
    if all.iter().any(|s| s.is_nan()) {
        return Err(MorphError::NonFinite("youden_threshold"));
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    let candidates: Vec<f64> = if all.len() == 1 {
        all.clone()
    } else {
        all.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    };
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &tau in &candidates {
        let mut j = 0.0;
        for (s, l) in scores_by_t.iter().zip(labels_by_t) {
            j += youden_j(s, l, tau)?;
        }
        let j = j / scores_by_t.len() as f64;
        if j > best.0 {
            best = (j, tau);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests;
