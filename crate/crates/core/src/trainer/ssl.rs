use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::optim::{adam_step, CyclicLrSchedule, OptimState};
use super::{fmt_f64, step_rng, volume_tensor, write_csv};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::error::{MorphError, Result};
use crate::morphnet::{Module, MorphNet};
use crate::phantom_data::{augment, eligible_pairs, sample_ssl_pair, Dataset, EyeSeries};
use crate::ssl_loss::{total_ssl_loss, Comparator, SslPair, SslTerms};

pub const SSL_LOSS_HEADER: &str = "step,lr,L_mse,L_prc,L_smt,L_fld,L_add,total";
const VAL_HEADER: &str = "epoch,val_total,val_mse";

/// One optimizer step. `L_mse` is the weighted reconstruction sum that
/// enters `total`; the other terms are unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SslLogRow {
    pub step: u64,
    pub lr: f64,
    pub terms: SslTerms,
}

impl SslLogRow {
    fn csv(&self) -> String {
        let t = &self.terms;
        [self.lr, t.mse, t.perceptual, t.smoothness, t.folding, t.additive, t.total]
            .iter()
            .fold(self.step.to_string(), |s, v| s + "," + &fmt_f64(*v))
    }
}

/// Mean validation loss after `epoch` completed epochs (0 = initial weights).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SslValRow {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
}

impl SslValRow {
    fn csv(&self) -> String {
        format!("{},{},{}", self.epoch, fmt_f64(self.total), fmt_f64(self.mse))
    }
}

#[derive(Debug, Clone)]
pub struct SslReport {
    pub train: Vec<SslLogRow>,
    pub val: Vec<SslValRow>,
    pub best_epoch: usize,
}

impl SslReport {
    /// Mean training total over epoch `e` (1-based).
    pub fn epoch_mean(&self, e: usize, steps_per_epoch: usize) -> Option<f64> {
        let lo = ((e.checked_sub(1)?) * steps_per_epoch) as u64;
        let hi = lo + steps_per_epoch as u64;
        let v: Vec<f64> = self.train.iter().filter(|r| r.step >= lo && r.step < hi).map(|r| r.terms.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

struct State {
    net: MorphNet,
    comparator: Comparator,
    optim: OptimState,
    epoch: usize,
    best: Option<(usize, f64)>,
}

fn checkpoint(cfg: &RunConfig, s: &State, metric: f64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointKind::Ssl, cfg);
    ck.manifest.epoch = s.epoch;
    ck.manifest.step = s.optim.step;
    ck.manifest.metric = Some(metric);
    ck.manifest.best_metric = s.best.map(|b| b.1);
    ck.push_module(&s.net)?;
    ck.push_module(&s.comparator)?;
    s.optim.save_into(&mut ck)?;
    Ok(ck)
}

fn load_series(data: &Dataset, ids: &[String]) -> Result<Vec<EyeSeries>> {
    ids.iter().map(|id| data.load_series(id)).collect()
}

fn pair_tensors(s: &crate::phantom_data::SslSample, shape: [usize; 3]) -> Result<SslPair> {
    Ok(SslPair {
        i_t: volume_tensor(s.i_t.clone(), shape)?,
        i_tk: volume_tensor(s.i_tk.clone(), shape)?,
        r_t: volume_tensor(s.r_t.clone(), shape)?,
        r_tk: volume_tensor(s.r_tk.clone(), shape)?,
    })
}

fn validate(s: &State, cfg: &RunConfig, pairs: &[SslPair]) -> Result<(f64, f64)> {
    let (mut total, mut mse) = (0.0, 0.0);
    for p in pairs {
        let t = total_ssl_loss(p, &s.net, &s.comparator, &cfg.ssl.weights)?.terms();
        total += t.total;
        mse += t.mse;
    }
    let n = pairs.len().max(1) as f64;
    Ok((total / n, mse / n))
}

/// Keeps the lines of an existing CSV whose first column is at most `upto`.
fn previous_rows(path: &Path, upto: u64) -> Vec<String> {
    std::fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|v| v <= upto))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

fn diverged(e: MorphError) -> MorphError {
    match e {
        MorphError::NonFinite(op) => MorphError::Divergence(format!("{op} produced a non-finite value")),
        other => other,
    }
}

/// Self-supervised training. Writes `best/` and `last/` checkpoints,
/// `loss.csv` and `val.csv` into `out`. With `resume`, continues from a
/// `last/` checkpoint and reproduces the uninterrupted trajectory.
pub fn train_ssl(cfg: &RunConfig, data: &Dataset, out: &Path, resume: Option<&Checkpoint>) -> Result<SslReport> {
    cfg.validate()?;
    let shape = data.shape();
    if shape != cfg.net.input_shape {
        return Err(MorphError::Config(format!("dataset shape {shape:?} differs from net.input_shape")));
    }
    let split = &data.index.ssl_split;
    let train: Vec<EyeSeries> = load_series(data, &split.train)?
        .into_iter()
        .filter(|s| !eligible_pairs(&s.times()).is_empty())
        .collect();
    if train.is_empty() {
        return Err(MorphError::Domain("no training eye has a visit pair within the pairing window".into()));
    }
    let val_series: Vec<EyeSeries> = load_series(data, &split.val)?
        .into_iter()
        .filter(|s| !eligible_pairs(&s.times()).is_empty())
        .collect();
    let val_source = if val_series.is_empty() { &train } else { &val_series };
    let mut vrng = step_rng(cfg.seed, "ssl-val", 0);
    let val_pairs = (0..cfg.ssl.val_pairs.max(1))
        .map(|i| pair_tensors(&sample_ssl_pair(&val_source[i % val_source.len()], &mut vrng)?, shape))
        .collect::<Result<Vec<_>>>()?;

    let mut net = MorphNet::new(&cfg.net, cfg.seed)?;
    let mut state = match resume {
        None => {
            let comparator = Comparator::new(&cfg.net, &net.encoder, cfg.ssl.ema_momentum)?;
            State {
                net,
                comparator,
                optim: OptimState::new(cfg.ssl.weight_decay),
                epoch: 0,
                best: None,
            }
        }
        Some(ck) => {
            if ck.manifest.kind != CheckpointKind::Ssl || ck.manifest.config.net != cfg.net {
                return Err(MorphError::Checkpoint("resume checkpoint is not a compatible SSL checkpoint".into()));
            }
            ck.load_module(&mut net)?;
            let mut comparator = Comparator::new(&cfg.net, &net.encoder, cfg.ssl.ema_momentum)?;
            ck.load_module(&mut comparator)?;
            let best = ck.manifest.best_metric.map(|b| (0, b));
            State {
                net,
                comparator,
                optim: OptimState::load_from(ck, cfg.ssl.weight_decay)?,
                epoch: ck.manifest.epoch,
                best,
            }
        }
    };
    let mut train_rows: Vec<String> = Vec::new();
    let mut val_rows: Vec<String> = Vec::new();
    let mut report = SslReport {
        train: Vec::new(),
        val: Vec::new(),
        best_epoch: 0,
    };
    let loss_path = out.join("loss.csv");
    let val_path = out.join("val.csv");
    if resume.is_some() {
        train_rows = previous_rows(&loss_path, state.optim.step.saturating_sub(1));
        train_rows.truncate(state.optim.step as usize);
        val_rows = previous_rows(&val_path, state.epoch as u64);
    } else {
        let (total, mse) = validate(&state, cfg, &val_pairs).map_err(diverged)?;
        let row = SslValRow { epoch: 0, total, mse };
        log::info!("ssl epoch 0: val total {total:.6} mse {mse:.6}");
        val_rows.push(row.csv());
        report.val.push(row);
        state.best = Some((0, total));
        checkpoint(cfg, &state, total)?.save(&out.join("best"))?;
        checkpoint(cfg, &state, total)?.save(&out.join("last"))?;
        write_csv(&loss_path, SSL_LOSS_HEADER, train_rows.clone())?;
        write_csv(&val_path, VAL_HEADER, val_rows.clone())?;
    }
    let sched = CyclicLrSchedule {
        lr_min: cfg.ssl.lr_min,
        lr_max: cfg.ssl.lr_max,
        steps_per_epoch: cfg.ssl.steps_per_epoch,
    };
    let aug = cfg.ssl.augment;
    while state.epoch < cfg.ssl.epochs {
        for _ in 0..cfg.ssl.steps_per_epoch {
            let step = state.optim.step;
            let lr = sched.at(step);
            let mut rng = step_rng(cfg.seed, "ssl", step);
            let eye = &train[rng.gen_range(0..train.len())];
            let sample = sample_ssl_pair(eye, &mut rng)?;
            let a = augment(&sample.i_t, &sample.r_t, shape, &mut rng, None, &aug);
            let b = augment(&sample.i_tk, &sample.r_tk, shape, &mut rng, Some(a.transform), &aug);
            let pair = SslPair {
                i_t: volume_tensor(a.volume, shape)?,
                i_tk: volume_tensor(b.volume, shape)?,
                r_t: volume_tensor(a.roi, shape)?,
                r_tk: volume_tensor(b.roi, shape)?,
            };
            state.net.zero_grad();
            let loss = total_ssl_loss(&pair, &state.net, &state.comparator, &cfg.ssl.weights).map_err(diverged)?;
            loss.total.backward()?;
            adam_step(&mut [&mut state.net], &mut state.optim, lr)?;
            state.comparator.update(&state.net.encoder)?;
            let row = SslLogRow {
                step,
                lr,
                terms: loss.terms(),
            };
            train_rows.push(row.csv());
            report.train.push(row);
        }
        state.epoch += 1;
        let (total, mse) = validate(&state, cfg, &val_pairs).map_err(diverged)?;
        log::info!("ssl epoch {}: val total {total:.6} mse {mse:.6}", state.epoch);
        let row = SslValRow {
            epoch: state.epoch,
            total,
            mse,
        };
        val_rows.push(row.csv());
        report.val.push(row);
        if state.best.is_none_or(|(_, b)| total < b) {
            state.best = Some((state.epoch, total));
            report.best_epoch = state.epoch;
            checkpoint(cfg, &state, total)?.save(&out.join("best"))?;
        }
        checkpoint(cfg, &state, total)?.save(&out.join("last"))?;
        write_csv(&loss_path, SSL_LOSS_HEADER, train_rows.clone())?;
        write_csv(&val_path, VAL_HEADER, val_rows.clone())?;
    }
    Ok(report)
}
