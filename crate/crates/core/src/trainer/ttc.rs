use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::eval::{predict_scans, validation_auc, Predictor};
use super::optim::{adam_step, CyclicLrSchedule, OptimState};
use super::{fmt_f64, step_rng, volume_tensor, write_csv};
use crate::checkpoint::{Checkpoint, CheckpointKind, TtcMode};
use crate::config::RunConfig;
use crate::error::{MorphError, Result};
use crate::morphnet::{Init, Module, MorphNet, NetConfig};
use crate::phantom_data::{augment, Dataset, FoldSplit};
use crate::tensor::{trilinear_resize_to, Parameter, Tensor};
use crate::ttc_head::{ttc_total_loss, Classifier, ClassifierOutput, ConversionRecord};

pub const TTC_LOSS_HEADER: &str = "step,lr,L_cls,L_slope,L_out,total";
const VAL_HEADER: &str = "epoch,val_auc_mean";

/// Encoder plus classification head. The decoders travel along so that
/// checkpoints stay loadable as full networks, but they never train here.
#[derive(Debug, Clone)]
pub struct TtcModel {
    pub net: MorphNet,
    pub classifier: Classifier,
}

impl TtcModel {
    pub fn new(net: MorphNet, seed: u64) -> Result<Self> {
        let classifier = Classifier::new(&Init::new(seed), "classifier", net.config.feature_channels)?;
        Ok(Self { net, classifier })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn forward(&self, vol: &Tensor) -> Result<ClassifierOutput> {
        let features = self.net.encode(vol)?.concat()?;
        self.classifier.forward(&features)
    }

    /// Configures trainability: the classifier always trains, the encoder
    /// unless `mode` is freeze, the decoders never.
    pub fn set_mode(&mut self, mode: TtcMode) {
        self.net.set_trainable(false);
        if mode != TtcMode::Freeze {
            self.net.encoder.set_trainable(true);
        }
        self.classifier.set_trainable(true);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != CheckpointKind::Ttc {
            return Err(MorphError::Checkpoint(format!("expected a ttc checkpoint, found {:?}", ck.manifest.kind)));
        }
        let cfg = &ck.manifest.config;
        let mut model = Self::new(MorphNet::new(&cfg.net, cfg.seed)?, cfg.seed)?;
        ck.load_module(&mut model)?;
        Ok(model)
    }
}

impl Module for TtcModel {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.net.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TtcLogRow {
    pub step: u64,
    pub lr: f64,
    pub classification: f64,
    pub slope: f64,
    pub outside: f64,
    pub total: f64,
}

impl TtcLogRow {
    fn csv(&self) -> String {
        [self.lr, self.classification, self.slope, self.outside, self.total]
            .iter()
            .fold(self.step.to_string(), |s, v| s + "," + &fmt_f64(*v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TtcValRow {
    pub epoch: usize,
    /// Mean validation AUC over the horizons where both classes occur.
    pub auc_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TtcReport {
    pub train: Vec<TtcLogRow>,
    pub val: Vec<TtcValRow>,
    pub best_epoch: usize,
    /// Training scans dropped because their interval straddles the horizon.
    pub excluded: usize,
}

/// A labelled training scan.
#[derive(Debug, Clone)]
pub(crate) struct TrainScan {
    pub volume: Vec<f64>,
    pub roi: Vec<f64>,
    pub record: ConversionRecord,
}

/// Trainable records of the listed eyes, and the number excluded.
pub fn fold_records(data: &Dataset, ids: &[String]) -> Result<(Vec<(String, usize, ConversionRecord)>, usize)> {
    let mut keep = Vec::new();
    let mut excluded = 0;
    for id in ids {
        for (j, v) in data.index.eye(id)?.visits.iter().enumerate() {
            if v.record.is_trainable() {
                keep.push((id.clone(), j, v.record));
            } else {
                excluded += 1;
            }
        }
    }
    Ok((keep, excluded))
}

fn fold_split(data: &Dataset, fold: usize) -> Result<&FoldSplit> {
    data.index
        .folds
        .get(fold)
        .ok_or_else(|| MorphError::Domain(format!("dataset has no fold {fold}")))
}

fn checkpoint(cfg: &RunConfig, model: &TtcModel, optim: &OptimState, mode: TtcMode, epoch: usize, metric: Option<f64>, best: Option<f64>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CheckpointKind::Ttc, cfg);
    ck.manifest.mode = Some(mode);
    ck.manifest.fold = Some(cfg.ttc.fold);
    ck.manifest.epoch = epoch;
    ck.manifest.step = optim.step;
    ck.manifest.metric = metric;
    ck.manifest.best_metric = best;
    ck.push_module(model)?;
    optim.save_into(&mut ck)?;
    Ok(ck)
}

/// Builds the starting model for `mode` from an optional initial checkpoint.
fn initial_model(cfg: &RunConfig, mode: TtcMode, init: Option<&Checkpoint>) -> Result<TtcModel> {
    match (mode, init) {
        (TtcMode::Scratch, None) => TtcModel::new(MorphNet::new(&cfg.net, cfg.seed)?, cfg.seed),
        (TtcMode::Scratch, Some(_)) => Err(MorphError::Checkpoint("scratch mode takes no initial checkpoint".into())),
        (_, None) => Err(MorphError::Checkpoint(format!("{} mode requires an initial checkpoint", mode.as_str()))),
        (TtcMode::Freeze, Some(ck)) => {
            if ck.manifest.kind != CheckpointKind::Ssl {
                return Err(MorphError::Checkpoint(format!(
                    "freeze mode needs an ssl checkpoint, found {:?}",
                    ck.manifest.kind
                )));
            }
            let mut net = MorphNet::new(&ck.manifest.config.net, cfg.seed)?;
            ck.load_module(&mut net)?;
            TtcModel::new(net, cfg.seed)
        }
        (TtcMode::Finetune, Some(ck)) => {
            if ck.manifest.mode != Some(TtcMode::Freeze) {
                return Err(MorphError::Checkpoint("finetune mode needs a freeze-trained ttc checkpoint".into()));
            }
            TtcModel::from_checkpoint(ck)
        }
    }
}

/// Time-to-conversion training on the training eyes of `cfg.ttc.fold`,
/// selecting the epoch with the highest mean validation AUC. Writes
/// `best/`, `last/`, `loss.csv` and `val.csv` into `out`.
pub fn train_ttc(cfg: &RunConfig, data: &Dataset, out: &Path, mode: TtcMode, init: Option<&Checkpoint>) -> Result<TtcReport> {
    cfg.validate()?;
    let mut model = initial_model(cfg, mode, init)?;
    let shape = data.shape();
    if shape != model.config().input_shape {
        return Err(MorphError::Checkpoint(format!(
            "network input {:?} differs from dataset shape {shape:?}",
            model.config().input_shape
        )));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.net = model.config().clone();
    let cfg = &run_cfg;
    model.set_mode(mode);
    let split = fold_split(data, cfg.ttc.fold)?.clone();
    let (records, excluded) = fold_records(data, &split.train)?;
    if excluded > 0 {
        log::info!("ttc: {excluded} training scans straddle the horizon and are excluded");
    }
    if records.is_empty() {
        return Err(MorphError::Domain("no trainable records in the training split".into()));
    }
    let scans = records
        .iter()
        .map(|(id, j, record)| {
            let (volume, roi) = data.load_visit(&data.index.eye(id)?.visits[*j])?;
            Ok(TrainScan { volume, roi, record: *record })
        })
        .collect::<Result<Vec<_>>>()?;
    let feature_shape = model.config().feature_shape();
    let val_predict = |m: &TtcModel| -> Result<Option<f64>> {
        let preds = predict_scans(&Predictor::Model(m), data, &split.val)?;
        validation_auc(&preds, &cfg.eval.horizons)
    };

    let mut optim = OptimState::new(cfg.ttc.weight_decay);
    let mut report = TtcReport {
        train: Vec::new(),
        val: Vec::new(),
        best_epoch: 0,
        excluded,
    };
    let metric = val_predict(&model)?;
    report.val.push(TtcValRow { epoch: 0, auc_mean: metric });
    let mut best = metric.unwrap_or(f64::NEG_INFINITY);
    let save = |m: &TtcModel, o: &OptimState, epoch: usize, metric: Option<f64>, best: f64, name: &str| -> Result<()> {
        let b = best.is_finite().then_some(best);
        checkpoint(cfg, m, o, mode, epoch, metric, b)?.save(&out.join(name))
    };
    save(&model, &optim, 0, metric, best, "best")?;
    let sched = CyclicLrSchedule {
        lr_min: cfg.ttc.lr_min,
        lr_max: cfg.ttc.lr_max,
        steps_per_epoch: cfg.ttc.steps_per_epoch,
    };
    let batch = cfg.ttc.batch_size;
    let write_logs = |report: &TtcReport| -> Result<()> {
        write_csv(&out.join("loss.csv"), TTC_LOSS_HEADER, report.train.iter().map(|r| r.csv()))?;
        write_csv(
            &out.join("val.csv"),
            VAL_HEADER,
            report.val.iter().map(|r| format!("{},{}", r.epoch, r.auc_mean.map_or("null".into(), fmt_f64))),
        )
    };
    for epoch in 1..=cfg.ttc.epochs {
        for _ in 0..cfg.ttc.steps_per_epoch {
            let step = optim.step;
            let lr = sched.at(step);
            let mut rng = step_rng(cfg.seed, &format!("ttc-{}", mode.as_str()), step);
            model.zero_grad();
            let mut row = TtcLogRow {
                step,
                lr,
                classification: 0.0,
                slope: 0.0,
                outside: 0.0,
                total: 0.0,
            };
            for _ in 0..batch {
                let scan = &scans[rng.gen_range(0..scans.len())];
                let a = augment(&scan.volume, &scan.roi, shape, &mut rng, None, &cfg.ttc.augment);
                let out = model.forward(&volume_tensor(a.volume, shape)?)?;
                let roi = trilinear_resize_to(&volume_tensor(a.roi, shape)?, feature_shape)?;
                let loss = ttc_total_loss(&out, &scan.record, &roi)?;
                if !loss.total.all_finite() {
                    return Err(MorphError::Divergence(format!("ttc loss non-finite at step {step}")));
                }
                loss.total.scale(1.0 / batch as f64).backward()?;
                let k = batch as f64;
                row.classification += loss.classification.item() / k;
                row.slope += loss.slope.item() / k;
                row.outside += loss.outside.item() / k;
                row.total += loss.total.item() / k;
            }
            adam_step(&mut [&mut model], &mut optim, lr)?;
            report.train.push(row);
        }
        let metric = val_predict(&model)?;
        log::info!("ttc epoch {epoch}: val mean auc {metric:?}");
        report.val.push(TtcValRow { epoch, auc_mean: metric });
        if let Some(m) = metric.filter(|&m| m > best) {
            best = m;
            report.best_epoch = epoch;
            save(&model, &optim, epoch, metric, best, "best")?;
        }
        save(&model, &optim, epoch, metric, best, "last")?;
        write_logs(&report)?;
    }
    if cfg.ttc.epochs == 0 {
        save(&model, &optim, 0, metric, best, "last")?;
        write_logs(&report)?;
    }
    Ok(report)
}
