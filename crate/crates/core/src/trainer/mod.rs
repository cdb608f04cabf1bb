//! Optimisation loops for morphing self-supervision and the
//! time-to-conversion head, plus fold evaluation.

mod eval;
mod optim;
mod ssl;
mod ttc;

pub use eval::{evaluate, write_eval_outputs, write_oracle_checkpoint, EvalBundle, KmRow, MetricRow, PredictionRow, Predictor};
pub use optim::{adam_step, cyclic_lr, CyclicLrSchedule, OptimState};
pub use ssl::{train_ssl, SslLogRow, SslReport, SslValRow, SSL_LOSS_HEADER};
pub use ttc::{fold_records, train_ttc, TtcLogRow, TtcModel, TtcReport, TtcValRow, TTC_LOSS_HEADER};

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::fsio::write_atomic;
use crate::tensor::Tensor;

/// Random stream for one training step, independent of every other step so
/// that a resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, stage: &str, step: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(step.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn volume_tensor(data: Vec<f64>, shape: [usize; 3]) -> Result<Tensor> {
    Tensor::new(&[1, shape[0], shape[1], shape[2]], data)
}

/// Writes `header` plus `rows` as CSV.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{header}").expect("string write");
    for r in rows {
        writeln!(s, "{r}").expect("string write");
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// Finite floats in shortest round-trip form; non-finite as `inf`/`-inf`/`nan`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}
