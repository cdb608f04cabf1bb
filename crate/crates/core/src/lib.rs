//! Longitudinal morphing self-supervision for 3D scans and a sigmoidal
//! time-to-conversion head, with the survival and ROC tooling needed to
//! evaluate it on synthetic longitudinal phantoms.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsio;
pub mod morphnet;
pub mod par;
pub mod phantom_data;
pub mod ssl_loss;
pub mod survival_eval;
pub mod ttc_head;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{MorphError, Result};
