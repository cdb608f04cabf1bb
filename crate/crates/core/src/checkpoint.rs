//! Checkpoint directories: `manifest.json` (names, shapes, dtype, byte
//! offsets, config echo, training state) and `params.bin` (little-endian
//! f64, row-major, concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{MorphError, Result};
use crate::fsio::{replace_dir, write_atomic};
use crate::morphnet::Module;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

/// What produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Ssl,
    Ttc,
    /// Predicts from the phantom ground truth; holds no tensors.
    Oracle,
}

/// How the encoder is treated during time-to-conversion training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtcMode {
    Scratch,
    Freeze,
    Finetune,
}

impl TtcMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TtcMode::Scratch => "scratch",
            TtcMode::Freeze => "freeze",
            TtcMode::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for TtcMode {
    type Err = MorphError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TtcMode::Scratch),
            "freeze" => Ok(TtcMode::Freeze),
            "finetune" => Ok(TtcMode::Finetune),
            other => Err(MorphError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub kind: CheckpointKind,
    pub mode: Option<TtcMode>,
    pub fold: Option<usize>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Validation metric of this state (SSL loss or TTC mean AUC).
    pub metric: Option<f64>,
    /// Best validation metric seen up to this state.
    pub best_metric: Option<f64>,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    values: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: &RunConfig) -> Self {
        Self {
            manifest: CheckpointManifest {
                format: FORMAT_VERSION,
                kind,
                mode: None,
                fold: None,
                epoch: 0,
                step: 0,
                metric: None,
                best_metric: None,
                config: config.clone(),
                tensors: Vec::new(),
            },
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(MorphError::Checkpoint(format!("{name}: shape {shape:?} does not hold {} values", data.len())));
        }
        if self.get(name).is_some() {
            return Err(MorphError::Checkpoint(format!("duplicate tensor {name}")));
        }
        let offset = self.manifest.tensors.last().map_or(0, |t| t.offset + 8 * numel(&t.shape) as u64);
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f64".into(),
            offset,
        });
        self.values.push(data.to_vec());
        Ok(())
    }

    /// Appends every parameter of `module` under its own name.
    pub fn push_module(&mut self, module: &dyn Module) -> Result<()> {
        let mut out = Ok(());
        module.visit(&mut |p| {
            if out.is_ok() {
                out = self.push(p.name(), p.shape(), p.data());
            }
        });
        out
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.manifest
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| (self.manifest.tensors[i].shape.as_slice(), self.values[i].as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.iter().map(|t| t.name.as_str())
    }

    /// Overwrites every parameter of `module` from the tensor of the same
    /// name. Missing names or differing shapes are checkpoint errors.
    pub fn load_module(&self, module: &mut dyn Module) -> Result<()> {
        let mut out = Ok(());
        module.visit_mut(&mut |p| {
            if out.is_err() {
                return;
            }
            out = match self.get(p.name()) {
                None => Err(MorphError::Checkpoint(format!("tensor {} missing", p.name()))),
                Some((shape, _)) if shape != p.shape() => Err(MorphError::Checkpoint(format!(
                    "tensor {}: checkpoint shape {shape:?}, model shape {:?}",
                    p.name(),
                    p.shape()
                ))),
                Some((_, data)) => p.set_data(data.to_vec()),
            };
        });
        out
    }

    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        let mut params = Vec::with_capacity(self.values.iter().map(|v| v.len() * 8).sum());
        for v in self.values.iter().flatten() {
            params.extend_from_slice(&v.to_le_bytes());
        }
        Ok((manifest, params))
    }

    /// Writes into a sibling temporary directory, then swaps it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, params) = self.to_bytes()?;
        let name = dir
            .file_name()
            .ok_or_else(|| MorphError::InvalidArgument("Checkpoint::save", format!("{} has no name", dir.display())))?;
        let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        write_atomic(&tmp.join(PARAMS_FILE), &params)?;
        write_atomic(&tmp.join(MANIFEST_FILE), &manifest)?;
        replace_dir(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| MorphError::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        if manifest.format != FORMAT_VERSION {
            return Err(MorphError::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let bytes = fs::read(dir.join(PARAMS_FILE))?;
        let mut values = Vec::with_capacity(manifest.tensors.len());
        let mut expected = 0u64;
        for t in &manifest.tensors {
            if t.dtype != "f64" || t.offset != expected {
                return Err(MorphError::Checkpoint(format!("tensor {}: bad dtype or offset", t.name)));
            }
            let n = numel(&t.shape);
            let end = (t.offset as usize).saturating_add(8 * n);
            let raw = bytes
                .get(t.offset as usize..end)
                .ok_or_else(|| MorphError::Checkpoint(format!("params.bin truncated at tensor {}", t.name)))?;
            values.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
            expected = end as u64;
        }
        if expected as usize != bytes.len() {
            return Err(MorphError::Checkpoint(format!(
                "params.bin holds {} bytes, manifest describes {expected}",
                bytes.len()
            )));
        }
        Ok(Self { manifest, values })
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphnet::{Conv, Init};
    use crate::tensor::ConvSpec;

    #[test]
    fn round_trip_preserves_bytes_and_values() {
        let init = Init::new(3);
        let conv = Conv::new(&init, "c", 2, 4, [3, 3, 1], ConvSpec::default(), true);
        let mut ck = Checkpoint::new(CheckpointKind::Ssl, &RunConfig::default());
        ck.push_module(&conv).unwrap();
        ck.push("extra", &[2], &[1.5, f64::MIN_POSITIVE]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.manifest.tensors[1].offset, 8 * 2 * 4 * 9);
        let mut other = Conv::new(&Init::new(4), "c", 2, 4, [3, 3, 1], ConvSpec::default(), true);
        back.load_module(&mut other).unwrap();
        assert_eq!(other.weight.data(), conv.weight.data());
        ck.save(&path).unwrap();
        assert_eq!(fs::read(path.join(PARAMS_FILE)).unwrap(), ck.to_bytes().unwrap().1);
    }

    #[test]
    fn mismatches_are_checkpoint_errors() {
        let init = Init::new(3);
        let conv = Conv::new(&init, "c", 2, 4, [1, 1, 1], ConvSpec::default(), false);
        let mut ck = Checkpoint::new(CheckpointKind::Ssl, &RunConfig::default());
        ck.push_module(&conv).unwrap();
        let mut wider = Conv::new(&init, "c", 2, 8, [1, 1, 1], ConvSpec::default(), false);
        assert!(matches!(ck.load_module(&mut wider), Err(MorphError::Checkpoint(_))));
        let mut renamed = Conv::new(&init, "d", 2, 4, [1, 1, 1], ConvSpec::default(), false);
        assert!(matches!(ck.load_module(&mut renamed), Err(MorphError::Checkpoint(_))));
        assert!(ck.push("c.weight", &[1], &[0.0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        ck.save(&path).unwrap();
        let mut bytes = fs::read(path.join(PARAMS_FILE)).unwrap();
        bytes.pop();
        fs::write(path.join(PARAMS_FILE), bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(MorphError::Checkpoint(_))));
    }
}
