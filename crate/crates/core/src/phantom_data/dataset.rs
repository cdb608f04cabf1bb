//! On-disk dataset layout: `index.json` plus one volume and one ROI file per visit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    eye_seed, generate_eye_series_with_id, split_folds, split_ssl, EyeRole, EyeSeries, Lesion, PhantomConfig, Visit,
};
use crate::error::{MorphError, Result};
use crate::fsio::write_atomic;
use crate::ttc_head::ConversionRecord;

const VOLUME_MAGIC: &[u8; 8] = b"MTVOLF64";
const ROI_MAGIC: &[u8; 8] = b"MTROIU08";
pub const INDEX_FILE: &str = "index.json";
const FORMAT_VERSION: u32 = 1;
/// Eyes generated concurrently before their files are written.
const GENERATION_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub holdout: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSplit {
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitEntry {
    pub time_months: f64,
    pub volume: String,
    pub roi: String,
    pub converted: bool,
    pub record: ConversionRecord,
    pub lesion_amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeEntry {
    pub id: String,
    pub role: EyeRole,
    #[serde(with = "crate::ttc_head::float_or_inf")]
    pub conversion_time_true: f64,
    pub lesions: Vec<Lesion>,
    pub visits: Vec<VisitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: u32,
    pub seed: u64,
    pub config: PhantomConfig,
    pub ssl_split: SslSplit,
    pub folds: Vec<FoldSplit>,
    pub eyes: Vec<EyeEntry>,
}

impl DatasetIndex {
    pub fn eye(&self, id: &str) -> Result<&EyeEntry> {
        self.eyes
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| MorphError::Data(format!("eye {id} not in dataset index")))
    }

    pub fn count(&self, role: EyeRole) -> usize {
        self.eyes.iter().filter(|e| e.role == role).count()
    }
}

fn entry_for(series: &EyeSeries, role: EyeRole) -> Result<EyeEntry> {
    let records = series.records()?;
    let visits = series
        .visits
        .iter()
        .zip(records)
        .enumerate()
        .map(|(j, (v, record))| VisitEntry {
            time_months: v.time_months,
            volume: format!("volumes/{}_v{j:02}.vol", series.eye_id),
            roi: format!("volumes/{}_v{j:02}.roi", series.eye_id),
            converted: v.converted,
            record,
            lesion_amplitudes: v.lesion_amplitudes.clone(),
        })
        .collect();
    Ok(EyeEntry {
        id: series.eye_id.clone(),
        role,
        conversion_time_true: series.conversion_time_true,
        lesions: series.lesion_params.clone(),
        visits,
    })
}

/// Generates every eye, handing each finished series to `sink`, and returns the index.
pub fn build_dataset(
    cfg: &PhantomConfig,
    seed: u64,
    mut sink: impl FnMut(&EyeSeries, &EyeEntry) -> Result<()>,
) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut eyes = Vec::new();
    for (role, n) in [(EyeRole::Ssl, cfg.n_ssl_eyes), (EyeRole::Ttc, cfg.n_ttc_eyes)] {
        for start in (0..n).step_by(GENERATION_CHUNK) {
            let len = GENERATION_CHUNK.min(n - start);
            let batch = crate::par::map_range(len, |k| {
                let i = start + k;
                generate_eye_series_with_id(eye_seed(seed, role, i), cfg, role, format!("{}{i:03}", role.as_str()))
            });
            for series in batch {
                let series = series?;
                let entry = entry_for(&series, role)?;
                sink(&series, &entry)?;
                eyes.push(entry);
            }
        }
    }
    let ids = |role: EyeRole| eyes.iter().filter(|e| e.role == role).map(|e| e.id.clone()).collect::<Vec<_>>();
    let ssl_split = split_ssl(&ids(EyeRole::Ssl), cfg, seed);
    let ttc: Vec<&EyeEntry> = eyes.iter().filter(|e| e.role == EyeRole::Ttc).collect();
    let converts: Vec<bool> = ttc.iter().map(|e| e.visits.iter().any(|v| v.converted)).collect();
    let folds = if ttc.is_empty() { Vec::new() } else { split_folds(&ids(EyeRole::Ttc), &converts, cfg, seed) };
    Ok(DatasetIndex {
        format: FORMAT_VERSION,
        seed,
        config: cfg.clone(),
        ssl_split,
        folds,
        eyes,
    })
}

/// Generates the dataset in memory.
pub fn generate_dataset(cfg: &PhantomConfig, seed: u64) -> Result<(DatasetIndex, Vec<EyeSeries>)> {
    let mut all = Vec::new();
    let index = build_dataset(cfg, seed, |s, _| {
        all.push(s.clone());
        Ok(())
    })?;
    Ok((index, all))
}

/// Generates the dataset straight to `dir`, writing `index.json` last.
pub fn write_dataset(dir: &Path, cfg: &PhantomConfig, seed: u64) -> Result<DatasetIndex> {
    fs::create_dir_all(dir.join("volumes"))?;
    let index = build_dataset(cfg, seed, |series, entry| {
        for (v, e) in series.visits.iter().zip(&entry.visits) {
            write_atomic(&dir.join(&e.volume), &encode_volume(&v.volume, series.shape))?;
            write_atomic(&dir.join(&e.roi), &encode_roi(&v.roi, series.shape))?;
        }
        Ok(())
    })?;
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    write_atomic(&dir.join(INDEX_FILE), &json)?;
    Ok(index)
}

fn header(magic: &[u8; 8], shape: [usize; 3]) -> Vec<u8> {
    let mut out = magic.to_vec();
    for n in shape {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out
}

pub fn encode_volume(data: &[f64], shape: [usize; 3]) -> Vec<u8> {
    let mut out = header(VOLUME_MAGIC, shape);
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_roi(data: &[f64], shape: [usize; 3]) -> Vec<u8> {
    let mut out = header(ROI_MAGIC, shape);
    out.extend(data.iter().map(|&v| u8::from(v > 0.5)));
    out
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 8], path: &Path) -> Result<([usize; 3], &'a [u8])> {
    let bad = |m: &str| MorphError::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != magic {
        return Err(bad("unrecognised header"));
    }
    let mut shape = [0usize; 3];
    for (a, s) in shape.iter_mut().enumerate() {
        let raw: [u8; 8] = bytes[8 + 8 * a..16 + 8 * a].try_into().expect("8-byte slice");
        *s = usize::try_from(u64::from_le_bytes(raw)).map_err(|_| bad("extent overflows usize"))?;
    }
    Ok((shape, &bytes[32..]))
}

pub fn read_volume_file(path: &Path) -> Result<([usize; 3], Vec<f64>)> {
    let bytes = fs::read(path)?;
    let (shape, body) = parse_header(&bytes, VOLUME_MAGIC, path)?;
    let n: usize = shape.iter().product();
    if body.len() != n * 8 {
        return Err(MorphError::Data(format!("{}: expected {} values, found {} bytes", path.display(), n, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((shape, data))
}

pub fn read_roi_file(path: &Path) -> Result<([usize; 3], Vec<f64>)> {
    let bytes = fs::read(path)?;
    let (shape, body) = parse_header(&bytes, ROI_MAGIC, path)?;
    if body.len() != shape.iter().product::<usize>() {
        return Err(MorphError::Data(format!("{}: ROI size does not match header", path.display())));
    }
    Ok((shape, body.iter().map(|&b| f64::from(b)).collect()))
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(INDEX_FILE))?;
        let index: DatasetIndex =
            serde_json::from_str(&text).map_err(|e| MorphError::Data(format!("{INDEX_FILE}: {e}")))?;
        if index.format != FORMAT_VERSION {
            return Err(MorphError::Data(format!("unsupported dataset format {}", index.format)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.index.config.shape
    }

    /// Reads one visit's `(volume, roi)`.
    pub fn load_visit(&self, entry: &VisitEntry) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s1, vol) = read_volume_file(&self.root.join(&entry.volume))?;
        let (s2, roi) = read_roi_file(&self.root.join(&entry.roi))?;
        if s1 != self.shape() || s2 != self.shape() {
            return Err(MorphError::Data(format!(
                "{}: shape {s1:?}/{s2:?} differs from index shape {:?}",
                entry.volume,
                self.shape()
            )));
        }
        Ok((vol, roi))
    }

    /// Reads every visit of eye `id` back into a series.
    pub fn load_series(&self, id: &str) -> Result<EyeSeries> {
        let entry = self.index.eye(id)?;
        let visits = entry
            .visits
            .iter()
            .map(|v| {
                let (volume, roi) = self.load_visit(v)?;
                Ok(Visit {
                    time_months: v.time_months,
                    volume,
                    roi,
                    converted: v.converted,
                    lesion_amplitudes: v.lesion_amplitudes.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EyeSeries {
            eye_id: entry.id.clone(),
            shape: self.shape(),
            visits,
            conversion_time_true: entry.conversion_time_true,
            lesion_params: entry.lesions.clone(),
        })
    }
}
