//! Synthetic longitudinal phantoms standing in for a clinical cohort.
//!
//! Each eye is a series of layered volumes whose drusen-like deposits grow
//! over time. Once the summed deposit height crosses a threshold the eye
//! converts and a dark fluid pocket appears. Visits are misaligned by a
//! smooth, non-folding deformation so that morphing between them is a
//! meaningful registration-plus-residual problem.

mod augment;
mod dataset;
mod generate;

pub use augment::{augment, gaussian_blur_inplane, AugmentConfig, Augmented, PairTransform};
pub use dataset::{
    build_dataset, encode_roi, encode_volume, generate_dataset, read_roi_file, read_volume_file, write_dataset, Dataset,
    DatasetIndex, EyeEntry, FoldSplit, INDEX_FILE,
    SslSplit, VisitEntry,
};
pub use generate::{render, EyeAnatomy, Lesion, VisitDeformation};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MorphError, Result};
use crate::ttc_head::ConversionRecord;

/// Longest visit gap (months) accepted for a self-supervised pair.
pub const PAIR_WINDOW_MONTHS: f64 = 24.0;

/// Generator settings. Every field has a default matching the toy scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Volume size `[H, W, D]`.
    pub shape: [usize; 3],
    pub n_ssl_eyes: usize,
    /// Inclusive range of visits per self-supervised eye.
    pub ssl_visits: [usize; 2],
    pub ssl_val_eyes: usize,
    pub ssl_holdout_eyes: usize,
    pub n_ttc_eyes: usize,
    /// Inclusive range of visits per labelled eye (before truncation at conversion).
    pub ttc_visits: [usize; 2],
    pub n_folds: usize,
    /// Fraction of each fold's training eyes held out for validation.
    pub val_fraction: f64,
    /// Mean months between visits.
    pub visit_interval_mean: f64,
    /// Intervals are drawn uniformly from `mean * [1 - jitter, 1 + jitter]`.
    pub visit_interval_jitter: f64,
    /// Bound on the rigid part of the inter-visit displacement (voxels).
    pub deformation_amplitude: f64,
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    /// Inclusive range of deposits per eye.
    pub lesion_count: [usize; 2],
    /// Summed deposit height (rows) at which an eye converts.
    pub conversion_threshold: f64,
    /// Probability that an eye is assigned a conversion time.
    pub converter_fraction: f64,
    /// Range of conversion times (months after the first visit) for converters.
    pub conversion_time_range: [f64; 2],
    /// Upper bound on the load growth of non-converters, as a fraction of the
    /// threshold per month.
    pub non_converter_growth: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [48, 48, 8],
            n_ssl_eyes: 30,
            ssl_visits: [5, 7],
            ssl_val_eyes: 3,
            ssl_holdout_eyes: 3,
            n_ttc_eyes: 60,
            ttc_visits: [8, 12],
            n_folds: 5,
            val_fraction: 0.15,
            visit_interval_mean: 3.6,
            visit_interval_jitter: 0.3,
            deformation_amplitude: 1.5,
            noise_sigma: 0.01,
            texture_amplitude: 0.06,
            lesion_count: [1, 3],
            conversion_threshold: 6.0,
            converter_fraction: 0.6,
            conversion_time_range: [3.0, 45.0],
            non_converter_growth: 0.004,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MorphError::Config(m));
        if self.shape.iter().any(|&n| n == 0) {
            return bad(format!("shape {:?} has a zero extent, so the ROI would be empty", self.shape));
        }
        if self.ssl_visits[0] < 3 || self.ssl_visits[0] > self.ssl_visits[1] {
            return bad(format!("ssl_visits {:?} must be an ordered range starting at 3 or more", self.ssl_visits));
        }
        if self.ttc_visits[0] < 1 || self.ttc_visits[0] > self.ttc_visits[1] {
            return bad(format!("ttc_visits {:?} must be an ordered non-empty range", self.ttc_visits));
        }
        if self.ssl_val_eyes + self.ssl_holdout_eyes > self.n_ssl_eyes {
            return bad("ssl_val_eyes + ssl_holdout_eyes exceeds n_ssl_eyes".into());
        }
        if self.n_ttc_eyes > 0 && (self.n_folds < 2 || self.n_folds > self.n_ttc_eyes) {
            return bad(format!("n_folds {} must lie in [2, n_ttc_eyes]", self.n_folds));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        if !(self.visit_interval_mean > 0.0) || !(0.0..1.0).contains(&self.visit_interval_jitter) {
            return bad("visit interval must have positive mean and jitter in [0, 1)".into());
        }
        let nonneg = [
            ("deformation_amplitude", self.deformation_amplitude),
            ("noise_sigma", self.noise_sigma),
            ("texture_amplitude", self.texture_amplitude),
            ("conversion_threshold", self.conversion_threshold),
            ("non_converter_growth", self.non_converter_growth),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.lesion_count[0] < 1 || self.lesion_count[0] > self.lesion_count[1] {
            return bad(format!("lesion_count {:?} must be an ordered range starting at 1", self.lesion_count));
        }
        if !(0.0..=1.0).contains(&self.converter_fraction) {
            return bad("converter_fraction must lie in [0, 1]".into());
        }
        let [lo, hi] = self.conversion_time_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("conversion_time_range {:?} must be positive and ordered", self.conversion_time_range));
        }
        if self.deformation_amplitude > 0.1 * self.shape[0].min(self.shape[1]) as f64 {
            return bad("deformation_amplitude exceeds a tenth of the in-plane extent".into());
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Which cohort an eye belongs to, deciding its visit count and whether the
/// series stops at the first converted visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeRole {
    Ssl,
    Ttc,
}

impl EyeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EyeRole::Ssl => "ssl",
            EyeRole::Ttc => "ttc",
        }
    }
}

/// One scan of an eye.
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub time_months: f64,
    /// `[H, W, D]` row-major intensities in `[-1, 1]`.
    pub volume: Vec<f64>,
    /// Binary tissue mask on the same grid.
    pub roi: Vec<f64>,
    pub converted: bool,
    /// Peak height of every deposit at this visit.
    pub lesion_amplitudes: Vec<f64>,
}

/// A longitudinal sequence of scans of one eye.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeSeries {
    pub eye_id: String,
    pub shape: [usize; 3],
    pub visits: Vec<Visit>,
    /// First time the deposit load reaches the threshold (`+inf` if never).
    pub conversion_time_true: f64,
    pub lesion_params: Vec<Lesion>,
}

impl EyeSeries {
    pub fn times(&self) -> Vec<f64> {
        self.visits.iter().map(|v| v.time_months).collect()
    }

    /// Interval label of every visit, derived from the bracketing visits.
    pub fn records(&self) -> Result<Vec<ConversionRecord>> {
        conversion_records(&self.times(), &self.visits.iter().map(|v| v.converted).collect::<Vec<_>>())
    }
}

/// Per-scan `(T-, T+)` from visit times and converted flags.
pub fn conversion_records(times: &[f64], converted: &[bool]) -> Result<Vec<ConversionRecord>> {
    let first = converted.iter().position(|&c| c);
    let last = *times.last().ok_or(MorphError::Empty("conversion_records"))?;
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| match first {
            // Unconverted scan with an observed conversion later on.
            Some(c) if i < c => ConversionRecord::new(times[c - 1] - t, times[c] - t),
            // Converted scan: last unconverted visit lies in the past.
            Some(c) => {
                let t_minus = if c == 0 { f64::NEG_INFINITY } else { times[c - 1] - t };
                ConversionRecord::new(t_minus, 0.0)
            }
            None => ConversionRecord::new(last - t, f64::INFINITY),
        })
        .collect()
}

fn conversion_time(lesions: &[Lesion], threshold: f64) -> f64 {
    let load0: f64 = lesions.iter().map(|l| l.amplitude0.max(0.0)).sum();
    let growth: f64 = lesions.iter().map(|l| l.growth).sum();
    if load0 >= threshold {
        0.0
    } else if growth > 0.0 {
        (threshold - load0) / growth
    } else {
        f64::INFINITY
    }
}

/// Renders a full series for one eye from `seed`.
pub fn generate_eye_series(seed: u64, config: &PhantomConfig, role: EyeRole) -> Result<EyeSeries> {
    generate_eye_series_with_id(seed, config, role, format!("{}-{seed:016x}", role.as_str()))
}

fn generate_eye_series_with_id(seed: u64, config: &PhantomConfig, role: EyeRole, eye_id: String) -> Result<EyeSeries> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = match role {
        EyeRole::Ssl => config.ssl_visits,
        EyeRole::Ttc => config.ttc_visits,
    };
    let n_visits = rng.gen_range(range[0]..=range[1]);
    let mut times = Vec::with_capacity(n_visits);
    let mut t = 0.0;
    for i in 0..n_visits {
        if i > 0 {
            let j = config.visit_interval_jitter;
            t += config.visit_interval_mean * rng.gen_range((1.0 - j)..=(1.0 + j));
        }
        times.push(t);
    }
    let target = if rng.gen_bool(config.converter_fraction) {
        let [lo, hi] = config.conversion_time_range;
        Some(rng.gen_range(lo..=hi))
    } else {
        None
    };
    let lesions = generate::sample_lesions(&mut rng, config, target)?;
    let conversion_time_true = conversion_time(&lesions, config.conversion_threshold);
    let anatomy = EyeAnatomy::sample(&mut rng, config, lesions.clone());
    let mut visits = Vec::with_capacity(n_visits);
    for &time in &times {
        let converted = time >= conversion_time_true;
        let deformation = VisitDeformation::sample(&mut rng, config.deformation_amplitude);
        let (volume, roi) = render(&anatomy, &deformation, time, converted, config.shape, config.noise_sigma, &mut rng);
        if !roi.iter().any(|&r| r > 0.0) {
            return Err(MorphError::Data(format!("{eye_id}: visit at {time} months has an empty ROI")));
        }
        visits.push(Visit {
            time_months: time,
            volume,
            roi,
            converted,
            lesion_amplitudes: lesions.iter().map(|l| l.amplitude(time).max(0.0)).collect(),
        });
        if role == EyeRole::Ttc && converted {
            break;
        }
    }
    Ok(EyeSeries {
        eye_id,
        shape: config.shape,
        visits,
        conversion_time_true,
        lesion_params: lesions,
    })
}

/// All ordered visit pairs `(i, j)` with `i < j` at most the pairing window apart.
pub fn eligible_pairs(times: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            if times[j] - times[i] <= PAIR_WINDOW_MONTHS {
                out.push((i, j));
            }
        }
    }
    out
}

/// Visit indices of a uniformly drawn eligible pair, earlier visit first.
pub fn sample_pair_indices(times: &[f64], rng: &mut impl Rng) -> Result<(usize, usize)> {
    let pairs = eligible_pairs(times);
    pairs
        .choose(rng)
        .copied()
        .ok_or_else(|| MorphError::Domain(format!("no visit pair within {PAIR_WINDOW_MONTHS} months")))
}

/// Volumes and masks of an eligible pair `(I_t, I_tk, R_t, R_tk)`.
#[derive(Debug, Clone)]
pub struct SslSample {
    pub visits: (usize, usize),
    pub i_t: Vec<f64>,
    pub i_tk: Vec<f64>,
    pub r_t: Vec<f64>,
    pub r_tk: Vec<f64>,
}

pub fn sample_ssl_pair(series: &EyeSeries, rng: &mut impl Rng) -> Result<SslSample> {
    let (a, b) = sample_pair_indices(&series.times(), rng)?;
    let (va, vb) = (&series.visits[a], &series.visits[b]);
    Ok(SslSample {
        visits: (a, b),
        i_t: va.volume.clone(),
        i_tk: vb.volume.clone(),
        r_t: va.roi.clone(),
        r_tk: vb.roi.clone(),
    })
}

/// Seed of eye `index` of a cohort, independent across cohorts.
pub fn eye_seed(seed: u64, role: EyeRole, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match role {
        EyeRole::Ssl => 1,
        EyeRole::Ttc => 2,
    });
    rng.set_word_pos(2 * index as u128);
    rng.gen()
}

fn shuffled(ids: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut v = ids.to_vec();
    v.shuffle(rng);
    v
}

/// Self-supervised split of eye ids.
pub fn split_ssl(ids: &[String], cfg: &PhantomConfig, seed: u64) -> SslSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let order = shuffled(ids, &mut rng);
    let (val, rest) = order.split_at(cfg.ssl_val_eyes.min(order.len()));
    let (holdout, train) = rest.split_at(cfg.ssl_holdout_eyes.min(rest.len()));
    let sorted = |s: &[String]| {
        let mut v = s.to_vec();
        v.sort();
        v
    };
    SslSplit {
        train: sorted(train),
        val: sorted(val),
        holdout: sorted(holdout),
    }
}

/// Folds stratified by whether an eye converts during follow-up, and a
/// stratified validation subset of every fold's training eyes.
pub fn split_folds(ids: &[String], converts: &[bool], cfg: &PhantomConfig, seed: u64) -> Vec<FoldSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let pos: Vec<String> = ids.iter().zip(converts).filter(|(_, &c)| c).map(|(i, _)| i.clone()).collect();
    let neg: Vec<String> = ids.iter().zip(converts).filter(|(_, &c)| !c).map(|(i, _)| i.clone()).collect();
    let ordered: Vec<String> = shuffled(&pos, &mut rng).into_iter().chain(shuffled(&neg, &mut rng)).collect();
    let k = cfg.n_folds.max(1);
    let fold_of = |id: &String| ordered.iter().position(|x| x == id).map(|p| p % k).unwrap_or(0);
    (0..k)
        .map(|f| {
            let mut test: Vec<String> = ids.iter().filter(|id| fold_of(id) == f).cloned().collect();
            let mut train = Vec::new();
            let mut val = Vec::new();
            for stratum in [&pos, &neg] {
                let members: Vec<String> = stratum.iter().filter(|id| fold_of(id) != f).cloned().collect();
                let members = shuffled(&members, &mut rng);
                let n_val = (cfg.val_fraction * members.len() as f64).round() as usize;
                let n_val = if members.len() >= 2 { n_val.max(1) } else { 0 };
                val.extend_from_slice(&members[..n_val]);
                train.extend_from_slice(&members[n_val..]);
            }
            test.sort();
            train.sort();
            val.sort();
            FoldSplit { test, train, val }
        })
        .collect()
}
