//! Time-to-conversion head: a positive saliency map whose pooled value and
//! spatial entropy parameterise a sigmoidal CDF over normalised time.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorphError, Result};
use crate::morphnet::{Conv, Init, Module};
use crate::tensor::{ConvSpec, Parameter, Tensor};

/// Prediction horizon in months; times are divided by it.
pub const HORIZON_MONTHS: f64 = 18.0;
/// Added to `a` in the CDF denominator.
pub const SLOPE_OFFSET: f64 = 0.05;
/// BCE inputs are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;
pub const SLOPE_PENALTY: f64 = 0.1;
pub const OUTSIDE_PENALTY: f64 = 0.1;

/// Scalar values of the CDF parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfParams {
    pub a: f64,
    pub b: f64,
}

impl CdfParams {
    pub fn cdf(&self, t: f64) -> f64 {
        sigmoidal_cdf(*self, t)
    }

    pub fn risk(&self) -> f64 {
        risk_score(*self)
    }
}

/// `P(T* <= t) = 1 / (1 + exp(-(t - b) / (a + 0.05)))`.
pub fn sigmoidal_cdf(p: CdfParams, t: f64) -> f64 {
    crate::tensor::sigmoid_f64((t - p.b) / (p.a + SLOPE_OFFSET))
}

/// Differentiable [`sigmoidal_cdf`] for one-element `a` and `b`.
pub fn sigmoidal_cdf_tensor(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    let z = b.neg().add_scalar(t).mul(&a.add_scalar(SLOPE_OFFSET).recip())?;
    Ok(z.sigmoid())
}

/// `r = 2 / (1 + exp(b / (a + 0.05)))`, decreasing in `b`.
pub fn risk_score(p: CdfParams) -> f64 {
    2.0 / (1.0 + (p.b / (p.a + SLOPE_OFFSET)).exp())
}

/// Three-level stratification of the risk score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    Moderate,
    High,
}

impl RiskGroup {
    pub const ALL: [RiskGroup; 3] = [RiskGroup::Low, RiskGroup::Moderate, RiskGroup::High];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::Moderate => "moderate",
            RiskGroup::High => "high",
        }
    }
}

impl fmt::Display for RiskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `[0, 0.33]` low, `(0.33, 0.67]` moderate, `(0.67, 1]` high.
pub fn risk_group(r: f64) -> RiskGroup {
    if r <= 0.33 {
        RiskGroup::Low
    } else if r <= 0.67 {
        RiskGroup::Moderate
    } else {
        RiskGroup::High
    }
}

/// Interval-censored conversion label of one scan, in months after the scan.
///
/// `t_minus` is the last time the eye was seen unconverted and `t_plus` the
/// first time it was seen converted (`+inf` if never). A scan that is itself
/// a conversion visit has `t_plus = 0` and a negative `t_minus` (the offset
/// of the previous visit, or `-inf` for a first visit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionRecord {
    #[serde(with = "crate::ttc_head::float_or_inf")]
    pub t_minus: f64,
    #[serde(with = "crate::ttc_head::float_or_inf")]
    pub t_plus: f64,
}

/// Which of the three supervised cases a record falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordCase {
    /// Conversion observed within the horizon.
    Within,
    /// Still unconverted after the horizon.
    Beyond,
    /// The scan is itself a conversion visit.
    Converted,
}

impl ConversionRecord {
    pub fn new(t_minus: f64, t_plus: f64) -> Result<Self> {
        if t_minus.is_nan() || t_plus.is_nan() || !(t_minus < t_plus) || t_plus < 0.0 {
            return Err(MorphError::Data(format!("invalid conversion interval ({t_minus}, {t_plus})")));
        }
        Ok(Self { t_minus, t_plus })
    }

    /// Bounds divided by the horizon.
    pub fn normalized(&self) -> (f64, f64) {
        (self.t_minus / HORIZON_MONTHS, self.t_plus / HORIZON_MONTHS)
    }

    /// Supervised case, or an error for records straddling the horizon
    /// (`t_minus <= 1 < t_plus` in normalised time), which carry no usable
    /// label.
    pub fn case(&self) -> Result<RecordCase> {
        let (lo, hi) = self.normalized();
        if hi == 0.0 {
            Ok(RecordCase::Converted)
        } else if (0.0..=1.0).contains(&lo) && hi <= 1.0 {
            Ok(RecordCase::Within)
        } else if lo > 1.0 {
            Ok(RecordCase::Beyond)
        } else {
            Err(MorphError::Data(format!(
                "conversion interval ({}, {}) straddles the {HORIZON_MONTHS}-month horizon",
                self.t_minus, self.t_plus
            )))
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.case().is_ok()
    }
}

/// Serde helper storing infinities as the strings `"inf"` / `"-inf"`.
pub(crate) mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("expected a number, \"inf\" or \"-inf\", got {other:?}"))),
            },
        }
    }
}

/// Positive gains `w_b` (pooled saliency to `1/b`) and `w_a` (entropy to `a`).
#[derive(Debug, Clone)]
pub struct ClassifierScales {
    pub w_b: Parameter,
    pub w_a: Parameter,
}

/// Outputs of [`Classifier::forward`].
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    /// Saliency map `M > 0`, shape `[1,h,w,d]`.
    pub saliency: Tensor,
    /// `M / sum(M)`.
    pub normalized: Tensor,
    pub entropy: Tensor,
    pub a: Tensor,
    pub b: Tensor,
}

impl ClassifierOutput {
    pub fn params(&self) -> CdfParams {
        CdfParams {
            a: self.a.item(),
            b: self.b.item(),
        }
    }
}

/// Three pointwise convolutions with ELU between and softplus at the end.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc0: Conv,
    pub fc1: Conv,
    pub fc2: Conv,
    pub scales: ClassifierScales,
}

impl Classifier {
    /// Head over features with `feature_channels` per subspace.
    pub fn new(init: &Init, name: &str, feature_channels: usize) -> Result<Self> {
        if feature_channels < 2 {
            return Err(MorphError::Config(format!("classifier needs at least 2 feature channels, got {feature_channels}")));
        }
        let spec = ConvSpec::default();
        let c = feature_channels;
        Ok(Self {
            fc0: Conv::new(init, &format!("{name}.fc0"), 2 * c, c, [1, 1, 1], spec, true),
            fc1: Conv::new(init, &format!("{name}.fc1"), c, c / 2, [1, 1, 1], spec, true),
            fc2: Conv::new(init, &format!("{name}.fc2"), c / 2, 1, [1, 1, 1], spec, true),
            scales: ClassifierScales {
                w_b: Parameter::positive_scalar(format!("{name}.w_b"), 1.0),
                w_a: Parameter::positive_scalar(format!("{name}.w_a"), 1.0),
            },
        })
    }

    pub fn in_channels(&self) -> usize {
        self.fc0.weight.shape()[1]
    }

    pub fn forward(&self, features: &Tensor) -> Result<ClassifierOutput> {
        if features.ndim() != 4 || features.shape()[0] != self.in_channels() {
            return Err(shape_err("classifier_forward", "channels", self.in_channels(), format!("{:?}", features.shape())));
        }
        if !features.all_finite() {
            return Err(MorphError::NonFinite("classifier_forward"));
        }
        let h = self.fc0.forward(features)?.elu();
        let h = self.fc1.forward(&h)?.elu();
        let saliency = self.fc2.forward(&h)?.softplus();
        saliency_head(saliency, &self.scales)
    }
}

/// `b = 1 / (w_b * GAP(M))`, `a = sigmoid(w_a * H(M / sum M))`.
pub fn saliency_head(saliency: Tensor, scales: &ClassifierScales) -> Result<ClassifierOutput> {
    if saliency.data().iter().any(|&v| !(v > 0.0)) {
        return Err(MorphError::InvalidArgument("saliency_head", "saliency must be strictly positive".into()));
    }
    let normalized = saliency.mul_scalar(&saliency.sum().recip())?;
    let entropy = normalized.mul(&normalized.ln())?.sum().neg();
    let b = scales.w_b.value().mul(&saliency.mean()?)?.recip();
    let a = scales.w_a.value().mul(&entropy)?.sigmoid();
    Ok(ClassifierOutput {
        saliency,
        normalized,
        entropy,
        a,
        b,
    })
}

impl Module for Classifier {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.fc0.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
        f(&self.scales.w_b);
        f(&self.scales.w_a);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fc0.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
        f(&mut self.scales.w_b);
        f(&mut self.scales.w_a);
    }
}

fn bce(p: &Tensor, positive: bool) -> Tensor {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if positive {
        p.ln().neg()
    } else {
        p.neg().add_scalar(1.0).ln().neg()
    }
}

/// Average BCE at the two anchor times of the record's case.
pub fn classification_loss(a: &Tensor, b: &Tensor, record: &ConversionRecord) -> Result<Tensor> {
    let (lo, hi) = record.normalized();
    let anchors = match record.case()? {
        RecordCase::Within => [(hi, true), (lo, false)],
        RecordCase::Beyond => [(0.0, false), (1.0, false)],
        RecordCase::Converted => [(0.0, true), (1.0, true)],
    };
    let first = bce(&sigmoidal_cdf_tensor(a, b, anchors[0].0)?, anchors[0].1);
    let second = bce(&sigmoidal_cdf_tensor(a, b, anchors[1].0)?, anchors[1].1);
    Ok(first.scale(0.5).add(&second.scale(0.5))?)
}

/// Terms of the head's training objective.
#[derive(Debug, Clone)]
pub struct TtcLoss {
    pub total: Tensor,
    pub classification: Tensor,
    pub slope: Tensor,
    pub outside: Tensor,
}

/// `L_cls + 0.1 a^2 + 0.1 ||M (1 - R)||_1` with `R` the ROI on `M`'s grid.
pub fn ttc_total_loss(out: &ClassifierOutput, record: &ConversionRecord, roi: &Tensor) -> Result<TtcLoss> {
    if roi.shape() != out.saliency.shape() {
        return Err(shape_err(
            "ttc_total_loss",
            "roi",
            format!("{:?}", out.saliency.shape()),
            format!("{:?}", roi.shape()),
        ));
    }
    let classification = classification_loss(&out.a, &out.b, record)?;
    let slope = out.a.square().scale(SLOPE_PENALTY);
    let background = roi.scale(-1.0).add_scalar(1.0);
    let outside = out.saliency.mul(&background)?.l1norm()?.scale(OUTSIDE_PENALTY);
    let total = classification.add(&slope)?.add(&outside)?;
    Ok(TtcLoss {
        total,
        classification,
        slope,
        outside,
    })
}

#[cfg(test)]
mod tests;
