//! Morphing self-supervision objective: masked reconstruction, perceptual
//! distance in a frozen comparator, and regularisers on the transform.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorphError, Result};
use crate::morphnet::{Encoder, Init, Module, MorphNet, NetConfig, Trunk};
use crate::tensor::{forward_diff, Parameter, Tensor};
use crate::warp::{apply_deformation, warp_mask};

/// Number of encoder blocks mirrored by the comparator.
pub const COMPARATOR_BLOCKS: usize = 3;

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 100.0,
            lambda3: 10.0,
            lambda4: 0.1,
            lambda5: 1e6,
            lambda6: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(MorphError::Config(format!("loss weights must be finite and non-negative: {all:?}")))
        }
    }
}

/// EMA copy of the first encoder blocks, used as a fixed feature extractor.
#[derive(Debug, Clone)]
pub struct Comparator {
    pub trunk: Trunk,
    pub momentum: f64,
}

impl Comparator {
    /// Comparator initialised to the current encoder prefix.
    pub fn new(config: &NetConfig, encoder: &Encoder, momentum: f64) -> Result<Self> {
        let n = COMPARATOR_BLOCKS.min(config.n_encoder_blocks);
        let mut trunk = Trunk::new(&Init::new(0), "comparator", config, n)?;
        trunk.set_trainable(false);
        let mut c = Self { trunk, momentum };
        c.ema_update(encoder, 0.0)?;
        Ok(c)
    }

    /// Outputs of the mirrored blocks.
    pub fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.trunk.forward_taps(x)?.1)
    }

    /// `w <- m * w + (1 - m) * w_enc` over the mirrored prefix.
    pub fn ema_update(&mut self, encoder: &Encoder, m: f64) -> Result<()> {
        if !(0.0..1.0).contains(&m) {
            return Err(MorphError::InvalidArgument("ema_update", format!("momentum {m} outside [0, 1)")));
        }
        let mut source: Vec<Parameter> = Vec::new();
        encoder.trunk.visit(&mut |p| source.push(p.clone()));
        let mut idx = 0;
        let mut err = None;
        self.trunk.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let Some(src) = source.get(idx) else {
                err = Some(MorphError::InvalidArgument("ema_update", "encoder has fewer parameters".into()));
                return;
            };
            idx += 1;
            if src.shape() != p.shape() {
                err = Some(shape_err("ema_update", p.name(), format!("{:?}", p.shape()), format!("{:?}", src.shape())));
                return;
            }
            let mixed = p.data().iter().zip(src.data()).map(|(w, e)| m * w + (1.0 - m) * e).collect();
            p.set_data(mixed).expect("same length");
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Update with the stored momentum.
    pub fn update(&mut self, encoder: &Encoder) -> Result<()> {
        self.ema_update(encoder, self.momentum)
    }
}

impl Module for Comparator {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.trunk.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.trunk.visit_mut(f);
    }
}

/// The two reconstruction terms.
#[derive(Debug, Clone)]
pub struct MseTerms {
    /// Deformation fit of the masked warped source.
    pub deformation: Tensor,
    /// Additive-map fit of the remaining residual.
    pub additive: Tensor,
}

impl MseTerms {
    pub fn total(&self) -> Result<Tensor> {
        self.deformation.add(&self.additive)
    }
}

fn same_shape(op: &'static str, reference: &Tensor, others: &[&Tensor]) -> Result<()> {
    let s = &reference.shape()[1..];
    for t in others {
        if t.ndim() != reference.ndim() || &t.shape()[1..] != s {
            return Err(shape_err(op, "spatial", format!("{s:?}"), format!("{:?}", t.shape())));
        }
    }
    Ok(())
}

fn scaled_sq_distance(a: &Tensor, b: &Tensor, weight: f64) -> Result<Tensor> {
    let n = a.numel() as f64;
    Ok(a.sub(b)?.square().sum().scale(weight / n))
}

/// Masked two-term reconstruction loss. The deformation only receives
/// gradient from the first term, the additive map only from the second.
pub fn masked_mse_terms(
    i_tk: &Tensor,
    i_t: &Tensor,
    d: &Tensor,
    a: &Tensor,
    r_t: &Tensor,
    r_tk: &Tensor,
    w: &LossWeights,
) -> Result<MseTerms> {
    masked_mse_terms_anchored(i_tk, i_t, d, a, r_t, r_tk, w, None)
}

/// [`masked_mse_terms`] with the gradient-free quantities of the second
/// term (the remaining residual and its mask) computed from `anchor`
/// instead of `d`. With `anchor = None` both coincide. A fixed anchor turns
/// the loss into the surrogate whose exact derivative is the gradient used
/// for training, which is what finite-difference checks must compare with.
#[allow(clippy::too_many_arguments)]
pub fn masked_mse_terms_anchored(
    i_tk: &Tensor,
    i_t: &Tensor,
    d: &Tensor,
    a: &Tensor,
    r_t: &Tensor,
    r_tk: &Tensor,
    w: &LossWeights,
    anchor: Option<&Tensor>,
) -> Result<MseTerms> {
    same_shape("masked_mse_loss", i_t, &[i_tk, d, a, r_t, r_tk])?;
    let target = i_tk.mul(r_tk)?;
    let mask = warp_mask(r_t, d)?;
    let warped = apply_deformation(i_t, d)?.mul(&mask)?;
    let deformation = scaled_sq_distance(&target, &warped, w.lambda1)?;
    let (fixed_warped, fixed_mask) = match anchor {
        None => (warped.detach(), mask.detach()),
        Some(d0) => {
            let m0 = warp_mask(r_t, &d0.detach())?;
            (apply_deformation(i_t, &d0.detach())?.mul(&m0)?, m0)
        }
    };
    let residual = target.sub(&fixed_warped)?;
    let additive = scaled_sq_distance(&residual, &a.mul(&fixed_mask)?, w.lambda2)?;
    Ok(MseTerms { deformation, additive })
}

pub fn masked_mse_loss(
    i_tk: &Tensor,
    i_t: &Tensor,
    d: &Tensor,
    a: &Tensor,
    r_t: &Tensor,
    r_tk: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    masked_mse_terms(i_tk, i_t, d, a, r_t, r_tk, w)?.total()
}

/// Mean over comparator taps of the per-element squared feature distance.
pub fn perceptual_loss(target: &Tensor, reconstruction: &Tensor, comparator: &Comparator) -> Result<Tensor> {
    let ft = comparator.taps(&target.detach())?;
    let fr = comparator.taps(reconstruction)?;
    let mut acc: Option<Tensor> = None;
    for (a, b) in ft.iter().zip(&fr) {
        let term = scaled_sq_distance(a, b, 1.0)?;
        acc = Some(match acc {
            Some(s) => s.add(&term)?,
            None => term,
        });
    }
    let n = ft.len();
    acc.map(|s| s.scale(1.0 / n as f64)).ok_or(MorphError::Empty("perceptual_loss"))
}

/// Sum of squared forward differences of `D` over all axes and channels.
pub fn smoothness_loss(d: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for axis in 1..d.ndim() {
        let s = forward_diff(d, axis)?.square().sum();
        acc = Some(match acc {
            Some(a) => a.add(&s)?,
            None => s,
        });
    }
    acc.ok_or(MorphError::Empty("smoothness_loss"))
}

/// Squared hinge on `1 + dD_i/dx_i`, summed over voxels and axes.
pub fn folding_loss(d: &Tensor) -> Result<Tensor> {
    if d.ndim() != 4 || d.shape()[0] != 3 {
        return Err(shape_err("folding_loss", 0, 3, format!("{:?}", d.shape())));
    }
    let mut acc: Option<Tensor> = None;
    for i in 0..3 {
        let di = forward_diff(&d.narrow(i, 1)?, i + 1)?;
        let s = di.add_scalar(1.0).neg().relu().square().sum();
        acc = Some(match acc {
            Some(a) => a.add(&s)?,
            None => s,
        });
    }
    Ok(acc.expect("three axes"))
}

/// Plain L1 sum of the additive map.
pub fn additive_sparsity_loss(a: &Tensor) -> Result<Tensor> {
    a.l1norm()
}

/// One training pair: source and target volumes with their ROI masks.
#[derive(Debug, Clone)]
pub struct SslPair {
    pub i_t: Tensor,
    pub i_tk: Tensor,
    pub r_t: Tensor,
    pub r_tk: Tensor,
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone)]
pub struct SslLoss {
    pub total: Tensor,
    pub mse: MseTerms,
    pub perceptual: Tensor,
    pub smoothness: Tensor,
    pub folding: Tensor,
    pub additive: Tensor,
}

/// Plain values of every logged term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SslTerms {
    pub total: f64,
    pub mse: f64,
    pub mse_deformation: f64,
    pub mse_additive: f64,
    pub perceptual: f64,
    pub smoothness: f64,
    pub folding: f64,
    pub additive: f64,
}

impl SslLoss {
    pub fn terms(&self) -> SslTerms {
        SslTerms {
            total: self.total.item(),
            mse: self.mse.deformation.item() + self.mse.additive.item(),
            mse_deformation: self.mse.deformation.item(),
            mse_additive: self.mse.additive.item(),
            perceptual: self.perceptual.item(),
            smoothness: self.smoothness.item(),
            folding: self.folding.item(),
            additive: self.additive.item(),
        }
    }
}

/// `L_mse + l3 L_prc + l4 L_smt + l5 L_fld + l6 L_add` for one pair.
pub fn total_ssl_loss(pair: &SslPair, net: &MorphNet, comparator: &Comparator, w: &LossWeights) -> Result<SslLoss> {
    total_ssl_loss_anchored(pair, net, comparator, w, None)
}

/// [`total_ssl_loss`] with the reconstruction residual anchored at a fixed
/// deformation (see [`masked_mse_terms_anchored`]).
pub fn total_ssl_loss_anchored(
    pair: &SslPair,
    net: &MorphNet,
    comparator: &Comparator,
    w: &LossWeights,
    anchor: Option<&Tensor>,
) -> Result<SslLoss> {
    let pred = net.predict(&pair.i_t, &pair.i_tk)?;
    let (d, a) = (&pred.transform.deformation, &pred.transform.additive);
    let mse = masked_mse_terms_anchored(&pair.i_tk, &pair.i_t, d, a, &pair.r_t, &pair.r_tk, w, anchor)?;
    let mask = warp_mask(&pair.r_t, d)?;
    let reconstruction = apply_deformation(&pair.i_t, d)?.add(a)?.mul(&mask)?;
    let target = pair.i_tk.mul(&pair.r_tk)?;
    let perceptual = perceptual_loss(&target, &reconstruction, comparator)?;
    let smoothness = smoothness_loss(d)?;
    let folding = folding_loss(d)?;
    let additive = additive_sparsity_loss(a)?;
    let total = mse
        .total()?
        .add(&perceptual.scale(w.lambda3))?
        .add(&smoothness.scale(w.lambda4))?
        .add(&folding.scale(w.lambda5))?
        .add(&additive.scale(w.lambda6))?;
    if !total.all_finite() {
        return Err(MorphError::NonFinite("total_ssl_loss"));
    }
    Ok(SslLoss {
        total,
        mse,
        perceptual,
        smoothness,
        folding,
        additive,
    })
}

#[cfg(test)]
mod tests;
