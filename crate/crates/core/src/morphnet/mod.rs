//! Encoder, the two transform decoders and the coupling between feature
//! displacements and predicted morphing transforms.
//!
//! The decoders only see the direction of a feature displacement `V`; the
//! magnitude of the predicted field is pinned to `alpha * ||V||`.

mod decoder;
mod encoder;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{MorphError, Result};
use crate::tensor::{concat, Parameter, Tensor};
use crate::warp::{morph, MorphTransform};

pub use decoder::{Decoder, DecoderBlock, DecoderScales, Head, HeadScales};
pub use encoder::{Encoder, Trunk};
pub use layers::{module_grad_check, Conv, EncoderBlock, Init, Module, Norm, S3DConv};

/// Architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Volume size `(H, W, D)`.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    pub n_encoder_blocks: usize,
    /// One stride per downsample between consecutive encoder blocks.
    pub downsample_strides: Vec<[usize; 3]>,
    /// Channels of each feature subspace.
    pub feature_channels: usize,
    pub pathway_hidden: usize,
    pub decoder_channels: usize,
    /// Initial effective value of the direction gains.
    pub gamma_init: f64,
    /// Initial effective value of the magnitude gains `[deformation, additive]`.
    pub alpha_init: [f64; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_shape: [48, 48, 8],
            stem_channels: 4,
            n_encoder_blocks: 5,
            downsample_strides: vec![[2, 2, 1], [2, 2, 1], [2, 2, 1], [2, 2, 2]],
            feature_channels: 16,
            pathway_hidden: 32,
            decoder_channels: 128,
            gamma_init: 1.0,
            alpha_init: [1.0, 1.0],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MorphError::Config(msg));
        if self.n_encoder_blocks == 0 || self.downsample_strides.len() + 1 != self.n_encoder_blocks {
            return bad(format!(
                "{} encoder blocks need {} downsample strides, got {}",
                self.n_encoder_blocks,
                self.n_encoder_blocks.saturating_sub(1),
                self.downsample_strides.len()
            ));
        }
        if self.stem_channels == 0 || self.stem_channels % 4 != 0 {
            return bad(format!("stem_channels {} must be a positive multiple of 4", self.stem_channels));
        }
        if self.feature_channels == 0 || self.pathway_hidden == 0 {
            return bad("feature_channels and pathway_hidden must be positive".into());
        }
        let mut total = [1usize; 3];
        for s in &self.downsample_strides {
            for a in 0..3 {
                if s[a] == 0 {
                    return bad("downsample strides must be positive".into());
                }
                total[a] *= s[a];
            }
        }
        for a in 0..3 {
            if self.input_shape[a] == 0 || self.input_shape[a] % total[a] != 0 {
                return bad(format!(
                    "input_shape {:?} is not divisible by the total stride {:?}",
                    self.input_shape, total
                ));
            }
        }
        let blocks = self.downsample_strides.len();
        let needed = 16usize << blocks.saturating_sub(1);
        if blocks > 0 && self.decoder_channels % needed != 0 {
            return bad(format!("decoder_channels {} must be a multiple of {needed}", self.decoder_channels));
        }
        if !(self.gamma_init > 0.0 && self.alpha_init.iter().all(|&a| a > 0.0)) {
            return bad("decoder scale initial values must be positive".into());
        }
        Ok(())
    }

    /// Channels leaving the last encoder block.
    pub fn trunk_channels(&self) -> usize {
        self.stem_channels << self.n_encoder_blocks
    }

    /// Spatial size of the feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        let mut s = self.input_shape;
        for st in &self.downsample_strides {
            for a in 0..3 {
                s[a] = s[a].div_ceil(st[a]);
            }
        }
        s
    }
}

/// Encoder output split into deformation and additive subspaces.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub deformation: Tensor,
    pub additive: Tensor,
}

impl FeatureMap {
    /// Classifier input: both subspaces stacked along channels.
    pub fn concat(&self) -> Result<Tensor> {
        concat(&[&self.deformation, &self.additive])
    }

    pub fn detach(&self) -> FeatureMap {
        FeatureMap {
            deformation: self.deformation.detach(),
            additive: self.additive.detach(),
        }
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        Ok(FeatureMap {
            deformation: self.deformation.sub(&other.deformation)?,
            additive: self.additive.sub(&other.additive)?,
        })
    }
}

/// Output of [`MorphNet::predict`].
#[derive(Debug, Clone)]
pub struct Prediction {
    pub transform: MorphTransform,
    pub features_t: FeatureMap,
    pub features_tk: FeatureMap,
}

/// Encoder, both decoders and their scale parameters.
#[derive(Debug, Clone)]
pub struct MorphNet {
    pub config: NetConfig,
    pub encoder: Encoder,
    pub decoder_d: Decoder,
    pub decoder_a: Decoder,
    pub scales: DecoderScales,
}

impl MorphNet {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        Ok(Self {
            encoder: Encoder::new(&init, "encoder", config)?,
            decoder_d: Decoder::new(&init, "decoder_d", config, Head::Deformation)?,
            decoder_a: Decoder::new(&init, "decoder_a", config, Head::Additive)?,
            scales: DecoderScales::new("scales", config.gamma_init, config.alpha_init),
            config: config.clone(),
        })
    }

    pub fn encode(&self, vol: &Tensor) -> Result<FeatureMap> {
        let [h, w, d] = self.config.input_shape;
        if vol.shape() != [1, h, w, d] {
            return Err(crate::error::shape_err(
                "encoder_forward",
                "input",
                format!("{:?}", [1, h, w, d]),
                format!("{:?}", vol.shape()),
            ));
        }
        self.encoder.forward(vol)
    }

    /// Decodes a feature displacement into a morphing transform.
    pub fn decode(&self, v: &FeatureMap) -> Result<MorphTransform> {
        Ok(MorphTransform {
            deformation: self.decoder_d.forward(&v.deformation, &self.scales.deformation)?,
            additive: self.decoder_a.forward(&v.additive, &self.scales.additive)?,
        })
    }

    /// Transform morphing `i_t` toward `i_tk`, with both feature maps.
    pub fn predict(&self, i_t: &Tensor, i_tk: &Tensor) -> Result<Prediction> {
        if i_t.shape() != i_tk.shape() {
            return Err(crate::error::shape_err(
                "morph_predict",
                "input",
                format!("{:?}", i_t.shape()),
                format!("{:?}", i_tk.shape()),
            ));
        }
        let features_t = self.encode(i_t)?;
        let features_tk = self.encode(i_tk)?;
        let transform = self.decode(&features_tk.sub(&features_t)?)?;
        Ok(Prediction {
            transform,
            features_t,
            features_tk,
        })
    }

    /// Volume obtained by decoding `f_rho - f_t` and morphing `i_t` with it.
    pub fn generate_intermediate(&self, i_t: &Tensor, f_t: &FeatureMap, f_rho: &FeatureMap) -> Result<Tensor> {
        let t = self.decode(&f_rho.sub(f_t)?)?;
        morph(i_t, &t.deformation, &t.additive)
    }
}

impl Module for MorphNet {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.decoder_d.visit(f);
        self.decoder_a.visit(f);
        self.scales.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.decoder_d.visit_mut(f);
        self.decoder_a.visit_mut(f);
        self.scales.visit_mut(f);
    }
}

/// `(1 - rho) * f_t + rho * f_tk` on both subspaces.
pub fn interpolate_features(f_t: &FeatureMap, f_tk: &FeatureMap, rho: f64) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(MorphError::InvalidArgument("interpolate_features", format!("rho {rho} outside [0, 1]")));
    }
    let blend = |a: &Tensor, b: &Tensor| a.scale(1.0 - rho).add(&b.scale(rho));
    Ok(FeatureMap {
        deformation: blend(&f_t.deformation, &f_tk.deformation)?,
        additive: blend(&f_t.additive, &f_tk.additive)?,
    })
}
