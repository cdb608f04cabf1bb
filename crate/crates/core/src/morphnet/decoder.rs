use super::layers::{Conv, Init, Module, Norm, S3DConv};
use super::NetConfig;
use crate::error::{shape_err, Result};
use crate::tensor::{concat, trilinear_resize, ConvSpec, Parameter, Tensor};

/// Norm of `V` below which the decoder returns the zero field.
pub const ZERO_DISPLACEMENT: f64 = 1e-12;

/// Which transform component a decoder predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Deformation,
    Additive,
}

impl Head {
    pub fn channels(self) -> usize {
        match self {
            Head::Deformation => 3,
            Head::Additive => 1,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Head::Deformation => "D",
            Head::Additive => "A",
        }
    }
}

/// Direction gain `gamma` and magnitude gain `alpha` of one decoder.
#[derive(Debug, Clone)]
pub struct HeadScales {
    pub gamma: Parameter,
    pub alpha: Parameter,
}

/// Positive scalars of both decoders.
#[derive(Debug, Clone)]
pub struct DecoderScales {
    pub deformation: HeadScales,
    pub additive: HeadScales,
}

impl DecoderScales {
    pub fn new(name: &str, gamma: f64, alpha: [f64; 2]) -> Self {
        let head = |h: Head, a: f64| HeadScales {
            gamma: Parameter::positive_scalar(format!("{name}.gamma_dir_{}", h.tag()), gamma),
            alpha: Parameter::positive_scalar(format!("{name}.alpha_mag_{}", h.tag()), a),
        };
        Self {
            deformation: head(Head::Deformation, alpha[0]),
            additive: head(Head::Additive, alpha[1]),
        }
    }
}

impl Module for DecoderScales {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for h in [&self.deformation, &self.additive] {
            f(&h.gamma);
            f(&h.alpha);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for h in [&mut self.deformation, &mut self.additive] {
            f(&mut h.gamma);
            f(&mut h.alpha);
        }
    }
}

/// Upsample, grouped 4→1 channel compression, S3DConv, concatenation:
/// `C` channels in, `C/2` out.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub scale: [usize; 3],
    pub norm: Norm,
    pub compress: Conv,
    pub s3d: S3DConv,
}

impl DecoderBlock {
    pub fn new(init: &Init, name: &str, channels: usize, scale: [usize; 3]) -> Result<Self> {
        let q = channels / 4;
        let spec = ConvSpec { stride: [1, 1, 1], groups: q };
        Ok(Self {
            scale,
            norm: Norm::new(init, &format!("{name}.norm"), channels),
            compress: Conv::new(init, &format!("{name}.compress"), channels, q, [3, 3, 3], spec, false),
            s3d: S3DConv::new(init, &format!("{name}.s3d"), q)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let up = trilinear_resize(x, self.scale)?;
        let c = self.compress.forward(&self.norm.pre_activate(&up)?)?;
        let s = self.s3d.forward(&c)?;
        concat(&[&c, &s])
    }
}

impl Module for DecoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.norm.visit(f);
        self.compress.visit(f);
        self.s3d.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm.visit_mut(f);
        self.compress.visit_mut(f);
        self.s3d.visit_mut(f);
    }
}

/// Maps a feature displacement to a full-resolution field whose norm is
/// `alpha * ||V||`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub head: Head,
    pub feature_channels: usize,
    pub lift: Conv,
    pub blocks: Vec<DecoderBlock>,
    pub norm: Norm,
    pub out: Conv,
}

impl Decoder {
    pub fn new(init: &Init, name: &str, config: &NetConfig, head: Head) -> Result<Self> {
        let spec = ConvSpec::default();
        let mut c = config.decoder_channels;
        let lift = Conv::new(init, &format!("{name}.lift"), config.feature_channels, c, [1, 1, 1], spec, true);
        let mut blocks = Vec::new();
        for (i, s) in config.downsample_strides.iter().rev().enumerate() {
            blocks.push(DecoderBlock::new(init, &format!("{name}.block{i}"), c, *s)?);
            c /= 2;
        }
        Ok(Self {
            head,
            feature_channels: config.feature_channels,
            lift,
            blocks,
            norm: Norm::new(init, &format!("{name}.norm"), c),
            out: Conv::new(init, &format!("{name}.out"), c, head.channels(), [1, 1, 1], spec, true),
        })
    }

    fn output_shape(&self, v: &Tensor) -> Vec<usize> {
        let mut s = vec![self.head.channels(), v.shape()[1], v.shape()[2], v.shape()[3]];
        for b in &self.blocks {
            for a in 0..3 {
                s[a + 1] *= b.scale[a];
            }
        }
        s
    }

    /// Unscaled network output for the direction input `gamma * V / ||V||`.
    pub fn raw(&self, direction: &Tensor) -> Result<Tensor> {
        let mut h = self.lift.forward(direction)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.out.forward(&self.norm.pre_activate(&h)?)
    }

    pub fn forward(&self, v: &Tensor, scales: &HeadScales) -> Result<Tensor> {
        if v.ndim() != 4 || v.shape()[0] != self.feature_channels {
            return Err(shape_err(
                "decoder_forward",
                "channels",
                self.feature_channels,
                format!("{:?}", v.shape()),
            ));
        }
        let shape = self.output_shape(v);
        let v_norm = v.l2norm()?;
        if v_norm.item() < ZERO_DISPLACEMENT {
            return Ok(Tensor::zeros(&shape));
        }
        let direction = v.mul_scalar(&scales.gamma.value().mul(&v_norm.recip())?)?;
        let raw = self.raw(&direction)?;
        let raw_norm = raw.l2norm()?;
        if raw_norm.item() == 0.0 {
            log::warn!("decoder {:?}: zero raw output for non-zero input, returning zero field", self.head);
            return Ok(Tensor::zeros(&shape));
        }
        let gain = scales.alpha.value().mul(&v_norm)?.mul(&raw_norm.recip())?;
        raw.mul_scalar(&gain)
    }
}

impl Module for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.lift.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.norm.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.lift.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.norm.visit_mut(f);
        self.out.visit_mut(f);
    }
}
