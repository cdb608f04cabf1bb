use super::layers::{Downsample, EncoderBlock, Init, Module, Pathway, PlaneConvs};
use super::{FeatureMap, NetConfig};
use crate::error::Result;
use crate::tensor::{Parameter, Tensor};

/// Stem, encoder blocks and the strided downsamples between them.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub stem: PlaneConvs,
    pub blocks: Vec<EncoderBlock>,
    pub downs: Vec<Downsample>,
}

impl Trunk {
    /// The first `n_blocks` blocks of the trunk described by `config`.
    pub fn new(init: &Init, name: &str, config: &NetConfig, n_blocks: usize) -> Result<Self> {
        let stem = PlaneConvs::new(init, &format!("{name}.stem"), 1, config.stem_channels)?;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut downs = Vec::new();
        let mut c = config.stem_channels;
        for i in 0..n_blocks {
            blocks.push(EncoderBlock::new(init, &format!("{name}.block{i}"), c)?);
            c *= 2;
            if i + 1 < n_blocks {
                downs.push(Downsample::new(init, &format!("{name}.down{i}"), c, config.downsample_strides[i]));
            }
        }
        Ok(Self { stem, blocks, downs })
    }

    /// Trunk output together with the output of every block.
    pub fn forward_taps(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.stem.forward(x)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            taps.push(h.clone());
            if let Some(down) = self.downs.get(i) {
                h = down.forward(&h)?;
            }
        }
        Ok((h, taps))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taps(x)?.0)
    }
}

impl Module for Trunk {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stem.visit(f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(f);
            if let Some(d) = self.downs.get(i) {
                d.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.visit_mut(f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(f);
            if let Some(d) = self.downs.get_mut(i) {
                d.visit_mut(f);
            }
        }
    }
}

/// Trunk followed by two pointwise pathways producing the two subspaces.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub trunk: Trunk,
    pub path_d: Pathway,
    pub path_a: Pathway,
}

impl Encoder {
    pub fn new(init: &Init, name: &str, config: &NetConfig) -> Result<Self> {
        let c = config.trunk_channels();
        let (h, f) = (config.pathway_hidden, config.feature_channels);
        Ok(Self {
            trunk: Trunk::new(init, &format!("{name}.trunk"), config, config.n_encoder_blocks)?,
            path_d: Pathway::new(init, &format!("{name}.path_d"), c, h, f),
            path_a: Pathway::new(init, &format!("{name}.path_a"), c, h, f),
        })
    }

    pub fn forward(&self, vol: &Tensor) -> Result<FeatureMap> {
        let h = self.trunk.forward(vol)?;
        Ok(FeatureMap {
            deformation: self.path_d.forward(&h)?,
            additive: self.path_a.forward(&h)?,
        })
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.trunk.visit(f);
        self.path_d.visit(f);
        self.path_a.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.trunk.visit_mut(f);
        self.path_d.visit_mut(f);
        self.path_a.visit_mut(f);
    }
}
