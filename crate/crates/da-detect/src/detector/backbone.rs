//! Compact residual backbone: a stride-2 stem plus three stages of residual
//! blocks (widths 32/64/128 by default), total stride 16. Each residual
//! block of a selected stage carries an SE adaptor bank after its second
//! convolution, before the residual addition.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{he_normal, join, zeros, Params};
use crate::se_bank::{SEBank, SEBankBind};
use crate::tape::{Tape, Value};
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Total spatial downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 16;

/// Architecture description; `se_placement` holds 1-based stage indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub se_placement: BTreeSet<usize>,
    pub se_bank_size: usize,
    pub se_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            blocks_per_stage: 2,
            se_placement: BTreeSet::new(),
            se_bank_size: 2,
            se_reduction: 16,
        }
    }
}

pub(crate) struct ConvLayer {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: he_normal(&[cout, cin, k, k], cin * k * k, rng),
            b: zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub(crate) fn bind(&self, t: &mut Tape) -> ConvBind {
        ConvBind {
            w: t.leaf(self.w.clone()),
            b: t.leaf(self.b.clone()),
        }
    }

    pub(crate) fn forward_on(&self, t: &mut Tape, bind: &ConvBind, x: Value) -> Value {
        ops::conv2d(t, x, bind.w, bind.b, self.stride, self.pad)
    }
}

impl Params for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Clone, Copy)]
pub(crate) struct ConvBind {
    pub w: Value,
    pub b: Value,
}

struct ResidualBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
    bank: Option<SEBank>,
}

impl ResidualBlock {
    fn new(cin: usize, cout: usize, stride: usize, bank: Option<SEBank>, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvLayer::new(cin, cout, 1, stride, 0, rng))
        } else {
            None
        };
        Self {
            conv1: ConvLayer::new(cin, cout, 3, stride, 1, rng),
            conv2: ConvLayer::new(cout, cout, 3, 1, 1, rng),
            shortcut,
            bank,
        }
    }

    fn bind(&self, t: &mut Tape) -> BlockBind {
        BlockBind {
            conv1: self.conv1.bind(t),
            conv2: self.conv2.bind(t),
            shortcut: self.shortcut.as_ref().map(|c| c.bind(t)),
            bank: self.bank.as_ref().map(|b| b.bind(t)),
        }
    }

    fn forward_on(&self, t: &mut Tape, bind: &BlockBind, x: Value) -> Value {
        let h = self.conv1.forward_on(t, &bind.conv1, x);
        let h = ops::relu(t, h);
        let mut h = self.conv2.forward_on(t, &bind.conv2, h);
        if let (Some(bank), Some(bb)) = (&self.bank, &bind.bank) {
            h = bank.forward_on(t, bb, h);
        }
        let sc = match (&self.shortcut, &bind.shortcut) {
            (Some(conv), Some(cb)) => conv.forward_on(t, cb, x),
            _ => x,
        };
        let sum = ops::add(t, h, sc);
        ops::relu(t, sum)
    }
}

impl Params for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
        if let Some(b) = &self.bank {
            b.visit(&join(prefix, "bank"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
        if let Some(b) = &mut self.bank {
            b.visit_mut(&join(prefix, "bank"), f);
        }
    }
}

struct BlockBind {
    conv1: ConvBind,
    conv2: ConvBind,
    shortcut: Option<ConvBind>,
    bank: Option<SEBankBind>,
}

/// The feature extractor.
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvLayer,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.blocks_per_stage == 0 {
            return Err(Error::invalid("backbone needs at least one block per stage"));
        }
        for &s in &config.se_placement {
            if s == 0 || s > config.widths.len() {
                return Err(Error::invalid(format!(
                    "SE placement stage {s} outside 1..={}",
                    config.widths.len()
                )));
            }
        }
        let stem = ConvLayer::new(3, config.widths[0], 3, 2, 1, rng);
        let mut stages = Vec::new();
        let mut cin = config.widths[0];
        for (si, &width) in config.widths.iter().enumerate() {
            let stage_no = si + 1;
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage {
                let stride = if bi == 0 { 2 } else { 1 };
                let bank = if config.se_placement.contains(&stage_no) {
                    Some(SEBank::new(
                        width,
                        config.se_bank_size,
                        config.se_reduction,
                        rng,
                    )?)
                } else {
                    None
                };
                blocks.push(ResidualBlock::new(cin, width, stride, bank, rng));
                cin = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            config,
            stem,
            stages,
        })
    }

    pub fn out_channels(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    pub fn bind(&self, t: &mut Tape) -> BackboneBind {
        BackboneBind {
            stem: self.stem.bind(t),
            stages: self
                .stages
                .iter()
                .map(|blocks| blocks.iter().map(|b| b.bind(t)).collect())
                .collect(),
        }
    }

    /// Forward on a batched image tensor `[N, 3, H, W]`; H and W must be
    /// divisible by [`BACKBONE_STRIDE`].
    pub fn forward_on(&self, t: &mut Tape, bind: &BackboneBind, x: Value) -> Value {
        let h = self.stem.forward_on(t, &bind.stem, x);
        let mut h = ops::relu(t, h);
        for (blocks, binds) in self.stages.iter().zip(&bind.stages) {
            for (block, bb) in blocks.iter().zip(binds) {
                h = block.forward_on(t, bb, h);
            }
        }
        h
    }
}

impl Params for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (si, blocks) in self.stages.iter().enumerate() {
            for (bi, block) in blocks.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.block{bi}", si + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (si, blocks) in self.stages.iter_mut().enumerate() {
            for (bi, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.block{bi}", si + 1)), f);
            }
        }
    }
}

pub struct BackboneBind {
    stem: ConvBind,
    stages: Vec<Vec<BlockBind>>,
}

/// Single-image forward pass (`[3, H, W]` → final-stage feature map).
pub fn backbone_forward(image: &Array3<f64>, backbone: &Backbone) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid("backbone_forward: expected 3 channels"));
    }
    if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
        return Err(Error::invalid(format!(
            "backbone_forward: {h}x{w} not divisible by stride {BACKBONE_STRIDE}"
        )));
    }
    let mut t = Tape::new();
    let x = t.leaf(
        image
            .clone()
            .into_shape_with_order(IxDyn(&[1, 3, h, w]))
            .unwrap(),
    );
    let bind = backbone.bind(&mut t);
    let y = backbone.forward_on(&mut t, &bind, x);
    let v = t.value(y);
    let s = v.shape().to_vec();
    Ok(Array3::from_shape_fn((s[1], s[2], s[3]), |(c, y, x)| {
        v[[0, c, y, x]]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn output_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();
        let img = Array3::from_elem((3, 64, 96), 0.1);
        let feat = backbone_forward(&img, &bb).unwrap();
        assert_eq!(feat.dim(), (128, 64 / 16, 96 / 16));
    }

    #[test]
    fn rejects_non_divisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();
        let img = Array3::from_elem((3, 60, 64), 0.1);
        assert!(backbone_forward(&img, &bb).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();
        let img = Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0));
        let a = backbone_forward(&img, &bb).unwrap();
        let b = backbone_forward(&img, &bb).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn zero_image_zero_weights_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bb = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();
        // zero every parameter: with zero biases the output must be zero
        bb.visit_mut("", &mut |_, v| v.fill(0.0));
        let img = Array3::zeros((3, 32, 32));
        let feat = backbone_forward(&img, &bb).unwrap();
        assert!(feat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_placement_adds_parameters_only_where_asked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plain = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg3 = BackboneConfig {
            se_placement: BTreeSet::from([3]),
            ..Default::default()
        };
        let staged = Backbone::new(cfg3, &mut rng).unwrap();

        assert!(staged.param_count() > plain.param_count());
        let names = staged.param_names();
        assert!(names.iter().any(|n| n.contains("stage3") && n.contains("bank")));
        assert!(!names.iter().any(|n| n.contains("stage1") && n.contains("bank")));
        assert!(!names.iter().any(|n| n.contains("stage2") && n.contains("bank")));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let all = Backbone::new(
            BackboneConfig {
                se_placement: BTreeSet::from([1, 2, 3]),
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let names = all.param_names();
        for stage in 1..=3 {
            assert!(names
                .iter()
                .any(|n| n.contains(&format!("stage{stage}")) && n.contains("bank")));
        }
    }

    #[test]
    fn empty_placement_matches_plain_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plain = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let injected_cfg =
            crate::se_bank::inject_banks(&BackboneConfig::default(), &BTreeSet::new()).unwrap();
        let injected = Backbone::new(injected_cfg, &mut rng).unwrap();
        assert_eq!(plain.param_count(), injected.param_count());
    }
}
