//! Squeeze-excitation adaptor blocks and the universal SE adaptor bank.
//!
//! An [`SEAdaptor`] squeezes a feature map by global average pooling, runs
//! the pooled descriptor through a bottleneck FC pair (`C → C/r → C`) with
//! ReLU/sigmoid activations, and rescales the channels by the resulting
//! excitation vector. An [`SEBank`] keeps several adaptors and soft-routes
//! them: a single linear projection of the shared pooled descriptor,
//! followed by softmax, weights the per-adaptor excitations into one
//! combined excitation. Banks are injected into backbone stages via
//! [`inject_banks`].

use crate::detector::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{he_normal, join, zeros, Params};
use crate::tape::{Tape, Value};
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

/// One squeeze-excitation adaptor. Weight shapes: `fc1_w: [C/r, C]`,
/// `fc2_w: [C, C/r]`, biases to match.
#[derive(Clone, Debug)]
pub struct SEAdaptor {
    pub channels: usize,
    pub reduction: usize,
    pub fc1_w: ArrayD<f64>,
    pub fc1_b: ArrayD<f64>,
    pub fc2_w: ArrayD<f64>,
    pub fc2_b: ArrayD<f64>,
}

impl SEAdaptor {
    pub fn new(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "SEAdaptor: channels {channels} must be a positive multiple of reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            fc1_w: he_normal(&[hidden, channels], channels, rng),
            fc1_b: zeros(&[hidden]),
            fc2_w: he_normal(&[channels, hidden], hidden, rng),
            fc2_b: zeros(&[channels]),
        })
    }

    /// All-zero weights and biases: every excitation entry is sigmoid(0) = ½.
    pub fn zeroed(channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "SEAdaptor: channels must be a positive multiple of reduction",
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            fc1_w: zeros(&[hidden, channels]),
            fc1_b: zeros(&[hidden]),
            fc2_w: zeros(&[channels, hidden]),
            fc2_b: zeros(&[channels]),
        })
    }

    pub fn bind(&self, t: &mut Tape) -> SEAdaptorBind {
        SEAdaptorBind {
            fc1_w: t.leaf(self.fc1_w.clone()),
            fc1_b: t.leaf(self.fc1_b.clone()),
            fc2_w: t.leaf(self.fc2_w.clone()),
            fc2_b: t.leaf(self.fc2_b.clone()),
        }
    }

    /// Excitation vector from a pooled descriptor `[N, C]`:
    /// `sigmoid(FC2(relu(FC1(pooled))))`, entries in (0, 1).
    pub fn excitation_on(&self, t: &mut Tape, b: &SEAdaptorBind, pooled: Value) -> Value {
        let h = ops::dense(t, pooled, b.fc1_w, b.fc1_b);
        let h = ops::relu(t, h);
        let h = ops::dense(t, h, b.fc2_w, b.fc2_b);
        ops::sigmoid(t, h)
    }

    /// Full block on a batched feature map `[N, C, H, W]`.
    pub fn forward_on(&self, t: &mut Tape, b: &SEAdaptorBind, x: Value) -> Value {
        let pooled = ops::global_avg_pool(t, x);
        let exc = self.excitation_on(t, b, pooled);
        ops::scale_channels(t, x, exc)
    }
}

#[derive(Clone, Copy)]
pub struct SEAdaptorBind {
    pub fc1_w: Value,
    pub fc1_b: Value,
    pub fc2_w: Value,
    pub fc2_b: Value,
}

impl Params for SEAdaptor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&join(prefix, "fc1_w"), &self.fc1_w);
        f(&join(prefix, "fc1_b"), &self.fc1_b);
        f(&join(prefix, "fc2_w"), &self.fc2_w);
        f(&join(prefix, "fc2_b"), &self.fc2_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "fc1_w"), &mut self.fc1_w);
        f(&join(prefix, "fc1_b"), &mut self.fc1_b);
        f(&join(prefix, "fc2_w"), &mut self.fc2_w);
        f(&join(prefix, "fc2_b"), &mut self.fc2_b);
    }
}

/// A bank of SE adaptors sharing one pooled descriptor, soft-routed by a
/// linear-projection attention (`attention_w: [N_adaptors, C]`, no bias,
/// softmax over adaptors).
#[derive(Clone, Debug)]
pub struct SEBank {
    pub adaptors: Vec<SEAdaptor>,
    pub attention_w: ArrayD<f64>,
}

impl SEBank {
    /// `n_adaptors` freshly initialized adaptors; attention starts uniform
    /// (zero projection weights).
    pub fn new(
        channels: usize,
        n_adaptors: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_adaptors == 0 {
            return Err(Error::invalid("SEBank: needs at least one adaptor"));
        }
        let adaptors = (0..n_adaptors)
            .map(|_| SEAdaptor::new(channels, reduction, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adaptors,
            attention_w: zeros(&[n_adaptors, channels]),
        })
    }

    pub fn from_adaptors(adaptors: Vec<SEAdaptor>, attention_w: ArrayD<f64>) -> Result<Self> {
        if adaptors.is_empty() {
            return Err(Error::invalid("SEBank: needs at least one adaptor"));
        }
        let c = adaptors[0].channels;
        if adaptors.iter().any(|a| a.channels != c) {
            return Err(Error::invalid("SEBank: adaptors must share channel count"));
        }
        if attention_w.shape() != [adaptors.len(), c] {
            return Err(Error::invalid(
                "SEBank: attention_w must be [n_adaptors, channels]",
            ));
        }
        Ok(Self {
            adaptors,
            attention_w,
        })
    }

    pub fn channels(&self) -> usize {
        self.adaptors[0].channels
    }

    pub fn bind(&self, t: &mut Tape) -> SEBankBind {
        SEBankBind {
            adaptors: self.adaptors.iter().map(|a| a.bind(t)).collect(),
            attention_w: t.leaf(self.attention_w.clone()),
        }
    }

    /// Bank forward on `[N, C, H, W]`: shared squeeze, per-adaptor
    /// excitations, attention-weighted combination, channel rescale.
    pub fn forward_on(&self, t: &mut Tape, b: &SEBankBind, x: Value) -> Value {
        let pooled = ops::global_avg_pool(t, x);
        let excs: Vec<Value> = self
            .adaptors
            .iter()
            .zip(&b.adaptors)
            .map(|(a, ab)| a.excitation_on(t, ab, pooled))
            .collect();
        let stacked = ops::stack0(t, &excs);
        let logits = ops::dense_nb(t, pooled, b.attention_w);
        let attn = ops::softmax_rows(t, logits);
        let combined = ops::convex_combine(t, stacked, attn);
        ops::scale_channels(t, x, combined)
    }

    /// Attention probabilities for a batched input, `[N, K]`.
    pub fn attention_probs(&self, x: &Array3<f64>) -> Result<ndarray::Array2<f64>> {
        self.check_input(x)?;
        let mut t = Tape::new();
        let xin = t.leaf(batchify(x));
        let b = self.bind(&mut t);
        let pooled = ops::global_avg_pool(&mut t, xin);
        let logits = ops::dense_nb(&mut t, pooled, b.attention_w);
        let attn = ops::softmax_rows(&mut t, logits);
        let v = t.value(attn);
        Ok(ndarray::Array2::from_shape_fn(
            (v.shape()[0], v.shape()[1]),
            |(i, j)| v[[i, j]],
        ))
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        if x.dim().0 != self.channels() {
            return Err(Error::invalid(format!(
                "bank_forward: input has {} channels, bank expects {}",
                x.dim().0,
                self.channels()
            )));
        }
        Ok(())
    }
}

pub struct SEBankBind {
    pub adaptors: Vec<SEAdaptorBind>,
    pub attention_w: Value,
}

impl Params for SEBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for (i, a) in self.adaptors.iter().enumerate() {
            a.visit(&join(prefix, &format!("adaptor{i}")), f);
        }
        f(&join(prefix, "attention_w"), &self.attention_w);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for (i, a) in self.adaptors.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("adaptor{i}")), f);
        }
        f(&join(prefix, "attention_w"), &mut self.attention_w);
    }
}

fn batchify(x: &Array3<f64>) -> ArrayD<f64> {
    let (c, h, w) = x.dim();
    x.clone()
        .into_shape_with_order(IxDyn(&[1, c, h, w]))
        .unwrap()
}

fn debatch(v: &ArrayD<f64>) -> Array3<f64> {
    let s = v.shape();
    Array3::from_shape_fn((s[1], s[2], s[3]), |(c, h, w)| v[[0, c, h, w]])
}

/// SE block applied to one feature map `[C, H, W]`.
pub fn se_forward(x: &Array3<f64>, adaptor: &SEAdaptor) -> Result<Array3<f64>> {
    if x.dim().0 != adaptor.channels {
        return Err(Error::invalid(format!(
            "se_forward: input has {} channels, adaptor expects {}",
            x.dim().0,
            adaptor.channels
        )));
    }
    let mut t = Tape::new();
    let xin = t.leaf(batchify(x));
    let b = adaptor.bind(&mut t);
    let y = adaptor.forward_on(&mut t, &b, xin);
    Ok(debatch(t.value(y)))
}

/// SE bank applied to one feature map `[C, H, W]`.
pub fn bank_forward(x: &Array3<f64>, bank: &SEBank) -> Result<Array3<f64>> {
    bank.check_input(x)?;
    let mut t = Tape::new();
    let xin = t.leaf(batchify(x));
    let b = bank.bind(&mut t);
    let y = bank.forward_on(&mut t, &b, xin);
    Ok(debatch(t.value(y)))
}

/// Select the backbone stages that carry SE banks. `placement` must be a
/// subset of `{1, 2, 3}`; the returned description differs from the input
/// only in its bank placement.
pub fn inject_banks(cfg: &BackboneConfig, placement: &BTreeSet<usize>) -> Result<BackboneConfig> {
    for &s in placement {
        if s == 0 || s > cfg.widths.len() {
            return Err(Error::invalid(format!(
                "inject_banks: stage {s} outside the backbone range 1..={}",
                cfg.widths.len()
            )));
        }
    }
    let mut out = cfg.clone();
    out.se_placement = placement.clone();
    Ok(out)
}
