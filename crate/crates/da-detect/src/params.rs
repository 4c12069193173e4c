//! Named parameter traversal.
//!
//! Model layers own their weight arrays; this trait walks them in a fixed,
//! deterministic order under hierarchical dot-separated names. The trainer,
//! checkpointing and the optimizer partition are all built on it.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub trait Params {
    /// Visit every parameter as `(name, value)` in a stable order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>));

    /// Mutable variant, same order as [`Params::visit`].
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

/// He-normal weight initialization via Box–Muller on the shared stream.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

/// Join a prefix and a leaf name with a dot, skipping empty prefixes.
pub fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
