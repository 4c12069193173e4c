//! Gradient reversal layer: identity forward, `-λ · g` backward.
//!
//! Placed between the feature extractor and each domain classifier so that
//! minimizing the domain cross-entropy trains the classifier while pushing
//! the features toward domain confusion.

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Value};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Gradient reversal with a nonnegative backward scale.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct GradientReversal {
    pub lambda_grl: f64,
}

impl GradientReversal {
    pub fn new(lambda_grl: f64) -> Result<Self> {
        if !(lambda_grl >= 0.0) {
            return Err(Error::invalid("lambda_grl must be nonnegative"));
        }
        Ok(Self { lambda_grl })
    }

    /// Record the reversal on a tape.
    pub fn apply(&self, t: &mut Tape, x: Value) -> Value {
        ops::grl(t, x, self.lambda_grl)
    }
}

impl Default for GradientReversal {
    fn default() -> Self {
        Self { lambda_grl: 1.0 }
    }
}

/// Forward pass: the input, unchanged.
pub fn grl_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.clone()
}

/// Backward pass: `-lambda_grl * upstream_grad`, elementwise.
pub fn grl_backward(upstream_grad: &ArrayD<f64>, lambda_grl: f64) -> ArrayD<f64> {
    upstream_grad.mapv(|g| -lambda_grl * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_is_identity() {
        let x = arr1(&[1.0, -2.0]).into_dyn();
        assert_eq!(grl_forward(&x), x);
        let z = ArrayD::<f64>::zeros(IxDyn(&[3, 2]));
        assert_eq!(grl_forward(&z), z);

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let r = ArrayD::from_shape_fn(IxDyn(&[4, 5]), |_| rng.gen_range(-10.0..10.0));
        let fwd = grl_forward(&r);
        for (a, b) in fwd.iter().zip(r.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn backward_negates_and_scales() {
        let up = arr1(&[1.0]).into_dyn();
        assert_eq!(grl_backward(&up, 1.0), arr1(&[-1.0]).into_dyn());

        let up = arr1(&[2.0, -4.0]).into_dyn();
        assert_eq!(grl_backward(&up, 0.5), arr1(&[-1.0, 2.0]).into_dyn());

        let up = arr1(&[3.0, -7.0]).into_dyn();
        for v in grl_backward(&up, 0.0).iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn rejects_negative_lambda() {
        assert!(GradientReversal::new(-0.5).is_err());
        assert!(GradientReversal::new(0.0).is_ok());
    }

    /// For f(grl(x)) the computed input gradient must equal exactly
    /// -λ · ∇f with the GRL absent.
    #[test]
    fn composed_gradient_is_exactly_minus_lambda_times_free_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &lambda in &[1.0, 0.5, 2.25, 0.0] {
            let xv = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-1.0..1.0));
            let wv = ArrayD::from_shape_fn(IxDyn(&[4, 2]), |_| rng.gen_range(-1.0..1.0));
            let bv = ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.gen_range(-0.5..0.5));

            let run = |with_grl: bool| {
                let mut t = Tape::new();
                let x = t.leaf(xv.clone());
                let w = t.leaf(wv.clone());
                let b = t.leaf(bv.clone());
                let h = if with_grl {
                    GradientReversal { lambda_grl: lambda }.apply(&mut t, x)
                } else {
                    x
                };
                let y = ops::linear(&mut t, h, w, b);
                let y = ops::sigmoid(&mut t, y);
                let flat = ops::reshape(&mut t, y, &[6]);
                let l = ops::bce_logits_mean(&mut t, flat, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
                let g = t.backward(l);
                g.get(x).unwrap().clone()
            };

            let grad_with = run(true);
            let grad_free = run(false);
            for (gw, gf) in grad_with.iter().zip(grad_free.iter()) {
                let expected = -lambda * gf;
                assert_eq!(gw.to_bits(), expected.to_bits());
            }
        }
    }

    /// Minimax direction on a two-parameter toy model: a descent step on the
    /// head weight lowers the domain loss, while a descent step on the
    /// feature weight (whose gradient passed through the GRL) raises it.
    #[test]
    fn adversarial_sign_test_on_toy_model() {
        let loss_at = |w_feat: f64, w_head: f64| {
            let mut t = Tape::new();
            let x = t.leaf(arr1(&[1.5]).into_dyn());
            let wf = t.leaf(arr1(&[w_feat]).into_dyn());
            let wh = t.leaf(arr1(&[w_head]).into_dyn());
            // feature = x·wf, reversed, then head logit = feature·wh
            let f2 = ops::reshape(&mut t, x, &[1, 1]);
            let wf2 = ops::reshape(&mut t, wf, &[1, 1]);
            let feat = ops::linear_nb(&mut t, f2, wf2);
            let rev = ops::grl(&mut t, feat, 1.0);
            let wh2 = ops::reshape(&mut t, wh, &[1, 1]);
            let logit = ops::linear_nb(&mut t, rev, wh2);
            let flat = ops::reshape(&mut t, logit, &[1]);
            let l = ops::bce_logits_mean(&mut t, flat, vec![1.0]);
            (t, wf, wh, l)
        };

        let (w_feat, w_head) = (0.8, -0.6);
        let (t, wf, wh, l) = loss_at(w_feat, w_head);
        let l0 = t.scalar(l);
        let g = t.backward(l);
        let g_feat = g.get(wf).unwrap()[[0]];
        let g_head = g.get(wh).unwrap()[[0]];

        let step = 1e-3;
        let (t2, _, _, l2) = loss_at(w_feat, w_head - step * g_head);
        assert!(t2.scalar(l2) < l0, "head descent step must reduce the loss");

        let (t3, _, _, l3) = loss_at(w_feat - step * g_feat, w_head);
        assert!(
            t3.scalar(l3) > l0,
            "feature step through the GRL must increase the loss"
        );
    }
}
