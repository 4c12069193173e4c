//! Adaptation loss formulas.
//!
//! Pure f64 implementations of the domain-adaptation objective pieces plus
//! their tape-op counterparts used during training:
//!
//! - center loss, image and instance level: `½ Σ_i ‖x_i − c_{y_i}‖²` against
//!   a learnable source/target center pair
//! - image-level domain cross-entropy over per-pixel classifier outputs and
//!   instance-level domain cross-entropy over per-proposal outputs, both in
//!   negated (NLL) form and normalized by element count
//! - consistency loss tying each proposal's domain probability to its
//!   image's mean pixel probability, normalized by total proposal count
//! - the two-step total: `L1 = L_sup + λ_ce(L_img_ce + L_inst_ce + L_cst)`
//!   and `L2 = λ_center(L_img_c + L_inst_c)`
//! - the H-divergence diagnostic `2(1 − (err_S + err_T))`
//!
//! Probabilities are clamped to `[1e-7, 1 − 1e-7]` before any logarithm.

use crate::error::{Error, Result};
use crate::tape::{Tape, Value};
use ndarray::{Array2, Array3, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

/// Clamp bound applied to probabilities before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary domain label: 0 = source, 1 = target.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    /// Numeric label used in the cross-entropy formulas.
    pub fn value(self) -> f64 {
        match self {
            DomainTag::Source => 0.0,
            DomainTag::Target => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            DomainTag::Source => DomainTag::Target,
            DomainTag::Target => DomainTag::Source,
        }
    }
}

/// Which adaptation level a center pair belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenterLevel {
    Image,
    Instance,
}

/// Learnable source/target center vectors for one adaptation level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassCenters {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub level: CenterLevel,
}

impl ClassCenters {
    /// Zero-initialized centers of dimension `d`.
    pub fn zeros(level: CenterLevel, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("center dimension must be positive"));
        }
        Ok(Self {
            source: vec![0.0; d],
            target: vec![0.0; d],
            level,
        })
    }

    pub fn from_vectors(level: CenterLevel, source: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if source.is_empty() || source.len() != target.len() {
            return Err(Error::invalid(
                "source and target centers must share a positive dimension",
            ));
        }
        if source.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::invalid("center entries must be finite"));
        }
        Ok(Self {
            source,
            target,
            level,
        })
    }

    pub fn dim(&self) -> usize {
        self.source.len()
    }

    fn for_tag(&self, tag: DomainTag) -> &[f64] {
        match tag {
            DomainTag::Source => &self.source,
            DomainTag::Target => &self.target,
        }
    }
}

// ───────────────────────── pure loss functions ─────────────────────────

/// Center loss: `½ Σ_i ‖x_i − c_{y_i}‖²` with the center selected by each
/// sample's domain tag.
pub fn center_loss(
    features: ArrayView2<f64>,
    tags: &[DomainTag],
    centers: &ClassCenters,
) -> Result<f64> {
    let m = features.nrows();
    if m == 0 {
        return Err(Error::invalid("center_loss: empty batch"));
    }
    if tags.len() != m {
        return Err(Error::invalid("center_loss: one tag per feature row"));
    }
    if features.ncols() != centers.dim() {
        return Err(Error::invalid(format!(
            "center_loss: feature dim {} does not match center dim {}",
            features.ncols(),
            centers.dim()
        )));
    }
    let mut total = 0.0;
    for (row, &tag) in features.rows().into_iter().zip(tags) {
        let c = centers.for_tag(tag);
        for (x, &cv) in row.iter().zip(c) {
            let d = x - cv;
            total += d * d;
        }
    }
    Ok(0.5 * total)
}

fn check_probs_in_unit<'a>(probs: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "{what}: probability {p} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

fn nll_term(p: f64, d: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(d * pc.ln() + (1.0 - d) * (1.0 - pc).ln())
}

/// Image-level domain cross-entropy over per-pixel classifier outputs
/// `[batch, H, W]`, negated and divided by the total pixel count.
pub fn domain_ce_image(pixel_probs: &Array3<f64>, tags: &[DomainTag]) -> Result<f64> {
    let (b, h, w) = pixel_probs.dim();
    if b == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("domain_ce_image: empty grid"));
    }
    if tags.len() != b {
        return Err(Error::invalid("domain_ce_image: one tag per image"));
    }
    check_probs_in_unit(pixel_probs.iter(), "domain_ce_image")?;
    let count = (b * h * w) as f64;
    let mut total = 0.0;
    for (i, &tag) in tags.iter().enumerate() {
        let d = tag.value();
        for &p in pixel_probs.index_axis(ndarray::Axis(0), i).iter() {
            total += nll_term(p, d);
        }
    }
    Ok(total / count)
}

/// Instance-level domain cross-entropy over per-proposal outputs
/// `[batch, n]`, negated and averaged over all `(i, j)`.
pub fn domain_ce_instance(instance_probs: &Array2<f64>, tags: &[DomainTag]) -> Result<f64> {
    let (b, n) = instance_probs.dim();
    if b == 0 || n == 0 {
        return Err(Error::invalid(
            "domain_ce_instance: every image needs at least one proposal",
        ));
    }
    if tags.len() != b {
        return Err(Error::invalid("domain_ce_instance: one tag per image"));
    }
    check_probs_in_unit(instance_probs.iter(), "domain_ce_instance")?;
    let count = (b * n) as f64;
    let mut total = 0.0;
    for (i, &tag) in tags.iter().enumerate() {
        let d = tag.value();
        for &p in instance_probs.row(i).iter() {
            total += nll_term(p, d);
        }
    }
    Ok(total / count)
}

/// Consistency loss: per image, the absolute difference between the mean
/// pixel probability and each instance probability, normalized by the total
/// proposal count. Images with zero proposals are skipped.
pub fn consistency_loss(pixel_probs: &[Array2<f64>], instance_probs: &[Vec<f64>]) -> Result<f64> {
    if pixel_probs.len() != instance_probs.len() {
        return Err(Error::invalid(
            "consistency_loss: pixel and instance lists must align per image",
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (grid, insts) in pixel_probs.iter().zip(instance_probs) {
        if insts.is_empty() {
            continue;
        }
        if grid.is_empty() {
            return Err(Error::invalid(
                "consistency_loss: image with proposals has no pixel predictions",
            ));
        }
        check_probs_in_unit(grid.iter(), "consistency_loss (pixels)")?;
        check_probs_in_unit(insts.iter(), "consistency_loss (instances)")?;
        let mean = grid.sum() / grid.len() as f64;
        for &p in insts {
            total += (mean - p).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// H-divergence from a classifier's empirical source/target error rates:
/// `2 (1 − (err_S + err_T))`. Diagnostic only.
pub fn h_divergence(err_source: f64, err_target: f64) -> Result<f64> {
    for (name, e) in [("err_source", err_source), ("err_target", err_target)] {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::invalid(format!("{name} {e} outside [0, 1]")));
        }
    }
    Ok(2.0 * (1.0 - (err_source + err_target)))
}

// ───────────────────────── loss composition ─────────────────────────

/// The individual scalar losses of one training step, before weighting.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub detection: f64,
    pub image_ce: f64,
    pub instance_ce: f64,
    pub consistency: f64,
    pub image_center: f64,
    pub instance_center: f64,
}

/// Decomposed losses with their weights, routed to the two optimizers.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub detection_loss: f64,
    pub image_ce: f64,
    pub instance_ce: f64,
    pub consistency: f64,
    pub image_center: f64,
    pub instance_center: f64,
    pub lambda_ce: f64,
    pub lambda_center: f64,
}

impl LossBundle {
    /// Main-optimizer objective: `L_sup + λ_ce (L_img_ce + L_inst_ce + L_cst)`.
    pub fn l1(&self) -> f64 {
        self.detection_loss + self.lambda_ce * (self.image_ce + self.instance_ce + self.consistency)
    }

    /// Center-optimizer objective: `λ_center (L_img_c + L_inst_c)`.
    pub fn l2(&self) -> f64 {
        self.lambda_center * (self.image_center + self.instance_center)
    }
}

/// Assemble a [`LossBundle`] from its parts and weights.
pub fn compose_losses(parts: &LossParts, lambda_ce: f64, lambda_center: f64) -> Result<LossBundle> {
    if lambda_ce < 0.0 || lambda_center < 0.0 || !lambda_ce.is_finite() || !lambda_center.is_finite()
    {
        return Err(Error::invalid("loss weights must be finite and nonnegative"));
    }
    let values = [
        parts.detection,
        parts.image_ce,
        parts.instance_ce,
        parts.consistency,
        parts.image_center,
        parts.instance_center,
    ];
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("loss parts must be finite and nonnegative"));
    }
    Ok(LossBundle {
        detection_loss: parts.detection,
        image_ce: parts.image_ce,
        instance_ce: parts.instance_ce,
        consistency: parts.consistency,
        image_center: parts.image_center,
        instance_center: parts.instance_center,
        lambda_ce,
        lambda_center,
    })
}

// ───────────────────────── tape ops ─────────────────────────

/// Center loss as a tape op over `features: [m, d]` and two center leaves.
pub fn center_loss_op(
    t: &mut Tape,
    features: Value,
    tags: Vec<DomainTag>,
    c_source: Value,
    c_target: Value,
) -> Value {
    let f = t.value(features);
    assert_eq!(f.ndim(), 2);
    let (m, d) = (f.shape()[0], f.shape()[1]);
    assert_eq!(tags.len(), m);
    assert_eq!(t.value(c_source).shape(), &[d]);
    assert_eq!(t.value(c_target).shape(), &[d]);

    let mut total = 0.0;
    {
        let cs = t.value(c_source);
        let ct = t.value(c_target);
        for i in 0..m {
            let c = match tags[i] {
                DomainTag::Source => cs,
                DomainTag::Target => ct,
            };
            for j in 0..d {
                let diff = f[[i, j]] - c[[j]];
                total += diff * diff;
            }
        }
    }
    t.push_op(
        ArrayD::from_elem(IxDyn(&[]), 0.5 * total),
        Box::new(move |t, _me, up, g| {
            let u = up.iter().next().copied().unwrap();
            let f = t.value(features);
            let cs = t.value(c_source);
            let ct = t.value(c_target);
            let mut df = ArrayD::zeros(IxDyn(&[m, d]));
            let mut dcs = ArrayD::zeros(IxDyn(&[d]));
            let mut dct = ArrayD::zeros(IxDyn(&[d]));
            for i in 0..m {
                let (c, dc) = match tags[i] {
                    DomainTag::Source => (cs, &mut dcs),
                    DomainTag::Target => (ct, &mut dct),
                };
                for j in 0..d {
                    let diff = f[[i, j]] - c[[j]];
                    df[[i, j]] = u * diff;
                    dc[[j]] -= u * diff;
                }
            }
            g.accumulate(features, df);
            g.accumulate(c_source, dcs);
            g.accumulate(c_target, dct);
        }),
    )
}

/// Negated domain log-likelihood over probabilities of any shape against a
/// per-element 0/1 label, averaged over all elements. Probabilities are
/// clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the op; the gradient is
/// zero where the clamp saturates.
pub fn domain_nll_op(t: &mut Tape, probs: Value, labels: Vec<f64>) -> Value {
    let p = t.value(probs);
    assert_eq!(p.len(), labels.len());
    assert!(!labels.is_empty());
    let count = labels.len() as f64;
    let total: f64 = p
        .iter()
        .zip(&labels)
        .map(|(&pv, &d)| nll_term(pv, d))
        .sum();
    t.push_op(
        ArrayD::from_elem(IxDyn(&[]), total / count),
        Box::new(move |t, _me, up, g| {
            let u = up.iter().next().copied().unwrap();
            let p = t.value(probs);
            let mut dp = p.clone();
            for (dv, &d) in dp.iter_mut().zip(&labels) {
                let pv = *dv;
                if pv < PROB_CLAMP || pv > 1.0 - PROB_CLAMP {
                    *dv = 0.0;
                } else {
                    *dv = -u * (d / pv - (1.0 - d) / (1.0 - pv)) / count;
                }
            }
            g.accumulate(probs, dp);
        }),
    )
}

/// Consistency loss as a tape op. `pixel_probs: [B, H, W]`; `inst_probs: [R]`
/// with `img_of_row[r]` naming the image each proposal belongs to. Result is
/// normalized by the total proposal count.
pub fn consistency_op(
    t: &mut Tape,
    pixel_probs: Value,
    inst_probs: Value,
    img_of_row: Vec<usize>,
) -> Value {
    let grid = t.value(pixel_probs);
    assert_eq!(grid.ndim(), 3);
    let (b, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let hw = (h * w) as f64;
    let rows = t.value(inst_probs);
    assert_eq!(rows.ndim(), 1);
    assert_eq!(rows.len(), img_of_row.len());
    assert!(img_of_row.iter().all(|&i| i < b));

    let r_total = img_of_row.len();
    let means: Vec<f64> = (0..b)
        .map(|i| grid.index_axis(ndarray::Axis(0), i).sum() / hw)
        .collect();
    let total: f64 = rows
        .iter()
        .zip(&img_of_row)
        .map(|(&p, &i)| (means[i] - p).abs())
        .sum();
    let loss = if r_total == 0 {
        0.0
    } else {
        total / r_total as f64
    };
    t.push_op(
        ArrayD::from_elem(IxDyn(&[]), loss),
        Box::new(move |t, _me, up, g| {
            if r_total == 0 {
                return;
            }
            let u = up.iter().next().copied().unwrap();
            let grid = t.value(pixel_probs);
            let rows = t.value(inst_probs);
            let means: Vec<f64> = (0..b)
                .map(|i| grid.index_axis(ndarray::Axis(0), i).sum() / hw)
                .collect();
            let mut dmean = vec![0.0; b];
            let mut drows = ArrayD::zeros(IxDyn(&[r_total]));
            for (r, &i) in img_of_row.iter().enumerate() {
                let diff = means[i] - rows[[r]];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dmean[i] += u * s / r_total as f64;
                drows[[r]] = -u * s / r_total as f64;
            }
            let mut dgrid = ArrayD::zeros(IxDyn(&[b, h, w]));
            for i in 0..b {
                let per_pixel = dmean[i] / hw;
                if per_pixel != 0.0 {
                    dgrid
                        .index_axis_mut(ndarray::Axis(0), i)
                        .mapv_inplace(|_| per_pixel);
                }
            }
            g.accumulate(pixel_probs, dgrid);
            g.accumulate(inst_probs, drows);
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::ops;
    use ndarray::{arr2, arr3, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TAG01: [DomainTag; 2] = [DomainTag::Source, DomainTag::Target];

    fn centers(src: &[f64], tgt: &[f64]) -> ClassCenters {
        ClassCenters::from_vectors(CenterLevel::Image, src.to_vec(), tgt.to_vec()).unwrap()
    }

    // ── center loss ──

    #[test]
    fn center_loss_zero_when_sample_equals_center() {
        let c = centers(&[1.0, -2.0], &[0.0, 0.0]);
        let f = arr2(&[[1.0, -2.0]]);
        let l = center_loss(f.view(), &[DomainTag::Source], &c).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn center_loss_direct_evaluation() {
        let c = centers(&[0.0, 0.0], &[9.0, 9.0]);
        let f = arr2(&[[3.0, 4.0]]);
        let l = center_loss(f.view(), &[DomainTag::Source], &c).unwrap();
        assert!((l - 12.5).abs() < 1e-12);
    }

    #[test]
    fn center_loss_symmetric_pair() {
        // two samples at c ± v → ‖v‖²
        let v = [0.6, -1.2, 2.0];
        let c0 = [0.5, 0.5, 0.5];
        let c = centers(&c0, &[0.0; 3]);
        let f = arr2(&[
            [c0[0] + v[0], c0[1] + v[1], c0[2] + v[2]],
            [c0[0] - v[0], c0[1] - v[1], c0[2] - v[2]],
        ]);
        let l = center_loss(f.view(), &[DomainTag::Source; 2], &c).unwrap();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        assert!((l - norm2).abs() < 1e-12);
    }

    #[test]
    fn center_loss_error_paths() {
        let c = centers(&[0.0, 0.0], &[0.0, 0.0]);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(center_loss(empty.view(), &[], &c).is_err());
        let bad_dim = arr2(&[[1.0, 2.0, 3.0]]);
        assert!(center_loss(bad_dim.view(), &[DomainTag::Source], &c).is_err());
    }

    #[test]
    fn center_loss_matches_brute_force_on_random_inputs() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..8);
            let d = rng.gen_range(1..6);
            let f = Array2::from_shape_fn((m, d), |_| rng.gen_range(-3.0..3.0));
            let tags: Vec<DomainTag> = (0..m).map(|_| TAG01[rng.gen_range(0..2)]).collect();
            let cs: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ct: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = centers(&cs, &ct);
            let got = center_loss(f.view(), &tags, &c).unwrap();
            let mut want = 0.0;
            for i in 0..m {
                for j in 0..d {
                    let cv = match tags[i] {
                        DomainTag::Source => cs[j],
                        DomainTag::Target => ct[j],
                    };
                    want += 0.5 * (f[[i, j]] - cv).powi(2);
                }
            }
            assert!((got - want).abs() <= 1e-10);
        }
    }

    // ── domain cross-entropies ──

    #[test]
    fn domain_ce_image_maximum_entropy() {
        let probs = Array3::from_elem((2, 3, 3), 0.5);
        let l = domain_ce_image(&probs, &TAG01).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn domain_ce_image_single_pixel() {
        let probs = Array3::from_elem((1, 1, 1), 0.9);
        let t1 = domain_ce_image(&probs, &[DomainTag::Target]).unwrap();
        assert!((t1 - (-(0.9f64.ln()))).abs() < 1e-12);
        let t0 = domain_ce_image(&probs, &[DomainTag::Source]).unwrap();
        assert!((t0 - (-(0.1f64.ln()))).abs() < 1e-9);
    }

    #[test]
    fn domain_ce_image_rejects_out_of_range() {
        let probs = Array3::from_elem((1, 1, 1), 1.2);
        assert!(domain_ce_image(&probs, &[DomainTag::Source]).is_err());
    }

    #[test]
    fn domain_ce_instance_examples() {
        let all_half = Array2::from_elem((2, 3), 0.5);
        let l = domain_ce_instance(&all_half, &TAG01).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let p = arr2(&[[0.8, 0.8]]);
        let l = domain_ce_instance(&p, &[DomainTag::Target]).unwrap();
        assert!((l - (-(0.8f64.ln()))).abs() < 1e-12);

        let eps = 1e-6;
        let p = arr2(&[[1.0 - eps]]);
        let l = domain_ce_instance(&p, &[DomainTag::Target]).unwrap();
        assert!(l <= -((1.0 - eps) as f64).ln() + 1e-15);
        assert!(l < 2e-6);
    }

    proptest! {
        #[test]
        fn domain_ce_swap_invariance(seed in 0u64..500) {
            // simultaneous p → 1−p, D → 1−D leaves both CE losses unchanged
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rng.gen_range(1..4);
            let n = rng.gen_range(1..5);
            let probs = Array2::from_shape_fn((b, n), |_| rng.gen_range(0.001..0.999));
            let tags: Vec<DomainTag> = (0..b).map(|_| TAG01[rng.gen_range(0..2)]).collect();
            let flipped_probs = probs.mapv(|p| 1.0 - p);
            let flipped_tags: Vec<DomainTag> = tags.iter().map(|t| t.flipped()).collect();
            let a = domain_ce_instance(&probs, &tags).unwrap();
            let b2 = domain_ce_instance(&flipped_probs, &flipped_tags).unwrap();
            prop_assert!((a - b2).abs() < 1e-12);
        }

        #[test]
        fn center_loss_permutation_invariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(2..7);
            let d = rng.gen_range(1..5);
            let f = Array2::from_shape_fn((m, d), |_| rng.gen_range(-2.0..2.0));
            let tags: Vec<DomainTag> = (0..m).map(|_| TAG01[rng.gen_range(0..2)]).collect();
            let cs: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ct: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = centers(&cs, &ct);
            let base = center_loss(f.view(), &tags, &c).unwrap();

            let mut order: Vec<usize> = (0..m).collect();
            // Fisher-Yates with the same rng
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let fp = Array2::from_shape_fn((m, d), |(i, j)| f[[order[i], j]]);
            let tp: Vec<DomainTag> = order.iter().map(|&i| tags[i]).collect();
            let perm = center_loss(fp.view(), &tp, &c).unwrap();
            prop_assert!((base - perm).abs() < 1e-10);
        }

        #[test]
        fn compose_is_linear_in_lambda_center(
            img_c in 0.0f64..5.0, inst_c in 0.0f64..5.0, lam in 0.0f64..3.0,
        ) {
            let parts = LossParts { image_center: img_c, instance_center: inst_c, ..Default::default() };
            let a = compose_losses(&parts, 0.1, lam).unwrap();
            let b = compose_losses(&parts, 0.1, 2.0 * lam).unwrap();
            prop_assert!((b.l2() - 2.0 * a.l2()).abs() < 1e-12);
        }
    }

    // ── consistency ──

    #[test]
    fn consistency_zero_at_perfect_agreement() {
        let grid = vec![Array2::from_elem((2, 2), 0.5)];
        let insts = vec![vec![0.5, 0.5, 0.5]];
        assert_eq!(consistency_loss(&grid, &insts).unwrap(), 0.0);
    }

    #[test]
    fn consistency_single_offset_instance() {
        let grid = vec![Array2::from_elem((2, 2), 0.5)];
        let insts = vec![vec![0.7]];
        let l = consistency_loss(&grid, &insts).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn consistency_symmetric_pair() {
        let delta = 0.15;
        let grid = vec![Array2::from_elem((3, 3), 0.5)];
        let insts = vec![vec![0.5 + delta, 0.5 - delta]];
        let l = consistency_loss(&grid, &insts).unwrap();
        assert!((l - delta).abs() < 1e-12);
    }

    #[test]
    fn consistency_skips_empty_images() {
        let grid = vec![Array2::from_elem((2, 2), 0.3), Array2::from_elem((2, 2), 0.5)];
        let insts = vec![vec![], vec![0.7]];
        let l = consistency_loss(&grid, &insts).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    // ── h-divergence ──

    #[test]
    fn h_divergence_endpoints_and_example() {
        assert_eq!(h_divergence(0.0, 0.0).unwrap(), 2.0);
        assert_eq!(h_divergence(0.5, 0.5).unwrap(), 0.0);
        assert!((h_divergence(0.1, 0.2).unwrap() - 1.4).abs() < 1e-12);
        assert!(h_divergence(-0.1, 0.0).is_err());
        assert!(h_divergence(0.0, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn h_divergence_range(es in 0.0f64..=1.0, et in 0.0f64..=1.0) {
            let d = h_divergence(es, et).unwrap();
            prop_assert!((-2.0..=2.0).contains(&d));
            if es + et <= 1.0 {
                prop_assert!((0.0..=2.0).contains(&d));
            }
        }
    }

    // ── composition ──

    #[test]
    fn compose_no_adaptation_case() {
        let parts = LossParts { detection: 1.0, ..Default::default() };
        let b = compose_losses(&parts, 0.1, 0.5).unwrap();
        assert_eq!(b.l1(), 1.0);
        assert_eq!(b.l2(), 0.0);
    }

    #[test]
    fn compose_paper_weights() {
        let parts = LossParts {
            detection: 1.0,
            image_ce: 0.5,
            instance_ce: 0.5,
            consistency: 0.5,
            ..Default::default()
        };
        let b = compose_losses(&parts, 0.1, 0.0).unwrap();
        assert!((b.l1() - 1.15).abs() < 1e-12);

        let parts = LossParts {
            image_center: 2.0,
            instance_center: 3.0,
            ..Default::default()
        };
        let b = compose_losses(&parts, 0.1, 0.5).unwrap();
        assert!((b.l2() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn compose_rejects_negative_lambda() {
        let parts = LossParts::default();
        assert!(compose_losses(&parts, -0.1, 0.0).is_err());
        assert!(compose_losses(&parts, 0.1, -1.0).is_err());
    }

    // ── tape ops agree with the pure functions and pass gradient checks ──

    #[test]
    fn center_loss_op_matches_pure_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let m = rng.gen_range(1..6);
            let d = rng.gen_range(1..5);
            let f = Array2::from_shape_fn((m, d), |_| rng.gen_range(-2.0..2.0));
            let tags: Vec<DomainTag> = (0..m).map(|_| TAG01[rng.gen_range(0..2)]).collect();
            let cs = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
            let ct = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));

            let pure = center_loss(
                f.view(),
                &tags,
                &centers(cs.as_slice().unwrap(), ct.as_slice().unwrap()),
            )
            .unwrap();

            let tags2 = tags.clone();
            let build = move |t: &mut Tape, ins: &[ArrayD<f64>]| {
                let fv = t.leaf(ins[0].clone());
                let csv = t.leaf(ins[1].clone());
                let ctv = t.leaf(ins[2].clone());
                let l = center_loss_op(t, fv, tags2.clone(), csv, ctv);
                (vec![fv, csv, ctv], l)
            };
            let inputs = [f.into_dyn(), cs.into_dyn(), ct.into_dyn()];
            let mut tape = Tape::new();
            let (_, root) = build(&mut tape, &inputs);
            assert!((tape.scalar(root) - pure).abs() < 1e-12);
            check_gradients(&build, &inputs, 1e-4).unwrap();
        }
    }

    #[test]
    fn domain_nll_op_matches_pure_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let b = rng.gen_range(1..4);
            let h = rng.gen_range(1..4);
            let w = rng.gen_range(1..4);
            let probs = Array3::from_shape_fn((b, h, w), |_| rng.gen_range(0.01..0.99));
            let tags: Vec<DomainTag> = (0..b).map(|_| TAG01[rng.gen_range(0..2)]).collect();
            let pure = domain_ce_image(&probs, &tags).unwrap();

            let mut labels = Vec::new();
            for &tg in &tags {
                labels.extend(std::iter::repeat(tg.value()).take(h * w));
            }
            let lb = labels.clone();
            let build = move |t: &mut Tape, ins: &[ArrayD<f64>]| {
                let p = t.leaf(ins[0].clone());
                let l = domain_nll_op(t, p, lb.clone());
                (vec![p], l)
            };
            let inputs = [probs.into_dyn()];
            let mut tape = Tape::new();
            let (_, root) = build(&mut tape, &inputs);
            assert!((tape.scalar(root) - pure).abs() < 1e-12);
            check_gradients(&build, &inputs, 1e-4).unwrap();
        }
    }

    #[test]
    fn domain_nll_gradient_matches_closed_form() {
        // analytic contract: −(D/p − (1−D)/(1−p)) / count
        let probs = arr3(&[[[0.3, 0.8]], [[0.6, 0.2]]]);
        let labels = vec![0.0, 0.0, 1.0, 1.0];
        let mut t = Tape::new();
        let p = t.leaf(probs.clone().into_dyn());
        let l = domain_nll_op(&mut t, p, labels.clone());
        let g = t.backward(l);
        let gp = g.get(p).unwrap();
        for (i, (&pv, &d)) in probs.iter().zip(&labels).enumerate() {
            let want = -(d / pv - (1.0 - d) / (1.0 - pv)) / 4.0;
            let got = gp.as_slice().unwrap()[i];
            assert!((got - want).abs() < 1e-12, "elem {i}: {got} vs {want}");
        }
    }

    #[test]
    fn consistency_op_matches_pure_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let b = rng.gen_range(1..3);
            let h = 2;
            let w = 2;
            let grid = Array3::from_shape_fn((b, h, w), |_| rng.gen_range(0.05..0.95));
            let rows_per_img: Vec<usize> = (0..b).map(|_| rng.gen_range(1..4)).collect();
            let mut img_of_row = Vec::new();
            let mut inst = Vec::new();
            for (i, &r) in rows_per_img.iter().enumerate() {
                for _ in 0..r {
                    img_of_row.push(i);
                    inst.push(rng.gen_range(0.05..0.95));
                }
            }
            let pure = {
                let grids: Vec<Array2<f64>> = (0..b)
                    .map(|i| grid.index_axis(ndarray::Axis(0), i).to_owned())
                    .collect();
                let mut per_img: Vec<Vec<f64>> = vec![Vec::new(); b];
                for (r, &i) in img_of_row.iter().enumerate() {
                    per_img[i].push(inst[r]);
                }
                consistency_loss(&grids, &per_img).unwrap()
            };
            let assign = img_of_row.clone();
            let build = move |t: &mut Tape, ins: &[ArrayD<f64>]| {
                let p = t.leaf(ins[0].clone());
                let q = t.leaf(ins[1].clone());
                let l = consistency_op(t, p, q, assign.clone());
                (vec![p, q], l)
            };
            let inputs = [
                grid.into_dyn(),
                Array1::from_vec(inst).into_dyn(),
            ];
            let mut tape = Tape::new();
            let (_, root) = build(&mut tape, &inputs);
            assert!((tape.scalar(root) - pure).abs() < 1e-12);
            check_gradients(&build, &inputs, 1e-4).unwrap();
        }
    }

    #[test]
    fn clamp_then_nll_keeps_probs_finite() {
        let mut t = Tape::new();
        let p = t.leaf(arr3(&[[[0.0, 1.0]]]).into_dyn());
        let l = domain_nll_op(&mut t, p, vec![1.0, 0.0]);
        assert!(t.scalar(l).is_finite());
        // saturated entries receive zero gradient
        let g = t.backward(l);
        for &v in g.get(p).unwrap().iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn composed_adaptation_losses_sum_on_tape() {
        let mut t = Tape::new();
        let det = t.leaf(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let probs = t.leaf(arr3(&[[[0.5]]]).into_dyn());
        let ce = domain_nll_op(&mut t, probs, vec![1.0]);
        let weighted = ops::scale(&mut t, ce, 0.1);
        let l1 = ops::sum_scalars(&mut t, &[det, weighted]);
        assert!((t.scalar(l1) - (1.0 + 0.1 * 2f64.ln())).abs() < 1e-12);
    }
}
