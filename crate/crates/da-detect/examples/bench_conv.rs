//! Rough throughput probe for the conv stack (not shipped behavior).
use da_detect::ops;
use da_detect::tape::Tape;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.1..0.1))
}

fn main() {
    let size: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(128);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Backbone-shaped stack: stem s2 + 3 stages (2 blocks each), widths 32/64/128.
    let widths = [32usize, 64, 128];
    let reps = 3;
    let start = Instant::now();
    let mut flops = 0f64;
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.leaf(rnd(&[2, 3, size, size], &mut rng));
        let stem_w = t.leaf(rnd(&[32, 3, 3, 3], &mut rng));
        let stem_b = t.leaf(rnd(&[32], &mut rng));
        let mut h = ops::conv2d(&mut t, x, stem_w, stem_b, 2, 1);
        h = ops::relu(&mut t, h);
        let mut cin = 32;
        let mut sp = size / 2;
        for &cout in &widths {
            for block in 0..2 {
                let stride = if block == 0 { 2 } else { 1 };
                if block == 0 {
                    sp /= 2;
                }
                let w1 = t.leaf(rnd(&[cout, cin, 3, 3], &mut rng));
                let b1 = t.leaf(rnd(&[cout], &mut rng));
                let hh = ops::conv2d(&mut t, h, w1, b1, stride, 1);
                let hh = ops::relu(&mut t, hh);
                let w2 = t.leaf(rnd(&[cout, cout, 3, 3], &mut rng));
                let b2 = t.leaf(rnd(&[cout], &mut rng));
                let hh = ops::conv2d(&mut t, hh, w2, b2, 1, 1);
                let short = if stride != 1 || cin != cout {
                    let ws = t.leaf(rnd(&[cout, cin, 1, 1], &mut rng));
                    let bs = t.leaf(rnd(&[cout], &mut rng));
                    ops::conv2d(&mut t, h, ws, bs, stride, 0)
                } else {
                    h
                };
                let sum = ops::add(&mut t, hh, short);
                h = ops::relu(&mut t, sum);
                flops += 2.0
                    * 2.0
                    * (sp * sp) as f64
                    * (cout * cin * 9 + cout * cout * 9 + cout * cin) as f64;
                cin = cout;
            }
        }
        let pooled = ops::global_avg_pool(&mut t, h);
        let n = t.value(pooled).len();
        let flatp = ops::reshape(&mut t, pooled, &[1, n]);
        let w = t.leaf(rnd(&[n, 1], &mut rng));
        let s = ops::linear_nb(&mut t, flatp, w);
        let root = ops::reshape(&mut t, s, &[]);
        let g = t.backward(root);
        let _ = g.get(x);
    }
    let dt = start.elapsed().as_secs_f64();
    // backward roughly doubles forward flops again (dW + dX gemms)
    let total = flops * 3.0 / 2.0;
    println!(
        "size {size}: {:.2} s per fwd+bwd step (batch 2), approx {:.1} GFLOP/s",
        dt / reps as f64,
        total / dt / 1e9
    );
}
