//! Differentiable operations recorded on a [`Tape`].
//!
//! Every op pushes a node whose backward closure accumulates analytic
//! gradients into its parents. All arrays are standard-layout f64; shape
//! violations are programming errors and panic.

use crate::tape::{Gradients, Tape, Value};
use ndarray::{ArrayD, IxDyn};

// ───────────────────────── elementwise / scalar ─────────────────────────

/// Elementwise sum of two same-shaped arrays.
pub fn add(t: &mut Tape, a: Value, b: Value) -> Value {
    let out = t.value(a) + t.value(b);
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g: &mut Gradients| {
            g.accumulate(a, up.clone());
            g.accumulate(b, up.clone());
        }),
    )
}

/// Multiply every element by a constant.
pub fn scale(t: &mut Tape, x: Value, c: f64) -> Value {
    let out = t.value(x).mapv(|v| v * c);
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            g.accumulate(x, up.mapv(|v| v * c));
        }),
    )
}

/// Sum of scalar nodes into one scalar.
pub fn sum_scalars(t: &mut Tape, parts: &[Value]) -> Value {
    assert!(!parts.is_empty());
    let total: f64 = parts.iter().map(|&p| t.scalar(p)).sum();
    let parts: Vec<Value> = parts.to_vec();
    t.push_op(
        ArrayD::from_elem(IxDyn(&[]), total),
        Box::new(move |_t, _me, up, g| {
            let u = up.iter().next().copied().unwrap();
            for &p in &parts {
                g.accumulate(p, ArrayD::from_elem(IxDyn(&[]), u));
            }
        }),
    )
}

pub fn relu(t: &mut Tape, x: Value) -> Value {
    let out = t.value(x).mapv(|v| v.max(0.0));
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let xv = t.value(x);
            let mut dx = up.clone();
            dx.zip_mut_with(xv, |d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
            g.accumulate(x, dx);
        }),
    )
}

pub fn sigmoid(t: &mut Tape, x: Value) -> Value {
    let out = t.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
    t.push_op(
        out,
        Box::new(move |t, me, up, g| {
            let y = t.value(me);
            let mut dx = up.clone();
            dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
            g.accumulate(x, dx);
        }),
    )
}

/// Clamp to `[lo, hi]`; gradient passes through strictly inside the range.
pub fn clamp(t: &mut Tape, x: Value, lo: f64, hi: f64) -> Value {
    let out = t.value(x).mapv(|v| v.clamp(lo, hi));
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let xv = t.value(x);
            let mut dx = up.clone();
            dx.zip_mut_with(xv, |d, &v| {
                if v < lo || v > hi {
                    *d = 0.0;
                }
            });
            g.accumulate(x, dx);
        }),
    )
}

/// Gradient reversal: identity forward, `-lambda * upstream` backward.
pub fn grl(t: &mut Tape, x: Value, lambda: f64) -> Value {
    let out = t.value(x).clone();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            g.accumulate(x, up.mapv(|v| -lambda * v));
        }),
    )
}

// ───────────────────────── shape manipulation ─────────────────────────

pub fn reshape(t: &mut Tape, x: Value, shape: &[usize]) -> Value {
    let out = t
        .value(x)
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch");
    let orig: Vec<usize> = t.value(x).shape().to_vec();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let dx = up
                .clone()
                .into_shape_with_order(IxDyn(&orig))
                .expect("reshape backward");
            g.accumulate(x, dx);
        }),
    )
}

pub fn permute(t: &mut Tape, x: Value, axes: &[usize]) -> Value {
    let out = t
        .value(x)
        .clone()
        .permuted_axes(IxDyn(axes))
        .as_standard_layout()
        .into_owned();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let dx = up
                .clone()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .into_owned();
            g.accumulate(x, dx);
        }),
    )
}

/// Stack same-shaped arrays along a new leading axis.
pub fn stack0(t: &mut Tape, parts: &[Value]) -> Value {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|&p| t.value(p).view()).collect();
    let out = ndarray::stack(ndarray::Axis(0), &views).expect("stack0: shape mismatch");
    let parts: Vec<Value> = parts.to_vec();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            for (k, &p) in parts.iter().enumerate() {
                let slice = up.index_axis(ndarray::Axis(0), k).to_owned();
                g.accumulate(p, slice);
            }
        }),
    )
}

/// Concatenate 2-D row blocks `[R_i, D]` into `[sum R_i, D]`.
pub fn concat_rows(t: &mut Tape, parts: &[Value]) -> Value {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|&p| t.value(p).view()).collect();
    let out = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat_rows");
    let splits: Vec<usize> = parts.iter().map(|&p| t.value(p).shape()[0]).collect();
    let parts: Vec<Value> = parts.to_vec();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let mut row = 0;
            for (&p, &r) in parts.iter().zip(&splits) {
                let chunk = up
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(row..row + r))
                    .to_owned();
                g.accumulate(p, chunk);
                row += r;
            }
        }),
    )
}

/// Select rows of a 2-D array by index (duplicates allowed).
pub fn gather_rows(t: &mut Tape, x: Value, idx: Vec<usize>) -> Value {
    let xv = t.value(x);
    assert_eq!(xv.ndim(), 2);
    let d = xv.shape()[1];
    let mut out = ArrayD::zeros(IxDyn(&[idx.len(), d]));
    for (m, &i) in idx.iter().enumerate() {
        for j in 0..d {
            out[[m, j]] = xv[[i, j]];
        }
    }
    let shape: Vec<usize> = xv.shape().to_vec();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            for (m, &i) in idx.iter().enumerate() {
                for j in 0..shape[1] {
                    dx[[i, j]] += up[[m, j]];
                }
            }
            g.accumulate(x, dx);
        }),
    )
}

/// Select elements of a 1-D array by index.
pub fn gather1(t: &mut Tape, x: Value, idx: Vec<usize>) -> Value {
    let xv = t.value(x);
    assert_eq!(xv.ndim(), 1);
    let out = ArrayD::from_shape_fn(IxDyn(&[idx.len()]), |m| xv[[idx[m[0]]]]);
    let n = xv.shape()[0];
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let mut dx = ArrayD::zeros(IxDyn(&[n]));
            for (m, &i) in idx.iter().enumerate() {
                dx[[i]] += up[[m]];
            }
            g.accumulate(x, dx);
        }),
    )
}

// ───────────────────────── dense / conv layers ─────────────────────────

#[derive(Copy, Clone)]
pub(crate) enum Lay {
    N,
    T,
}

/// Row-major f64 gemm: `c = a·b + beta*c` with optional logical transposes.
pub(crate) fn gemm(
    la: Lay,
    lb: Lay,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = match la {
        Lay::N => (k as isize, 1),
        Lay::T => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Lay::N => (n as isize, 1),
        Lay::T => (1, k as isize),
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense layer `y = x·w + b` for `x: [N, D]`, `w: [D, M]`, `b: [M]`.
pub fn linear(t: &mut Tape, x: Value, w: Value, b: Value) -> Value {
    let y = linear_nb(t, x, w);
    add_bias_rows(t, y, b)
}

/// Dense layer without bias.
pub fn linear_nb(t: &mut Tape, x: Value, w: Value) -> Value {
    let (xs, ws) = (t.value(x).shape().to_vec(), t.value(w).shape().to_vec());
    assert_eq!(xs.len(), 2);
    assert_eq!(ws.len(), 2);
    assert_eq!(xs[1], ws[0], "linear: inner dims");
    let (n, d, m) = (xs[0], xs[1], ws[1]);
    let mut out = vec![0.0; n * m];
    gemm(
        Lay::N,
        Lay::N,
        n,
        d,
        m,
        t.value(x).as_slice().unwrap(),
        t.value(w).as_slice().unwrap(),
        &mut out,
        0.0,
    );
    let out = ArrayD::from_shape_vec(IxDyn(&[n, m]), out).unwrap();
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let ups = up.as_slice().unwrap();
            // dX = dY · Wᵀ
            let mut dx = vec![0.0; n * d];
            gemm(
                Lay::N,
                Lay::T,
                n,
                m,
                d,
                ups,
                t.value(w).as_slice().unwrap(),
                &mut dx,
                0.0,
            );
            g.accumulate(x, ArrayD::from_shape_vec(IxDyn(&[n, d]), dx).unwrap());
            // dW = Xᵀ · dY
            let mut dw = vec![0.0; d * m];
            gemm(
                Lay::T,
                Lay::N,
                d,
                n,
                m,
                t.value(x).as_slice().unwrap(),
                ups,
                &mut dw,
                0.0,
            );
            g.accumulate(w, ArrayD::from_shape_vec(IxDyn(&[d, m]), dw).unwrap());
        }),
    )
}

/// Dense layer `y = x·wᵀ + b` with weights stored `[M, D]` (out, in).
pub fn dense(t: &mut Tape, x: Value, w: Value, b: Value) -> Value {
    let y = dense_nb(t, x, w);
    add_bias_rows(t, y, b)
}

/// Dense layer without bias, weights `[M, D]`.
pub fn dense_nb(t: &mut Tape, x: Value, w: Value) -> Value {
    let (xs, ws) = (t.value(x).shape().to_vec(), t.value(w).shape().to_vec());
    assert_eq!(xs.len(), 2);
    assert_eq!(ws.len(), 2);
    assert_eq!(xs[1], ws[1], "dense: input dim");
    let (n, d, m) = (xs[0], xs[1], ws[0]);
    let mut out = vec![0.0; n * m];
    gemm(
        Lay::N,
        Lay::T,
        n,
        d,
        m,
        t.value(x).as_slice().unwrap(),
        t.value(w).as_slice().unwrap(),
        &mut out,
        0.0,
    );
    let out = ArrayD::from_shape_vec(IxDyn(&[n, m]), out).unwrap();
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let ups = up.as_slice().unwrap();
            // dX [N, D] = dY [N, M] · W [M, D]
            let mut dx = vec![0.0; n * d];
            gemm(
                Lay::N,
                Lay::N,
                n,
                m,
                d,
                ups,
                t.value(w).as_slice().unwrap(),
                &mut dx,
                0.0,
            );
            g.accumulate(x, ArrayD::from_shape_vec(IxDyn(&[n, d]), dx).unwrap());
            // dW [M, D] = dYᵀ [M, N] · X [N, D]
            let mut dw = vec![0.0; m * d];
            gemm(
                Lay::T,
                Lay::N,
                m,
                n,
                d,
                ups,
                t.value(x).as_slice().unwrap(),
                &mut dw,
                0.0,
            );
            g.accumulate(w, ArrayD::from_shape_vec(IxDyn(&[m, d]), dw).unwrap());
        }),
    )
}

/// Add a bias vector `[M]` to every row of `[N, M]`.
pub fn add_bias_rows(t: &mut Tape, x: Value, b: Value) -> Value {
    let xs = t.value(x).shape().to_vec();
    assert_eq!(xs.len(), 2);
    assert_eq!(t.value(b).shape(), &[xs[1]]);
    let mut out = t.value(x).clone();
    {
        let bv = t.value(b).as_slice().unwrap();
        let m = xs[1];
        let outs = out.as_slice_mut().unwrap();
        for r in 0..xs[0] {
            for (o, &bb) in outs[r * m..][..m].iter_mut().zip(bv) {
                *o += bb;
            }
        }
    }
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            g.accumulate(x, up.clone());
            let db = up.sum_axis(ndarray::Axis(0));
            g.accumulate(b, db.into_dyn());
        }),
    )
}

fn conv_out_len(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ohw = oh * ow;
    let cols_w = n * ohw;
    let mut cols = vec![0.0; c * kh * kw * cols_w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst_base = row * cols_w;
                for ni in 0..n {
                    let src_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = src_base + iy as usize * w;
                        let dst_row = dst_base + ni * ohw + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[dst_row + ox] = x[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ohw = oh * ow;
    let cols_w = n * ohw;
    let mut dx = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src_base = row * cols_w;
                for ni in 0..n {
                    let dst_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = dst_base + iy as usize * w;
                        let src_row = src_base + ni * ohw + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[dst_row + ix as usize] += dcols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution: `x: [N, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
pub fn conv2d(t: &mut Tape, x: Value, w: Value, b: Value, stride: usize, pad: usize) -> Value {
    let xs = t.value(x).shape().to_vec();
    let ws = t.value(w).shape().to_vec();
    assert_eq!(xs.len(), 4);
    assert_eq!(ws.len(), 4);
    assert_eq!(xs[1], ws[1], "conv2d: input channels");
    assert_eq!(t.value(b).shape(), &[ws[0]]);
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let ohw = oh * ow;
    let ckk = c * kh * kw;

    let cols = im2col(
        t.value(x).as_slice().unwrap(),
        n,
        c,
        h,
        wd,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    );
    // y2 [O, N*OHW] = W [O, CKK] · cols
    let mut y2 = vec![0.0; o * n * ohw];
    gemm(
        Lay::N,
        Lay::N,
        o,
        ckk,
        n * ohw,
        t.value(w).as_slice().unwrap(),
        &cols,
        &mut y2,
        0.0,
    );
    let mut out = vec![0.0; n * o * ohw];
    {
        let bv = t.value(b).as_slice().unwrap();
        for ni in 0..n {
            for oi in 0..o {
                let src = &y2[oi * n * ohw + ni * ohw..][..ohw];
                let dst = &mut out[(ni * o + oi) * ohw..][..ohw];
                let bias = bv[oi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[n, o, oh, ow]), out).unwrap();

    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let ups = up.as_slice().unwrap();
            // dY rearranged to [O, N*OHW]
            let mut dy2 = vec![0.0; o * n * ohw];
            for ni in 0..n {
                for oi in 0..o {
                    let src = &ups[(ni * o + oi) * ohw..][..ohw];
                    dy2[oi * n * ohw + ni * ohw..][..ohw].copy_from_slice(src);
                }
            }
            // db
            let mut db = vec![0.0; o];
            for (oi, dbv) in db.iter_mut().enumerate() {
                *dbv = dy2[oi * n * ohw..][..n * ohw].iter().sum();
            }
            g.accumulate(b, ArrayD::from_shape_vec(IxDyn(&[o]), db).unwrap());
            // dW [O, CKK] = dY2 · colsᵀ
            let mut dw = vec![0.0; o * ckk];
            gemm(Lay::N, Lay::T, o, n * ohw, ckk, &dy2, &cols, &mut dw, 0.0);
            g.accumulate(
                w,
                ArrayD::from_shape_vec(IxDyn(&[o, c, kh, kw]), dw).unwrap(),
            );
            // dcols [CKK, N*OHW] = Wᵀ · dY2
            let mut dcols = vec![0.0; ckk * n * ohw];
            gemm(
                Lay::T,
                Lay::N,
                ckk,
                o,
                n * ohw,
                t.value(w).as_slice().unwrap(),
                &dy2,
                &mut dcols,
                0.0,
            );
            let dx = col2im(&dcols, n, c, h, wd, kh, kw, stride, pad, oh, ow);
            g.accumulate(x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), dx).unwrap());
        }),
    )
}

// ───────────────────────── pooling / attention ─────────────────────────

/// Global average pool `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(t: &mut Tape, x: Value) -> Value {
    let xs = t.value(x).shape().to_vec();
    assert_eq!(xs.len(), 4);
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = (h * w) as f64;
    let xv = t.value(x).as_slice().unwrap();
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let s: f64 = xv[(ni * c + ci) * h * w..][..h * w].iter().sum();
            out[ni * c + ci] = s / hw;
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[n, c]), out).unwrap();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let ups = up.as_slice().unwrap();
            let mut dx = vec![0.0; n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let gval = ups[ni * c + ci] / hw;
                    for v in dx[(ni * c + ci) * h * w..][..h * w].iter_mut() {
                        *v = gval;
                    }
                }
            }
            g.accumulate(x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
        }),
    )
}

/// Scale each channel of `x: [N, C, H, W]` by `s: [N, C]`.
pub fn scale_channels(t: &mut Tape, x: Value, s: Value) -> Value {
    let xs = t.value(x).shape().to_vec();
    assert_eq!(xs.len(), 4);
    assert_eq!(t.value(s).shape(), &[xs[0], xs[1]]);
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let mut out = t.value(x).clone();
    {
        let sv = t.value(s).as_slice().unwrap();
        let outs = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let sc = sv[nc];
            for v in outs[nc * hw..][..hw].iter_mut() {
                *v *= sc;
            }
        }
    }
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let ups = up.as_slice().unwrap();
            let xv = t.value(x).as_slice().unwrap();
            let sv = t.value(s).as_slice().unwrap();
            let mut dx = vec![0.0; n * c * hw];
            let mut ds = vec![0.0; n * c];
            for nc in 0..n * c {
                let sc = sv[nc];
                let mut acc = 0.0;
                for i in 0..hw {
                    let u = ups[nc * hw + i];
                    dx[nc * hw + i] = u * sc;
                    acc += u * xv[nc * hw + i];
                }
                ds[nc] = acc;
            }
            g.accumulate(x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
            g.accumulate(s, ArrayD::from_shape_vec(IxDyn(&[n, c]), ds).unwrap());
        }),
    )
}

/// Row-wise softmax of `[N, K]`.
pub fn softmax_rows(t: &mut Tape, x: Value) -> Value {
    let xs = t.value(x).shape().to_vec();
    assert_eq!(xs.len(), 2);
    let (n, k) = (xs[0], xs[1]);
    let mut out = t.value(x).clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    t.push_op(
        out,
        Box::new(move |t, me, up, g| {
            let y = t.value(me);
            let mut dx = ArrayD::zeros(IxDyn(&[n, k]));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..k {
                    dot += up[[i, j]] * y[[i, j]];
                }
                for j in 0..k {
                    dx[[i, j]] = y[[i, j]] * (up[[i, j]] - dot);
                }
            }
            g.accumulate(x, dx);
        }),
    )
}

/// Convex combination `out[n,c] = Σ_k attn[n,k] · exc[k,n,c]`.
pub fn convex_combine(t: &mut Tape, exc: Value, attn: Value) -> Value {
    let es = t.value(exc).shape().to_vec();
    let as_ = t.value(attn).shape().to_vec();
    assert_eq!(es.len(), 3);
    assert_eq!(as_, vec![es[1], es[0]], "convex_combine: attn must be [N, K]");
    let (k, n, c) = (es[0], es[1], es[2]);
    let ev = t.value(exc);
    let av = t.value(attn);
    let mut out = ArrayD::zeros(IxDyn(&[n, c]));
    for ni in 0..n {
        for ki in 0..k {
            let a = av[[ni, ki]];
            for ci in 0..c {
                out[[ni, ci]] += a * ev[[ki, ni, ci]];
            }
        }
    }
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let ev = t.value(exc);
            let av = t.value(attn);
            let mut dexc = ArrayD::zeros(IxDyn(&[k, n, c]));
            let mut dattn = ArrayD::zeros(IxDyn(&[n, k]));
            for ni in 0..n {
                for ki in 0..k {
                    let a = av[[ni, ki]];
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let u = up[[ni, ci]];
                        dexc[[ki, ni, ci]] = a * u;
                        acc += u * ev[[ki, ni, ci]];
                    }
                    dattn[[ni, ki]] = acc;
                }
            }
            g.accumulate(exc, dexc);
            g.accumulate(attn, dattn);
        }),
    )
}

// ───────────────────────── ROI feature extraction ─────────────────────────

/// One region of interest: batch index plus box in input-image pixel coords.
#[derive(Clone, Copy, Debug)]
pub struct Roi {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Bilinear ROI-align with one sample per bin:
/// `x: [N, C, H, W]` → `[R, C, P, P]`. `spatial_scale` maps image coords to
/// feature coords (1/stride). Boxes are treated as constants.
pub fn roi_align(t: &mut Tape, x: Value, rois: Vec<Roi>, p: usize, spatial_scale: f64) -> Value {
    let xs = t.value(x).shape().to_vec();
    assert_eq!(xs.len(), 4);
    let (_n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let r = rois.len();

    // Precompute bilinear sample taps per roi per bin: (iy0, ix0, wy, wx).
    let mut taps = Vec::with_capacity(r * p * p);
    for roi in &rois {
        let fx1 = roi.x1 * spatial_scale;
        let fy1 = roi.y1 * spatial_scale;
        let bw = ((roi.x2 - roi.x1) * spatial_scale / p as f64).max(1e-6);
        let bh = ((roi.y2 - roi.y1) * spatial_scale / p as f64).max(1e-6);
        for py in 0..p {
            for px in 0..p {
                let sy = (fy1 + (py as f64 + 0.5) * bh - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = (fx1 + (px as f64 + 0.5) * bw - 0.5).clamp(0.0, (w - 1) as f64);
                let iy0 = (sy.floor() as usize).min(h - 1);
                let ix0 = (sx.floor() as usize).min(w - 1);
                let wy = sy - iy0 as f64;
                let wx = sx - ix0 as f64;
                taps.push((iy0, ix0, wy, wx));
            }
        }
    }

    let xv = t.value(x).as_slice().unwrap();
    let mut out = vec![0.0; r * c * p * p];
    for (ri, roi) in rois.iter().enumerate() {
        for ci in 0..c {
            let plane = &xv[(roi.batch * c + ci) * h * w..][..h * w];
            for bi in 0..p * p {
                let (iy0, ix0, wy, wx) = taps[ri * p * p + bi];
                let iy1 = (iy0 + 1).min(h - 1);
                let ix1 = (ix0 + 1).min(w - 1);
                let v = plane[iy0 * w + ix0] * (1.0 - wy) * (1.0 - wx)
                    + plane[iy0 * w + ix1] * (1.0 - wy) * wx
                    + plane[iy1 * w + ix0] * wy * (1.0 - wx)
                    + plane[iy1 * w + ix1] * wy * wx;
                out[(ri * c + ci) * p * p + bi] = v;
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[r, c, p, p]), out).unwrap();
    let nchw = xs.clone();
    t.push_op(
        out,
        Box::new(move |_t, _me, up, g| {
            let ups = up.as_slice().unwrap();
            let mut dx = vec![0.0; nchw.iter().product()];
            for (ri, roi) in rois.iter().enumerate() {
                for ci in 0..c {
                    let base = (roi.batch * c + ci) * h * w;
                    for bi in 0..p * p {
                        let (iy0, ix0, wy, wx) = taps[ri * p * p + bi];
                        let iy1 = (iy0 + 1).min(h - 1);
                        let ix1 = (ix0 + 1).min(w - 1);
                        let u = ups[(ri * c + ci) * p * p + bi];
                        dx[base + iy0 * w + ix0] += u * (1.0 - wy) * (1.0 - wx);
                        dx[base + iy0 * w + ix1] += u * (1.0 - wy) * wx;
                        dx[base + iy1 * w + ix0] += u * wy * (1.0 - wx);
                        dx[base + iy1 * w + ix1] += u * wy * wx;
                    }
                }
            }
            g.accumulate(x, ArrayD::from_shape_vec(IxDyn(&nchw), dx).unwrap());
        }),
    )
}

// ───────────────────────── reduction losses ─────────────────────────

/// Mean binary cross-entropy from logits against constant 0/1 targets.
pub fn bce_logits_mean(t: &mut Tape, logits: Value, targets: Vec<f64>) -> Value {
    let z = t.value(logits);
    assert_eq!(z.len(), targets.len());
    let m = targets.len() as f64;
    let mut total = 0.0;
    for (&zv, &tv) in z.iter().zip(&targets) {
        total += zv.max(0.0) - zv * tv + (1.0 + (-zv.abs()).exp()).ln();
    }
    let out = ArrayD::from_elem(IxDyn(&[]), total / m);
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let u = up.iter().next().copied().unwrap();
            let z = t.value(logits);
            let mut dz = z.clone();
            for (d, &tv) in dz.iter_mut().zip(&targets) {
                let s = 1.0 / (1.0 + (-*d).exp());
                *d = u * (s - tv) / m;
            }
            g.accumulate(logits, dz);
        }),
    )
}

/// Mean softmax cross-entropy of `[M, K]` logits against constant labels.
pub fn softmax_ce_mean(t: &mut Tape, logits: Value, labels: Vec<usize>) -> Value {
    let z = t.value(logits);
    assert_eq!(z.ndim(), 2);
    let (m, k) = (z.shape()[0], z.shape()[1]);
    assert_eq!(m, labels.len());
    let mut total = 0.0;
    for (i, &lab) in labels.iter().enumerate() {
        assert!(lab < k);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            mx = mx.max(z[[i, j]]);
        }
        let mut lse = 0.0;
        for j in 0..k {
            lse += (z[[i, j]] - mx).exp();
        }
        total += mx + lse.ln() - z[[i, lab]];
    }
    let out = ArrayD::from_elem(IxDyn(&[]), total / m as f64);
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let u = up.iter().next().copied().unwrap();
            let z = t.value(logits);
            let mut dz = ArrayD::zeros(IxDyn(&[m, k]));
            for (i, &lab) in labels.iter().enumerate() {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..k {
                    mx = mx.max(z[[i, j]]);
                }
                let mut lse = 0.0;
                for j in 0..k {
                    lse += (z[[i, j]] - mx).exp();
                }
                for j in 0..k {
                    let p = (z[[i, j]] - mx).exp() / lse;
                    dz[[i, j]] = u * (p - if j == lab { 1.0 } else { 0.0 }) / m as f64;
                }
            }
            g.accumulate(logits, dz);
        }),
    )
}

/// Smooth-L1 (Huber, beta = 1) against a constant target, averaged over all
/// elements.
pub fn smooth_l1_mean(t: &mut Tape, pred: Value, target: ArrayD<f64>) -> Value {
    let p = t.value(pred);
    assert_eq!(p.shape(), target.shape());
    let m = p.len() as f64;
    let mut total = 0.0;
    for (&pv, &tv) in p.iter().zip(target.iter()) {
        let d = pv - tv;
        total += if d.abs() < 1.0 {
            0.5 * d * d
        } else {
            d.abs() - 0.5
        };
    }
    let out = ArrayD::from_elem(IxDyn(&[]), total / m);
    t.push_op(
        out,
        Box::new(move |t, _me, up, g| {
            let u = up.iter().next().copied().unwrap();
            let p = t.value(pred);
            let mut dp = p.clone();
            for (d, &tv) in dp.iter_mut().zip(target.iter()) {
                let diff = *d - tv;
                *d = u * if diff.abs() < 1.0 { diff } else { diff.signum() } / m;
            }
            g.accumulate(pred, dp);
        }),
    )
}
