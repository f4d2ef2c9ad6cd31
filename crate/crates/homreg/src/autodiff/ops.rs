//! Differentiable operations. Each op records a backward closure that maps
//! the upstream gradient to per-parent gradients. Backward closures capture
//! input tensors by (cheap) clone and recompute scratch buffers such as
//! im2col columns instead of holding them alive.

use nalgebra::{SMatrix, SVector};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::geometry::{self, CornerSet, FourPointOffsets, GeometryError};

const NORM_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// dense gemm helper (row-major)
// ---------------------------------------------------------------------------

/// c = a(m x k) * b(k x n) [+ c if beta], row-major, optional logical
/// transposes applied to the stored operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
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

// ---------------------------------------------------------------------------
// elementwise / scalar ops
// ---------------------------------------------------------------------------

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Var {
    let (va, vb) = (tape.value(a).clone(), tape.value(b).clone());
    assert_eq!(va.shape(), vb.shape());
    let data = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(x, y)| x + y)
        .collect();
    let out = Tensor::new(va.shape().to_vec(), data);
    tape.push(out, vec![a, b], |g| vec![g.clone(), g.clone()])
}

pub fn scale(tape: &mut Tape, a: Var, c: f64) -> Var {
    let va = tape.value(a).clone();
    let out = va.map(|v| v * c);
    tape.push(out, vec![a], move |g| vec![g.map(|v| v * c)])
}

pub fn relu(tape: &mut Tape, a: Var) -> Var {
    let va = tape.value(a).clone();
    let out = va.map(|v| v.max(0.0));
    let mask = va;
    tape.push(out, vec![a], move |g| {
        let data = g
            .data()
            .iter()
            .zip(mask.data())
            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
            .collect();
        vec![Tensor::new(g.shape().to_vec(), data)]
    })
}

pub fn leaky_relu(tape: &mut Tape, a: Var, slope: f64) -> Var {
    let va = tape.value(a).clone();
    let out = va.map(|v| if v > 0.0 { v } else { slope * v });
    let mask = va;
    tape.push(out, vec![a], move |g| {
        let data = g
            .data()
            .iter()
            .zip(mask.data())
            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * gv })
            .collect();
        vec![Tensor::new(g.shape().to_vec(), data)]
    })
}

/// Sum of scalar vars.
pub fn add_all(tape: &mut Tape, vars: &[Var]) -> Var {
    assert!(!vars.is_empty());
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = add(tape, acc, *v);
    }
    acc
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = vec![0.0; cin * kh * kw * ho * wo];
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    let dst_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
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
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut x = vec![0.0; cin * h * w];
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst_row + ix as usize] += cols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution; `x: [Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
    assert_eq!(wv.shape()[1], cin, "conv weight channel mismatch");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let ckk = cin * kh * kw;

    let cols = im2col(xv.data(), cin, h, wd, kh, kw, stride, pad);
    let mut y = vec![0.0; cout * ho * wo];
    gemm(cout, ckk, ho * wo, wv.data(), false, &cols, false, &mut y, 0.0);
    for co in 0..cout {
        let bias = bv.data()[co];
        for v in &mut y[co * ho * wo..(co + 1) * ho * wo] {
            *v += bias;
        }
    }
    let out = Tensor::new(vec![cout, ho, wo], y);

    tape.push(out, vec![x, w, b], move |g| {
        let cols = im2col(xv.data(), cin, h, wd, kh, kw, stride, pad);
        // grad_w = g (cout x howo) * cols^T
        let mut gw = vec![0.0; cout * ckk];
        gemm(cout, ho * wo, ckk, g.data(), false, &cols, true, &mut gw, 0.0);
        // grad_cols = w^T (ckk x cout) * g
        let mut gcols = vec![0.0; ckk * ho * wo];
        gemm(ckk, cout, ho * wo, wv.data(), true, g.data(), false, &mut gcols, 0.0);
        let gx = col2im(&gcols, cin, h, wd, kh, kw, stride, pad);
        let mut gb = vec![0.0; cout];
        for co in 0..cout {
            gb[co] = g.data()[co * ho * wo..(co + 1) * ho * wo].iter().sum();
        }
        vec![
            Tensor::new(vec![cin, h, wd], gx),
            Tensor::new(wv.shape().to_vec(), gw),
            Tensor::new(vec![cout], gb),
        ]
    })
}

// ---------------------------------------------------------------------------
// normalization, pooling, resampling
// ---------------------------------------------------------------------------

/// Instance normalization over spatial dims with affine parameters.
pub fn instance_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let xv = tape.value(x).clone();
    let gv = tape.value(gamma).clone();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let n = h * w;
    let mut mean = vec![0.0; c];
    let mut istd = vec![0.0; c];
    let mut xhat = vec![0.0; c * n];
    for ci in 0..c {
        let xs = &xv.data()[ci * n..(ci + 1) * n];
        let mu = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        mean[ci] = mu;
        istd[ci] = is;
        for (o, v) in xhat[ci * n..(ci + 1) * n].iter_mut().zip(xs) {
            *o = (v - mu) * is;
        }
    }
    let bv = tape.value(beta).clone();
    let mut y = vec![0.0; c * n];
    for ci in 0..c {
        let (gm, bt) = (gv.data()[ci], bv.data()[ci]);
        for (o, v) in y[ci * n..(ci + 1) * n].iter_mut().zip(&xhat[ci * n..(ci + 1) * n]) {
            *o = gm * v + bt;
        }
    }
    let xhat_t = Tensor::new(vec![c, h, w], xhat);
    let out = Tensor::new(vec![c, h, w], y);
    tape.push(out, vec![x, gamma, beta], move |g| {
        let mut gx = vec![0.0; c * n];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ci in 0..c {
            let gs = &g.data()[ci * n..(ci + 1) * n];
            let xh = &xhat_t.data()[ci * n..(ci + 1) * n];
            let gm = gv.data()[ci];
            let sum_g: f64 = gs.iter().sum();
            let sum_gx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
            ggamma[ci] = sum_gx;
            gbeta[ci] = sum_g;
            let k = gm * istd[ci] / n as f64;
            for i in 0..n {
                gx[ci * n + i] = k * (n as f64 * gs[i] - sum_g - xh[i] * sum_gx);
            }
        }
        vec![
            Tensor::new(vec![c, h, w], gx),
            Tensor::new(vec![c], ggamma),
            Tensor::new(vec![c], gbeta),
        ]
    })
}

/// 2x2 max pooling with stride 2 (even spatial dims required).
pub fn maxpool2(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; c * ho * wo];
    let mut arg = vec![0usize; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ci * h * w + (2 * oy + dy) * w + (2 * ox + dx);
                        if xv.data()[idx] > best {
                            best = xv.data()[idx];
                            bi = idx;
                        }
                    }
                }
                y[ci * ho * wo + oy * wo + ox] = best;
                arg[ci * ho * wo + oy * wo + ox] = bi;
            }
        }
    }
    let out = Tensor::new(vec![c, ho, wo], y);
    tape.push(out, vec![x], move |g| {
        let mut gx = vec![0.0; c * h * w];
        for (i, &src) in arg.iter().enumerate() {
            gx[src] += g.data()[i];
        }
        vec![Tensor::new(vec![c, h, w], gx)]
    })
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                y[ci * ho * wo + oy * wo + ox] = xv.data()[ci * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    let out = Tensor::new(vec![c, ho, wo], y);
    tape.push(out, vec![x], move |g| {
        let mut gx = vec![0.0; c * h * w];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    gx[ci * h * w + (oy / 2) * w + ox / 2] +=
                        g.data()[ci * ho * wo + oy * wo + ox];
                }
            }
        }
        vec![Tensor::new(vec![c, h, w], gx)]
    })
}

/// Concatenate along the channel dimension.
pub fn concat_c(tape: &mut Tape, a: Var, b: Var) -> Var {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    let (ca, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let cb = bv.shape()[0];
    assert_eq!(&bv.shape()[1..], &[h, w]);
    let mut y = Vec::with_capacity((ca + cb) * h * w);
    y.extend_from_slice(av.data());
    y.extend_from_slice(bv.data());
    let out = Tensor::new(vec![ca + cb, h, w], y);
    tape.push(out, vec![a, b], move |g| {
        let ga = Tensor::new(vec![ca, h, w], g.data()[..ca * h * w].to_vec());
        let gb = Tensor::new(vec![cb, h, w], g.data()[ca * h * w..].to_vec());
        vec![ga, gb]
    })
}

/// Global average pool: `[C,H,W] -> [C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let n = h * w;
    let y: Vec<f64> = (0..c)
        .map(|ci| xv.data()[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let out = Tensor::new(vec![c], y);
    tape.push(out, vec![x], move |g| {
        let mut gx = vec![0.0; c * n];
        for ci in 0..c {
            let gv = g.data()[ci] / n as f64;
            for v in &mut gx[ci * n..(ci + 1) * n] {
                *v = gv;
            }
        }
        vec![Tensor::new(vec![c, h, w], gx)]
    })
}

/// Fully connected layer; `x: [In]`, `w: [Out,In]`, `b: [Out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xv = tape.value(x).clone();
    let wv = tape.value(w).clone();
    let bv = tape.value(b).clone();
    let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
    assert_eq!(xv.numel(), in_dim);
    let mut y = bv.data().to_vec();
    for o in 0..out_dim {
        let row = &wv.data()[o * in_dim..(o + 1) * in_dim];
        y[o] += row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    let out = Tensor::new(vec![out_dim], y);
    tape.push(out, vec![x, w, b], move |g| {
        let mut gx = vec![0.0; in_dim];
        let mut gw = vec![0.0; out_dim * in_dim];
        for o in 0..out_dim {
            let go = g.data()[o];
            let row = &wv.data()[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gx[i] += go * row[i];
                gw[o * in_dim + i] = go * xv.data()[i];
            }
        }
        vec![
            Tensor::new(vec![in_dim], gx),
            Tensor::new(vec![out_dim, in_dim], gw),
            Tensor::new(vec![out_dim], g.data().to_vec()),
        ]
    })
}

/// Softmax applied independently to each contiguous block of `block` values.
pub fn block_softmax(tape: &mut Tape, x: Var, block: usize) -> Var {
    let xv = tape.value(x).clone();
    let n = xv.numel();
    assert_eq!(n % block, 0);
    let mut y = vec![0.0; n];
    for b in (0..n).step_by(block) {
        let xs = &xv.data()[b..b + block];
        let mx = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for (o, v) in y[b..b + block].iter_mut().zip(xs) {
            *o = (v - mx).exp();
            z += *o;
        }
        for o in &mut y[b..b + block] {
            *o /= z;
        }
    }
    let yt = Tensor::new(xv.shape().to_vec(), y);
    let yc = yt.clone();
    tape.push(yt, vec![x], move |g| {
        let mut gx = vec![0.0; n];
        for b in (0..n).step_by(block) {
            let ys = &yc.data()[b..b + block];
            let gs = &g.data()[b..b + block];
            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
            for i in 0..block {
                gx[b + i] = ys[i] * (gs[i] - dot);
            }
        }
        vec![Tensor::new(g.shape().to_vec(), gx)]
    })
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean squared error against a fixed target.
pub fn mse_const(tape: &mut Tape, x: Var, target: Tensor) -> Var {
    let xv = tape.value(x).clone();
    assert_eq!(xv.numel(), target.numel());
    let n = xv.numel() as f64;
    let loss = xv
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    tape.push(Tensor::scalar(loss), vec![x], move |g| {
        let go = g.item();
        let data = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| 2.0 * (a - b) / n * go)
            .collect();
        vec![Tensor::new(xv.shape().to_vec(), data)]
    })
}

/// Sum of absolute differences against a fixed target.
pub fn l1_const(tape: &mut Tape, x: Var, target: Tensor) -> Var {
    let xv = tape.value(x).clone();
    assert_eq!(xv.numel(), target.numel());
    let loss = xv
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    tape.push(Tensor::scalar(loss), vec![x], move |g| {
        let go = g.item();
        let data = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).signum() * go)
            .collect();
        vec![Tensor::new(xv.shape().to_vec(), data)]
    })
}

/// Mean over positions of |cosine similarity| between two `[C,H,W]` maps.
pub fn abs_cos_mean(tape: &mut Tape, a: Var, b: Var) -> Var {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    assert_eq!(av.shape(), bv.shape());
    let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let n = h * w;
    let mut acc = 0.0;
    for p in 0..n {
        let mut dot = 0.0;
        let mut na2 = COS_EPS;
        let mut nb2 = COS_EPS;
        for ci in 0..c {
            let x = av.data()[ci * n + p];
            let y = bv.data()[ci * n + p];
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
        }
        acc += (dot / (na2.sqrt() * nb2.sqrt())).abs();
    }
    let loss = acc / n as f64;
    tape.push(Tensor::scalar(loss), vec![a, b], move |g| {
        let go = g.item() / n as f64;
        let mut ga = vec![0.0; c * n];
        let mut gb = vec![0.0; c * n];
        for p in 0..n {
            let mut dot = 0.0;
            let mut na2 = COS_EPS;
            let mut nb2 = COS_EPS;
            for ci in 0..c {
                let x = av.data()[ci * n + p];
                let y = bv.data()[ci * n + p];
                dot += x * y;
                na2 += x * x;
                nb2 += y * y;
            }
            let na = na2.sqrt();
            let nb = nb2.sqrt();
            let cos = dot / (na * nb);
            let s = cos.signum() * go;
            for ci in 0..c {
                let x = av.data()[ci * n + p];
                let y = bv.data()[ci * n + p];
                ga[ci * n + p] = s * (y / (na * nb) - cos * x / na2);
                gb[ci * n + p] = s * (x / (na * nb) - cos * y / nb2);
            }
        }
        vec![
            Tensor::new(vec![c, h, w], ga),
            Tensor::new(vec![c, h, w], gb),
        ]
    })
}

// ---------------------------------------------------------------------------
// geometry-aware ops
// ---------------------------------------------------------------------------

/// Warp a feature map by the homography induced by four-point offsets on the
/// map's own corner square. The output at (x, y) bilinearly samples the input
/// at `H_o * (x, y)` where `H_o` maps the corners to corners + offsets, so a
/// warp by the ground-truth offsets aligns a source map onto the target.
/// Differentiable in both the feature map and the offsets (through the DLT
/// solve via the adjoint system).
pub fn warp_offsets(tape: &mut Tape, f: Var, o: Var) -> Result<Var, GeometryError> {
    let fv = tape.value(f).clone();
    let ov = tape.value(o).clone();
    assert_eq!(ov.numel(), 8);
    let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
    let n = h * w;
    let corners = CornerSet([
        [0.0, 0.0],
        [w as f64 - 1.0, 0.0],
        [w as f64 - 1.0, h as f64 - 1.0],
        [0.0, h as f64 - 1.0],
    ]);
    let offsets = FourPointOffsets::from_flat(ov.data());
    let dst = corners.displace(&offsets);
    let (a_sys, b_sys) = geometry::dlt_system(&corners, &dst);
    let lu = a_sys.lu();
    let hvec: SVector<f64, 8> = lu.solve(&b_sys).ok_or(GeometryError::DegenerateCorners {
        cond: f64::INFINITY,
    })?;
    // quick sanity guard against near-degenerate quads during training
    let svd = a_sys.svd(false, false);
    let cond = svd.singular_values.max() / svd.singular_values.min().max(1e-300);
    if cond > 1e10 {
        return Err(GeometryError::DegenerateCorners { cond });
    }

    let project = move |hv: &SVector<f64, 8>, x: f64, y: f64| -> (f64, f64, f64) {
        let den = hv[6] * x + hv[7] * y + 1.0;
        let u = (hv[0] * x + hv[1] * y + hv[2]) / den;
        let v = (hv[3] * x + hv[4] * y + hv[5]) / den;
        (u, v, den)
    };

    let mut y_out = vec![0.0; c * n];
    for iy in 0..h {
        for ix in 0..w {
            let (u, v, _) = project(&hvec, ix as f64, iy as f64);
            for ci in 0..c {
                y_out[ci * n + iy * w + ix] = sample_ch(fv.data(), ci, n, h, w, u, v);
            }
        }
    }
    let out = Tensor::new(vec![c, h, w], y_out);
    let a_mat: SMatrix<f64, 8, 8> = a_sys;
    let src_corners = corners;
    Ok(tape.push(out, vec![f, o], move |g| {
        let mut gf = vec![0.0; c * n];
        let mut gh = [0.0f64; 8];
        for iy in 0..h {
            for ix in 0..w {
                let (u, v, den) = project(&hvec, ix as f64, iy as f64);
                let x0 = u.floor();
                let y0 = v.floor();
                let fx = u - x0;
                let fy = v - y0;
                let (x0i, y0i) = (x0 as i64, y0 as i64);
                let mut dl_du = 0.0;
                let mut dl_dv = 0.0;
                for ci in 0..c {
                    let gup = g.data()[ci * n + iy * w + ix];
                    if gup == 0.0 {
                        continue;
                    }
                    // gather the 2x2 neighborhood (zero outside)
                    let mut vals = [0.0; 4];
                    for (k, (dx, dy)) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .enumerate()
                    {
                        let xi = x0i + dx;
                        let yi = y0i + dy;
                        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                            let idx = ci * n + yi as usize * w + xi as usize;
                            vals[k] = fv.data()[idx];
                            // scatter gradient into the feature map
                            let wgt = match k {
                                0 => (1.0 - fx) * (1.0 - fy),
                                1 => fx * (1.0 - fy),
                                2 => (1.0 - fx) * fy,
                                _ => fx * fy,
                            };
                            gf[idx] += gup * wgt;
                        }
                    }
                    dl_du += gup * ((vals[1] - vals[0]) * (1.0 - fy) + (vals[3] - vals[2]) * fy);
                    dl_dv += gup * ((vals[2] - vals[0]) * (1.0 - fx) + (vals[3] - vals[1]) * fx);
                }
                if dl_du != 0.0 || dl_dv != 0.0 {
                    let (xf, yf) = (ix as f64, iy as f64);
                    gh[0] += dl_du * xf / den;
                    gh[1] += dl_du * yf / den;
                    gh[2] += dl_du / den;
                    gh[3] += dl_dv * xf / den;
                    gh[4] += dl_dv * yf / den;
                    gh[5] += dl_dv / den;
                    let t = dl_du * u + dl_dv * v;
                    gh[6] -= t * xf / den;
                    gh[7] -= t * yf / den;
                }
            }
        }
        // adjoint of the linear solve A h = b:
        // solve A^T y = dL/dh; then dL/db = y and dL/dA = -y h^T.
        // A and b depend on offset q only through the displaced corner, which
        // collapses to dL/d(o_x[q]) = y[2q] * w_q with w_q the projective
        // denominator at source corner q.
        let at = a_mat.transpose();
        let ysol = at
            .lu()
            .solve(&SVector::<f64, 8>::from_row_slice(&gh))
            .unwrap_or_else(|| SVector::<f64, 8>::zeros());
        let mut go = vec![0.0; 8];
        for q in 0..4 {
            let [xs, ys] = src_corners.0[q];
            let wq = hvec[6] * xs + hvec[7] * ys + 1.0;
            go[2 * q] = ysol[2 * q] * wq;
            go[2 * q + 1] = ysol[2 * q + 1] * wq;
        }
        vec![Tensor::new(vec![c, h, w], gf), Tensor::new(vec![8], go)]
    }))
}

#[inline]
fn sample_ch(data: &[f64], ci: usize, n: usize, h: usize, w: usize, u: f64, v: f64) -> f64 {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let mut acc = 0.0;
    for (dx, dy, wgt) in [
        (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let xi = x0i + dx;
        let yi = y0i + dy;
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            acc += wgt * data[ci * n + yi as usize * w + xi as usize];
        }
    }
    acc
}

/// Local correlation volume. For displacement (u, v) in [-r, r]^2 and
/// position (y, x), the channel `(u+r)*(2r+1)+(v+r)` holds the channel inner
/// product of `src(y+u, x+v)` and `tar(y, x)`, scaled by `1/sqrt(C)`;
/// out-of-range source positions contribute zero.
pub fn local_correlation(tape: &mut Tape, src: Var, tar: Var, r: usize) -> Var {
    let sv = tape.value(src).clone();
    let tv = tape.value(tar).clone();
    assert_eq!(sv.shape(), tv.shape(), "correlation shape mismatch");
    let (c, h, w) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
    let n = h * w;
    let d = 2 * r + 1;
    let scale = 1.0 / (c as f64).sqrt();
    let ri = r as i64;
    let mut out = vec![0.0; d * d * n];
    for du in -ri..=ri {
        for dv in -ri..=ri {
            let ch = ((du + ri) as usize * d + (dv + ri) as usize) * n;
            for y in 0..h as i64 {
                let ys = y + du;
                if ys < 0 || ys >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let xs = x + dv;
                    if xs < 0 || xs >= w as i64 {
                        continue;
                    }
                    let ps = ys as usize * w + xs as usize;
                    let pt = y as usize * w + x as usize;
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += sv.data()[ci * n + ps] * tv.data()[ci * n + pt];
                    }
                    out[ch + pt] = dot * scale;
                }
            }
        }
    }
    let out = Tensor::new(vec![d * d, h, w], out);
    tape.push(out, vec![src, tar], move |g| {
        let mut gs = vec![0.0; c * n];
        let mut gt = vec![0.0; c * n];
        for du in -ri..=ri {
            for dv in -ri..=ri {
                let ch = ((du + ri) as usize * d + (dv + ri) as usize) * n;
                for y in 0..h as i64 {
                    let ys = y + du;
                    if ys < 0 || ys >= h as i64 {
                        continue;
                    }
                    for x in 0..w as i64 {
                        let xs = x + dv;
                        if xs < 0 || xs >= w as i64 {
                            continue;
                        }
                        let ps = ys as usize * w + xs as usize;
                        let pt = y as usize * w + x as usize;
                        let gv = g.data()[ch + pt] * scale;
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            gs[ci * n + ps] += gv * tv.data()[ci * n + pt];
                            gt[ci * n + pt] += gv * sv.data()[ci * n + ps];
                        }
                    }
                }
            }
        }
        vec![
            Tensor::new(vec![c, h, w], gs),
            Tensor::new(vec![c, h, w], gt),
        ]
    })
}

/// Mean of all entries (diagnostic scalar; used by gradient checks).
pub fn mean_all(tape: &mut Tape, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let n = xv.numel() as f64;
    let m = xv.data().iter().sum::<f64>() / n;
    tape.push(Tensor::scalar(m), vec![x], move |g| {
        let go = g.item() / n;
        vec![Tensor::new(xv.shape().to_vec(), vec![go; xv.numel()])]
    })
}
