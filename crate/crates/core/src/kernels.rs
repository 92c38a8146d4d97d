//! Forward and backward kernels for the tensor operations used by the models.
//!
//! All kernels are single-threaded and iterate in a fixed order, so results are
//! bit-reproducible for identical inputs.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Output spatial size of a stride-1 convolution.
pub fn conv_out_size(size: usize, kernel: usize, pad: usize) -> usize {
    size + 2 * pad + 1 - kernel
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                // valid ox range: 0 <= ox + kx - pad < w
                let ox_lo = pad.saturating_sub(kx).min(ow);
                let ox_hi = (w + pad).saturating_sub(kx).min(ow).max(ox_lo);
                for oy in 0..oh {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    d[..ox_lo].fill(T::zero());
                    let ix0 = ox_lo + kx - pad;
                    d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    d[ox_hi..].fill(T::zero());
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                let ox_lo = pad.saturating_sub(kx).min(ow);
                let ox_hi = (w + pad).saturating_sub(kx).min(ow).max(ox_lo);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let ix0 = ox_lo + kx - pad;
                    let s = &src[oy * ow + ox_lo..oy * ow + ox_hi];
                    for (d, &v) in dst[ix0..ix0 + s.len()].iter_mut().zip(s) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution with symmetric zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, k, k2] = weight.shape();
    assert_eq!(
        cin, wcin,
        "conv input channels {cin} != weight channels {wcin}"
    );
    assert_eq!(k, k2, "only square kernels are supported");
    assert!(
        h + 2 * pad >= k && w + 2 * pad >= k,
        "kernel larger than padded input"
    );
    let (oh, ow) = (conv_out_size(h, k, pad), conv_out_size(w, k, pad));
    let p = oh * ow;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let direct = k == 1 && pad == 0;
    let mut col = if direct {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    let wmat = MatRef::new(weight.data(), cout, kk);
    for b in 0..n {
        let xs = x.sample(b);
        let cols: &[T] = if direct {
            xs
        } else {
            im2col(xs, cin, h, w, k, pad, oh, ow, &mut col);
            &col
        };
        let os = out.sample_mut(b);
        if let Some(bias) = bias {
            for (co, chunk) in os.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), wmat, MatRef::new(cols, kk, p), beta, os);
    }
    out
}

/// Gradients of [`conv2d`]. Returns `(dx, dw, db)`, each only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let p = oh * ow;
    let kk = cin * k * k;
    let direct = k == 1 && pad == 0;

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let db = need_db.then(|| {
        let mut db = Tensor::zeros([cout, 1, 1, 1]);
        for b in 0..n {
            for (co, chunk) in grad_out.sample(b).chunks(p).enumerate() {
                let s: T = chunk.iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return (dx, dw, db);
    }

    let mut col = vec![T::zero(); if direct { 0 } else { kk * p }];
    let mut dcol = vec![T::zero(); if need_dx && !direct { kk * p } else { 0 }];
    let wmat = MatRef::new(weight.data(), cout, kk);
    for b in 0..n {
        let g = MatRef::new(grad_out.sample(b), cout, p);
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if direct {
                x.sample(b)
            } else {
                im2col(x.sample(b), cin, h, w, k, pad, oh, ow, &mut col);
                &col
            };
            gemm(
                T::one(),
                g,
                MatRef::new(cols, kk, p).t(),
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            if direct {
                gemm(T::one(), wmat.t(), g, T::zero(), dx.sample_mut(b));
            } else {
                gemm(T::one(), wmat.t(), g, T::zero(), &mut dcol);
                col2im_add(&dcol, cin, h, w, k, pad, oh, ow, dx.sample_mut(b));
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(
        h >= 2 && w >= 2,
        "avg_pool2 needs at least 2x2 input, got {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &s[2 * oy * w..2 * oy * w + w];
            let r1 = &s[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
            for ox in 0..ow {
                d[oy * ow + ox] =
                    (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(input_shape: [usize; 4], grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[(plane * oh + oy) * ow + ox] * quarter;
                for dy in 0..2 {
                    let row = (plane * h + 2 * oy + dy) * w;
                    d[row + 2 * ox] = v;
                    d[row + 2 * ox + 1] = v;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let s = x.data();
    let d = out.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            let src = &s[(plane * h + y / 2) * w..(plane * h + y / 2 + 1) * w];
            let dst = &mut d[(plane * oh + y) * ow..(plane * oh + y + 1) * ow];
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[x / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Scalar>(
    input_shape: [usize; 4],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let i = (plane * h + y / 2) * w + x / 2;
                d[i] = d[i] + g[(plane * oh + y) * ow + x];
            }
        }
    }
    dx
}

/// Mean over the spatial grid: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).expect("size fits");
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: [usize; 4],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [_, _, h, w] = input_shape;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).expect("size fits");
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    dx
}

/// Per-sample affine map from output pixel index `(x, y)` to input pixel coordinates:
/// `x_in = m[0] x + m[1] y + m[2]`, `y_in = m[3] x + m[4] y + m[5]`.
pub type AffineCoeffs = [f64; 6];

fn bilinear_taps(xi: f64, yi: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    // Returns (flat index, weight); out-of-bounds taps get weight 0 and index 0.
    let x0 = xi.floor();
    let y0 = yi.floor();
    let fx = xi - x0;
    let fy = yi - y0;
    let mut taps = [(0usize, 0.0f64); 4];
    let corners = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ];
    for (t, &(dx, dy, wgt)) in taps.iter_mut().zip(&corners) {
        let cx = x0 + dx;
        let cy = y0 + dy;
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h && wgt != 0.0 {
            *t = (cy as usize * w + cx as usize, wgt);
        }
    }
    taps
}

/// Bilinear resampling under per-sample affine maps; samples outside the input read zero.
pub fn affine_sample<T: Scalar>(x: &Tensor<T>, coeffs: &[AffineCoeffs]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(coeffs.len(), n, "one affine map per sample");
    let mut out = Tensor::zeros(x.shape());
    for (b, m) in coeffs.iter().enumerate() {
        let xs = x.sample(b);
        let os = out.sample_mut(b);
        for oy in 0..h {
            for ox in 0..w {
                let (fx, fy) = (ox as f64, oy as f64);
                let taps = bilinear_taps(
                    m[0] * fx + m[1] * fy + m[2],
                    m[3] * fx + m[4] * fy + m[5],
                    h,
                    w,
                );
                for ch in 0..c {
                    let plane = &xs[ch * h * w..(ch + 1) * h * w];
                    let mut acc = T::zero();
                    for &(i, wgt) in &taps {
                        if wgt != 0.0 {
                            acc = acc + plane[i] * T::from_f64_lossy(wgt);
                        }
                    }
                    os[(ch * h + oy) * w + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn affine_sample_backward<T: Scalar>(
    input_shape: [usize; 4],
    coeffs: &[AffineCoeffs],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [_, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(input_shape);
    for (b, m) in coeffs.iter().enumerate() {
        let gs = grad_out.sample(b);
        let ds = dx.sample_mut(b);
        for oy in 0..h {
            for ox in 0..w {
                let (fx, fy) = (ox as f64, oy as f64);
                let taps = bilinear_taps(
                    m[0] * fx + m[1] * fy + m[2],
                    m[3] * fx + m[4] * fy + m[5],
                    h,
                    w,
                );
                for ch in 0..c {
                    let g = gs[(ch * h + oy) * w + ox];
                    let plane = &mut ds[ch * h * w..(ch + 1) * h * w];
                    for &(i, wgt) in &taps {
                        if wgt != 0.0 {
                            plane[i] = plane[i] + g * T::from_f64_lossy(wgt);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mirrors the width axis of the samples whose flag is set. Its own adjoint.
pub fn flip_width<T: Scalar>(x: &Tensor<T>, flags: &[bool]) -> Tensor<T> {
    let [n, _, _, w] = x.shape();
    assert_eq!(flags.len(), n, "one flag per sample");
    let mut out = x.clone();
    for (b, &flip) in flags.iter().enumerate() {
        if !flip {
            continue;
        }
        for row in out.sample_mut(b).chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Bilinear resize with half-pixel centres, edge-clamped (non-differentiable helper).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let s = x.data();
    let d = out.data_mut();
    for plane in 0..n * c {
        let p = &s[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = |y: usize, x: usize| p[y * w + x].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                d[(plane * oh + oy) * ow + ox] = T::from_f64_lossy(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}
