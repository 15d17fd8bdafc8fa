//! Tensor primitives with analytic backward passes.
//!
//! Everything here is a free function, generic over the float type, so the
//! same code path serves f32 training and f64 finite-difference checks.
//! Batched images are `(B, C, H, W)`; convolutions go through im2col plus
//! one GEMM per call, which is where nearly all training time is spent.

use ndarray::{Array1, Array2, Array4, NdFloat, Zip};

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(B,C,H,W)` into `(C*kh*kw, B*OH*OW)` columns with zero padding.
pub fn im2col<F: NdFloat>(
    x: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut cols = Array2::<F>::zeros((c * kh * kw, b * oh * ow));
    let xs = x.as_slice().expect("input must be contiguous");
    let cs = cols.as_slice_mut().unwrap();
    let col_w = b * oh * ow;
    for bi in 0..b {
        for ci in 0..c {
            let xbase = (bi * c + ci) * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let rbase = row * col_w + bi * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let obase = rbase + oy * ow;
                        if stride == 1 {
                            // contiguous span: ix = ox + kx - pad
                            let off = kx as isize - pad as isize;
                            let ox0 = (-off).max(0) as usize;
                            let ox1 = ((w as isize - off).min(ow as isize)).max(0) as usize;
                            if ox1 > ox0 {
                                let src = xbase + iy * w + (ox0 as isize + off) as usize;
                                cs[obase + ox0..obase + ox1]
                                    .copy_from_slice(&xs[src..src + (ox1 - ox0)]);
                            }
                        } else {
                            // strided gather over the analytically valid range
                            let off = kx as isize - pad as isize;
                            let ox0 = if off >= 0 {
                                0
                            } else {
                                ((-off) as usize).div_ceil(stride)
                            };
                            let ox1 = if (w as isize) > off {
                                (((w as isize - 1 - off) as usize) / stride + 1).min(ow)
                            } else {
                                0
                            };
                            let row = xbase + iy * w;
                            for ox in ox0..ox1 {
                                let ix = (ox * stride) as isize + off;
                                cs[obase + ox] = xs[row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold `(C*kh*kw, B*OH*OW)` columns back into `(B,C,H,W)`, accumulating
/// overlaps. Adjoint of [`im2col`].
pub fn col2im<F: NdFloat>(
    cols: &Array2<F>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut x = Array4::<F>::zeros((b, c, h, w));
    let cs = cols.as_slice().expect("columns must be contiguous");
    let xs = x.as_slice_mut().unwrap();
    let col_w = b * oh * ow;
    for bi in 0..b {
        for ci in 0..c {
            let xbase = (bi * c + ci) * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let rbase = row * col_w + bi * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let obase = rbase + oy * ow;
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let ox0 = (-off).max(0) as usize;
                            let ox1 = ((w as isize - off).min(ow as isize)).max(0) as usize;
                            if ox1 > ox0 {
                                let dst = xbase + iy * w + (ox0 as isize + off) as usize;
                                let src = obase + ox0;
                                for i in 0..ox1 - ox0 {
                                    xs[dst + i] += cs[src + i];
                                }
                            }
                        } else {
                            let off = kx as isize - pad as isize;
                            let ox0 = if off >= 0 {
                                0
                            } else {
                                ((-off) as usize).div_ceil(stride)
                            };
                            let ox1 = if (w as isize) > off {
                                (((w as isize - 1 - off) as usize) / stride + 1).min(ow)
                            } else {
                                0
                            };
                            let row = xbase + iy * w;
                            for ox in ox0..ox1 {
                                let ix = (ox * stride) as isize + off;
                                xs[row + ix as usize] += cs[obase + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}


/// `a (m, k) . b (k, n)` for small `k` and large `n`: blocked rank-1
/// updates over contiguous rows. Beats a general GEMM when the inner
/// dimension is a few hundred or less, which covers every convolution in
/// this crate. Accumulation order is fixed, so results are deterministic.
pub fn gemm_small_k<F: NdFloat>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "gemm_small_k inner dims");
    let mut c = Array2::<F>::zeros((m, n));
    let a_s = a.as_slice().expect("a contiguous");
    let b_s = b.as_slice().expect("b contiguous");
    let c_s = c.as_slice_mut().unwrap();
    const CHUNK: usize = 4096;
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        for i in 0..m {
            let crow = &mut c_s[i * n + start..i * n + start + len];
            for j in 0..k {
                let w = a_s[i * k + j];
                if w == F::zero() {
                    continue;
                }
                let brow = &b_s[j * n + start..j * n + start + len];
                for t in 0..len {
                    crow[t] += w * brow[t];
                }
            }
        }
        start += len;
    }
    c
}

/// `a (m, n) . b (k, n)^T` for small `m`, `k` and large `n`: chunked dot
/// products with eight independent accumulators per pair, which keeps the
/// reduction vectorizable while staying deterministic.
pub fn gemm_nt<F: NdFloat>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let (m, n) = a.dim();
    let (k, n2) = b.dim();
    assert_eq!(n, n2, "gemm_nt inner dims");
    let a_s = a.as_slice().expect("a contiguous");
    let b_s = b.as_slice().expect("b contiguous");
    let mut c = Array2::<F>::zeros((m, k));
    let c_s = c.as_slice_mut().unwrap();
    for i in 0..m {
        let arow = &a_s[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b_s[j * n..(j + 1) * n];
            let mut acc = [F::zero(); 8];
            let mut t = 0;
            while t + 8 <= n {
                for lane in 0..8 {
                    acc[lane] += arow[t + lane] * brow[t + lane];
                }
                t += 8;
            }
            let mut tail = F::zero();
            while t < n {
                tail += arow[t] * brow[t];
                t += 1;
            }
            let total = ((acc[0] + acc[1]) + (acc[2] + acc[3]))
                + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
                + tail;
            c_s[i * k + j] = total;
        }
    }
    c
}

/// 2D convolution. Weights are `(Cout, Cin, kh, kw)`.
pub fn conv2d<F: NdFloat>(
    x: &Array4<F>,
    w: &Array4<F>,
    bias: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, cin, h, win) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(win, kw, stride, pad);
    // split the batch across threads; each half's output is disjoint, so
    // the result is bitwise independent of scheduling
    if b >= 2 {
        let mid = b / 2;
        let (x0, x1) = (
            x.slice(ndarray::s![..mid, .., .., ..]).to_owned(),
            x.slice(ndarray::s![mid.., .., .., ..]).to_owned(),
        );
        let (y0, y1) = rayon::join(
            || conv2d_single(&x0, w, bias, stride, pad),
            || conv2d_single(&x1, w, bias, stride, pad),
        );
        let mut y = Array4::<F>::zeros((b, cout, oh, ow));
        y.slice_mut(ndarray::s![..mid, .., .., ..]).assign(&y0);
        y.slice_mut(ndarray::s![mid.., .., .., ..]).assign(&y1);
        return y;
    }
    conv2d_single(x, w, bias, stride, pad)
}

fn conv2d_single<F: NdFloat>(
    x: &Array4<F>,
    w: &Array4<F>,
    bias: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, cin, h, win) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(win, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap()
        .to_owned();
    let ymat = gemm_small_k(&wmat, &cols); // (Cout, B*OH*OW)
    let mut y = Array4::<F>::zeros((b, cout, oh, ow));
    let ys = y.as_slice_mut().unwrap();
    let ym = ymat.as_slice().unwrap();
    for co in 0..cout {
        let bv = bias[co];
        for bi in 0..b {
            let src = co * (b * oh * ow) + bi * oh * ow;
            let dst = (bi * cout + co) * oh * ow;
            for i in 0..oh * ow {
                ys[dst + i] = ym[src + i] + bv;
            }
        }
    }
    y
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_data<F: NdFloat>(
    w: &Array4<F>,
    dy: &Array4<F>,
    input_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, cout, _, _) = dy.dim();
    let (wcout, cin, _, _) = w.dim();
    assert_eq!(cout, wcout, "conv2d_backward_data channel mismatch");
    if b >= 2 {
        let mid = b / 2;
        let (d0, d1) = (
            dy.slice(ndarray::s![..mid, .., .., ..]).to_owned(),
            dy.slice(ndarray::s![mid.., .., .., ..]).to_owned(),
        );
        let (x0, x1) = rayon::join(
            || conv2d_backward_data_single(w, &d0, input_hw, stride, pad),
            || conv2d_backward_data_single(w, &d1, input_hw, stride, pad),
        );
        let mut dx = Array4::<F>::zeros((b, cin, input_hw.0, input_hw.1));
        dx.slice_mut(ndarray::s![..mid, .., .., ..]).assign(&x0);
        dx.slice_mut(ndarray::s![mid.., .., .., ..]).assign(&x1);
        return dx;
    }
    conv2d_backward_data_single(w, dy, input_hw, stride, pad)
}

fn conv2d_backward_data_single<F: NdFloat>(
    w: &Array4<F>,
    dy: &Array4<F>,
    input_hw: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, cout, _, _) = dy.dim();
    let (_, cin, kh, kw) = w.dim();
    let dymat = dy_to_mat(dy);
    let wmat_t = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap()
        .t()
        .as_standard_layout()
        .into_owned();
    let dcols = gemm_small_k(&wmat_t, &dymat);
    col2im(&dcols, b, cin, input_hw.0, input_hw.1, kh, kw, stride, pad)
}

/// Gradients of a convolution with respect to weights and bias.
pub fn conv2d_backward_weights<F: NdFloat>(
    x: &Array4<F>,
    dy: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array1<F>) {
    let b = x.dim().0;
    if b >= 2 {
        // halves reduce in a fixed order, so the sum is bitwise stable
        let mid = b / 2;
        let (x0, x1) = (
            x.slice(ndarray::s![..mid, .., .., ..]).to_owned(),
            x.slice(ndarray::s![mid.., .., .., ..]).to_owned(),
        );
        let (d0, d1) = (
            dy.slice(ndarray::s![..mid, .., .., ..]).to_owned(),
            dy.slice(ndarray::s![mid.., .., .., ..]).to_owned(),
        );
        let ((dw0, db0), (dw1, db1)) = rayon::join(
            || conv2d_backward_weights_single(&x0, &d0, kh, kw, stride, pad),
            || conv2d_backward_weights_single(&x1, &d1, kh, kw, stride, pad),
        );
        return (dw0 + &dw1, db0 + &db1);
    }
    conv2d_backward_weights_single(x, dy, kh, kw, stride, pad)
}

fn conv2d_backward_weights_single<F: NdFloat>(
    x: &Array4<F>,
    dy: &Array4<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array1<F>) {
    let (_, cin, _, _) = x.dim();
    let (_, cout, _, _) = dy.dim();
    let cols = im2col(x, kh, kw, stride, pad);
    let dymat = dy_to_mat(dy);
    let dwmat = gemm_nt(&dymat, &cols);
    let dw = dwmat
        .into_shape_with_order((cout, cin, kh, kw))
        .unwrap();
    let mut db = Array1::<F>::zeros(cout);
    for ((_, co, _, _), v) in dy.indexed_iter() {
        db[co] += *v;
    }
    (dw, db)
}

/// Reorder `(B,Cout,OH,OW)` into the `(Cout, B*OH*OW)` GEMM layout.
fn dy_to_mat<F: NdFloat>(dy: &Array4<F>) -> Array2<F> {
    let (b, cout, oh, ow) = dy.dim();
    let mut m = Array2::<F>::zeros((cout, b * oh * ow));
    let ms = m.as_slice_mut().unwrap();
    let ds = dy.as_slice().expect("dy must be contiguous");
    for bi in 0..b {
        for co in 0..cout {
            let src = (bi * cout + co) * oh * ow;
            let dst = co * (b * oh * ow) + bi * oh * ow;
            ms[dst..dst + oh * ow].copy_from_slice(&ds[src..src + oh * ow]);
        }
    }
    m
}

/// Fully connected layer: `x (B,In)`, `w (Out,In)` -> `(B,Out)`.
pub fn linear<F: NdFloat>(x: &Array2<F>, w: &Array2<F>, bias: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        row += bias;
    }
    y
}

pub fn linear_backward<F: NdFloat>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}

pub fn leaky_relu<F: NdFloat>(x: &Array4<F>, slope: F) -> Array4<F> {
    x.mapv(|v| if v >= F::zero() { v } else { v * slope })
}

/// Derivative mask of leaky relu taken from the pre-activation.
pub fn leaky_relu_mask<F: NdFloat>(x: &Array4<F>, slope: F) -> Array4<F> {
    x.mapv(|v| if v >= F::zero() { F::one() } else { slope })
}

pub fn leaky_relu_backward<F: NdFloat>(x: &Array4<F>, dy: &Array4<F>, slope: F) -> Array4<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v < F::zero() {
            *d = *d * slope;
        }
    });
    dx
}

pub fn tanh<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.tanh())
}

/// Backward through tanh given the forward output.
pub fn tanh_backward<F: NdFloat>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &v| {
        *d = *d * (F::one() - v * v);
    });
    dx
}

pub fn sigmoid<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Backward through sigmoid given the forward output.
pub fn sigmoid_backward<F: NdFloat>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &v| {
        *d = *d * v * (F::one() - v);
    });
    dx
}

/// Per-(sample, channel) normalization cache.
pub struct NormCache<F> {
    pub xhat: Array4<F>,
    pub inv_std: Array2<F>,
}

/// Normalize each `(b,c)` plane to zero mean and unit variance.
pub fn instance_norm<F: NdFloat>(x: &Array4<F>, eps: F) -> NormCache<F> {
    let (b, c, h, w) = x.dim();
    let n = F::from(h * w).unwrap();
    let mut xhat = x.clone();
    let mut inv_std = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut plane = xhat.slice_mut(ndarray::s![bi, ci, .., ..]);
            let mean = plane.sum() / n;
            plane.mapv_inplace(|v| v - mean);
            let var = plane.iter().fold(F::zero(), |acc, &v| acc + v * v) / n;
            let is = F::one() / (var + eps).sqrt();
            plane.mapv_inplace(|v| v * is);
            inv_std[(bi, ci)] = is;
        }
    }
    NormCache { xhat, inv_std }
}

/// Backward of [`instance_norm`] given the gradient w.r.t. the normalized
/// output.
pub fn instance_norm_backward<F: NdFloat>(cache: &NormCache<F>, dxhat: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = cache.xhat.dim();
    let n = F::from(h * w).unwrap();
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let xh = cache.xhat.slice(ndarray::s![bi, ci, .., ..]);
            let dh = dxhat.slice(ndarray::s![bi, ci, .., ..]);
            let sum_d = dh.sum();
            let sum_dx = Zip::from(&dh).and(&xh).fold(F::zero(), |acc, &d, &x| acc + d * x);
            let is = cache.inv_std[(bi, ci)];
            let mut out = dx.slice_mut(ndarray::s![bi, ci, .., ..]);
            Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
                *o = is * (d - sum_d / n - x * sum_dx / n);
            });
        }
    }
    dx
}

/// Area-averaging downsample by an integer factor (`k x k` mean pooling).
pub fn avg_pool<F: NdFloat>(x: &Array4<F>, k: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    assert!(h % k == 0 && w % k == 0, "avg_pool size must divide input");
    let (oh, ow) = (h / k, w / k);
    let inv = F::one() / F::from(k * k).unwrap();
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x[(bi, ci, oy * k + ky, ox * k + kx)];
                        }
                    }
                    y[(bi, ci, oy, ox)] = acc * inv;
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward<F: NdFloat>(dy: &Array4<F>, k: usize) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let inv = F::one() / F::from(k * k).unwrap();
    let mut dx = Array4::<F>::zeros((b, c, oh * k, ow * k));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[(bi, ci, oy, ox)] * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            dx[(bi, ci, oy * k + ky, ox * k + kx)] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor upsample by an integer factor.
pub fn upsample_nearest<F: NdFloat>(x: &Array4<F>, k: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, h * k, w * k));
    let xs = x.as_slice().expect("input must be contiguous");
    let ys = y.as_slice_mut().unwrap();
    let (ow, oh) = (w * k, h * k);
    for plane in 0..b * c {
        let src_base = plane * h * w;
        let dst_base = plane * oh * ow;
        for oy in 0..oh {
            let src_row = src_base + (oy / k) * w;
            let dst_row = dst_base + oy * ow;
            for ox in 0..ow {
                ys[dst_row + ox] = xs[src_row + ox / k];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward<F: NdFloat>(dy: &Array4<F>, k: usize) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    assert!(oh % k == 0 && ow % k == 0);
    let mut dx = Array4::<F>::zeros((b, c, oh / k, ow / k));
    let ds = dy.as_slice().expect("dy must be contiguous");
    let xs = dx.as_slice_mut().unwrap();
    let (w, h) = (ow / k, oh / k);
    for plane in 0..b * c {
        let src_base = plane * oh * ow;
        let dst_base = plane * h * w;
        for oy in 0..oh {
            let src_row = src_base + oy * ow;
            let dst_row = dst_base + (oy / k) * w;
            for ox in 0..ow {
                xs[dst_row + ox / k] += ds[src_row + ox];
            }
        }
    }
    dx
}

/// Mean over spatial dims: `(B,C,H,W)` -> `(B,C)`.
pub fn global_avg_pool<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let n = F::from(h * w).unwrap();
    let mut y = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[(bi, ci)] = x.slice(ndarray::s![bi, ci, .., ..]).sum() / n;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: NdFloat>(
    dy: &Array2<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (b, c) = dy.dim();
    let inv = F::one() / F::from(h * w).unwrap();
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(dy[(bi, ci)] * inv);
        }
    }
    dx
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels<F: NdFloat>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).unwrap()
}
