//! Forward and backward kernels for the spatial operations used by the
//! autodiff graph. All tensors are channel-major `[C, H, W]`.

use crate::tensor::Tensor;

/// `c = alpha * a * b + beta * c` for row-major matrices, with optional
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers' shape logic; the
    // strides above address exactly an m×k, k×n and m×n block.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

/// Row-major matrix product `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, 0.0, &mut c);
    c
}

/// `aᵀ (k×m)ᵀ · b (k×n)` where `a` is stored k×m.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, true, b, false, 0.0, &mut c);
    c
}

/// `a (m×k) · bᵀ` where `b` is stored n×k.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, true, 0.0, &mut c);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * n];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.h_out * g.w_out;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation. `weight` is `[C_out, C_in, k, k]`, `bias` `[C_out]`.
/// Returns the output and the unfolded input kept for the backward pass.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeometry,
) -> (Tensor, Option<Vec<f64>>) {
    let c_out = weight.shape()[0];
    let kk = g.c_in * g.k * g.k;
    let n = g.h_out * g.w_out;
    let mut out = vec![0.0; c_out * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    let cols = if g.is_pointwise() {
        gemm(c_out, kk, n, weight.data(), false, x.data(), false, beta, &mut out);
        None
    } else {
        let cols = im2col(x.data(), g);
        gemm(c_out, kk, n, weight.data(), false, &cols, false, beta, &mut out);
        Some(cols)
    };
    (
        Tensor::from_vec(&[c_out, g.h_out, g.w_out], out).expect("conv output shape"),
        cols,
    )
}

/// Gradients of a convolution with respect to input, weight and bias.
/// `cols` is the unfolded input from the forward pass; it is recomputed when
/// absent and only used for the weight gradient.
pub fn conv2d_backward(
    x: &Tensor,
    cols: Option<&[f64]>,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let c_out = weight.shape()[0];
    let kk = g.c_in * g.k * g.k;
    let n = g.h_out * g.w_out;
    let dy = grad_out.data();

    let dw = need_weight.then(|| {
        let dw = match cols {
            Some(c) => matmul_nt(dy, c, c_out, n, kk),
            None if g.is_pointwise() => matmul_nt(dy, x.data(), c_out, n, kk),
            None => matmul_nt(dy, &im2col(x.data(), g), c_out, n, kk),
        };
        Tensor::from_vec(weight.shape(), dw).expect("conv weight grad shape")
    });
    let db: Vec<f64> = dy.chunks(n).map(|r| r.iter().sum()).collect();

    let dx = need_input.then(|| {
        let dcols = matmul_tn(weight.data(), dy, kk, c_out, n);
        let data = if g.is_pointwise() { dcols } else { col2im(&dcols, g) };
        Tensor::from_vec(&[g.c_in, g.h, g.w], data).expect("conv input grad shape")
    });
    (
        dx,
        dw,
        Tensor::from_vec(&[c_out], db).expect("conv bias grad shape"),
    )
}

/// One bilinear tap set for a continuous coordinate; `None` when the
/// coordinate is non-finite or outside `[0, W-1] × [0, H-1]`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

pub fn bilinear_tap(u: f64, v: f64, h: usize, w: usize) -> Option<BilinearTap> {
    if !(u.is_finite() && v.is_finite()) {
        return None;
    }
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    Some(BilinearTap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: u - x0 as f64,
        fy: v - y0 as f64,
    })
}

/// Samples `image [C, H, W]` at `coords [2, H', W']` (channel 0 = u, 1 = v).
pub fn grid_sample_forward(image: &Tensor, coords: &Tensor) -> (Tensor, Vec<bool>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ho, wo) = (coords.shape()[1], coords.shape()[2]);
    let n = ho * wo;
    let (us, vs) = coords.data().split_at(n);
    let img = image.data();
    let mut out = vec![0.0; c * n];
    let mut valid = vec![false; n];
    for p in 0..n {
        let Some(t) = bilinear_tap(us[p], vs[p], h, w) else {
            continue;
        };
        valid[p] = true;
        let w00 = (1.0 - t.fx) * (1.0 - t.fy);
        let w01 = t.fx * (1.0 - t.fy);
        let w10 = (1.0 - t.fx) * t.fy;
        let w11 = t.fx * t.fy;
        for ci in 0..c {
            let base = ci * h * w;
            out[ci * n + p] = w00 * img[base + t.y0 * w + t.x0]
                + w01 * img[base + t.y0 * w + t.x1]
                + w10 * img[base + t.y1 * w + t.x0]
                + w11 * img[base + t.y1 * w + t.x1];
        }
    }
    (
        Tensor::from_vec(&[c, ho, wo], out).expect("sample output shape"),
        valid,
    )
}

pub fn grid_sample_backward(
    image: &Tensor,
    coords: &Tensor,
    grad_out: &Tensor,
    need_image: bool,
    need_coords: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ho, wo) = (coords.shape()[1], coords.shape()[2]);
    let n = ho * wo;
    let (us, vs) = coords.data().split_at(n);
    let img = image.data();
    let go = grad_out.data();
    let mut gi = need_image.then(|| vec![0.0; c * h * w]);
    let mut gc = need_coords.then(|| vec![0.0; 2 * n]);
    for p in 0..n {
        let Some(t) = bilinear_tap(us[p], vs[p], h, w) else {
            continue;
        };
        let (mut du, mut dv) = (0.0, 0.0);
        for ci in 0..c {
            let g = go[ci * n + p];
            if g == 0.0 {
                continue;
            }
            let base = ci * h * w;
            let i00 = base + t.y0 * w + t.x0;
            let i01 = base + t.y0 * w + t.x1;
            let i10 = base + t.y1 * w + t.x0;
            let i11 = base + t.y1 * w + t.x1;
            if let Some(gi) = gi.as_mut() {
                gi[i00] += g * (1.0 - t.fx) * (1.0 - t.fy);
                gi[i01] += g * t.fx * (1.0 - t.fy);
                gi[i10] += g * (1.0 - t.fx) * t.fy;
                gi[i11] += g * t.fx * t.fy;
            }
            if gc.is_some() {
                du += g * ((1.0 - t.fy) * (img[i01] - img[i00]) + t.fy * (img[i11] - img[i10]));
                dv += g * ((1.0 - t.fx) * (img[i10] - img[i00]) + t.fx * (img[i11] - img[i01]));
            }
        }
        if let Some(gc) = gc.as_mut() {
            gc[p] = du;
            gc[n + p] = dv;
        }
    }
    (
        gi.map(|d| Tensor::from_vec(image.shape(), d).expect("image grad shape")),
        gc.map(|d| Tensor::from_vec(coords.shape(), d).expect("coord grad shape")),
    )
}

/// Local correlation over a `(2r+1)²` displacement window, normalised by the
/// channel count. Output channel `(dy + r) * (2r + 1) + (dx + r)` holds
/// `mean_c a[c, y, x] * b[c, y + dy, x + dx]` (zero outside `b`).
pub fn correlation_forward(a: &Tensor, b: &Tensor, radius: usize) -> Tensor {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let side = 2 * radius + 1;
    let r = radius as isize;
    let inv_c = 1.0 / c as f64;
    let mut out = vec![0.0; side * side * h * w];
    let (ad, bd) = (a.data(), b.data());
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dy + r) as usize) * side + (dx + r) as usize;
            let dst = &mut out[d * h * w..(d + 1) * h * w];
            for ci in 0..c {
                let pa = &ad[ci * h * w..(ci + 1) * h * w];
                let pb = &bd[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx.max(0)).max(0) as usize;
                    for x in x_lo..x_hi {
                        let xx = (x as isize + dx) as usize;
                        dst[y * w + x] += pa[y * w + x] * pb[yy as usize * w + xx] * inv_c;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[side * side, h, w], out).expect("correlation shape")
}

pub fn correlation_backward(
    a: &Tensor,
    b: &Tensor,
    radius: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let side = 2 * radius + 1;
    let r = radius as isize;
    let inv_c = 1.0 / c as f64;
    let mut ga = vec![0.0; c * h * w];
    let mut gb = vec![0.0; c * h * w];
    let (ad, bd, go) = (a.data(), b.data(), grad_out.data());
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dy + r) as usize) * side + (dx + r) as usize;
            let g = &go[d * h * w..(d + 1) * h * w];
            for ci in 0..c {
                let off = ci * h * w;
                for y in 0..h {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx.max(0)).max(0) as usize;
                    for x in x_lo..x_hi {
                        let xx = (x as isize + dx) as usize;
                        let gv = g[y * w + x] * inv_c;
                        let ia = off + y * w + x;
                        let ib = off + yy as usize * w + xx;
                        ga[ia] += gv * bd[ib];
                        gb[ib] += gv * ad[ia];
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(a.shape(), ga).expect("corr grad shape"),
        Tensor::from_vec(b.shape(), gb).expect("corr grad shape"),
    )
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j.clamp(0, n - 1) as usize
}

/// 3×3 box filter with reflection padding; output has the input's shape.
pub fn avg_pool3_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let p = &xd[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in -1..=1 {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1 {
                        s += p[yy * w + reflect(xx as isize + dx, w)];
                    }
                }
                out[(ci * h + y) * w + xx] = s / 9.0;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("pool shape")
}

pub fn avg_pool3_backward(grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let go = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ci in 0..c {
        let off = ci * h * w;
        for y in 0..h {
            for xx in 0..w {
                let g = go[off + y * w + xx] / 9.0;
                for dy in -1..=1 {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1 {
                        gx[off + yy * w + reflect(xx as isize + dx, w)] += g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(grad_out.shape(), gx).expect("pool grad shape")
}

pub fn upsample_nearest2_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn3(c, 2 * h, 2 * w, |ci, y, xx| x.at3(ci, y / 2, xx / 2))
}

pub fn upsample_nearest2_backward(grad_out: &Tensor) -> Tensor {
    let (c, h2, w2) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let mut g = Tensor::zeros(&[c, h2 / 2, w2 / 2]);
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let v = g.at3(ci, y / 2, x / 2) + grad_out.at3(ci, y, x);
                g.set3(ci, y / 2, x / 2, v);
            }
        }
    }
    g
}

/// Half-pixel-centred source taps for a ×2 bilinear upsample along one axis.
fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    Tensor::from_fn3(c, 2 * h, 2 * w, |ci, y, xx| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[xx];
        (1.0 - fy) * ((1.0 - fx) * x.at3(ci, y0, x0) + fx * x.at3(ci, y0, x1))
            + fy * ((1.0 - fx) * x.at3(ci, y1, x0) + fx * x.at3(ci, y1, x1))
    })
}

pub fn upsample_bilinear2_backward(grad_out: &Tensor) -> Tensor {
    let (c, h2, w2) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut g = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            let (y0, y1, fy) = ty[y];
            for xx in 0..w2 {
                let (x0, x1, fx) = tx[xx];
                let v = grad_out.at3(ci, y, xx);
                g[(ci * h + y0) * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                g[(ci * h + y0) * w + x1] += v * (1.0 - fy) * fx;
                g[(ci * h + y1) * w + x0] += v * fy * (1.0 - fx);
                g[(ci * h + y1) * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], g).expect("upsample grad shape")
}
