//! Dense kernels used by the tape. Activations are stored channel-major with
//! the batch inside (`C x N x H x W`) so that 1x1 convolutions, linear layers
//! and per-channel normalization all act on contiguous rows.

/// A `C x N x H x W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_data(c: usize, n: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    /// Per-channel row length (`N * H * W`).
    #[inline]
    pub fn row(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }
}

/// `C = A * B + beta * C` with explicit strides; `C` has row stride `c_rs`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
    assert!(k == 0 || b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    assert!(c.len() >= (m - 1) * c_rs + n);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn n_weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
    /// falls inside `0..w`.
    #[inline]
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(wo);
        let hi = if w + self.pad > kx {
            ((w + self.pad - kx - 1) / self.stride + 1).min(wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Column matrix `[cin*k*k][ho*wo]` of one sample. Every entry is written.
fn im2col_sample(x: &Tensor, n: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw = ho * wo;
    let plane = x.h * x.w;
    for ci in 0..g.cin {
        let src = &x.data[(ci * x.n + n) * plane..(ci * x.n + n + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                let (lo, hi) = g.valid_cols(kx, x.w, wo);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = srow[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds one sample's column gradient into `dx`.
fn col2im_sample(cols: &[f64], n: usize, g: &ConvGeom, dx: &mut Tensor, ho: usize, wo: usize) {
    let hw = ho * wo;
    let plane = dx.h * dx.w;
    let (h, w, nn) = (dx.h, dx.w, dx.n);
    for ci in 0..g.cin {
        let dst = &mut dx.data[(ci * nn + n) * plane..(ci * nn + n + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols[r * hw..(r + 1) * hw];
                let (lo, hi) = g.valid_cols(kx, w, wo);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        for (d, s) in drow[ix0..ix0 + hi - lo].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (j, s) in srow.iter().enumerate() {
                            drow[ix0 + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution without bias. `weight` is `cout x cin x k x k`.
pub fn conv_forward(x: &Tensor, weight: &[f64], g: &ConvGeom) -> Tensor {
    let (ho, wo) = g.out_hw(x.h, x.w);
    let hw = ho * wo;
    let p = x.n * hw;
    let kdim = g.cin * g.k * g.k;
    let mut y = Tensor::zeros(g.cout, x.n, ho, wo);
    if g.is_pointwise() {
        gemm(g.cout, kdim, p, weight, kdim, 1, &x.data, p, 1, 0.0, &mut y.data, p);
    } else {
        let mut cols = vec![0.0; kdim * hw];
        for n in 0..x.n {
            im2col_sample(x, n, g, ho, wo, &mut cols);
            gemm(g.cout, kdim, hw, weight, kdim, 1, &cols, hw, 1, 0.0, &mut y.data[n * hw..], p);
        }
    }
    y
}

/// Accumulates the weight gradient into `dw` and returns the input gradient.
pub fn conv_backward(x: &Tensor, weight: &[f64], g: &ConvGeom, dy: &Tensor, dw: &mut [f64]) -> Tensor {
    conv_backward_impl(x, weight, g, dy, dw, true).expect("input gradient requested")
}

/// Accumulates only the weight gradient into `dw`.
pub fn conv_weight_grad(x: &Tensor, g: &ConvGeom, dy: &Tensor, dw: &mut [f64]) {
    conv_backward_impl(x, &[], g, dy, dw, false);
}

fn conv_backward_impl(x: &Tensor, weight: &[f64], g: &ConvGeom, dy: &Tensor, dw: &mut [f64], want_dx: bool) -> Option<Tensor> {
    let (ho, wo) = (dy.h, dy.w);
    let hw = ho * wo;
    let p = x.n * hw;
    let kdim = g.cin * g.k * g.k;
    let mut dx = want_dx.then(|| Tensor::zeros(x.c, x.n, x.h, x.w));
    if g.is_pointwise() {
        gemm(g.cout, p, kdim, &dy.data, p, 1, &x.data, 1, p, 1.0, dw, kdim);
        if let Some(dx) = dx.as_mut() {
            gemm(kdim, g.cout, p, weight, 1, kdim, &dy.data, p, 1, 0.0, &mut dx.data, p);
        }
    } else {
        let mut cols = vec![0.0; kdim * hw];
        let mut dcols = if want_dx { vec![0.0; kdim * hw] } else { Vec::new() };
        for n in 0..x.n {
            im2col_sample(x, n, g, ho, wo, &mut cols);
            let dy_n = &dy.data[n * hw..];
            gemm(g.cout, hw, kdim, dy_n, p, 1, &cols, 1, hw, 1.0, dw, kdim);
            if let Some(dx) = dx.as_mut() {
                gemm(kdim, g.cout, hw, weight, 1, kdim, dy_n, p, 1, 0.0, &mut dcols, hw);
                col2im_sample(&dcols, n, g, dx, ho, wo);
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Saved state of a normalization forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Whether batch statistics were used.
    pub training: bool,
}

/// Batch mean and unbiased variance per channel.
pub type ChannelStats = (Vec<f64>, Vec<f64>);

/// Per-channel normalization. With `running = None` batch statistics are
/// used and returned.
pub fn bn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Tensor, BnCache, Option<ChannelStats>) {
    let m = x.row();
    let mut y = Tensor::zeros(x.c, x.n, x.h, x.w);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; x.c];
    let mut means = vec![0.0; x.c];
    let mut vars = vec![0.0; x.c];
    for c in 0..x.c {
        let row = &x.data[c * m..(c + 1) * m];
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                means[c] = mean;
                vars[c] = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                (mean, var)
            }
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = is;
        let xh = &mut xhat[c * m..(c + 1) * m];
        let out = &mut y.data[c * m..(c + 1) * m];
        for ((o, h), v) in out.iter_mut().zip(xh.iter_mut()).zip(row) {
            *h = (v - mean) * is;
            *o = gamma[c] * *h + beta[c];
        }
    }
    let training = running.is_none();
    let cache = BnCache {
        xhat,
        inv_std,
        training,
    };
    (y, cache, training.then_some((means, vars)))
}

pub fn bn_backward(cache: &BnCache, gamma: &[f64], dy: &Tensor, dgamma: &mut [f64], dbeta: &mut [f64]) -> Tensor {
    let m = dy.row();
    let mut dx = Tensor::zeros(dy.c, dy.n, dy.h, dy.w);
    let training = cache.training;
    for c in 0..dy.c {
        let g = &dy.data[c * m..(c + 1) * m];
        let xh = &cache.xhat[c * m..(c + 1) * m];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let scale = gamma[c] * cache.inv_std[c];
        let out = &mut dx.data[c * m..(c + 1) * m];
        if training {
            let mf = m as f64;
            for ((o, gi), xi) in out.iter_mut().zip(g).zip(xh) {
                *o = scale * (gi - sum_g / mf - xi * sum_gx / mf);
            }
        } else {
            for (o, gi) in out.iter_mut().zip(g) {
                *o = scale * gi;
            }
        }
    }
    dx
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Derivative at exactly zero is taken as zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&x.data) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Parameter-free skip: spatial subsampling by `stride` and zero channel padding.
pub fn shortcut_forward(x: &Tensor, stride: usize, cout: usize) -> Tensor {
    if stride == 1 && cout == x.c {
        return x.clone();
    }
    let ho = (x.h - 1) / stride + 1;
    let wo = (x.w - 1) / stride + 1;
    let mut y = Tensor::zeros(cout, x.n, ho, wo);
    for c in 0..x.c {
        for n in 0..x.n {
            let src = (c * x.n + n) * x.h * x.w;
            let dst = (c * x.n + n) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    y.data[dst + oy * wo + ox] = x.data[src + oy * stride * x.w + ox * stride];
                }
            }
        }
    }
    y
}

pub fn shortcut_backward(x: &Tensor, stride: usize, dy: &Tensor) -> Tensor {
    if stride == 1 && dy.c == x.c {
        return dy.clone();
    }
    let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
    let (ho, wo) = (dy.h, dy.w);
    for c in 0..x.c {
        for n in 0..x.n {
            let src = (c * x.n + n) * ho * wo;
            let dst = (c * x.n + n) * x.h * x.w;
            for oy in 0..ho {
                for ox in 0..wo {
                    dx.data[dst + oy * stride * x.w + ox * stride] = dy.data[src + oy * wo + ox];
                }
            }
        }
    }
    dx
}

/// Adaptive average pooling to 1x1: output is `C x N x 1 x 1`.
pub fn pool_forward(x: &Tensor) -> Tensor {
    let plane = x.h * x.w;
    let inv = 1.0 / plane as f64;
    let data = x.data.chunks_exact(plane).map(|p| p.iter().sum::<f64>() * inv).collect();
    Tensor::from_data(x.c, x.n, 1, 1, data)
}

pub fn pool_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let plane = x.h * x.w;
    let inv = 1.0 / plane as f64;
    let mut data = Vec::with_capacity(x.data.len());
    for g in &dy.data {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_data(x.c, x.n, x.h, x.w, data)
}

/// `y = W x + b` on a `fin x N` feature matrix; `W` is `fout x fin`.
pub fn linear_forward(x: &Tensor, weight: &[f64], bias: &[f64], fout: usize) -> Tensor {
    let n = x.n;
    let fin = x.c;
    let mut y = Tensor::zeros(fout, n, 1, 1);
    for (o, row) in y.data.chunks_exact_mut(n).enumerate() {
        row.fill(bias[o]);
    }
    gemm(fout, fin, n, weight, fin, 1, &x.data, n, 1, 1.0, &mut y.data, n);
    y
}

pub fn linear_backward(x: &Tensor, weight: &[f64], dy: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let n = x.n;
    let fin = x.c;
    let fout = dy.c;
    for (o, row) in dy.data.chunks_exact(n).enumerate() {
        db[o] += row.iter().sum::<f64>();
    }
    gemm(fout, n, fin, &dy.data, n, 1, &x.data, 1, n, 1.0, dw, fin);
    let mut dx = Tensor::zeros(fin, n, 1, 1);
    gemm(fin, fout, n, weight, 1, fin, &dy.data, n, 1, 0.0, &mut dx.data, n);
    dx
}
