//! Dense NCHW tensors and the handful of kernels the networks need.
//!
//! Convolutions lower to GEMM through an im2col buffer. Every kernel has a
//! matching backward function; none of them keep hidden state.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Slice of one sample (all channels).
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let [n, _, h, w] = parts[0].shape;
        let c: usize = parts.iter().map(|t| t.shape[1]).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        let hw = h * w;
        for b in 0..n {
            let mut offset = 0;
            let dst = out.sample_mut(b);
            for t in parts {
                let src = t.sample(b);
                dst[offset * hw..offset * hw + src.len()].copy_from_slice(src);
                offset += t.shape[1];
            }
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] for the given channel sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        let [n, _, h, w] = self.shape;
        let hw = h * w;
        let mut outs: Vec<Tensor> = sizes.iter().map(|&c| Tensor::zeros([n, c, h, w])).collect();
        for b in 0..n {
            let src = self.sample(b);
            let mut offset = 0;
            for (t, &c) in outs.iter_mut().zip(sizes) {
                t.sample_mut(b)
                    .copy_from_slice(&src[offset * hw..(offset + c) * hw]);
                offset += c;
            }
        }
        outs
    }
}

/// `c = a(m×k) · b(k×n) + beta·c`, all row-major, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover m*k, k*n and m*n elements with the strides above.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        dgemm(
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

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-size convolution with odd kernel `k` (padding `k/2`), stride 1.
/// `weight` is `[cout, cin, k, k]`.
pub fn conv2d(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
    let [n, cin, h, w] = x.shape;
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..n {
        let dst = out.sample_mut(b);
        for (co, &bv) in bias.iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(bv);
        }
        let src = if k == 1 {
            x.sample(b)
        } else {
            im2col(x.sample(b), cin, h, w, k, &mut col);
            &col
        };
        gemm(cout, kk, hw, weight, false, src, false, 1.0, dst);
    }
    out
}

/// Backward of [`conv2d`]. Accumulates into `dweight`/`dbias` and returns the
/// input gradient.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &Tensor,
    k: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let [n, cin, h, w] = x.shape;
    let cout = dy.shape[1];
    let hw = h * w;
    let kk = cin * k * k;
    let mut dx = Tensor::zeros(x.shape);
    let mut col = vec![0.0; kk * hw];
    let mut dcol = vec![0.0; kk * hw];
    for b in 0..n {
        let g = dy.sample(b);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        if k == 1 {
            gemm(cout, hw, kk, g, false, x.sample(b), true, 1.0, dweight);
            gemm(kk, cout, hw, weight, true, g, false, 0.0, dx.sample_mut(b));
        } else {
            im2col(x.sample(b), cin, h, w, k, &mut col);
            gemm(cout, hw, kk, g, false, &col, true, 1.0, dweight);
            gemm(kk, cout, hw, weight, true, g, false, 0.0, &mut dcol);
            col2im(&dcol, cin, h, w, k, dx.sample_mut(b));
        }
    }
    dx
}

/// 2×2 stride-2 transposed convolution; `weight` is `[cin, cout, 2, 2]`.
pub fn conv_transpose2x2(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize) -> Tensor {
    let [n, cin, h, w] = x.shape;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let mut z = vec![0.0; cout * 4 * hw];
    for b in 0..n {
        gemm(cout * 4, cin, hw, weight, true, x.sample(b), false, 0.0, &mut z);
        let dst = out.sample_mut(b);
        for co in 0..cout {
            let plane = &mut dst[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..2 {
                for kx in 0..2 {
                    let row = &z[((co * 2 + ky) * 2 + kx) * hw..][..hw];
                    for y in 0..h {
                        let line = &mut plane[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                        for x in 0..w {
                            line[2 * x + kx] = row[y * w + x] + bias[co];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2x2_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &Tensor,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let [n, cin, h, w] = x.shape;
    let cout = dy.shape[1];
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(x.shape);
    let mut dz = vec![0.0; cout * 4 * hw];
    for b in 0..n {
        let g = dy.sample(b);
        for co in 0..cout {
            let plane = &g[co * oh * ow..(co + 1) * oh * ow];
            dbias[co] += plane.iter().sum::<f64>();
            for ky in 0..2 {
                for kx in 0..2 {
                    let row = &mut dz[((co * 2 + ky) * 2 + kx) * hw..][..hw];
                    for y in 0..h {
                        let line = &plane[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                        for x in 0..w {
                            row[y * w + x] = line[2 * x + kx];
                        }
                    }
                }
            }
        }
        gemm(cin, hw, cout * 4, x.sample(b), false, &dz, true, 1.0, dweight);
        gemm(cin, cout * 4, hw, weight, false, &dz, false, 0.0, dx.sample_mut(b));
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` by the positive part of a ReLU output.
pub fn relu_backward_inplace(y: &Tensor, dy: &mut Tensor) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2. Height and width must be even.
pub fn max_pool2x2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (plane, dst) in x
        .data
        .chunks_exact(h * w)
        .zip(out.data.chunks_exact_mut(oh * ow))
    {
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = plane[i]
                    .max(plane[i + 1])
                    .max(plane[i + w])
                    .max(plane[i + w + 1]);
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first maximal element of its window.
pub fn max_pool2x2_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let [_, _, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x.shape);
    for ((plane, g), dst) in x
        .data
        .chunks_exact(h * w)
        .zip(dy.data.chunks_exact(oh * ow))
        .zip(dx.data.chunks_exact_mut(h * w))
    {
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                let mut best = base;
                for i in [base + 1, base + w, base + w + 1] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                dst[best] += g[y * ow + xx];
            }
        }
    }
    dx
}
