//! Dense row-major `f32` tensors and the raw kernels the tape is built on.
//!
//! Every kernel here is single-threaded and sums in a fixed order, so two
//! calls with identical inputs produce bit-identical outputs.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension entry.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `[start, start + count)` of the leading dimension.
    pub fn rows(&self, start: usize, count: usize) -> Tensor {
        let row = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor::new(shape, self.data[start * row..(start + count) * row].to_vec())
    }

    /// Concatenate along the leading (batch) dimension.
    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "concat_rows shape mismatch");
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a square-kernel 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfold one sample (`[C, H, W]`) into a `[C*k*k, Hout*Wout]` matrix.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let cols = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                x[(c * self.in_h + iy as usize) * self.in_w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add columns back into `dx`.
    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let cols = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            dx[(c * self.in_h + iy as usize) * self.in_w + ix as usize] +=
                                src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Tensor {
    let batch = x.batch();
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * oh * ow;
    let mut out = vec![0.0; batch * out_len];
    for b in 0..batch {
        g.im2col(&x.data[b * in_len..(b + 1) * in_len], &mut col);
        matmul_acc(
            &w.data,
            &col,
            &mut out[b * out_len..(b + 1) * out_len],
            g.out_channels,
            g.col_rows(),
            g.col_cols(),
        );
    }
    Tensor::new(vec![batch, g.out_channels, oh, ow], out)
}

/// Returns `(dx, dw)` for a bias-free convolution.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, dout: &Tensor, g: &ConvGeometry) -> (Tensor, Tensor) {
    let batch = x.batch();
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * cols;
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for b in 0..batch {
        g.im2col(&x.data[b * in_len..(b + 1) * in_len], &mut col);
        let dy = &dout.data[b * out_len..(b + 1) * out_len];
        // dw[o, r] += sum_p dy[o, p] * col[r, p]
        for o in 0..g.out_channels {
            let dyo = &dy[o * cols..(o + 1) * cols];
            let dwo = &mut dw[o * rows..(o + 1) * rows];
            for (r, dwv) in dwo.iter_mut().enumerate() {
                let cr = &col[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (a, c) in dyo.iter().zip(cr) {
                    acc += a * c;
                }
                *dwv += acc;
            }
        }
        // dcol[r, p] = sum_o w[o, r] * dy[o, p]
        dcol.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..g.out_channels {
            let dyo = &dy[o * cols..(o + 1) * cols];
            for r in 0..rows {
                let wv = w.data[o * rows + r];
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut dcol[r * cols..(r + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(dyo) {
                    *d += wv * v;
                }
            }
        }
        g.col2im(&dcol, &mut dx[b * in_len..(b + 1) * in_len]);
    }
    (
        Tensor::new(x.shape.clone(), dx),
        Tensor::new(w.shape.clone(), dw),
    )
}

/// `x [B, in] · w[out, in]ᵀ + b[out]`
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, fin) = (x.shape[0], x.shape[1]);
    let fout = w.shape[0];
    let mut out = vec![0.0; batch * fout];
    for i in 0..batch {
        let xi = &x.data[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wo = &w.data[o * fin..(o + 1) * fin];
            let mut acc = b.data[o];
            for (a, c) in xi.iter().zip(wo) {
                acc += a * c;
            }
            out[i * fout + o] = acc;
        }
    }
    Tensor::new(vec![batch, fout], out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, fin) = (x.shape[0], x.shape[1]);
    let fout = w.shape[0];
    let mut dx = vec![0.0; batch * fin];
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for i in 0..batch {
        let xi = &x.data[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let g = dout.data[i * fout + o];
            db[o] += g;
            let wo = &w.data[o * fin..(o + 1) * fin];
            let dwo = &mut dw[o * fin..(o + 1) * fin];
            let dxi = &mut dx[i * fin..(i + 1) * fin];
            for j in 0..fin {
                dwo[j] += g * xi[j];
                dxi[j] += g * wo[j];
            }
        }
    }
    (
        Tensor::new(x.shape.clone(), dx),
        Tensor::new(w.shape.clone(), dw),
        Tensor::new(vec![fout], db),
    )
}

/// Per-channel statistics over `[B, C, H, W]`: `(mean, biased variance)`.
pub fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (batch, ch) = (x.shape[0], x.shape[1]);
    let plane: usize = x.shape[2..].iter().product();
    let count = (batch * plane) as f32;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * ch + c) * plane;
            s += x.data[off..off + plane].iter().sum::<f32>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..batch {
            let off = (b * ch + c) * plane;
            v += x.data[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<f32>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// Applies `y = x * scale[c] + shift[c]` channel-wise.
pub fn channel_affine(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
    let ch = x.shape[1];
    let plane: usize = x.shape[2..].iter().product();
    let mut out = x.data.clone();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let c = i % ch;
        for v in chunk {
            *v = *v * scale[c] + shift[c];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (batch, ch) = (x.shape[0], x.shape[1]);
    let plane: usize = x.shape[2..].iter().product();
    let data = x
        .data
        .chunks(plane)
        .map(|c| c.iter().sum::<f32>() / plane as f32)
        .collect();
    Tensor::new(vec![batch, ch], data)
}

/// Parameter-free downsampling shortcut: take every second pixel and pad the
/// extra output channels with zeros (split evenly before and after).
pub fn pad_shortcut_forward(x: &Tensor, out_channels: usize) -> Tensor {
    let (batch, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let before = (out_channels - ch) / 2;
    let mut out = vec![0.0; batch * out_channels * oh * ow];
    for b in 0..batch {
        for c in 0..ch {
            for y in 0..oh {
                for xx in 0..ow {
                    out[((b * out_channels + c + before) * oh + y) * ow + xx] =
                        x.data[((b * ch + c) * h + 2 * y) * w + 2 * xx];
                }
            }
        }
    }
    Tensor::new(vec![batch, out_channels, oh, ow], out)
}

pub fn pad_shortcut_backward(in_shape: &[usize], dout: &Tensor) -> Tensor {
    let (batch, ch, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oc, oh, ow) = (dout.shape[1], dout.shape[2], dout.shape[3]);
    let before = (oc - ch) / 2;
    let mut dx = vec![0.0; batch * ch * h * w];
    for b in 0..batch {
        for c in 0..ch {
            for y in 0..oh {
                for xx in 0..ow {
                    dx[((b * ch + c) * h + 2 * y) * w + 2 * xx] =
                        dout.data[((b * oc + c + before) * oh + y) * ow + xx];
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

pub fn softmax_rows(x: &Tensor, temperature: f32) -> Tensor {
    let n = x.shape[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(n) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let exps: Vec<f32> = row.iter().map(|&v| (v / temperature - max).exp()).collect();
        let s: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn log_softmax_rows(x: &Tensor, temperature: f32) -> Tensor {
    let n = x.shape[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(n) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / temperature));
        // shifting before subtracting keeps equal logits exactly at -ln(n)
        let log_sum = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f32>().ln();
        out.extend(row.iter().map(|&v| (v / temperature - max) - log_sum));
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
