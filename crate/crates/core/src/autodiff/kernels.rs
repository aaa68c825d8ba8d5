//! Slice-level numeric kernels behind the traced primitives.
//!
//! Matrices are row-major `[rows, cols]`. Every kernel here has an adjoint
//! partner in this file (im2col/col2im, pool/unpool, gather/scatter, ...) so
//! that the backward pass of a primitive is itself a primitive.

/// Geometry of a stride-1 1D convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    /// Zero padding that keeps the output length equal to the input length.
    pub fn same(batch: usize, channels: usize, len: usize, kernel: usize) -> Self {
        Self {
            batch,
            channels,
            len,
            kernel,
            pad_left: (kernel - 1) / 2,
            out_len: len,
        }
    }

    /// Symmetric zero padding of `padding` frames on both sides.
    pub fn symmetric(batch: usize, channels: usize, len: usize, kernel: usize, padding: usize) -> Option<Self> {
        let padded = len + 2 * padding;
        if padded < kernel {
            return None;
        }
        Some(Self {
            batch,
            channels,
            len,
            kernel,
            pad_left: padding,
            out_len: padded - kernel + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_len
    }

    pub fn cols(&self) -> usize {
        self.channels * self.kernel
    }
}

/// Geometry of segment-average pooling over the time axis of `[batch*len, feat]`
/// conv activations, producing `[batch, segments*feat]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub len: usize,
    pub feat: usize,
    pub segments: usize,
}

impl PoolGeom {
    /// Frame range `[start, end)` of segment `s`.
    pub fn bounds(&self, s: usize) -> (usize, usize) {
        (s * self.len / self.segments, (s + 1) * self.len / self.segments)
    }
}

/// `c = op(a) · op(b)` where `op` optionally transposes.
/// `a` is stored `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the pointers cover m*k, k*n and m*n elements with the strides above.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `[batch, channels, len]` → `[batch*out_len, channels*kernel]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let src = &x[(b * g.channels + c) * g.len..][..g.len];
            for t in 0..g.out_len {
                let row = &mut out[(b * g.out_len + t) * cols + c * g.kernel..][..g.kernel];
                for (j, slot) in row.iter_mut().enumerate() {
                    let pos = t + j;
                    if pos >= g.pad_left && pos - g.pad_left < g.len {
                        *slot = src[pos - g.pad_left];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `[batch, channels, len]`.
pub fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.batch * g.channels * g.len];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let dst = &mut out[(b * g.channels + c) * g.len..][..g.len];
            for t in 0..g.out_len {
                let row = &cols_data[(b * g.out_len + t) * cols + c * g.kernel..][..g.kernel];
                for (j, &v) in row.iter().enumerate() {
                    let pos = t + j;
                    if pos >= g.pad_left && pos - g.pad_left < g.len {
                        dst[pos - g.pad_left] += v;
                    }
                }
            }
        }
    }
    out
}

pub fn segment_pool(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let width = g.segments * g.feat;
    let mut out = vec![0.0; g.batch * width];
    for b in 0..g.batch {
        for s in 0..g.segments {
            let (lo, hi) = g.bounds(s);
            let inv = 1.0 / (hi - lo) as f64;
            let dst = &mut out[b * width + s * g.feat..][..g.feat];
            for t in lo..hi {
                let src = &x[(b * g.len + t) * g.feat..][..g.feat];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
    }
    out
}

/// Adjoint of [`segment_pool`].
pub fn segment_unpool(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let width = g.segments * g.feat;
    let mut out = vec![0.0; g.batch * g.len * g.feat];
    for b in 0..g.batch {
        for s in 0..g.segments {
            let (lo, hi) = g.bounds(s);
            let inv = 1.0 / (hi - lo) as f64;
            let src = &x[b * width + s * g.feat..][..g.feat];
            for t in lo..hi {
                let dst = &mut out[(b * g.len + t) * g.feat..][..g.feat];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v * inv;
                }
            }
        }
    }
    out
}

/// `[n]` → `[rows, n]`.
pub fn broadcast_rows(v: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * v.len());
    for _ in 0..rows {
        out.extend_from_slice(v);
    }
    out
}

/// `[rows, cols]` → `[cols]`.
pub fn sum_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

/// `[rows]` → `[rows, cols]`.
pub fn broadcast_cols(v: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cols * v.len());
    for &x in v {
        out.extend(std::iter::repeat_n(x, cols));
    }
    out
}

/// `[rows, cols]` → `[rows]`.
pub fn sum_cols(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks_exact(cols).map(|r| r.iter().sum()).collect()
}

pub fn max_cols(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks_exact(cols)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn concat_cols(a: &[f64], b: &[f64], rows: usize, ca: usize, cb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    out
}

pub fn slice_cols(x: &[f64], rows: usize, cols: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
    }
    out
}

/// Adjoint of [`slice_cols`]: place `[rows, len]` into zeros of `[rows, total]`.
pub fn pad_cols(x: &[f64], rows: usize, len: usize, start: usize, total: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * total];
    for r in 0..rows {
        out[r * total + start..r * total + start + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
}

pub fn gather(x: &[f64], cols: usize, index: &[usize]) -> Vec<f64> {
    index.iter().enumerate().map(|(r, &c)| x[r * cols + c]).collect()
}

/// Adjoint of [`gather`].
pub fn scatter(x: &[f64], cols: usize, index: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; index.len() * cols];
    for (r, (&c, &v)) in index.iter().zip(x).enumerate() {
        out[r * cols + c] = v;
    }
    out
}
