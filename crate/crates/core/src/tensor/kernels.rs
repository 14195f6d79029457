//! Raw numeric kernels shared by the forward and backward passes.

/// `c (+)= op(a) · op(b)` for row-major buffers.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n` (or
/// `n×k` when `trans_b`) and `c` is `m×n`. With `accumulate` false the
/// previous contents of `c` are overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertion above covers every element addressed by
    // the given dimensions and strides.
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

/// Geometry of a stride-1 same-padded 2-D convolution over a `T×F×C` input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub t: usize,
    pub f: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// Unfolds `x` into a `(T·F) × (kh·kw·C)` patch matrix with zero padding.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Self { t, f, c, kh, kw } = *self;
        let (pt, pf) = ((kh - 1) / 2, (kw - 1) / 2);
        let patch = self.patch();
        let mut cols = vec![0.0; t * f * patch];
        for ti in 0..t {
            for fi in 0..f {
                let row = &mut cols[(ti * f + fi) * patch..(ti * f + fi + 1) * patch];
                for i in 0..kh {
                    let Some(src_t) = (ti + i).checked_sub(pt).filter(|&v| v < t) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(src_f) = (fi + j).checked_sub(pf).filter(|&v| v < f) else {
                            continue;
                        };
                        let src = (src_t * f + src_f) * c;
                        let dst = (i * kw + j) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch gradients back onto the input.
    pub fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let Self { t, f, c, kh, kw } = *self;
        let (pt, pf) = ((kh - 1) / 2, (kw - 1) / 2);
        let patch = self.patch();
        for ti in 0..t {
            for fi in 0..f {
                let row = &cols[(ti * f + fi) * patch..(ti * f + fi + 1) * patch];
                for i in 0..kh {
                    let Some(src_t) = (ti + i).checked_sub(pt).filter(|&v| v < t) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(src_f) = (fi + j).checked_sub(pf).filter(|&v| v < f) else {
                            continue;
                        };
                        let src = (src_t * f + src_f) * c;
                        let dst = (i * kw + j) * c;
                        for (g, &v) in gx[src..src + c].iter_mut().zip(&row[dst..dst + c]) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

/// Window layout of an Lp pooling: output shape plus flat offsets.
pub(crate) struct PoolPlan {
    pub out_shape: Vec<usize>,
    /// Flat input offset of every element of one window relative to its origin.
    pub window_offsets: Vec<usize>,
    /// Flat input offset of each output cell's window origin.
    pub origins: Vec<usize>,
}

impl PoolPlan {
    pub fn new(shape: &[usize], window: &[usize], stride: &[usize]) -> Self {
        let rank = shape.len();
        let mut in_strides = vec![1; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * shape[k + 1];
        }
        let out_shape: Vec<usize> = (0..rank)
            .map(|k| (shape[k] - window[k]) / stride[k] + 1)
            .collect();

        let mut window_offsets = vec![0usize];
        for k in 0..rank {
            let mut next = Vec::with_capacity(window_offsets.len() * window[k]);
            for &base in &window_offsets {
                for w in 0..window[k] {
                    next.push(base + w * in_strides[k]);
                }
            }
            window_offsets = next;
        }

        let mut origins = vec![0usize];
        for k in 0..rank {
            let mut next = Vec::with_capacity(origins.len() * out_shape[k]);
            for &base in &origins {
                for o in 0..out_shape[k] {
                    next.push(base + o * stride[k] * in_strides[k]);
                }
            }
            origins = next;
        }
        Self {
            out_shape,
            window_offsets,
            origins,
        }
    }
}
