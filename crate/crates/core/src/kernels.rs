//! Slice-level numeric kernels.
//!
//! Every reduction runs left to right in a fixed order so results are
//! bitwise reproducible for a given input.

use crate::scalar::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + j] = s;
        }
    }
    c
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x / T::of(SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x / T::of(SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

/// Row-wise softmax over rows of length `n`, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    out
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_h() * self.out_w() * self.cout * self.patch_len()) as u64
    }
}

/// Unfolds input patches into rows `[b·oh·ow, cin·kh·kw]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.batch * oh * ow * plen];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * plen;
                for c in 0..g.cin {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.kh + ky) * g.kw + kx] =
                                x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters row gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plen = g.patch_len();
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * plen;
                for c in 0..g.cin {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                cols[row + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Rearranges `[b, c, H, W]` into `[b, T, c·p·p]`, patches in raster order,
/// features ordered `(c, dy, dx)` to match a `[d, c, p, p]` conv kernel.
pub fn patchify<T: Scalar>(x: &[T], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let mut out = vec![T::zero(); b * gh * gw * feat];
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let base = ((bi * gh + py) * gw + px) * feat;
                for ci in 0..c {
                    for dy in 0..p {
                        let src = ((bi * c + ci) * h + py * p + dy) * w + px * p;
                        let dst = base + (ci * p + dy) * p;
                        out[dst..dst + p].copy_from_slice(&x[src..src + p]);
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify<T: Scalar>(t: &[T], b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let base = ((bi * gh + py) * gw + px) * feat;
                for ci in 0..c {
                    for dy in 0..p {
                        let dst = ((bi * c + ci) * h + py * p + dy) * w + px * p;
                        let src = base + (ci * p + dy) * p;
                        out[dst..dst + p].copy_from_slice(&t[src..src + p]);
                    }
                }
            }
        }
    }
    out
}
