//! Forward/backward kernels on flat row-major buffers.

use crate::error::{Error, Result};

/// Layer-norm epsilon added to the variance before the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Numerically stable softmax of one row (row-max subtraction).
pub fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    if row.is_empty() {
        return Err(Error::shape("softmax over an empty axis"));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// 2-D convolution geometry for a single `(C, H, W)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub spec: ConvSpec,
}

impl ConvDims {
    pub fn new(input: &[usize], weight: &[usize], spec: ConvSpec) -> Result<Self> {
        let [c_in, h, w] = input[..] else {
            return Err(Error::shape(format!("conv2d input must be (C,H,W), got {input:?}")));
        };
        let [c_out, c_in_g, kh, kw] = weight[..] else {
            return Err(Error::shape(format!(
                "conv2d weight must be (Cout,Cin/groups,kh,kw), got {weight:?}"
            )));
        };
        if spec.groups == 0 || spec.stride == 0 {
            return Err(Error::invalid("conv2d groups and stride must be positive"));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::shape(format!(
                "conv2d channels ({c_in} in, {c_out} out) not divisible by {} groups",
                spec.groups
            )));
        }
        if c_in_g != c_in / spec.groups {
            return Err(Error::shape(format!(
                "conv2d weight expects {} input channels per group, input gives {}",
                c_in_g,
                c_in / spec.groups
            )));
        }
        let hp = h + 2 * spec.padding;
        let wp = w + 2 * spec.padding;
        if hp < kh || wp < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out: (hp - kh) / spec.stride + 1,
            w_out: (wp - kw) / spec.stride + 1,
            spec,
        })
    }

    /// Visits every (out index, in index, weight index) triple.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self.spec.groups;
        let cin_g = self.c_in / g;
        let cout_g = self.c_out / g;
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        for oc in 0..self.c_out {
            let group = oc / cout_g;
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wi = ((oc * cin_g + icl) * self.kh + ky) * self.kw + kx;
                        for oy in 0..self.h_out {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.w_out {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let oi = (oc * self.h_out + oy) * self.w_out + ox;
                                let ii = (ic * self.h + iy as usize) * self.w + ix as usize;
                                f(oi, ii, wi);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let plane = self.h_out * self.w_out;
        let mut out = vec![0.0; self.c_out * plane];
        if let Some(b) = bias {
            for (oc, &bv) in b.iter().enumerate() {
                out[oc * plane..(oc + 1) * plane].fill(bv);
            }
        }
        self.for_each(|oi, ii, wi| out[oi] += weight[wi] * input[ii]);
        out
    }

    pub fn backward_input(&self, g: &[f64], weight: &[f64], gin: &mut [f64]) {
        self.for_each(|oi, ii, wi| gin[ii] += weight[wi] * g[oi]);
    }

    pub fn backward_weight(&self, g: &[f64], input: &[f64], gw: &mut [f64]) {
        self.for_each(|oi, ii, wi| gw[wi] += input[ii] * g[oi]);
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.h_out, self.w_out]
    }
}
