//! Raw numeric kernels behind the tape operations.

use serde::{Deserialize, Serialize};

use super::Element;
use crate::error::{Error, Result};

/// Spatial padding rule, with the usual deep-learning semantics.
///
/// `Same` produces `ceil(in / stride)` outputs and splits the required
/// padding with the smaller half before the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved window arithmetic for one spatial axis pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis(input: usize, k: usize, stride: usize, padding: Padding, name: &str) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > input {
                return Err(Error::dim(format!(
                    "window {k} larger than input {input} along {name} with valid padding"
                )));
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + k).saturating_sub(input);
            if k > input + needed {
                return Err(Error::dim(format!(
                    "window {k} larger than padded input along {name}"
                )));
            }
            Ok((out, needed / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        in_hw: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::contract(format!("stride {stride:?} must be >= 1")));
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::contract(format!("window {kernel:?} must be >= 1")));
        }
        let (out_h, pad_top) = axis(in_hw.0, kernel.0, stride.0, padding, "height")?;
        let (out_w, pad_left) = axis(in_hw.1, kernel.1, stride.1, padding, "width")?;
        Ok(Self {
            in_h: in_hw.0,
            in_w: in_hw.1,
            k_h: kernel.0,
            k_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate for output `o` and kernel tap `k`, or `None` in padding.
    #[inline]
    fn src_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride_h + k).checked_sub(self.pad_top).filter(|&r| r < self.in_h)
    }

    #[inline]
    fn src_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride_w + k).checked_sub(self.pad_left).filter(|&c| c < self.in_w)
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold an NCHW batch into a `[C*kh*kw, N*OH*OW]` column matrix.
pub fn im2col<S: Element>(input: &[S], n: usize, c: usize, g: &ConvGeometry) -> Vec<S> {
    let p = g.out_len();
    let ncols = n * p;
    let mut cols = vec![S::zero(); c * g.k_h * g.k_w * ncols];
    let plane = g.in_h * g.in_w;
    for ch in 0..c {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (ch * g.k_h + ki) * g.k_w + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let src = &input[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    let dst = &mut dst_row[b * p..(b + 1) * p];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.src_row(oh, ki) else { continue };
                        let src_line = &src[ih * g.in_w..(ih + 1) * g.in_w];
                        let dst_line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, d) in dst_line.iter_mut().enumerate() {
                            if let Some(iw) = g.src_col(ow, kj) {
                                *d = src_line[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an NCHW buffer.
pub fn col2im<S: Element>(cols: &[S], n: usize, c: usize, g: &ConvGeometry) -> Vec<S> {
    let p = g.out_len();
    let ncols = n * p;
    let plane = g.in_h * g.in_w;
    let mut out = vec![S::zero(); n * c * plane];
    for ch in 0..c {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (ch * g.k_h + ki) * g.k_w + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let dst = &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    let src = &src_row[b * p..(b + 1) * p];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.src_row(oh, ki) else { continue };
                        for ow in 0..g.out_w {
                            if let Some(iw) = g.src_col(ow, kj) {
                                dst[ih * g.in_w + iw] += src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Row-major `a[m,k] * b[k,n]`, with optional transposition of either side
/// expressed through strides.
pub fn matmul<S: Element>(
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // SAFETY: slices hold m*k, k*n and m*n elements and the strides index
    // within them for either orientation.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            S::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Forward convolution. Returns the NCHW output and the column matrix kept
/// for the backward pass.
pub fn conv2d_forward<S: Element>(
    input: &[S],
    n: usize,
    c: usize,
    weight: &[S],
    bias: &[S],
    out_c: usize,
    g: &ConvGeometry,
) -> (Vec<S>, Vec<S>) {
    let cols = im2col(input, n, c, g);
    let k = c * g.k_h * g.k_w;
    let p = g.out_len();
    let y = matmul(weight, false, &cols, false, out_c, k, n * p);
    let mut out = vec![S::zero(); n * out_c * p];
    for o in 0..out_c {
        let src = &y[o * n * p..(o + 1) * n * p];
        for b in 0..n {
            let dst = &mut out[(b * out_c + o) * p..(b * out_c + o + 1) * p];
            for (d, &s) in dst.iter_mut().zip(&src[b * p..(b + 1) * p]) {
                *d = s + bias[o];
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Element>(
    grad_out: &[S],
    cols: &[S],
    weight: &[S],
    n: usize,
    c: usize,
    out_c: usize,
    g: &ConvGeometry,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let p = g.out_len();
    let k = c * g.k_h * g.k_w;
    // [O, N*P] layout to match the columns.
    let mut dy = vec![S::zero(); out_c * n * p];
    let mut dbias = vec![S::zero(); out_c];
    for b in 0..n {
        for o in 0..out_c {
            let src = &grad_out[(b * out_c + o) * p..(b * out_c + o + 1) * p];
            dy[o * n * p + b * p..o * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    for (o, db) in dbias.iter_mut().enumerate() {
        *db = dy[o * n * p..(o + 1) * n * p].iter().copied().sum();
    }
    let dweight = matmul(&dy, false, cols, true, out_c, n * p, k);
    let dcols = matmul(weight, true, &dy, false, k, out_c, n * p);
    let dinput = col2im(&dcols, n, c, g);
    (dinput, dweight, dbias)
}

/// Max pooling over NCHW. Padded positions never win; ties keep the first
/// position in row-major scan order. Returns values and flat argmax indices
/// into the input buffer.
pub fn maxpool_forward<S: Element>(input: &[S], n: usize, c: usize, g: &ConvGeometry) -> (Vec<S>, Vec<usize>) {
    let plane = g.in_h * g.in_w;
    let p = g.out_len();
    let mut out = vec![S::zero(); n * c * p];
    let mut arg = vec![0usize; n * c * p];
    for nc in 0..n * c {
        let base = nc * plane;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best: Option<(S, usize)> = None;
                for ki in 0..g.k_h {
                    let Some(ih) = g.src_row(oh, ki) else { continue };
                    for kj in 0..g.k_w {
                        let Some(iw) = g.src_col(ow, kj) else { continue };
                        let idx = base + ih * g.in_w + iw;
                        let v = input[idx];
                        match best {
                            Some((bv, _)) if !(v > bv) => {}
                            _ => best = Some((v, idx)),
                        }
                    }
                }
                // Window always overlaps real data: ConvGeometry rejects the rest.
                let (v, idx) = best.expect("pool window covers no input");
                let o = nc * p + oh * g.out_w + ow;
                out[o] = v;
                arg[o] = idx;
            }
        }
    }
    (out, arg)
}

/// Row-wise numerically stable softmax of a `[rows, cols]` buffer.
pub fn softmax_rows<S: Element>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_arithmetic() {
        let g = ConvGeometry::new((224, 224), (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top), (112, 112, 0));
        let g = ConvGeometry::new((112, 112), (2, 2), (1, 1), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (112, 0));
        let g = ConvGeometry::new((5, 5), (3, 3), (1, 1), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (5, 1));
    }

    #[test]
    fn valid_rejects_oversized_window() {
        assert!(matches!(
            ConvGeometry::new((2, 2), (3, 3), (1, 1), Padding::Valid),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            ConvGeometry::new((4, 4), (3, 3), (0, 1), Padding::Valid),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, false, &b, false, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        // a^T b = [[1,3],[2,4]] b
        assert_eq!(matmul(&a, true, &b, false, 2, 2, 2), vec![26.0, 30.0, 38.0, 44.0]);
        // a b^T
        assert_eq!(matmul(&a, false, &b, true, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new((5, 4), (3, 2), (2, 1), Padding::Same).unwrap();
        let (n, c) = (2, 3);
        let x: Vec<f64> = (0..n * c * 20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, n, c, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, n, c, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
