//! Dense kernels shared by the forward and backward rules.

use rayon::prelude::*;

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in c_row.iter_mut().zip(b_row) {
                *cij = *cij + aip * bpj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cij, &bpj) in c_row.iter_mut().zip(b_row) {
                *cij = *cij + api * bpj;
            }
        }
    }
}

/// Geometry of a 2-D convolution over NCHW input with an OIHW kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Unfold one sample into a `[C·KH·KW, OH·OW]` column matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut cols = vec![T::zero(); self.patch_len() * oh * ow];
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            dst[oy * ow + ox] =
                                x[(c * self.height + iy as usize) * self.width + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Fold a column-matrix gradient back onto one sample's input layout.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let di = (c * self.height + iy as usize) * self.width + ix as usize;
                            dx[di] = dx[di] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-sample column matrices kept for backward.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
) -> (Vec<T>, Vec<Vec<T>>) {
    let (pl, ol, il) = (g.patch_len(), g.out_len(), g.in_len());
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let cols = g.im2col(&x[b * il..(b + 1) * il]);
            let mut out = vec![T::zero(); g.out_channels * ol];
            gemm_nn(kernel, &cols, &mut out, g.out_channels, pl, ol);
            (out, cols)
        })
        .collect();
    let mut out = Vec::with_capacity(g.batch * g.out_channels * ol);
    let mut saved = Vec::with_capacity(g.batch);
    for (o, c) in per_sample {
        out.extend_from_slice(&o);
        saved.push(c);
    }
    (out, saved)
}

/// Gradients for input (if requested) and kernel (if requested).
///
/// Kernel partials are computed per sample and reduced in sample order so the
/// result does not depend on the worker count.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    dout: &[T],
    kernel: &[T],
    cols: &[Vec<T>],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (pl, ol, il) = (g.patch_len(), g.out_len(), g.in_len());
    let oc = g.out_channels;
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let dy = &dout[b * oc * ol..(b + 1) * oc * ol];
            let dx = want_dx.then(|| {
                let mut dcols = vec![T::zero(); pl * ol];
                gemm_tn(kernel, dy, &mut dcols, pl, oc, ol);
                let mut dx = vec![T::zero(); il];
                g.col2im(&dcols, &mut dx);
                dx
            });
            let dk = want_dk.then(|| {
                let mut dk = vec![T::zero(); oc * pl];
                gemm_nt(dy, &cols[b], &mut dk, oc, ol, pl);
                dk
            });
            (dx, dk)
        })
        .collect();

    let mut dx_all = want_dx.then(|| Vec::with_capacity(g.batch * il));
    let mut dk_all = want_dk.then(|| vec![T::zero(); oc * pl]);
    for (dx, dk) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dk)) = (dk_all.as_mut(), dk) {
            for (a, v) in all.iter_mut().zip(dk) {
                *a = *a + v;
            }
        }
    }
    (dx_all, dk_all)
}
