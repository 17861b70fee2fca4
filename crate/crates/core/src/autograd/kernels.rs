//! Raw forward/backward kernels on flat slices. Shapes are validated by the
//! tape before any of these run.

use crate::tensor::Scalar;

/// Unfold one `[C, H, W]` image into `[C*k*k, H*W]` columns with zero "same" padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                // valid output columns for this horizontal offset
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = ki as isize - p;
                let ox = kj as isize - p;
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + ox) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Same-padded stride-1 convolution. Returns the output and, when `keep_cols`,
/// the unfolded columns of every batch item for reuse in the backward pass.
pub(crate) fn conv2d_forward<T: Scalar>(
    d: &ConvDims,
    x: &[T],
    kernel: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let hw = d.h * d.w;
    let ckk = d.ckk();
    let mut out = vec![T::zero(); d.n * d.f * hw];
    let mut saved = keep_cols.then(|| vec![T::zero(); d.n * ckk * hw]);
    let mut scratch = Vec::new();
    for ni in 0..d.n {
        let xs = &x[ni * d.c * hw..(ni + 1) * d.c * hw];
        let ys = &mut out[ni * d.f * hw..(ni + 1) * d.f * hw];
        for (fi, row) in ys.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[fi]);
        }
        let cols: &[T] = if d.k == 1 {
            xs
        } else if let Some(saved) = saved.as_mut() {
            let dst = &mut saved[ni * ckk * hw..(ni + 1) * ckk * hw];
            im2col(xs, d.c, d.h, d.w, d.k, dst);
            dst
        } else {
            scratch.resize(ckk * hw, T::zero());
            im2col(xs, d.c, d.h, d.w, d.k, &mut scratch);
            &scratch
        };
        T::gemm(
            d.f,
            ckk,
            hw,
            T::one(),
            kernel,
            ckk as isize,
            1,
            cols,
            hw as isize,
            1,
            T::one(),
            ys,
            hw as isize,
            1,
        );
    }
    (out, saved.filter(|_| d.k > 1))
}

pub(crate) struct ConvGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dkernel: Option<&'a mut [T]>,
    pub dbias: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    d: &ConvDims,
    x: &[T],
    kernel: &[T],
    saved_cols: Option<&[T]>,
    dout: &[T],
    grads: ConvGrads<'_, T>,
) {
    let hw = d.h * d.w;
    let ckk = d.ckk();
    let ConvGrads {
        mut dx,
        mut dkernel,
        mut dbias,
    } = grads;
    let mut scratch = Vec::new();
    let mut dcols = Vec::new();
    for ni in 0..d.n {
        let dys = &dout[ni * d.f * hw..(ni + 1) * d.f * hw];
        if let Some(db) = dbias.as_deref_mut() {
            for (fi, row) in dys.chunks_exact(hw).enumerate() {
                db[fi] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            let xs = &x[ni * d.c * hw..(ni + 1) * d.c * hw];
            let cols: &[T] = if d.k == 1 {
                xs
            } else if let Some(saved) = saved_cols {
                &saved[ni * ckk * hw..(ni + 1) * ckk * hw]
            } else {
                scratch.resize(ckk * hw, T::zero());
                im2col(xs, d.c, d.h, d.w, d.k, &mut scratch);
                &scratch
            };
            // dK[F, CKK] += dY[F, HW] * cols^T
            T::gemm(
                d.f,
                hw,
                ckk,
                T::one(),
                dys,
                hw as isize,
                1,
                cols,
                1,
                hw as isize,
                T::one(),
                dk,
                ckk as isize,
                1,
            );
        }
        if let Some(dxall) = dx.as_deref_mut() {
            let dxs = &mut dxall[ni * d.c * hw..(ni + 1) * d.c * hw];
            if d.k == 1 {
                // dX[C, HW] += K^T[C, F] * dY[F, HW]
                T::gemm(
                    d.c,
                    d.f,
                    hw,
                    T::one(),
                    kernel,
                    1,
                    ckk as isize,
                    dys,
                    hw as isize,
                    1,
                    T::one(),
                    dxs,
                    hw as isize,
                    1,
                );
            } else {
                dcols.resize(ckk * hw, T::zero());
                T::gemm(
                    ckk,
                    d.f,
                    hw,
                    T::one(),
                    kernel,
                    1,
                    ckk as isize,
                    dys,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im_add(&dcols, d.c, d.h, d.w, d.k, dxs);
            }
        }
    }
}

/// Stride-2 2x2 transposed convolution, kernel laid out `[C, F, 2, 2]`.
pub(crate) fn tconv_forward<T: Scalar>(d: &ConvDims, x: &[T], kernel: &[T]) -> Vec<T> {
    let hw = d.h * d.w;
    let f4 = d.f * 4;
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = vec![T::zero(); d.n * d.f * oh * ow];
    let mut y = vec![T::zero(); f4 * hw];
    for ni in 0..d.n {
        let xs = &x[ni * d.c * hw..(ni + 1) * d.c * hw];
        // Y[F*4, HW] = K^T[F*4, C] * X[C, HW]
        T::gemm(
            f4,
            d.c,
            hw,
            T::one(),
            kernel,
            1,
            f4 as isize,
            xs,
            hw as isize,
            1,
            T::zero(),
            &mut y,
            hw as isize,
            1,
        );
        let os = &mut out[ni * d.f * oh * ow..(ni + 1) * d.f * oh * ow];
        for fi in 0..d.f {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &y[(fi * 4 + a * 2 + b) * hw..(fi * 4 + a * 2 + b + 1) * hw];
                    let plane = &mut os[fi * oh * ow..(fi + 1) * oh * ow];
                    for i in 0..d.h {
                        let row = &mut plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..d.w {
                            row[2 * j + b] = src[i * d.w + j];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tconv_backward<T: Scalar>(
    d: &ConvDims,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let f4 = d.f * 4;
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut dy = vec![T::zero(); f4 * hw];
    for ni in 0..d.n {
        let ds = &dout[ni * d.f * oh * ow..(ni + 1) * d.f * oh * ow];
        for fi in 0..d.f {
            let plane = &ds[fi * oh * ow..(fi + 1) * oh * ow];
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut dy[(fi * 4 + a * 2 + b) * hw..(fi * 4 + a * 2 + b + 1) * hw];
                    for i in 0..d.h {
                        let row = &plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..d.w {
                            dst[i * d.w + j] = row[2 * j + b];
                        }
                    }
                }
            }
        }
        if let Some(dxall) = dx.as_deref_mut() {
            // dX[C, HW] += K[C, F*4] * dY[F*4, HW]
            T::gemm(
                d.c,
                f4,
                hw,
                T::one(),
                kernel,
                f4 as isize,
                1,
                &dy,
                hw as isize,
                1,
                T::one(),
                &mut dxall[ni * d.c * hw..(ni + 1) * d.c * hw],
                hw as isize,
                1,
            );
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            let xs = &x[ni * d.c * hw..(ni + 1) * d.c * hw];
            // dK[C, F*4] += X[C, HW] * dY^T[HW, F*4]
            T::gemm(
                d.c,
                hw,
                f4,
                T::one(),
                xs,
                hw as isize,
                1,
                &dy,
                1,
                hw as isize,
                T::one(),
                dk,
                f4 as isize,
                1,
            );
        }
    }
}
