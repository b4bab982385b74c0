//! Slice-level compute kernels: im2col convolution, its adjoint, and pooling.

use std::borrow::Cow;

use super::Real;

/// `floor((extent + 2·padding − dilation·(kernel − 1) − 1) / stride) + 1`.
/// May be zero or negative when the kernel does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> i64 {
    let span = (extent + 2 * padding) as i64 - (dilation * (kernel - 1)) as i64 - 1;
    span.div_euclid(stride as i64) + 1
}

/// `(extent − 1)·stride − 2·padding + dilation·(kernel − 1) + 1`.
pub fn conv_transpose_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> i64 {
    ((extent - 1) * stride) as i64 - 2 * padding as i64 + (dilation * (kernel - 1)) as i64 + 1
}

/// `floor((extent − window) / stride) + 1`.
pub fn pool_output_extent(extent: usize, window: usize, stride: usize) -> i64 {
    (extent as i64 - window as i64).div_euclid(stride as i64) + 1
}

/// Geometry of a convolution mapping `(cin, h, w)` to `(cout, oh, ow)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0 && self.oh == self.h && self.ow == self.w
    }

    /// Input coordinate sampled by output `o` at kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfold one `(cin, h, w)` image into a `(cin·kh·kw) × (oh·ow)` column matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki, g.h) else {
                        continue;
                    };
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a, T: Real>(x: &'a [T], g: &ConvGeom, scratch: &'a mut Vec<T>) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        Cow::Borrowed(x)
    } else {
        scratch.resize(g.patch_len() * g.out_pixels(), T::zero());
        im2col(x, g, scratch);
        Cow::Borrowed(&scratch[..])
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], pixels: usize) {
    for (plane, &b) in out.chunks_mut(pixels).zip(bias) {
        plane.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn accumulate_bias_grad<T: Real>(dout: &[T], db: &mut [T], pixels: usize) {
    for (plane, acc) in dout.chunks(pixels).zip(db.iter_mut()) {
        *acc = *acc + plane.iter().copied().sum::<T>();
    }
}

/// Batched convolution. `weight` is `cout × cin × kh × kw`.
pub fn conv2d_forward<T: Real>(x: &[T], batch: usize, weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut scratch = Vec::new();
    for n in 0..batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let cols = columns(xn, g, &mut scratch);
        let on = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        T::gemm(
            g.cout,
            g.patch_len(),
            g.out_pixels(),
            weight,
            false,
            &cols,
            false,
            T::zero(),
            on,
        );
        if let Some(b) = bias {
            add_bias(on, b, g.out_pixels());
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each requested buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut scratch = Vec::new();
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..batch {
        let dn = &dout[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(db) = db.as_deref_mut() {
            accumulate_bias_grad(dn, db, p);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
            let cols = columns(xn, g, &mut scratch);
            T::gemm(g.cout, p, k, dn, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if g.is_pointwise() {
                T::gemm(k, g.cout, p, weight, true, dn, false, T::one(), dxn);
            } else {
                T::gemm(k, g.cout, p, weight, true, dn, false, T::zero(), &mut dcols);
                col2im_add(&dcols, g, dxn);
            }
        }
    }
}

/// Transposed convolution as the adjoint of the convolution described by `g`:
/// input `y` lives in the conv's output space `(cout, oh, ow)`, the result in
/// its input space `(cin, h, w)`. `weight` is `cout × cin × kh × kw`.
pub fn conv_transpose2d_forward<T: Real>(
    y: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut out = vec![T::zero(); batch * g.in_len()];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..batch {
        let yn = &y[n * g.out_len()..(n + 1) * g.out_len()];
        let on = &mut out[n * g.in_len()..(n + 1) * g.in_len()];
        if g.is_pointwise() {
            T::gemm(k, g.cout, p, weight, true, yn, false, T::zero(), on);
        } else {
            T::gemm(k, g.cout, p, weight, true, yn, false, T::zero(), &mut cols);
            col2im_add(&cols, g, on);
        }
        if let Some(b) = bias {
            add_bias(on, b, g.h * g.w);
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`], accumulated into the given buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    y: &[T],
    batch: usize,
    weight: &[T],
    g: &ConvGeom,
    dout: &[T],
    mut dy: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut scratch = Vec::new();
    for n in 0..batch {
        let dn = &dout[n * g.in_len()..(n + 1) * g.in_len()];
        if let Some(db) = db.as_deref_mut() {
            accumulate_bias_grad(dn, db, g.h * g.w);
        }
        if dy.is_none() && dw.is_none() {
            continue;
        }
        let cols = columns(dn, g, &mut scratch);
        if let Some(dy) = dy.as_deref_mut() {
            let dyn_ = &mut dy[n * g.out_len()..(n + 1) * g.out_len()];
            T::gemm(g.cout, k, p, weight, false, &cols, false, T::one(), dyn_);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let yn = &y[n * g.out_len()..(n + 1) * g.out_len()];
            T::gemm(g.cout, p, k, yn, false, &cols, true, T::one(), dw);
        }
    }
}

/// Average pooling without padding over `planes` independent `h × w` planes.
pub fn avg_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let scale = T::one() / T::of((window * window) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..window {
                    let row = &src[(oy * stride + i) * w + ox * stride..];
                    for &v in &row[..window] {
                        acc = acc + v;
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward<T: Real>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let scale = T::one() / T::of((window * window) as f64);
    for pl in 0..planes {
        let src = &dout[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * scale;
                for i in 0..window {
                    let base = (oy * stride + i) * w + ox * stride;
                    for v in &mut dst[base..base + window] {
                        *v = *v + g;
                    }
                }
            }
        }
    }
}
