//! CPU convolution kernels with hand-written backward passes.
//!
//! Dense convolutions unfold the input (im2col) and multiply with `gemm`;
//! the per-channel 3x3 variant is a direct loop.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.n * ho * wo)
    }

    /// Calls `f(col_index, src_index)` for every in-bounds tap of row `row`.
    #[inline]
    fn for_each_tap(&self, row: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let k = self.k;
        let (ci, ky, kx) = (row / (k * k), (row / k) % k, row % k);
        for b in 0..self.n {
            let plane = (b * self.c + ci) * self.h * self.w;
            for oy in 0..ho {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let col_base = (b * ho + oy) * wo;
                let src_base = plane + iy as usize * self.w;
                for ox in 0..wo {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix >= 0 && (ix as usize) < self.w {
                        f(col_base + ox, src_base + ix as usize);
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg(
            "im2col expects contiguous input".into(),
        )),
    }
}

fn unfold<T: WithDType>(g: &Geometry, x: &[T]) -> Vec<T> {
    let (rows, cols) = g.cols_shape();
    let mut out = vec![T::zero(); rows * cols];
    for (row, dst) in out.chunks_mut(cols).enumerate() {
        g.for_each_tap(row, |col, src| dst[col] = x[src]);
    }
    out
}

fn fold<T: WithDType>(g: &Geometry, cols_data: &[T]) -> Vec<T> {
    let (_, cols) = g.cols_shape();
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    for (row, src_row) in cols_data.chunks(cols).enumerate() {
        g.for_each_tap(row, |col, dst| out[dst] += src_row[col]);
    }
    out
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "depthwise conv supports f32 and f64".into(),
                ))
            }
        }
    };
}

/// Cross-correlation of `x: [N, C, H, W]` with `weight: [Co, C, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (_, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(shape_err!(
            "conv2d: input {:?} vs weight {:?}",
            x.dims(),
            weight.dims()
        ));
    }
    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(shape_err!(
            "conv2d: kernel {k} does not fit {h}x{w} with padding {pad}"
        ));
    }
    Ok(x.contiguous()?
        .apply_op2(&weight.contiguous()?, Conv { k, stride, pad })?)
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn row_major(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `dst[offset..]` (row-major, row stride `dst_rs`) `(+)= a · b`.
fn gemm_into<T: WithDType>(
    dst: &mut [T],
    offset: usize,
    dst_rs: usize,
    a: View<T>,
    b: View<T>,
    accumulate: bool,
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows);
    if m == 0 || n == 0 {
        return;
    }
    assert!(offset + (m - 1) * dst_rs + n <= dst.len());
    if k == 0 {
        return;
    }
    assert!(a.last() < a.data.len() && b.last() < b.data.len());
    // SAFETY: every index touched lies within the slices, checked above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr().add(offset),
            1,
            dst_rs as isize,
            accumulate,
            a.data.as_ptr().add(a.offset),
            a.cs as isize,
            a.rs as isize,
            b.data.as_ptr().add(b.offset),
            b.cs as isize,
            b.rs as isize,
            if accumulate { T::one() } else { T::zero() },
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn geometry(l: &Layout, k: usize, stride: usize, pad: usize) -> candle_core::Result<Geometry> {
    let (n, c, h, w) = l.shape().dims4()?;
    Ok(Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
    })
}

/// `(x, weight[Co, C, k, k]) -> y`
#[derive(Clone, Copy)]
struct Conv {
    k: usize,
    stride: usize,
    pad: usize,
}
/// `(grad_y, weight) -> grad_x`
struct ConvInputGrad(Geometry);
/// `(x, grad_y) -> grad_weight`
struct ConvWeightGrad(Conv);

fn conv_forward<T: WithDType>(g: &Geometry, co: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, ncols) = g.cols_shape();
    let hw = ncols / g.n;
    let cols = unfold(g, x);
    let mut y = vec![T::zero(); g.n * co * hw];
    let wv = View::row_major(w, 0, co, rows, rows);
    for b in 0..g.n {
        let cv = View::row_major(&cols, b * hw, rows, hw, ncols);
        gemm_into(&mut y, b * co * hw, hw, wv, cv, false);
    }
    y
}

fn conv_input_grad<T: WithDType>(g: &Geometry, co: usize, grad: &[T], w: &[T]) -> Vec<T> {
    let (rows, ncols) = g.cols_shape();
    let hw = ncols / g.n;
    let mut dcols = vec![T::zero(); rows * ncols];
    let wt = View::row_major(w, 0, co, rows, rows).t();
    for b in 0..g.n {
        let gv = View::row_major(grad, b * co * hw, co, hw, hw);
        gemm_into(&mut dcols, b * hw, ncols, wt, gv, false);
    }
    fold(g, &dcols)
}

fn conv_weight_grad<T: WithDType>(g: &Geometry, co: usize, x: &[T], grad: &[T]) -> Vec<T> {
    let (rows, ncols) = g.cols_shape();
    let hw = ncols / g.n;
    let cols = unfold(g, x);
    let mut dw = vec![T::zero(); co * rows];
    for b in 0..g.n {
        let gv = View::row_major(grad, b * co * hw, co, hw, hw);
        let ct = View::row_major(&cols, b * hw, rows, hw, ncols).t();
        gemm_into(&mut dw, 0, rows, gv, ct, b > 0);
    }
    dw
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = geometry(l1, self.k, self.stride, self.pad)?;
        let co = l2.shape().dims()[0];
        let out = dispatch2!(s1, l1, s2, l2, |x, w| conv_forward(&g, co, x, w));
        let (ho, wo) = g.out_hw();
        Ok((out, Shape::from((g.n, co, ho, wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, wd) = x.dims4()?;
        let g = Geometry {
            n,
            c,
            h,
            w: wd,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &ConvInputGrad(g))?;
        let dw = x.apply_op2_no_bwd(&grad, &ConvWeightGrad(*self))?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let co = l2.shape().dims()[0];
        let out = dispatch2!(s1, l1, s2, l2, |gr, w| conv_input_grad(&g, co, gr, w));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let Conv { k, stride, pad } = self.0;
        let g = geometry(l1, k, stride, pad)?;
        let co = l2.shape().dims()[1];
        let out = dispatch2!(s1, l1, s2, l2, |x, gr| conv_weight_grad(&g, co, x, gr));
        Ok((out, Shape::from((co, g.c, k, k))))
    }
}

/// Visits every valid `(tap, out_row_segment, in_row_segment)` of a zero-padded
/// 3x3 per-channel correlation on `planes` planes of `h x w`.
#[inline]
fn dw_segments(
    planes: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    for p in 0..planes {
        for t in 0..9 {
            let (dy, dx) = (t / 3, t % 3);
            let x0 = 1usize.saturating_sub(dx);
            let x1 = (w + 1 - dx).min(w);
            for oy in 0..h {
                let iy = oy + dy;
                if iy < 1 || iy > h {
                    continue;
                }
                let out = (p * h + oy) * w;
                let inp = (p * h + iy - 1) * w;
                // in column = out column + dx - 1
                f(p, t, out + x0, inp + x0 + dx - 1, x1 - x0);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct DwDims {
    c: usize,
    planes: usize,
    h: usize,
    w: usize,
}

fn dw_dims(l: &Layout) -> candle_core::Result<DwDims> {
    let (n, c, h, w) = l.shape().dims4()?;
    Ok(DwDims {
        c,
        planes: n * c,
        h,
        w,
    })
}

fn dw_forward<T: WithDType>(d: DwDims, x: &[T], k: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    dw_segments(d.planes, d.h, d.w, |p, t, o, i, len| {
        let wt = k[(p % d.c) * 9 + t];
        for (yo, xi) in y[o..o + len].iter_mut().zip(&x[i..i + len]) {
            *yo += wt * *xi;
        }
    });
    y
}

fn dw_input_grad<T: WithDType>(d: DwDims, g: &[T], k: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.len()];
    dw_segments(d.planes, d.h, d.w, |p, t, o, i, len| {
        let wt = k[(p % d.c) * 9 + t];
        for (xo, gi) in dx[i..i + len].iter_mut().zip(&g[o..o + len]) {
            *xo += wt * *gi;
        }
    });
    dx
}

fn dw_weight_grad<T: WithDType>(d: DwDims, x: &[T], g: &[T]) -> Vec<T> {
    let mut dk = vec![T::zero(); d.c * 9];
    dw_segments(d.planes, d.h, d.w, |p, t, o, i, len| {
        let mut acc = T::zero();
        for (gi, xi) in g[o..o + len].iter().zip(&x[i..i + len]) {
            acc += *gi * *xi;
        }
        dk[(p % d.c) * 9 + t] += acc;
    });
    dk
}

/// `(x, kernel[C, 9]) -> y`
struct Depthwise;
/// `(grad_y, kernel) -> grad_x`
struct DepthwiseInputGrad;
/// `(x, grad_y) -> grad_kernel`
struct DepthwiseWeightGrad;

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dw_dims(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, k| dw_forward(d, x, k));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(k, &DepthwiseInputGrad)?;
        let dk = x.apply_op2_no_bwd(&grad, &DepthwiseWeightGrad)?;
        Ok((Some(dx), Some(dk)))
    }
}

impl CustomOp2 for DepthwiseInputGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3_input_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dw_dims(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |g, k| dw_input_grad(d, g, k));
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3_weight_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dw_dims(l1)?;
        let out = dispatch2!(s1, l1, s2, l2, |x, g| dw_weight_grad(d, x, g));
        Ok((out, Shape::from((d.c, 9))))
    }
}

/// Zero-padded per-channel 3x3 cross-correlation; `kernel: [C, 9]` with taps
/// in row-major order.
pub fn depthwise3x3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if kernel.dims() != [c, 9] {
        return Err(shape_err!(
            "depthwise kernel {:?} for {c} channels",
            kernel.dims()
        ));
    }
    Ok(x.contiguous()?
        .apply_op2(&kernel.contiguous()?, Depthwise)?)
}
