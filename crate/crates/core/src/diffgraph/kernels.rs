//! Forward and adjoint kernels on rank-4 `(C, D, H, W)` feature maps.
//!
//! All loops run in a fixed order so forward and backward passes are
//! bitwise reproducible.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::Dims;

/// Row-major matrix view: base slice plus row and column strides.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Mat {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `C = A·B + beta·C` for an `m×k` by `k×n` product; `C` has row stride `rsc`.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], rsc: usize, beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() > (m - 1) * rsc + n - 1);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Column-buffer budget per slab, in values.
const SLAB_BUDGET: usize = 1 << 17;

/// Output depth slices processed per im2col slab.
fn slab_depth(g: &ConvGeom) -> usize {
    let per = g.rows() * g.output.h * g.output.w;
    (SLAB_BUDGET / per.max(1)).clamp(1, g.output.d)
}

/// Output extent of a "same"-padded convolution: `ceil(n / stride)`.
pub fn conv_out_dims(dims: Dims, stride: usize) -> Dims {
    Dims::new(
        dims.d.div_ceil(stride),
        dims.h.div_ceil(stride),
        dims.w.div_ceil(stride),
    )
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    k: usize,
    pad: usize,
    stride: usize,
    input: Dims,
    output: Dims,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize) -> Result<(usize, ConvGeom)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("conv3d input rank {} != 4", x.rank())));
    }
    let ws = w.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || !(ws[2] == 1 || ws[2] == 3) {
        return Err(Error::Shape(format!(
            "conv3d kernel shape {ws:?} is not (Cout, Cin, k, k, k) with k in {{1, 3}}"
        )));
    }
    if ws[1] != x.channels() {
        return Err(Error::Shape(format!(
            "conv3d kernel expects {} input channels, got {}",
            ws[1],
            x.channels()
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("stride {stride} not in {{1, 2}}")));
    }
    let k = ws[2];
    let input = x.spatial();
    Ok((
        ws[0],
        ConvGeom {
            cin: ws[1],
            k,
            pad: k / 2,
            stride,
            input,
            output: conv_out_dims(input, stride),
        },
    ))
}

/// For each kernel tap along one axis, the (output index, input index)
/// pairs that fall inside the input.
fn tap_ranges(g: &ConvGeom, in_len: usize, out_len: usize) -> Vec<Vec<(usize, usize)>> {
    (0..g.k)
        .map(|t| {
            (0..out_len)
                .filter_map(|o| {
                    let i = (o * g.stride + t) as isize - g.pad as isize;
                    (i >= 0 && (i as usize) < in_len).then_some((o, i as usize))
                })
                .collect()
        })
        .collect()
}

/// Columns for output depth slices `d0..d1` into `col` (`rows × slab`).
fn im2col(x: &[f64], g: &ConvGeom, d0: usize, d1: usize, col: &mut Vec<f64>) {
    let (id, od) = (g.input, g.output);
    let oplane = od.h * od.w;
    let q = (d1 - d0) * oplane;
    col.clear();
    col.resize(g.rows() * q, 0.0);
    let td = tap_ranges(g, id.d, od.d);
    let th = tap_ranges(g, id.h, od.h);
    let tw = tap_ranges(g, id.w, od.w);
    let plane = id.len();
    let mut row = 0;
    for ci in 0..g.cin {
        let xs = &x[ci * plane..(ci + 1) * plane];
        for kd in 0..g.k {
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let dst = &mut col[row * q..(row + 1) * q];
                    for &(o_d, i_d) in td[kd].iter().filter(|(o, _)| (d0..d1).contains(o)) {
                        for &(o_h, i_h) in &th[kh] {
                            let ob = ((o_d - d0) * od.h + o_h) * od.w;
                            let ib = (i_d * id.h + i_h) * id.w;
                            for &(o_w, i_w) in &tw[kw] {
                                dst[ob + o_w] = xs[ib + i_w];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates slab columns back into `x`.
fn col2im(col: &[f64], g: &ConvGeom, d0: usize, d1: usize, x: &mut [f64]) {
    let (id, od) = (g.input, g.output);
    let q = (d1 - d0) * od.h * od.w;
    let plane = id.len();
    let td = tap_ranges(g, id.d, od.d);
    let th = tap_ranges(g, id.h, od.h);
    let tw = tap_ranges(g, id.w, od.w);
    let mut row = 0;
    for ci in 0..g.cin {
        let xs = &mut x[ci * plane..(ci + 1) * plane];
        for kd in 0..g.k {
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let src = &col[row * q..(row + 1) * q];
                    for &(o_d, i_d) in td[kd].iter().filter(|(o, _)| (d0..d1).contains(o)) {
                        for &(o_h, i_h) in &th[kh] {
                            let ob = ((o_d - d0) * od.h + o_h) * od.w;
                            let ib = (i_d * id.h + i_h) * id.w;
                            for &(o_w, i_w) in &tw[kw] {
                                xs[ib + i_w] += src[ob + o_w];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Zero-padded "same" cross-correlation with a 3×3×3 or 1×1×1 kernel.
pub fn conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (cout, g) = conv_geom(x, w, stride)?;
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::Shape(format!("bias has {} entries, expected {cout}", b.len())));
        }
    }
    let p = g.output.len();
    let mut out = vec![0.0; cout * p];
    if let Some(b) = b {
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b.data()[co]);
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    if g.k == 1 && g.stride == 1 {
        gemm(cout, g.cin, p, Mat::rows(w.data(), g.cin), Mat::rows(x.data(), p), &mut out, p, beta);
    } else {
        let oplane = g.output.h * g.output.w;
        let step = slab_depth(&g);
        SCRATCH.with(|s| {
            let col = &mut s.borrow_mut().0;
            for d0 in (0..g.output.d).step_by(step) {
                let d1 = (d0 + step).min(g.output.d);
                im2col(x.data(), &g, d0, d1, col);
                let q = (d1 - d0) * oplane;
                gemm(cout, g.rows(), q, Mat::rows(w.data(), g.rows()), Mat::rows(col, q), &mut out[d0 * oplane..], p, beta);
            }
        });
    }
    Tensor::new(&Tensor::feature_shape(cout, g.output), out)
}

pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    need_x: bool,
) -> Result<ConvGrads> {
    let (cout, g) = conv_geom(x, w, stride)?;
    let p = g.output.len();
    let go = grad_out.data();
    let direct = g.k == 1 && g.stride == 1;
    let rows = g.rows();
    let mut gw = vec![0.0; cout * rows];
    let gb: Vec<f64> = go.chunks_exact(p).map(|r| r.iter().sum()).collect();
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let wt = Mat::rows(w.data(), rows).t();
    if direct {
        gemm(cout, p, rows, Mat::rows(go, p), Mat::rows(x.data(), p).t(), &mut gw, rows, 0.0);
        if let Some(gx) = gx.as_mut() {
            gemm(rows, cout, p, wt, Mat::rows(go, p), gx, p, 0.0);
        }
    } else {
        let oplane = g.output.h * g.output.w;
        let step = slab_depth(&g);
        SCRATCH.with(|s| {
            let (col, gcol) = &mut *s.borrow_mut();
            for d0 in (0..g.output.d).step_by(step) {
                let d1 = (d0 + step).min(g.output.d);
                let q = (d1 - d0) * oplane;
                let go_slab = Mat {
                    data: &go[d0 * oplane..],
                    rs: p,
                    cs: 1,
                };
                im2col(x.data(), &g, d0, d1, col);
                let beta = if d0 == 0 { 0.0 } else { 1.0 };
                gemm(cout, q, rows, go_slab, Mat::rows(col, q).t(), &mut gw, rows, beta);
                if let Some(gx) = gx.as_mut() {
                    gcol.clear();
                    gcol.resize(rows * q, 0.0);
                    gemm(rows, cout, q, wt, go_slab, gcol, q, 0.0);
                    col2im(gcol, &g, d0, d1, gx);
                }
            }
        });
    }
    let gx = gx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    Ok(ConvGrads {
        x: gx,
        w: Tensor::new(w.shape(), gw)?,
        b: Tensor::new(&[cout], gb)?,
    })
}

/// Per-axis cell boundaries `[start, end)` of a pooling partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub axes: [Vec<(usize, usize)>; 3],
}

impl Partition {
    /// Regular cells of extent `cell`; a trailing partial cell is padded by
    /// replicating the edge voxel.
    pub fn replicated(dims: Dims, cell: [usize; 3]) -> Self {
        let axis = |n: usize, c: usize| {
            (0..n.div_ceil(c))
                .map(|j| (j * c, j * c + c))
                .collect::<Vec<_>>()
        };
        Partition {
            axes: [
                axis(dims.d, cell[0]),
                axis(dims.h, cell[1]),
                axis(dims.w, cell[2]),
            ],
        }
    }

    /// `cells` equal cells per axis of extent `floor(n / cells)`; the last
    /// cell absorbs the remainder.
    pub fn grid(dims: Dims, cells: [usize; 3]) -> Self {
        let axis = |n: usize, g: usize| {
            let e = n / g;
            (0..g)
                .map(|j| (j * e, if j + 1 == g { n } else { j * e + e }))
                .collect::<Vec<_>>()
        };
        Partition {
            axes: [
                axis(dims.d, cells[0]),
                axis(dims.h, cells[1]),
                axis(dims.w, cells[2]),
            ],
        }
    }

    pub fn out_dims(&self) -> Dims {
        Dims::new(self.axes[0].len(), self.axes[1].len(), self.axes[2].len())
    }

    /// Calls `f(out_index, in_index)` for every (possibly replicated) member
    /// of every cell, in a fixed order.
    fn for_each(&self, input: Dims, mut f: impl FnMut(usize, usize)) {
        let out = self.out_dims();
        let clamp = |v: usize, n: usize| v.min(n - 1);
        for (od, &(d0, d1)) in self.axes[0].iter().enumerate() {
            for (oh, &(h0, h1)) in self.axes[1].iter().enumerate() {
                for (ow, &(w0, w1)) in self.axes[2].iter().enumerate() {
                    let o = out.index(od, oh, ow);
                    for d in d0..d1 {
                        for h in h0..h1 {
                            for w in w0..w1 {
                                let i = input.index(
                                    clamp(d, input.d),
                                    clamp(h, input.h),
                                    clamp(w, input.w),
                                );
                                f(o, i);
                            }
                        }
                    }
                }
            }
        }
    }

    fn cell_sizes(&self) -> Vec<f64> {
        let out = self.out_dims();
        let mut sizes = Vec::with_capacity(out.len());
        for &(d0, d1) in &self.axes[0] {
            for &(h0, h1) in &self.axes[1] {
                for &(w0, w1) in &self.axes[2] {
                    sizes.push(((d1 - d0) * (h1 - h0) * (w1 - w0)) as f64);
                }
            }
        }
        sizes
    }
}

pub fn partition_pool(x: &Tensor, part: &Partition) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("pool input rank {} != 4", x.rank())));
    }
    let input = x.spatial();
    let out = part.out_dims();
    let sizes = part.cell_sizes();
    let c = x.channels();
    let mut data = vec![0.0; c * out.len()];
    for ch in 0..c {
        let xs = x.channel(ch);
        let os = &mut data[ch * out.len()..(ch + 1) * out.len()];
        part.for_each(input, |o, i| os[o] += xs[i]);
        for (v, n) in os.iter_mut().zip(&sizes) {
            *v /= n;
        }
    }
    Tensor::new(&Tensor::feature_shape(c, out), data)
}

pub fn partition_pool_backward(x_shape: &[usize], part: &Partition, grad_out: &Tensor) -> Tensor {
    let input = Dims::new(x_shape[1], x_shape[2], x_shape[3]);
    let sizes = part.cell_sizes();
    let mut gx = Tensor::zeros(x_shape);
    let plane = input.len();
    for ch in 0..x_shape[0] {
        let go = grad_out.channel(ch);
        let gs = &mut gx.data_mut()[ch * plane..(ch + 1) * plane];
        part.for_each(input, |o, i| gs[i] += go[o] / sizes[o]);
    }
    gx
}

/// Mean over `cell`-sized blocks; trailing partial blocks replicate the edge.
pub fn avg_pool3d(x: &Tensor, cell: [usize; 3]) -> Result<Tensor> {
    if cell.contains(&0) {
        return Err(Error::InvalidArgument("zero-size pooling cell".into()));
    }
    partition_pool(x, &Partition::replicated(x.spatial(), cell))
}

/// Linear interpolation table for one axis of a ×2 align-corners-false
/// resample: `(i0, i1, frac)` per output index.
fn upsample_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            if i0 + 1 >= n_in {
                (i0, i0, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Resamples one spatial axis (`axis` ∈ 1..=3 of the rank-4 shape).
fn resample_axis(data: &[f64], shape: [usize; 4], axis: usize, n_out: usize) -> Vec<f64> {
    let n_in = shape[axis];
    let table = upsample_table(n_in, n_out);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, &(i0, i1, t)) in table.iter().enumerate() {
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            let d = &mut dst[j * inner..(j + 1) * inner];
            for k in 0..inner {
                d[k] = (1.0 - t) * a[k] + t * b[k];
            }
        }
    }
    out
}

fn resample_axis_adjoint(grad: &[f64], shape_in: [usize; 4], axis: usize, n_out: usize) -> Vec<f64> {
    let n_in = shape_in[axis];
    let table = upsample_table(n_in, n_out);
    let outer: usize = shape_in[..axis].iter().product();
    let inner: usize = shape_in[axis + 1..].iter().product();
    let mut gx = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        let g = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut gx[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, &(i0, i1, t)) in table.iter().enumerate() {
            let gj = &g[j * inner..(j + 1) * inner];
            for k in 0..inner {
                dst[i0 * inner + k] += (1.0 - t) * gj[k];
            }
            for k in 0..inner {
                dst[i1 * inner + k] += t * gj[k];
            }
        }
    }
    gx
}

fn shape4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Trilinear ×2 upsampling (align-corners false) onto `out` spatial dims.
/// Each output extent must lie within one voxel of twice the input extent;
/// positions past the edge clamp to it.
pub fn upsample2_trilinear(x: &Tensor, out: Dims) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("upsample input rank {} != 4", x.rank())));
    }
    let dims = x.spatial();
    for (o, i) in out.as_array().into_iter().zip(dims.as_array()) {
        if o + 1 < 2 * i || o > 2 * i + 1 {
            return Err(Error::Shape(format!(
                "cannot upsample {dims} onto {out}: more than one voxel off 2x"
            )));
        }
    }
    let mut shape = shape4(x.shape());
    let mut data = x.data().to_vec();
    for (axis, n) in [(3, out.w), (2, out.h), (1, out.d)] {
        data = resample_axis(&data, shape, axis, n);
        shape[axis] = n;
    }
    Tensor::new(&shape, data)
}

pub fn upsample2_trilinear_backward(x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let out = grad_out.spatial();
    let xs = shape4(x_shape);
    // forward order was W, H, D; unwind D, H, W
    let s_after_w = [xs[0], xs[1], xs[2], out.w];
    let s_after_h = [xs[0], xs[1], out.h, out.w];
    let g = resample_axis_adjoint(grad_out.data(), s_after_h, 1, out.d);
    let g = resample_axis_adjoint(&g, s_after_w, 2, out.h);
    let g = resample_axis_adjoint(&g, xs, 3, out.w);
    Tensor::new(x_shape, g).expect("adjoint preserves shape")
}

/// Per-position linear map over the leading axis: `(Cin, ...) -> (Cout, ...)`.
pub fn pointwise(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != x.shape()[0] {
        return Err(Error::Shape(format!(
            "pointwise weight {ws:?} incompatible with input {:?}",
            x.shape()
        )));
    }
    let (cout, cin) = (ws[0], ws[1]);
    let p = x.len() / cin;
    let mut out = vec![0.0; cout * p];
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::Shape(format!("bias has {} entries, expected {cout}", b.len())));
        }
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b.data()[co]);
        }
    }
    gemm(cout, cin, p, Mat::rows(w.data(), cin), Mat::rows(x.data(), p), &mut out, p, if b.is_some() { 1.0 } else { 0.0 });
    let mut shape = x.shape().to_vec();
    shape[0] = cout;
    Tensor::new(&shape, out)
}

pub fn pointwise_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor, need_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let p = x.len() / cin;
    let go = grad_out.data();
    let mut gw = vec![0.0; cout * cin];
    gemm(cout, p, cin, Mat::rows(go, p), Mat::rows(x.data(), p).t(), &mut gw, cin, 0.0);
    let gb: Vec<f64> = go.chunks_exact(p).map(|r| r.iter().sum()).collect();
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; cin * p];
        gemm(cin, cout, p, Mat::rows(w.data(), cin).t(), Mat::rows(go, p), &mut gx, p, 0.0);
        Tensor::new(x.shape(), gx).expect("shape preserved")
    });
    (
        gx,
        Tensor::new(w.shape(), gw).expect("shape preserved"),
        Tensor::new(&[cout], gb).expect("shape preserved"),
    )
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Shape(format!(
            "concat needs matching spatial dims, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}
