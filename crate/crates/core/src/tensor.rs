//! Dense row-major `f64` tensors and the pure (tape-free) kernels behind every
//! differentiable operation.
//!
//! Shapes follow a few fixed conventions: matrices are `[rows, cols]`, images
//! and feature maps are `[channels, height, width]`, convolution kernels are
//! `[out_channels, in_channels, kh, kw]`. There is no general broadcasting.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row vector `[1, n]`.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), m, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![n, m],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape("dims3", format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Index of the largest entry of each row; ties go to the smaller index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (n, m) = self.dims2()?;
        Ok((0..n)
            .map(|i| {
                let row = &self.data[i * m..(i + 1) * m];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// `out[m, n] = A · b` where `a(i, p)` reads `A[i, p]` and `b` is `[k, n]`.
fn gemm(m: usize, k: usize, n: usize, a: impl Fn(usize, usize) -> f64, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    // four output rows per pass so each row of `b` is loaded once per block
    for (blk, block) in out.chunks_mut(4 * n).enumerate() {
        let i0 = 4 * blk;
        if block.len() == 4 * n {
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a(i0, p), a(i0 + 1, p), a(i0 + 2, p), a(i0 + 3, p));
                let brow = &b[p * n..(p + 1) * n];
                for ((((o0, o1), o2), o3), &bv) in r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()).zip(brow) {
                    *o0 += a0 * bv;
                    *o1 += a1 * bv;
                    *o2 += a2 * bv;
                    *o3 += a3 * bv;
                }
            }
        } else {
            for (r, orow) in block.chunks_mut(n).enumerate() {
                for p in 0..k {
                    let av = a(i0 + r, p);
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
    out
}

/// Matrix product `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
    }
    let out = gemm(m, k, n, |i, p| a.data[i * k + p], &b.data);
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("[{k}, {m}]ᵀ x [{k2}, {n}]")));
    }
    let out = gemm(m, k, n, |i, p| a.data[p * m + i], &b.data);
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]ᵀ")));
    }
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b.data[j * k + p];
        }
    }
    matmul(a, &Tensor::new(vec![k, n], bt)?)
}

/// Convolution geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }

    pub fn output_dim(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if kernel == 0 || kernel > padded {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} does not fit padded input {padded}"),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(x: &Tensor, k: &Tensor, spec: Conv2dSpec) -> Result<ConvGeom> {
    let (cin, h, w) = x.dims3()?;
    let (cout, cin2, kh, kw) = match k.shape[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d", format!("kernel rank 4 expected, got {:?}", k.shape))),
    };
    if cin != cin2 {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {cin2}"),
        ));
    }
    let oh = spec.output_dim(h, kh)?;
    let ow = spec.output_dim(w, kw)?;
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, spec: Conv2dSpec) -> (usize, usize) {
    let s = spec.stride as isize;
    let off = k as isize - spec.padding as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest o with o*s + off <= len - 1
    let hi_num = len as isize - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let lo = lo.max(0) as usize;
    let hi = (hi + 1).clamp(0, out as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds `x` into `[C_in * kh * kw, H' * W']` patch columns.
fn im2col(x: &[f64], g: &ConvGeom, spec: Conv2dSpec) -> Vec<f64> {
    let p = g.oh * g.ow;
    let s = spec.stride;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * p];
    for ci in 0..g.cin {
        let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, spec);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, spec);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let crow = &mut cols[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - spec.padding;
                    let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        crow[oy * g.ow + ox] = xrow[ox * s + kx - spec.padding];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeom, spec: Conv2dSpec) -> Vec<f64> {
    let p = g.oh * g.ow;
    let s = spec.stride;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let xplane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, spec);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, spec);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let crow = &cols[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - spec.padding;
                    let xrow = &mut xplane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        xrow[ox * s + kx - spec.padding] += crow[oy * g.ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation `[C_in, H, W] ⋆ [C_out, C_in, kh, kw] -> [C_out, H', W']`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = conv_geom(x, kernel, spec)?;
    let r = g.cin * g.kh * g.kw;
    let cols = Tensor::new(vec![r, g.oh * g.ow], im2col(&x.data, &g, spec))?;
    let k = Tensor::new(vec![g.cout, r], kernel.data.clone())?;
    matmul(&k, &cols)?.reshape(vec![g.cout, g.oh, g.ow])
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = conv_geom(x, kernel, spec)?;
    let r = g.cin * g.kh * g.kw;
    let p = g.oh * g.ow;
    if grad_out.shape != [g.cout, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient {:?} vs output [{}, {}, {}]", grad_out.shape, g.cout, g.oh, g.ow),
        ));
    }
    let gmat = Tensor::new(vec![g.cout, p], grad_out.data.clone())?;
    let dk = if need_kernel {
        let cols = Tensor::new(vec![r, p], im2col(&x.data, &g, spec))?;
        Some(matmul_nt(&gmat, &cols)?.reshape(kernel.shape.clone())?)
    } else {
        None
    };
    let dx = if need_input {
        let k = Tensor::new(vec![g.cout, r], kernel.data.clone())?;
        let dcols = matmul_tn(&k, &gmat)?;
        Some(Tensor::new(x.shape.clone(), col2im(&dcols.data, &g, spec))?)
    } else {
        None
    };
    Ok((dx, dk))
}

/// Row-wise softmax of a `[n, m]` matrix, stabilised by max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if m == 0 {
        return Err(Error::shape("softmax", "rows must have at least one entry"));
    }
    let mut out = logits.data.clone();
    for row in out.chunks_mut(m).take(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape.clone(), out)?.ensure_finite("softmax")
}

/// Row-wise log-softmax of a `[n, m]` matrix.
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if m == 0 {
        return Err(Error::shape("log_softmax", "rows must have at least one entry"));
    }
    let mut out = logits.data.clone();
    for row in out.chunks_mut(m).take(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(logits.shape.clone(), out)?.ensure_finite("log_softmax")
}

/// Constant sparse matrix stored as row-sorted triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, _) in &entries {
            if r >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "SparseMatrix",
                    index: r,
                    len: rows,
                });
            }
            if c >= cols {
                return Err(Error::IndexOutOfRange {
                    op: "SparseMatrix",
                    index: c,
                    len: cols,
                });
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok(SparseMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// `S · x` for a dense `[cols, f]` matrix.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if n != self.cols {
            return Err(Error::shape(
                "spmm",
                format!("sparse [{}, {}] x dense [{n}, {f}]", self.rows, self.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * f];
        for &(r, c, w) in &self.entries {
            let src = &x.data[c * f..(c + 1) * f];
            let dst = &mut out[r * f..(r + 1) * f];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        Tensor::new(vec![self.rows, f], out)
    }

    /// `Sᵀ · g` for a dense `[rows, f]` matrix.
    pub fn matmul_transposed(&self, g: &Tensor) -> Result<Tensor> {
        let (n, f) = g.dims2()?;
        if n != self.rows {
            return Err(Error::shape("spmm_t", format!("rows {} vs {n}", self.rows)));
        }
        let mut out = vec![0.0; self.cols * f];
        for &(r, c, w) in &self.entries {
            let src = &g.data[r * f..(r + 1) * f];
            let dst = &mut out[c * f..(c + 1) * f];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        Tensor::new(vec![self.cols, f], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Aggregation matrix for directed edges `(src, dst)`: row `dst` collects `src`.
pub fn aggregation_matrix(n: usize, edges: &[(usize, usize)], mode: Aggregation) -> Result<SparseMatrix> {
    let mut indeg = vec![0usize; n];
    for &(s, d) in edges {
        for idx in [s, d] {
            if idx >= n {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_aggregate",
                    index: idx,
                    len: n,
                });
            }
        }
        indeg[d] += 1;
    }
    let entries = edges
        .iter()
        .map(|&(s, d)| {
            let w = match mode {
                Aggregation::Sum => 1.0,
                Aggregation::Mean => 1.0 / indeg[d] as f64,
            };
            (d, s, w)
        })
        .collect();
    SparseMatrix::new(n, n, entries)
}

/// `out[i]` aggregates the features of the in-neighbours of `i`.
pub fn scatter_aggregate(
    node_feats: &Tensor,
    edges: &[(usize, usize)],
    mode: Aggregation,
) -> Result<Tensor> {
    let (n, _) = node_feats.dims2()?;
    aggregation_matrix(n, edges, mode)?.matmul(node_feats)
}

/// Bilinear resize of a single `[h, w]` plane (half-pixel centres, edge clamped).
pub fn bilinear_resize(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}
