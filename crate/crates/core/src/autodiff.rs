//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each node holds its forward
//! value, the operation that produced it and whether any ancestor is a
//! trainable leaf. Parents always precede children, so a single reverse sweep
//! over the node list is a valid topological order for [`Graph::backward`].
//! Nodes that do not depend on a trainable leaf are never visited on the way
//! back, which keeps frozen sub-networks cheap.

use crate::error::{Error, Result};
use crate::tensor::{self, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Cos(Var),
    Sin(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Vec<usize> },
    ScatterRows { base: Var, rows: Var, index: Vec<usize> },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
    Unfold3x3 { x: Var, grid: (usize, usize) },
    Bilinear { field: Var, coords: Var },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Op-specific cached activations (layer-norm statistics).
    saved: Vec<T>,
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], keyed by node.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is unreachable from
    /// the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor::raw(self.shapes[v.0].clone(), g.clone()))
    }

    /// Like [`Gradients::wrt`] but unreachable nodes read as zeros.
    pub fn wrt_or_zeros(&self, v: Var) -> Tensor<T> {
        self.wrt(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape2(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(format!("{what}: expected a 2-D tensor, got {s:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        self.push_saved(value, op, parents, Vec::new())
    }

    fn push_saved(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], saved: Vec<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, saved: if requires_grad { saved } else { Vec::new() } });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul lhs")?;
        let (k2, n) = shape2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims differ: {m}x{k} · {k2}x{n}")));
        }
        let c = tensor::matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], c), Op::MatMul(a, b), &[a, b]))
    }

    /// `a[M×K] · b[N×K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = shape2(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt inner dims differ: {m}x{k} · ({n}x{k2})ᵀ")));
        }
        let c = tensor::matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], c), Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "transpose")?;
        let out = transpose_data(self.value(x).data(), m, n);
        Ok(self.push(Tensor::raw(vec![n, m], out), Op::Transpose(x), &[x]))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..×d] + b[d]`, broadcasting `b` over every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast(x, b, |v, w| v + w)?;
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[..×d] ⊙ g[d]`, broadcasting `g` over every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_broadcast(x, g, |v, w| v * w)?;
        Ok(self.push(out, Op::MulRow(x, g), &[x, g]))
    }

    fn row_broadcast(&self, x: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let xv = self.value(x);
        let bv = self.value(b);
        let d = xv.last_dim();
        if bv.numel() != d {
            return Err(Error::dim(format!("row broadcast: operand {:?} against row vector of {} values", xv.shape(), bv.numel())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &w) in row.iter_mut().zip(bv.data()) {
                *o = f(*o, w);
            }
        }
        Ok(Tensor::raw(xv.shape().to_vec(), out))
    }

    /// `x[r×d] ⊙ v[r]`: scales row `i` of `x` by `v[i]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        let d = xv.last_dim();
        let r = xv.rows();
        if vv.numel() != r {
            return Err(Error::dim(format!("column broadcast: {:?} has {r} rows but scale vector has {}", xv.shape(), vv.numel())));
        }
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(d).zip(vv.data()) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        Ok(self.push(out, Op::MulCol(x, v), &[x, v]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.cos());
        self.push(out, Op::Cos(x), &[x])
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sin());
        self.push(out, Op::Sin(x), &[x])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::from_usize(v.numel()).expect("count fits");
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Softmax over the last axis; rows are shifted by their max first.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let out = Tensor::raw(xv.shape().to_vec(), tensor::softmax_rows(xv.data(), d));
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: width {d} but gamma/beta have {}/{} values",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let rows = xv.rows();
        let dt = T::from_usize(d).expect("width fits");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xv.numel()];
        // saved = [x̂ (rows·d), rstd (rows)]
        let mut saved = vec![T::zero(); xv.numel() + rows];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in src {
                mean += v;
            }
            mean /= dt;
            let mut var = T::zero();
            for &v in src {
                var += (v - mean) * (v - mean);
            }
            var /= dt;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                let xh = (src[j] - mean) * rstd;
                saved[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
            saved[rows * d + r] = rstd;
        }
        let out = Tensor::raw(xv.shape().to_vec(), out);
        Ok(self.push_saved(out, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta], saved))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("slice_cols [{start}, {}) of width {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::raw(vec![m, len], out), Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let (m, _) = shape2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = shape2(self.value(p), "concat_cols")?;
            if mp != m {
                return Err(Error::dim(format!("concat_cols row counts differ: {m} vs {mp}")));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::raw(vec![m, total], out);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `index[i]` of a 2-D tensor, in the given order.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "gather_rows")?;
        if index.is_empty() {
            return Err(Error::dim("gather_rows with an empty index"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::dim(format!("gather_rows index {i} out of {m} rows")));
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::raw(vec![index.len(), n], out);
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Copy of `base` with row `index[i]` replaced by row `i` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = shape2(self.value(base), "scatter_rows base")?;
        let (k, n2) = shape2(self.value(rows), "scatter_rows rows")?;
        if n != n2 || k != index.len() {
            return Err(Error::dim(format!("scatter_rows: base {m}x{n}, rows {k}x{n2}, {} indices", index.len())));
        }
        let mut seen = vec![false; m];
        for &i in index {
            if i >= m || std::mem::replace(&mut seen[i], true) {
                return Err(Error::dim(format!("scatter_rows index {i} invalid or repeated")));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let src = self.value(rows).data();
        for (j, &i) in index.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&src[j * n..(j + 1) * n]);
        }
        let out = Tensor::raw(vec![m, n], out);
        Ok(self.push(out, Op::ScatterRows { base, rows, index: index.to_vec() }, &[base, rows]))
    }

    /// `[H×W×C] → [(H/P)(W/P) × P·P·C]`, patches in row-major patch-grid order,
    /// each patch flattened as (row-in-patch, col-in-patch, channel).
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (h, w, c) = match self.value(x).shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::geometry(format!("patchify expects H×W×C, got {s:?}"))),
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::geometry(format!("patch {patch} does not tile {h}x{w}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let width = patch * patch * c;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); gh * gw * width];
        for ty in 0..gh {
            for tx in 0..gw {
                let base = (ty * gw + tx) * width;
                for py in 0..patch {
                    let s = ((ty * patch + py) * w + tx * patch) * c;
                    let d = base + py * patch * c;
                    out[d..d + patch * c].copy_from_slice(&src[s..s + patch * c]);
                }
            }
        }
        let out = Tensor::raw(vec![gh * gw, width], out);
        Ok(self.push(out, Op::Patchify { x, patch }, &[x]))
    }

    /// Inverse layout of [`Graph::patchify`] for a `grid.0 × grid.1` token grid.
    pub fn unpatchify(&mut self, x: Var, grid: (usize, usize), patch: usize, channels: usize) -> Result<Var> {
        let (n, width) = shape2(self.value(x), "unpatchify")?;
        let (gh, gw) = grid;
        if n != gh * gw || width != patch * patch * channels {
            return Err(Error::geometry(format!(
                "unpatchify: {n}x{width} tokens for a {gh}x{gw} grid of {patch}x{patch}x{channels} patches"
            )));
        }
        let (h, w, c) = (gh * patch, gw * patch, channels);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); h * w * c];
        for ty in 0..gh {
            for tx in 0..gw {
                let base = (ty * gw + tx) * width;
                for py in 0..patch {
                    let d = ((ty * patch + py) * w + tx * patch) * c;
                    let s = base + py * patch * c;
                    out[d..d + patch * c].copy_from_slice(&src[s..s + patch * c]);
                }
            }
        }
        let out = Tensor::raw(vec![h, w, c], out);
        Ok(self.push(out, Op::Unpatchify { x, patch }, &[x]))
    }

    /// 3×3 neighbourhood unfolding of a token grid with zero padding:
    /// `[R·C × d] → [R·C × 9d]`, neighbours ordered (dy, dx) row-major.
    pub fn unfold3x3(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let (n, d) = shape2(self.value(x), "unfold3x3")?;
        let (gh, gw) = grid;
        if n != gh * gw {
            return Err(Error::geometry(format!("unfold3x3: {n} tokens on a {gh}x{gw} grid")));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * 9 * d];
        for r in 0..gh {
            for c in 0..gw {
                let o = (r * gw + c) * 9 * d;
                for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                    let (rr, cc) = (r as isize + dy, c as isize + dx);
                    if rr < 0 || cc < 0 || rr >= gh as isize || cc >= gw as isize {
                        continue;
                    }
                    let s = (rr as usize * gw + cc as usize) * d;
                    out[o + k * d..o + (k + 1) * d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let out = Tensor::raw(vec![n, 9 * d], out);
        Ok(self.push(out, Op::Unfold3x3 { x, grid }, &[x]))
    }

    /// Bilinear interpolation of `field[h×w×d]` at continuous grid coordinates
    /// `coords[m×2]` (row, col). Coordinates outside the grid are clamped to
    /// its boundary; the clamped axis then carries no coordinate gradient.
    pub fn bilinear_sample(&mut self, field: Var, coords: Var) -> Result<Var> {
        let (h, w, d) = match self.value(field).shape() {
            [h, w, d] => (*h, *w, *d),
            s => return Err(Error::dim(format!("bilinear_sample expects h×w×d, got {s:?}"))),
        };
        let (m, two) = shape2(self.value(coords), "bilinear_sample coords")?;
        if two != 2 {
            return Err(Error::dim(format!("bilinear_sample coords must be m×2, got {m}x{two}")));
        }
        let f = self.value(field).data();
        let cd = self.value(coords).data();
        let mut out = vec![T::zero(); m * d];
        for i in 0..m {
            let (ys, xs) = (bilinear_axis(cd[2 * i], h), bilinear_axis(cd[2 * i + 1], w));
            let o = &mut out[i * d..(i + 1) * d];
            for (yi, wy) in [(ys.lo, T::one() - ys.frac), (ys.hi, ys.frac)] {
                for (xi, wx) in [(xs.lo, T::one() - xs.frac), (xs.hi, xs.frac)] {
                    let wgt = wy * wx;
                    let s = (yi * w + xi) * d;
                    for (oj, &fj) in o.iter_mut().zip(&f[s..s + d]) {
                        *oj += wgt * fj;
                    }
                }
            }
        }
        let out = Tensor::raw(vec![m, d], out);
        Ok(self.push(out, Op::Bilinear { field, coords }, &[field, coords]))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        // Only leaves and interior nodes that require grad keep their entry.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = out.last_dim();
                if wants(*a) {
                    let ga = tensor::matmul_nt_kernel(g, val(*b), m, n, k);
                    acc(*a, &mut |s| add_into(s, &ga));
                }
                acc(*b, &mut |s| tensor::matmul_tn_acc(val(*a), g, m, k, n, s));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = out.last_dim();
                if wants(*a) {
                    let ga = tensor::matmul_kernel(g, val(*b), m, n, k);
                    acc(*a, &mut |s| add_into(s, &ga));
                }
                acc(*b, &mut |s| tensor::matmul_tn_acc(g, val(*a), m, n, k, s));
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(&self.nodes[x.0].value);
                let gt = transpose_data(g, n, m);
                acc(*x, &mut |s| add_into(s, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (si, &gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((si, &gi), &bi) in s.iter_mut().zip(g).zip(bv) {
                        *si += gi * bi;
                    }
                });
                acc(*b, &mut |s| {
                    for ((si, &gi), &ai) in s.iter_mut().zip(g).zip(av) {
                        *si += gi * ai;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let d = self.nodes[b.0].value.numel();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let d = self.nodes[w.0].value.numel();
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(d).zip(g.chunks(d)) {
                        for ((si, &gi), &wi) in srow.iter_mut().zip(grow).zip(wv) {
                            *si += gi * wi;
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                        for ((si, &gi), &xi) in s.iter_mut().zip(grow).zip(xrow) {
                            *si += gi * xi;
                        }
                    }
                });
            }
            Op::MulCol(x, v) => {
                let d = out.last_dim();
                let (xv, vv) = (val(*x), val(*v));
                acc(*x, &mut |s| {
                    for ((srow, grow), &vi) in s.chunks_mut(d).zip(g.chunks(d)).zip(vv) {
                        for (si, &gi) in srow.iter_mut().zip(grow) {
                            *si += gi * vi;
                        }
                    }
                });
                acc(*v, &mut |s| {
                    for ((si, grow), xrow) in s.iter_mut().zip(g.chunks(d)).zip(xv.chunks(d)) {
                        let mut t = T::zero();
                        for (&gi, &xi) in grow.iter().zip(xrow) {
                            t += gi * xi;
                        }
                        *si += t;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, &mut |s| {
                    for (si, &gi) in s.iter_mut().zip(g) {
                        *si += gi * c;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *si += gi * tensor::gelu_grad(xi);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *si += gi;
                        } else if xi < T::zero() {
                            *si -= gi;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *si += gi * (xi + xi);
                    }
                });
            }
            Op::Cos(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *si -= gi * xi.sin();
                    }
                });
            }
            Op::Sin(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                        *si += gi * xi.cos();
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |s| s.iter_mut().for_each(|si| *si += g0));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.nodes[x.0].value.numel()).expect("count fits");
                let g0 = g[0] / n;
                acc(*x, &mut |s| s.iter_mut().for_each(|si| *si += g0));
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let y = out.data();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let mut dot = T::zero();
                        for (&gi, &yi) in grow.iter().zip(yrow) {
                            dot += gi * yi;
                        }
                        for ((si, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *si += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = out.last_dim();
                let rows = out.rows();
                let (xhat, rstd) = node.saved.split_at(rows * d);
                let gm = val(*gamma);
                let dt = T::from_usize(d).expect("width fits");
                acc(*x, &mut |s| {
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xhat[r * d..(r + 1) * d];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..d {
                            dxh[j] = grow[j] * gm[j];
                            sum_d += dxh[j];
                            sum_dx += dxh[j] * xrow[j];
                        }
                        let k = rstd[r] / dt;
                        for j in 0..d {
                            s[r * d + j] += k * (dt * dxh[j] - sum_d - xrow[j] * sum_dx);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((si, &gi), &xi) in s.iter_mut().zip(grow).zip(xrow) {
                            *si += gi * xi;
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::SliceCols { x, start } => {
                let n = self.nodes[x.0].value.last_dim();
                let len = out.last_dim();
                let start = *start;
                acc(*x, &mut |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut s[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    acc(p, &mut |s| {
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            add_into(srow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                let n = out.last_dim();
                acc(*x, &mut |s| {
                    for (j, &i) in index.iter().enumerate() {
                        add_into(&mut s[i * n..(i + 1) * n], &g[j * n..(j + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { base, rows, index } => {
                let n = out.last_dim();
                acc(*base, &mut |s| {
                    add_into(s, g);
                    for &i in index {
                        for j in 0..n {
                            s[i * n + j] -= g[i * n + j];
                        }
                    }
                });
                acc(*rows, &mut |s| {
                    for (j, &i) in index.iter().enumerate() {
                        add_into(&mut s[j * n..(j + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Patchify { x, patch } => {
                let (h, w, c) = dims3(&self.nodes[x.0].value);
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let width = p * p * c;
                acc(*x, &mut |s| {
                    for ty in 0..gh {
                        for tx in 0..gw {
                            let base = (ty * gw + tx) * width;
                            for py in 0..p {
                                let d = ((ty * p + py) * w + tx * p) * c;
                                let o = base + py * p * c;
                                add_into(&mut s[d..d + p * c], &g[o..o + p * c]);
                            }
                        }
                    }
                });
            }
            Op::Unpatchify { x, patch } => {
                let (h, w, c) = dims3(out);
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let width = p * p * c;
                acc(*x, &mut |s| {
                    for ty in 0..gh {
                        for tx in 0..gw {
                            let base = (ty * gw + tx) * width;
                            for py in 0..p {
                                let d = ((ty * p + py) * w + tx * p) * c;
                                let o = base + py * p * c;
                                add_into(&mut s[o..o + p * c], &g[d..d + p * c]);
                            }
                        }
                    }
                });
            }
            Op::Unfold3x3 { x, grid } => {
                let (gh, gw) = *grid;
                let d = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |s| {
                    for r in 0..gh {
                        for c in 0..gw {
                            let o = (r * gw + c) * 9 * d;
                            for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                                let (rr, cc) = (r as isize + dy, c as isize + dx);
                                if rr < 0 || cc < 0 || rr >= gh as isize || cc >= gw as isize {
                                    continue;
                                }
                                let t = (rr as usize * gw + cc as usize) * d;
                                add_into(&mut s[t..t + d], &g[o + k * d..o + (k + 1) * d]);
                            }
                        }
                    }
                });
            }
            Op::Bilinear { field, coords } => {
                let (h, w, d) = dims3(&self.nodes[field.0].value);
                let f = val(*field);
                let cd = val(*coords);
                let m = cd.len() / 2;
                acc(*field, &mut |s| {
                    for i in 0..m {
                        let (ys, xs) = (bilinear_axis(cd[2 * i], h), bilinear_axis(cd[2 * i + 1], w));
                        let grow = &g[i * d..(i + 1) * d];
                        for (yi, wy) in [(ys.lo, T::one() - ys.frac), (ys.hi, ys.frac)] {
                            for (xi, wx) in [(xs.lo, T::one() - xs.frac), (xs.hi, xs.frac)] {
                                let wgt = wy * wx;
                                let t = (yi * w + xi) * d;
                                for (sj, &gj) in s[t..t + d].iter_mut().zip(grow) {
                                    *sj += wgt * gj;
                                }
                            }
                        }
                    }
                });
                acc(*coords, &mut |s| {
                    for i in 0..m {
                        let (ys, xs) = (bilinear_axis(cd[2 * i], h), bilinear_axis(cd[2 * i + 1], w));
                        let grow = &g[i * d..(i + 1) * d];
                        let at = |yi: usize, xi: usize| &f[(yi * w + xi) * d..(yi * w + xi + 1) * d];
                        let (f00, f01, f10, f11) = (at(ys.lo, xs.lo), at(ys.lo, xs.hi), at(ys.hi, xs.lo), at(ys.hi, xs.hi));
                        let mut dy = T::zero();
                        let mut dx = T::zero();
                        for j in 0..d {
                            let ddy = (T::one() - xs.frac) * (f10[j] - f00[j]) + xs.frac * (f11[j] - f01[j]);
                            let ddx = (T::one() - ys.frac) * (f01[j] - f00[j]) + ys.frac * (f11[j] - f10[j]);
                            dy += grow[j] * ddy;
                            dx += grow[j] * ddx;
                        }
                        if ys.live {
                            s[2 * i] += dy;
                        }
                        if xs.live {
                            s[2 * i + 1] += dx;
                        }
                    }
                });
            }
        }
    }
}

const NEIGHBOURS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

struct AxisSample<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// False when the coordinate was clamped (or the axis is degenerate).
    live: bool,
}

fn bilinear_axis<T: Real>(coord: T, extent: usize) -> AxisSample<T> {
    if extent == 1 {
        return AxisSample { lo: 0, hi: 0, frac: T::zero(), live: false };
    }
    let max = T::from_usize(extent - 1).expect("extent fits");
    let live = coord >= T::zero() && coord <= max;
    let c = coord.max(T::zero()).min(max);
    let lo = c.floor().to_usize().unwrap_or(0).min(extent - 2);
    let frac = c - T::from_usize(lo).expect("index fits");
    AxisSample { lo, hi: lo + 1, frac, live }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_data<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn dims2<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn dims3<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2])
}
