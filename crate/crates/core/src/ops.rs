//! Composite differentiable operations built from graph primitives.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Fixed epsilon for every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Non-overlapping `P×P` patch embedding.
///
/// `field` is `H×W×C`, `kernel` is `P×P×C×d` and `bias` is `d`. Tokens come
/// out row-major over the `(H/P)×(W/P)` patch grid.
pub fn conv2d_patchify<T: Real>(g: &mut Graph<T>, field: Var, kernel: Var, bias: Var, patch: usize) -> Result<Var> {
    let c = match g.shape(field) {
        [_, _, c] => *c,
        s => return Err(Error::geometry(format!("patch embedding expects H×W×C, got {s:?}"))),
    };
    let ks = g.shape(kernel).to_vec();
    if ks.len() != 4 || ks[0] != patch || ks[1] != patch || ks[2] != c {
        return Err(Error::dim(format!("patch kernel {ks:?} does not match patch {patch} and {c} channels")));
    }
    let d = ks[3];
    let cols = g.patchify(field, patch)?;
    let w = g.reshape(kernel, &[patch * patch * c, d])?;
    let tokens = g.matmul(cols, w)?;
    g.add_row(tokens, bias)
}

/// Transposed patch embedding: `tokens[N×d] · kernel[d×P·P·C] + bias`, laid
/// back out as an `H×W×C` field over a `grid.0 × grid.1` token grid.
pub fn deconv2d_unpatchify<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    kernel: Var,
    bias: Var,
    grid: (usize, usize),
    patch: usize,
    channels: usize,
) -> Result<Var> {
    let n = g.shape(tokens)[0];
    if n != grid.0 * grid.1 {
        return Err(Error::geometry(format!("{n} tokens cannot fill a {}x{} patch grid", grid.0, grid.1)));
    }
    let cols = g.matmul(tokens, kernel)?;
    let cols = g.add_row(cols, bias)?;
    g.unpatchify(cols, grid, patch, channels)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    g.layer_norm(x, gamma, beta, T::lit(LAYER_NORM_EPS))
}
