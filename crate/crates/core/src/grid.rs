//! Token sequences viewed as square spatial grids.
//!
//! Grid values are laid out `[n, d, k, k]`; cell `(i, j)` of a grid
//! corresponds to sequence position `i * k + j`. Indices are 0-based.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

/// A `k x k` grid of `d`-dimensional embeddings for `n` images, living on a
/// tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub values: Var,
    pub batch: usize,
    pub side: usize,
    pub dim: usize,
}

/// One grid per transformer block, in block order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockGridSet(pub Vec<TokenGrid>);

impl BlockGridSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<&TokenGrid> {
        self.0.last()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TokenGrid> {
        self.0.iter()
    }
}

/// Exact integer square root, if `n` is a perfect square.
pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// `[n, k*k, d]` tokens to a `[n, d, k, k]` grid.
pub fn sequence_to_grid(tape: &mut Tape, tokens: Var) -> Result<TokenGrid> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::Config(format!(
            "sequence_to_grid: expected [n, tokens, d], got {shape:?}"
        )));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let k = exact_sqrt(t)
        .ok_or_else(|| Error::Config(format!("sequence_to_grid: token count {t} is not a perfect square")))?;
    if k < 2 {
        return Err(Error::Config("sequence_to_grid: grid side must be at least 2".into()));
    }
    let channels_first = tape.transpose(tokens, 1, 2)?;
    let values = tape.reshape(channels_first, &[n, d, k, k])?;
    Ok(TokenGrid {
        values,
        batch: n,
        side: k,
        dim: d,
    })
}

/// Inverse of [`sequence_to_grid`].
pub fn grid_to_sequence(tape: &mut Tape, grid: &TokenGrid) -> Result<Var> {
    let flat = tape.reshape(grid.values, &[grid.batch, grid.dim, grid.side * grid.side])?;
    tape.transpose(flat, 1, 2)
}

/// Parameter-free average pooling down to `target_side`.
///
/// Only the 2:1 ratio (and the identity) are supported.
pub fn pool_to_target(tape: &mut Tape, grid: &TokenGrid, target_side: usize) -> Result<TokenGrid> {
    if grid.side == target_side {
        return Ok(*grid);
    }
    if grid.side != 2 * target_side || target_side < 2 {
        return Err(Error::Config(format!(
            "pool_to_target: cannot pool a {0}x{0} grid to {1}x{1}; only 2:1 is supported",
            grid.side, target_side
        )));
    }
    let values = tape.avgpool2x2(grid.values)?;
    Ok(TokenGrid {
        values,
        side: target_side,
        ..*grid
    })
}
