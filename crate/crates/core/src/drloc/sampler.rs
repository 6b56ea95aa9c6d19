use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numcore::{Tape, Tensor, Var};
use crate::rng::SeededRng;

/// Sampled position pairs for `batch` images, `pairs` per image, on a
/// `side x side` grid. Per-pair vectors are stored image-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub batch: usize,
    pub pairs: usize,
    pub side: usize,
    pub pos_a: Vec<[usize; 2]>,
    pub pos_b: Vec<[usize; 2]>,
    /// `[n, m, 2]` of `|a - b| / k`.
    pub offsets_abs: Tensor,
    /// `[n, m, 2]` of `(a - b) / k`.
    pub offsets_signed: Tensor,
    /// `a - b` per axis, in `-(k-1)..=(k-1)`.
    pub classes: Vec<[i64; 2]>,
}

impl PairBatch {
    /// Builds targets for explicit positions.
    pub fn from_positions(
        side: usize,
        batch: usize,
        pairs: usize,
        pos_a: Vec<[usize; 2]>,
        pos_b: Vec<[usize; 2]>,
    ) -> Result<Self> {
        if side < 2 || batch == 0 || pairs == 0 {
            return Err(Error::Config(format!(
                "pair batch needs k >= 2, n >= 1, m >= 1 (got k={side}, n={batch}, m={pairs})"
            )));
        }
        let count = batch * pairs;
        if pos_a.len() != count || pos_b.len() != count {
            return Err(Error::Config(format!(
                "pair batch expects {count} positions per side, got {} and {}",
                pos_a.len(),
                pos_b.len()
            )));
        }
        if let Some(p) = pos_a.iter().chain(&pos_b).find(|p| p[0] >= side || p[1] >= side) {
            return Err(Error::Config(format!("position {p:?} outside a {side}x{side} grid")));
        }
        let k = side as f64;
        let mut abs = Vec::with_capacity(count * 2);
        let mut signed = Vec::with_capacity(count * 2);
        let mut classes = Vec::with_capacity(count);
        for (a, b) in pos_a.iter().zip(&pos_b) {
            let du = a[0] as i64 - b[0] as i64;
            let dv = a[1] as i64 - b[1] as i64;
            abs.push(du.abs() as f64 / k);
            abs.push(dv.abs() as f64 / k);
            signed.push(du as f64 / k);
            signed.push(dv as f64 / k);
            classes.push([du, dv]);
        }
        let shape = vec![batch, pairs, 2];
        Ok(PairBatch {
            batch,
            pairs,
            side,
            pos_a,
            pos_b,
            offsets_abs: Tensor::new(shape.clone(), abs)?,
            offsets_signed: Tensor::new(shape, signed)?,
            classes,
        })
    }

    /// The pairs belonging to images `start..start + count`.
    pub fn slice_images(&self, start: usize, count: usize) -> Result<PairBatch> {
        if count == 0 || start + count > self.batch {
            return Err(Error::Config(format!(
                "slice_images: {start}..{} outside batch of {}",
                start + count,
                self.batch
            )));
        }
        let r = start * self.pairs..(start + count) * self.pairs;
        PairBatch::from_positions(
            self.side,
            count,
            self.pairs,
            self.pos_a[r.clone()].to_vec(),
            self.pos_b[r].to_vec(),
        )
    }

    /// Same pairs with the two endpoints exchanged.
    pub fn swapped(&self) -> PairBatch {
        PairBatch::from_positions(
            self.side,
            self.batch,
            self.pairs,
            self.pos_b.clone(),
            self.pos_a.clone(),
        )
        .expect("swapping keeps a valid batch valid")
    }
}

/// Draws `m` position pairs per image, every coordinate independently
/// uniform over `0..k`. All first endpoints are drawn (image-major, row then
/// column) before all second endpoints. Identical pairs are allowed.
pub fn sample_pairs(k: usize, m: usize, n: usize, rng: &mut SeededRng) -> Result<PairBatch> {
    if k < 2 || m == 0 || n == 0 {
        return Err(Error::Config(format!(
            "sample_pairs needs k >= 2, m >= 1, n >= 1 (got k={k}, m={m}, n={n})"
        )));
    }
    let draw = |rng: &mut SeededRng| -> Vec<[usize; 2]> {
        (0..n * m)
            .map(|_| {
                let r = rng.below(k as u64) as usize;
                let c = rng.below(k as u64) as usize;
                [r, c]
            })
            .collect()
    };
    let pos_a = draw(rng);
    let pos_b = draw(rng);
    PairBatch::from_positions(k, n, m, pos_a, pos_b)
}

/// The grid as a `[n * k * k, d]` row matrix, row `b * k * k + i * k + j`
/// holding cell `(i, j)` of image `b`.
pub fn grid_rows(tape: &mut Tape, grid: &TokenGrid) -> Result<Var> {
    let cells = grid.side * grid.side;
    let flat = tape.reshape(grid.values, &[grid.batch, grid.dim, cells])?;
    let tokens = tape.transpose(flat, 1, 2)?;
    tape.reshape(tokens, &[grid.batch * cells, grid.dim])
}

/// Gathers `[n, m, d]` embeddings at `positions` from rows built by
/// [`grid_rows`].
pub fn gather_positions(
    tape: &mut Tape,
    rows: Var,
    grid: &TokenGrid,
    pairs: usize,
    positions: &[[usize; 2]],
) -> Result<Var> {
    let k = grid.side;
    if positions.len() != grid.batch * pairs {
        return Err(Error::Config(format!(
            "collect_embeddings: {} positions for {} images x {pairs} pairs",
            positions.len(),
            grid.batch
        )));
    }
    let indices: Vec<usize> = positions
        .iter()
        .enumerate()
        .map(|(q, p)| {
            debug_assert!(p[0] < k && p[1] < k, "sampler produced out-of-grid position");
            (q / pairs) * k * k + p[0] * k + p[1]
        })
        .collect();
    let picked = tape.gather_rows(rows, &indices)?;
    tape.reshape(picked, &[grid.batch, pairs, grid.dim])
}

/// `out[b, q, :] = grid[b, :, i, j]` for `positions[b * m + q] = (i, j)`.
pub fn collect_embeddings(tape: &mut Tape, grid: &TokenGrid, pairs: usize, positions: &[[usize; 2]]) -> Result<Var> {
    let rows = grid_rows(tape, grid)?;
    gather_positions(tape, rows, grid, pairs, positions)
}
