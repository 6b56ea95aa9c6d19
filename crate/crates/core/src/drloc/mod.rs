//! Dense relative localization: pair sampling, the localization head and
//! the loss variants built on them.

pub mod head;
pub mod loss;
pub mod sampler;

use serde::{Deserialize, Serialize};

pub use head::{HeadOutput, HeadSet, LocalizationHead, Prediction};
pub use loss::{loss_ce, loss_drloc, loss_reg, loss_signed, total_loss, total_loss_value};
pub use sampler::{collect_embeddings, sample_pairs, PairBatch};

use crate::error::{Error, Result};
use crate::grid::{BlockGridSet, TokenGrid};
use crate::numcore::{Bound, Tape, Var};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// L1 on absolute offsets.
    Drloc,
    /// L1 on signed offsets.
    Signed,
    /// Cross-entropy over offset classes.
    Ce,
    /// Expected-offset regression with a Gaussian prior.
    Reg,
    /// `Drloc` summed over every block, one head per block.
    All,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Drloc, Variant::Signed, Variant::Ce, Variant::Reg, Variant::All];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Drloc => "drloc",
            Variant::Signed => "signed",
            Variant::Ce => "ce",
            Variant::Reg => "reg",
            Variant::All => "all",
        }
    }

    pub fn head_output(self, side: usize) -> HeadOutput {
        match self {
            Variant::Ce | Variant::Reg => HeadOutput::Classes { side },
            _ => HeadOutput::Offsets,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant {s:?}")))
    }
}

/// Which auxiliary loss to use and its knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossVariantSpec {
    pub variant: Variant,
    /// Pairs sampled per image.
    pub m: usize,
    /// Weight of the auxiliary loss in the total.
    pub lambda: f64,
    /// Gaussian-prior weight (`reg` only).
    pub alpha: f64,
    /// Lower bound on the class-posterior variance (`reg` only).
    pub sigma_floor: f64,
    /// Hidden width of the localization MLP.
    pub hidden: usize,
    /// When false the auxiliary head and its sampling are left out entirely.
    pub enabled: bool,
}

impl Default for LossVariantSpec {
    fn default() -> Self {
        LossVariantSpec {
            variant: Variant::Drloc,
            m: 64,
            lambda: 0.1,
            alpha: 0.001,
            sigma_floor: 1e-6,
            hidden: 512,
            enabled: true,
        }
    }
}

impl LossVariantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m < 1 {
            return bad(format!("m must be >= 1, got {}", self.m));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return bad(format!("sigma_floor must be > 0, got {}", self.sigma_floor));
        }
        if self.hidden < 1 {
            return bad("hidden width must be >= 1".into());
        }
        Ok(())
    }
}

/// Auxiliary loss on one block's grid with that block's head.
#[allow(clippy::too_many_arguments)]
pub fn block_loss(
    tape: &mut Tape,
    bound: &Bound,
    head: &LocalizationHead,
    grid: &TokenGrid,
    pairs: &PairBatch,
    variant: Variant,
    spec: &LossVariantSpec,
) -> Result<(Var, Prediction)> {
    if pairs.side != grid.side || pairs.batch != grid.batch {
        return Err(Error::Config(format!(
            "pairs for {} images on a {}x{} grid applied to {} images on a {}x{} grid",
            pairs.batch, pairs.side, pairs.side, grid.batch, grid.side, grid.side
        )));
    }
    let rows = sampler::grid_rows(tape, grid)?;
    let e_a = sampler::gather_positions(tape, rows, grid, pairs.pairs, &pairs.pos_a)?;
    let e_b = sampler::gather_positions(tape, rows, grid, pairs.pairs, &pairs.pos_b)?;
    let pred = head.forward(tape, bound, e_a, e_b)?;
    let l = match (variant, pred) {
        (Variant::Drloc | Variant::All, Prediction::Offsets(p)) => loss_drloc(tape, p, &pairs.offsets_abs)?,
        (Variant::Signed, Prediction::Offsets(p)) => loss_signed(tape, p, &pairs.offsets_signed)?,
        (Variant::Ce, Prediction::Distributions { u, v }) => loss_ce(tape, u, v, &pairs.classes, pairs.side)?,
        (Variant::Reg, Prediction::Distributions { u, v }) => {
            loss_reg(tape, u, v, &pairs.classes, pairs.side, spec.alpha, spec.sigma_floor)?
        }
        (v, _) => {
            return Err(Error::Config(format!(
                "head output does not fit loss variant {}",
                v.name()
            )))
        }
    };
    Ok((l, pred))
}

/// Per-block loss summed over blocks, each block with its own head and its
/// own freshly sampled pairs (drawn in block order from `rng`).
pub fn loss_all(
    tape: &mut Tape,
    grids: &BlockGridSet,
    heads: &HeadSet,
    bound: &Bound,
    spec: &LossVariantSpec,
    rng: &mut SeededRng,
) -> Result<Var> {
    if heads.len() != grids.len() || grids.is_empty() {
        return Err(Error::Config(format!(
            "loss_all needs one head per block: {} heads for {} grids",
            heads.len(),
            grids.len()
        )));
    }
    let pairs: Vec<PairBatch> = grids
        .iter()
        .map(|g| sample_pairs(g.side, spec.m, g.batch, rng))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    for ((grid, head), p) in grids.iter().zip(&heads.heads).zip(&pairs) {
        let (l, _) = block_loss(tape, bound, head, grid, p, Variant::All, spec)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("at least one block"))
}

/// The auxiliary task attached to a backbone: spec plus head parameters.
#[derive(Clone, Debug)]
pub struct PretextTask {
    pub spec: LossVariantSpec,
    pub heads: HeadSet,
}

/// Result of the auxiliary forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AuxOutput {
    pub loss: Var,
    /// Prediction on the final block's pairs.
    pub final_prediction: Prediction,
}

impl PretextTask {
    /// Builds heads for `blocks` backbone blocks whose pretext grids have
    /// side `grid_side`.
    pub fn new(
        spec: LossVariantSpec,
        embed_dim: usize,
        grid_side: usize,
        blocks: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        let count = if spec.variant == Variant::All { blocks } else { 1 };
        let heads = HeadSet::new(count, embed_dim, spec.hidden, spec.variant.head_output(grid_side), rng);
        Ok(PretextTask { spec, heads })
    }

    /// The grids the task consumes: all of them for `All`, else the last.
    pub fn task_grids<'a>(&self, grids: &'a BlockGridSet) -> &'a [TokenGrid] {
        if self.spec.variant == Variant::All {
            &grids.0
        } else {
            &grids.0[grids.len().saturating_sub(1)..]
        }
    }

    /// Samples one pair batch per consumed grid, in block order.
    pub fn sample(&self, sides: &[usize], batch: usize, rng: &mut SeededRng) -> Result<Vec<PairBatch>> {
        sides
            .iter()
            .map(|&k| sample_pairs(k, self.spec.m, batch, rng))
            .collect()
    }

    /// Grid sides the task consumes for a backbone with these block sides.
    pub fn task_sides(&self, block_sides: &[usize]) -> Vec<usize> {
        if self.spec.variant == Variant::All {
            block_sides.to_vec()
        } else {
            block_sides.last().copied().into_iter().collect()
        }
    }

    pub fn loss(&self, tape: &mut Tape, bound: &Bound, grids: &BlockGridSet, pairs: &[PairBatch]) -> Result<AuxOutput> {
        let used = self.task_grids(grids);
        if used.len() != pairs.len() || used.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "pretext task: {} grids, {} pair batches, {} heads",
                used.len(),
                pairs.len(),
                self.heads.len()
            )));
        }
        let mut total: Option<Var> = None;
        let mut last_pred = None;
        for ((grid, head), p) in used.iter().zip(&self.heads.heads).zip(pairs) {
            let (l, pred) = block_loss(tape, bound, head, grid, p, self.spec.variant, &self.spec)?;
            last_pred = Some(pred);
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(AuxOutput {
            loss: total.expect("at least one grid"),
            final_prediction: last_pred.expect("at least one grid"),
        })
    }
}

/// Summed absolute localization error and element count for a prediction.
///
/// Offset heads are scored against the targets they were trained on
/// (absolute or signed). Class heads are scored by the posterior mean
/// divided by `k` against the signed offsets.
pub fn pretext_l1_sum(tape: &Tape, pred: Prediction, pairs: &PairBatch, variant: Variant) -> (f64, usize) {
    match pred {
        Prediction::Offsets(p) => {
            let targets = if variant == Variant::Signed {
                &pairs.offsets_signed
            } else {
                &pairs.offsets_abs
            };
            let s = tape
                .data(p)
                .iter()
                .zip(targets.data())
                .map(|(d, t)| (t - d).abs())
                .sum();
            (s, targets.len())
        }
        Prediction::Distributions { u, v } => {
            let k = pairs.side;
            let c = 2 * k + 1;
            let mut s = 0.0;
            for (axis, var) in [u, v].into_iter().enumerate() {
                for (row, t) in tape.data(var).chunks(c).zip(pairs.offsets_signed.data().chunks(2)) {
                    let mu: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(slot, p)| p * (slot as f64 - k as f64))
                        .sum();
                    s += (t[axis] - mu / k as f64).abs();
                }
            }
            (s, pairs.batch * pairs.pairs * 2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::sequence_to_grid;
    use crate::numcore::Tensor;

    #[test]
    fn spec_validation() {
        assert!(LossVariantSpec::default().validate().is_ok());
        let bad = [
            LossVariantSpec {
                m: 0,
                ..Default::default()
            },
            LossVariantSpec {
                lambda: -0.1,
                ..Default::default()
            },
            LossVariantSpec {
                alpha: -1.0,
                ..Default::default()
            },
            LossVariantSpec {
                sigma_floor: 0.0,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn variant_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("l2".parse::<Variant>().is_err());
    }

    #[test]
    fn loss_all_needs_matching_heads() {
        let spec = LossVariantSpec {
            hidden: 4,
            m: 2,
            ..Default::default()
        };
        let heads = HeadSet::new(1, 2, 4, HeadOutput::Offsets, &mut SeededRng::new(0));
        let mut tape = Tape::new();
        let bound = heads.params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 4, 2]));
        let g = sequence_to_grid(&mut tape, x).unwrap();
        let grids = BlockGridSet(vec![g, g]);
        let err = loss_all(&mut tape, &grids, &heads, &bound, &spec, &mut SeededRng::new(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
