use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SeededRng;

/// What the final layer of a localization head emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadOutput {
    /// Two unconstrained offsets `(d_u, d_v)`.
    Offsets,
    /// Two independent softmax branches over `2k + 1` offset classes.
    Classes { side: usize },
}

impl HeadOutput {
    pub fn width(self) -> usize {
        match self {
            HeadOutput::Offsets => 2,
            HeadOutput::Classes { side } => 2 * (2 * side + 1),
        }
    }
}

/// Three-layer MLP `2d -> hidden -> hidden -> o`, ReLU after the first two.
#[derive(Clone, Debug)]
pub struct LocalizationHead {
    pub embed_dim: usize,
    pub hidden: usize,
    pub output: HeadOutput,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

/// Output of a head on a batch of pairs.
#[derive(Clone, Copy, Debug)]
pub enum Prediction {
    /// `[n, m, 2]`
    Offsets(Var),
    /// Each `[n, m, 2k + 1]`, rows summing to one.
    Distributions { u: Var, v: Var },
}

/// Affine weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn affine(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_range(-bound, bound));
    let b = Tensor::from_fn(&[fan_out], |_| rng.uniform_range(-bound, bound));
    (
        params.add(format!("{prefix}.weight"), w, true),
        params.add(format!("{prefix}.bias"), b, true),
    )
}

/// `x @ w + b` on the last axis.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

impl LocalizationHead {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        embed_dim: usize,
        hidden: usize,
        output: HeadOutput,
        rng: &mut SeededRng,
    ) -> Self {
        let (w1, b1) = affine(params, &format!("{prefix}.fc1"), 2 * embed_dim, hidden, rng);
        let (w2, b2) = affine(params, &format!("{prefix}.fc2"), hidden, hidden, rng);
        let (w3, b3) = affine(params, &format!("{prefix}.fc3"), hidden, output.width(), rng);
        LocalizationHead {
            embed_dim,
            hidden,
            output,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    /// Predicts from the concatenation `(e_a, e_b)`, first endpoint first.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, e_a: Var, e_b: Var) -> Result<Prediction> {
        let width = |t: &Tape, v: Var| t.shape(v).last().copied().unwrap_or(0);
        if width(tape, e_a) != self.embed_dim || width(tape, e_b) != self.embed_dim {
            return Err(Error::Config(format!(
                "localization head expects two {}-wide embeddings, got {:?} and {:?}",
                self.embed_dim,
                tape.shape(e_a),
                tape.shape(e_b)
            )));
        }
        let x = tape.concat_lastdim(&[e_a, e_b])?;
        let h = linear(tape, x, bound.get(self.w1), bound.get(self.b1))?;
        let h = tape.relu(h);
        let h = linear(tape, h, bound.get(self.w2), bound.get(self.b2))?;
        let h = tape.relu(h);
        let out = linear(tape, h, bound.get(self.w3), bound.get(self.b3))?;
        match self.output {
            HeadOutput::Offsets => Ok(Prediction::Offsets(out)),
            HeadOutput::Classes { side } => {
                let c = 2 * side + 1;
                let axis = tape.shape(out).len() - 1;
                let u = tape.slice(out, axis, 0, c)?;
                let v = tape.slice(out, axis, c, c)?;
                Ok(Prediction::Distributions {
                    u: tape.softmax_lastdim(u)?,
                    v: tape.softmax_lastdim(v)?,
                })
            }
        }
    }
}

/// One head, or one head per transformer block for the per-block variant.
#[derive(Clone, Debug)]
pub struct HeadSet {
    pub params: ParamSet,
    pub heads: Vec<LocalizationHead>,
}

impl HeadSet {
    pub fn new(count: usize, embed_dim: usize, hidden: usize, output: HeadOutput, rng: &mut SeededRng) -> Self {
        let mut params = ParamSet::new();
        let heads = (0..count)
            .map(|l| LocalizationHead::new(&mut params, &format!("drloc.{l}"), embed_dim, hidden, output, rng))
            .collect();
        HeadSet { params, heads }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_head(output: HeadOutput, d: usize) -> (ParamSet, LocalizationHead) {
        let mut params = ParamSet::new();
        let head = LocalizationHead::new(&mut params, "h", d, 8, output, &mut SeededRng::new(0));
        for p in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        (params, head)
    }

    fn embeddings(tape: &mut Tape, seed: u64, n: usize, m: usize, d: usize) -> Var {
        let mut rng = SeededRng::new(seed);
        tape.constant(Tensor::from_fn(&[n, m, d], |_| rng.normal()))
    }

    #[test]
    fn zero_weights_predict_zero_offsets() {
        let (params, head) = zero_head(HeadOutput::Offsets, 4);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = embeddings(&mut tape, 1, 2, 3, 4);
        let b = embeddings(&mut tape, 2, 2, 3, 4);
        let Prediction::Offsets(p) = head.forward(&mut tape, &bound, a, b).unwrap() else {
            panic!("expected offsets")
        };
        assert_eq!(tape.shape(p), &[2, 3, 2]);
        assert!(tape.data(p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_uniform_class_posteriors() {
        let (params, head) = zero_head(HeadOutput::Classes { side: 7 }, 4);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = embeddings(&mut tape, 1, 1, 2, 4);
        let b = embeddings(&mut tape, 2, 1, 2, 4);
        let Prediction::Distributions { u, v } = head.forward(&mut tape, &bound, a, b).unwrap() else {
            panic!("expected distributions")
        };
        for var in [u, v] {
            assert_eq!(tape.shape(var), &[1, 2, 15]);
            assert!(tape.data(var).iter().all(|&p| (p - 1.0 / 15.0).abs() < 1e-15));
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (params, head) = zero_head(HeadOutput::Offsets, 4);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = embeddings(&mut tape, 1, 1, 2, 3);
        let b = embeddings(&mut tape, 2, 1, 2, 3);
        assert!(matches!(head.forward(&mut tape, &bound, a, b), Err(Error::Config(_))));
    }

    #[test]
    fn concatenation_order_matters() {
        let mut params = ParamSet::new();
        let head = LocalizationHead::new(&mut params, "h", 4, 16, HeadOutput::Offsets, &mut SeededRng::new(5));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = embeddings(&mut tape, 1, 1, 4, 4);
        let b = embeddings(&mut tape, 2, 1, 4, 4);
        let Prediction::Offsets(ab) = head.forward(&mut tape, &bound, a, b).unwrap() else {
            panic!()
        };
        let Prediction::Offsets(ba) = head.forward(&mut tape, &bound, b, a).unwrap() else {
            panic!()
        };
        assert_ne!(tape.data(ab), tape.data(ba));
    }
}
