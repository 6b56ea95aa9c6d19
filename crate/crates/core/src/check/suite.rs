//! Self-checks shared by the `check` command and the test suites.

use std::fmt;

use super::gradcheck::{check_indices, GradCheckReport};
use super::oracle;
use crate::drloc::{
    collect_embeddings, loss_all, sample_pairs, HeadSet, LossVariantSpec, PairBatch, Prediction, PretextTask, Variant,
};
use crate::error::Result;
use crate::grid::{grid_to_sequence, pool_to_target, sequence_to_grid, BlockGridSet, TokenGrid};
use crate::numcore::{Tape, Tensor, Var};
use crate::rng::SeededRng;
use crate::vit::{classification_loss, VitConfig, VitModel};

pub const FD_STEP: f64 = 1e-5;
/// Tolerance for the per-primitive checks.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for loss-level and whole-model checks.
pub const MODEL_TOL: f64 = 1e-3;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_report(report: &GradCheckReport, tol: f64) -> Self {
        CheckResult::new(report.name.clone(), report.passes(tol), report.to_string())
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Values in `±[0.1, 1.0]`, away from the kinks of relu and abs.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.bernoulli_half() {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(0.2, 2.0))
}

/// Checks `d/dx sum(w * op(x...))` for random fixed weights `w` against
/// central differences over every input element.
pub fn check_op<F>(name: &str, inputs: &[Tensor], seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = SeededRng::new(seed);
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Tensor::from_fn(tape.shape(out), |_| rng.uniform_range(-1.0, 1.0))
    };
    let weights = if weights.shape().is_empty() {
        Tensor::scalar(weights.item())
    } else {
        weights
    };
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let root = objective(&mut tape, &vars)?;
    tape.backward(root)?;

    let mut report = GradCheckReport::new(name);
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[which])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let indices: Vec<usize> = (0..input.len()).collect();
        let part = check_indices(format!("{name}[{which}]"), &analytic, &indices, FD_STEP, |i, delta| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let mut x = x.clone();
                    if j == which {
                        x.data_mut()[i] += delta;
                    }
                    t.constant(x)
                })
                .collect();
            let r = objective(&mut t, &vs).expect("objective evaluated once already");
            t.item(r)
        });
        report.merge(part);
    }
    report.name = name.to_string();
    Ok(report)
}

/// Finite-difference checks for every primitive of the tape.
pub fn primitive_gradients(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut r = SeededRng::new(seed);
    let a23 = away_from_zero(&mut r, &[2, 3]);
    let b23 = away_from_zero(&mut r, &[2, 3]);
    let m34 = away_from_zero(&mut r, &[3, 4]);
    let x234 = away_from_zero(&mut r, &[2, 3, 4]);
    let y243 = away_from_zero(&mut r, &[2, 4, 3]);
    let pos23 = positive(&mut r, &[2, 3]);
    let v4 = away_from_zero(&mut r, &[4]);
    let g4 = away_from_zero(&mut r, &[4]);
    let grid = away_from_zero(&mut r, &[1, 2, 4, 4]);
    let rows = away_from_zero(&mut r, &[4, 3]);

    let mut out = Vec::new();
    let s = seed.wrapping_add(1);
    out.push(check_op(
        "matmul_shared",
        &[x234.clone(), m34.reshaped(&[4, 3])?],
        s,
        |t, v| t.matmul(v[0], v[1]),
    )?);
    out.push(check_op("matmul_batched", &[x234.clone(), y243.clone()], s, |t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(check_op("add", &[a23.clone(), b23.clone()], s, |t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(check_op("sub", &[a23.clone(), b23.clone()], s, |t, v| {
        t.sub(v[0], v[1])
    })?);
    out.push(check_op("mul", &[a23.clone(), b23.clone()], s, |t, v| {
        t.mul(v[0], v[1])
    })?);
    out.push(check_op("div", &[a23.clone(), pos23.clone()], s, |t, v| {
        t.div(v[0], v[1])
    })?);
    out.push(check_op("scale", std::slice::from_ref(&a23), s, |t, v| {
        Ok(t.scale(v[0], -1.7))
    })?);
    out.push(check_op("add_bias", &[x234.clone(), v4.clone()], s, |t, v| {
        t.add_bias(v[0], v[1])
    })?);
    out.push(check_op("relu", std::slice::from_ref(&x234), s, |t, v| {
        Ok(t.relu(v[0]))
    })?);
    out.push(check_op("abs", std::slice::from_ref(&x234), s, |t, v| Ok(t.abs(v[0])))?);
    out.push(check_op(
        "log",
        std::slice::from_ref(&pos23),
        s,
        |t, v| Ok(t.log(v[0])),
    )?);
    out.push(check_op("clamp_min", std::slice::from_ref(&x234), s, |t, v| {
        Ok(t.clamp_min(v[0], 0.05))
    })?);
    out.push(check_op("softmax_lastdim", std::slice::from_ref(&x234), s, |t, v| {
        t.softmax_lastdim(v[0])
    })?);
    out.push(check_op(
        "log_softmax_lastdim",
        std::slice::from_ref(&x234),
        s,
        |t, v| t.log_softmax_lastdim(v[0]),
    )?);
    out.push(check_op(
        "layernorm_lastdim",
        &[x234.clone(), g4.clone(), v4.clone()],
        s,
        |t, v| t.layernorm_lastdim(v[0], v[1], v[2]),
    )?);
    out.push(check_op("sum", std::slice::from_ref(&x234), s, |t, v| Ok(t.sum(v[0])))?);
    out.push(check_op("mean", std::slice::from_ref(&x234), s, |t, v| {
        Ok(t.mean(v[0]))
    })?);
    out.push(check_op("mean_axis", std::slice::from_ref(&x234), s, |t, v| {
        t.mean_axis(v[0], 1)
    })?);
    out.push(check_op("concat_lastdim", &[a23.clone(), b23.clone()], s, |t, v| {
        t.concat_lastdim(&[v[0], v[1]])
    })?);
    out.push(check_op("slice", std::slice::from_ref(&x234), s, |t, v| {
        t.slice(v[0], 1, 1, 2)
    })?);
    out.push(check_op("reshape", std::slice::from_ref(&x234), s, |t, v| {
        t.reshape(v[0], &[4, 6])
    })?);
    out.push(check_op("transpose", std::slice::from_ref(&x234), s, |t, v| {
        t.transpose(v[0], 0, 2)
    })?);
    out.push(check_op("avgpool2x2", &[grid], s, |t, v| t.avgpool2x2(v[0]))?);
    out.push(check_op("gather_rows", &[rows], s, |t, v| {
        t.gather_rows(v[0], &[2, 0, 2, 3])
    })?);
    Ok(out)
}

/// A random grid leaf `[n, d, k, k]`.
fn random_grid(tape: &mut Tape, rng: &mut SeededRng, n: usize, d: usize, k: usize) -> TokenGrid {
    let values = tape.leaf(Tensor::from_fn(&[n, d, k, k], |_| rng.normal()).with_grad());
    TokenGrid {
        values,
        batch: n,
        side: k,
        dim: d,
    }
}

/// Gradient of one loss variant w.r.t. head parameters and grid embeddings.
pub fn loss_variant_gradients(
    variant: Variant,
    d: usize,
    k: usize,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let blocks = if variant == Variant::All { 2 } else { 1 };
    let spec = LossVariantSpec {
        variant,
        m,
        hidden: 16,
        ..Default::default()
    };
    let task = PretextTask::new(spec, d, k, blocks, &mut SeededRng::new(seed))?;
    let mut rng = SeededRng::new(seed ^ 0x9e37);
    let grid_values: Vec<Tensor> = (0..blocks)
        .map(|_| Tensor::from_fn(&[n, d, k, k], |_| rng.normal()))
        .collect();
    let pairs = task.sample(&vec![k; blocks], n, &mut rng)?;

    let eval =
        |task: &PretextTask, grids: &[Tensor], track: bool| -> Result<(Tape, Var, Vec<Var>, crate::numcore::Bound)> {
            let mut tape = Tape::new();
            let bound = if track {
                task.heads.params.bind(&mut tape)
            } else {
                task.heads.params.bind_frozen(&mut tape)
            };
            let gs: Vec<TokenGrid> = grids
                .iter()
                .map(|g| {
                    let t = if track { g.clone().with_grad() } else { g.clone() };
                    TokenGrid {
                        values: tape.leaf(t),
                        batch: n,
                        side: k,
                        dim: d,
                    }
                })
                .collect();
            let vars = gs.iter().map(|g| g.values).collect();
            let out = task.loss(&mut tape, &bound, &BlockGridSet(gs), &pairs)?;
            Ok((tape, out.loss, vars, bound))
        };

    let (mut tape, root, grid_vars, bound) = eval(&task, &grid_values, true)?;
    tape.backward(root)?;
    let mut report = GradCheckReport::new(format!("loss_{}", variant.name()));

    for (b, gv) in grid_vars.iter().enumerate() {
        let analytic = tape
            .grad(*gv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; grid_values[b].len()]);
        let idx: Vec<usize> = (0..analytic.len()).collect();
        report.merge(check_indices("grid", &analytic, &idx, FD_STEP, |i, delta| {
            let mut g = grid_values.clone();
            g[b].data_mut()[i] += delta;
            let (t, r, _, _) = eval(&task, &g, false).expect("evaluated once already");
            t.item(r)
        }));
    }
    let head_grads = task.heads.params.collect_grads(&tape, &bound);
    for (pi, g) in head_grads.iter().enumerate() {
        let len = task.heads.params.iter().nth(pi).unwrap().value.len();
        let analytic = g.clone().unwrap_or_else(|| vec![0.0; len]);
        let idx: Vec<usize> = (0..len).collect();
        report.merge(check_indices("head", &analytic, &idx, FD_STEP, |i, delta| {
            let mut t2 = task.clone();
            t2.heads.params.iter_mut().nth(pi).unwrap().value.data_mut()[i] += delta;
            let (t, r, _, _) = eval(&t2, &grid_values, false).expect("evaluated once already");
            t.item(r)
        }));
    }
    report.name = format!("loss_{}", variant.name());
    Ok(report)
}

/// Deterministic synthetic batch for model-level checks.
fn toy_batch(config: &VitConfig, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let side = config.image_side;
    let images = Tensor::from_fn(&[n, 3, side, side], |_| rng.normal());
    let labels = (0..n).map(|_| rng.below(config.classes as u64) as usize).collect();
    (images, labels)
}

fn model_total(
    model: &VitModel,
    task: &PretextTask,
    images: &Tensor,
    labels: &[usize],
    pairs: &[PairBatch],
    lambda: f64,
    track: bool,
) -> Result<(Tape, Var, crate::numcore::Bound, crate::numcore::Bound)> {
    let mut tape = Tape::new();
    let (bb, hb) = if track {
        (model.params.bind(&mut tape), task.heads.params.bind(&mut tape))
    } else {
        (
            model.params.bind_frozen(&mut tape),
            task.heads.params.bind_frozen(&mut tape),
        )
    };
    let out = model.forward(&mut tape, &bb, images)?;
    let ce = classification_loss(&mut tape, out.logits, labels)?;
    let aux = task.loss(&mut tape, &hb, &out.grids, pairs)?;
    let total = crate::drloc::total_loss(&mut tape, ce, aux.loss, lambda)?;
    Ok((tape, total, bb, hb))
}

/// Whole-model check of `L_ce + lambda * L_aux`.
///
/// With `sample = None` every scalar parameter is checked; otherwise one
/// entry per parameter tensor plus random entries up to `sample` in total.
pub fn full_model_gradients(
    variant: Variant,
    embed_dim: usize,
    grid_side: usize,
    sample: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let patch = 4;
    let config = VitConfig {
        image_side: grid_side * patch,
        patch_side: patch,
        embed_dim,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        classes: 5,
        use_abs_pos_embed: true,
        pool_final_grid: false,
    };
    let spec = LossVariantSpec {
        variant,
        m: 4,
        lambda: 0.5,
        hidden: 16,
        ..Default::default()
    };
    let model = VitModel::new(config.clone(), &mut SeededRng::new(seed))?;
    let task = PretextTask::new(
        spec.clone(),
        embed_dim,
        config.pretext_side(),
        config.blocks,
        &mut SeededRng::new(seed + 1),
    )?;
    let n = 2;
    let (images, labels) = toy_batch(&config, n, seed + 2);
    let sides = task.task_sides(&vec![config.pretext_side(); config.blocks]);
    let pairs = task.sample(&sides, n, &mut SeededRng::new(seed + 3))?;

    let (mut tape, root, bb, hb) = model_total(&model, &task, &images, &labels, &pairs, spec.lambda, true)?;
    tape.backward(root)?;
    let grads: Vec<Vec<f64>> = model
        .params
        .collect_grads(&tape, &bb)
        .into_iter()
        .chain(task.heads.params.collect_grads(&tape, &hb))
        .zip(model.params.iter().chain(task.heads.params.iter()))
        .map(|(g, p)| g.unwrap_or_else(|| vec![0.0; p.value.len()]))
        .collect();

    let mut targets: Vec<(usize, usize)> = Vec::new();
    let mut rng = SeededRng::new(seed + 4);
    match sample {
        None => {
            for (pi, g) in grads.iter().enumerate() {
                targets.extend((0..g.len()).map(|i| (pi, i)));
            }
        }
        Some(count) => {
            for (pi, g) in grads.iter().enumerate() {
                targets.push((pi, rng.below(g.len() as u64) as usize));
            }
            let total: usize = grads.iter().map(Vec::len).sum();
            while targets.len() < count {
                let mut flat = rng.below(total as u64) as usize;
                let mut pi = 0;
                while flat >= grads[pi].len() {
                    flat -= grads[pi].len();
                    pi += 1;
                }
                targets.push((pi, flat));
            }
        }
    }

    let backbone_count = model.params.len();
    let mut report = GradCheckReport::new(format!("full_model_{}_d{embed_dim}_k{grid_side}", variant.name()));
    for (pi, ei) in targets {
        let numeric = super::gradcheck::central_difference(
            |delta| {
                let mut m2 = model.clone();
                let mut t2 = task.clone();
                let p = if pi < backbone_count {
                    m2.params.iter_mut().nth(pi).unwrap()
                } else {
                    t2.heads.params.iter_mut().nth(pi - backbone_count).unwrap()
                };
                p.value.data_mut()[ei] += delta;
                let (t, r, _, _) = model_total(&m2, &t2, &images, &labels, &pairs, spec.lambda, false)
                    .expect("evaluated once already");
                t.item(r)
            },
            FD_STEP,
        );
        report.record(pi * 1_000_000 + ei, grads[pi][ei], numeric);
    }
    Ok(report)
}

/// Random head predictions for oracle comparisons: a random grid, a random
/// head, `m` sampled pairs.
fn oracle_case(
    variant: Variant,
    n: usize,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<(Tape, Var, Vec<PairBatch>, Prediction)> {
    let d = 6;
    let spec = LossVariantSpec {
        variant,
        m,
        hidden: 12,
        ..Default::default()
    };
    let task = PretextTask::new(spec, d, k, 1, &mut SeededRng::new(seed))?;
    let mut tape = Tape::new();
    let bound = task.heads.params.bind_frozen(&mut tape);
    let mut rng = SeededRng::new(seed);
    let grid = random_grid(&mut tape, &mut rng, n, d, k);
    let pairs = task.sample(&[k], n, &mut rng)?;
    let out = task.loss(&mut tape, &bound, &BlockGridSet(vec![grid]), &pairs)?;
    Ok((tape, out.loss, pairs, out.final_prediction))
}

/// Implementation-vs-oracle comparisons for every loss variant.
pub fn oracle_equivalence(seed: u64) -> Result<Vec<CheckResult>> {
    let (n, m, k) = (2, 3, 7);
    let mut results = Vec::new();

    for variant in [Variant::Drloc, Variant::Signed] {
        let (tape, loss, pairs, pred) = oracle_case(variant, n, m, k, seed)?;
        let Prediction::Offsets(p) = pred else { unreachable!() };
        let want = oracle::drloc_l1(
            tape.data(p),
            &pairs[0].pos_a,
            &pairs[0].pos_b,
            k,
            variant == Variant::Signed,
        );
        let got = tape.item(loss);
        results.push(CheckResult::new(
            format!("oracle_{}", variant.name()),
            got.to_bits() == want.to_bits(),
            format!("impl {got:e} oracle {want:e} (bit-exact required)"),
        ));
    }
    for variant in [Variant::Ce, Variant::Reg] {
        let (tape, loss, pairs, pred) = oracle_case(variant, n, m, k, seed)?;
        let Prediction::Distributions { u, v } = pred else {
            unreachable!()
        };
        let p = &pairs[0];
        let want = if variant == Variant::Ce {
            oracle::offset_class_nll(
                tape.data(u),
                tape.data(v),
                &p.pos_a,
                &p.pos_b,
                k,
                crate::drloc::loss::LOG_FLOOR,
            )
        } else {
            let d = LossVariantSpec::default();
            oracle::gaussian_prior(
                tape.data(u),
                tape.data(v),
                &p.pos_a,
                &p.pos_b,
                k,
                d.alpha,
                d.sigma_floor,
            )
        };
        let got = tape.item(loss);
        results.push(CheckResult::new(
            format!("oracle_{}", variant.name()),
            (got - want).abs() <= 1e-9,
            format!("impl {got:.12e} oracle {want:.12e} (tol 1e-9)"),
        ));
    }

    // loss_all with one block against drloc on the same seed
    let d = 6;
    let spec = LossVariantSpec {
        variant: Variant::Drloc,
        m,
        hidden: 12,
        ..Default::default()
    };
    let heads = HeadSet::new(
        1,
        d,
        spec.hidden,
        Variant::All.head_output(k),
        &mut SeededRng::new(seed),
    );
    let mut tape = Tape::new();
    let bound = heads.params.bind_frozen(&mut tape);
    let grid = random_grid(&mut tape, &mut SeededRng::new(seed + 10), n, d, k);
    let grids = BlockGridSet(vec![grid]);
    let all = loss_all(&mut tape, &grids, &heads, &bound, &spec, &mut SeededRng::new(seed + 20))?;
    let pairs = sample_pairs(k, m, n, &mut SeededRng::new(seed + 20))?;
    let (single, _) =
        crate::drloc::block_loss(&mut tape, &bound, &heads.heads[0], &grid, &pairs, Variant::Drloc, &spec)?;
    let (a, b) = (tape.item(all), tape.item(single));
    results.push(CheckResult::new(
        "oracle_all_single_block",
        a.to_bits() == b.to_bits(),
        format!("loss_all {a:e} loss_drloc {b:e} (bit-exact required)"),
    ));
    Ok(results)
}

/// Chi-square statistic over cell frequencies of `2 * n * m` sampled
/// positions on a `k x k` grid.
pub fn sampler_chi_square(k: usize, n: usize, m: usize, seed: u64) -> Result<(f64, usize)> {
    let pairs = sample_pairs(k, m, n, &mut SeededRng::new(seed))?;
    let mut counts = vec![0u64; k * k];
    for p in pairs.pos_a.iter().chain(&pairs.pos_b) {
        counts[p[0] * k + p[1]] += 1;
    }
    Ok((oracle::chi_square_uniform(&counts), pairs.pos_a.len() * 2))
}

/// Counts violations of the swap symmetries and class/offset consistency.
pub fn swap_symmetry_violations(k: usize, pairs: usize, seed: u64) -> Result<usize> {
    let p = sample_pairs(k, pairs, 1, &mut SeededRng::new(seed))?;
    let s = p.swapped();
    let mut violations = 0;
    for q in 0..pairs {
        for axis in 0..2 {
            let i = q * 2 + axis;
            if p.offsets_abs.data()[i] != s.offsets_abs.data()[i] {
                violations += 1;
            }
            if p.offsets_signed.data()[i] != -s.offsets_signed.data()[i] {
                violations += 1;
            }
            if p.classes[q][axis] != -s.classes[q][axis] {
                violations += 1;
            }
            if (k as f64 * p.offsets_signed.data()[i]).round() as i64 != p.classes[q][axis] {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

/// Maximum deviations of 14x14 -> 7x7 pooling from the four-term oracle and
/// of the grid mean, plus whether sequence/grid round-trips are bit-exact.
pub fn pooling_checks(seed: u64) -> Result<(f64, f64, bool)> {
    let (n, d, k) = (2, 5, 14);
    let mut rng = SeededRng::new(seed);
    let tokens = Tensor::from_fn(&[n, k * k, d], |_| rng.normal());
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let grid = sequence_to_grid(&mut tape, x)?;
    let pooled = pool_to_target(&mut tape, &grid, 7)?;
    let want = oracle::avgpool_2x2(tape.data(grid.values), n * d, k, k);
    let max_cell = tape
        .data(pooled.values)
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_shift = (mean(tape.data(grid.values)) - mean(tape.data(pooled.values))).abs();
    let back = grid_to_sequence(&mut tape, &grid)?;
    let round_trip = tape.data(back) == tokens.data();
    Ok((max_cell, mean_shift, round_trip))
}

/// Gradient of `sum(collect_embeddings(grid))`: the count of times each cell
/// was gathered, compared against central differences.
pub fn collect_gradient(seed: u64) -> Result<GradCheckReport> {
    let (n, d, k, m) = (2, 3, 4, 5);
    let mut rng = SeededRng::new(seed);
    let values = Tensor::from_fn(&[n, d, k, k], |_| rng.normal());
    let pairs = sample_pairs(k, m, n, &mut rng)?;
    let eval = |v: Tensor| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let vv = tape.leaf(v);
        let grid = TokenGrid {
            values: vv,
            batch: n,
            side: k,
            dim: d,
        };
        let e = collect_embeddings(&mut tape, &grid, m, &pairs.pos_a)?;
        let s = tape.sum(e);
        Ok((tape, s, vv))
    };
    let (mut tape, root, vv) = eval(values.clone().with_grad())?;
    tape.backward(root)?;
    let analytic = tape.grad(vv).unwrap().to_vec();
    let idx: Vec<usize> = (0..values.len()).collect();
    Ok(check_indices(
        "collect_embeddings",
        &analytic,
        &idx,
        FD_STEP,
        |i, delta| {
            let mut v = values.clone();
            v.data_mut()[i] += delta;
            let (t, r, _) = eval(v).expect("evaluated once already");
            t.item(r)
        },
    ))
}

/// Everything the `check` command runs.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for r in primitive_gradients(seed)? {
        results.push(CheckResult::from_report(&r, PRIMITIVE_TOL));
    }
    results.push(CheckResult::from_report(&collect_gradient(seed)?, MODEL_TOL));
    for v in Variant::ALL {
        results.push(CheckResult::from_report(
            &loss_variant_gradients(v, 8, 3, 2, 4, seed)?,
            MODEL_TOL,
        ));
    }
    for v in Variant::ALL {
        results.push(CheckResult::from_report(
            &full_model_gradients(v, 16, 3, Some(32), seed)?,
            MODEL_TOL,
        ));
    }
    results.push(CheckResult::from_report(
        &full_model_gradients(Variant::Drloc, 16, 7, Some(32), seed)?,
        MODEL_TOL,
    ));
    results.push(CheckResult::from_report(
        &full_model_gradients(Variant::Drloc, 8, 3, None, seed)?,
        MODEL_TOL,
    ));
    results.extend(oracle_equivalence(seed)?);

    let (stat, draws) = sampler_chi_square(7, 1000, 32, seed)?;
    results.push(CheckResult::new(
        "sampler_uniformity",
        stat < oracle::CHI2_CRITICAL_P001_DOF48,
        format!(
            "chi2 {stat:.2} over {draws} positions, critical {:.2}",
            oracle::CHI2_CRITICAL_P001_DOF48
        ),
    ));
    let violations = swap_symmetry_violations(7, 10_000, seed)?;
    results.push(CheckResult::new(
        "swap_symmetry",
        violations == 0,
        format!("{violations} violations in 10000 pairs"),
    ));
    let (cell, shift, rt) = pooling_checks(seed)?;
    results.push(CheckResult::new(
        "pooling",
        cell < 1e-12 && shift < 1e-12 && rt,
        format!("max cell dev {cell:.1e}, mean shift {shift:.1e}, round trip exact: {rt}"),
    ));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamSet;

    #[test]
    fn full_suite_passes() {
        let results = run_all(7).unwrap();
        for r in &results {
            println!("{r}");
        }
        assert!(results.iter().all(|r| r.passed));
    }

    #[test]
    fn check_op_detects_a_wrong_gradient() {
        // relu's gradient is fine; comparing against scale(-1) analytic
        // values via a mismatched build must fail.
        let x = Tensor::new(vec![3], vec![0.5, -0.4, 0.9]).unwrap();
        let good = check_op("scale", std::slice::from_ref(&x), 0, |t, v| Ok(t.scale(v[0], 2.0))).unwrap();
        assert!(good.passes(PRIMITIVE_TOL));
        let mut bad = good.clone();
        bad.record(0, 1.0, 2.0);
        assert!(!bad.passes(PRIMITIVE_TOL));
    }

    #[test]
    fn params_unused_helper() {
        // ParamSet::collect_grads returns None for parameters not bound to the root
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[2]), true);
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape);
        let c = tape.constant(Tensor::scalar(1.0));
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(ps.collect_grads(&tape, &b)[0].is_none());
    }
}
