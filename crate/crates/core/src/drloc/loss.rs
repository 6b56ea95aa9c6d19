//! Localization losses. Each returns a scalar node on the tape.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Probabilities are clamped to at least this before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_targets(tape: &Tape, op: &str, pred: Var, targets: &Tensor) -> Result<()> {
    if tape.shape(pred) != targets.shape() {
        return Err(Error::shape(op, tape.shape(pred), targets.shape()));
    }
    Ok(())
}

/// Mean absolute error over every element of `pred` against `targets`.
fn mean_l1(tape: &mut Tape, op: &str, pred: Var, targets: &Tensor) -> Result<Var> {
    check_targets(tape, op, pred, targets)?;
    let t = tape.constant(targets.clone());
    let diff = tape.sub(t, pred)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// L1 against absolute offsets, averaged over all `n * m * 2` elements.
pub fn loss_drloc(tape: &mut Tape, pred: Var, offsets_abs: &Tensor) -> Result<Var> {
    mean_l1(tape, "loss_drloc", pred, offsets_abs)
}

/// L1 against signed offsets, averaged over all `n * m * 2` elements.
pub fn loss_signed(tape: &mut Tape, pred: Var, offsets_signed: &Tensor) -> Result<Var> {
    mean_l1(tape, "loss_signed", pred, offsets_signed)
}

/// Flattens a `[n, m, C]` branch to `[n*m, C]` and checks it against the
/// class list.
fn branch_rows(tape: &mut Tape, p: Var, classes: &[[i64; 2]], side: usize) -> Result<(Var, usize)> {
    let c = 2 * side + 1;
    let shape = tape.shape(p).to_vec();
    let rows = shape.iter().product::<usize>() / c;
    if shape.last() != Some(&c) || rows != classes.len() {
        return Err(Error::Config(format!(
            "distribution of shape {shape:?} does not match {} pairs over {c} classes",
            classes.len()
        )));
    }
    if let Some(bad) = classes.iter().flatten().find(|&&v| v.unsigned_abs() as usize > side) {
        return Err(Error::Config(format!("class {bad} outside -{side}..={side}")));
    }
    Ok((tape.reshape(p, &[rows, c])?, rows))
}

/// `log max(p[c + k], floor)` per pair for one axis; `axis` 0 is u, 1 is v.
fn target_log_prob(tape: &mut Tape, p: Var, classes: &[[i64; 2]], side: usize, axis: usize) -> Result<Var> {
    let (rows_var, rows) = branch_rows(tape, p, classes, side)?;
    let c = 2 * side + 1;
    let flat = tape.reshape(rows_var, &[rows * c, 1])?;
    let idx: Vec<usize> = classes
        .iter()
        .enumerate()
        .map(|(r, cls)| r * c + (cls[axis] + side as i64) as usize)
        .collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let clamped = tape.clamp_min(picked, LOG_FLOOR);
    Ok(tape.log(clamped))
}

/// Cross-entropy over offset classes: mean over pairs of
/// `-(log p_u[c_u] + log p_v[c_v])`. Class `c` lives in slot `c + k`.
pub fn loss_ce(tape: &mut Tape, pred_u: Var, pred_v: Var, classes: &[[i64; 2]], side: usize) -> Result<Var> {
    let lu = target_log_prob(tape, pred_u, classes, side, 0)?;
    let lv = target_log_prob(tape, pred_v, classes, side, 1)?;
    let both = tape.add(lu, lv)?;
    let m = tape.mean(both);
    Ok(tape.scale(m, -1.0))
}

/// Per-pair `(c - mu)^2 / sigma^2 + alpha * log(sigma)` for one axis, `[n*m, 1]`.
fn gaussian_prior_term(
    tape: &mut Tape,
    p: Var,
    classes: &[[i64; 2]],
    side: usize,
    axis: usize,
    alpha: f64,
    sigma_floor: f64,
) -> Result<Var> {
    let (probs, rows) = branch_rows(tape, p, classes, side)?;
    let c = 2 * side + 1;
    let values: Vec<f64> = (0..c).map(|s| s as f64 - side as f64).collect();
    let values_col = tape.constant(Tensor::new(vec![c, 1], values.clone())?);
    let values_row = tape.constant(Tensor::new(vec![c], values)?);
    let ones_row = tape.constant(Tensor::filled(&[1, c], 1.0));
    let ones_col = tape.constant(Tensor::filled(&[c, 1], 1.0));

    let mu = tape.matmul(probs, values_col)?; // [rows, 1]
    let mu_wide = tape.matmul(mu, ones_row)?; // [rows, c]
    let neg_mu = tape.scale(mu_wide, -1.0);
    let centered = tape.add_bias(neg_mu, values_row)?; // c - mu
    let sq = tape.mul(centered, centered)?;
    let weighted = tape.mul(probs, sq)?;
    let var = tape.matmul(weighted, ones_col)?; // [rows, 1]
    let var = tape.clamp_min(var, sigma_floor);

    let target: Vec<f64> = classes.iter().map(|cls| cls[axis] as f64).collect();
    let target = tape.constant(Tensor::new(vec![rows, 1], target)?);
    let err = tape.sub(target, mu)?;
    let err2 = tape.mul(err, err)?;
    let ratio = tape.div(err2, var)?;
    // alpha * log(sigma) = (alpha / 2) * log(sigma^2)
    let log_var = tape.log(var);
    let prior = tape.scale(log_var, 0.5 * alpha);
    tape.add(ratio, prior)
}

/// Expected-offset regression with a Gaussian prior on each class
/// posterior; mean over pairs of the u + v terms. `sigma_floor` bounds the
/// variance from below.
pub fn loss_reg(
    tape: &mut Tape,
    pred_u: Var,
    pred_v: Var,
    classes: &[[i64; 2]],
    side: usize,
    alpha: f64,
    sigma_floor: f64,
) -> Result<Var> {
    let tu = gaussian_prior_term(tape, pred_u, classes, side, 0, alpha, sigma_floor)?;
    let tv = gaussian_prior_term(tape, pred_v, classes, side, 1, alpha, sigma_floor)?;
    let both = tape.add(tu, tv)?;
    Ok(tape.mean(both))
}

/// `ce + lambda * aux`.
pub fn total_loss(tape: &mut Tape, ce: Var, aux: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(aux, lambda);
    tape.add(ce, weighted)
}

/// Plain-number form of [`total_loss`].
pub fn total_loss_value(ce: f64, aux: f64, lambda: f64) -> f64 {
    ce + lambda * aux
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offsets(tape: &mut Tape, data: Vec<f64>, n: usize, m: usize) -> Var {
        tape.leaf(Tensor::new(vec![n, m, 2], data).unwrap().with_grad())
    }

    #[test]
    fn exact_prediction_gives_zero() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut tape = Tape::new();
        let p = offsets(&mut tape, t.data().to_vec(), 1, 2);
        let l = loss_drloc(&mut tape, p, &t).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn constant_shift_gives_shift() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0 / 7.0, 3.0 / 7.0, 6.0 / 7.0]).unwrap();
        let mut tape = Tape::new();
        let p = offsets(&mut tape, t.data().iter().map(|v| v + 0.3).collect(), 1, 2);
        let l = loss_drloc(&mut tape, p, &t).unwrap();
        assert!((tape.item(l) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn signed_against_zero_targets() {
        let t = Tensor::zeros(&[2, 3, 2]);
        let mut tape = Tape::new();
        let p = offsets(&mut tape, [0.5, -0.5].repeat(6), 2, 3);
        let l = loss_signed(&mut tape, p, &t).unwrap();
        assert_eq!(tape.item(l), 0.5);
    }

    #[test]
    fn drloc_shape_mismatch() {
        let t = Tensor::zeros(&[1, 3, 2]);
        let mut tape = Tape::new();
        let p = offsets(&mut tape, vec![0.0; 4], 1, 2);
        assert!(loss_drloc(&mut tape, p, &t).is_err());
    }

    fn uniform(tape: &mut Tape, rows: usize, c: usize) -> Var {
        tape.constant(Tensor::filled(&[1, rows, c], 1.0 / c as f64))
    }

    #[test]
    fn ce_of_uniform_is_two_log_classes() {
        let mut tape = Tape::new();
        let u = uniform(&mut tape, 3, 15);
        let v = uniform(&mut tape, 3, 15);
        let l = loss_ce(&mut tape, u, v, &[[0, 1], [-6, 6], [3, -2]], 7).unwrap();
        assert!((tape.item(l) - 2.0 * 15f64.ln()).abs() < 1e-12);
        assert!((tape.item(l) - 5.4161).abs() < 1e-4);
    }

    #[test]
    fn ce_of_one_hot_is_zero() {
        let k = 3;
        let classes = [[2i64, -1]];
        let mut u = vec![0.0; 7];
        u[(classes[0][0] + k) as usize] = 1.0;
        let mut v = vec![0.0; 7];
        v[(classes[0][1] + k) as usize] = 1.0;
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(vec![1, 1, 7], u).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 1, 7], v).unwrap());
        let l = loss_ce(&mut tape, u, v, &classes, k as usize).unwrap();
        assert!(tape.item(l).abs() < 1e-12);
    }

    #[test]
    fn ce_floor_keeps_zero_probability_finite() {
        let mut u = vec![0.0; 5];
        u[0] = 1.0;
        let mut tape = Tape::new();
        let pu = tape.constant(Tensor::new(vec![1, 1, 5], u.clone()).unwrap());
        let pv = tape.constant(Tensor::new(vec![1, 1, 5], u).unwrap());
        let l = loss_ce(&mut tape, pu, pv, &[[2, -2]], 2).unwrap();
        // slot 4 and slot 0: first is zero (floored), second is one
        assert!((tape.item(l) + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_out_of_range_class() {
        let mut tape = Tape::new();
        let u = uniform(&mut tape, 1, 5);
        let v = uniform(&mut tape, 1, 5);
        assert!(loss_ce(&mut tape, u, v, &[[3, 0]], 2).is_err());
    }

    #[test]
    fn reg_zero_error_unit_variance_is_zero() {
        // k = 2 -> classes -2..=2. Mass 1/2 on c-1 and c+1 gives mu = c, var = 1.
        let k = 2usize;
        let classes = [[0i64, 1]];
        let dist = |c: i64| {
            let mut p = vec![0.0; 5];
            p[(c - 1 + k as i64) as usize] = 0.5;
            p[(c + 1 + k as i64) as usize] = 0.5;
            p
        };
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(vec![1, 1, 5], dist(0)).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 1, 5], dist(1)).unwrap());
        let l = loss_reg(&mut tape, u, v, &classes, k, 0.001, 1e-6).unwrap();
        assert!(tape.item(l).abs() < 1e-15);
    }

    #[test]
    fn reg_one_hot_hits_the_variance_floor() {
        let k = 7usize;
        let classes = [[3i64, -2]];
        let one_hot = |c: i64| {
            let mut p = vec![0.0; 15];
            p[(c + k as i64) as usize] = 1.0;
            p
        };
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(vec![1, 1, 15], one_hot(3)).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 1, 15], one_hot(-2)).unwrap());
        let l = loss_reg(&mut tape, u, v, &classes, k, 0.001, 1e-6).unwrap();
        let want = 0.001 * 1e-6f64.ln();
        assert!((tape.item(l) - want).abs() < 1e-15);
        assert!((tape.item(l) + 0.0138).abs() < 1e-4);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss_value(2.0, 0.5, 0.5), 2.25);
        assert_eq!(total_loss_value(1.7, 0.9, 0.0), 1.7);
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(2.0));
        let aux = tape.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut tape, ce, aux, 0.5).unwrap();
        assert_eq!(tape.item(t), 2.25);
    }
}
