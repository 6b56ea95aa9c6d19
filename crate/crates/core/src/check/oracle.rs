//! Brute-force reference computations on plain slices.
//!
//! Nothing here touches the tape: every quantity is recomputed from raw
//! positions, probabilities or values with explicit loops.

/// Mean L1 between localization targets recomputed from positions and
/// predictions laid out `[pair][axis]`. Summation runs pair by pair, u then
/// v, then divides by the element count.
pub fn drloc_l1(pred: &[f64], pos_a: &[[usize; 2]], pos_b: &[[usize; 2]], side: usize, signed: bool) -> f64 {
    assert_eq!(pred.len(), pos_a.len() * 2);
    let mut total = 0.0;
    for (q, (a, b)) in pos_a.iter().zip(pos_b).enumerate() {
        for axis in 0..2 {
            let diff = a[axis] as i64 - b[axis] as i64;
            let num = if signed { diff } else { diff.abs() };
            let target = num as f64 / side as f64;
            total += (target - pred[q * 2 + axis]).abs();
        }
    }
    total / pred.len() as f64
}

fn class_of(a: &[usize; 2], b: &[usize; 2], axis: usize) -> i64 {
    a[axis] as i64 - b[axis] as i64
}

/// Mean over pairs of `-(ln p_u[c_u] + ln p_v[c_v])` with probabilities
/// floored at `floor`. Rows of `pu`/`pv` have `2k + 1` entries.
pub fn offset_class_nll(
    pu: &[f64],
    pv: &[f64],
    pos_a: &[[usize; 2]],
    pos_b: &[[usize; 2]],
    side: usize,
    floor: f64,
) -> f64 {
    let c = 2 * side + 1;
    let mut total = 0.0;
    for (q, (a, b)) in pos_a.iter().zip(pos_b).enumerate() {
        let su = (class_of(a, b, 0) + side as i64) as usize;
        let sv = (class_of(a, b, 1) + side as i64) as usize;
        total -= pu[q * c + su].max(floor).ln() + pv[q * c + sv].max(floor).ln();
    }
    total / pos_a.len() as f64
}

/// Mean over pairs of the Gaussian-prior objective, both axes.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_prior(
    pu: &[f64],
    pv: &[f64],
    pos_a: &[[usize; 2]],
    pos_b: &[[usize; 2]],
    side: usize,
    alpha: f64,
    var_floor: f64,
) -> f64 {
    let c = 2 * side + 1;
    let term = |row: &[f64], target: i64| {
        let mut mu = 0.0;
        for (slot, p) in row.iter().enumerate() {
            mu += p * (slot as f64 - side as f64);
        }
        let mut var = 0.0;
        for (slot, p) in row.iter().enumerate() {
            let d = slot as f64 - side as f64 - mu;
            var += p * d * d;
        }
        let var = var.max(var_floor);
        let sigma = var.sqrt();
        (target as f64 - mu).powi(2) / var + alpha * sigma.ln()
    };
    let mut total = 0.0;
    for (q, (a, b)) in pos_a.iter().zip(pos_b).enumerate() {
        total += term(&pu[q * c..(q + 1) * c], class_of(a, b, 0));
        total += term(&pv[q * c..(q + 1) * c], class_of(a, b, 1));
    }
    total / pos_a.len() as f64
}

/// Mean cross-entropy of integer labels under `logits` rows, via
/// log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

/// 2x2 block means of a `[planes, h, w]` buffer, four explicit terms per cell.
pub fn avgpool_2x2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        let at = |r: usize, c: usize| x[p * h * w + r * w + c];
        for r in (0..h).step_by(2) {
            for c in (0..w).step_by(2) {
                out.push((at(r, c) + at(r, c + 1) + at(r + 1, c) + at(r + 1, c + 1)) / 4.0);
            }
        }
    }
    out
}

/// Pearson chi-square statistic of observed counts against a uniform
/// expectation.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum()
}

/// Upper 0.001 critical value of the chi-square distribution with 48
/// degrees of freedom (49 grid cells of a 7x7 grid).
pub const CHI2_CRITICAL_P001_DOF48: f64 = 84.037_133_717_223_48;
