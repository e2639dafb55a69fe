//! Training losses and evaluation metrics.
//!
//! Chamfer distance is the sum of the two directed means of squared
//! distances. EMD is the mean Euclidean distance under the optimal perfect
//! matching, solved exactly.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest cloud accepted by [`emd_exact`].
pub const EMD_MAX_POINTS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub support: usize,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, support: usize) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() || support == 0 {
            return Err(Error::invalid(
                "metric",
                format!("{name}: value {value}, support {support}"),
            ));
        }
        Ok(Self {
            name,
            value,
            support,
        })
    }
}

/// Mean negative log-softmax of the true class. `logits` is `[..., K]` with
/// one label per row; rows labelled `ignore` are skipped.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<Var> {
    let lv = tape.value(logits);
    let k = lv.last_dim();
    let rows = lv.rows();
    if labels.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            &[lv.shape(), &[labels.len()]],
        ));
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= k && Some(l) != ignore)
    {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {l} at row {i} outside 0..{k}"),
        ));
    }
    let used: Vec<bool> = labels.iter().map(|&l| Some(l) != ignore).collect();
    let count = used.iter().filter(|&&u| u).count();
    if count == 0 {
        return Err(Error::invalid("cross_entropy", "every row is ignored"));
    }
    let mut probs = vec![0.0; rows * k];
    let mut total = 0.0;
    for r in 0..rows {
        let row = &lv.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for j in 0..k {
            probs[r * k + j] = (row[j] - max).exp() / z;
        }
        if used[r] {
            total += z.ln() + max - row[labels[r]];
        }
    }
    let labels = labels.to_vec();
    Ok(tape.custom(
        "cross_entropy",
        &[logits],
        Tensor::scalar(total / count as f64),
        Box::new(move |args| {
            let g = args.grad[0] / count as f64;
            let mut out = vec![0.0; rows * k];
            for r in 0..rows {
                if !used[r] {
                    continue;
                }
                for j in 0..k {
                    out[r * k + j] =
                        g * (probs[r * k + j] - if j == labels[r] { 1.0 } else { 0.0 });
                }
            }
            Ok(vec![out])
        }),
    ))
}

/// `[n, 3]` or `[B, n, 3]` → (batch, n).
fn cloud_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, 3] if *n > 0 => Ok((1, *n)),
        [b, n, 3] if *n > 0 && *b > 0 => Ok((*b, *n)),
        s => Err(Error::shape(op, &[s])),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Index of the nearest row of `b` to `p` (first on ties) and its squared distance.
fn nearest(p: &[f64], b: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in b.chunks(3).enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Chamfer distance of two clouds, averaged over the batch when batched.
pub fn chamfer(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (ba, n) = cloud_dims("chamfer", av)?;
    let (bb, m) = cloud_dims("chamfer", bv)?;
    if ba != bb {
        return Err(Error::shape("chamfer", &[av.shape(), bv.shape()]));
    }
    let batch = ba;
    let mut nn_ab = Vec::with_capacity(batch * n);
    let mut nn_ba = Vec::with_capacity(batch * m);
    let mut total = 0.0;
    for s in 0..batch {
        let ac = &av.data()[s * n * 3..(s + 1) * n * 3];
        let bc = &bv.data()[s * m * 3..(s + 1) * m * 3];
        let mut sa = 0.0;
        for p in ac.chunks(3) {
            let (j, d) = nearest(p, bc);
            nn_ab.push(j);
            sa += d;
        }
        let mut sb = 0.0;
        for q in bc.chunks(3) {
            let (i, d) = nearest(q, ac);
            nn_ba.push(i);
            sb += d;
        }
        total += sa / n as f64 + sb / m as f64;
    }
    Ok(tape.custom(
        "chamfer",
        &[a, b],
        Tensor::scalar(total / batch as f64),
        Box::new(move |args| {
            let g = args.grad[0] / batch as f64;
            let (ad, bd) = (args.inputs[0].data(), args.inputs[1].data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for s in 0..batch {
                for i in 0..n {
                    let j = nn_ab[s * n + i];
                    let (pi, qj) = ((s * n + i) * 3, (s * m + j) * 3);
                    for x in 0..3 {
                        let d = 2.0 * (ad[pi + x] - bd[qj + x]) * g / n as f64;
                        ga[pi + x] += d;
                        gb[qj + x] -= d;
                    }
                }
                for j in 0..m {
                    let i = nn_ba[s * m + j];
                    let (pi, qj) = ((s * n + i) * 3, (s * m + j) * 3);
                    for x in 0..3 {
                        let d = 2.0 * (bd[qj + x] - ad[pi + x]) * g / m as f64;
                        gb[qj + x] += d;
                        ga[pi + x] -= d;
                    }
                }
            }
            Ok(vec![ga, gb])
        }),
    ))
}

/// Chamfer distance of two unbatched clouds given as flat `xyz` rows.
pub fn chamfer_value(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || !a.len().is_multiple_of(3) || !b.len().is_multiple_of(3) {
        return Err(Error::invalid(
            "chamfer",
            "clouds must be non-empty xyz rows",
        ));
    }
    let da: f64 = a.chunks(3).map(|p| nearest(p, b).1).sum::<f64>() / (a.len() / 3) as f64;
    let db: f64 = b.chunks(3).map(|q| nearest(q, a).1).sum::<f64>() / (b.len() / 3) as f64;
    Ok(da + db)
}

/// Minimum-cost perfect matching of a square `n x n` cost matrix (row-major).
/// Returns `assignment[row] = column`. Shortest augmenting paths with
/// potentials, O(n³).
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Optimal matching of two equal-size clouds (flat xyz rows) and its mean
/// Euclidean distance.
pub fn emd_matching(a: &[f64], b: &[f64]) -> Result<(Vec<usize>, f64)> {
    if a.len() != b.len() || a.is_empty() || !a.len().is_multiple_of(3) {
        return Err(Error::invalid(
            "emd_exact",
            format!("clouds of {} and {} coordinates", a.len(), b.len()),
        ));
    }
    let n = a.len() / 3;
    if n > EMD_MAX_POINTS {
        return Err(Error::invalid(
            "emd_exact",
            format!("{n} points exceeds {EMD_MAX_POINTS}"),
        ));
    }
    let mut cost = Vec::with_capacity(n * n);
    for p in a.chunks(3) {
        for q in b.chunks(3) {
            cost.push(sq_dist(p, q).sqrt());
        }
    }
    let assignment = solve_assignment(&cost, n);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((assignment, total / n as f64))
}

/// Exact earth mover's distance, averaged over the batch when batched.
/// Gradients flow through the optimal matching, held fixed.
pub fn emd_exact(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::shape("emd_exact", &[av.shape(), bv.shape()]));
    }
    let (batch, n) = cloud_dims("emd_exact", av)?;
    let mut matchings = Vec::with_capacity(batch);
    let mut total = 0.0;
    for s in 0..batch {
        let range = s * n * 3..(s + 1) * n * 3;
        let (m, d) = emd_matching(&av.data()[range.clone()], &bv.data()[range])?;
        matchings.push(m);
        total += d;
    }
    Ok(tape.custom(
        "emd_exact",
        &[a, b],
        Tensor::scalar(total / batch as f64),
        Box::new(move |args| {
            let g = args.grad[0] / (batch * n) as f64;
            let (ad, bd) = (args.inputs[0].data(), args.inputs[1].data());
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for (s, m) in matchings.iter().enumerate() {
                for (i, &j) in m.iter().enumerate() {
                    let (pi, qj) = ((s * n + i) * 3, (s * n + j) * 3);
                    let d = sq_dist(&ad[pi..pi + 3], &bd[qj..qj + 3]).sqrt();
                    if d == 0.0 {
                        continue;
                    }
                    for x in 0..3 {
                        let u = g * (ad[pi + x] - bd[qj + x]) / d;
                        ga[pi + x] += u;
                        gb[qj + x] -= u;
                    }
                }
            }
            Ok(vec![ga, gb])
        }),
    ))
}

/// Threshold used for F-score: 1% of the bounding-box diagonal of `truth`.
pub fn fscore_tau(truth: &[f64]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in truth.chunks(3) {
        for x in 0..3 {
            lo[x] = lo[x].min(p[x]);
            hi[x] = hi[x].max(p[x]);
        }
    }
    0.01 * (0..3).map(|x| (hi[x] - lo[x]).powi(2)).sum::<f64>().sqrt()
}

/// Harmonic mean of precision (share of `pred` within `tau` of `truth`) and
/// recall (share of `truth` within `tau` of `pred`).
pub fn fscore_at(pred: &[f64], truth: &[f64], tau: f64) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::invalid("fscore_at", "empty cloud"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "fscore_at",
            format!("threshold {tau} must be positive"),
        ));
    }
    let t2 = tau * tau;
    let within = |x: &[f64], y: &[f64]| {
        x.chunks(3).filter(|p| nearest(p, y).1 <= t2).count() as f64 / (x.len() / 3) as f64
    };
    let (precision, recall) = (within(pred, truth), within(truth, pred));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn check_labels(op: &'static str, pred: &[usize], truth: &[usize], k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::invalid(op, "need at least one class"));
    }
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(op, &[&[pred.len()], &[truth.len()]]));
    }
    if let Some(&l) = pred.iter().chain(truth).find(|&&l| l >= k) {
        return Err(Error::invalid(op, format!("label {l} outside 0..{k}")));
    }
    Ok(())
}

/// Mean intersection-over-union over classes present in either labelling.
pub fn miou(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    check_labels("miou", pred, truth, k)?;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let ious: Vec<f64> = (0..k)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("accuracy", &[&[pred.len()], &[truth.len()]]));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Mean over true classes present of per-class recall.
pub fn mean_class_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    check_labels("mean_class_accuracy", pred, truth, k)?;
    let mut hit = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        seen[t] += 1;
        hit[t] += (p == t) as usize;
    }
    let accs: Vec<f64> = (0..k)
        .filter(|&c| seen[c] > 0)
        .map(|c| hit[c] as f64 / seen[c] as f64)
        .collect();
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Row-wise argmax of `[..., K]` scores (first index on ties).
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let k = scores.last_dim();
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_tape_fn, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Minimum mean matched distance over every permutation.
    fn brute_force_emd(a: &[f64], b: &[f64]) -> f64 {
        fn rec(a: &[f64], b: &[f64], perm: &mut Vec<usize>, used: &mut Vec<bool>, best: &mut f64) {
            let n = used.len();
            if perm.len() == n {
                let s: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| sq_dist(&a[3 * i..], &b[3 * j..]).sqrt())
                    .sum();
                *best = best.min(s / n as f64);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    perm.push(j);
                    rec(a, b, perm, used, best);
                    perm.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(
            a,
            b,
            &mut Vec::new(),
            &mut vec![false; a.len() / 3],
            &mut best,
        );
        best
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[3, 5]));
        let ce = cross_entropy(&mut tape, l, &[0, 4, 2], None).unwrap();
        assert!((tape.value(ce).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, l, &[1], None).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label_and_honours_ignore() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(cross_entropy(&mut tape, l, &[0, 2], None).is_err());
        let ce = cross_entropy(&mut tape, l, &[0, 7], Some(7)).unwrap();
        assert!((tape.value(ce).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chamfer_hand_values() {
        assert_eq!(chamfer_value(&[0.0; 3], &[1.0, 0.0, 0.0]).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = cloud(&mut rng, 7);
        assert_eq!(chamfer_value(&a, &a).unwrap(), 0.0);
        let b = cloud(&mut rng, 4);
        assert_eq!(
            chamfer_value(&a, &b).unwrap(),
            chamfer_value(&b, &a).unwrap()
        );
        assert!(chamfer_value(&[], &b).is_err());
    }

    #[test]
    fn tape_chamfer_matches_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (cloud(&mut rng, 6), cloud(&mut rng, 4));
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::new(&[6, 3], a.clone()).unwrap());
        let bv = tape.leaf(Tensor::new(&[4, 3], b.clone()).unwrap());
        let c = chamfer(&mut tape, av, bv).unwrap();
        assert!((tape.value(c).item() - chamfer_value(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn emd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let n = 1 + trial % 6;
            let (a, b) = (cloud(&mut rng, n), cloud(&mut rng, n));
            let (_, d) = emd_matching(&a, &b).unwrap();
            let oracle = brute_force_emd(&a, &b);
            assert_eq!(d, oracle, "n={n}");
        }
    }

    #[test]
    fn emd_permutation_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(&mut rng, 9);
        let mut shuffled: Vec<[f64; 3]> = a.chunks(3).map(|p| [p[0], p[1], p[2]]).collect();
        shuffled.reverse();
        let flat: Vec<f64> = shuffled.concat();
        assert_eq!(emd_matching(&a, &flat).unwrap().1, 0.0);
        let b = cloud(&mut rng, 9);
        let shift = |c: &[f64]| {
            c.iter()
                .enumerate()
                .map(|(i, v)| v + [0.3, -2.0, 5.0][i % 3])
                .collect::<Vec<_>>()
        };
        let (d0, d1) = (
            emd_matching(&a, &b).unwrap().1,
            emd_matching(&shift(&a), &shift(&b)).unwrap().1,
        );
        assert!((d0 - d1).abs() < 1e-12);
        assert!(emd_matching(&a, &b[..6]).is_err());
    }

    #[test]
    fn fscore_hand_values() {
        let a = [0.0, 0.0, 0.0, 5.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0];
        assert!((fscore_at(&a, &b, 0.1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fscore_at(&a, &a, 0.1).unwrap(), 1.0);
        assert_eq!(fscore_at(&b, &[9.0, 9.0, 9.0], 0.1).unwrap(), 0.0);
        assert!(fscore_at(&a, &b, 0.0).is_err());
        assert!((fscore_tau(&[0.0, 0.0, 0.0, 3.0, 4.0, 0.0]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn fscore_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (cloud(&mut rng, 20), cloud(&mut rng, 15));
        let mut last = 0.0;
        for k in 1..40 {
            let f = fscore_at(&a, &b, k as f64 * 0.05).unwrap();
            assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn label_metrics() {
        assert_eq!(miou(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        let (pred, truth) = ([0, 0, 0, 0], [0, 0, 1, 1]);
        assert_eq!(accuracy(&pred, &truth).unwrap(), 0.5);
        assert_eq!(miou(&pred, &truth, 2).unwrap(), 0.25);
        assert_eq!(mean_class_accuracy(&pred, &truth, 2).unwrap(), 0.5);
        // consistent relabelling
        let swap = |v: &[usize]| v.iter().map(|&l| 1 - l).collect::<Vec<_>>();
        assert_eq!(miou(&swap(&pred), &swap(&truth), 2).unwrap(), 0.25);
        assert!(miou(&pred, &truth, 0).is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opts = GradCheckOptions::default();
        let a = Tensor::new(&[5, 3], cloud(&mut rng, 5)).unwrap();
        let b = Tensor::new(&[5, 3], cloud(&mut rng, 5)).unwrap();
        let r = check_tape_fn(&[a.clone(), b.clone()], &opts, |t, v| {
            chamfer(t, v[0], v[1])
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        let r = check_tape_fn(&[a, b], &opts, |t, v| emd_exact(t, v[0], v[1])).unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        let logits = Tensor::from_fn(&[4, 3], |_| rng.random_range(-2.0..2.0));
        let r = check_tape_fn(&[logits], &opts, |t, v| {
            cross_entropy(t, v[0], &[0, 2, 1, 1], None)
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }
}
