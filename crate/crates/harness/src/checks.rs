//! Oracle comparisons and structural invariants, each returning what it
//! measured so callers can print or assert on it.

use cloud_transform::blocks::{BlockConfig, Mhct};
use cloud_transform::losses::emd_exact;
use cloud_transform::models::{Classifier, ModelConfig, Segmenter, Task};
use cloud_transform::raster::{derasterize, make_footprint, rasterize_max, Cloud, PointCloudBatch};
use cloud_transform::{Forward, ParamStore, Result, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Instances checked and how many disagreed with the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleReport {
    pub instances: usize,
    pub mismatches: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Keys in `[0, 1]`: mostly uniform, some on grid nodes and on the ends.
fn random_key(rng: &mut impl Rng, w: usize) -> f64 {
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => 1.0,
        2 | 3 => rng.random_range(0..w) as f64 / (w - 1) as f64,
        _ => rng.random_range(0.0..1.0),
    }
}

/// Per-cell max over all (point, corner) contributions and the zero
/// initializer, computed by nested loops straight from the key values.
fn brute_force_max(
    keys: &[f64],
    values: &[f64],
    batch: usize,
    n: usize,
    dims: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let cells = w.pow(dims as u32);
    let scale = (w - 1) as f64;
    let mut grid = vec![0.0; batch * cells * c];
    for b in 0..batch {
        for cell in 0..cells {
            // row-major multi-index, first axis most significant
            let target: Vec<usize> = (0..dims)
                .map(|a| cell / w.pow((dims - 1 - a) as u32) % w)
                .collect();
            for i in 0..n {
                let p = b * n + i;
                for corner in 0..1usize << dims {
                    let mut weight = 1.0;
                    let mut hits = true;
                    for (a, &want) in target.iter().enumerate() {
                        let u = scale * keys[p * dims + a];
                        let lo = (u.floor() as usize).min(w - 1);
                        let hi = (lo + 1).min(w - 1);
                        let t = if lo == hi { 0.0 } else { u - lo as f64 };
                        let upper = (corner >> (dims - 1 - a)) & 1 == 1;
                        hits &= want == if upper { hi } else { lo };
                        weight *= if upper { t } else { 1.0 - t };
                    }
                    if hits {
                        for ch in 0..c {
                            let slot = (b * cells + cell) * c + ch;
                            grid[slot] = f64::max(grid[slot], weight * values[p * c + ch]);
                        }
                    }
                }
            }
        }
    }
    grid
}

/// `rasterize_max` against [`brute_force_max`] on random instances with
/// `n <= 32`, `w <= 8` and both grid dimensionalities. Equality is exact.
pub fn rasterize_max_oracle(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let dims = rng.random_range(2..=3);
        let w = rng.random_range(2..=8);
        let (batch, n, c) = (
            rng.random_range(1..=2),
            rng.random_range(1..=32),
            rng.random_range(1..=4),
        );
        let keys: Vec<f64> = (0..batch * n * dims)
            .map(|_| random_key(&mut rng, w))
            .collect();
        let values: Vec<f64> = (0..batch * n * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let kt = Tensor::new(&[batch, n, dims], keys.clone())?;
        let fp = Rc::new(make_footprint(&kt, w)?);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[batch, n, c], values.clone())?);
        let k = tape.leaf(kt);
        let grid = rasterize_max(&mut tape, v, k, &fp, true)?;
        if tape.value(grid.data).data()
            != brute_force_max(&keys, &values, batch, n, dims, w, c).as_slice()
        {
            mismatches += 1;
        }
    }
    Ok(OracleReport {
        instances,
        mismatches,
    })
}

/// Smallest mean matched distance over all `n!` assignments.
fn brute_force_emd(a: &[f64], b: &[f64]) -> f64 {
    fn permutations(
        k: usize,
        perm: &mut Vec<usize>,
        used: &mut [bool],
        visit: &mut impl FnMut(&[usize]),
    ) {
        if perm.len() == k {
            visit(perm);
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                permutations(k, perm, used, visit);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let n = a.len() / 3;
    let dist = |i: usize, j: usize| {
        (0..3)
            .map(|x| (a[3 * i + x] - b[3 * j + x]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = f64::INFINITY;
    permutations(n, &mut Vec::new(), &mut vec![false; n], &mut |perm| {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| dist(i, j)).sum();
        best = best.min(total / n as f64);
    });
    best
}

/// `emd_exact` against factorial enumeration for `n` cycling through 1..=6.
pub fn emd_oracle(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for trial in 0..instances {
        let n = 1 + trial % 6;
        let a: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::new(&[1, n, 3], a.clone())?);
        let bv = tape.leaf(Tensor::new(&[1, n, 3], b.clone())?);
        let d = emd_exact(&mut tape, av, bv)?;
        if tape.value(d).data()[0] != brute_force_emd(&a, &b) {
            mismatches += 1;
        }
    }
    Ok(OracleReport {
        instances,
        mismatches,
    })
}

/// Whether `rasterize_max` grids are bit-identical under random point
/// permutations.
pub fn rasterize_permutation_invariance(instances: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let dims = rng.random_range(2..=3);
        let w = rng.random_range(2..=8);
        let (n, c) = (rng.random_range(2..=32), rng.random_range(1..=4));
        let keys: Vec<f64> = (0..n * dims).map(|_| random_key(&mut rng, w)).collect();
        let values: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let gather = |src: &[f64], width: usize| -> Vec<f64> {
            perm.iter()
                .flat_map(|&i| src[i * width..(i + 1) * width].iter().copied())
                .collect()
        };
        let grid = |keys: Vec<f64>, values: Vec<f64>| -> Result<Tensor> {
            let kt = Tensor::new(&[1, n, dims], keys)?;
            let fp = Rc::new(make_footprint(&kt, w)?);
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(&[1, n, c], values)?);
            let k = tape.leaf(kt);
            let g = rasterize_max(&mut tape, v, k, &fp, true)?;
            Ok(tape.value(g.data).clone())
        };
        let (kp, vp) = (gather(&keys, dims), gather(&values, c));
        if grid(keys, values)? != grid(kp, vp)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Largest deviation of the desk segmenter and classifier from permutation
/// equivariance (per-point outputs) and invariance (class logits).
pub fn model_permutation_deviation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n) = (2, 48);
    let pc = PointCloudBatch::new(
        Tensor::from_fn(&[b, n, 3], |_| rng.random_range(-1.0..1.0)),
        Tensor::from_fn(&[b, n, 3], |_| rng.random_range(-1.0..1.0)),
    )?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let moved = pc.permuted(&perm);
    // reorders per-point rows of [B, N, k] the way `permuted` does
    let permute_points = |t: &Tensor| -> Result<Tensor> {
        Ok(PointCloudBatch::new(pc.positions.clone(), t.clone())?
            .permuted(&perm)
            .features)
    };
    let gap = |x: &Tensor, y: &Tensor| {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };

    let mut store = ParamStore::new();
    let seg = Segmenter::new(&mut store, &mut rng, &ModelConfig::desk(Task::Segment))?;
    let mut run_seg = |pc: &PointCloudBatch| -> Result<Tensor> {
        let mut fwd = Forward::new(&mut store, false);
        let out = seg.forward(&mut fwd, pc)?;
        Ok(fwd.value(out).clone())
    };
    let (base, after) = (run_seg(&pc)?, run_seg(&moved)?);
    let mut worst = gap(&permute_points(&base)?, &after);

    let mut store = ParamStore::new();
    let cls = Classifier::new(&mut store, &mut rng, &ModelConfig::desk(Task::Classify))?;
    let mut run_cls = |pc: &PointCloudBatch| -> Result<(Tensor, Tensor)> {
        let mut fwd = Forward::new(&mut store, false);
        let out = cls.forward(&mut fwd, pc)?;
        Ok((
            fwd.value(out.class_logits).clone(),
            fwd.value(out.fg_logits).clone(),
        ))
    };
    let ((class0, mask0), (class1, mask1)) = (run_cls(&pc)?, run_cls(&moved)?);
    worst = worst.max(gap(&class0, &class1));
    worst = worst.max(gap(&permute_points(&mask0)?, &mask1));
    Ok(worst)
}

/// Largest `|sum of footprint weights - 1|` over random keys, or infinity if
/// any weight leaves `[0, 1]`.
pub fn partition_of_unity_deviation(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dims = rng.random_range(2..=3);
        let w = rng.random_range(2..=64);
        let n = rng.random_range(1..=32);
        let keys = Tensor::from_fn(&[1, n, dims], |_| random_key(&mut rng, w));
        let fp = make_footprint(&keys, w)?;
        for p in 0..n {
            let weights = fp.point_weights(p);
            if weights.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((weights.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

/// A grid node index whose key `idx / (w - 1)` maps back to exactly `idx`.
fn exact_node(rng: &mut impl Rng, w: usize) -> f64 {
    loop {
        let idx = rng.random_range(0..w) as f64;
        let k = idx / (w - 1) as f64;
        if k * (w - 1) as f64 == idx {
            return k;
        }
    }
}

/// Whether `derasterize(rasterize_max(v))` returns `v` bit for bit for a single
/// point keyed on a grid node. Values are positive: the zero initializer
/// absorbs negative channels by design.
pub fn scatter_gather_round_trip(instances: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let dims = rng.random_range(2..=3);
        let w = rng.random_range(2..=8);
        let c = rng.random_range(1..=4);
        let keys = Tensor::from_fn(&[1, 1, dims], |_| exact_node(&mut rng, w));
        let values = Tensor::from_fn(&[1, 1, c], |_| rng.random_range(f64::MIN_POSITIVE..1.0));
        let fp = Rc::new(make_footprint(&keys, w)?);
        let mut tape = Tape::new();
        let v = tape.leaf(values.clone());
        let k = tape.leaf(keys);
        let grid = rasterize_max(&mut tape, v, k, &fp, true)?;
        let back = derasterize(&mut tape, &grid, k, &fp, true)?;
        if tape.value(back) != &values {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Whether an MHCT block with zeroed branch lifts passes features through
/// unchanged, in training and evaluation mode.
pub fn zeroed_mhct_is_identity(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = Mhct::new(&mut store, &mut rng, "block", &BlockConfig::desk())?;
    block.zero_branches(&mut store);
    let positions = Tensor::from_fn(&[2, 40, 3], |_| rng.random_range(-1.0..1.0));
    let features = Tensor::from_fn(&[2, 40, 64], |_| rng.random_range(-1.0..1.0));
    for train in [true, false] {
        let mut fwd = Forward::new(&mut store, train);
        let cloud = Cloud {
            positions: fwd.input(positions.clone()),
            features: fwd.input(features.clone()),
        };
        let out = block.forward(&mut fwd, cloud, None)?;
        if fwd.value(out.features) != &features {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_max_hand_case() {
        // w=3, key (0.25, 0.5): u = (0.5, 1.0), weights 0.5 on cells (0,1) and (1,1)
        let grid = brute_force_max(&[0.25, 0.5], &[2.0], 1, 1, 2, 3, 1);
        let mut expect = vec![0.0; 9];
        expect[1] = 1.0;
        expect[4] = 1.0;
        assert_eq!(grid, expect);
    }

    #[test]
    fn brute_force_emd_hand_case() {
        let a = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(brute_force_emd(&a, &b), 0.0);
        let c = [0.0, 3.0, 4.0, 1.0, 0.0, 0.0];
        assert_eq!(brute_force_emd(&a, &c), 2.5);
    }

    #[test]
    fn exact_nodes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for w in 2..50 {
            let k = exact_node(&mut rng, w);
            assert_eq!((k * (w - 1) as f64).fract(), 0.0);
        }
    }
}
