//! Numerical confirmation of the singular-value structure of the bilinear
//! Jacobian factor `D` and the variance bound it implies.

use nalgebra::{Matrix2, Matrix4, SMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

type Mat42 = SMatrix<f64, 4, 2>;

#[derive(Clone, Debug, Default)]
pub struct Lemma2Report {
    pub samples: usize,
    /// Max |numeric - closed form| over both nonzero singular values.
    pub max_singular_deviation: f64,
    /// Largest singular value of the null-space part (should be ~0).
    pub max_residual_singular: f64,
    /// min over samples of ‖D V Dᵀ‖₂ / ‖V‖₂.
    pub min_bound_ratio: f64,
    /// (a, b) pairs whose singular values deviate by more than the tolerance
    /// or violate the one-half bound.
    pub violations: Vec<(f64, f64)>,
}

impl Lemma2Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.samples > 0
    }
}

/// `D` in the (a, b) parameterisation with `a, b ∈ [-1, 0]`.
pub fn d_from_ab(a: f64, b: f64) -> Mat42 {
    Mat42::new(a, b, -(1.0 + a), -b, -a, -(1.0 + b), 1.0 + a, 1.0 + b)
}

/// Closed-form nonzero singular values of `D Dᵀ`, descending.
pub fn closed_form_singular_values(a: f64, b: f64) -> [f64; 2] {
    let s1 = (2.0 * a + 1.0).powi(2) + (2.0 * b + 1.0).powi(2) + 1.0;
    [s1, 1.0]
}

/// Numerical singular values of `D Dᵀ`, descending.
pub fn numeric_singular_values(a: f64, b: f64) -> [f64; 4] {
    let d = d_from_ab(a, b);
    let ddt: Matrix4<f64> = d * d.transpose();
    let mut sv: Vec<f64> = ddt.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    [sv[0], sv[1], sv[2], sv[3]]
}

/// Draws `samples` pairs `(a, b)` uniformly from `[-1, 0]²` plus as many
/// random PSD 2x2 matrices `V`, and checks both claims with tolerance `1e-9`
/// on the singular values.
pub fn verify_lemma2(samples: usize, rng: &mut impl Rng) -> Lemma2Report {
    const TOL: f64 = 1e-9;
    let mut report = Lemma2Report {
        samples,
        min_bound_ratio: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..samples {
        let a: f64 = rng.random_range(-1.0..=0.0);
        let b: f64 = rng.random_range(-1.0..=0.0);
        let numeric = numeric_singular_values(a, b);
        let closed = closed_form_singular_values(a, b);
        let dev = (numeric[0] - closed[0])
            .abs()
            .max((numeric[1] - closed[1]).abs());
        let resid = numeric[2].abs().max(numeric[3].abs());
        report.max_singular_deviation = report.max_singular_deviation.max(dev);
        report.max_residual_singular = report.max_residual_singular.max(resid);

        let m = Matrix2::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let v = m * m.transpose();
        let d = d_from_ab(a, b);
        let lhs = spectral_norm4(&(d * v * d.transpose()));
        let rhs = v.singular_values().max();
        let ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
        report.min_bound_ratio = report.min_bound_ratio.min(ratio);
        if dev > TOL || resid > TOL || ratio < 0.5 {
            report.violations.push((a, b));
        }
    }
    report
}

fn spectral_norm4(m: &Matrix4<f64>) -> f64 {
    m.singular_values().max()
}
