//! Central finite-difference checks against the tape's analytic gradients.

use crate::error::Result;
use crate::params::{Forward, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step for the central difference.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the max relative error.
pub const REL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct TargetError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub targets: Vec<TargetError>,
    /// Smallest kink margin seen in the unperturbed forward pass.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.targets
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < REL_TOLERANCE
    }

    pub fn worst(&self) -> Option<&TargetError> {
        self.targets
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on probed entries per tensor; larger tensors are probed on
    /// an evenly strided subset.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            max_entries: usize::MAX,
        }
    }
}

/// Element-wise relative error. Entries whose magnitude is negligible next to
/// the rest of the gradient are compared against a floor instead of their own
/// magnitude, so cancellation noise in near-zero entries is not amplified.
pub fn relative_errors(pairs: &[(f64, f64)], floor: f64) -> f64 {
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn probe_indices(len: usize, max_entries: usize) -> Vec<usize> {
    if len <= max_entries {
        return (0..len).collect();
    }
    let stride = len as f64 / max_entries as f64;
    (0..max_entries)
        .map(|k| (k as f64 * stride) as usize)
        .collect()
}

fn summarize(raw: Vec<(String, Vec<(f64, f64)>)>, kink_margin: f64) -> GradCheckReport {
    let global = raw
        .iter()
        .flat_map(|(_, p)| p.iter().map(|(a, _)| a.abs()))
        .fold(0.0, f64::max);
    let targets = raw
        .into_iter()
        .map(|(name, pairs)| {
            let local = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
            // entries below 1e-4 of the largest gradient are compared in
            // absolute terms; finite differences cannot resolve them better
            let floor = (1e-3 * local).max(1e-4 * global).max(1e-9);
            TargetError {
                max_rel_error: relative_errors(&pairs, floor),
                checked: pairs.len(),
                name,
            }
        })
        .collect();
    GradCheckReport {
        targets,
        kink_margin,
    }
}

/// Checks every trainable parameter of `store` against finite differences of
/// the scalar produced by `f`. Inputs that should be checked too must be
/// registered in the store as trainable parameters.
pub fn check_params<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<'_>) -> Result<Var>,
{
    let (analytic, kink_margin) = {
        let mut fwd = Forward::new(store, true);
        let loss = f(&mut fwd)?;
        let grads = fwd.backward(loss)?;
        let margin = fwd.tape.kink_margin();
        let per: Vec<Option<Vec<f64>>> = fwd
            .store()
            .ids()
            .map(|id| grads.get(id).map(|g| g.to_vec()))
            .collect();
        (per, margin)
    };
    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let mut fwd = Forward::new(store, true);
        let loss = f(&mut fwd)?;
        Ok(fwd.value(loss).item())
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let mut raw = Vec::new();
    for id in ids {
        let len = store.value(id).len();
        let grad = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| vec![0.0; len]);
        let mut pairs = Vec::new();
        for i in probe_indices(len, opts.max_entries) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            pairs.push((grad[i], (up - down) / (2.0 * opts.step)));
        }
        raw.push((store.get(id).name.clone(), pairs));
    }
    Ok(summarize(raw, kink_margin))
}

/// Checks a function built directly on a tape with the given leaf inputs.
pub fn check_tape_fn<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs)?;
    let grads = tape.backward(out)?;
    let mut work = inputs.to_vec();
    let mut raw = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.tensor(*v);
        let mut pairs = Vec::new();
        for i in probe_indices(work[k].len(), opts.max_entries) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let (t, _, o) = run(&work)?;
            let up = t.value(o).item();
            work[k].data_mut()[i] = orig - opts.step;
            let (t, _, o) = run(&work)?;
            let down = t.value(o).item();
            work[k].data_mut()[i] = orig;
            pairs.push((g.data()[i], (up - down) / (2.0 * opts.step)));
        }
        raw.push((format!("input{k}"), pairs));
    }
    Ok(summarize(raw, tape.kink_margin()))
}
