//! Gradient-check suite, lemma verification, depth stability and ablations.

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::train::run_training;
use cloud_transform::blocks::{BlockConfig, CloudPool, Head, Mhct, PoolConfig, PoolHeadConfig};
use cloud_transform::gradcheck::{
    check_params, check_tape_fn, GradCheckOptions, GradCheckReport, REL_TOLERANCE,
};
use cloud_transform::gridnn::{avg_pool_global, conv_same, max_pool, Norm, NormKind, ResBlock};
use cloud_transform::losses::{chamfer, cross_entropy, emd_exact};
use cloud_transform::models::{
    classifier_loss, sample_sphere, Classifier, Generator, Inpainter, ModelConfig, Segmenter, Task,
};
use cloud_transform::raster::{
    balance_key_gradient, compute_keys, derasterize, key_jacobian_check, make_footprint, rasterize,
    verify_lemma2, Aggregation, Cloud, GridMap, KeyMode, KeyParams, Lemma2Report, PointCloudBatch,
};
use cloud_transform::{Forward, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

type CoreResult<T> = cloud_transform::Result<T>;

/// Finite-difference step of the suite.
pub const FD_STEP: f64 = 1e-6;
/// Samples whose smallest kink margin is below this are redrawn: a step
/// that crosses a kink mixes the slopes on both sides.
pub const TIE_MARGIN: f64 = 10.0 * FD_STEP;
pub const MAX_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            other => Err(HarnessError::Usage(format!(
                "unknown gradcheck scope {other:?} (op|block|model)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub scope: Scope,
    pub max_rel_error: f64,
    pub worst_target: String,
    pub entries: usize,
    pub retries: usize,
    pub kink_margin: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckSuite {
    pub cases: Vec<CaseResult>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>6} {:>11} {:>8} {:>7}  {}\n",
            "case", "scope", "max_rel", "entries", "retries", "worst"
        );
        for c in &self.cases {
            s.push_str(&format!(
                "{:<28} {:>6} {:>11.3e} {:>8} {:>7}  {}{}\n",
                c.name,
                format!("{:?}", c.scope).to_lowercase(),
                c.max_rel_error,
                c.entries,
                c.retries,
                c.worst_target,
                if c.passed { "" } else { "  FAIL" }
            ));
        }
        s
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> CoreResult<GradCheckReport>;

/// Every gradient-check case with its scope.
pub fn gradcheck_cases() -> Vec<(&'static str, Scope, CaseFn)> {
    vec![
        ("tensor.elementwise", Scope::Op, case_elementwise),
        ("tensor.broadcast", Scope::Op, case_broadcast),
        ("tensor.linear", Scope::Op, case_linear),
        ("tensor.reduce_reshape", Scope::Op, case_reduce_reshape),
        ("compute_keys.residual", Scope::Op, |r| {
            case_keys(r, KeyMode::ResidualRigid, 3, true)
        }),
        ("compute_keys.linear", Scope::Op, |r| {
            case_keys(r, KeyMode::Linear, 2, false)
        }),
        ("compute_keys.fixed", Scope::Op, |r| {
            case_keys(r, KeyMode::FixedRandom, 3, false)
        }),
        ("rasterize_max.2d", Scope::Op, |r| {
            case_rasterize(r, Aggregation::Max, 2)
        }),
        ("rasterize_max.3d", Scope::Op, |r| {
            case_rasterize(r, Aggregation::Max, 3)
        }),
        ("rasterize_sum.2d", Scope::Op, |r| {
            case_rasterize(r, Aggregation::Sum, 2)
        }),
        ("rasterize_sum.3d", Scope::Op, |r| {
            case_rasterize(r, Aggregation::Sum, 3)
        }),
        ("rasterize_mean.2d", Scope::Op, |r| {
            case_rasterize(r, Aggregation::Mean, 2)
        }),
        ("rasterize_mean.3d", Scope::Op, |r| {
            case_rasterize(r, Aggregation::Mean, 3)
        }),
        ("derasterize.2d", Scope::Op, |r| case_derasterize(r, 2)),
        ("derasterize.3d", Scope::Op, |r| case_derasterize(r, 3)),
        ("conv_same.2d", Scope::Op, |r| case_conv(r, 2)),
        ("conv_same.3d", Scope::Op, |r| case_conv(r, 3)),
        ("norm.batch", Scope::Op, |r| case_norm(r, NormKind::Batch)),
        ("norm.instance", Scope::Op, |r| {
            case_norm(r, NormKind::Instance)
        }),
        ("norm.adaptive_instance", Scope::Op, |r| {
            case_norm(r, NormKind::AdaptiveInstance)
        }),
        ("pool.max_and_average", Scope::Op, case_pooling),
        ("pool.mini_cnn", Scope::Op, case_mini_cnn),
        ("loss.chamfer", Scope::Op, case_chamfer),
        ("loss.emd_exact", Scope::Op, case_emd),
        ("loss.cross_entropy", Scope::Op, case_cross_entropy),
        ("cloud_transform", Scope::Block, case_cloud_transform),
        ("mhct", Scope::Block, case_mhct),
        ("mh_cloud_pool", Scope::Block, case_cloud_pool),
        ("segmenter", Scope::Model, case_segmenter),
        ("classifier", Scope::Model, case_classifier),
        ("generator", Scope::Model, case_generator),
        ("inpainter", Scope::Model, case_inpainter),
    ]
}

/// Runs the cases in `scopes` (all when empty) whose name contains `filter`.
/// Samples with a kink closer than [`TIE_MARGIN`] are redrawn up to
/// [`MAX_RETRIES`] times; a case that never finds a clean sample fails.
pub fn run_gradcheck(scopes: &[Scope], filter: Option<&str>, seed: u64) -> Result<GradCheckSuite> {
    let mut suite = GradCheckSuite::default();
    for (k, (name, scope, case)) in gradcheck_cases().into_iter().enumerate() {
        if (!scopes.is_empty() && !scopes.contains(&scope))
            || filter.is_some_and(|f| !name.contains(f))
        {
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let mut retries = 0;
        let report = loop {
            let report = case(&mut rng)?;
            if report.kink_margin >= TIE_MARGIN || retries == MAX_RETRIES {
                break report;
            }
            retries += 1;
        };
        let clean = report.kink_margin >= TIE_MARGIN;
        suite.cases.push(CaseResult {
            name,
            scope,
            max_rel_error: report.max_rel_error(),
            worst_target: report.worst().map(|t| t.name.clone()).unwrap_or_default(),
            entries: report.targets.iter().map(|t| t.checked).sum(),
            retries,
            kink_margin: report.kink_margin,
            passed: clean && report.max_rel_error() < REL_TOLERANCE,
        });
    }
    Ok(suite)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(v * r)` for a fixed random `r`, so every output entry matters.
fn project_tape(tape: &mut Tape, v: Var, weights: &Tensor) -> CoreResult<Var> {
    let r = tape.constant(weights.clone());
    let m = tape.mul(v, r)?;
    tape.sum(m)
}

fn project(fwd: &mut Forward<'_>, v: Var, seed: u64) -> CoreResult<Var> {
    let shape = fwd.value(v).shape().to_vec();
    let weights = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    project_tape(&mut fwd.tape, v, &weights)
}

fn opts(max_entries: usize) -> GradCheckOptions {
    GradCheckOptions {
        max_entries,
        step: FD_STEP,
    }
}

/// Registers a random input tensor as a trainable parameter so that its
/// gradient is checked too.
fn input_param(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: &[usize]) -> ParamId {
    store.add(
        format!("input.{name}"),
        uniform(rng, shape, -1.0, 1.0),
        true,
    )
}

fn cloud_params(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    b: usize,
    n: usize,
    f: usize,
) -> (ParamId, ParamId) {
    (
        input_param(store, rng, "positions", &[b, n, 3]),
        input_param(store, rng, "features", &[b, n, f]),
    )
}

fn cloud_of(fwd: &mut Forward<'_>, ids: (ParamId, ParamId)) -> Cloud {
    Cloud {
        positions: fwd.param(ids.0),
        features: fwd.param(ids.1),
    }
}

fn random_batch(rng: &mut impl Rng, b: usize, n: usize, f: usize) -> PointCloudBatch {
    PointCloudBatch::new(
        uniform(rng, &[b, n, 3], -1.0, 1.0),
        uniform(rng, &[b, n, f], -1.0, 1.0),
    )
    .expect("batch shape")
}

fn case_elementwise(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let inputs = [
        uniform(rng, &[3, 4], -1.0, 1.0),
        uniform(rng, &[3, 4], -1.0, 1.0),
    ];
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        let a = t.tanh(v[0])?;
        let b = t.sigmoid(v[1])?;
        let ab = t.mul(a, b)?;
        let s = t.scale(v[0], 0.3)?;
        let e = t.exp(s)?;
        let r = t.relu(v[1])?;
        let sum = t.add(ab, e)?;
        let out = t.sub(sum, r)?;
        project_tape(t, out, &w)
    })
}

fn case_broadcast(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let inputs = [
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[4], -1.0, 1.0),
        uniform(rng, &[4], -1.0, 1.0),
        uniform(rng, &[2, 4], -1.0, 1.0),
    ];
    let w = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        let x = t.add_bias(v[0], v[1])?;
        let x = t.mul_cols(x, v[2])?;
        let y = t.expand_points(v[3], 3)?;
        let out = t.add(x, y)?;
        project_tape(t, out, &w)
    })
}

fn case_linear(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let inputs = [
        uniform(rng, &[3, 4], -1.0, 1.0),
        uniform(rng, &[4, 5], -1.0, 1.0),
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[5], -1.0, 1.0),
    ];
    let (w1, w2) = (
        uniform(rng, &[3, 5], -1.0, 1.0),
        uniform(rng, &[2, 3, 5], -1.0, 1.0),
    );
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let a = t.affine(v[2], v[1], Some(v[3]))?;
        let pm = project_tape(t, m, &w1)?;
        let pa = project_tape(t, a, &w2)?;
        t.add(pm, pa)
    })
}

fn case_reduce_reshape(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let inputs = [
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[2, 3, 2], -1.0, 1.0),
    ];
    let (w_max, w_cat) = (
        uniform(rng, &[2, 3], -1.0, 1.0),
        uniform(rng, &[6, 4], -1.0, 1.0),
    );
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        let mx = t.max_last(v[0])?;
        let pm = project_tape(t, mx, &w_max)?;
        let cat = t.concat(&[v[0], v[1]])?;
        let part = t.slice_last(cat, 2, 6)?;
        let flat = t.reshape(part, &[6, 4])?;
        let pc = project_tape(t, flat, &w_cat)?;
        let mean = t.mean(v[1])?;
        let s = t.add(pm, pc)?;
        let s = t.add(s, mean)?;
        let total = t.sum(v[0])?;
        let total = t.scale(total, 0.1)?;
        t.add(s, total)
    })
}

fn case_keys(
    rng: &mut ChaCha8Rng,
    mode: KeyMode,
    dims: usize,
    anisotropic: bool,
) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let ids = cloud_params(&mut store, rng, 2, 6, 4);
    let kp = KeyParams::new(&mut store, rng, "keys", mode, 4, anisotropic);
    check_params(&mut store, &opts(usize::MAX), |fwd| {
        let cloud = cloud_of(fwd, ids);
        let k = compute_keys(fwd, cloud, &kp, dims)?;
        project(fwd, k, 1)
    })
}

fn case_rasterize(
    rng: &mut ChaCha8Rng,
    agg: Aggregation,
    dims: usize,
) -> CoreResult<GradCheckReport> {
    let (n, c, w) = (16, 3, if dims == 2 { 8 } else { 4 });
    let inputs = [
        uniform(rng, &[1, n, c], -1.0, 1.0),
        uniform(rng, &[1, n, dims], 0.02, 0.98),
    ];
    let weights = uniform(rng, &GridMap::grid_shape(1, dims, w, c), -1.0, 1.0);
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        let fp = Rc::new(make_footprint(t.value(v[1]), w)?);
        let grid = rasterize(t, v[0], v[1], &fp, agg, false)?;
        project_tape(t, grid.data, &weights)
    })
}

fn case_derasterize(rng: &mut ChaCha8Rng, dims: usize) -> CoreResult<GradCheckReport> {
    let (n, c, w) = (12, 3, if dims == 2 { 8 } else { 4 });
    let inputs = [
        uniform(rng, &GridMap::grid_shape(1, dims, w, c), -1.0, 1.0),
        uniform(rng, &[1, n, dims], 0.02, 0.98),
    ];
    let weights = uniform(rng, &[1, n, c], -1.0, 1.0);
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        let fp = Rc::new(make_footprint(t.value(v[1]), w)?);
        let grid = GridMap {
            dims,
            w,
            c,
            batch: 1,
            data: v[0],
            argmax: None,
        };
        let out = derasterize(t, &grid, v[1], &fp, false)?;
        project_tape(t, out, &weights)
    })
}

fn case_conv(rng: &mut ChaCha8Rng, dims: usize) -> CoreResult<GradCheckReport> {
    let (w, c_in, c_out, k) = (4, 2, 3, 3usize);
    let inputs = [
        uniform(rng, &GridMap::grid_shape(2, dims, w, c_in), -1.0, 1.0),
        uniform(rng, &[k.pow(dims as u32), c_in, c_out], -1.0, 1.0),
        uniform(rng, &[c_out], -1.0, 1.0),
    ];
    let weights = uniform(rng, &GridMap::grid_shape(2, dims, w, c_out), -1.0, 1.0);
    check_tape_fn(&inputs, &opts(64), |t, v| {
        let grid = GridMap {
            dims,
            w,
            c: c_in,
            batch: 2,
            data: v[0],
            argmax: None,
        };
        let out = conv_same(t, &grid, v[1], v[2], k)?;
        project_tape(t, out.data, &weights)
    })
}

fn case_norm(rng: &mut ChaCha8Rng, kind: NormKind) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let c = 3;
    let x = input_param(&mut store, rng, "x", &[2, 6, c]);
    let style_dim = (kind == NormKind::AdaptiveInstance).then_some(4);
    let style = style_dim.map(|s| input_param(&mut store, rng, "style", &[2, s]));
    let norm = Norm::new(&mut store, rng, "norm", kind, c, style_dim);
    // non-trivial scale and shift
    for id in store.ids().collect::<Vec<_>>() {
        let name = &store.get(id).name;
        if (name.ends_with(".scale") || name.ends_with(".shift")) && store.value(id).shape() == [c]
        {
            *store.value_mut(id) = uniform(rng, &[c], 0.5, 1.5);
        }
    }
    check_params(&mut store, &opts(usize::MAX), |fwd| {
        let xv = fwd.param(x);
        let s = style.map(|id| fwd.param(id));
        let y = norm.forward(fwd, xv, s)?;
        project(fwd, y, 2)
    })
}

fn grid_param(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    dims: usize,
    w: usize,
    c: usize,
) -> ParamId {
    input_param(
        store,
        rng,
        &format!("grid{dims}d"),
        &GridMap::grid_shape(2, dims, w, c),
    )
}

fn grid_of(fwd: &mut Forward<'_>, id: ParamId, dims: usize, w: usize, c: usize) -> GridMap {
    GridMap {
        dims,
        w,
        c,
        batch: 2,
        data: fwd.param(id),
        argmax: None,
    }
}

fn case_pooling(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let (g2, g3) = (
        grid_param(&mut store, rng, 2, 6, 2),
        grid_param(&mut store, rng, 3, 4, 2),
    );
    check_params(&mut store, &opts(usize::MAX), |fwd| {
        let a = grid_of(fwd, g2, 2, 6, 2);
        let pa = max_pool(&mut fwd.tape, &a)?;
        let b = grid_of(fwd, g3, 3, 4, 2);
        let pb = max_pool(&mut fwd.tape, &b)?;
        let avg = avg_pool_global(&mut fwd.tape, &pb)?;
        let x = project(fwd, pa.data, 3)?;
        let y = project(fwd, avg, 4)?;
        fwd.tape.add(x, y)
    })
}

fn case_mini_cnn(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let g = grid_param(&mut store, rng, 2, 8, 2);
    let res = [
        ResBlock::new(&mut store, rng, "res0", 2, 2, 2),
        ResBlock::new(&mut store, rng, "res1", 2, 2, 3),
        ResBlock::new(&mut store, rng, "res2", 2, 3, 3),
    ];
    check_params(&mut store, &opts(24), |fwd| {
        let grid = grid_of(fwd, g, 2, 8, 2);
        let out = cloud_transform::blocks::mini_cnn(fwd, &res, grid)?;
        project(fwd, out, 5)
    })
}

fn case_chamfer(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let inputs = [
        uniform(rng, &[2, 7, 3], -1.0, 1.0),
        uniform(rng, &[2, 5, 3], -1.0, 1.0),
    ];
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| chamfer(t, v[0], v[1]))
}

fn case_emd(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let inputs = [
        uniform(rng, &[2, 6, 3], -1.0, 1.0),
        uniform(rng, &[2, 6, 3], -1.0, 1.0),
    ];
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| emd_exact(t, v[0], v[1]))
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let inputs = [uniform(rng, &[2, 3, 4], -2.0, 2.0)];
    check_tape_fn(&inputs, &opts(usize::MAX), |t, v| {
        cross_entropy(t, v[0], &labels, None)
    })
}

fn unbalanced(mut cfg: BlockConfig) -> BlockConfig {
    cfg.gradient_balancing = false;
    cfg
}

fn case_cloud_transform(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let cfg = unbalanced(BlockConfig::mixed(6, 1, 8, 3, 0, 0, 0));
    let ids = cloud_params(&mut store, rng, 1, 12, 6);
    let head = Head::new(&mut store, rng, "head", &cfg.heads[0], &cfg);
    check_params(&mut store, &opts(16), |fwd| {
        let cloud = cloud_of(fwd, ids);
        let out = head.forward(fwd, cloud, None)?;
        project(fwd, out.values, 6)
    })
}

fn case_mhct(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let cfg = unbalanced(BlockConfig::mixed(4, 2, 4, 3, 1, 4, 2));
    let ids = cloud_params(&mut store, rng, 2, 8, 4);
    let block = Mhct::new(&mut store, rng, "block", &cfg)?;
    check_params(&mut store, &opts(8), |fwd| {
        let cloud = cloud_of(fwd, ids);
        let out = block.forward(fwd, cloud, None)?;
        project(fwd, out.features, 7)
    })
}

fn tiny_pool(g: usize, class_dim: usize) -> PoolConfig {
    let mut h2 = PoolHeadConfig::new(2, 8, 2);
    h2.widths = [2, 2, 2];
    let mut h3 = PoolHeadConfig::new(3, 8, 2);
    h3.widths = [2, 2, 2];
    PoolConfig {
        heads: vec![h2, h3],
        g,
        class_dim,
        gradient_balancing: false,
    }
}

fn case_cloud_pool(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let ids = cloud_params(&mut store, rng, 2, 16, 4);
    let pool = CloudPool::new(&mut store, rng, "pool", &tiny_pool(4, 3))?;
    check_params(&mut store, &opts(8), |fwd| {
        let cloud = cloud_of(fwd, ids);
        let out = pool.forward(fwd, cloud)?;
        project(fwd, out, 8)
    })
}

fn tiny_model(task: Task) -> ModelConfig {
    let mut cfg = ModelConfig::desk(task);
    cfg.block = unbalanced(BlockConfig::mixed(6, 1, 4, 3, 1, 4, 2));
    cfg.hidden = 5;
    cfg.style_dim = 3;
    cfg.out_points = 8;
    if task == Task::Generate {
        cfg.block = cfg.block.adaptive(3);
    }
    if cfg.pool.is_some() {
        cfg.pool = Some(tiny_pool(6, if task == Task::Inpaint { 3 } else { 4 }));
    }
    cfg
}

fn case_segmenter(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let model = Segmenter::new(&mut store, rng, &tiny_model(Task::Segment))?;
    let pc = random_batch(rng, 2, 8, 3);
    let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..2)).collect();
    check_params(&mut store, &opts(4), |fwd| {
        let logits = model.forward(fwd, &pc)?;
        cross_entropy(&mut fwd.tape, logits, &labels, None)
    })
}

fn case_classifier(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let model = Classifier::new(&mut store, rng, &tiny_model(Task::Classify))?;
    let pc = random_batch(rng, 2, 16, 3);
    let mask: Vec<u8> = (0..32).map(|_| rng.random_range(0..2)).collect();
    check_params(&mut store, &opts(4), |fwd| {
        let out = model.forward(fwd, &pc)?;
        classifier_loss(fwd, &out, &[0, 2], &mask)
    })
}

fn case_generator(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let cfg = tiny_model(Task::Generate);
    let model = Generator::new(&mut store, rng, "gen", &cfg, 3)?;
    let style = uniform(rng, &[2, 3], -1.0, 1.0);
    let sphere = sample_sphere(rng, 8);
    let target = uniform(rng, &[2, 8, 3], -0.5, 0.5);
    check_params(&mut store, &opts(4), |fwd| {
        let s = fwd.input(style.clone());
        let out = model.forward(fwd, s, &sphere)?;
        let t = fwd.input(target.clone());
        emd_exact(&mut fwd.tape, out, t)
    })
}

fn case_inpainter(rng: &mut ChaCha8Rng) -> CoreResult<GradCheckReport> {
    let mut store = ParamStore::new();
    let model = Inpainter::new(&mut store, rng, &tiny_model(Task::Inpaint))?;
    let partial = uniform(rng, &[2, 10, 3], -1.0, 1.0);
    let sphere = sample_sphere(rng, 6);
    let target = uniform(rng, &[2, 16, 3], -0.5, 0.5);
    check_params(&mut store, &opts(3), |fwd| {
        let out = model.forward(fwd, &partial, &sphere)?;
        let t = fwd.input(target.clone());
        chamfer(&mut fwd.tape, out, t)
    })
}

/// Results of the analytic lemma checks.
#[derive(Clone, Debug)]
pub struct LemmaReport {
    pub lemma2: Lemma2Report,
    /// `(w, max |FD Jacobian - (w-1) D|)` over random keys.
    pub jacobian: Vec<(usize, f64)>,
    /// `(w, balanced / raw)` of a unit key cotangent.
    pub balancing: Vec<(usize, f64)>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.lemma2.passed()
            && self.jacobian.iter().all(|&(_, e)| e < 1e-6)
            && self.balancing.iter().all(|&(w, r)| r == 1.0 / w as f64)
    }
}

pub fn run_verify_lemma(samples: usize, seed: u64) -> Result<LemmaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lemma2 = verify_lemma2(samples, &mut rng);
    let mut jacobian = Vec::new();
    let mut balancing = Vec::new();
    for w in [4usize, 16, 64] {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            // keep the finite-difference stencil inside one cell
            let key = loop {
                let k = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                let inside = k.iter().all(|&v| {
                    let u = v * (w - 1) as f64;
                    (u - u.round()).abs() > 1e-4
                });
                if inside {
                    break k;
                }
            };
            worst = worst.max(key_jacobian_check(key, w)?);
        }
        jacobian.push((w, worst));
        let mut g = [1.0, -1.0];
        balance_key_gradient(&mut g, w);
        balancing.push((w, g[0]));
    }
    Ok(LemmaReport {
        lemma2,
        jacobian,
        balancing,
    })
}

/// Per-layer RMS of the key-path gradient in a chain of cloud transforms.
#[derive(Clone, Debug)]
pub struct DepthReport {
    pub w: usize,
    pub balancing: bool,
    /// Layer 0 is nearest the input.
    pub rms: Vec<f64>,
}

impl DepthReport {
    /// `rms[l] / rms[l + 1]`: growth of the gradient over one layer of the
    /// backward pass.
    pub fn ratios(&self) -> Vec<f64> {
        self.rms.windows(2).map(|p| p[0] / p[1]).collect()
    }

    /// First-layer RMS over last-layer RMS.
    pub fn cumulative(&self) -> f64 {
        self.rms[0] / self.rms[self.rms.len() - 1]
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "w = {}, balancing = {}\nlayer  key_grad_rms   ratio\n",
            self.w, self.balancing
        );
        let ratios = self.ratios();
        for (l, r) in self.rms.iter().enumerate() {
            let ratio = ratios
                .get(l)
                .map_or(String::from("-"), |x| format!("{x:.3}"));
            s.push_str(&format!("{l:>5}  {r:>12.4e}  {ratio:>6}\n"));
        }
        s.push_str(&format!(
            "cumulative first/last = {:.4e}\n",
            self.cumulative()
        ));
        s
    }
}

/// Builds `depth` chained single-head cloud transforms (2D grids of size
/// `w`), back-propagates a random projection of the last output and records
/// the RMS of the gradient reaching each layer's keys.
pub fn run_depth_stability(
    depth: usize,
    w: usize,
    balancing: bool,
    seed: u64,
) -> Result<DepthReport> {
    if depth == 0 {
        return Err(HarnessError::Usage("depth must be >= 1".into()));
    }
    let (g, n) = (8, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cfg = BlockConfig::mixed(g, 1, w, g, 0, 0, 0);
    cfg.gradient_balancing = balancing;
    let heads: Vec<Head> = (0..depth)
        .map(|l| {
            Head::new(
                &mut store,
                &mut rng,
                &format!("layer{l}"),
                &cfg.heads[0],
                &cfg,
            )
        })
        .collect();
    let pc = random_batch(&mut rng, 1, n, g);
    let mut fwd = Forward::new(&mut store, true);
    let positions = fwd.input(pc.positions.clone());
    let mut features = fwd.input(pc.features.clone());
    let mut keys = Vec::with_capacity(depth);
    for head in &heads {
        let out = head.forward(
            &mut fwd,
            Cloud {
                positions,
                features,
            },
            None,
        )?;
        keys.push(out.keys);
        features = out.values;
    }
    let loss = project(&mut fwd, features, seed ^ 0xfeed)?;
    let grads = fwd.backward(loss)?;
    let rms = keys
        .iter()
        .map(|&k| {
            let g = grads.node(k).unwrap_or(&[]);
            if g.is_empty() {
                0.0
            } else {
                (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt()
            }
        })
        .collect();
    Ok(DepthReport { w, balancing, rms })
}

/// One ablation variant: a label and the change it makes to the base run.
pub fn ablation_variant(name: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match name {
        "max" => cfg.aggregation = Aggregation::Max,
        "sum" => cfg.aggregation = Aggregation::Sum,
        "mean" => cfg.aggregation = Aggregation::Mean,
        "linear-keys" => cfg.key_mode = KeyMode::Linear,
        "fixed-keys" => cfg.key_mode = KeyMode::FixedRandom,
        "one-head" => {
            cfg.heads_2d = 1;
            cfg.heads_3d = 0;
        }
        "no-balancing" => cfg.gradient_balancing = false,
        other => {
            return Err(HarnessError::Usage(format!(
                "unknown ablation variant {other:?}"
            )))
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    /// Test-split value of the task's headline metric per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// The metric ablations compare: accuracy for recognition tasks, negated
/// Chamfer distance for generation (so that higher is better throughout).
pub fn headline_metric(task: Task, m: &crate::train::Metrics) -> f64 {
    match task {
        Task::Segment | Task::Classify => m["accuracy"],
        Task::Generate | Task::Inpaint => -m["chamfer"],
    }
}

/// Trains every variant for every seed and returns rows sorted by mean
/// metric, best first (ties keep suite order).
pub fn run_ablation(
    variants: &[&str],
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let cfg = ablation_variant(v, base)?;
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            run.out_dir = base
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("{v}-seed{seed}")));
            let report = run_training(&run)?;
            per_seed.push(headline_metric(run.task, &report.test));
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow {
            variant: v.to_string(),
            per_seed,
            mean,
        });
    }
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<14} {:>10}  per-seed\n", "variant", "mean");
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&format!(
            "{:<14} {:>10.4}  {}\n",
            r.variant,
            r.mean,
            seeds.join(" ")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_cases_pass() {
        let suite = run_gradcheck(&[Scope::Op], Some("tensor"), 0).unwrap();
        assert_eq!(suite.cases.len(), 4);
        assert!(suite.passed(), "{}", suite.table());
    }

    #[test]
    fn scope_and_filter_select_cases() {
        let names: Vec<_> = gradcheck_cases().iter().map(|c| c.0).collect();
        let mut unique = names.clone();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        let suite = run_gradcheck(&[Scope::Op], Some("no-such-case"), 0).unwrap();
        assert!(suite.cases.is_empty() && !suite.passed());
        assert!("tape".parse::<Scope>().is_err());
    }

    #[test]
    fn lemma_report_passes() {
        let r = run_verify_lemma(200, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(
            r.balancing,
            vec![(4, 0.25), (16, 1.0 / 16.0), (64, 1.0 / 64.0)]
        );
    }

    #[test]
    fn single_layer_chain_has_one_row() {
        let r = run_depth_stability(1, 8, true, 0).unwrap();
        assert_eq!(r.rms.len(), 1);
        assert!(r.ratios().is_empty());
        assert_eq!(r.cumulative(), 1.0);
        assert!(run_depth_stability(0, 8, true, 0).is_err());
    }

    #[test]
    fn unknown_variant_rejected() {
        let base = TrainConfig::desk(Task::Segment);
        assert!(ablation_variant("median", &base).is_err());
        assert_eq!(
            ablation_variant("sum", &base).unwrap().aggregation,
            Aggregation::Sum
        );
    }
}
