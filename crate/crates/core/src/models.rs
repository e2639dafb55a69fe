//! Task models: per-point segmentation, shape classification with a
//! foreground mask, style-conditioned generation, and point cloud completion.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::blocks::{BlockConfig, CloudPool, Cmhct, PoolConfig, PoolHeadConfig};
use crate::error::{Error, Result};
use crate::gridnn::{Dense, NormKind};
use crate::losses::cross_entropy;
use crate::params::{Forward, ParamStore};
use crate::raster::{Cloud, PointCloudBatch};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Segment,
    Classify,
    Generate,
    Inpaint,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" | "segment" => Ok(Self::Segment),
            "cls" | "classify" => Ok(Self::Classify),
            "gen" | "generate" => Ok(Self::Generate),
            "inpaint" => Ok(Self::Inpaint),
            other => Err(Error::invalid("task", format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Segment => "seg",
            Self::Classify => "cls",
            Self::Generate => "gen",
            Self::Inpaint => "inpaint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Per-point input feature width (segment / classify).
    pub in_features: usize,
    pub n_stages: usize,
    /// First-stage block; later blocks of each cascade follow
    /// [`BlockConfig::cascade`].
    pub block: BlockConfig,
    /// Output classes (segment / classify).
    pub classes: usize,
    /// Width of the hidden layer of the point-wise output perceptrons.
    pub hidden: usize,
    /// Pooling for classify / inpaint; its `class_dim` is the class vector
    /// (classify) or the style vector (inpaint).
    pub pool: Option<PoolConfig>,
    pub style_dim: usize,
    /// Sphere samples fed to the generator.
    pub out_points: usize,
}

impl ModelConfig {
    pub fn desk(task: Task) -> Self {
        let block = BlockConfig::desk();
        let g = block.g;
        let pool = PoolConfig {
            heads: vec![PoolHeadConfig::new(2, 8, 8), PoolHeadConfig::new(3, 8, 8)],
            g,
            class_dim: 64,
            gradient_balancing: true,
        };
        let mut cfg = Self {
            task,
            in_features: 3,
            n_stages: 1,
            block,
            classes: 2,
            hidden: 64,
            pool: None,
            style_dim: 64,
            out_points: 128,
        };
        match task {
            Task::Segment => {}
            Task::Classify => {
                cfg.classes = 3;
                cfg.pool = Some(pool);
            }
            Task::Generate => cfg.block = cfg.block.adaptive(cfg.style_dim),
            Task::Inpaint => {
                cfg.pool = Some(PoolConfig {
                    class_dim: cfg.style_dim,
                    ..pool
                });
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_config", msg));
        if self.n_stages == 0 {
            return bad("n_stages must be >= 1".into());
        }
        self.block.validate()?;
        if self.hidden == 0 {
            return bad("hidden width must be >= 1".into());
        }
        match self.task {
            Task::Segment | Task::Classify => {
                if self.in_features == 0 || self.classes < 2 {
                    return bad(format!(
                        "in_features {} classes {}",
                        self.in_features, self.classes
                    ));
                }
            }
            Task::Generate | Task::Inpaint => {
                if self.style_dim == 0 || self.out_points == 0 {
                    return bad(format!(
                        "style_dim {} out_points {}",
                        self.style_dim, self.out_points
                    ));
                }
            }
        }
        if matches!(self.task, Task::Classify | Task::Inpaint) {
            match &self.pool {
                Some(p) => {
                    p.validate()?;
                    if p.g != self.block.g {
                        return bad(format!(
                            "pool width {} != block width {}",
                            p.g, self.block.g
                        ));
                    }
                    if self.task == Task::Inpaint && p.class_dim != self.style_dim {
                        return bad("inpainting encoder must emit style_dim features".into());
                    }
                }
                None => return bad(format!("task {} needs a pool config", self.task)),
            }
        }
        Ok(())
    }

    /// Block used by the point encoders (batch norm regardless of the
    /// generator's conditioning).
    fn encoder_block(&self) -> BlockConfig {
        let mut b = self.block.clone();
        b.norm_kind = NormKind::Batch;
        b.style_dim = None;
        b
    }

    fn generator_block(&self) -> BlockConfig {
        let mut b = self.block.clone();
        b.norm_kind = NormKind::AdaptiveInstance;
        b.style_dim = Some(self.style_dim);
        b
    }
}

/// Point-wise lift followed by `n_stages` cascades.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub lift: Dense,
    pub stages: Vec<Cmhct>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        n_stages: usize,
        block: &BlockConfig,
    ) -> Result<Self> {
        let lift = Dense::new(store, rng, &format!("{name}.lift"), in_features, block.g);
        let stages = (0..n_stages)
            .map(|i| Cmhct::new(store, rng, &format!("{name}.stage{i}"), block))
            .collect::<Result<_>>()?;
        Ok(Self { lift, stages })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        positions: Var,
        features: Var,
        style: Option<Var>,
    ) -> Result<Cloud> {
        let f = self.lift.forward(fwd, features)?;
        let f = fwd.tape.relu(f)?;
        let cloud = Cloud {
            positions,
            features: f,
        };
        self.stages
            .iter()
            .try_fold(cloud, |c, s| s.forward(fwd, c, style))
    }
}

/// Two-layer point-wise perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Dense,
    pub l2: Dense,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            l1: Dense::new(store, rng, &format!("{name}.l1"), d_in, hidden),
            l2: Dense::new(store, rng, &format!("{name}.l2"), hidden, d_out),
        }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.l1.forward(fwd, x)?;
        let h = fwd.tape.relu(h)?;
        self.l2.forward(fwd, h)
    }
}

fn cloud_inputs(
    fwd: &mut Forward<'_>,
    pc: &PointCloudBatch,
    in_features: usize,
) -> Result<(Var, Var)> {
    if pc.feature_width() != in_features {
        return Err(Error::shape(
            "model_input",
            &[pc.features.shape(), &[in_features]],
        ));
    }
    Ok((
        fwd.input(pc.positions.clone()),
        fwd.input(pc.features.clone()),
    ))
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: Mlp,
}

impl Segmenter {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.encoder_block();
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, rng, "seg", cfg.in_features, cfg.n_stages, &block)?,
            head: Mlp::new(store, rng, "seg.head", block.g, cfg.hidden, cfg.classes),
        })
    }

    /// Logits `[B, N, classes]`.
    pub fn forward(&self, fwd: &mut Forward<'_>, pc: &PointCloudBatch) -> Result<Var> {
        let (p, x) = cloud_inputs(fwd, pc, self.cfg.in_features)?;
        let cloud = self.backbone.forward(fwd, p, x, None)?;
        self.head.forward(fwd, cloud.features)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    /// `[B, classes]`
    pub class_logits: Var,
    /// `[B, N, 2]`
    pub fg_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub pool: CloudPool,
    pub classify: Dense,
    pub mask: Mlp,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.encoder_block();
        let pool_cfg = cfg.pool.clone().expect("validated");
        let class_dim = pool_cfg.class_dim;
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, rng, "cls", cfg.in_features, cfg.n_stages, &block)?,
            pool: CloudPool::new(store, rng, "cls.pool", &pool_cfg)?,
            classify: Dense::new(store, rng, "cls.classify", class_dim, cfg.classes),
            mask: Mlp::new(store, rng, "cls.mask", block.g + class_dim, cfg.hidden, 2),
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, pc: &PointCloudBatch) -> Result<ClassifierOutput> {
        let (p, x) = cloud_inputs(fwd, pc, self.cfg.in_features)?;
        let cloud = self.backbone.forward(fwd, p, x, None)?;
        let k_class = self.pool.forward(fwd, cloud)?;
        let class_logits = self.classify.forward(fwd, k_class)?;
        let spread = fwd.tape.expand_points(k_class, pc.points())?;
        let joined = fwd.tape.concat(&[cloud.features, spread])?;
        let fg_logits = self.mask.forward(fwd, joined)?;
        Ok(ClassifierOutput {
            class_logits,
            fg_logits,
        })
    }
}

/// `0.5 · CE(class) + 0.5 · CE(foreground mask)`.
pub fn classifier_loss(
    fwd: &mut Forward<'_>,
    out: &ClassifierOutput,
    class_labels: &[usize],
    fg_mask: &[u8],
) -> Result<Var> {
    let ce_class = cross_entropy(&mut fwd.tape, out.class_logits, class_labels, None)?;
    let fg: Vec<usize> = fg_mask.iter().map(|&m| m as usize).collect();
    let ce_seg = cross_entropy(&mut fwd.tape, out.fg_logits, &fg, None)?;
    let sum = fwd.tape.add(ce_class, ce_seg)?;
    fwd.tape.scale(sum, 0.5)
}

/// `n` points uniformly distributed on the unit sphere, `[n, 3]`.
pub fn sample_sphere(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * n);
    while data.len() < 3 * n {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            data.extend(v.iter().map(|x| x / norm));
        }
    }
    Tensor::new(&[n, 3], data).expect("sphere shape")
}

/// Repeats `[n, 3]` points for every batch element and appends `extra`
/// constant feature columns.
fn tile_points(points: &Tensor, batch: usize, extra: &[f64]) -> (Tensor, Tensor) {
    let n = points.shape()[0];
    let positions = Tensor::new(&[batch, n, 3], points.data().repeat(batch)).expect("tile shape");
    let mut feats = Vec::with_capacity(batch * n * (3 + extra.len()));
    for row in positions.data().chunks(3) {
        feats.extend_from_slice(row);
        feats.extend_from_slice(extra);
    }
    let features = Tensor::new(&[batch, n, 3 + extra.len()], feats).expect("tile shape");
    (positions, features)
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: Mlp,
}

impl Generator {
    /// `in_features` is 3 for plain generation, 4 when every input point
    /// carries a partial-cloud flag.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        in_features: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.generator_block();
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, rng, name, in_features, cfg.n_stages, &block)?,
            head: Mlp::new(store, rng, &format!("{name}.head"), block.g, cfg.hidden, 3),
        })
    }

    /// Deforms `positions [B, n, 3]` (with per-point `features`) under
    /// `style [B, style_dim]`; outputs lie in `(-1, 1)`.
    pub fn forward_points(
        &self,
        fwd: &mut Forward<'_>,
        positions: &Tensor,
        features: &Tensor,
        style: Var,
    ) -> Result<Var> {
        let ss = fwd.value(style).shape().to_vec();
        if ss != [positions.shape()[0], self.cfg.style_dim] {
            return Err(Error::shape(
                "generator",
                &[&ss, &[positions.shape()[0], self.cfg.style_dim]],
            ));
        }
        if !fwd.value(style).all_finite() {
            return Err(Error::invalid("generator", "style vector must be finite"));
        }
        let p = fwd.input(positions.clone());
        let x = fwd.input(features.clone());
        let cloud = self.backbone.forward(fwd, p, x, Some(style))?;
        let out = self.head.forward(fwd, cloud.features)?;
        fwd.tape.tanh(out)
    }

    /// Generates one cloud per style row from the sphere sample `[n, 3]`.
    pub fn forward(&self, fwd: &mut Forward<'_>, style: Var, sphere: &Tensor) -> Result<Var> {
        let batch = fwd.value(style).shape()[0];
        let (positions, features) = tile_points(sphere, batch, &[]);
        self.forward_points(fwd, &positions, &features, style)
    }
}

/// Runs the generator twice on fresh sphere samples of `n_out` points and
/// keeps a random subset of `n_out` of the `2 n_out` outputs per cloud.
pub fn generate_two_pass(
    gen: &Generator,
    store: &mut ParamStore,
    style: &Tensor,
    n_out: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let batch = style.shape()[0];
    let mut passes = Vec::new();
    for _ in 0..2 {
        let sphere = sample_sphere(rng, n_out);
        let mut fwd = Forward::new(store, false);
        let s = fwd.input(style.clone());
        let out = gen.forward(&mut fwd, s, &sphere)?;
        passes.push(fwd.value(out).clone());
    }
    let mut data = Vec::with_capacity(batch * n_out * 3);
    for b in 0..batch {
        let mut pool: Vec<&[f64]> = passes
            .iter()
            .flat_map(|t| t.data()[b * n_out * 3..(b + 1) * n_out * 3].chunks(3))
            .collect();
        // partial Fisher-Yates
        for i in 0..n_out {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        for row in &pool[..n_out] {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(&[batch, n_out, 3], data)
}

#[derive(Clone, Debug)]
pub struct Inpainter {
    pub cfg: ModelConfig,
    pub encoder: Backbone,
    pub pool: CloudPool,
    pub generator: Generator,
}

impl Inpainter {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.encoder_block();
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Backbone::new(store, rng, "inpaint.encoder", 3, cfg.n_stages, &block)?,
            pool: CloudPool::new(
                store,
                rng,
                "inpaint.pool",
                cfg.pool.as_ref().expect("validated"),
            )?,
            generator: Generator::new(store, rng, "inpaint.gen", cfg, 4)?,
        })
    }

    /// Style vector `[B, style_dim]` of the partial clouds.
    pub fn encode(&self, fwd: &mut Forward<'_>, partial: &Tensor) -> Result<Var> {
        let p = fwd.input(partial.clone());
        let cloud = self.encoder.forward(fwd, p, p, None)?;
        self.pool.forward(fwd, cloud)
    }

    /// Completes `partial [B, M, 3]`; the generator sees the partial points
    /// (flag 1) followed by `sphere [n_out - M, 3]` (flag 0). Output
    /// `[B, n_out, 3]`.
    pub fn forward(&self, fwd: &mut Forward<'_>, partial: &Tensor, sphere: &Tensor) -> Result<Var> {
        let ps = partial.shape();
        if ps.len() != 3 || ps[2] != 3 || ps[1] == 0 {
            return Err(Error::shape("inpainter", &[ps]));
        }
        let (batch, m) = (ps[0], ps[1]);
        let style = self.encode(fwd, partial)?;
        let (sp, sf) = tile_points(sphere, batch, &[0.0]);
        let n_s = sphere.shape()[0];
        let n = m + n_s;
        let mut pos = Vec::with_capacity(batch * n * 3);
        let mut feat = Vec::with_capacity(batch * n * 4);
        for b in 0..batch {
            let part = &partial.data()[b * m * 3..(b + 1) * m * 3];
            pos.extend_from_slice(part);
            for row in part.chunks(3) {
                feat.extend_from_slice(row);
                feat.push(1.0);
            }
            pos.extend_from_slice(&sp.data()[b * n_s * 3..(b + 1) * n_s * 3]);
            feat.extend_from_slice(&sf.data()[b * n_s * 4..(b + 1) * n_s * 4]);
        }
        let positions = Tensor::new(&[batch, n, 3], pos)?;
        let features = Tensor::new(&[batch, n, 4], feat)?;
        self.generator
            .forward_points(fwd, &positions, &features, style)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GradCheckOptions};
    use crate::losses::{chamfer, emd_exact};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(task: Task) -> ModelConfig {
        let mut cfg = ModelConfig::desk(task);
        cfg.block = BlockConfig::mixed(6, 1, 4, 3, 1, 4, 2);
        cfg.block.gradient_balancing = false;
        cfg.hidden = 5;
        cfg.style_dim = 3;
        cfg.out_points = 6;
        if task == Task::Generate {
            cfg.block = cfg.block.adaptive(3);
        }
        if cfg.pool.is_some() {
            let mut h2 = PoolHeadConfig::new(2, 8, 2);
            h2.widths = [2, 2, 2];
            cfg.pool = Some(PoolConfig {
                heads: vec![h2],
                g: 6,
                class_dim: if task == Task::Inpaint { 3 } else { 4 },
                gradient_balancing: false,
            });
        }
        cfg
    }

    fn batch(rng: &mut impl Rng, b: usize, n: usize, f: usize) -> PointCloudBatch {
        let p = Tensor::from_fn(&[b, n, 3], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[b, n, f], |_| rng.random_range(-1.0..1.0));
        PointCloudBatch::new(p, x).unwrap()
    }

    fn probe(fwd: &mut Forward<'_>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = fwd.value(v).shape().to_vec();
        let r = fwd.input(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
        let m = fwd.tape.mul(v, r).unwrap();
        fwd.tape.sum(m).unwrap()
    }

    fn opts() -> GradCheckOptions {
        GradCheckOptions {
            max_entries: 4,
            ..Default::default()
        }
    }

    #[test]
    fn segmenter_shapes_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = Segmenter::new(&mut store, &mut rng, &tiny(Task::Segment)).unwrap();
        let pc = batch(&mut rng, 2, 9, 3);
        let run = |store: &mut ParamStore, pc: &PointCloudBatch| {
            let mut fwd = Forward::new(store, false);
            let out = model.forward(&mut fwd, pc).unwrap();
            fwd.value(out).clone()
        };
        let base = run(&mut store, &pc);
        assert_eq!(base.shape(), &[2, 9, 2]);
        let perm = [4, 2, 8, 0, 1, 7, 6, 3, 5];
        let moved = run(&mut store, &pc.permuted(&perm));
        let expect = PointCloudBatch::new(pc.positions.clone(), base)
            .unwrap()
            .permuted(&perm)
            .features;
        assert!(moved
            .data()
            .iter()
            .zip(expect.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(
            Segmenter::new(&mut ParamStore::new(), &mut rng, &tiny(Task::Segment))
                .unwrap()
                .forward(
                    &mut Forward::new(&mut ParamStore::new(), false),
                    &batch(&mut rng, 1, 3, 4)
                )
                .is_err()
        );
    }

    #[test]
    fn segmenter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let model = Segmenter::new(&mut store, &mut rng, &tiny(Task::Segment)).unwrap();
        let pc = batch(&mut rng, 2, 8, 3);
        let report = check_params(&mut store, &opts(), |fwd| {
            let out = model.forward(fwd, &pc)?;
            Ok(probe(fwd, out, 1))
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn classifier_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &mut rng, &tiny(Task::Classify)).unwrap();
        let pc = batch(&mut rng, 2, 7, 3);
        let perm = [6, 0, 3, 1, 5, 2, 4];
        let run = |store: &mut ParamStore, pc: &PointCloudBatch| {
            let mut fwd = Forward::new(store, false);
            let out = model.forward(&mut fwd, pc).unwrap();
            (
                fwd.value(out.class_logits).clone(),
                fwd.value(out.fg_logits).clone(),
            )
        };
        let (c0, m0) = run(&mut store, &pc);
        assert_eq!(c0.shape(), &[2, 3]);
        assert_eq!(m0.shape(), &[2, 7, 2]);
        let (c1, m1) = run(&mut store, &pc.permuted(&perm));
        assert!(c0
            .data()
            .iter()
            .zip(c1.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let expect = PointCloudBatch::new(pc.positions.clone(), m0)
            .unwrap()
            .permuted(&perm)
            .features;
        assert!(m1
            .data()
            .iter()
            .zip(expect.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn classifier_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &mut rng, &tiny(Task::Classify)).unwrap();
        let pc = batch(&mut rng, 2, 12, 3);
        let mask: Vec<u8> = (0..24).map(|i| (i % 3 != 0) as u8).collect();
        let report = check_params(&mut store, &opts(), |fwd| {
            let out = model.forward(fwd, &pc)?;
            classifier_loss(fwd, &out, &[0, 2], &mask)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn generator_range_determinism_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = tiny(Task::Generate);
        let model = Generator::new(&mut store, &mut rng, "gen", &cfg, 3).unwrap();
        let style = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let sphere = sample_sphere(&mut ChaCha8Rng::seed_from_u64(9), 6);
        let run = |store: &mut ParamStore, sphere: &Tensor| {
            let mut fwd = Forward::new(store, false);
            let s = fwd.input(style.clone());
            let out = model.forward(&mut fwd, s, sphere).unwrap();
            fwd.value(out).clone()
        };
        let a = run(&mut store, &sphere);
        assert_eq!(a.shape(), &[2, 6, 3]);
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(a, run(&mut store, &sphere));
        assert_ne!(
            a,
            run(
                &mut store,
                &sample_sphere(&mut ChaCha8Rng::seed_from_u64(10), 6)
            )
        );
        let target = Tensor::from_fn(&[2, 6, 3], |_| rng.random_range(-0.5..0.5));
        let report = check_params(&mut store, &opts(), |fwd| {
            let s = fwd.input(style.clone());
            let out = model.forward(fwd, s, &sphere)?;
            let t = fwd.input(target.clone());
            chamfer(&mut fwd.tape, out, t)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        let mut fwd = Forward::new(&mut store, false);
        let bad = fwd.input(Tensor::zeros(&[2, 4]));
        assert!(model.forward(&mut fwd, bad, &sphere).is_err());
    }

    #[test]
    fn two_pass_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let model = Generator::new(&mut store, &mut rng, "gen", &tiny(Task::Generate), 3).unwrap();
        let style = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let out = generate_two_pass(&model, &mut store, &style, 11, &mut rng).unwrap();
        assert_eq!(out.shape(), &[3, 11, 3]);
    }

    #[test]
    fn inpainter_shapes_and_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = tiny(Task::Inpaint);
        let model = Inpainter::new(&mut store, &mut rng, &cfg).unwrap();
        assert_eq!(model.generator.backbone.lift.d_in, 4);
        let partial = Tensor::from_fn(&[2, 5, 3], |_| rng.random_range(-0.5..0.5));
        let sphere = sample_sphere(&mut rng, 3);
        let target = Tensor::from_fn(&[2, 8, 3], |_| rng.random_range(-0.5..0.5));
        let mut fwd = Forward::new(&mut store, true);
        let out = model.forward(&mut fwd, &partial, &sphere).unwrap();
        assert_eq!(fwd.value(out).shape(), &[2, 8, 3]);
        let t = fwd.input(target);
        let e = emd_exact(&mut fwd.tape, out, t).unwrap();
        let c = chamfer(&mut fwd.tape, out, t).unwrap();
        let loss = fwd.tape.add(e, c).unwrap();
        let grads = fwd.backward(loss).unwrap();
        let lift = model.encoder.lift.weight;
        assert!(grads.get(lift).unwrap().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(Task::Classify);
        cfg.pool = None;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Task::Segment);
        cfg.n_stages = 0;
        assert!(cfg.validate().is_err());
        for t in [Task::Segment, Task::Classify, Task::Generate, Task::Inpaint] {
            ModelConfig::desk(t).validate().unwrap();
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
    }
}
