//! Training loop for the four tasks.

use crate::config::TrainConfig;
use crate::data::{
    cutaway, target_shape, to_batch, DatasetKind, Sample, SampleStream, SyntheticDataset,
};
use crate::error::{HarnessError, Result};
use crate::io::write_checkpoint;
use crate::metrics::MetricsWriter;
use crate::optim::{adam_step, AdamState};
use cloud_transform::losses::{
    accuracy, argmax_rows, chamfer, chamfer_value, cross_entropy, emd_exact, emd_matching,
    fscore_at, fscore_tau, mean_class_accuracy, miou,
};
use cloud_transform::models::{
    classifier_loss, sample_sphere, Classifier, Generator, Inpainter, Segmenter, Task,
};
use cloud_transform::{Forward, ParamGrads, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub type Metrics = BTreeMap<String, f64>;

/// Names of the generation target shapes, in style-row order.
pub const SHAPE_NAMES: [&str; 2] = ["cube", "sphere"];

// Stream seeds are offset from the run seed so the splits never overlap.
const TRAIN_STREAM: u64 = 0x7261_696e;
const VAL_STREAM: u64 = 0x0076_616c;
const TEST_STREAM: u64 = 0x7465_7374;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub iterations: usize,
    pub stopped_early: bool,
    pub val: Metrics,
    pub test: Metrics,
    pub out_dir: Option<PathBuf>,
}

/// Fixed conditioning and targets of the generation task: one style vector,
/// one target cloud per shape, and the sphere sample fed to the generator.
#[derive(Clone, Debug)]
pub struct GenerationSet {
    pub style: Tensor,
    pub targets: Tensor,
    pub sphere: Tensor,
}

impl GenerationSet {
    pub fn new(seed: u64, style_dim: usize, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_STREAM);
        let style = (0..SHAPE_NAMES.len() * style_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let targets = (0..SHAPE_NAMES.len())
            .flat_map(|s| target_shape(&mut rng, s, n))
            .collect();
        Self {
            style: Tensor::new(&[SHAPE_NAMES.len(), style_dim], style).expect("style shape"),
            targets: Tensor::new(&[SHAPE_NAMES.len(), n, 3], targets).expect("target shape"),
            sphere: sample_sphere(&mut rng, n),
        }
    }
}

/// A model of any task together with its data.
pub enum Trainer {
    Segment {
        model: Segmenter,
        train: SampleStream,
        val: Vec<Sample>,
        test: Vec<Sample>,
    },
    Classify {
        model: Classifier,
        train: SampleStream,
        val: Vec<Sample>,
        test: Vec<Sample>,
    },
    Generate {
        model: Generator,
        set: GenerationSet,
    },
    Inpaint {
        model: Inpainter,
        train: CompletionStream,
        val: Vec<(Tensor, Tensor)>,
        test: Vec<(Tensor, Tensor)>,
    },
}

/// `(partial, complete)` pairs with fixed sizes: the complete cloud has
/// `n` points and the partial cloud is resampled to `n / 2`.
pub struct CompletionStream {
    shapes: SampleStream,
    rng: ChaCha8Rng,
    n: usize,
}

impl CompletionStream {
    pub fn new(seed: u64, n: usize) -> Result<Self> {
        Ok(Self {
            shapes: SyntheticDataset::new(DatasetKind::Cutaway, n, seed).stream()?,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            n,
        })
    }

    pub fn partial_points(&self) -> usize {
        self.n / 2
    }

    /// A batch of `[B, n/2, 3]` partial and `[B, n, 3]` complete clouds.
    pub fn batch(&mut self, b: usize) -> (Tensor, Tensor) {
        let m = self.partial_points();
        let mut partial = Vec::with_capacity(b * m * 3);
        let mut complete = Vec::with_capacity(b * self.n * 3);
        for _ in 0..b {
            let s = self.shapes.next_sample();
            let (part, full) = cutaway(&mut self.rng, &s.positions);
            let rows: Vec<&[f64]> = part.chunks(3).collect();
            for _ in 0..m {
                partial.extend_from_slice(rows[self.rng.random_range(0..rows.len())]);
            }
            complete.extend(full);
        }
        (
            Tensor::new(&[b, m, 3], partial).expect("partial shape"),
            Tensor::new(&[b, self.n, 3], complete).expect("complete shape"),
        )
    }
}

fn stream(kind: DatasetKind, cfg: &TrainConfig, offset: u64) -> Result<SampleStream> {
    let mut d = SyntheticDataset::new(kind, cfg.points, cfg.seed ^ offset);
    d.noise = cfg.noise;
    Ok(d.stream()?)
}

impl Trainer {
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.model_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        Ok(match cfg.task {
            Task::Segment => Trainer::Segment {
                model: Segmenter::new(store, &mut rng, &m)?,
                train: stream(DatasetKind::TwoSurface, cfg, TRAIN_STREAM)?,
                val: stream(DatasetKind::TwoSurface, cfg, VAL_STREAM)?.take(cfg.eval_samples),
                test: stream(DatasetKind::TwoSurface, cfg, TEST_STREAM)?.take(cfg.eval_samples),
            },
            Task::Classify => Trainer::Classify {
                model: Classifier::new(store, &mut rng, &m)?,
                train: stream(DatasetKind::Primitives, cfg, TRAIN_STREAM)?,
                val: stream(DatasetKind::Primitives, cfg, VAL_STREAM)?.take(cfg.eval_samples),
                test: stream(DatasetKind::Primitives, cfg, TEST_STREAM)?.take(cfg.eval_samples),
            },
            Task::Generate => Trainer::Generate {
                model: Generator::new(store, &mut rng, "gen", &m, 3)?,
                set: GenerationSet::new(cfg.seed, m.style_dim, m.out_points),
            },
            Task::Inpaint => {
                let split = |offset: u64| -> Result<Vec<(Tensor, Tensor)>> {
                    let mut s = CompletionStream::new(cfg.seed ^ offset, m.out_points)?;
                    Ok((0..cfg.eval_samples).map(|_| s.batch(1)).collect())
                };
                Trainer::Inpaint {
                    model: Inpainter::new(store, &mut rng, &m)?,
                    train: CompletionStream::new(cfg.seed ^ TRAIN_STREAM, m.out_points)?,
                    val: split(VAL_STREAM)?,
                    test: split(TEST_STREAM)?,
                }
            }
        })
    }

    /// Builds the loss of one training batch.
    fn loss(
        &mut self,
        fwd: &mut Forward<'_>,
        cfg: &TrainConfig,
        iter: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        match self {
            Trainer::Segment { model, train, .. } => {
                let pc = to_batch(&train.take(cfg.batch))?;
                let logits = model.forward(fwd, &pc)?;
                Ok(cross_entropy(
                    &mut fwd.tape,
                    logits,
                    pc.labels.as_ref().expect("labelled"),
                    None,
                )?)
            }
            Trainer::Classify { model, train, .. } => {
                let samples = train.take(cfg.batch);
                let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
                let pc = to_batch(&samples)?;
                let out = model.forward(fwd, &pc)?;
                Ok(classifier_loss(
                    fwd,
                    &out,
                    &labels,
                    pc.fg_mask.as_ref().expect("masked"),
                )?)
            }
            Trainer::Generate { model, set } => {
                let style = fwd.input(set.style.clone());
                let out = model.forward(fwd, style, &set.sphere)?;
                let target = fwd.input(set.targets.clone());
                Ok(emd_exact(&mut fwd.tape, out, target)?)
            }
            Trainer::Inpaint { model, train, .. } => {
                let (partial, complete) = train.batch(cfg.batch);
                let n_s = complete.shape()[1] - partial.shape()[1];
                let sphere = sample_sphere(rng, n_s);
                let out = model.forward(fwd, &partial, &sphere)?;
                let target = fwd.input(complete);
                let cd = chamfer(&mut fwd.tape, out, target)?;
                let finetune_from = ((1.0 - cfg.finetune) * cfg.iterations as f64).ceil() as usize;
                if iter >= finetune_from {
                    Ok(cd)
                } else {
                    let emd = emd_exact(&mut fwd.tape, out, target)?;
                    Ok(fwd.tape.add(emd, cd)?)
                }
            }
        }
    }

    /// Metrics on the validation (`test = false`) or test split.
    pub fn evaluate(
        &self,
        store: &mut ParamStore,
        cfg: &TrainConfig,
        test: bool,
    ) -> Result<Metrics> {
        let mut m = Metrics::new();
        let chunk = cfg.batch;
        match self {
            Trainer::Segment {
                model,
                val,
                test: t,
                ..
            } => {
                let split = if test { t } else { val };
                let (mut pred, mut truth) = (Vec::new(), Vec::new());
                for part in split.chunks(chunk) {
                    let pc = to_batch(part)?;
                    let mut fwd = Forward::new(store, false);
                    let logits = model.forward(&mut fwd, &pc)?;
                    pred.extend(argmax_rows(fwd.value(logits)));
                    truth.extend(pc.labels.expect("labelled"));
                }
                m.insert("accuracy".into(), accuracy(&pred, &truth)?);
                m.insert("miou".into(), miou(&pred, &truth, 2)?);
            }
            Trainer::Classify {
                model,
                val,
                test: t,
                ..
            } => {
                let split = if test { t } else { val };
                let (mut pred, mut truth, mut fg_pred, mut fg_truth) =
                    (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for part in split.chunks(chunk) {
                    let pc = to_batch(part)?;
                    let mut fwd = Forward::new(store, false);
                    let out = model.forward(&mut fwd, &pc)?;
                    pred.extend(argmax_rows(fwd.value(out.class_logits)));
                    fg_pred.extend(argmax_rows(fwd.value(out.fg_logits)));
                    truth.extend(part.iter().map(|s| s.label));
                    fg_truth.extend(pc.fg_mask.expect("masked").iter().map(|&v| v as usize));
                }
                let k = model.cfg.classes;
                m.insert("accuracy".into(), accuracy(&pred, &truth)?);
                m.insert(
                    "mean_class_accuracy".into(),
                    mean_class_accuracy(&pred, &truth, k)?,
                );
                m.insert("fg_accuracy".into(), accuracy(&fg_pred, &fg_truth)?);
            }
            Trainer::Generate { model, set } => {
                let mut fwd = Forward::new(store, false);
                let style = fwd.input(set.style.clone());
                let out = model.forward(&mut fwd, style, &set.sphere)?;
                let pts = fwd.value(out).data();
                let n3 = set.sphere.len();
                let (mut worst_emd, mut worst_cd) = (0.0f64, 0.0f64);
                for (s, name) in SHAPE_NAMES.iter().enumerate() {
                    let (p, t) = (
                        &pts[s * n3..(s + 1) * n3],
                        &set.targets.data()[s * n3..(s + 1) * n3],
                    );
                    let emd = emd_matching(p, t)?.1;
                    let cd = chamfer_value(p, t)?;
                    worst_emd = worst_emd.max(emd);
                    worst_cd = worst_cd.max(cd);
                    m.insert(format!("emd_{name}"), emd);
                    m.insert(format!("chamfer_{name}"), cd);
                    m.insert(format!("fscore_{name}"), fscore_at(p, t, fscore_tau(t))?);
                }
                m.insert("emd".into(), worst_emd);
                m.insert("chamfer".into(), worst_cd);
                m.insert(
                    "max_abs".into(),
                    pts.iter().fold(0.0, |a, v| a.max(v.abs())),
                );
            }
            Trainer::Inpaint {
                model,
                val,
                test: t,
                ..
            } => {
                let split = if test { t } else { val };
                // a fixed sphere keeps evaluation deterministic
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_STREAM);
                let (mut emd, mut cd, mut fs) = (0.0, 0.0, 0.0);
                for (partial, complete) in split {
                    let sphere = sample_sphere(&mut rng, complete.shape()[1] - partial.shape()[1]);
                    let mut fwd = Forward::new(store, false);
                    let out = model.forward(&mut fwd, partial, &sphere)?;
                    let (p, c) = (fwd.value(out).data(), complete.data());
                    emd += emd_matching(p, c)?.1;
                    cd += chamfer_value(p, c)?;
                    fs += fscore_at(p, c, fscore_tau(c))?;
                }
                let n = split.len() as f64;
                m.insert("emd".into(), emd / n);
                m.insert("chamfer".into(), cd / n);
                m.insert("fscore".into(), fs / n);
            }
        }
        Ok(m)
    }
}

/// True when every threshold set for the task holds.
fn should_stop(cfg: &TrainConfig, m: &Metrics) -> bool {
    let at_least = |key: &str, t: Option<f64>| t.map(|t| m.get(key).is_some_and(|&v| v >= t));
    let below = |key: &str, t: Option<f64>| t.map(|t| m.get(key).is_some_and(|&v| v < t));
    let checks = match cfg.task {
        Task::Segment => vec![at_least("accuracy", cfg.stop.accuracy)],
        Task::Classify => vec![
            at_least("accuracy", cfg.stop.accuracy),
            at_least("fg_accuracy", cfg.stop.fg_accuracy),
        ],
        Task::Generate | Task::Inpaint => vec![
            below("emd", cfg.stop.emd),
            below("chamfer", cfg.stop.chamfer),
        ],
    };
    let set: Vec<bool> = checks.into_iter().flatten().collect();
    !set.is_empty() && set.iter().all(|&ok| ok)
}

/// Per-parameter gradient norms, largest first.
pub fn grad_norms(store: &ParamStore, grads: &ParamGrads) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = store
        .iter()
        .filter_map(|(id, p)| {
            grads
                .get(id)
                .map(|g| (p.name.clone(), g.iter().map(|v| v * v).sum::<f64>().sqrt()))
        })
        .collect();
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Less));
    rows
}

fn write_dump(
    dir: Option<&Path>,
    iter: usize,
    loss: f64,
    note: &str,
    norms: &[(String, f64)],
) -> Result<PathBuf> {
    let mut text = format!("iteration {iter}\nloss {loss}\n# {note}\n");
    for (name, n) in norms {
        text.push_str(&format!("{name} {n}\n"));
    }
    let path = match dir {
        Some(d) => d.join("grad_norms.txt"),
        None => std::env::temp_dir().join(format!("ct-grad-norms-{}.txt", std::process::id())),
    };
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

/// Trains the configured model. With an output directory the run writes
/// `config.txt`, `metrics.jsonl` and `model.ctck` there.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainReport> {
    let mut store = ParamStore::new();
    let (report, _) = train_with_store(cfg, &mut store)?;
    Ok(report)
}

/// Like [`run_training`], also returning the trained model.
pub fn train_with_store(
    cfg: &TrainConfig,
    store: &mut ParamStore,
) -> Result<(TrainReport, Trainer)> {
    let mut trainer = Trainer::new(store, cfg)?;
    let dir = cfg.out_dir.as_deref();
    let mut log = match dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| HarnessError::io(d, e))?;
            let cfg_path = d.join("config.txt");
            std::fs::write(&cfg_path, cfg.echo()).map_err(|e| HarnessError::io(&cfg_path, e))?;
            Some(MetricsWriter::create(&d.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut state = AdamState::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM ^ 1);
    let mut val = Metrics::new();
    let mut done = 0;
    let mut stopped_early = false;
    let mut last_norms = Vec::new();
    for iter in 0..cfg.iterations {
        let lr = cfg.decay.lr_at(cfg.adam.lr, iter);
        let mut fwd = Forward::new(store, true);
        // non-finite parameters surface either as a NaN loss or as an input
        // check failing inside the forward pass
        let (loss_value, grads) = match trainer.loss(&mut fwd, cfg, iter, &mut rng) {
            Ok(loss) => (fwd.value(loss).item(), Some(fwd.backward(loss)?)),
            Err(HarnessError::Core(cloud_transform::Error::NonFinite { .. })) => (f64::NAN, None),
            Err(e) => return Err(e),
        };
        let finite = loss_value.is_finite()
            && grads.as_ref().is_some_and(|g| {
                store
                    .ids()
                    .all(|id| g.get(id).is_none_or(|g| g.iter().all(|v| v.is_finite())))
            });
        if !finite {
            if let Some(w) = log.as_mut() {
                w.flush()?;
            }
            let (note, norms) = match &grads {
                Some(g) => ("gradient norms of this step", grad_norms(store, g)),
                None => (
                    "forward failed; gradient norms of the previous step",
                    last_norms,
                ),
            };
            let dump = write_dump(dir, iter, loss_value, note, &norms)?;
            return Err(HarnessError::Diverged {
                iter,
                loss: loss_value,
                dump,
            });
        }
        let grads = grads.expect("finite step has gradients");
        last_norms = grad_norms(store, &grads);
        adam_step(store, &grads, &mut state, &cfg.adam, lr)?;
        done = iter + 1;
        if let Some(w) = log.as_mut() {
            w.row(iter, "train", "loss", loss_value)?;
            w.row(iter, "train", "lr", lr)?;
        }
        let last = done == cfg.iterations;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || last) {
            val = trainer.evaluate(store, cfg, false)?;
            if let Some(w) = log.as_mut() {
                for (k, v) in &val {
                    w.row(iter, "val", k, *v)?;
                }
                w.flush()?;
            }
            if !last && should_stop(cfg, &val) {
                stopped_early = true;
                break;
            }
        }
    }
    if val.is_empty() {
        val = trainer.evaluate(store, cfg, false)?;
    }
    let test = trainer.evaluate(store, cfg, true)?;
    if let Some(d) = dir {
        let w = log.as_mut().expect("log exists with out_dir");
        for (k, v) in &test {
            w.row(done - 1, "test", k, *v)?;
        }
        write_checkpoint(&d.join("model.ctck"), store, &cfg.echo())?;
    }
    if let Some(w) = log {
        w.finish()?;
    }
    Ok((
        TrainReport {
            iterations: done,
            stopped_early,
            val,
            test,
            out_dir: cfg.out_dir.clone(),
        },
        trainer,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> TrainConfig {
        let mut cfg = TrainConfig::desk(task);
        cfg.iterations = 3;
        cfg.batch = 2;
        cfg.points = 24;
        cfg.out_points = 24;
        cfg.eval_samples = 2;
        cfg.eval_every = 2;
        cfg.g = 8;
        cfg.hidden = 8;
        cfg.style_dim = 4;
        cfg.class_dim = 4;
        cfg.heads_2d = 1;
        cfg.heads_3d = 1;
        cfg.w_2d = 4;
        cfg.w_3d = 4;
        cfg.c_2d = 2;
        cfg.c_3d = 2;
        cfg.pool_c = 2;
        cfg
    }

    #[test]
    fn every_task_trains_a_few_steps() {
        for task in [Task::Segment, Task::Classify, Task::Generate, Task::Inpaint] {
            let r = run_training(&tiny(task)).unwrap();
            assert_eq!(r.iterations, 3);
            assert!(
                !r.test.is_empty() && r.test.values().all(|v| v.is_finite()),
                "{task}: {:?}",
                r.test
            );
        }
    }

    #[test]
    fn generation_set_is_fixed_by_seed() {
        let a = GenerationSet::new(3, 4, 10);
        let b = GenerationSet::new(3, 4, 10);
        assert_eq!(a.style, b.style);
        assert_eq!(a.targets, b.targets);
        assert_ne!(GenerationSet::new(4, 4, 10).style, a.style);
    }

    #[test]
    fn completion_pairs_have_fixed_sizes() {
        let mut s = CompletionStream::new(0, 20).unwrap();
        let (p, c) = s.batch(3);
        assert_eq!(p.shape(), &[3, 10, 3]);
        assert_eq!(c.shape(), &[3, 20, 3]);
    }

    #[test]
    fn stop_rule_needs_every_threshold() {
        let mut cfg = TrainConfig::desk(Task::Classify);
        let m: Metrics = [
            ("accuracy".to_string(), 0.97),
            ("fg_accuracy".to_string(), 0.85),
        ]
        .into();
        assert!(!should_stop(&cfg, &m));
        cfg.stop.accuracy = Some(0.95);
        assert!(should_stop(&cfg, &m));
        cfg.stop.fg_accuracy = Some(0.9);
        assert!(!should_stop(&cfg, &m));
    }

    #[test]
    fn divergence_dumps_grad_norms() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Task::Segment);
        cfg.adam.lr = 1e300;
        cfg.iterations = 4;
        cfg.out_dir = Some(dir.path().to_path_buf());
        match run_training(&cfg) {
            Err(HarnessError::Diverged { dump, .. }) => {
                let text = std::fs::read_to_string(dump).unwrap();
                assert!(text.lines().count() > 2);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.iterations)),
        }
    }
}
