//! Supervised training on synthetic sequences: query sampling, batch
//! assembly, the 1-cycle schedule, AdamW and checkpoints.
//!
//! Batches are a pure function of `(seed, step)`, so a run resumed from a
//! checkpoint sees exactly the data the uninterrupted run would have.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, io, AugmentPolicy, DataError, SpriteSceneConfig, SyntheticSample};
use crate::losses::{self, LossWeights};
use crate::params::Bound;
use crate::tensor::{read_weights, write_weights, Tape, Tensor, TensorError, Var};
use crate::{ModelConfig, Scalar, Tracker};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Trajectories sampled per sequence (N).
    pub trajectories: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Fraction of the run spent warming up to the peak.
    pub warmup_frac: f64,
    /// The run starts at `lr / div_factor`.
    pub div_factor: f64,
    /// The run ends at `lr / div_factor / final_div`.
    pub final_div: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm limit.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final weights.
    pub checkpoint_every: usize,
    /// Batches generated ahead of the optimizer.
    pub prefetch: usize,
    pub loss_weights: LossWeights,
    pub scene: SpriteSceneConfig,
    pub augment: AugmentPolicy,
    /// Dataset directory written by `generate`; sequences are rendered on
    /// the fly when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 2,
            trajectories: 16,
            lr: 3e-4,
            warmup_frac: 0.05,
            div_factor: 25.0,
            final_div: 1e4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            prefetch: 4,
            loss_weights: LossWeights::default(),
            scene: SpriteSceneConfig::default(),
            augment: AugmentPolicy::default(),
            dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if self.trajectories < 1 || self.batch_size < 1 {
            return bad("trajectories and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.div_factor >= 1.0 && self.final_div >= 1.0) {
            return bad("lr must be positive and the divisors at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("grad_clip and eps must be positive, weight_decay non-negative");
        }
        if self.prefetch < 1 {
            return bad("prefetch must be at least 1");
        }
        self.scene.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(
        "non-finite value at step {step} ({detail}); loss_main={loss_main} loss_ce={loss_ce} loss_score={loss_score}"
    )]
    NonFinite { step: usize, detail: String, loss_main: f64, loss_ce: f64, loss_score: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Learning rate at `step`: linear warm-up from `lr / div_factor` to `lr`
/// at step `round(warmup_frac * (steps - 1))`, then linear decay to
/// `lr / div_factor / final_div` at the last step.
pub fn lr_at(c: &TrainConfig, step: usize) -> f64 {
    let last = c.steps.saturating_sub(1) as f64;
    let peak_step = (c.warmup_frac * last).round();
    let initial = c.lr / c.div_factor;
    let end = initial / c.final_div;
    let s = (step as f64).min(last);
    if s <= peak_step {
        if peak_step == 0.0 {
            c.lr
        } else {
            initial + (c.lr - initial) * s / peak_step
        }
    } else {
        c.lr + (end - c.lr) * (s - peak_step) / (last - peak_step)
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter in
/// store order.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(tracker: &Tracker<S>) -> Self {
        let zeros: Vec<Tensor<S>> = tracker.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Applies the accumulated gradients of `tracker.params`.
    pub fn step(&mut self, tracker: &mut Tracker<S>, c: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one, decay) = (S::one(), S::lit(1.0 - lr * c.weight_decay));
        let (step_size, eps) = (S::lit(lr / bc1), S::lit(c.eps));
        let root_bc2 = S::lit(bc2.sqrt());
        for ((p, m), v) in tracker.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((w, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w = *w * decay - step_size * *mi / (vi.sqrt() / root_bc2 + eps);
            }
        }
    }
}

/// Picks `n` trajectory indices among those starting visible and in bounds:
/// without replacement when there are at least `n`, otherwise with.
pub fn sample_training_queries(sample: &SyntheticSample, n: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    let eligible: Vec<usize> = (0..sample.num_trajs())
        .filter(|&i| {
            let p = sample.trajs[i][0];
            sample.vis[i][0] == 1 && sample.in_bounds([p[0] as f64, p[1] as f64])
        })
        .collect();
    if eligible.is_empty() {
        return Err(DataError::Invalid("no trajectory starts visible and in bounds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(if eligible.len() >= n {
        sample_indices(&mut rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect()
    } else {
        (0..n).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect()
    })
}

/// One optimization batch of `B` sequences with `N` targets each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B * T, 3, H, W]`
    pub frames: Tensor<f32>,
    /// `[B, N, 2]`
    pub queries: Tensor<f32>,
    /// `[B * N, T, 2]`
    pub trajs: Tensor<f32>,
    /// `[B * N, T]`
    pub vis: Tensor<f32>,
}

pub fn assemble_batch(items: &[(SyntheticSample, Vec<usize>)]) -> Result<Batch, TrainError> {
    let (first, q0) = items.first().ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let (t, h, w, n) = (first.len, first.height, first.width, q0.len());
    let (mut frames, mut queries, mut trajs, mut vis) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, idx) in items {
        if (s.len, s.height, s.width, idx.len()) != (t, h, w, n) {
            return Err(TrainError::Config("batch items differ in size".into()));
        }
        frames.extend_from_slice(&s.frames);
        for &i in idx {
            queries.extend_from_slice(&s.trajs[i][0]);
            trajs.extend(s.trajs[i].iter().flatten());
            vis.extend(s.vis[i].iter().map(|&v| v as f32));
        }
    }
    let b = items.len();
    Ok(Batch {
        frames: Tensor::new(&[b * t, 3, h, w], frames)?,
        queries: Tensor::new(&[b, n, 2], queries)?,
        trajs: Tensor::new(&[b * n, t, 2], trajs)?,
        vis: Tensor::new(&[b * n, t], vis)?,
    })
}

/// Deterministic 64-bit mixing of a seed with stream coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        // splitmix64 finalizer
        x = x.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// Where raw sequences come from. `index` selects a sequence reproducibly.
pub trait SequenceSource: Send + Sync {
    fn sequence(&self, index: u64) -> Result<SyntheticSample, DataError>;
}

/// Renders a fresh scene for every index.
pub struct RenderedScenes {
    pub scene: SpriteSceneConfig,
    pub seed: u64,
}

impl SequenceSource for RenderedScenes {
    fn sequence(&self, index: u64) -> Result<SyntheticSample, DataError> {
        let config = SpriteSceneConfig { seed: derive_seed(self.seed, &[index]), ..self.scene.clone() };
        data::render_sequence(&config)
    }
}

/// Sequences loaded from a dataset directory, drawn uniformly by index.
pub struct StoredScenes {
    pub samples: Vec<SyntheticSample>,
    pub seed: u64,
}

impl StoredScenes {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest = io::read_manifest(dir)?;
        if manifest.sequences.is_empty() {
            return Err(DataError::Invalid(format!("dataset {} holds no sequences", dir.display())));
        }
        let samples = manifest.sequences.iter().map(|s| io::load_sample(&dir.join(s))).collect::<Result<_, _>>()?;
        Ok(Self { samples, seed: manifest.seed })
    }
}

impl SequenceSource for StoredScenes {
    fn sequence(&self, index: u64) -> Result<SyntheticSample, DataError> {
        let i = derive_seed(self.seed, &[index]) % self.samples.len() as u64;
        Ok(self.samples[i as usize].clone())
    }
}

/// A host sequence with `occluders` sprites from other sequences pasted on
/// top, all drawn reproducibly from `key`.
pub fn compose_sequence(source: &dyn SequenceSource, occluders: usize, key: u64) -> Result<SyntheticSample, DataError> {
    let mut s = source.sequence(derive_seed(key, &[0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(key, &[1]));
    for k in 0..occluders {
        let donor = source.sequence(derive_seed(key, &[2, k as u64]))?;
        match data::paste_random_occluder(&s, &donor, &mut rng) {
            Ok(out) => s = out,
            // a donor without sprites contributes nothing
            Err(DataError::Invalid(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(s)
}

/// Host plus pasted occluders, augmented, with `N` sampled queries.
/// Sequences without an eligible trajectory are skipped deterministically.
pub fn prepare_item(
    source: &dyn SequenceSource,
    occluders: usize,
    augment: &AugmentPolicy,
    n: usize,
    seed: u64,
    index: u64,
) -> Result<(SyntheticSample, Vec<usize>), DataError> {
    let mut last_err = None;
    for attempt in 0..16u64 {
        let key = derive_seed(seed, &[index, attempt]);
        let s = compose_sequence(source, occluders, key)?;
        let s = data::augment(&s, augment, derive_seed(key, &[3]))?;
        match sample_training_queries(&s, n, derive_seed(key, &[4])) {
            Ok(idx) => return Ok((s, idx)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

pub fn batch_for_step(source: &dyn SequenceSource, c: &TrainConfig, step: usize) -> Result<Batch, TrainError> {
    let items = (0..c.batch_size)
        .map(|b| {
            let index = (step * c.batch_size + b) as u64;
            prepare_item(source, c.scene.occluders, &c.augment, c.trajectories, c.seed, index)
        })
        .collect::<Result<Vec<_>, _>>()?;
    assemble_batch(&items)
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_main: f64,
    pub loss_ce: f64,
    pub loss_score: f64,
    pub lr: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,loss_main,loss_ce,loss_score,lr";

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss_main, self.loss_ce, self.loss_score, self.lr)
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        w.main * self.loss_main + w.visibility * self.loss_ce + w.score * self.loss_score
    }
}

/// Weights, moments and position of a run.
pub struct Trainer {
    pub tracker: Tracker<f32>,
    pub config: TrainConfig,
    pub opt: AdamW<f32>,
    /// Next step to run.
    pub step: usize,
}

fn non_finite(step: usize, detail: String, parts: [Option<f64>; 3]) -> TrainError {
    let [loss_main, loss_ce, loss_score] = parts.map(|p| p.unwrap_or(f64::NAN));
    TrainError::NonFinite { step, detail, loss_main, loss_ce, loss_score }
}

impl Trainer {
    pub fn new(tracker: Tracker<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if tracker.config.window != config.scene.frames {
            return Err(TrainError::Config(format!(
                "model window {} differs from the {} rendered frames",
                tracker.config.window, config.scene.frames
            )));
        }
        let opt = AdamW::new(&tracker);
        Ok(Self { tracker, config, opt, step: 0 })
    }

    /// Total loss of `batch`; component values land in `parts` as they are computed.
    fn forward_losses(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        batch: &Batch,
        parts: &mut [Option<f64>; 3],
    ) -> Result<Var, TensorError> {
        let cfg = &self.tracker.config;
        let fm = self.tracker.encode(tape, p, &batch.frames)?;
        let out = self.tracker.iterate(tape, p, &fm, &batch.queries, None)?;
        let target = tape.constant(batch.trajs.clone());
        let main = losses::loss_main(tape, &out.trajectories, target, cfg.gamma)?;
        parts[0] = Some(tape.value(main).item() as f64);
        let vis = losses::loss_visibility(tape, out.visibility, batch.vis.data())?;
        parts[1] = Some(tape.value(vis).item() as f64);
        let score = losses::loss_score(tape, &out.score_history, &batch.trajs, &batch.vis, cfg.radius, cfg.stride)?;
        parts[2] = Some(tape.value(score.loss).item() as f64);
        losses::total_loss(tape, main, vis, score.loss, &self.config.loss_weights)
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog, TrainError> {
        let step = self.step;
        let mut parts = [None; 3];
        let fail = |parts: [Option<f64>; 3], e: TensorError| match e {
            TensorError::NonFinite { op } => non_finite(step, format!("in {op}"), parts),
            other => TrainError::Tensor(other),
        };
        let mut tape = Tape::new();
        let p = self.tracker.bind(&mut tape, true);
        let total = match self.forward_losses(&mut tape, &p, batch, &mut parts) {
            Ok(v) => v,
            Err(e) => return Err(fail(parts, e)),
        };
        let grads = tape.backward(total).map_err(|e| fail(parts, e))?;
        self.tracker.params.zero_grads();
        self.tracker.params.accumulate(&grads, &p);
        let norm = self.tracker.params.grad_norm();
        if !norm.is_finite() {
            return Err(non_finite(step, "gradient norm".into(), parts));
        }
        if norm > self.config.grad_clip {
            let k = (self.config.grad_clip / norm) as f32;
            for param in self.tracker.params.iter_mut() {
                param.grad.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
        let lr = lr_at(&self.config, step);
        self.opt.step(&mut self.tracker, &self.config, lr);
        self.step += 1;
        let [loss_main, loss_ce, loss_score] = parts.map(|v| v.expect("all losses computed"));
        Ok(StepLog { step, loss_main, loss_ce, loss_score, lr })
    }

    /// Runs the remaining steps with batches produced on a background
    /// thread. Rows are appended to `log`; checkpoints and the final weights
    /// go to `out` when given.
    pub fn run(
        &mut self,
        source: Arc<dyn SequenceSource>,
        log: &mut dyn Write,
        out: Option<&Path>,
    ) -> Result<Vec<StepLog>, TrainError> {
        let rows = self.run_to(self.config.steps, source, log, out)?;
        if let Some(dir) = out {
            save_checkpoint(dir, "weights", self)?;
        }
        Ok(rows)
    }

    /// Like [`Trainer::run`] but stops before step `until` and writes no
    /// final weights.
    pub fn run_to(
        &mut self,
        until: usize,
        source: Arc<dyn SequenceSource>,
        log: &mut dyn Write,
        out: Option<&Path>,
    ) -> Result<Vec<StepLog>, TrainError> {
        let until = until.min(self.config.steps);
        let (tx, rx) = sync_channel(self.config.prefetch);
        let (start, config) = (self.step, self.config.clone());
        let producer = std::thread::spawn(move || {
            for s in start..until {
                if tx.send(batch_for_step(&*source, &config, s)).is_err() {
                    break;
                }
            }
        });
        let mut rows = Vec::new();
        let result = (|| {
            for _ in start..until {
                let batch = rx.recv().expect("producer sends one batch per step")?;
                let row = self.train_step(&batch)?;
                writeln!(log, "{}", row.csv())?;
                rows.push(row);
                let every = self.config.checkpoint_every;
                if let Some(dir) = out {
                    if every > 0 && self.step % every == 0 && self.step < self.config.steps {
                        save_checkpoint(dir, &format!("ckpt_{:06}", self.step), self)?;
                    }
                }
            }
            log.flush()?;
            Ok(())
        })();
        drop(rx);
        producer.join().expect("batch producer panicked");
        result.map(|_| rows)
    }
}

/// Contents of `<name>.json` next to `<name>.pipw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
}

/// Writes `<name>.pipw` (weights), `<name>.json` (configs and step) and
/// `<name>.adam.pipw` (optimizer moments).
pub fn save_checkpoint(dir: &Path, name: &str, trainer: &Trainer) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join(format!("{name}.pipw")))?);
    trainer.tracker.params.save(&mut w)?;
    w.flush()?;
    let sidecar = Sidecar { model: trainer.tracker.config.clone(), train: trainer.config.clone(), step: trainer.step };
    fs::write(dir.join(format!("{name}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    let names: Vec<String> = trainer.tracker.params.iter().map(|p| p.name.clone()).collect();
    let mut moments: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (n, m) in names.iter().zip(&trainer.opt.m) {
        moments.push((format!("m.{n}"), m));
    }
    for (n, v) in names.iter().zip(&trainer.opt.v) {
        moments.push((format!("v.{n}"), v));
    }
    let list: Vec<(&str, &Tensor<f32>)> = moments.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join(format!("{name}.adam.pipw")))?);
    write_weights(&mut w, &list)?;
    w.flush()?;
    Ok(())
}

/// `path` is the `.pipw` weights file; the sidecar shares its stem.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn read_sidecar(weights: &Path) -> Result<Sidecar, TrainError> {
    let path = sidecar_path(weights);
    let bytes = fs::read(&path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Model weights plus its configuration from the sidecar.
pub fn load_tracker(weights: &Path) -> Result<Tracker<f32>, TrainError> {
    let sidecar = read_sidecar(weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tracker = Tracker::new(sidecar.model, &mut rng).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut r = std::io::BufReader::new(fs::File::open(weights)?);
    tracker.params.load(&mut r)?;
    Ok(tracker)
}

/// Restores a trainer from a checkpoint written by [`save_checkpoint`].
pub fn resume(weights: &Path) -> Result<Trainer, TrainError> {
    let sidecar = read_sidecar(weights)?;
    let tracker = load_tracker(weights)?;
    let mut trainer = Trainer::new(tracker, sidecar.train)?;
    trainer.step = sidecar.step;
    trainer.opt.t = sidecar.step as u64;
    let adam = weights.with_extension("adam.pipw");
    let tensors: Vec<(String, Tensor<f32>)> = read_weights(&mut std::io::BufReader::new(fs::File::open(&adam)?))?;
    let names: Vec<String> = trainer.tracker.params.iter().map(|p| p.name.clone()).collect();
    if tensors.len() != 2 * names.len() {
        return Err(TensorError::Format(format!("{} holds {} tensors, expected {}", adam.display(), tensors.len(), 2 * names.len())).into());
    }
    for (i, n) in names.iter().enumerate() {
        let (m, v) = (&tensors[i], &tensors[names.len() + i]);
        if m.0 != format!("m.{n}") || v.0 != format!("v.{n}") || m.1.shape() != trainer.opt.m[i].shape() {
            return Err(TensorError::Format(format!("optimizer state does not match parameter {n}")).into());
        }
        trainer.opt.m[i] = m.1.clone();
        trainer.opt.v[i] = v.1.clone();
    }
    Ok(trainer)
}

/// Final-iteration positions and visibility for every target of a batch,
/// as `B * N` tracks of `T` points.
pub fn predict(tracker: &Tracker<f32>, frames: &Tensor<f32>, queries: &Tensor<f32>) -> Result<(Vec<Vec<[f32; 2]>>, Vec<Vec<f32>>), TensorError> {
    let mut tape = Tape::new();
    let p = tracker.bind(&mut tape, false);
    let fm = tracker.encode(&mut tape, &p, frames)?;
    let out = tracker.iterate(&mut tape, &p, &fm, queries, None)?;
    let last = *out.trajectories.last().expect("at least one iteration");
    let t = tracker.config.window;
    let tracks = tape.value(last).data().chunks(2 * t).map(|c| c.chunks(2).map(|q| [q[0], q[1]]).collect()).collect();
    let vis = tape.value(out.visibility).data().chunks(t).map(<[f32]>::to_vec).collect();
    Ok((tracks, vis))
}
