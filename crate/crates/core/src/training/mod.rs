//! Optimizer loop, schedule, checkpointing and the noise-free fine-tune.

mod checkpoint;
mod data;

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{sample_batch, synthetic_image, BatchSpec, Dataset, TrainItem};

use crate::autograd::Tape;
use crate::degradation::DegradationRanges;
use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;
use crate::losses::{objective, LossBreakdown, LossWeights, SampleTensors};
use crate::model::{Dmsr, MnmMode, ModelConfig};
use crate::params::ParameterSet;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr_patch: usize,
    pub total_iters: u64,
    pub base_lr: f64,
    pub halve_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Iterations at the start during which only the extractor's
    /// degradation-reconstruction term is optimized. 0 trains jointly from
    /// the first step.
    pub warmup_iters: u64,
    pub finetune_iters: u64,
    pub finetune_lr: f64,
    /// Filled from the `degradation` section of a run config.
    #[serde(skip)]
    pub ranges: DegradationRanges,
    /// Filled from the `loss` section of a run config.
    #[serde(skip)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr_patch: 48,
            total_iters: 500_000,
            base_lr: 1e-4,
            halve_every: 200_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            seed: 0,
            checkpoint_every: 10_000,
            log_every: 100,
            grad_clip: None,
            warmup_iters: 0,
            finetune_iters: 100_000,
            finetune_lr: 1e-4,
            ranges: DegradationRanges::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 || self.lr_patch == 0 {
            return Err(invalid("batch and lr_patch must be >= 1"));
        }
        if self.halve_every == 0 {
            return Err(invalid("halve_every must be >= 1"));
        }
        if !(self.base_lr >= 0.0 && self.finetune_lr >= 0.0) {
            return Err(invalid("learning rates must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("adam needs beta in [0, 1) and eps > 0"));
        }
        if self.ranges.scale != model.scale {
            return Err(invalid(format!(
                "degradation scale {} differs from model scale {}",
                self.ranges.scale, model.scale
            )));
        }
        if self.ranges.kernel_size != model.blur_kernel_size {
            return Err(invalid(format!(
                "degradation kernel size {} differs from model kernel size {}",
                self.ranges.kernel_size, model.blur_kernel_size
            )));
        }
        self.weights.validate()
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch: self.batch,
            lr_patch: self.lr_patch,
            augment: self.augment,
            ranges: self.ranges,
        }
    }
}

/// `base_lr * 0.5^floor(iter / halve_every)`.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (iter / cfg.halve_every.max(1)).min(1100) as i32;
    cfg.base_lr * 0.5f64.powi(halvings)
}

/// Parameters, Adam moments and the iteration counter. The batch stream for
/// iteration `i` is derived from `(seed, i)`, so no separate rng state is kept.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub iteration: u64,
    pub seed: u64,
    pub pca_hash: String,
}

impl TrainState {
    pub fn new(model: Dmsr, pca_hash: impl Into<String>, seed: u64) -> Self {
        let zeros: Vec<Tensor<f32>> = model.params.iter().map(|(_, e)| Tensor::zeros(e.tensor.shape())).collect();
        Self {
            config: model.config,
            params: model.params,
            v: zeros.clone(),
            m: zeros,
            iteration: 0,
            seed,
            pca_hash: pca_hash.into(),
        }
    }

    pub fn model(&self) -> Dmsr {
        Dmsr {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn into_model(self) -> Dmsr {
        Dmsr {
            config: self.config,
            params: self.params,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                pca_hash: self.pca_hash.clone(),
                iteration: self.iteration,
                seed: self.seed,
                has_moments: true,
                config: self.config.clone(),
            },
            params: self.params.clone(),
            moments: Some((self.m.clone(), self.v.clone())),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let (m, v) = ck.moments.unwrap_or_else(|| {
            let z: Vec<Tensor<f32>> = ck.params.iter().map(|(_, e)| Tensor::zeros(e.tensor.shape())).collect();
            (z.clone(), z)
        });
        Self {
            config: ck.header.config,
            params: ck.params,
            m,
            v,
            iteration: ck.header.iteration,
            seed: ck.header.seed,
            pca_hash: ck.header.pca_hash,
        }
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    state.to_checkpoint().write(path)
}

/// Loads a checkpoint, refusing it unless it matches `expected` array by array.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let ck = Checkpoint::read(path)?;
    if let Some(cfg) = expected {
        ck.check_config(cfg)?;
    }
    Ok(TrainState::from_checkpoint(ck))
}

/// Network-layout tensors for one item. In scalar-noise mode the noise
/// target is the constant map of the sampled level.
pub fn item_tensors(item: &TrainItem, cfg: &ModelConfig) -> SampleTensors<f32> {
    let s = &item.sample;
    let noise_gt = match cfg.mnm_mode {
        MnmMode::NoiseMap => s.noise_map_gt.to_chw(),
        MnmMode::NoiseScalar => {
            let (h, w, c) = s.lr.dims();
            ImageTensor::filled(h, w, c, (s.spec.noise_level / 255.0) as f32).to_chw()
        }
    };
    SampleTensors {
        lr: s.lr.to_chw(),
        lr_target: s.lr_preclamp.to_chw(),
        hr: item.hr.to_chw(),
        kernel_gt: Tensor::from_vec(&[s.kernel_gt.size().pow(2)], s.kernel_gt.to_f32()),
        noise_gt,
    }
}

/// Mean loss and mean gradient over a batch, accumulated in item order.
pub fn batch_gradients(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    items: &[SampleTensors<f32>],
    w: &LossWeights,
    iteration: u64,
) -> Result<(LossBreakdown, IndexMap<String, Tensor<f32>>)> {
    let mut acc: IndexMap<String, Tensor<f32>> =
        params.iter().map(|(n, e)| (n.to_string(), Tensor::zeros(e.tensor.shape()))).collect();
    let mut mean = LossBreakdown::default();
    let inv = 1.0 / items.len() as f64;
    for item in items {
        let mut tape = Tape::new(params);
        let obj = objective(&mut tape, cfg, w, item);
        let b = obj.breakdown(&tape);
        LossBreakdown::combine(b.re, b.dr, b.dc_lr, b.dc_kernel, b.dc_noise, w, iteration)?;
        let grads = tape.backward(obj.total);
        for (name, g) in tape.param_grads(&grads) {
            acc[&name].add_assign(&g);
        }
        mean.add_scaled(&b, inv);
    }
    for g in acc.values_mut() {
        g.scale(inv as f32);
        if !g.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient",
                iteration,
            });
        }
    }
    Ok((mean, acc))
}

fn weights_at(cfg: &TrainConfig, iteration: u64) -> LossWeights {
    if iteration < cfg.warmup_iters {
        LossWeights {
            re: 0.0,
            dc: 0.0,
            ..cfg.weights.clone()
        }
    } else {
        cfg.weights.clone()
    }
}

/// One Adam step at learning rate `rate` on an already-sampled batch.
pub fn train_step(state: &mut TrainState, batch: &[TrainItem], cfg: &TrainConfig, rate: f64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let tensors: Vec<SampleTensors<f32>> = batch.iter().map(|it| item_tensors(it, &state.config)).collect();
    let w = weights_at(cfg, state.iteration);
    let (loss, mut grads) = batch_gradients(&state.params, &state.config, &tensors, &w, state.iteration)?;

    if let Some(max_norm) = cfg.grad_clip {
        let norm = grads.values().flat_map(|g| g.data()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = (max_norm / norm) as f32;
            grads.values_mut().for_each(|g| g.scale(s));
        }
    }

    let t = (state.iteration + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step = (rate / c1) as f32;
    let (b1f, b2f, eps) = (b1 as f32, b2 as f32, cfg.eps as f32);
    let c2_sqrt = c2.sqrt() as f32;
    for (i, (name, e)) in state.params.iter_mut().enumerate() {
        let g = &grads[name];
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1f * m[j] + (1.0 - b1f) * gj;
            v[j] = b2f * v[j] + (1.0 - b2f) * gj * gj;
            let delta = step * m[j] / (v[j].sqrt() / c2_sqrt + eps);
            if delta != 0.0 {
                *p -= delta;
            }
        }
    }
    state.iteration += 1;
    Ok(loss)
}

/// How the learning rate evolves over a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateRule {
    Schedule,
    Constant(f64),
}

/// Where a run writes its artifacts. Everything is optional.
#[derive(Default)]
pub struct RunOutput<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains until `state.iteration == until`, sampling each batch from the
/// stream `(state.seed, iteration)`. Returns one loss row per iteration.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    until: u64,
    rule: RateRule,
    out: &mut RunOutput<'_>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate(&state.config)?;
    let spec = cfg.batch_spec();
    let mut last_good = String::from("none");
    let mut rows = Vec::new();
    if let Some(log) = out.log.as_deref_mut() {
        writeln!(log, "{}", LossBreakdown::CSV_HEADER)?;
    }
    while state.iteration < until {
        let it = state.iteration;
        let rate = match rule {
            RateRule::Schedule => lr_schedule(it, cfg),
            RateRule::Constant(r) => r,
        };
        let batch = sample_batch(data, &spec, &mut rng::stream(state.seed, it))?;
        let loss = match train_step(state, &batch, cfg, rate) {
            Ok(l) => l,
            Err(Error::NonFinite { term, iteration }) => {
                log::error!("non-finite `{term}` at iteration {iteration}");
                return Err(Error::Diverged { iteration, last_good });
            }
            Err(e) => return Err(e),
        };
        let done = state.iteration;
        if let Some(log) = out.log.as_deref_mut() {
            if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == until) {
                writeln!(log, "{}", loss.csv_row(done, rate))?;
            }
        }
        if let Some(dir) = &out.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == until) {
                let path = dir.join(format!("checkpoint_{done:08}.dmcp"));
                save_checkpoint(state, &path)?;
                last_good = path.display().to_string();
            }
        }
        rows.push(loss);
    }
    Ok(rows)
}

/// Continues training with the noise level pinned to 0 at a constant rate
/// for `cfg.finetune_iters` more iterations.
pub fn finetune_noise_free(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig, out: &mut RunOutput<'_>) -> Result<Vec<LossBreakdown>> {
    let nf = noise_free_config(cfg);
    let until = state.iteration + cfg.finetune_iters;
    train(state, data, &nf, until, RateRule::Constant(cfg.finetune_lr), out)
}

pub fn noise_free_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        ranges: cfg.ranges.noise_free(),
        warmup_iters: 0,
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_projection;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_state(seed: u64) -> TrainState {
        let cfg = ModelConfig::tiny(2);
        let pca = default_projection(&cfg, 0).unwrap();
        TrainState::new(Dmsr::new(cfg, &pca, seed).unwrap(), pca.hash(), seed)
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            batch: 2,
            lr_patch: 8,
            total_iters: 6,
            base_lr: 1e-3,
            log_every: 1,
            checkpoint_every: 0,
            ranges: DegradationRanges {
                scale: 2,
                kernel_size: 5,
                ..DegradationRanges::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_closed_form() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(199_999, &c), 1e-4);
        assert_eq!(lr_schedule(200_000, &c), 5e-5);
        assert_eq!(lr_schedule(400_000, &c), 2.5e-5);
        for it in (0..500_000).step_by(12_345) {
            assert_eq!(lr_schedule(it, &c), 1e-4 * 0.5f64.powi((it / 200_000) as i32));
        }
    }

    #[test]
    fn zero_rate_leaves_params_bit_identical() {
        let mut s = tiny_state(1);
        let before = s.params.clone();
        let cfg = tiny_train_config();
        let batch = sample_batch(&Dataset::synthetic(2, 24, 24, 1), &cfg.batch_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        train_step(&mut s, &batch, &cfg, 0.0).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(s.params.iter()) {
            let same = a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn every_array_reaches_the_optimizer() {
        let mut s = tiny_state(2);
        let before = s.params.clone();
        let cfg = tiny_train_config();
        let batch = sample_batch(&Dataset::synthetic(2, 24, 24, 1), &cfg.batch_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tensors: Vec<_> = batch.iter().map(|it| item_tensors(it, &s.config)).collect();
        let (_, grads) = batch_gradients(&s.params, &s.config, &tensors, &cfg.weights, 0).unwrap();
        assert!(grads.keys().map(String::as_str).eq(s.params.names()));
        train_step(&mut s, &batch, &cfg, 1e-3).unwrap();
        let mut moved = 0;
        for ((name, a), (_, b)) in before.iter().zip(s.params.iter()) {
            let nonzero = grads[name].data().iter().any(|&g| g != 0.0);
            let changed = a.tensor.max_abs_diff(&b.tensor) > 0.0;
            assert_eq!(nonzero, changed, "{name}");
            moved += changed as usize;
        }
        assert!(moved * 10 >= s.params.len() * 9, "{moved} of {}", s.params.len());
    }

    #[test]
    fn loss_descends_on_a_frozen_batch() {
        let mut s = tiny_state(3);
        let cfg = TrainConfig {
            augment: false,
            ..tiny_train_config()
        };
        let batch = sample_batch(&Dataset::synthetic(2, 24, 24, 5), &cfg.batch_spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let first = train_step(&mut s, &batch, &cfg, 1e-3).unwrap().total;
        let mut last = first;
        for _ in 0..50 {
            last = train_step(&mut s, &batch, &cfg, 1e-3).unwrap().total;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny_state(4);
        let cfg = tiny_train_config();
        let data = Dataset::synthetic(2, 24, 24, 1);
        train(&mut s, &data, &cfg, 2, RateRule::Schedule, &mut RunOutput::default()).unwrap();
        let path = dir.path().join("a.dmcp");
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path, Some(&s.config)).unwrap();
        assert_eq!(back.iteration, 2);
        assert_eq!(back.pca_hash, s.pca_hash);
        assert_eq!(back.config, s.config);
        for ((n1, a), (n2, b)) in s.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.tensor, b.tensor);
        }
        assert_eq!(s.m, back.m);
        assert_eq!(s.v, back.v);

        let other = ModelConfig {
            channels: 16,
            ..s.config.clone()
        };
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "sr.mnm.weight"),
            r => panic!("expected mismatch, got {:?}", r.map(|s| s.iteration)),
        }
        let other = ModelConfig {
            n_rcab_per_group: 3,
            ..s.config.clone()
        };
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "sr.group0.rcab2.conv1.weight"),
            r => panic!("expected mismatch, got {:?}", r.map(|s| s.iteration)),
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Format { .. })));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config();
        let data = Dataset::synthetic(3, 24, 24, 7);
        let mut straight = tiny_state(5);
        let full = train(&mut straight, &data, &cfg, 4, RateRule::Schedule, &mut RunOutput::default()).unwrap();

        let mut a = tiny_state(5);
        train(&mut a, &data, &cfg, 2, RateRule::Schedule, &mut RunOutput::default()).unwrap();
        let path = dir.path().join("mid.dmcp");
        save_checkpoint(&a, &path).unwrap();
        let mut b = load_checkpoint(&path, None).unwrap();
        let rest = train(&mut b, &data, &cfg, 4, RateRule::Schedule, &mut RunOutput::default()).unwrap();
        assert_eq!(rest, full[2..]);
        assert_eq!(b.params.iter().next().unwrap().1.tensor, straight.params.iter().next().unwrap().1.tensor);
    }

    #[test]
    fn finetune_pins_noise_and_continues_counter() {
        let cfg = TrainConfig {
            finetune_iters: 2,
            ..tiny_train_config()
        };
        let nf = noise_free_config(&cfg);
        let data = Dataset::synthetic(2, 24, 24, 1);
        for it in 0..5 {
            let b = sample_batch(&data, &nf.batch_spec(), &mut rng::stream(3, it)).unwrap();
            for item in &b {
                assert_eq!(item.sample.spec.noise_level, 0.0);
                assert!(item.sample.noise_map_gt.data().iter().all(|&v| v == 0.0));
            }
        }
        let mut s = tiny_state(6);
        s.iteration = 10;
        let rows = finetune_noise_free(&mut s, &data, &cfg, &mut RunOutput::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(s.iteration, 12);
    }

    #[test]
    fn csv_log_and_periodic_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..tiny_train_config()
        };
        let mut s = tiny_state(7);
        let mut log = Vec::new();
        let mut out = RunOutput {
            log: Some(&mut log),
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        train(&mut s, &Dataset::synthetic(2, 24, 24, 1), &cfg, 3, RateRule::Schedule, &mut out).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LossBreakdown::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
        assert!(dir.path().join("checkpoint_00000002.dmcp").exists());
        assert!(dir.path().join("checkpoint_00000003.dmcp").exists());
    }

    #[test]
    fn divergence_names_last_good_checkpoint() {
        let mut s = tiny_state(8);
        s.params.get_mut("sr.tail.bias").unwrap().data_mut()[0] = f32::NAN;
        let cfg = tiny_train_config();
        let r = train(&mut s, &Dataset::synthetic(2, 24, 24, 1), &cfg, 2, RateRule::Schedule, &mut RunOutput::default());
        match r {
            Err(Error::Diverged { iteration, last_good }) => {
                assert_eq!(iteration, 0);
                assert_eq!(last_good, "none");
            }
            other => panic!("{:?}", other.map(|r| r.len())),
        }
    }

    #[test]
    fn config_validation() {
        let m = ModelConfig::tiny(2);
        assert!(tiny_train_config().validate(&m).is_ok());
        assert!(TrainConfig { batch: 0, ..tiny_train_config() }.validate(&m).is_err());
        assert!(TrainConfig::default().validate(&m).is_err());
    }
}
