//! Training loop: joins stream and replay batches, computes the metric and
//! classification loss paths on one shared forward pass, applies one fused
//! parameter update, and triggers online/periodic memory maintenance.
//!
//! Task boundaries are never consulted here; the loop sees only an opaque
//! stream of batches. Evaluation checkpoints derive seen tasks from the
//! stream config on the evaluation side.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{amca, evaluate_checkpoint, EvalReport};
use crate::losses::{cls_loss, dml_loss, soft_labels};
use crate::memory::{
    argmax, augment_replay, dump_memory_csv, sampling_score, AugmentPolicy, EpisodicMemory,
    MemoryEntry, PerturbationPolicy,
};
use crate::nn::{apply_gradients, sgd_step, ModelState, OptimizerState};
use crate::seeding;
use crate::stream::{write_examples_csv, LabeledExample, StreamConfig, StreamState};

/// Per-iteration log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub dml: f64,
    pub focal_cb: f64,
    pub kl: f64,
    pub total: f64,
    pub memory_len: usize,
    pub lr: f64,
    /// Class occurrence counts of the joined (stream + replay) batch.
    pub class_counts: Vec<usize>,
    pub periodic_fired: bool,
}

/// Final artifacts of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub amca: f64,
    pub reports: Vec<EvalReport>,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub model: ModelState,
    pub optimizer: OptimizerState,
    pub memory: EpisodicMemory,
}

pub struct Trainer {
    config: RunConfig,
    /// Resolved stream config with the original seed; defines holdouts.
    holdout_stream: StreamConfig,
    model: ModelState,
    opt: OptimizerState,
    memory: EpisodicMemory,
    perturbation: PerturbationPolicy,
    augment: AugmentPolicy,
    replay_seed: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let holdout_stream = config.stream.resolved()?;
        let model = ModelState::init(&config.model, config.trainer.seed)?;
        let opt = OptimizerState {
            iteration: 0,
            ..config.optimizer.clone()
        };
        let memory = EpisodicMemory::new(
            config.memory.capacity,
            config.memory.online_quota,
            config.memory.keep_size,
        );
        let perturbation = PerturbationPolicy {
            seed: seeding::mix(&[config.perturbation.seed, config.trainer.seed]),
            ..config.perturbation.clone()
        };
        let augment = AugmentPolicy {
            seed: seeding::mix(&[config.augment.seed, config.trainer.seed]),
            ..config.augment.clone()
        };
        let replay_seed = seeding::mix(&[config.trainer.seed, seeding::salt::REPLAY]);
        Ok(Self {
            config,
            holdout_stream,
            model,
            opt,
            memory,
            perturbation,
            augment,
            replay_seed,
        })
    }

    /// The stream the trainer consumes: same distribution as the holdout
    /// stream, realization mixed with the run seed.
    pub fn training_stream(&self) -> Result<StreamState> {
        let mut cfg = self.holdout_stream.clone();
        cfg.seed = seeding::mix(&[cfg.seed, self.config.trainer.seed]);
        StreamState::new(cfg)
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn memory(&self) -> &EpisodicMemory {
        &self.memory
    }

    pub fn iteration(&self) -> u64 {
        self.opt.iteration
    }

    fn memory_enabled(&self) -> bool {
        self.config.memory.capacity > 0
    }

    /// One training iteration over a stream batch.
    pub fn train_step(&mut self, stream_batch: &[LabeledExample]) -> Result<StepReport> {
        if stream_batch.is_empty() {
            return Err(Error::Empty("train_step needs a non-empty batch".into()));
        }
        let t = self.opt.iteration;
        let k = stream_batch.len();
        let d = self.model.input_dim();
        let classes = self.model.num_classes();
        let cfg = &self.config;

        // Replay selection and feature-space augmentation.
        let replayed = if self.memory_enabled() && cfg.trainer.replay_batch > 0 {
            self.memory
                .sample_replay(cfg.trainer.replay_batch, seeding::mix(&[self.replay_seed, t]))
        } else {
            Vec::new()
        };
        let replay_features = augment_replay(&replayed, &self.augment, t);

        // Joined batch: stream rows first, replay rows after.
        let rows = k + replayed.len();
        let mut batch = Array2::zeros((rows, d));
        let mut labels = Vec::with_capacity(rows);
        let mut soft_targets: Vec<Option<Array1<f64>>> = Vec::with_capacity(rows);
        for (i, e) in stream_batch.iter().enumerate() {
            for j in 0..d {
                batch[[i, j]] = e.features[j];
            }
            labels.push(e.label);
            soft_targets.push(None);
        }
        for (r, entry) in replayed.iter().enumerate() {
            for j in 0..d {
                batch[[k + r, j]] = replay_features[[r, j]];
            }
            labels.push(entry.example.label);
            soft_targets.push(Some(soft_labels(&entry.stored_logits, cfg.losses.tau)));
        }
        let mut class_counts = vec![0usize; classes];
        for &y in &labels {
            class_counts[y] += 1;
        }

        // One forward pass feeds both loss paths, the online memory scores
        // and the stored logits of new insertions.
        let pass = self.model.forward(&batch)?;
        let dml = dml_loss(pass.embeddings(), &labels, &cfg.losses);
        let cls = cls_loss(
            pass.logits(),
            &labels,
            &soft_targets,
            &class_counts,
            t,
            &cfg.losses,
        )?;
        let total = dml.value + cls.output.value;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {t}: dml={} cls={}",
                dml.value, cls.output.value
            )));
        }

        let lr = self.opt.current_lr();
        let d_z = dml.grad_embeddings.as_ref();
        let d_l = cls.output.grad_logits.as_ref();
        if cfg.trainer.fused_update {
            let grads = self.model.backward(&pass, d_z, d_l)?;
            sgd_step(&mut self.model, &mut self.opt, &grads)?;
        } else {
            // Two sequential updates, both gradients taken at the pre-step
            // parameters: backbone from the metric loss, then the full
            // network from the classification loss.
            let metric_grads = self.model.backward(&pass, d_z, None)?.backbone_only();
            let cls_grads = self.model.backward(&pass, None, d_l)?;
            if !metric_grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite metric gradient at iteration {t}"
                )));
            }
            apply_gradients(&mut self.model, lr, &metric_grads);
            sgd_step(&mut self.model, &mut self.opt, &cls_grads)?;
        }

        // Online memory update from this step's forward outputs, stream rows
        // only; replayed rows are never reinserted.
        let mut periodic_fired = false;
        if self.memory_enabled() {
            let candidates: Vec<MemoryEntry> = stream_batch
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let logits = pass.logits_row(i);
                    let probs = soft_labels(&logits, 1.0);
                    let predicted = argmax(&logits);
                    MemoryEntry {
                        example: e.clone(),
                        stored_logits: logits,
                        score: sampling_score(&probs, predicted, e.label),
                        inserted_at: t,
                    }
                })
                .collect();
            self.memory.online_update(candidates.clone());

            if self.memory.is_full() || t % cfg.trainer.periodic_interval == 0 {
                periodic_fired = true;
                self.memory.periodic_update(
                    candidates,
                    &self.model,
                    &self.perturbation,
                    cfg.memory.refresh_logits,
                )?;
            }
        }

        debug_assert!(self.memory.len() <= cfg.memory.capacity);
        Ok(StepReport {
            iteration: t,
            dml: dml.value,
            focal_cb: cls.focal_value,
            kl: cls.kl_value,
            total,
            memory_len: self.memory.len(),
            lr,
            class_counts,
            periodic_fired,
        })
    }

    fn evaluate_now(&self, completed: u64) -> Result<EvalReport> {
        evaluate_checkpoint(
            &self.model,
            &self.holdout_stream,
            completed,
            self.config.trainer.holdout_per_class,
        )
    }
}

/// Run a full training session. When `out_dir` is given, emits
/// `steps.jsonl`, `checkpoints/iter_NNNNNN/`, `memory.csv` and
/// `summary.json`; on a non-finite-loss abort the offending batch is dumped
/// alongside the partial artifacts.
pub fn run(config: RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    let mut stream = trainer.training_stream()?;

    let mut steps_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(
                dir.join("steps.jsonl"),
            )?))
        }
        None => None,
    };

    let mut reports: Vec<EvalReport> = Vec::new();
    let total = config.trainer.total_iterations;
    let every = config.trainer.checkpoint_every.max(1);

    for t in 0..total {
        let batch = stream.next_batch(config.trainer.stream_batch);
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    let _ = write_examples_csv(
                        fs::File::create(dir.join("diagnostic_batch.csv"))?,
                        &batch,
                    );
                    if let Some(f) = steps_file.as_mut() {
                        let _ = f.flush();
                    }
                }
                return Err(e);
            }
        };
        if report.memory_len > config.memory.capacity {
            return Err(Error::Numeric(format!(
                "memory overflow at iteration {t}: {} > {}",
                report.memory_len, config.memory.capacity
            )));
        }
        if let Some(f) = steps_file.as_mut() {
            serde_json::to_writer(&mut *f, &report)?;
            writeln!(f)?;
        }

        let completed = t + 1;
        if completed % every == 0 {
            reports.push(trainer.evaluate_now(completed)?);
            if let Some(dir) = out_dir {
                let ckpt = dir.join("checkpoints").join(format!("iter_{completed:06}"));
                save_checkpoint(&ckpt, &trainer.model, &trainer.opt)?;
            }
        }
    }

    if reports.is_empty() {
        reports.push(trainer.evaluate_now(total)?);
    }
    if let Some(f) = steps_file.as_mut() {
        f.flush()?;
    }

    let summary = RunSummary {
        amca: amca(&reports)?,
        reports,
        config_hash: config.hash()?,
        seed: config.trainer.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        dump_memory_csv(&dir.join("memory.csv"), &trainer.memory)?;
        let final_ckpt = dir.join("checkpoints").join("final");
        save_checkpoint(&final_ckpt, &trainer.model, &trainer.opt)?;
    }

    Ok(RunOutcome {
        summary,
        model: trainer.model,
        optimizer: trainer.opt,
        memory: trainer.memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.stream.task_lengths = vec![30, 30];
        cfg.stream.seed = 5;
        cfg.model.hidden = vec![16];
        cfg.model.embedding_dim = 8;
        cfg.trainer.total_iterations = 40;
        cfg.trainer.checkpoint_every = 20;
        cfg.trainer.holdout_per_class = 5;
        cfg.trainer.seed = 1;
        cfg.memory.capacity = 30;
        cfg.memory.online_quota = 5;
        cfg.memory.keep_size = 15;
        cfg.trainer.replay_batch = 4;
        cfg.perturbation.passes = 2;
        cfg
    }

    #[test]
    fn first_step_with_empty_memory_is_stream_only() {
        let cfg = small_config();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut stream = trainer.training_stream().unwrap();
        let batch = stream.next_batch(cfg.trainer.stream_batch);
        let report = trainer.train_step(&batch).unwrap();
        assert_eq!(report.iteration, 0);
        assert_eq!(report.kl, 0.0);
        assert_eq!(
            report.class_counts.iter().sum::<usize>(),
            cfg.trainer.stream_batch
        );
    }

    #[test]
    fn replay_rows_join_the_batch() {
        let cfg = small_config();
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut stream = trainer.training_stream().unwrap();
        for _ in 0..3 {
            let batch = stream.next_batch(cfg.trainer.stream_batch);
            trainer.train_step(&batch).unwrap();
        }
        assert!(trainer.memory().len() >= cfg.trainer.replay_batch);
        let batch = stream.next_batch(cfg.trainer.stream_batch);
        let report = trainer.train_step(&batch).unwrap();
        assert_eq!(
            report.class_counts.iter().sum::<usize>(),
            cfg.trainer.stream_batch + cfg.trainer.replay_batch
        );
    }

    #[test]
    fn one_forward_one_backward_per_fused_step() {
        let mut cfg = small_config();
        cfg.trainer.periodic_interval = 1000;
        cfg.memory.capacity = 500;
        cfg.memory.keep_size = 250;
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut stream = trainer.training_stream().unwrap();
        // Step 0 fires the periodic sweep (0 % interval == 0); measure step 1.
        let batch = stream.next_batch(cfg.trainer.stream_batch);
        trainer.train_step(&batch).unwrap();
        let f0 = trainer.model().counters.forward_calls();
        let b0 = trainer.model().counters.backward_calls();
        let batch = stream.next_batch(cfg.trainer.stream_batch);
        let report = trainer.train_step(&batch).unwrap();
        assert!(!report.periodic_fired);
        assert_eq!(trainer.model().counters.forward_calls(), f0 + 1);
        assert_eq!(trainer.model().counters.backward_calls(), b0 + 1);
    }

    #[test]
    fn periodic_fires_on_interval_and_when_full() {
        let mut cfg = small_config();
        cfg.trainer.periodic_interval = 7;
        cfg.trainer.total_iterations = 30;
        cfg.memory.capacity = 18;
        cfg.memory.keep_size = 9;
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut stream = trainer.training_stream().unwrap();
        let mut fired = Vec::new();
        let mut lens = vec![0usize];
        for t in 0..cfg.trainer.total_iterations {
            let batch = stream.next_batch(cfg.trainer.stream_batch);
            let report = trainer.train_step(&batch).unwrap();
            // Condition oracle: interval hit, or memory reached capacity
            // after the online insertion (len before + min(quota, free)).
            let len_before = *lens.last().unwrap();
            let free = cfg.memory.capacity - len_before;
            let inserted = if free >= cfg.memory.online_quota {
                cfg.memory.online_quota
            } else {
                free
            }
            .min(cfg.trainer.stream_batch);
            let full_after_online = len_before + inserted >= cfg.memory.capacity;
            let expected = t % cfg.trainer.periodic_interval == 0 || full_after_online;
            assert_eq!(report.periodic_fired, expected, "iteration {t}");
            fired.push(report.periodic_fired);
            lens.push(report.memory_len);
            assert!(report.memory_len <= cfg.memory.capacity);
        }
        assert!(fired[0], "interval condition holds at t=0");
        assert!(fired.iter().filter(|&&f| f).count() >= 4);
    }

    #[test]
    fn zero_iterations_leaves_model_at_init() {
        let mut cfg = small_config();
        cfg.trainer.total_iterations = 0;
        let outcome = run(cfg.clone(), None).unwrap();
        let fresh = ModelState::init(&cfg.model, cfg.trainer.seed).unwrap();
        assert_eq!(outcome.model.head, fresh.head);
        assert_eq!(outcome.model.iteration, 0);
        assert_eq!(outcome.summary.reports.len(), 1);
    }

    #[test]
    fn identical_seeds_reproduce_artifacts_bitwise() {
        let cfg = small_config();
        let dir_a = tempfile::TempDir::new().unwrap();
        let dir_b = tempfile::TempDir::new().unwrap();
        let a = run(cfg.clone(), Some(dir_a.path())).unwrap();
        let b = run(cfg, Some(dir_b.path())).unwrap();
        assert_eq!(a.summary.amca, b.summary.amca);
        let steps_a = fs::read(dir_a.path().join("steps.jsonl")).unwrap();
        let steps_b = fs::read(dir_b.path().join("steps.jsonl")).unwrap();
        assert_eq!(steps_a, steps_b);
    }

    #[test]
    fn different_seeds_diverge() {
        let cfg = small_config();
        let mut other = cfg.clone();
        other.trainer.seed = 2;
        let a = run(cfg, None).unwrap();
        let b = run(other, None).unwrap();
        assert_ne!(a.model.head, b.model.head);
    }

    #[test]
    fn delta_schedule_governs_kl_contribution() {
        let mut cfg = small_config();
        cfg.losses.delta_schedule = vec![crate::losses::DeltaMilestone {
            iteration: 5,
            value: 0.5,
        }];
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut stream = trainer.training_stream().unwrap();
        for t in 0..12u64 {
            let batch = stream.next_batch(cfg.trainer.stream_batch);
            let report = trainer.train_step(&batch).unwrap();
            let delta = cfg.losses.delta_at(t);
            let residual = report.total - report.dml - cfg.losses.gamma_cls * report.focal_cb;
            assert_abs_diff_eq!(residual, delta * report.kl, epsilon = 1e-10);
            if t < 5 {
                assert_eq!(report.kl, 0.0);
            }
        }
    }

    #[test]
    fn fused_and_sequential_updates_agree() {
        let cfg = small_config();
        let mut sequential = cfg.clone();
        sequential.trainer.fused_update = false;

        let mut tr_a = Trainer::new(cfg.clone()).unwrap();
        let mut tr_b = Trainer::new(sequential).unwrap();
        let mut stream_a = tr_a.training_stream().unwrap();
        let mut stream_b = tr_b.training_stream().unwrap();
        for _ in 0..5 {
            let ba = stream_a.next_batch(cfg.trainer.stream_batch);
            let bb = stream_b.next_batch(cfg.trainer.stream_batch);
            assert_eq!(ba, bb);
            tr_a.train_step(&ba).unwrap();
            tr_b.train_step(&bb).unwrap();
        }
        for (la, lb) in tr_a.model().layers.iter().zip(&tr_b.model().layers) {
            for (x, y) in la.weights.iter().zip(lb.weights.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
        for (x, y) in tr_a.model().head.iter().zip(tr_b.model().head.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn naive_config_disables_memory_machinery() {
        let mut cfg = small_config();
        cfg.memory.capacity = 0;
        cfg.memory.online_quota = 0;
        cfg.memory.keep_size = 0;
        cfg.trainer.replay_batch = 0;
        let outcome = run(cfg, None).unwrap();
        assert_eq!(outcome.memory.len(), 0);
    }

    #[test]
    fn run_emits_artifacts() {
        let cfg = small_config();
        let dir = tempfile::TempDir::new().unwrap();
        let outcome = run(cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("steps.jsonl").exists());
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("memory.csv").exists());
        assert!(dir.path().join("checkpoints/iter_000020").exists());
        assert!(dir.path().join("checkpoints/final").exists());
        assert_eq!(outcome.summary.reports.len(), 2);
        let text = fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 40);
    }
}
