//! Uncertainty-guided episodic memory.
//!
//! Two maintenance paths keep a bounded store of past examples:
//!
//! * online: each stream batch is scored by entropy plus a hard-negative
//!   bonus and the top few are inserted while capacity lasts;
//! * periodic: memory plus the incoming batch are re-scored by Monte-Carlo
//!   prediction consistency under feature perturbations and only the most
//!   uncertain survive the sweep.
//!
//! Replay draws from the store with inverse class-frequency weights so rare
//! classes are rehearsed disproportionately often.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ModelState;
use crate::seeding::{self, salt};
use crate::stream::LabeledExample;

/// A stored example with the logits captured at insertion time and its
/// current sampling score.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub example: LabeledExample,
    pub stored_logits: Array1<f64>,
    pub score: f64,
    pub inserted_at: u64,
}

/// Monte-Carlo scoring policy: `passes` perturbed forward passes at
/// Gaussian scale `perturbation_scale`, all derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationPolicy {
    pub passes: usize,
    pub perturbation_scale: f64,
    pub seed: u64,
}

impl Default for PerturbationPolicy {
    fn default() -> Self {
        Self {
            passes: 8,
            perturbation_scale: 0.1,
            seed: 0,
        }
    }
}

/// Feature-space replay augmentation: additive Gaussian noise plus random
/// per-dimension scaling, deterministic per (seed, entry id, iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub noise_scale: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_scale: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            seed: 0,
        }
    }
}

/// Bounded collection of memory entries, kept sorted by score descending
/// (ties broken toward newer entries).
#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    entries: Vec<MemoryEntry>,
    pub capacity: usize,
    pub online_quota: usize,
    pub keep_size: usize,
}

/// Entropy plus hard-negative sampling score for online insertion:
/// u = −Σ p ln p, plus 0.5 when the prediction is wrong. 0·ln 0 counts as 0.
pub fn sampling_score(probs: &Array1<f64>, predicted: usize, actual: usize) -> f64 {
    let entropy: f64 = probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    entropy + if predicted != actual { 0.5 } else { 0.0 }
}

/// Argmax with ties resolved to the lowest class index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uncertainty from Monte-Carlo vote counts: 1 − (modal vote share).
pub fn uncertainty_from_votes(votes: &[usize], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        counts[v] += 1;
    }
    let modal = counts.iter().copied().max().unwrap_or(0);
    1.0 - modal as f64 / votes.len() as f64
}

/// Monte-Carlo uncertainty of one example: the model classifies `passes`
/// perturbed copies and the uncertainty is one minus the modal prediction
/// frequency. A single pass always yields zero.
pub fn mc_uncertainty(
    model: &ModelState,
    example: &LabeledExample,
    policy: &PerturbationPolicy,
) -> Result<f64> {
    if policy.passes == 1 {
        log::debug!("mc_uncertainty with a single pass is always 0");
    }
    let d = example.features.len();
    let mut votes = Vec::with_capacity(policy.passes);
    for pass in 0..policy.passes {
        let mut rng = seeding::rng(&[policy.seed, salt::MC, example.id, pass as u64]);
        let mut perturbed = Array2::zeros((1, d));
        for j in 0..d {
            perturbed[[0, j]] = example.features[j]
                + policy.perturbation_scale * rng.sample::<f64, _>(StandardNormal);
        }
        let out = model.forward(&perturbed)?;
        votes.push(argmax(&out.logits_row(0)));
    }
    Ok(uncertainty_from_votes(&votes, model.num_classes()))
}

/// Apply the augmentation policy to a set of entries, producing one feature
/// row per entry: x' = x ⊙ scale + noise.
pub fn augment_replay(
    entries: &[MemoryEntry],
    policy: &AugmentPolicy,
    iteration: u64,
) -> Array2<f64> {
    let d = entries.first().map_or(0, |e| e.example.features.len());
    let mut out = Array2::zeros((entries.len(), d));
    let identity = policy.noise_scale == 0.0 && policy.scale_min == policy.scale_max;
    for (i, entry) in entries.iter().enumerate() {
        if identity {
            let uniform_scale = policy.scale_min;
            for j in 0..d {
                out[[i, j]] = entry.example.features[j] * uniform_scale;
            }
            continue;
        }
        let mut rng = seeding::rng(&[policy.seed, salt::AUGMENT, entry.example.id, iteration]);
        for j in 0..d {
            let noise = policy.noise_scale * rng.sample::<f64, _>(StandardNormal);
            let scale = if policy.scale_min == policy.scale_max {
                policy.scale_min
            } else {
                rng.random_range(policy.scale_min..policy.scale_max)
            };
            out[[i, j]] = entry.example.features[j] * scale + noise;
        }
    }
    out
}

fn entry_order(a: &MemoryEntry, b: &MemoryEntry) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(b.inserted_at.cmp(&a.inserted_at))
        .then(b.example.id.cmp(&a.example.id))
}

impl EpisodicMemory {
    pub fn new(capacity: usize, online_quota: usize, keep_size: usize) -> Self {
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            online_quota,
            keep_size,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Online top-k insertion: candidates are sorted by score descending and
    /// the top `online_quota` enter while free capacity allows, otherwise
    /// only as many as fit.
    pub fn online_update(&mut self, mut candidates: Vec<MemoryEntry>) {
        candidates.sort_by(entry_order);
        let free = self.capacity - self.entries.len();
        let quota = if free >= self.online_quota {
            self.online_quota
        } else {
            free
        };
        let take = quota.min(candidates.len());
        self.entries.extend(candidates.into_iter().take(take));
        self.entries.sort_by(entry_order);
        debug_assert!(self.entries.len() <= self.capacity);
    }

    /// Periodic sweep: union with the incoming batch (by id), re-score every
    /// entry with Monte-Carlo uncertainty, optionally refresh stored logits
    /// from the current model, and keep the top `keep_size`.
    pub fn periodic_update(
        &mut self,
        incoming: Vec<MemoryEntry>,
        model: &ModelState,
        policy: &PerturbationPolicy,
        refresh_logits: bool,
    ) -> Result<()> {
        for entry in incoming {
            if !self.entries.iter().any(|e| e.example.id == entry.example.id) {
                self.entries.push(entry);
            }
        }
        for entry in &mut self.entries {
            entry.score = mc_uncertainty(model, &entry.example, policy)?;
            if refresh_logits {
                let d = entry.example.features.len();
                let mut row = Array2::zeros((1, d));
                for j in 0..d {
                    row[[0, j]] = entry.example.features[j];
                }
                entry.stored_logits = model.forward(&row)?.logits_row(0);
            }
        }
        self.entries.sort_by(entry_order);
        self.entries.truncate(self.keep_size.min(self.capacity));
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }

    /// Draw `n` entries without replacement, each with probability
    /// proportional to the inverse frequency of its class in memory. Returns
    /// everything when the memory is smaller than `n`.
    pub fn sample_replay(&self, n: usize, seed: u64) -> Vec<MemoryEntry> {
        if n == 0 || self.entries.is_empty() {
            return Vec::new();
        }
        if self.entries.len() <= n {
            log::debug!(
                "sample_replay: requested {n} but memory holds {}; returning all",
                self.entries.len()
            );
            return self.entries.clone();
        }
        let classes = 1 + self
            .entries
            .iter()
            .map(|e| e.example.label)
            .max()
            .unwrap_or(0);
        let mut class_counts = vec![0usize; classes];
        for e in &self.entries {
            class_counts[e.example.label] += 1;
        }
        let mut weights: Vec<f64> = self
            .entries
            .iter()
            .map(|e| 1.0 / class_counts[e.example.label] as f64)
            .collect();
        let mut remaining: Vec<usize> = (0..self.entries.len()).collect();
        let mut rng = seeding::rng(&[seed, salt::REPLAY]);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
            let mut u = rng.random_range(0.0..total);
            let mut chosen = remaining.len() - 1;
            for (pos, &i) in remaining.iter().enumerate() {
                u -= weights[i];
                if u < 0.0 {
                    chosen = pos;
                    break;
                }
            }
            let idx = remaining.swap_remove(chosen);
            weights[idx] = 0.0;
            out.push(self.entries[idx].clone());
        }
        out
    }
}

/// Write a memory snapshot as CSV:
/// `id,label,score,inserted_at,logit0..,f0..`.
pub fn write_memory_csv<W: Write>(mut w: W, memory: &EpisodicMemory) -> Result<()> {
    let (c, d) = memory
        .entries()
        .first()
        .map_or((0, 0), |e| (e.stored_logits.len(), e.example.features.len()));
    write!(w, "id,label,score,inserted_at")?;
    for i in 0..c {
        write!(w, ",logit{i}")?;
    }
    for i in 0..d {
        write!(w, ",f{i}")?;
    }
    writeln!(w)?;
    for e in memory.entries() {
        write!(
            w,
            "{},{},{},{}",
            e.example.id, e.example.label, e.score, e.inserted_at
        )?;
        for v in e.stored_logits.iter() {
            write!(w, ",{v}")?;
        }
        for v in e.example.features.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn dump_memory_csv(path: &Path, memory: &EpisodicMemory) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_memory_csv(std::io::BufWriter::new(file), memory)
}
