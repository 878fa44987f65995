//! Ablation harness: runs named config variants across seeds, aggregates
//! AMCA per variant, and renders machine-readable CSV plus a human table.
//!
//! The built-in ladder starts from naive fine-tuning (no memory, plain
//! cross-entropy, constant learning rate) and cumulatively re-enables each
//! ingredient of the full method: replay, the multi-step schedule, soft
//! labels, the contrastive term, the supervised contrastive term, and
//! class-balanced focal weighting.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::run;

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// Base config stripped down to naive fine-tuning: no memory or replay,
/// plain cross-entropy, no distillation, constant learning rate.
pub fn naive_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.memory.capacity = 0;
    cfg.memory.online_quota = 0;
    cfg.memory.keep_size = 0;
    cfg.trainer.replay_batch = 0;
    cfg.losses.alpha_dml = 0.0;
    cfg.losses.beta_dml = 0.0;
    cfg.losses.delta_schedule = Vec::new();
    cfg.losses.focal_alpha = 1.0;
    cfg.losses.focal_gamma = 0.0;
    cfg.losses.cb_beta = 0.0;
    cfg.optimizer.milestones = Vec::new();
    cfg
}

/// Cumulative ablation ladder from naive fine-tuning up to the full method.
pub fn builtin_ladder(base: &RunConfig) -> Vec<Variant> {
    let mut ladder = Vec::new();
    let mut cfg = naive_config(base);
    ladder.push(Variant {
        name: "naive".into(),
        config: cfg.clone(),
    });

    cfg.memory = base.memory.clone();
    cfg.trainer.replay_batch = base.trainer.replay_batch;
    ladder.push(Variant {
        name: "+replay".into(),
        config: cfg.clone(),
    });

    cfg.optimizer.milestones = base.optimizer.milestones.clone();
    ladder.push(Variant {
        name: "+multistep_lr".into(),
        config: cfg.clone(),
    });

    cfg.losses.delta_schedule = base.losses.delta_schedule.clone();
    ladder.push(Variant {
        name: "+soft_labels".into(),
        config: cfg.clone(),
    });

    cfg.losses.alpha_dml = base.losses.alpha_dml;
    ladder.push(Variant {
        name: "+contrastive".into(),
        config: cfg.clone(),
    });

    cfg.losses.beta_dml = base.losses.beta_dml;
    ladder.push(Variant {
        name: "+supcon".into(),
        config: cfg.clone(),
    });

    cfg.losses.focal_alpha = base.losses.focal_alpha;
    cfg.losses.focal_gamma = base.losses.focal_gamma;
    cfg.losses.cb_beta = base.losses.cb_beta;
    ladder.push(Variant {
        name: "+cb_focal".into(),
        config: cfg,
    });

    ladder
}

/// One (variant, seed) outcome. `amca` is `None` when the run failed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub amca: Option<f64>,
    /// (iteration, MCA) per evaluation checkpoint.
    pub mcas: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub name: String,
    pub mean_amca: f64,
    pub std_amca: f64,
    pub delta_vs_base: f64,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<VariantSummary>,
}

/// Run the base config plus every variant across the given seeds. Failed
/// runs are marked and aggregation continues.
pub fn run_harness(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Empty("run_harness needs at least one seed".into()));
    }
    let mut all: Vec<(String, RunConfig)> = vec![("base".into(), base.clone())];
    all.extend(variants.iter().map(|v| (v.name.clone(), v.config.clone())));

    let mut rows = Vec::with_capacity(all.len() * seeds.len());
    for (name, cfg) in &all {
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.trainer.seed = seed;
            match run(run_cfg, None) {
                Ok(outcome) => rows.push(AblationRow {
                    variant: name.clone(),
                    seed,
                    amca: Some(outcome.summary.amca),
                    mcas: outcome
                        .summary
                        .reports
                        .iter()
                        .map(|r| (r.iteration, r.mca))
                        .collect(),
                }),
                Err(e) => {
                    log::error!("run failed for variant {name} seed {seed}: {e}");
                    rows.push(AblationRow {
                        variant: name.clone(),
                        seed,
                        amca: None,
                        mcas: Vec::new(),
                    });
                }
            }
        }
    }

    let base_mean = mean_amca(&rows, "base");
    let summaries = all
        .iter()
        .map(|(name, _)| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| &r.variant == name)
                .filter_map(|r| r.amca)
                .collect();
            let failed = seeds.len() - values.len();
            let mean = if values.is_empty() {
                f64::NAN
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            let std = if values.len() < 2 {
                0.0
            } else {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (values.len() - 1) as f64;
                var.sqrt()
            };
            VariantSummary {
                name: name.clone(),
                mean_amca: mean,
                std_amca: std,
                delta_vs_base: mean - base_mean,
                failed_runs: failed,
            }
        })
        .collect();

    Ok(AblationTable { rows, summaries })
}

fn mean_amca(rows: &[AblationRow], variant: &str) -> f64 {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.amca)
        .collect();
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl AblationTable {
    pub fn mean_for(&self, variant: &str) -> f64 {
        mean_amca(&self.rows, variant)
    }

    pub fn summary_for(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.name == variant)
    }

    /// CSV: `variant,seed,status,amca,mca_<iter>,...`. Checkpoint columns
    /// come from the first successful row; all runs share the schedule.
    pub fn to_csv(&self) -> String {
        let checkpoints: Vec<u64> = self
            .rows
            .iter()
            .find(|r| r.amca.is_some())
            .map(|r| r.mcas.iter().map(|&(it, _)| it).collect())
            .unwrap_or_default();
        let mut out = String::from("variant,seed,status,amca");
        for it in &checkpoints {
            let _ = write!(out, ",mca_{it}");
        }
        out.push('\n');
        for row in &self.rows {
            match row.amca {
                Some(amca) => {
                    let _ = write!(out, "{},{},ok,{}", row.variant, row.seed, amca);
                    for &(_, mca) in &row.mcas {
                        let _ = write!(out, ",{mca}");
                    }
                }
                None => {
                    let _ = write!(out, "{},{},failed,", row.variant, row.seed);
                    for _ in &checkpoints {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Rendered comparison table.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | mean AMCA | std | delta vs base | failed |\n");
        out.push_str("|---|---|---|---|---|\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "| {} | {:.4} | {:.4} | {:+.4} | {} |",
                s.name, s.mean_amca, s.std_amca, s.delta_vs_base, s.failed_runs
            );
        }
        out
    }

    pub fn write_files(&self, csv_path: &Path, md_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        std::fs::write(md_path, self.to_markdown())?;
        Ok(())
    }
}

/// Parse a harness CSV back into rows (inverse of [`AblationTable::to_csv`]).
pub fn parse_results_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty("empty results csv".into()))?;
    let checkpoints: Vec<u64> = header
        .split(',')
        .skip(4)
        .map(|c| {
            c.strip_prefix("mca_")
                .ok_or_else(|| Error::Serde(format!("bad column {c}")))?
                .parse::<u64>()
                .map_err(|e| Error::Serde(e.to_string()))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Serde(format!("short row: {line}")));
        }
        let variant = fields[0].to_string();
        let seed: u64 = fields[1].parse().map_err(|e: std::num::ParseIntError| {
            Error::Serde(e.to_string())
        })?;
        if fields[2] == "failed" {
            rows.push(AblationRow {
                variant,
                seed,
                amca: None,
                mcas: Vec::new(),
            });
            continue;
        }
        let amca: f64 = fields[3]
            .parse()
            .map_err(|e: std::num::ParseFloatError| Error::Serde(e.to_string()))?;
        let mcas = checkpoints
            .iter()
            .zip(fields[4..].iter())
            .map(|(&it, v)| {
                v.parse::<f64>()
                    .map(|m| (it, m))
                    .map_err(|e| Error::Serde(e.to_string()))
            })
            .collect::<Result<_>>()?;
        rows.push(AblationRow {
            variant,
            seed,
            amca: Some(amca),
            mcas,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.stream.task_lengths = vec![15, 15];
        cfg.stream.seed = 9;
        cfg.model.hidden = vec![12];
        cfg.model.embedding_dim = 6;
        cfg.trainer.total_iterations = 30;
        cfg.trainer.checkpoint_every = 15;
        cfg.trainer.holdout_per_class = 4;
        cfg.memory.capacity = 20;
        cfg.memory.online_quota = 5;
        cfg.memory.keep_size = 10;
        cfg.trainer.replay_batch = 4;
        cfg.perturbation.passes = 2;
        cfg
    }

    #[test]
    fn ladder_shape_and_extremes() {
        let base = tiny_base();
        let ladder = builtin_ladder(&base);
        assert_eq!(ladder.len(), 7);
        assert_eq!(ladder[0].name, "naive");
        assert_eq!(ladder[0].config.memory.capacity, 0);
        assert_eq!(ladder[0].config.losses.focal_alpha, 1.0);
        // Last rung restores everything: identical to the base.
        assert_eq!(ladder[6].config, base);
    }

    #[test]
    fn base_vs_base_delta_zero() {
        let base = tiny_base();
        let dup = Variant {
            name: "dup".into(),
            config: base.clone(),
        };
        let table = run_harness(&base, &[dup], &[3]).unwrap();
        let summary = table.summary_for("dup").unwrap();
        assert_eq!(summary.delta_vs_base, 0.0);
        assert_eq!(summary.failed_runs, 0);
    }

    #[test]
    fn failed_runs_are_marked_and_table_emitted() {
        let base = tiny_base();
        let mut broken = base.clone();
        // Invalid at Trainer::new time: replay larger than keep_size.
        broken.trainer.replay_batch = 999;
        let table = run_harness(
            &base,
            &[Variant {
                name: "broken".into(),
                config: broken,
            }],
            &[1],
        )
        .unwrap();
        let summary = table.summary_for("broken").unwrap();
        assert_eq!(summary.failed_runs, 1);
        assert!(summary.mean_amca.is_nan());
        let csv = table.to_csv();
        assert!(csv.contains("broken,1,failed,"));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let base = tiny_base();
        let table = run_harness(&base, &builtin_ladder(&base)[..2], &[1, 2]).unwrap();
        let csv = table.to_csv();
        let parsed = parse_results_csv(&csv).unwrap();
        assert_eq!(parsed, table.rows);
    }

    #[test]
    fn markdown_contains_all_variants() {
        let base = tiny_base();
        let table = run_harness(&base, &builtin_ladder(&base)[..1], &[1]).unwrap();
        let md = table.to_markdown();
        assert!(md.contains("| base |"));
        assert!(md.contains("| naive |"));
    }
}
