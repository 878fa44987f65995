//! Mean-class-accuracy evaluation over task holdouts.
//!
//! Accuracy is pooled per class across the holdout sets of every task seen
//! so far, then averaged with uniform class weights (MCA). The run-level
//! metric averages MCA across evaluation checkpoints, so early and late
//! performance count equally and forgetting a task depresses the score for
//! the rest of the run.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::argmax;
use crate::nn::ModelState;
use crate::stream::{holdout_set, task_at, LabeledExample, StreamConfig};

/// Accuracy snapshot at one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of training iterations completed when the snapshot was taken.
    pub iteration: u64,
    pub per_class_accuracy: Vec<f64>,
    /// Unweighted mean of the per-class accuracies.
    pub mca: f64,
    /// MCA restricted to each evaluated task's holdout.
    pub task_mca: Vec<f64>,
}

/// Mean class accuracy from per-class (correct, total) tallies. Classes
/// with no holdout examples are excluded from the mean.
fn mca_from_tallies(correct: &[usize], total: &[usize]) -> (Vec<f64>, f64) {
    let mut per_class = Vec::with_capacity(total.len());
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (c, (&ok, &n)) in correct.iter().zip(total).enumerate() {
        if n == 0 {
            log::warn!("class {c} absent from holdout; excluded from MCA");
            per_class.push(f64::NAN);
            continue;
        }
        let acc = ok as f64 / n as f64;
        per_class.push(acc);
        sum += acc;
        counted += 1;
    }
    (per_class, sum / counted.max(1) as f64)
}

fn predict(model: &ModelState, examples: &[LabeledExample]) -> Result<Vec<usize>> {
    let d = examples.first().map_or(0, |e| e.features.len());
    let mut batch = Array2::zeros((examples.len(), d));
    for (i, e) in examples.iter().enumerate() {
        for j in 0..d {
            batch[[i, j]] = e.features[j];
        }
    }
    let pass = model.forward(&batch)?;
    Ok((0..examples.len())
        .map(|i| argmax(&pass.logits_row(i)))
        .collect())
}

/// Evaluate a model snapshot on the given per-task holdout sets, pooling
/// class tallies across tasks.
pub fn evaluate(
    model: &ModelState,
    holdouts: &[Vec<LabeledExample>],
    iteration: u64,
) -> Result<EvalReport> {
    let classes = model.num_classes();
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    let mut task_mca = Vec::with_capacity(holdouts.len());

    for holdout in holdouts {
        let mut t_correct = vec![0usize; classes];
        let mut t_total = vec![0usize; classes];
        if !holdout.is_empty() {
            let preds = predict(model, holdout)?;
            for (e, pred) in holdout.iter().zip(preds) {
                total[e.label] += 1;
                t_total[e.label] += 1;
                if pred == e.label {
                    correct[e.label] += 1;
                    t_correct[e.label] += 1;
                }
            }
        }
        task_mca.push(mca_from_tallies(&t_correct, &t_total).1);
    }

    let (per_class_accuracy, mca) = mca_from_tallies(&correct, &total);
    Ok(EvalReport {
        iteration,
        per_class_accuracy,
        mca,
        task_mca,
    })
}

/// Evaluate over the holdouts of every task seen after `completed`
/// training iterations.
pub fn evaluate_checkpoint(
    model: &ModelState,
    stream: &StreamConfig,
    completed: u64,
    n_per_class: usize,
) -> Result<EvalReport> {
    let seen = if completed == 0 {
        1
    } else {
        task_at(stream, completed - 1) + 1
    };
    let holdouts = (0..seen)
        .map(|t| holdout_set(stream, t, n_per_class))
        .collect::<Result<Vec<_>>>()?;
    evaluate(model, &holdouts, completed)
}

/// Average mean class accuracy: the arithmetic mean of checkpoint MCAs.
pub fn amca(reports: &[EvalReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Empty("amca needs at least one report".into()));
    }
    Ok(reports.iter().map(|r| r.mca).sum::<f64>() / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, ModelConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn mca_is_unweighted_mean() {
        let (per_class, mca) = mca_from_tallies(&[10, 5], &[10, 10]);
        assert_eq!(per_class, vec![1.0, 0.5]);
        assert_abs_diff_eq!(mca, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn mca_ignores_holdout_imbalance() {
        // Same per-class accuracies, very different class sizes.
        let (_, a) = mca_from_tallies(&[90, 5], &[100, 10]);
        let (_, b) = mca_from_tallies(&[9, 50], &[10, 100]);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn absent_class_excluded() {
        let (per_class, mca) = mca_from_tallies(&[8, 0], &[10, 0]);
        assert!(per_class[1].is_nan());
        assert_abs_diff_eq!(mca, 0.8, epsilon = 1e-15);
    }

    /// A nearest-mean model: identity backbone, head rows are class means.
    fn nearest_mean_model(cfg: &StreamConfig) -> ModelState {
        let d = cfg.feature_dim;
        let means = cfg.task_means.as_ref().unwrap();
        let mut head = Array2::zeros((cfg.num_classes, d));
        for c in 0..cfg.num_classes {
            for j in 0..d {
                head[[c, j]] = means[0][c][j];
            }
        }
        // logit_c = μ_c·x; with well-separated means of comparable norm this
        // classifies task 0 essentially perfectly at small noise.
        ModelState::new(
            vec![Layer {
                weights: Array2::eye(d),
                activation: Activation::Linear,
            }],
            head,
        )
        .unwrap()
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let cfg = StreamConfig {
            seed: 3,
            noise_scale: 0.01,
            ..StreamConfig::default()
        }
        .resolved()
        .unwrap();
        let model = nearest_mean_model(&cfg);
        let holdout = holdout_set(&cfg, 0, 30).unwrap();
        let report = evaluate(&model, &[holdout], 0).unwrap();
        assert_eq!(report.mca, 1.0);
        assert!(report.per_class_accuracy.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn uninformative_features_score_chance() {
        // All class means identical: features carry no label information, so
        // any fixed classifier has expected MCA 1/C.
        let d = 16;
        let zero_means = vec![vec![vec![0.0; d]; 6]; 1];
        let cfg = StreamConfig {
            seed: 5,
            task_means: Some(zero_means),
            task_lengths: vec![1000],
            ..StreamConfig::default()
        }
        .resolved()
        .unwrap();
        let model = ModelState::init(&ModelConfig::default(), 99).unwrap();
        let holdout = holdout_set(&cfg, 0, 100).unwrap();
        assert_eq!(holdout.len(), 600);
        let report = evaluate(&model, &[holdout], 0).unwrap();
        assert!(
            (report.mca - 1.0 / 6.0).abs() < 0.03,
            "mca {} not near chance",
            report.mca
        );
    }

    #[test]
    fn amca_of_reports() {
        let mk = |mca: f64| EvalReport {
            iteration: 0,
            per_class_accuracy: vec![],
            mca,
            task_mca: vec![],
        };
        assert_eq!(amca(&[mk(0.4)]).unwrap(), 0.4);
        assert_abs_diff_eq!(amca(&[mk(0.75), mk(0.5)]).unwrap(), 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(
            amca(&[mk(0.3), mk(0.3), mk(0.3)]).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        assert!(amca(&[]).is_err());
    }

    #[test]
    fn checkpoint_evaluation_pools_seen_tasks() {
        let cfg = StreamConfig {
            seed: 11,
            ..StreamConfig::default()
        }
        .resolved()
        .unwrap();
        let model = ModelState::init(&ModelConfig::default(), 1).unwrap();
        let early = evaluate_checkpoint(&model, &cfg, 500, 10).unwrap();
        assert_eq!(early.task_mca.len(), 1);
        let mid = evaluate_checkpoint(&model, &cfg, 1000, 10).unwrap();
        assert_eq!(mid.task_mca.len(), 1);
        let after = evaluate_checkpoint(&model, &cfg, 1001, 10).unwrap();
        assert_eq!(after.task_mca.len(), 2);
        let end = evaluate_checkpoint(&model, &cfg, 4000, 10).unwrap();
        assert_eq!(end.task_mca.len(), 4);
    }
}
