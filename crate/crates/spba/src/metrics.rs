//! Attack quality metrics and test-set evaluation.
//!
//! Geometric distances compare a clean cloud with its poisoned counterpart:
//! squared symmetric Chamfer distance (reported ×1000), unsquared Hausdorff
//! distance, and the mean per-point Euclidean offset. Classification metrics
//! are benign accuracy (BA) on clean inputs and attack success rate (ASR) —
//! the share of *non-target* test samples the poisoned input steers into the
//! target class.

use crate::attack::{build_plans, PoisonConfig};
use crate::classifier::{self, ModelParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{KdTree, PointCloud};
use crate::spectral::{PoisonPlan, SpectralTrigger};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn check_points(context: &'static str, v: &ArrayView2<f64>) -> Result<()> {
    if v.ncols() != 3 {
        return Err(Error::BadPointWidth {
            expected: 3,
            got: v.ncols(),
        });
    }
    if v.nrows() == 0 {
        return Err(Error::TooFewPoints {
            op: context,
            needed: 1,
            got: 0,
        });
    }
    Ok(())
}

fn row3(v: &ArrayView2<f64>, i: usize) -> [f64; 3] {
    [v[[i, 0]], v[[i, 1]], v[[i, 2]]]
}

/// Mean per-point Euclidean distance between corresponding rows.
/// Both clouds must have the same number of points.
pub fn euclidean_loss(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_points("euclidean loss", a)?;
    check_points("euclidean loss", b)?;
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            context: "euclidean loss point counts",
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    let mut sum = 0.0;
    for i in 0..a.nrows() {
        let (pa, pb) = (row3(a, i), row3(b, i));
        sum += ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2))
            .sqrt();
    }
    Ok(sum / a.nrows() as f64)
}

/// Squared symmetric Chamfer distance: the mean squared nearest-neighbour
/// distance from `a` into `b` plus the same from `b` into `a`.
pub fn chamfer(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_points("chamfer distance", a)?;
    check_points("chamfer distance", b)?;
    let tree_b = KdTree::build(*b);
    let tree_a = KdTree::build(*a);
    let mut ab = 0.0;
    for i in 0..a.nrows() {
        ab += tree_b.nearest_dist2(row3(a, i));
    }
    let mut ba = 0.0;
    for j in 0..b.nrows() {
        ba += tree_a.nearest_dist2(row3(b, j));
    }
    Ok(ab / a.nrows() as f64 + ba / b.nrows() as f64)
}

/// [`chamfer`] scaled by 1000, the conventional reporting unit.
pub fn chamfer_x1000(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    Ok(chamfer(a, b)? * 1000.0)
}

/// Unsquared symmetric Hausdorff distance: the larger of the two directed
/// max-min distances.
pub fn hausdorff(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_points("hausdorff distance", a)?;
    check_points("hausdorff distance", b)?;
    let tree_b = KdTree::build(*b);
    let tree_a = KdTree::build(*a);
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        worst = worst.max(tree_b.nearest_dist2(row3(a, i)));
    }
    for j in 0..b.nrows() {
        worst = worst.max(tree_a.nearest_dist2(row3(b, j)));
    }
    Ok(worst.sqrt())
}

/// Combined geometric regularizer
/// `λ1·ED + λ2·CD + λ3·HD` between `original` and `poisoned`, together with
/// its (sub)gradient with respect to the poisoned coordinates.
///
/// Nearest-neighbour assignments and the Hausdorff argmax pair are held
/// fixed at the current configuration (ties by lowest index; the
/// poisoned→original direction wins Hausdorff ties), which yields the
/// standard deterministic subgradient of these piecewise-smooth distances.
pub fn reg_loss_and_grad(
    original: &ArrayView2<f64>,
    poisoned: &ArrayView2<f64>,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> Result<(f64, Array2<f64>)> {
    check_points("regularizer", original)?;
    check_points("regularizer", poisoned)?;
    if original.nrows() != poisoned.nrows() {
        return Err(Error::DimensionMismatch {
            context: "regularizer point counts",
            left: original.nrows(),
            right: poisoned.nrows(),
        });
    }
    let n = poisoned.nrows() as f64;
    let m = original.nrows() as f64;
    let mut grad = Array2::zeros((poisoned.nrows(), 3));

    // Euclidean: mean distance between corresponding rows.
    let mut ed = 0.0;
    for i in 0..poisoned.nrows() {
        let (t, x) = (row3(poisoned, i), row3(original, i));
        let d = [t[0] - x[0], t[1] - x[1], t[2] - x[2]];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        ed += dist;
        if dist > 0.0 {
            for c in 0..3 {
                grad[[i, c]] += lambda1 * d[c] / (dist * n);
            }
        }
    }
    let ed = ed / n;

    let tree_orig = KdTree::build(*original);
    let tree_pois = KdTree::build(*poisoned);

    // Chamfer, poisoned→original direction.
    let mut cd_po = 0.0;
    let mut far_po = (0.0f64, 0usize, 0usize); // (dist², poisoned idx, original idx)
    for i in 0..poisoned.nrows() {
        let t = row3(poisoned, i);
        let j = tree_orig.knn(t, 1)[0];
        let x = row3(original, j);
        let d = [t[0] - x[0], t[1] - x[1], t[2] - x[2]];
        let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        cd_po += d2;
        for c in 0..3 {
            grad[[i, c]] += lambda2 * 2.0 * d[c] / n;
        }
        if d2 > far_po.0 {
            far_po = (d2, i, j);
        }
    }

    // Chamfer, original→poisoned direction.
    let mut cd_op = 0.0;
    let mut far_op = (0.0f64, 0usize, 0usize);
    for j in 0..original.nrows() {
        let x = row3(original, j);
        let i = tree_pois.knn(x, 1)[0];
        let t = row3(poisoned, i);
        let d = [t[0] - x[0], t[1] - x[1], t[2] - x[2]];
        let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        cd_op += d2;
        for c in 0..3 {
            grad[[i, c]] += lambda2 * 2.0 * d[c] / m;
        }
        if d2 > far_op.0 {
            far_op = (d2, i, j);
        }
    }
    let cd = cd_po / n + cd_op / m;

    // Hausdorff: one achieving pair carries the subgradient.
    let hd2 = far_po.0.max(far_op.0);
    let hd = hd2.sqrt();
    if hd > 0.0 {
        let (i, j) = if far_po.0 >= far_op.0 {
            (far_po.1, far_po.2)
        } else {
            (far_op.1, far_op.2)
        };
        let (t, x) = (row3(poisoned, i), row3(original, j));
        for c in 0..3 {
            grad[[i, c]] += lambda3 * (t[c] - x[c]) / hd;
        }
    }

    Ok((lambda1 * ed + lambda2 * cd + lambda3 * hd, grad))
}

/// Full evaluation of a trained model + trigger on a labeled test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Number of test samples.
    pub test_samples: usize,
    /// Share of clean test samples classified correctly.
    pub benign_accuracy: f64,
    /// Share of poisoned non-target samples classified as the target.
    pub attack_success_rate: f64,
    /// Number of non-target samples the ASR is computed over.
    pub asr_samples: usize,
    /// Mean Chamfer distance ×1000 between clean and poisoned clouds,
    /// over the ASR sample set.
    pub mean_chamfer_x1000: f64,
    /// Mean per-point Euclidean offset over the ASR sample set.
    pub mean_euclidean: f64,
    /// Mean Hausdorff distance over the ASR sample set.
    pub mean_hausdorff: f64,
    /// Clean-input confusion matrix, `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Clean accuracy of a model over a labeled dataset.
pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset {
            context: "accuracy",
        });
    }
    let correct: usize = dataset
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok(usize::from(classifier::predict(params, s)? == dataset.label_of(i))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Evaluate with poison plans built on the fly from `config`.
pub fn evaluate(
    params: &ModelParams,
    trigger: &SpectralTrigger,
    config: &PoisonConfig,
    test: &Dataset,
) -> Result<AttackReport> {
    let plans = build_plans(test, &config.poison_params(), config.seed)?;
    evaluate_with_plans(params, trigger, config, test, &plans)
}

/// Evaluate with precomputed per-sample poison plans (`plans[i]` belongs to
/// test sample `i`).
pub fn evaluate_with_plans(
    params: &ModelParams,
    trigger: &SpectralTrigger,
    config: &PoisonConfig,
    test: &Dataset,
    plans: &[PoisonPlan],
) -> Result<AttackReport> {
    evaluate_with_defense(params, trigger, config, test, plans, |_, cloud| Ok(cloud))
}

/// Evaluate through an inference-time defense: `defend(sample_index, cloud)`
/// transforms every input (clean and poisoned alike) before classification.
/// Geometric distances are still measured on the undefended clouds — they
/// describe the attack, not the defense.
pub fn evaluate_with_defense<F>(
    params: &ModelParams,
    trigger: &SpectralTrigger,
    config: &PoisonConfig,
    test: &Dataset,
    plans: &[PoisonPlan],
    defend: F,
) -> Result<AttackReport>
where
    F: Fn(usize, PointCloud) -> Result<PointCloud> + Sync,
{
    if test.is_empty() {
        return Err(Error::EmptyDataset {
            context: "evaluation",
        });
    }
    if plans.len() != test.len() {
        return Err(Error::DimensionMismatch {
            context: "poison plans vs test samples",
            left: plans.len(),
            right: test.len(),
        });
    }
    let k = test.classes();
    if params.classes() != k {
        return Err(Error::DimensionMismatch {
            context: "model classes vs dataset classes",
            left: params.classes(),
            right: k,
        });
    }
    if config.target_class >= k {
        return Err(Error::LabelOutOfRange {
            label: config.target_class,
            classes: k,
        });
    }

    struct SampleEval {
        label: usize,
        clean_pred: usize,
        poisoned: Option<(bool, f64, f64, f64)>, // (hit, cd×1000, ed, hd)
    }

    let evals: Vec<SampleEval> = test
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, sample)| -> Result<SampleEval> {
            let label = test.label_of(i);
            let clean_pred =
                classifier::predict(params, &defend(i, sample.clone())?)?;
            let poisoned = if label != config.target_class {
                let poisoned_cloud = plans[i].apply(sample, trigger)?;
                let cd =
                    chamfer_x1000(&sample.points(), &poisoned_cloud.points())?;
                let ed = euclidean_loss(&sample.points(), &poisoned_cloud.points())?;
                let hd = hausdorff(&sample.points(), &poisoned_cloud.points())?;
                let pred =
                    classifier::predict(params, &defend(i, poisoned_cloud)?)?;
                Some((pred == config.target_class, cd, ed, hd))
            } else {
                None
            };
            Ok(SampleEval {
                label,
                clean_pred,
                poisoned,
            })
        })
        .collect::<Result<_>>()?;

    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    let mut hits = 0usize;
    let mut asr_samples = 0usize;
    let (mut cd_sum, mut ed_sum, mut hd_sum) = (0.0, 0.0, 0.0);
    for e in &evals {
        confusion[e.label][e.clean_pred] += 1;
        correct += usize::from(e.clean_pred == e.label);
        if let Some((hit, cd, ed, hd)) = e.poisoned {
            asr_samples += 1;
            hits += usize::from(hit);
            cd_sum += cd;
            ed_sum += ed;
            hd_sum += hd;
        }
    }
    if asr_samples == 0 {
        return Err(Error::AsrUndefined {
            target: config.target_class,
        });
    }
    Ok(AttackReport {
        test_samples: test.len(),
        benign_accuracy: correct as f64 / test.len() as f64,
        attack_success_rate: hits as f64 / asr_samples as f64,
        asr_samples,
        mean_chamfer_x1000: cd_sum / asr_samples as f64,
        mean_euclidean: ed_sum / asr_samples as f64,
        mean_hausdorff: hd_sum / asr_samples as f64,
        confusion,
    })
}
