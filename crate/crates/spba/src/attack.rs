//! Dirty-label poisoning and the alternating model/trigger optimization.
//!
//! Training interleaves two Adam optimizers on every batch: first a model
//! step on the mixed objective (cross-entropy of benign samples at their
//! true labels plus cross-entropy of poisoned samples at the target label),
//! then — through the *updated* model — a trigger step that pushes every
//! sample's poisoned version toward the target class while a geometric
//! regularizer (Euclidean + Chamfer + Hausdorff, weighted λ1/λ2/λ3) keeps
//! the perturbation small. The model step always sees the trigger as it was
//! before the step; both learning rates follow a per-epoch cosine schedule.

use crate::classifier::{self, AdamState, ModelParams};
use crate::data::Dataset;
use crate::defenses::{self, AugmentKind};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::imperceptibility::SelectionStrategy;
use crate::metrics::{self, AttackReport};
use crate::rng::{derive, Domain};
use crate::spectral::{build_poison_plan, PoisonParams, PoisonPlan, SpectralTrigger};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Everything that parameterizes one attack run. Serializes 1:1 to the TOML
/// config file and into run records; unknown keys are rejected, missing keys
/// fall back to these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonConfig {
    /// Number of patches per cloud.
    pub g: usize,
    /// Points per patch (the FPS center plus its `k_g - 1` neighbours).
    pub k_g: usize,
    /// Number of patches that receive the trigger.
    pub m: usize,
    /// Neighbourhood size for curvature/imperceptibility scoring.
    pub k_c: usize,
    /// Neighbourhood size of the patch-local graph.
    pub k_p: usize,
    /// Patch selection strategy.
    pub strategy: SelectionStrategy,
    /// Poisoned fraction of the training set; 0 disables poisoning entirely
    /// (a plain classification run with the trigger frozen at zero).
    pub rho: f64,
    /// The class every poisoned sample is steered toward.
    pub target_class: usize,
    /// Euclidean regularizer weight.
    pub lambda1: f64,
    /// Chamfer regularizer weight.
    pub lambda2: f64,
    /// Hausdorff regularizer weight.
    pub lambda3: f64,
    /// Base model learning rate (cosine-annealed per epoch).
    pub lr_model: f64,
    /// Base trigger learning rate (cosine-annealed per epoch).
    pub lr_trigger: f64,
    /// Decoupled weight decay, applied to model parameters only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Classifier hidden width H.
    pub hidden: usize,
    /// Train-time augmentation chain applied (in order, with per-sample
    /// per-epoch draws) to every cloud the optimizer steps see. Empty means
    /// the steps train on the raw clouds. Evaluation never augments.
    pub augment: Vec<AugmentKind>,
    /// Master seed; every random decision derives from it.
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        PoisonConfig {
            g: 32,
            k_g: 32,
            m: 16,
            k_c: 10,
            k_p: 10,
            strategy: SelectionStrategy::HighPis,
            rho: 0.1,
            target_class: 0,
            lambda1: 1.0,
            lambda2: 5.0,
            lambda3: 1.0,
            lr_model: 0.001,
            lr_trigger: 0.01,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 16,
            hidden: 64,
            augment: Vec::new(),
            seed: 0,
        }
    }
}

impl PoisonConfig {
    /// Check everything that can be checked without seeing the data.
    pub fn validate(&self) -> Result<()> {
        let count = |name: &'static str, got: usize, reason: &'static str| {
            Err(Error::BadCount { name, got, reason })
        };
        if self.g == 0 {
            return count("g", 0, "need at least one patch");
        }
        if self.k_g < 2 {
            return count("k_g", self.k_g, "patches need at least 2 points");
        }
        if self.m == 0 {
            return count("m", 0, "need at least one poisoned patch");
        }
        if self.strategy != SelectionStrategy::FpsPoints && self.m > self.g {
            return count("m", self.m, "cannot exceed the patch count g");
        }
        if self.k_c == 0 {
            return count("k_c", 0, "curvature needs at least one neighbour");
        }
        if self.k_p == 0 || self.k_p >= self.k_g {
            return count("k_p", self.k_p, "graph degree must satisfy 1 <= k_p < k_g");
        }
        if self.epochs == 0 {
            return count("epochs", 0, "need at least one epoch");
        }
        if self.batch_size == 0 {
            return count("batch_size", 0, "need at least one sample per batch");
        }
        if self.hidden == 0 {
            return count("hidden", 0, "hidden width must be at least 1");
        }
        let param = |name: &'static str, got: f64, reason: &'static str| {
            Err(Error::BadParam { name, got, reason })
        };
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return param("rho", self.rho, "must lie in [0, 1)");
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return param(name, v, "must be finite and non-negative");
            }
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_trigger", self.lr_trigger)] {
            if !(v.is_finite() && v > 0.0) {
                return param(name, v, "must be finite and positive");
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return param(
                "weight_decay",
                self.weight_decay,
                "must be finite and non-negative",
            );
        }
        Ok(())
    }

    /// The geometric subset of the configuration.
    pub fn poison_params(&self) -> PoisonParams {
        PoisonParams {
            g: self.g,
            k_g: self.k_g,
            m: self.m,
            k_c: self.k_c,
            k_p: self.k_p,
            strategy: self.strategy,
        }
    }

    /// Rows of the trigger matrix ξ this configuration requires.
    pub fn trigger_rows(&self) -> usize {
        match self.strategy {
            SelectionStrategy::FpsPoints => self.m * self.k_g,
            _ => self.k_g,
        }
    }
}

/// Indices of the dirty-label split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    /// Samples trained at their true labels.
    pub benign_indices: Vec<usize>,
    /// Samples trained at the target label with the trigger applied.
    pub poison_indices: Vec<usize>,
}

/// Choose `round(rho · N)` training samples (uniformly, label-blind) to
/// poison. Requires `0 < rho < 1` and a split that is neither empty nor the
/// whole set.
pub fn split_dataset(
    train: &Dataset,
    rho: f64,
    target_class: usize,
    seed: u64,
) -> Result<SplitDataset> {
    if train.is_empty() {
        return Err(Error::EmptyDataset {
            context: "poison split",
        });
    }
    if target_class >= train.classes() {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            classes: train.classes(),
        });
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::BadParam {
            name: "rho",
            got: rho,
            reason: "must lie strictly between 0 and 1",
        });
    }
    let n = train.len();
    let selected = (rho * n as f64).round() as usize;
    if selected == 0 {
        return Err(Error::BadPoisonSplit {
            rho,
            n,
            selected,
            reason: "rounds to zero poisoned samples",
        });
    }
    if selected == n {
        return Err(Error::BadPoisonSplit {
            rho,
            n,
            selected,
            reason: "would poison the whole training set",
        });
    }
    let mut rng = derive(seed, Domain::PoisonSplit, 0);
    let mut poison_indices = rand::seq::index::sample(&mut rng, n, selected).into_vec();
    poison_indices.sort_unstable();
    let mut mask = vec![false; n];
    for &i in &poison_indices {
        mask[i] = true;
    }
    Ok(SplitDataset {
        benign_indices: (0..n).filter(|&i| !mask[i]).collect(),
        poison_indices,
    })
}

/// Build one poison plan per sample. Sample `i` derives its randomness from
/// `seed + i`, so a single sample's plan can be rebuilt in isolation.
pub fn build_plans(
    dataset: &Dataset,
    params: &PoisonParams,
    seed: u64,
) -> Result<Vec<PoisonPlan>> {
    dataset
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, sample)| build_poison_plan(sample, params, seed.wrapping_add(i as u64)))
        .collect()
}

/// One training example as the optimizer steps see it. `label` is the true
/// label; poisoned items are remapped to the target class inside the steps.
/// `aug_seed` keys this item's augmentation draws and is ignored when the
/// configuration's augmentation chain is empty.
pub struct BatchItem<'a> {
    pub cloud: &'a PointCloud,
    pub label: usize,
    pub poisoned: bool,
    pub plan: &'a PoisonPlan,
    pub aug_seed: u64,
}

/// The cloud an optimizer step actually runs on: `input` passed through the
/// configured augmentation chain (or untouched when the chain is empty),
/// plus the drawn parameters needed to route gradients back.
fn augmented_input(
    input: &PointCloud,
    config: &PoisonConfig,
    aug_seed: u64,
) -> Result<(PointCloud, Vec<defenses::AugmentParams>)> {
    if config.augment.is_empty() {
        return Ok((input.clone(), Vec::new()));
    }
    defenses::apply_augment_chain(input, &config.augment, aug_seed)
}

/// Summed model loss over the batch — benign cross-entropy at true labels,
/// poisoned cross-entropy at the target — plus its flat parameter gradient.
pub fn model_loss_and_grad(
    params: &ModelParams,
    trigger: &SpectralTrigger,
    batch: &[BatchItem<'_>],
    config: &PoisonConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset {
            context: "model step batch",
        });
    }
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|item| -> Result<(f64, Vec<f64>)> {
            let (input, label) = if item.poisoned {
                (item.plan.apply(item.cloud, trigger)?, config.target_class)
            } else {
                (item.cloud.clone(), item.label)
            };
            let (seen, _) = augmented_input(&input, config, item.aug_seed)?;
            let (loss, grads) = classifier::backward(params, &seen, label)?;
            Ok((loss, grads.to_flat()))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad_sum = vec![0.0; params.param_count()];
    for (loss, grads) in per {
        total += loss;
        for (dst, g) in grad_sum.iter_mut().zip(grads) {
            *dst += g;
        }
    }
    Ok((total, grad_sum))
}

/// One Adam update of the model on this batch (the trigger is read-only
/// here). Returns the summed batch loss *before* the step.
pub fn model_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    trigger: &SpectralTrigger,
    batch: &[BatchItem<'_>],
    lr: f64,
    config: &PoisonConfig,
) -> Result<f64> {
    let (loss, grads) = model_loss_and_grad(params, trigger, batch, config)?;
    let mut flat = params.to_flat();
    opt.step(&mut flat, &grads, lr, config.weight_decay)?;
    params.set_from_flat(&flat)?;
    Ok(loss)
}

/// Summed trigger loss over the batch — every sample is poisoned, classified
/// against the target, and regularized toward its clean geometry — plus the
/// gradient with respect to ξ.
pub fn trigger_loss_and_grad(
    params: &ModelParams,
    trigger: &SpectralTrigger,
    batch: &[BatchItem<'_>],
    config: &PoisonConfig,
) -> Result<(f64, Array2<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset {
            context: "trigger step batch",
        });
    }
    let per: Vec<(f64, Array2<f64>)> = batch
        .par_iter()
        .map(|item| -> Result<(f64, Array2<f64>)> {
            let poisoned = item.plan.apply(item.cloud, trigger)?;
            // The classifier sees the augmented poisoned cloud; its input
            // gradient routes back through the chain. The geometric
            // regularizer compares the *unaugmented* poisoned cloud to the
            // clean one — imperceptibility is a property of the artifact,
            // not of the training-time view.
            let (seen, chain) = augmented_input(&poisoned, config, item.aug_seed)?;
            let (ce, grads) = classifier::backward(params, &seen, config.target_class)?;
            let ce_input_grad = if chain.is_empty() {
                grads.input
            } else {
                defenses::backprop_augment_chain(&chain, poisoned.len(), &grads.input.view())?
            };
            let (reg, reg_grad) = metrics::reg_loss_and_grad(
                &item.cloud.points(),
                &poisoned.points(),
                config.lambda1,
                config.lambda2,
                config.lambda3,
            )?;
            let total_input_grad = &ce_input_grad + &reg_grad;
            let dxi = item.plan.trigger_gradient(&total_input_grad.view())?;
            Ok((ce + reg, dxi))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad_sum = Array2::zeros((trigger.rows(), 3));
    for (loss, dxi) in per {
        total += loss;
        grad_sum += &dxi;
    }
    Ok((total, grad_sum))
}

/// One Adam update of the trigger on this batch through the (already
/// updated) model. No weight decay is applied to ξ. Returns the summed
/// batch loss *before* the step.
pub fn trigger_step(
    trigger: &mut SpectralTrigger,
    opt: &mut AdamState,
    params: &ModelParams,
    batch: &[BatchItem<'_>],
    lr: f64,
    config: &PoisonConfig,
) -> Result<f64> {
    let (loss, grads) = trigger_loss_and_grad(params, trigger, batch, config)?;
    let grad_flat = grads.as_slice().expect("standard layout");
    let coeffs = trigger.coefficients_mut();
    let flat = coeffs.as_slice_mut().expect("standard layout");
    opt.step(flat, grad_flat, lr, 0.0)?;
    Ok(loss)
}

/// Per-epoch training curve entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr_model: f64,
    pub lr_trigger: f64,
    /// Mean per-sample model loss over the epoch.
    pub model_loss: f64,
    /// Mean per-sample trigger loss over the epoch (0 in clean runs).
    pub trigger_loss: f64,
    pub benign_accuracy: f64,
    pub attack_success_rate: f64,
    pub mean_chamfer_x1000: f64,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub config: PoisonConfig,
    pub params: ModelParams,
    pub trigger: SpectralTrigger,
    pub split: SplitDataset,
    pub curves: Vec<EpochStats>,
    pub report: AttackReport,
}

/// The serializable run record: configuration snapshot, data shape, poison
/// split, per-epoch curves, and the final report. Contains no timestamps or
/// environment state, so identical runs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub record_version: u32,
    pub config: PoisonConfig,
    pub classes: Vec<String>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub points_per_sample: usize,
    pub poison_indices: Vec<usize>,
    pub curves: Vec<EpochStats>,
    pub report: AttackReport,
}

impl AttackRun {
    /// Assemble the run record for the datasets this run was trained on.
    pub fn record(&self, train: &Dataset, test: &Dataset) -> RunRecord {
        RunRecord {
            record_version: 1,
            config: self.config.clone(),
            classes: train.class_names().to_vec(),
            train_samples: train.len(),
            test_samples: test.len(),
            points_per_sample: train.n_points(),
            poison_indices: self.split.poison_indices.clone(),
            curves: self.curves.clone(),
            report: self.report.clone(),
        }
    }
}

/// Run the full alternating optimization. With `rho = 0` this degenerates
/// to plain classification training: no samples are relabeled, the trigger
/// stays zero, and only the model is optimized.
pub fn train(train_set: &Dataset, test_set: &Dataset, config: &PoisonConfig) -> Result<AttackRun> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset {
            context: "training set",
        });
    }
    if test_set.is_empty() {
        return Err(Error::EmptyDataset {
            context: "test set",
        });
    }
    let k = train_set.classes();
    if test_set.classes() != k {
        return Err(Error::DimensionMismatch {
            context: "train vs test class counts",
            left: k,
            right: test_set.classes(),
        });
    }
    if config.target_class >= k {
        return Err(Error::LabelOutOfRange {
            label: config.target_class,
            classes: k,
        });
    }

    let pparams = config.poison_params();
    let train_plans = build_plans(train_set, &pparams, config.seed)?;
    let test_plans = build_plans(test_set, &pparams, config.seed)?;

    let split = if config.rho > 0.0 {
        split_dataset(train_set, config.rho, config.target_class, config.seed)?
    } else {
        SplitDataset {
            benign_indices: (0..train_set.len()).collect(),
            poison_indices: Vec::new(),
        }
    };
    let mut poisoned = vec![false; train_set.len()];
    for &i in &split.poison_indices {
        poisoned[i] = true;
    }

    let mut params = ModelParams::init(config.hidden, k, config.seed)?;
    let mut trigger = SpectralTrigger::zeros(config.trigger_rows());
    let mut opt_model = AdamState::new(params.param_count());
    let mut opt_trigger = AdamState::new(config.trigger_rows() * 3);

    let n = train_set.len();
    let mut curves = Vec::with_capacity(config.epochs);
    let mut last_report = None;
    for epoch in 0..config.epochs {
        let lr_model = classifier::cosine_lr(epoch, config.epochs, config.lr_model);
        let lr_trigger = classifier::cosine_lr(epoch, config.epochs, config.lr_trigger);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive(config.seed, Domain::EpochShuffle, epoch as u64));

        let mut model_loss = 0.0;
        let mut trigger_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    cloud: &train_set.samples()[i],
                    label: train_set.label_of(i),
                    poisoned: poisoned[i],
                    plan: &train_plans[i],
                    aug_seed: if config.augment.is_empty() {
                        0
                    } else {
                        // Fresh draws per (epoch, sample), reproducibly.
                        derive(
                            config.seed,
                            Domain::TrainAugment,
                            ((epoch as u64) << 32) | i as u64,
                        )
                        .random()
                    },
                })
                .collect();
            model_loss += model_step(&mut params, &mut opt_model, &trigger, &items, lr_model, config)?;
            if config.rho > 0.0 {
                trigger_loss +=
                    trigger_step(&mut trigger, &mut opt_trigger, &params, &items, lr_trigger, config)?;
            }
        }

        let eval = metrics::evaluate_with_plans(&params, &trigger, config, test_set, &test_plans)?;
        curves.push(EpochStats {
            epoch,
            lr_model,
            lr_trigger,
            model_loss: model_loss / n as f64,
            trigger_loss: trigger_loss / n as f64,
            benign_accuracy: eval.benign_accuracy,
            attack_success_rate: eval.attack_success_rate,
            mean_chamfer_x1000: eval.mean_chamfer_x1000,
        });
        last_report = Some(eval);
    }

    Ok(AttackRun {
        config: config.clone(),
        params,
        trigger,
        split,
        curves,
        report: last_report.expect("at least one epoch"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapeClass};
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> PoisonConfig {
        PoisonConfig {
            g: 4,
            k_g: 8,
            m: 2,
            k_c: 4,
            k_p: 3,
            rho: 0.25,
            target_class: 0,
            epochs: 3,
            batch_size: 4,
            hidden: 8,
            seed: 5,
            ..PoisonConfig::default()
        }
    }

    fn tiny_data() -> (Dataset, Dataset) {
        let train = generate_shapes(&[ShapeClass::Sphere, ShapeClass::Cube], 8, 48, 0.01, 1)
            .unwrap();
        let test = generate_shapes(&[ShapeClass::Sphere, ShapeClass::Cube], 4, 48, 0.01, 2)
            .unwrap();
        (train, test)
    }

    #[test]
    fn split_counts_and_determinism() {
        let (train, _) = tiny_data();
        let split = split_dataset(&train, 0.25, 0, 7).unwrap();
        assert_eq!(split.poison_indices.len(), 4); // round(0.25 · 16)
        assert_eq!(split.benign_indices.len(), 12);
        let again = split_dataset(&train, 0.25, 0, 7).unwrap();
        assert_eq!(split, again);
        let other = split_dataset(&train, 0.25, 0, 8).unwrap();
        assert_ne!(split, other);

        // disjoint cover
        let mut all: Vec<usize> = split
            .poison_indices
            .iter()
            .chain(&split.benign_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());

        // sorted output
        assert!(split.poison_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_error_paths() {
        let (train, _) = tiny_data();
        assert!(matches!(
            split_dataset(&train, 0.01, 0, 0).unwrap_err(),
            Error::BadPoisonSplit { selected: 0, .. }
        ));
        assert!(matches!(
            split_dataset(&train, 0.99, 0, 0).unwrap_err(),
            Error::BadPoisonSplit { .. }
        ));
        assert!(split_dataset(&train, 0.0, 0, 0).is_err());
        assert!(split_dataset(&train, 1.0, 0, 0).is_err());
        assert!(matches!(
            split_dataset(&train, 0.25, 9, 0).unwrap_err(),
            Error::LabelOutOfRange { .. }
        ));
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(PoisonConfig::default().validate().is_ok());
        for bad in [
            PoisonConfig { g: 0, ..PoisonConfig::default() },
            PoisonConfig { k_g: 1, ..PoisonConfig::default() },
            PoisonConfig { m: 0, ..PoisonConfig::default() },
            PoisonConfig { m: 33, ..PoisonConfig::default() },
            PoisonConfig { k_p: 32, ..PoisonConfig::default() },
            PoisonConfig { rho: 1.0, ..PoisonConfig::default() },
            PoisonConfig { rho: -0.1, ..PoisonConfig::default() },
            PoisonConfig { lambda2: -1.0, ..PoisonConfig::default() },
            PoisonConfig { lr_model: 0.0, ..PoisonConfig::default() },
            PoisonConfig { epochs: 0, ..PoisonConfig::default() },
            PoisonConfig { batch_size: 0, ..PoisonConfig::default() },
            PoisonConfig { hidden: 0, ..PoisonConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "expected rejection: {bad:?}");
        }
        // fpsp may exceed g with m patches
        let fpsp = PoisonConfig {
            strategy: SelectionStrategy::FpsPoints,
            m: 40,
            ..PoisonConfig::default()
        };
        assert!(fpsp.validate().is_ok());
        assert_eq!(fpsp.trigger_rows(), 40 * 32);
    }

    #[test]
    fn poisoned_items_are_remapped_to_the_target() {
        let (train, _) = tiny_data();
        let config = tiny_config();
        let plans = build_plans(&train, &config.poison_params(), config.seed).unwrap();
        let params = ModelParams::init(config.hidden, 2, 3).unwrap();
        let trigger = SpectralTrigger::zeros(config.trigger_rows());

        // one benign sphere (label 0), one poisoned cube (label 1 → target 0)
        let batch = [
            BatchItem {
                cloud: &train.samples()[0],
                label: 0,
                poisoned: false,
                plan: &plans[0],
                aug_seed: 0,
            },
            BatchItem {
                cloud: &train.samples()[8],
                label: 1,
                poisoned: true,
                plan: &plans[8],
                aug_seed: 0,
            },
        ];
        let (loss, _) = model_loss_and_grad(&params, &trigger, &batch, &config).unwrap();
        // manual: benign CE at its label + poisoned CE at the target (the
        // zero trigger keeps the poisoned coordinates identical)
        let l0 = classifier::backward(&params, &train.samples()[0], 0).unwrap().0;
        let l1 = classifier::backward(&params, &train.samples()[8], 0).unwrap().0;
        assert_abs_diff_eq!(loss, l0 + l1, epsilon = 1e-12);
    }

    #[test]
    fn trigger_gradient_matches_finite_differences_through_the_full_loss() {
        let (train, _) = tiny_data();
        let config = tiny_config();
        let plans = build_plans(&train, &config.poison_params(), config.seed).unwrap();
        let params = ModelParams::init(config.hidden, 2, 3).unwrap();
        let mut trigger = SpectralTrigger::zeros(config.trigger_rows());
        // a non-zero starting point exercises all three regularizer terms
        {
            let c = trigger.coefficients_mut();
            let mut rng = derive(11, Domain::ShapeSample, 777);
            for v in c.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.02..0.02);
            }
        }
        let batch: Vec<BatchItem<'_>> = (0..4)
            .map(|i| BatchItem {
                cloud: &train.samples()[i * 3],
                label: train.label_of(i * 3),
                poisoned: i % 2 == 0,
                plan: &plans[i * 3],
                aug_seed: i as u64,
            })
            .collect();
        let (_, analytic) = trigger_loss_and_grad(&params, &trigger, &batch, &config).unwrap();

        let h = 1e-5;
        for r in 0..trigger.rows() {
            for c in 0..3 {
                let mut plus = trigger.clone();
                plus.coefficients_mut()[[r, c]] += h;
                let lp = trigger_loss_and_grad(&params, &plus, &batch, &config)
                    .unwrap()
                    .0;
                let mut minus = trigger.clone();
                minus.coefficients_mut()[[r, c]] -= h;
                let lm = trigger_loss_and_grad(&params, &minus, &batch, &config)
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[[r, c]];
                let scale = fd.abs().max(an.abs());
                if scale < 1e-8 {
                    assert!((fd - an).abs() < 1e-8, "({r},{c}): fd={fd} an={an}");
                } else {
                    assert!(
                        (fd - an).abs() / scale <= 1e-4,
                        "({r},{c}): fd={fd} an={an} rel={}",
                        (fd - an).abs() / scale
                    );
                }
            }
        }
    }

    /// The gradient chain must stay exact when the optimizer steps see
    /// augmented inputs: trigger gradients route back through every drawn
    /// transform (including the size-changing dropout), and model gradients
    /// differentiate the augmented forward pass.
    #[test]
    fn gradients_match_finite_differences_under_augmentation() {
        let (train, _) = tiny_data();
        let mut config = tiny_config();
        config.augment = vec![
            AugmentKind::RotationZ,
            AugmentKind::Scaling,
            AugmentKind::Dropout,
            AugmentKind::Jitter,
            AugmentKind::Shift,
            AugmentKind::Rotation3D,
        ];
        let plans = build_plans(&train, &config.poison_params(), config.seed).unwrap();
        let mut params = ModelParams::init(config.hidden, 2, 3).unwrap();
        let mut trigger = SpectralTrigger::zeros(config.trigger_rows());
        {
            let c = trigger.coefficients_mut();
            let mut rng = derive(13, Domain::ShapeSample, 779);
            for v in c.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.02..0.02);
            }
        }
        let batch: Vec<BatchItem<'_>> = (0..3)
            .map(|i| BatchItem {
                cloud: &train.samples()[i * 4],
                label: train.label_of(i * 4),
                poisoned: i != 1,
                plan: &plans[i * 4],
                aug_seed: 1000 + i as u64,
            })
            .collect();
        let h = 1e-5;
        let rel_ok = |fd: f64, an: f64| -> bool {
            let scale = fd.abs().max(an.abs());
            if scale < 1e-8 {
                (fd - an).abs() < 1e-8
            } else {
                (fd - an).abs() / scale <= 1e-4
            }
        };

        let (_, analytic) = trigger_loss_and_grad(&params, &trigger, &batch, &config).unwrap();
        for r in 0..trigger.rows() {
            for c in 0..3 {
                let mut plus = trigger.clone();
                plus.coefficients_mut()[[r, c]] += h;
                let lp = trigger_loss_and_grad(&params, &plus, &batch, &config).unwrap().0;
                let mut minus = trigger.clone();
                minus.coefficients_mut()[[r, c]] -= h;
                let lm = trigger_loss_and_grad(&params, &minus, &batch, &config).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel_ok(fd, analytic[[r, c]]), "trigger ({r},{c}): fd={fd} an={}", analytic[[r, c]]);
            }
        }

        let (_, analytic) = model_loss_and_grad(&params, &trigger, &batch, &config).unwrap();
        let flat = params.to_flat();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            params.set_from_flat(&plus).unwrap();
            let lp = model_loss_and_grad(&params, &trigger, &batch, &config).unwrap().0;
            let mut minus = flat.clone();
            minus[i] -= h;
            params.set_from_flat(&minus).unwrap();
            let lm = model_loss_and_grad(&params, &trigger, &batch, &config).unwrap().0;
            params.set_from_flat(&flat).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_ok(fd, analytic[i]), "param {i}: fd={fd} an={}", analytic[i]);
        }
    }

    #[test]
    fn augmented_training_is_deterministic_and_reaches_the_same_run() {
        let (train_set, test_set) = tiny_data();
        let mut config = tiny_config();
        config.augment = vec![AugmentKind::Jitter, AugmentKind::Dropout];
        let a = train(&train_set, &test_set, &config).unwrap();
        let b = train(&train_set, &test_set, &config).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.trigger.coefficients(), b.trigger.coefficients());
        assert_eq!(a.curves, b.curves);
        // the augmented run must differ from the unaugmented one
        let plain = train(&train_set, &test_set, &tiny_config()).unwrap();
        assert_ne!(a.params.to_flat(), plain.params.to_flat());
    }

    #[test]
    fn model_gradient_matches_finite_differences_through_the_mixed_loss() {
        let (train, _) = tiny_data();
        let config = tiny_config();
        let plans = build_plans(&train, &config.poison_params(), config.seed).unwrap();
        let mut params = ModelParams::init(config.hidden, 2, 3).unwrap();
        let mut trigger = SpectralTrigger::zeros(config.trigger_rows());
        {
            let c = trigger.coefficients_mut();
            let mut rng = derive(12, Domain::ShapeSample, 778);
            for v in c.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.02..0.02);
            }
        }
        let batch: Vec<BatchItem<'_>> = (0..3)
            .map(|i| BatchItem {
                cloud: &train.samples()[i * 5],
                label: train.label_of(i * 5),
                poisoned: i == 1,
                plan: &plans[i * 5],
                aug_seed: i as u64,
            })
            .collect();
        let (_, analytic) = model_loss_and_grad(&params, &trigger, &batch, &config).unwrap();
        let flat = params.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            params.set_from_flat(&plus).unwrap();
            let lp = model_loss_and_grad(&params, &trigger, &batch, &config)
                .unwrap()
                .0;
            let mut minus = flat.clone();
            minus[i] -= h;
            params.set_from_flat(&minus).unwrap();
            let lm = model_loss_and_grad(&params, &trigger, &batch, &config)
                .unwrap()
                .0;
            params.set_from_flat(&flat).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[i];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-8 {
                assert!((fd - an).abs() < 1e-8, "param {i}: fd={fd} an={an}");
            } else {
                assert!(
                    (fd - an).abs() / scale <= 1e-4,
                    "param {i}: fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_fills_curves() {
        let (train, test) = tiny_data();
        let config = tiny_config();
        let run1 = train_run(&train, &test, &config);
        let run2 = train_run(&train, &test, &config);
        let rec1 = serde_json::to_string(&run1.record(&train, &test)).unwrap();
        let rec2 = serde_json::to_string(&run2.record(&train, &test)).unwrap();
        assert_eq!(rec1, rec2);
        assert_eq!(run1.params.to_flat(), run2.params.to_flat());
        assert_eq!(run1.trigger.coefficients(), run2.trigger.coefficients());

        assert_eq!(run1.curves.len(), 3);
        for (e, stats) in run1.curves.iter().enumerate() {
            assert_eq!(stats.epoch, e);
            assert_abs_diff_eq!(
                stats.lr_model,
                classifier::cosine_lr(e, 3, config.lr_model),
                epsilon = 1e-15
            );
            assert_abs_diff_eq!(
                stats.lr_trigger,
                classifier::cosine_lr(e, 3, config.lr_trigger),
                epsilon = 1e-15
            );
        }
        // poisoning actually moved the trigger
        assert!(run1.trigger.coefficients().iter().any(|v| *v != 0.0));
        assert_eq!(run1.split.poison_indices.len(), 4);
    }

    fn train_run(train_set: &Dataset, test_set: &Dataset, config: &PoisonConfig) -> AttackRun {
        train(train_set, test_set, config).unwrap()
    }

    #[test]
    fn clean_mode_keeps_the_trigger_at_zero() {
        let (train_set, test_set) = tiny_data();
        let config = PoisonConfig {
            rho: 0.0,
            epochs: 2,
            ..tiny_config()
        };
        let run = train(&train_set, &test_set, &config).unwrap();
        assert!(run.trigger.coefficients().iter().all(|v| *v == 0.0));
        assert!(run.curves.iter().all(|s| s.trigger_loss == 0.0));
        assert!(run.split.poison_indices.is_empty());
        assert_eq!(run.split.benign_indices.len(), 16);
    }

    #[test]
    fn train_rejects_inconsistent_inputs() {
        let (train_set, test_set) = tiny_data();
        let bad_target = PoisonConfig {
            target_class: 5,
            ..tiny_config()
        };
        assert!(matches!(
            train(&train_set, &test_set, &bad_target).unwrap_err(),
            Error::LabelOutOfRange { .. }
        ));

        let three_class =
            generate_shapes(&[ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Cone], 2, 48, 0.01, 3)
                .unwrap();
        assert!(matches!(
            train(&train_set, &three_class, &tiny_config()).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }
}
