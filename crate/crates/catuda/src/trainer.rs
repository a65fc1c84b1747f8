//! The three-phase training loop: source-only warm-up, domain-adversarial
//! alignment, and calibrated teacher-student self-training.
//!
//! All randomness is drawn from per-purpose substreams of one seed, so a run
//! is bitwise reproducible and variants that share a phase prefix (for
//! example, different calibrators before calibration activates) produce
//! identical trajectories over that prefix.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::{
    apply_calibrator, apply_calibrator_with_labels, compute_ece, fit_cpcs, fit_matrix_scaling,
    fit_temperature, fit_vector_scaling, CalibratorKind, CalibratorParams, EceReport,
    PredictionSet, DEFAULT_ECE_BINS,
};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{epoch_batches, SignalDataset};
use crate::error::{CatError, Result};
use crate::graph::Graph;
use crate::losses::{
    cat_total_loss, cross_entropy, domain_bce, mcc_loss, LossBundle, LossTerms, PROB_EPS,
};
use crate::nets::{
    discriminate, encoder_forward, eval_forward, linear, CatModel, DomainClassifierIds,
    EncoderIds, LinearIds, Mode, NetConfig, TeacherState,
};
use crate::optim::{
    grl_coefficient, lr_at_epoch, sam_step, Adam, AdamConfig, SamConfig,
};
use crate::params::{ParamId, ParamSet};
use crate::pseudolabel::{
    pseudo_label_accuracy, select_pseudo_labels, update_thresholds, ThresholdState,
};
use crate::tensor::Tensor;

/// Substream tags for the per-purpose random streams.
pub const TAG_MODEL_INIT: u64 = 0;
pub const TAG_SOURCE_SHUFFLE: u64 = 1;
pub const TAG_TARGET_SHUFFLE: u64 = 2;
pub const TAG_ITERATION: u64 = 3;

/// splitmix64 finalizer; decorrelates the per-purpose seeds.
pub fn substream(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator used for weight initialization.
pub fn model_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, TAG_MODEL_INIT))
}

/// Generator for one training iteration's stochastic choices (dropout
/// masks). Identical `(seed, epoch, iter)` always yields identical draws.
pub fn iteration_rng(seed: u64, epoch: usize, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_ITERATION));
    rng.set_stream(((epoch as u64) << 24) | iter as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    /// First epoch of the domain-adversarial phase.
    pub t_da: usize,
    /// First epoch of teacher-student self-training.
    pub t_pl: usize,
    /// First epoch with an active (non-identity) calibrator.
    pub t_cal: usize,
    /// Base confidence threshold for pseudo-label selection.
    pub tau: f64,
    pub ema_alpha: f64,
    pub base_lr: f64,
    pub lr_drop_epochs: (usize, usize),
    pub weight_decay: f64,
    pub calibrator_kind: CalibratorKind,
    pub mcc_enabled: bool,
    pub mcc_temperature: f64,
    pub sdat_enabled: bool,
    pub sam_rho: f64,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            total_epochs: 300,
            batch_size: 64,
            t_da: 50,
            t_pl: 50,
            t_cal: 150,
            tau: 0.9,
            ema_alpha: 0.999,
            base_lr: 0.001,
            lr_drop_epochs: (150, 250),
            weight_decay: 1e-5,
            calibrator_kind: CalibratorKind::Identity,
            mcc_enabled: false,
            mcc_temperature: 2.5,
            sdat_enabled: false,
            sam_rho: 0.05,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_da <= self.t_pl && self.t_pl <= self.t_cal && self.t_cal <= self.total_epochs)
        {
            return Err(CatError::Config(format!(
                "phase boundaries must satisfy t_da <= t_pl <= t_cal <= total_epochs, \
                 got {} <= {} <= {} <= {}",
                self.t_da, self.t_pl, self.t_cal, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(CatError::Config("batch_size must be positive".into()));
        }
        if self.total_epochs == 0 {
            return Err(CatError::Config("total_epochs must be positive".into()));
        }
        if !(0.0 < self.tau && self.tau <= 1.0) {
            return Err(CatError::Config(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(CatError::Config(format!(
                "ema_alpha must lie in [0, 1], got {}",
                self.ema_alpha
            )));
        }
        if self.base_lr <= 0.0 || self.sam_rho < 0.0 || self.weight_decay < 0.0 {
            return Err(CatError::Config(
                "learning rate must be positive; sam_rho and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log. Accuracy and calibration metrics
/// come from the teacher once it exists, from the student before that.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub source_test_acc: f64,
    pub target_test_acc: f64,
    pub source_ece: f64,
    pub target_ece: f64,
    pub n_pseudo_selected: Option<usize>,
    pub pseudo_label_acc: Option<f64>,
    pub loss_c: f64,
    pub loss_pl: f64,
    pub loss_dc: f64,
    pub loss_mcc: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub grl_lambda: f64,
}

/// One row of the pseudo-label log.
#[derive(Debug, Clone)]
pub struct PseudoStatsRow {
    pub epoch: usize,
    pub n_selected: usize,
    pub pl_accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub thresholds: Vec<f64>,
}

/// Training inputs. Target training labels are deliberately absent from the
/// training path; ground truth for pseudo-label accuracy reporting travels
/// separately and is only ever read by evaluation code.
pub struct TrainInputs<'a> {
    pub source_train: &'a SignalDataset,
    pub source_test: &'a SignalDataset,
    pub target_train: &'a SignalDataset,
    pub target_train_eval_labels: Option<&'a [usize]>,
    pub target_test: &'a SignalDataset,
}

pub struct TrainingOutput {
    pub model: CatModel,
    pub teacher: Option<TeacherState>,
    pub calibrator: CalibratorParams,
    pub metrics: Vec<MetricsRecord>,
    pub pseudo_stats: Vec<PseudoStatsRow>,
    pub final_checkpoint: Checkpoint,
    /// Final-epoch evaluation sets for reliability reporting.
    pub source_eval: PredictionSet,
    pub target_eval: PredictionSet,
}

/// Ramp progress for the adversarial coefficient: the fraction of adversarial
/// iterations completed, linear from 0 at the first to 1 at the last.
pub fn progress_p(
    epoch: usize,
    iter: usize,
    iters_per_epoch: usize,
    cfg: &TrainerConfig,
) -> Result<f64> {
    if epoch < cfg.t_da {
        return Err(CatError::State(format!(
            "adversarial progress queried at epoch {} before t_da={}",
            epoch, cfg.t_da
        )));
    }
    let total = (cfg.total_epochs - cfg.t_da) * iters_per_epoch;
    let idx = (epoch - cfg.t_da) * iters_per_epoch + iter;
    if total <= 1 {
        return Ok(1.0);
    }
    Ok((idx as f64 / (total - 1) as f64).clamp(0.0, 1.0))
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode features and logits over a whole dataset, in chunks.
pub fn forward_dataset(
    params: &ParamSet,
    enc: &EncoderIds,
    head: &LinearIds,
    ds: &SignalDataset,
) -> Result<(Tensor, Tensor)> {
    let n = ds.len();
    let mut features = Vec::new();
    let mut logits = Vec::new();
    let mut k = 0;
    let mut f_dim = 0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (f, z) = eval_forward(params, enc, head, ds.batch(chunk))?;
        f_dim = f.shape()[1];
        k = z.shape()[1];
        features.extend_from_slice(f.data());
        logits.extend_from_slice(z.data());
    }
    Ok((
        Tensor::new(vec![n, f_dim], features)?,
        Tensor::new(vec![n, k], logits)?,
    ))
}

/// Accuracy and calibration error of a network on a labeled dataset, with
/// probabilities passed through the supplied calibrator.
pub fn evaluate(
    params: &ParamSet,
    enc: &EncoderIds,
    head: &LinearIds,
    ds: &SignalDataset,
    calibrator: &CalibratorParams,
) -> Result<(f64, EceReport, PredictionSet)> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| CatError::Data("evaluation requires a labeled dataset".into()))?;
    let (_, logits) = forward_dataset(params, enc, head, ds)?;
    let preds = apply_calibrator_with_labels(&logits, labels, calibrator)?;
    let acc = preds.accuracy()?;
    let report = compute_ece(&preds, DEFAULT_ECE_BINS)?;
    Ok((acc, report, preds))
}

/// Pseudo-label plan for one iteration, precomputed from the teacher.
struct PseudoPlan {
    /// Per-row predicted class (only meaningful on selected rows).
    label_per_row: Vec<usize>,
    /// 1/n_selected on selected rows, 0 elsewhere.
    weight_per_row: Vec<f64>,
    n_selected: usize,
}

/// Everything one gradient pass needs.
struct IterPlan {
    epoch: usize,
    iter: usize,
    src_batch: Tensor,
    src_labels: Vec<usize>,
    tgt_batch: Option<Tensor>,
    adversarial: bool,
    lambda: f64,
    mcc: bool,
    pseudo: Option<PseudoPlan>,
}

/// Build the loss graph for one iteration and backpropagate it, accumulating
/// parameter gradients. `task_only` restricts the objective to the source
/// classification loss (the sharpness-aware perturbation direction).
#[allow(clippy::too_many_arguments)]
fn gradient_pass(
    params: &mut ParamSet,
    enc: &EncoderIds,
    head: &LinearIds,
    disc: &DomainClassifierIds,
    plan: &IterPlan,
    cfg: &TrainerConfig,
    task_only: bool,
) -> Result<LossBundle> {
    let mut rng = iteration_rng(cfg.seed, plan.epoch, plan.iter);
    let mut g = Graph::new();

    let x_s = g.input(plan.src_batch.clone());
    let feat_s = encoder_forward(&mut g, params, enc, x_s, Mode::Train, Some(&mut rng))?;
    let logits_s = linear(&mut g, params, head, feat_s)?;
    let probs_s = g.softmax(logits_s)?;
    let l_c = cross_entropy(&mut g, probs_s, &plan.src_labels)?;
    let mut terms = LossTerms {
        l_c,
        l_dc: None,
        l_pl: None,
        l_mcc: None,
    };

    if !task_only {
        if let Some(tgt) = &plan.tgt_batch {
            let x_t = g.input(tgt.clone());
            let feat_t =
                encoder_forward(&mut g, params, enc, x_t, Mode::Train, Some(&mut rng))?;
            let logits_t = linear(&mut g, params, head, feat_t)?;
            if plan.adversarial {
                let d_s = discriminate(
                    &mut g,
                    params,
                    disc,
                    feat_s,
                    plan.lambda,
                    Mode::Train,
                    Some(&mut rng),
                )?;
                let d_t = discriminate(
                    &mut g,
                    params,
                    disc,
                    feat_t,
                    plan.lambda,
                    Mode::Train,
                    Some(&mut rng),
                )?;
                terms.l_dc = Some(domain_bce(&mut g, d_s, d_t)?);
            }
            if plan.mcc {
                terms.l_mcc = Some(mcc_loss(&mut g, logits_t, cfg.mcc_temperature)?);
            }
            if let Some(pl) = &plan.pseudo {
                if pl.n_selected > 0 {
                    // Cross-entropy over the selected rows only, realized as
                    // a weighted sum so the unselected rows contribute
                    // nothing and no second forward pass is needed.
                    let probs_t = g.softmax(logits_t)?;
                    let picked = g.pick_per_row(probs_t, &pl.label_per_row)?;
                    let logp = g.log_clamped(picked, PROB_EPS)?;
                    let weighted = g.mul_const(logp, pl.weight_per_row.clone())?;
                    let s = g.sum(weighted)?;
                    terms.l_pl = Some(g.scale(s, -1.0)?);
                }
            }
        }
    }

    let (total, bundle) = cat_total_loss(&mut g, &terms)?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(CatError::TrainingAborted {
            epoch: plan.epoch,
            iter: plan.iter,
            reason: format!(
                "non-finite loss (c={}, dc={}, pl={}, mcc={})",
                bundle.l_c, bundle.l_dc, bundle.l_pl, bundle.l_mcc
            ),
        });
    }
    g.backward(total, params)?;
    Ok(bundle)
}

fn fit_calibrator(
    kind: CalibratorKind,
    model: &CatModel,
    teacher: &TeacherState,
    inputs: &TrainInputs,
) -> Result<CalibratorParams> {
    let labels = inputs
        .source_test
        .labels
        .as_ref()
        .ok_or_else(|| CatError::Data("calibrator fitting needs labeled source test".into()))?;
    let (_, teacher_logits) = forward_dataset(
        &teacher.params,
        &teacher.encoder,
        &teacher.classifier,
        inputs.source_test,
    )?;
    match kind {
        CalibratorKind::Identity => Ok(CalibratorParams::identity()),
        CalibratorKind::Temperature => fit_temperature(&teacher_logits, labels),
        CalibratorKind::Vector => fit_vector_scaling(&teacher_logits, labels),
        CalibratorKind::Matrix => fit_matrix_scaling(&teacher_logits, labels),
        CalibratorKind::Cpcs => {
            let (test_feat, _) = forward_dataset(
                &model.params,
                &model.encoder,
                &model.classifier,
                inputs.source_test,
            )?;
            let (src_feat, _) = forward_dataset(
                &model.params,
                &model.encoder,
                &model.classifier,
                inputs.source_train,
            )?;
            let (tgt_feat, _) = forward_dataset(
                &model.params,
                &model.encoder,
                &model.classifier,
                inputs.target_train,
            )?;
            fit_cpcs(&teacher_logits, labels, &test_feat, &src_feat, &tgt_feat)
        }
    }
}

fn build_checkpoint(
    epoch: u64,
    model: &CatModel,
    teacher: Option<&TeacherState>,
    opt: &Adam,
    calibrator: &CalibratorParams,
) -> Checkpoint {
    let mut optimizer = Vec::new();
    for id in model.params.ids() {
        if let Some(state) = opt.state(id) {
            optimizer.push((model.params.get(id).name.clone(), state.clone()));
        }
    }
    Checkpoint {
        epoch,
        model: model.params.clone(),
        teacher: teacher.map(|t| t.params.clone()),
        optimizer,
        calibrator: calibrator.clone(),
    }
}

fn validate_inputs(net_cfg: &NetConfig, inputs: &TrainInputs) -> Result<()> {
    let sets: [(&str, &SignalDataset); 4] = [
        ("source_train", inputs.source_train),
        ("source_test", inputs.source_test),
        ("target_train", inputs.target_train),
        ("target_test", inputs.target_test),
    ];
    for (name, ds) in sets {
        if ds.is_empty() {
            return Err(CatError::Data(format!("{} is empty", name)));
        }
        if ds.sample_length() != net_cfg.input_length {
            return Err(CatError::Data(format!(
                "{} has sample length {}, model expects {}",
                name,
                ds.sample_length(),
                net_cfg.input_length
            )));
        }
        if ds.classes != net_cfg.classes {
            return Err(CatError::Data(format!(
                "{} has {} classes, model expects {}",
                name, ds.classes, net_cfg.classes
            )));
        }
    }
    for (name, ds) in [
        ("source_train", inputs.source_train),
        ("source_test", inputs.source_test),
        ("target_test", inputs.target_test),
    ] {
        if ds.labels.is_none() {
            return Err(CatError::Data(format!("{} must be labeled", name)));
        }
    }
    if inputs.target_train.labels.is_some() {
        return Err(CatError::Data(
            "target_train must be unlabeled; pass ground truth via target_train_eval_labels"
                .into(),
        ));
    }
    if let Some(labels) = inputs.target_train_eval_labels {
        if labels.len() != inputs.target_train.len() {
            return Err(CatError::Data(format!(
                "{} evaluation labels for {} target samples",
                labels.len(),
                inputs.target_train.len()
            )));
        }
    }
    Ok(())
}

/// Run the full training schedule and return the final model, teacher,
/// calibrator, and per-epoch logs. When `out_dir` is given, checkpoints are
/// written there at the configured cadence plus a final `checkpoint.ckpt`.
pub fn run_training(
    cfg: &TrainerConfig,
    net_cfg: NetConfig,
    inputs: &TrainInputs,
    out_dir: Option<&Path>,
) -> Result<TrainingOutput> {
    cfg.validate()?;
    validate_inputs(&net_cfg, inputs)?;

    let mut init_rng = model_rng(cfg.seed);
    let mut model = CatModel::new(net_cfg, &mut init_rng);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.base_lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let sam_cfg = SamConfig {
        rho: cfg.sam_rho,
        enabled: cfg.sdat_enabled,
    };
    let mut teacher: Option<TeacherState> = None;
    let mut calibrator = CalibratorParams::identity();
    let mut thresholds: Option<ThresholdState> = None;

    let student_ids = model.student_ids();
    let all_ids: Vec<ParamId> = {
        let mut ids = student_ids.clone();
        ids.extend(model.discriminator_ids());
        ids
    };

    let ns = inputs.source_train.len();
    let nt = inputs.target_train.len();
    let iters_per_epoch = ns.max(nt).div_ceil(cfg.batch_size);
    let src_labels_all = inputs.source_train.labels.clone().expect("validated");
    let src_seed = substream(cfg.seed, TAG_SOURCE_SHUFFLE);
    let tgt_seed = substream(cfg.seed, TAG_TARGET_SHUFFLE);

    let mut metrics = Vec::with_capacity(cfg.total_epochs);
    let mut pseudo_stats = Vec::new();

    for epoch in 0..cfg.total_epochs {
        opt.set_lr(lr_at_epoch(cfg.base_lr, epoch, cfg.lr_drop_epochs));
        let adversarial = epoch >= cfg.t_da && cfg.t_da < cfg.total_epochs;
        let self_training = epoch >= cfg.t_pl && cfg.t_pl < cfg.total_epochs;

        if self_training && teacher.is_none() {
            teacher = Some(TeacherState::init_from_student(&model, cfg.ema_alpha));
        }

        // Per-epoch phase 3 preparation: refit the calibrator once it is
        // active, then estimate the class-wise thresholds from the teacher's
        // calibrated predictions over the whole target training set.
        if self_training {
            let t = teacher.as_ref().expect("teacher initialized above");
            if epoch >= cfg.t_cal {
                calibrator = fit_calibrator(cfg.calibrator_kind, &model, t, inputs)?;
            }
            let (_, tgt_logits) =
                forward_dataset(&t.params, &t.encoder, &t.classifier, inputs.target_train)?;
            let preds = apply_calibrator(&tgt_logits, &calibrator)?;
            thresholds = Some(update_thresholds(&preds, cfg.tau)?);
        }

        let src_batches = epoch_batches(ns, cfg.batch_size, src_seed, epoch);
        let tgt_batches = epoch_batches(nt, cfg.batch_size, tgt_seed, epoch);

        let mut bundle_sum = LossBundle::default();
        let mut lambda = 0.0;
        let mut epoch_selected = 0usize;
        let mut epoch_correct = 0usize;
        let mut epoch_truth_known = 0usize;
        let mut conf_sum = 0.0;

        for iter in 0..iters_per_epoch {
            let src_idx = &src_batches[iter % src_batches.len()];
            let tgt_idx = &tgt_batches[iter % tgt_batches.len()];
            let src_batch = inputs.source_train.batch(src_idx);
            let src_labels: Vec<usize> = src_idx.iter().map(|&i| src_labels_all[i]).collect();

            if adversarial {
                lambda = grl_coefficient(progress_p(epoch, iter, iters_per_epoch, cfg)?)?;
            }

            // Teacher side: predict, calibrate, select. Runs in evaluation
            // mode and never touches the student's random streams.
            let mut pseudo = None;
            if self_training {
                let t = teacher.as_ref().expect("teacher exists in phase 3");
                let state = thresholds.as_ref().expect("thresholds set per epoch");
                let logits = t.predict(inputs.target_train.batch(tgt_idx))?;
                let preds = apply_calibrator(&logits, &calibrator)?;
                let batch = select_pseudo_labels(&preds, state, epoch)?;
                if !batch.is_empty() {
                    epoch_selected += batch.len();
                    conf_sum += batch.confidences.iter().sum::<f64>();
                    if let Some(truth) = inputs.target_train_eval_labels {
                        let batch_truth: Vec<usize> =
                            tgt_idx.iter().map(|&i| truth[i]).collect();
                        if let Some(acc) = pseudo_label_accuracy(&batch, &batch_truth) {
                            epoch_correct += (acc * batch.len() as f64).round() as usize;
                            epoch_truth_known += batch.len();
                        }
                    }
                    let mut label_per_row = vec![0usize; tgt_idx.len()];
                    let mut weight_per_row = vec![0.0; tgt_idx.len()];
                    let w = 1.0 / batch.len() as f64;
                    for (&row, &y) in batch.selected.iter().zip(&batch.pseudo_labels) {
                        label_per_row[row] = y;
                        weight_per_row[row] = w;
                    }
                    pseudo = Some(PseudoPlan {
                        label_per_row,
                        weight_per_row,
                        n_selected: batch.len(),
                    });
                }
            }

            let needs_target = adversarial || (cfg.mcc_enabled && epoch >= cfg.t_da);
            let plan = IterPlan {
                epoch,
                iter,
                src_batch,
                src_labels,
                tgt_batch: if needs_target || pseudo.is_some() {
                    Some(inputs.target_train.batch(tgt_idx))
                } else {
                    None
                },
                adversarial,
                lambda,
                mcc: cfg.mcc_enabled && epoch >= cfg.t_da,
                pseudo,
            };

            let step_ids: &[ParamId] = if adversarial { &all_ids } else { &student_ids };
            let enc = model.encoder.clone();
            let head = model.classifier;
            let disc = model.discriminator.clone();

            let bundle = if cfg.sdat_enabled {
                let mut full_bundle = LossBundle::default();
                sam_step(
                    &mut model.params,
                    step_ids,
                    &mut opt,
                    &sam_cfg,
                    |p| gradient_pass(p, &enc, &head, &disc, &plan, cfg, true).map(|_| ()),
                    |p| {
                        full_bundle = gradient_pass(p, &enc, &head, &disc, &plan, cfg, false)?;
                        Ok(())
                    },
                )?;
                full_bundle
            } else {
                model.params.zero_grads();
                let bundle =
                    gradient_pass(&mut model.params, &enc, &head, &disc, &plan, cfg, false)?;
                opt.step(&mut model.params, step_ids)?;
                bundle
            };

            if let Some(t) = teacher.as_mut() {
                t.ema_update(&model.params)?;
            }

            bundle_sum.l_c += bundle.l_c;
            bundle_sum.l_pl += bundle.l_pl;
            bundle_sum.l_dc += bundle.l_dc;
            bundle_sum.l_mcc += bundle.l_mcc;
            bundle_sum.total += bundle.total;
        }

        // End-of-epoch evaluation: the teacher once it exists, the student
        // before, both through the currently active calibrator.
        let (eval_params, eval_enc, eval_head) = match &teacher {
            Some(t) => (&t.params, &t.encoder, &t.classifier),
            None => (&model.params, &model.encoder, &model.classifier),
        };
        let (src_acc, src_ece, _) = evaluate(
            eval_params,
            eval_enc,
            eval_head,
            inputs.source_test,
            &calibrator,
        )?;
        let (tgt_acc, tgt_ece, _) = evaluate(
            eval_params,
            eval_enc,
            eval_head,
            inputs.target_test,
            &calibrator,
        )?;

        let n = iters_per_epoch as f64;
        let pl_acc = if epoch_truth_known > 0 {
            Some(epoch_correct as f64 / epoch_truth_known as f64)
        } else {
            None
        };
        metrics.push(MetricsRecord {
            epoch,
            source_test_acc: src_acc,
            target_test_acc: tgt_acc,
            source_ece: src_ece.ece,
            target_ece: tgt_ece.ece,
            n_pseudo_selected: if self_training {
                Some(epoch_selected)
            } else {
                None
            },
            pseudo_label_acc: pl_acc,
            loss_c: bundle_sum.l_c / n,
            loss_pl: bundle_sum.l_pl / n,
            loss_dc: bundle_sum.l_dc / n,
            loss_mcc: bundle_sum.l_mcc / n,
            loss_total: bundle_sum.total / n,
            lr: lr_at_epoch(cfg.base_lr, epoch, cfg.lr_drop_epochs),
            grl_lambda: lambda,
        });
        if self_training {
            pseudo_stats.push(PseudoStatsRow {
                epoch,
                n_selected: epoch_selected,
                pl_accuracy: pl_acc,
                mean_confidence: if epoch_selected > 0 {
                    Some(conf_sum / epoch_selected as f64)
                } else {
                    None
                },
                thresholds: thresholds
                    .as_ref()
                    .map(|t| t.thresholds.clone())
                    .unwrap_or_default(),
            });
        }

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let ckpt = build_checkpoint(
                    epoch as u64,
                    &model,
                    teacher.as_ref(),
                    &opt,
                    &calibrator,
                );
                save_checkpoint(&ckpt, &dir.join(format!("checkpoint_epoch_{}.ckpt", epoch)))?;
            }
        }
    }

    let (eval_params, eval_enc, eval_head) = match &teacher {
        Some(t) => (&t.params, &t.encoder, &t.classifier),
        None => (&model.params, &model.encoder, &model.classifier),
    };
    let (_, _, source_eval) = evaluate(
        eval_params,
        eval_enc,
        eval_head,
        inputs.source_test,
        &calibrator,
    )?;
    let (_, _, target_eval) = evaluate(
        eval_params,
        eval_enc,
        eval_head,
        inputs.target_test,
        &calibrator,
    )?;

    let final_checkpoint = build_checkpoint(
        cfg.total_epochs as u64,
        &model,
        teacher.as_ref(),
        &opt,
        &calibrator,
    );
    if let Some(dir) = out_dir {
        save_checkpoint(&final_checkpoint, &dir.join("checkpoint.ckpt"))?;
    }

    Ok(TrainingOutput {
        model,
        teacher,
        calibrator,
        metrics,
        pseudo_stats,
        final_checkpoint,
        source_eval,
        target_eval,
    })
}

fn fmt_opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "epoch,source_test_acc,target_test_acc,source_ece,target_ece,\
         n_pseudo_selected,pseudo_label_acc,loss_c,loss_pl,loss_dc,loss_mcc,loss_total,\
         lr,grl_lambda\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.source_test_acc,
            r.target_test_acc,
            r.source_ece,
            r.target_ece,
            fmt_opt_usize(r.n_pseudo_selected),
            fmt_opt_f64(r.pseudo_label_acc),
            r.loss_c,
            r.loss_pl,
            r.loss_dc,
            r.loss_mcc,
            r.loss_total,
            r.lr,
            r.grl_lambda
        ));
    }
    out
}

pub fn pseudo_stats_csv(rows: &[PseudoStatsRow], classes: usize) -> String {
    let mut out = String::from("epoch,n_selected,pl_accuracy,mean_confidence");
    for k in 0..classes {
        out.push_str(&format!(",threshold_{}", k));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}",
            r.epoch,
            r.n_selected,
            fmt_opt_f64(r.pl_accuracy),
            fmt_opt_f64(r.mean_confidence)
        ));
        for k in 0..classes {
            let t = r.thresholds.get(k).copied().unwrap_or(f64::NAN);
            out.push_str(&format!(",{}", t));
        }
        out.push('\n');
    }
    out
}
