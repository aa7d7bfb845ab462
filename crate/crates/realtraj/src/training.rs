//! Losses, the optimizer, and the training loop for pretraining and
//! fine-tuning.
//!
//! Pretraining minimizes `L_F + alpha L_M + beta L_D + gamma L_I`: the
//! forecasting MSE from corrupted inputs, the unmasking and denoising
//! reconstructions over the corrupted slots, and the person-ID embedding
//! reconstruction from a clean forward pass. Weak fine-tuning minimizes
//! the closest-detection distance plus `lambda` times the acceleration
//! regularizer; supervised fine-tuning plain (winner-take-all) MSE.
//!
//! Training-log CSV columns (empty field = not applicable to the phase):
//! `epoch,phase,loss_F,loss_M,loss_D,loss_I,loss_W,loss_Reg,val_ADE,val_FDE,lr`

use crate::autodiff::{backward, concat_rows, Tape, Tensor};
use crate::corruption::{corrupt_for_pretraining, CorruptionRecord};
use crate::dataio::{center_on_target, strip_ids, DetectionWindow, ModelInput};
use crate::error::{Error, Result};
use crate::evaluation::{ade, fde, min_metrics};
use crate::model::{BoundModel, Det2TrajFormer};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Ground-truth person-ID embeddings: a fixed injective map from
/// (sequence, pedestrian) to a unit vector, drawn from a seeded hash-keyed
/// Gaussian and normalized.
#[derive(Debug, Clone)]
pub struct IdEmbeddingTable {
    pub d_i: usize,
    pub seed: u64,
}

impl IdEmbeddingTable {
    pub fn new(d_i: usize, seed: u64) -> IdEmbeddingTable {
        IdEmbeddingTable { d_i, seed }
    }

    pub fn get(&self, sequence_id: u64, ped_id: i64) -> Vec<f64> {
        let key = derive_seed_indexed(
            derive_seed_indexed(self.seed, "id-embed", sequence_id),
            "ped",
            ped_id as u64,
        );
        let mut rng = rng_from_seed(key);
        let mut v: Vec<f64> = (0..self.d_i)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Loss-weight schedule over the pretraining epochs: the first half trains
/// forecasting plus unmasking, the second half forecasting plus denoising
/// and ID reconstruction.
pub fn schedule_weights(epoch: usize, total: usize) -> Result<(f64, f64, f64)> {
    if epoch >= total {
        return Err(Error::Invalid(format!(
            "epoch {epoch} out of range 0..{total}"
        )));
    }
    if epoch < total / 2 {
        Ok((1.0, 0.0, 0.0))
    } else {
        Ok((0.0, 100.0, 0.1))
    }
}

/// Winner-take-all head selection: index of the head with minimal mean
/// displacement to the truth, ties to the lowest index.
pub fn wta_index(preds: &[Vec<[f64; 2]>], truth: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, p) in preds.iter().enumerate() {
        let err = ade(p, truth).expect("congruent prediction");
        if err < best_err {
            best_err = err;
            best = i;
        }
    }
    best
}

fn tensor_rows(t: &Tensor) -> Vec<[f64; 2]> {
    t.value().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Winner-take-all loss: MSE of the best head only, so the other heads
/// receive no gradient.
pub fn wta_select(preds: &[Tensor], truth: &[[f64; 2]]) -> Result<(usize, Tensor)> {
    assert!(!preds.is_empty());
    let values: Vec<Vec<[f64; 2]>> = preds.iter().map(tensor_rows).collect();
    let index = wta_index(&values, truth);
    let tape = preds[index].clone();
    let flat: Vec<f64> = truth.iter().flatten().copied().collect();
    let target = leaf_like(&tape, &flat, truth.len());
    let loss = preds[index].mse(&target)?;
    Ok((index, loss))
}

// Tensors do not expose their tape; build the constant through an op on the
// same tape instead.
fn leaf_like(reference: &Tensor, flat: &[f64], rows: usize) -> Tensor {
    reference.tape_leaf(flat, &[rows, 2])
}

/// Fully-supervised loss: (winner-take-all) MSE on future positions.
pub fn supervised_loss(preds: &[Tensor], truth: &[[f64; 2]]) -> Result<(usize, Tensor)> {
    wta_select(preds, truth)
}

pub struct WeakLoss {
    pub total: Tensor,
    pub matching: f64,
    pub regularizer: f64,
}

/// Weakly-supervised loss: for each future step with detections, the
/// distance from the prediction to its nearest detection, plus `lambda`
/// times the acceleration regularizer over all predicted steps (the first
/// second-difference uses the observed origin as the step before the
/// first prediction).
pub fn weak_loss(pred: &Tensor, future_detections: &[Vec<[f64; 2]>], lambda: f64) -> Result<WeakLoss> {
    let t_pred = pred.shape()[0];
    assert_eq!(t_pred, future_detections.len());
    let values = tensor_rows(pred);

    // Nearest-detection matching, skipping empty steps.
    let mut rows = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (t, detections) in future_detections.iter().enumerate() {
        if detections.is_empty() {
            continue;
        }
        let p = values[t];
        let nearest = detections
            .iter()
            .min_by(|a, b| {
                let da = (p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2);
                let db = (p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        rows.push(pred.slice_rows(t, t + 1)?);
        targets.extend_from_slice(nearest);
    }
    if rows.is_empty() {
        return Err(Error::NoWeakSupervision);
    }
    let selected = concat_rows(&rows)?;
    let target = leaf_like(pred, &targets, targets.len() / 2);
    let matching = selected.sub(&target)?.row_norms()?.sum();

    // Acceleration regularizer: || y_{t+1} - 2 y_t + y_{t-1} ||, with the
    // origin anchoring the step before the first prediction.
    let regularizer = if t_pred >= 2 {
        let next = pred.slice_rows(1, t_pred)?;
        let curr = pred.slice_rows(0, t_pred - 1)?.scale(-2.0);
        let prev = if t_pred == 2 {
            leaf_like(pred, &[0.0, 0.0], 1)
        } else {
            concat_rows(&[
                leaf_like(pred, &[0.0, 0.0], 1),
                pred.slice_rows(0, t_pred - 2)?,
            ])?
        };
        Some(next.add(&curr)?.add(&prev)?.row_norms()?.sum())
    } else {
        None
    };

    let (total, reg_value) = match &regularizer {
        Some(reg) if lambda != 0.0 => (matching.add(&reg.scale(lambda))?, reg.item()),
        Some(reg) => (matching.clone(), reg.item()),
        None => (matching.clone(), 0.0),
    };
    Ok(WeakLoss {
        total,
        matching: matching.item(),
        regularizer: reg_value,
    })
}

/// Mean second-difference magnitude of a predicted trajectory (origin
/// anchored), the quantity the acceleration regularizer drives down.
pub fn mean_second_difference(pred: &[[f64; 2]]) -> f64 {
    if pred.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut count = 0;
    for t in 0..pred.len() - 1 {
        let prev = if t == 0 { [0.0, 0.0] } else { pred[t - 1] };
        let dx = pred[t + 1][0] - 2.0 * pred[t][0] + prev[0];
        let dy = pred[t + 1][1] - 2.0 * pred[t][1] + prev[1];
        sum += (dx * dx + dy * dy).sqrt();
        count += 1;
    }
    sum / count as f64
}

/// A window preprocessed for training: centered, identity-stripped, with
/// the pieces each phase needs.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub input: ModelInput,
    pub truth: Option<Vec<[f64; 2]>>,
    pub future_detections: Vec<Vec<[f64; 2]>>,
    pub seed: u64,
    pub sequence_id: u64,
    /// (frame, slot) of the target's last-frame detection, protected from
    /// masking during pretraining.
    pub target_slot: (usize, usize),
}

pub fn prepare_window(window: &DetectionWindow) -> PreparedWindow {
    let centered = center_on_target(window);
    let input = strip_ids(&centered);
    let frame = input.t_obs - 1;
    let slot = input.tokens[..input.target_token]
        .iter()
        .filter(|(t, _)| *t == input.t_obs)
        .count();
    PreparedWindow {
        truth: centered.target_future.clone(),
        future_detections: centered.future_detections.clone(),
        seed: window.seed,
        sequence_id: window.sequence_id,
        target_slot: (frame, slot),
        input,
    }
}

pub struct PretrainLoss {
    pub total: Tensor,
    pub l_f: f64,
    pub l_m: f64,
    pub l_d: f64,
    pub l_i: f64,
    pub wta: usize,
}

/// The combined pretraining loss for one window.
///
/// `L_F`: (winner-take-all) MSE of the forecast from the corrupted input.
/// `L_M`: MSE of the unmasking head against the clean coordinates, over
/// masked slots only. `L_D`: likewise for the denoising head over noised
/// slots. `L_I`: MSE of the ID head against the embedding table, computed
/// on a clean-input forward pass. Zero-weight terms are skipped entirely.
pub fn pretrain_loss(
    bound: &BoundModel,
    prepared: &PreparedWindow,
    record: &CorruptionRecord,
    id_table: &IdEmbeddingTable,
    weights: (f64, f64, f64),
) -> Result<PretrainLoss> {
    let truth = prepared
        .truth
        .as_ref()
        .ok_or_else(|| Error::MissingLabels("pretraining window lacks ground-truth future".into()))?;
    let (alpha, beta, gamma) = weights;

    let corrupted = prepared.input.with_positions(&record.x_corrupt);
    let out = bound.forward(&corrupted.tokens, None)?;
    let preds = bound.predict_from(&out)?;
    let (wta, l_f) = wta_select(&preds, truth)?;
    let mut total = l_f.clone();
    let l_f_value = l_f.item();

    let clean_flat: Vec<f64> = prepared
        .input
        .tokens
        .iter()
        .flat_map(|(_, p)| [p[0], p[1]])
        .collect();
    let n_tokens = prepared.input.tokens.len();

    let mut l_m_value = 0.0;
    let mut l_d_value = 0.0;
    let mut l_i_value = 0.0;

    let needs_pretext = alpha != 0.0 || beta != 0.0;
    if needs_pretext {
        let (unmask, denoise, _) = bound.pretext(&out)?;
        let clean = leaf_like(&unmask, &clean_flat, n_tokens);
        let mask_flags: Vec<bool> = record.mask.iter().flatten().copied().collect();
        let noise_flags: Vec<bool> = record
            .noise
            .iter()
            .flatten()
            .map(|n| n[0] != 0.0 || n[1] != 0.0)
            .collect();
        if alpha != 0.0 {
            if let Some(term) = masked_mse(&unmask, &clean, &mask_flags)? {
                l_m_value = term.item();
                total = total.add(&term.scale(alpha))?;
            }
        }
        if beta != 0.0 {
            if let Some(term) = masked_mse(&denoise, &clean, &noise_flags)? {
                l_d_value = term.item();
                total = total.add(&term.scale(beta))?;
            }
        }
    }

    if gamma != 0.0 {
        // Clean-input forward pass: IDs are reconstructed from X, not X^C.
        let clean_out = bound.forward(&prepared.input.tokens, None)?;
        let (_, _, id_pred) = bound.pretext(&clean_out)?;
        let d_i = id_table.d_i;
        let targets: Vec<f64> = prepared
            .input
            .ids
            .iter()
            .flat_map(|&ped| id_table.get(prepared.sequence_id, ped))
            .collect();
        let target = id_pred.tape_leaf(&targets, &[n_tokens, d_i]);
        let term = id_pred.mse(&target)?;
        l_i_value = term.item();
        total = total.add(&term.scale(gamma))?;
    }

    Ok(PretrainLoss {
        total,
        l_f: l_f_value,
        l_m: l_m_value,
        l_d: l_d_value,
        l_i: l_i_value,
        wta,
    })
}

/// MSE restricted to flagged token slots (mean over the flagged scalar
/// elements); None when nothing is flagged.
fn masked_mse(pred: &Tensor, target: &Tensor, flags: &[bool]) -> Result<Option<Tensor>> {
    let n_flagged = flags.iter().filter(|&&f| f).count();
    if n_flagged == 0 {
        return Ok(None);
    }
    let weights: Vec<f64> = flags
        .iter()
        .flat_map(|&f| {
            let w = if f { 1.0 } else { 0.0 };
            [w, w]
        })
        .collect();
    let w = pred.tape_leaf(&weights, &[flags.len(), 2]);
    let diff = pred.sub(target)?.mul(&w)?;
    let loss = diff.mul(&diff)?.sum().scale(1.0 / (2 * n_flagged) as f64);
    Ok(Some(loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    FinetuneWeak,
    FinetuneSupervised,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FinetuneWeak => "finetune-weak",
            Phase::FinetuneSupervised => "finetune-supervised",
        }
    }
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &Det2TrajFormer) -> AdamState {
        AdamState {
            m: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step from the gradients currently stored in the model.
pub fn adam_step(model: &mut Det2TrajFormer, state: &mut AdamState, lr: f64) -> Result<()> {
    for p in &model.params {
        if p.grad.iter().any(|g| g.is_nan()) {
            return Err(Error::NanGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (i, p) in model.params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let g = p.grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(model: &mut Det2TrajFormer, max_norm: f64) -> f64 {
    let norm_sq: f64 = model
        .params
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in &mut model.params {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Pretraining corruption probability p_c.
    pub corrupt_prob: f64,
    pub sigma: f64,
    /// Weak-loss regularizer weight.
    pub lambda: f64,
    pub grad_clip: f64,
    pub lr_drop_frac: f64,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Worker threads for within-batch parallelism; results are identical
    /// for any thread count.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-4,
            batch_size: 16,
            corrupt_prob: 0.3,
            sigma: 0.5,
            lambda: 10.0,
            grad_clip: 1.0,
            lr_drop_frac: 0.8,
            lr_drop_factor: 0.1,
            seed: 0,
            threads: 1,
        }
    }
}

/// One training-log row; `None` fields print empty in the CSV.
#[derive(Debug, Clone, Default)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub loss_f: Option<f64>,
    pub loss_m: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_i: Option<f64>,
    pub loss_w: Option<f64>,
    pub loss_reg: Option<f64>,
    pub val_ade: Option<f64>,
    pub val_fde: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str =
    "epoch,phase,loss_F,loss_M,loss_D,loss_I,loss_W,loss_Reg,val_ADE,val_FDE,lr";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            opt(self.loss_f),
            opt(self.loss_m),
            opt(self.loss_d),
            opt(self.loss_i),
            opt(self.loss_w),
            opt(self.loss_reg),
            opt(self.val_ade),
            opt(self.val_fde),
            self.lr
        )
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation ADE (the final state when no
    /// validation windows were given).
    pub best: Det2TrajFormer,
    pub log: Vec<LogRow>,
}

struct WindowResult {
    grads: Vec<(usize, Vec<f64>)>,
    l_f: f64,
    l_m: f64,
    l_d: f64,
    l_i: f64,
    l_w: f64,
    l_reg: f64,
}

fn window_pass(
    model: &Det2TrajFormer,
    prepared: &PreparedWindow,
    phase: Phase,
    config: &TrainConfig,
    weights: (f64, f64, f64),
    epoch: usize,
) -> Result<WindowResult> {
    let tape = Tape::new();
    let bound = BoundModel::new(&tape, model);
    let mut result = WindowResult {
        grads: Vec::new(),
        l_f: 0.0,
        l_m: 0.0,
        l_d: 0.0,
        l_i: 0.0,
        l_w: 0.0,
        l_reg: 0.0,
    };
    let total = match phase {
        Phase::Pretrain => {
            let record = corrupt_for_pretraining(
                &prepared.input.positions_by_frame(),
                config.corrupt_prob,
                config.sigma,
                Some(prepared.target_slot),
                derive_seed_indexed(prepared.seed, "corrupt", epoch as u64),
            );
            let loss = pretrain_loss(&bound, prepared, &record, &id_table_of(model, config), weights)?;
            result.l_f = loss.l_f;
            result.l_m = loss.l_m;
            result.l_d = loss.l_d;
            result.l_i = loss.l_i;
            loss.total
        }
        Phase::FinetuneWeak => {
            let (preds, _) = bound.predict(&prepared.input.tokens, None)?;
            // Weak supervision trains the deterministic head.
            let loss = weak_loss(&preds[0], &prepared.future_detections, config.lambda)?;
            result.l_w = loss.matching;
            result.l_reg = loss.regularizer;
            loss.total
        }
        Phase::FinetuneSupervised => {
            let truth = prepared.truth.as_ref().ok_or_else(|| {
                Error::MissingLabels("supervised fine-tuning needs ground-truth futures".into())
            })?;
            let (preds, _) = bound.predict(&prepared.input.tokens, None)?;
            let (_, loss) = supervised_loss(&preds, truth)?;
            result.l_f = loss.item();
            loss
        }
    };
    backward(&total)?;
    result.grads = tape.param_grads();
    Ok(result)
}

fn id_table_of(model: &Det2TrajFormer, config: &TrainConfig) -> IdEmbeddingTable {
    IdEmbeddingTable::new(model.config.d_i, derive_seed(config.seed, "id-table"))
}

/// Validation metrics on clean inputs: mean (min-over-heads) ADE/FDE over
/// fully-observed windows.
pub fn validate(model: &Det2TrajFormer, windows: &[PreparedWindow]) -> Result<(f64, f64)> {
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    let mut n = 0;
    for w in windows {
        let Some(truth) = &w.truth else { continue };
        let preds = model.predict_values(&w.input.tokens)?;
        let (a, f) = min_metrics(&preds, truth)?;
        sum_ade += a;
        sum_fde += f;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("no fully-observed validation windows".into()));
    }
    Ok((sum_ade / n as f64, sum_fde / n as f64))
}

/// Runs one training phase. Deterministic given the config seed: window
/// order, corruption, and gradient merging are all derived from it, and
/// worker threads never change the result.
pub fn train(
    model: &mut Det2TrajFormer,
    train_windows: &[DetectionWindow],
    val_windows: &[DetectionWindow],
    phase: Phase,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_windows.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let prepared: Vec<PreparedWindow> = train_windows.iter().map(prepare_window).collect();
    let prepared_val: Vec<PreparedWindow> = val_windows.iter().map(prepare_window).collect();

    let mut adam = AdamState::new(model);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Det2TrajFormer)> = None;
    let threads = config.threads.max(1);
    let drop_epoch = (config.lr_drop_frac * config.epochs as f64).floor() as usize;

    for epoch in 0..config.epochs {
        let weights = match phase {
            Phase::Pretrain => schedule_weights(epoch, config.epochs)?,
            _ => (0.0, 0.0, 0.0),
        };
        let lr = if epoch >= drop_epoch {
            config.lr * config.lr_drop_factor
        } else {
            config.lr
        };

        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed_indexed(
            config.seed,
            "epoch-order",
            epoch as u64,
        )));

        let mut sums = [0.0f64; 6];
        let mut n_windows = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut results: Vec<Option<Result<WindowResult>>> = Vec::new();
            results.resize_with(batch.len(), || None);
            if threads <= 1 || batch.len() <= 1 {
                for (slot, &widx) in batch.iter().enumerate() {
                    results[slot] =
                        Some(window_pass(model, &prepared[widx], phase, config, weights, epoch));
                }
            } else {
                // Windows are independent graphs; merge order below is fixed
                // by batch position, so any thread count gives the same sums.
                let model_ref: &Det2TrajFormer = model;
                let prepared_ref = &prepared;
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for (chunk_idx, chunk) in batch.chunks(batch.len().div_ceil(threads)).enumerate()
                    {
                        let chunk: Vec<usize> = chunk.to_vec();
                        handles.push((
                            chunk_idx,
                            scope.spawn(move || {
                                chunk
                                    .iter()
                                    .map(|&widx| {
                                        window_pass(
                                            model_ref,
                                            &prepared_ref[widx],
                                            phase,
                                            config,
                                            weights,
                                            epoch,
                                        )
                                    })
                                    .collect::<Vec<_>>()
                            }),
                        ));
                    }
                    let per_thread = batch.len().div_ceil(threads);
                    for (chunk_idx, handle) in handles {
                        for (i, r) in handle.join().expect("worker panicked").into_iter().enumerate()
                        {
                            results[chunk_idx * per_thread + i] = Some(r);
                        }
                    }
                });
            }

            model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for r in results.into_iter().flatten() {
                let r = r?;
                for (key, grad) in &r.grads {
                    let dst = &mut model.params[*key].grad;
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += g * scale;
                    }
                }
                sums[0] += r.l_f;
                sums[1] += r.l_m;
                sums[2] += r.l_d;
                sums[3] += r.l_i;
                sums[4] += r.l_w;
                sums[5] += r.l_reg;
                n_windows += 1;
            }
            clip_global_norm(model, config.grad_clip);
            adam_step(model, &mut adam, lr)?;
        }

        let k = n_windows.max(1) as f64;
        let (val_ade, val_fde) = if prepared_val.is_empty() {
            (None, None)
        } else {
            let (a, f) = validate(model, &prepared_val)?;
            (Some(a), Some(f))
        };
        if let Some(a) = val_ade {
            if best.as_ref().map_or(true, |(b, _)| a < *b) {
                best = Some((a, model.clone()));
            }
        }
        let is_pretrain = phase == Phase::Pretrain;
        log.push(LogRow {
            epoch,
            phase: phase.name(),
            loss_f: (is_pretrain || phase == Phase::FinetuneSupervised).then_some(sums[0] / k),
            loss_m: is_pretrain.then_some(sums[1] / k),
            loss_d: is_pretrain.then_some(sums[2] / k),
            loss_i: is_pretrain.then_some(sums[3] / k),
            loss_w: (phase == Phase::FinetuneWeak).then_some(sums[4] / k),
            loss_reg: (phase == Phase::FinetuneWeak).then_some(sums[5] / k),
            val_ade,
            val_fde,
            lr,
        });
    }

    let best_model = best.map(|(_, m)| m).unwrap_or_else(|| model.clone());
    Ok(TrainOutcome {
        best: best_model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{make_windows, Supervision, TrajectorySequence};
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny_model(t_obs: usize, t_pred: usize, n_futures: usize) -> Det2TrajFormer {
        Det2TrajFormer::new(
            ModelConfig {
                d: 8,
                layers: 1,
                heads: 2,
                d_i: 4,
                t_obs,
                t_pred,
                n_futures,
                ff_dim: 16,
            },
            11,
        )
        .unwrap()
    }

    fn toy_windows(n_peds: usize, t_obs: usize, t_pred: usize) -> Vec<DetectionWindow> {
        let frames = (0..(t_obs + t_pred + 4))
            .map(|f| {
                (
                    f as i64,
                    (0..n_peds)
                        .map(|p| {
                            (
                                p as i64,
                                [
                                    f as f64 * 0.5 + p as f64 * 2.0,
                                    p as f64 - f as f64 * 0.25,
                                ],
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        let seq = TrajectorySequence::from_frames(frames).unwrap().with_id(17);
        make_windows(&seq, t_obs, t_pred, 1, Supervision::Full)
    }

    #[test]
    fn id_embeddings_are_unit_and_deterministic() {
        let table = IdEmbeddingTable::new(16, 3);
        let a = table.get(1, 5);
        let b = table.get(1, 5);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_ne!(table.get(1, 5), table.get(1, 6));
        assert_ne!(table.get(1, 5), table.get(2, 5));
    }

    #[test]
    fn schedule_matches_the_two_phase_plan() {
        assert_eq!(schedule_weights(50, 200).unwrap(), (1.0, 0.0, 0.0));
        assert_eq!(schedule_weights(150, 200).unwrap(), (0.0, 100.0, 0.1));
        assert_eq!(schedule_weights(99, 200).unwrap(), (1.0, 0.0, 0.0));
        assert_eq!(schedule_weights(100, 200).unwrap(), (0.0, 100.0, 0.1));
        assert!(schedule_weights(200, 200).is_err());
    }

    #[test]
    fn wta_picks_the_best_head_and_matches_scan() {
        let mut rng = crate::rng::rng_from_seed(9);
        let truth: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen(), rng.gen()]).collect();
        for _ in 0..50 {
            let heads: Vec<Vec<[f64; 2]>> = (0..5)
                .map(|_| (0..6).map(|_| [rng.gen(), rng.gen()]).collect())
                .collect();
            let idx = wta_index(&heads, &truth);
            let scan = (0..5)
                .min_by(|&a, &b| {
                    ade(&heads[a], &truth)
                        .unwrap()
                        .total_cmp(&ade(&heads[b], &truth).unwrap())
                })
                .unwrap();
            assert_eq!(idx, scan);
        }
        // Single head is always index 0; an exact head wins with loss 0.
        assert_eq!(wta_index(&[truth.clone()], &truth), 0);
        let heads = vec![
            truth.iter().map(|p| [p[0] + 1.0, p[1]]).collect::<Vec<_>>(),
            truth.clone(),
        ];
        assert_eq!(wta_index(&heads, &truth), 1);
    }

    #[test]
    fn wta_gradient_skips_unselected_heads() {
        let model = tiny_model(3, 2, 3);
        let windows = toy_windows(1, 3, 2);
        let prepared = prepare_window(&windows[0]);
        let truth = prepared.truth.clone().unwrap();
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model);
        let (preds, _) = bound.predict(&prepared.input.tokens, None).unwrap();
        let (selected, loss) = wta_select(&preds, &truth).unwrap();
        backward(&loss).unwrap();
        let mut tmp = model.clone();
        tmp.zero_grads();
        tmp.accumulate_grads(&tape);
        for n in 0..3 {
            let g: f64 = tmp
                .params
                .iter()
                .filter(|p| p.name.starts_with(&format!("head_f{n}")))
                .flat_map(|p| p.grad.iter())
                .map(|g| g * g)
                .sum();
            if n == selected {
                assert!(g > 0.0, "selected head must receive gradient");
            } else {
                assert_eq!(g, 0.0, "non-selected head {n} must receive none");
            }
        }
    }

    #[test]
    fn supervised_loss_closed_forms() {
        let model = tiny_model(3, 4, 1);
        let windows = toy_windows(1, 3, 4);
        let prepared = prepare_window(&windows[0]);
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model);
        let (preds, _) = bound.predict(&prepared.input.tokens, None).unwrap();
        let values = tensor_rows(&preds[0]);
        // Exact target -> zero loss.
        let (_, loss) = supervised_loss(&preds, &values).unwrap();
        assert_eq!(loss.item(), 0.0);
        // Constant offset delta: mean over all scalar elements gives
        // |delta|^2 / 2.
        let shifted: Vec<[f64; 2]> = values.iter().map(|p| [p[0] + 0.3, p[1] + 0.4]).collect();
        let (_, loss) = supervised_loss(&preds, &shifted).unwrap();
        assert!((loss.item() - 0.125).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn weak_loss_matches_exhaustive_scan_bitwise() {
        let mut rng = crate::rng::rng_from_seed(10);
        for _ in 0..30 {
            let t_pred = 5;
            let pred_vals: Vec<f64> = (0..t_pred * 2).map(|_| rng.gen::<f64>() * 4.0).collect();
            let future: Vec<Vec<[f64; 2]>> = (0..t_pred)
                .map(|t| {
                    let k = if t == 2 { 0 } else { rng.gen_range(1..5) };
                    (0..k).map(|_| [rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0]).collect()
                })
                .collect();
            let tape = Tape::new();
            let pred = tape.leaf(&pred_vals, &[t_pred, 2]);
            let out = weak_loss(&pred, &future, 0.0).unwrap();

            // Independent exhaustive scan.
            let mut expected = 0.0f64;
            for t in 0..t_pred {
                if future[t].is_empty() {
                    continue;
                }
                let p = [pred_vals[t * 2], pred_vals[t * 2 + 1]];
                let mut best = f64::INFINITY;
                for d in &future[t] {
                    let dist = ((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)).sqrt();
                    if dist < best {
                        best = dist;
                    }
                }
                expected += best;
            }
            assert_eq!(out.total.item().to_bits(), expected.to_bits());
            assert_eq!(out.matching.to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn weak_loss_zero_on_perfect_straight_line() {
        // Prediction passes exactly through a detection at every step and
        // extends the origin-anchored straight line.
        let t_pred = 4;
        let pred_vals: Vec<f64> = (1..=t_pred)
            .flat_map(|t| [t as f64 * 0.5, t as f64 * -0.25])
            .collect();
        let future: Vec<Vec<[f64; 2]>> = (1..=t_pred)
            .map(|t| vec![[t as f64 * 0.5, t as f64 * -0.25], [9.0, 9.0]])
            .collect();
        let tape = Tape::new();
        let pred = tape.leaf(&pred_vals, &[t_pred, 2]);
        let out = weak_loss(&pred, &future, 10.0).unwrap();
        assert_eq!(out.matching, 0.0);
        assert!(out.regularizer < 1e-12, "reg {}", out.regularizer);
        assert!(out.total.item() < 1e-11);
    }

    #[test]
    fn weak_loss_errors_when_all_future_frames_empty() {
        let tape = Tape::new();
        let pred = tape.leaf(&[0.0, 0.0, 1.0, 1.0], &[2, 2]);
        let future: Vec<Vec<[f64; 2]>> = vec![vec![], vec![]];
        assert!(matches!(
            weak_loss(&pred, &future, 1.0),
            Err(Error::NoWeakSupervision)
        ));
    }

    /// The nearest detection can only be at most as far as the target's own
    /// future detection.
    #[test]
    fn weak_loss_bounded_by_supervised_distance() {
        let mut rng = crate::rng::rng_from_seed(12);
        for _ in 0..30 {
            let t_pred = 6;
            let pred_vals: Vec<f64> = (0..t_pred * 2).map(|_| rng.gen::<f64>() * 3.0).collect();
            let truth: Vec<[f64; 2]> = (0..t_pred).map(|_| [rng.gen(), rng.gen()]).collect();
            let future: Vec<Vec<[f64; 2]>> = truth
                .iter()
                .map(|&t| {
                    let mut dets = vec![t];
                    for _ in 0..rng.gen_range(0..4) {
                        dets.push([rng.gen::<f64>() * 3.0, rng.gen::<f64>() * 3.0]);
                    }
                    dets
                })
                .collect();
            let tape = Tape::new();
            let pred = tape.leaf(&pred_vals, &[t_pred, 2]);
            let out = weak_loss(&pred, &future, 0.0).unwrap();
            let supervised: f64 = (0..t_pred)
                .map(|t| {
                    let p = [pred_vals[t * 2], pred_vals[t * 2 + 1]];
                    ((p[0] - truth[t][0]).powi(2) + (p[1] - truth[t][1]).powi(2)).sqrt()
                })
                .sum();
            assert!(out.total.item() <= supervised + 1e-12);
        }
    }

    #[test]
    fn regularizer_zero_iff_constant_velocity() {
        let t_pred = 5;
        let tape = Tape::new();
        // Constant velocity from the origin.
        let constant: Vec<f64> = (1..=t_pred).flat_map(|t| [t as f64 * 0.7, t as f64 * 0.2]).collect();
        let future: Vec<Vec<[f64; 2]>> = (0..t_pred).map(|_| vec![[0.0, 0.0]]).collect();
        let pred = tape.leaf(&constant, &[t_pred, 2]);
        let out = weak_loss(&pred, &future, 1.0).unwrap();
        assert!(out.regularizer < 1e-9, "constant velocity: {}", out.regularizer);
        // Bent trajectory.
        let mut bent = constant.clone();
        bent[4] += 0.5;
        let pred = tape.leaf(&bent, &[t_pred, 2]);
        let out = weak_loss(&pred, &future, 1.0).unwrap();
        assert!(out.regularizer > 1e-9);
    }

    /// Loss combination matches an independent recomputation from the MSE
    /// definitions on a one-detection, one-step window.
    #[test]
    fn pretrain_loss_matches_hand_combination() {
        let model = tiny_model(2, 1, 1);
        let frames = vec![
            (0i64, vec![(0i64, [1.0, 2.0])]),
            (1, vec![(0, [1.5, 2.0])]),
            (2, vec![(0, [2.0, 2.0])]),
        ];
        let seq = TrajectorySequence::from_frames(frames).unwrap().with_id(5);
        let windows = make_windows(&seq, 2, 1, 1, Supervision::Full);
        let prepared = prepare_window(&windows[0]);
        let table = IdEmbeddingTable::new(model.config.d_i, 77);

        // Force a deterministic corruption: mask the first detection.
        let mut record = corrupt_for_pretraining(
            &prepared.input.positions_by_frame(),
            0.0,
            0.5,
            Some(prepared.target_slot),
            1,
        );
        record.mask[0][0] = true;
        record.x_corrupt[0][0] = [0.0, 0.0];

        let weights = (2.0, 3.0, 0.5);
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model);
        let loss = pretrain_loss(&bound, &prepared, &record, &table, weights).unwrap();

        // Recompute each term from raw model outputs.
        let corrupted = prepared.input.with_positions(&record.x_corrupt);
        let t2 = Tape::new();
        let b2 = BoundModel::new(&t2, &model);
        let (preds, out) = b2.predict(&corrupted.tokens, None).unwrap();
        let truth = prepared.truth.clone().unwrap();
        let pv = tensor_rows(&preds[0]);
        let l_f = ((pv[0][0] - truth[0][0]).powi(2) + (pv[0][1] - truth[0][1]).powi(2)) / 2.0;
        let (unmask, _, _) = b2.pretext(&out).unwrap();
        let uv = tensor_rows(&unmask);
        let clean = prepared.input.tokens[0].1;
        let l_m = ((uv[0][0] - clean[0]).powi(2) + (uv[0][1] - clean[1]).powi(2)) / 2.0;
        let t3 = Tape::new();
        let b3 = BoundModel::new(&t3, &model);
        let clean_out = b3.forward(&prepared.input.tokens, None).unwrap();
        let (_, _, ids) = b3.pretext(&clean_out).unwrap();
        let iv = ids.value();
        let mut l_i = 0.0;
        for (tok, &ped) in prepared.input.ids.iter().enumerate() {
            let target = table.get(prepared.sequence_id, ped);
            for j in 0..model.config.d_i {
                l_i += (iv[tok * model.config.d_i + j] - target[j]).powi(2);
            }
        }
        l_i /= (prepared.input.tokens.len() * model.config.d_i) as f64;
        let expected = l_f + weights.0 * l_m + weights.2 * l_i; // no noised slots: L_D absent
        assert!(
            (loss.total.item() - expected).abs() < 1e-12,
            "{} vs {expected}",
            loss.total.item()
        );
        assert_eq!(loss.l_d, 0.0);
    }

    #[test]
    fn degenerate_weights_reduce_to_forecasting_loss() {
        let model = tiny_model(2, 1, 1);
        let windows = toy_windows(2, 2, 1);
        let prepared = prepare_window(&windows[0]);
        let table = IdEmbeddingTable::new(model.config.d_i, 1);
        let record = corrupt_for_pretraining(
            &prepared.input.positions_by_frame(),
            0.5,
            0.5,
            Some(prepared.target_slot),
            3,
        );
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model);
        let loss = pretrain_loss(&bound, &prepared, &record, &table, (0.0, 0.0, 0.0)).unwrap();
        assert_eq!(loss.total.item(), loss.l_f);
        assert_eq!(loss.l_m, 0.0);
        assert_eq!(loss.l_d, 0.0);
        assert_eq!(loss.l_i, 0.0);
    }

    /// Perfect reconstruction heads give zero unmasking/denoising loss.
    #[test]
    fn perfect_reconstruction_has_zero_pretext_loss() {
        let model = tiny_model(2, 1, 1);
        let windows = toy_windows(2, 2, 1);
        let prepared = prepare_window(&windows[0]);
        // No corruption at all: the masked/noised sets are empty, so the
        // restricted MSE terms vanish identically.
        let record = corrupt_for_pretraining(
            &prepared.input.positions_by_frame(),
            0.0,
            0.5,
            Some(prepared.target_slot),
            3,
        );
        let table = IdEmbeddingTable::new(model.config.d_i, 1);
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model);
        let loss = pretrain_loss(&bound, &prepared, &record, &table, (1.0, 100.0, 0.0)).unwrap();
        assert_eq!(loss.l_m, 0.0);
        assert_eq!(loss.l_d, 0.0);
    }

    /// L_M's gradient reaches only the masked token slots of the unmasking
    /// head output.
    #[test]
    fn unmasking_gradient_is_restricted_to_masked_slots() {
        let model = tiny_model(3, 1, 1);
        let windows = toy_windows(2, 3, 1);
        let prepared = prepare_window(&windows[0]);
        let mut record = corrupt_for_pretraining(
            &prepared.input.positions_by_frame(),
            0.0,
            0.5,
            Some(prepared.target_slot),
            1,
        );
        record.mask[1][0] = true;
        record.x_corrupt[1][0] = [0.0, 0.0];

        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model);
        let corrupted = prepared.input.with_positions(&record.x_corrupt);
        let out = bound.forward(&corrupted.tokens, None).unwrap();
        let (unmask, _, _) = bound.pretext(&out).unwrap();
        let clean_flat: Vec<f64> = prepared
            .input
            .tokens
            .iter()
            .flat_map(|(_, p)| [p[0], p[1]])
            .collect();
        let clean = unmask.tape_leaf(&clean_flat, &[prepared.input.tokens.len(), 2]);
        let flags: Vec<bool> = record.mask.iter().flatten().copied().collect();
        let loss = masked_mse(&unmask, &clean, &flags).unwrap().unwrap();
        backward(&loss).unwrap();
        let grad = unmask.grad();
        for (slot, &masked) in flags.iter().enumerate() {
            let g = grad[slot * 2].abs() + grad[slot * 2 + 1].abs();
            if masked {
                assert!(g > 0.0, "masked slot {slot} should receive gradient");
            } else {
                assert_eq!(g, 0.0, "unmasked slot {slot} must receive none");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut model = tiny_model(2, 1, 1);
        let before = model.flat_params();
        let mut adam = AdamState::new(&model);
        model.zero_grads();
        adam_step(&mut model, &mut adam, 1e-3).unwrap();
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut model = tiny_model(2, 1, 1);
        let before = model.flat_params();
        model.zero_grads();
        // Put a gradient of +-2 on one parameter.
        model.params[0].grad[0] = 2.0;
        model.params[0].grad[1] = -2.0;
        let mut adam = AdamState::new(&model);
        let lr = 1e-3;
        adam_step(&mut model, &mut adam, lr).unwrap();
        let after = model.flat_params();
        let d0 = after[0] - before[0];
        let d1 = after[1] - before[1];
        assert!((d0 + lr).abs() < lr * 1e-6, "step {d0} vs -lr");
        assert!((d1 - lr).abs() < lr * 1e-6, "step {d1} vs +lr");
        assert_eq!(after[2], before[2]);
    }

    #[test]
    fn adam_nan_gradient_aborts_with_name() {
        let mut model = tiny_model(2, 1, 1);
        model.params[3].grad[0] = f64::NAN;
        let mut adam = AdamState::new(&model);
        match adam_step(&mut model, &mut adam, 1e-3) {
            Err(Error::NanGradient(name)) => assert_eq!(name, model.params[3].name),
            other => panic!("expected NanGradient, got {other:?}"),
        }
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        // Minimize f(x) = sum x_i^2 with Adam on a fake 1-param model.
        let mut model = tiny_model(2, 1, 1);
        let mut adam = AdamState::new(&model);
        let loss_of = |m: &Det2TrajFormer| -> f64 { m.params[0].data.iter().map(|x| x * x).sum() };
        let mut losses = Vec::new();
        for _ in 0..100 {
            model.zero_grads();
            let grads: Vec<f64> = model.params[0].data.iter().map(|x| 2.0 * x).collect();
            model.params[0].grad.copy_from_slice(&grads);
            adam_step(&mut model, &mut adam, 0.05).unwrap();
            losses.push(loss_of(&model));
        }
        for w in losses.windows(2).skip(5) {
            assert!(w[1] < w[0], "loss must decrease after warm-up: {w:?}");
        }
    }

    #[test]
    fn zero_epoch_training_returns_initialization() {
        let mut model = tiny_model(3, 2, 1);
        let before = model.flat_params();
        let windows = toy_windows(2, 3, 2);
        let outcome = train(
            &mut model,
            &windows,
            &[],
            Phase::Pretrain,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(model.flat_params(), before);
        assert_eq!(outcome.best.flat_params(), before);
        assert!(outcome.log.is_empty());
    }

    #[test]
    fn short_pretraining_reduces_forecast_loss() {
        let mut model = tiny_model(3, 2, 1);
        let windows = toy_windows(3, 3, 2);
        let config = TrainConfig {
            epochs: 12,
            lr: 3e-3,
            batch_size: 4,
            corrupt_prob: 0.2,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &windows, &[], Phase::Pretrain, &config).unwrap();
        let first = outcome.log.first().unwrap().loss_f.unwrap();
        let last = outcome.log.last().unwrap().loss_f.unwrap();
        assert!(last < first, "loss_F {first} -> {last} must decrease");
    }

    #[test]
    fn training_is_bitwise_deterministic_and_thread_invariant() {
        let windows = toy_windows(2, 3, 2);
        let run = |threads: usize| {
            let mut model = tiny_model(3, 2, 1);
            let config = TrainConfig {
                epochs: 3,
                lr: 1e-3,
                batch_size: 3,
                seed: 21,
                threads,
                ..TrainConfig::default()
            };
            train(&mut model, &windows, &windows, Phase::Pretrain, &config).unwrap();
            model
                .flat_params()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<u64>>()
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(a, b, "same seed must give bitwise-identical parameters");
        let c = run(2);
        assert_eq!(a, c, "thread count must not change the result");
    }

    #[test]
    fn weak_finetuning_runs_on_windows_without_truth() {
        let mut model = tiny_model(3, 2, 1);
        let windows = toy_windows(2, 3, 2);
        let config = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch_size: 4,
            lambda: 10.0,
            seed: 8,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &windows, &windows, Phase::FinetuneWeak, &config).unwrap();
        assert!(outcome.log.iter().all(|r| r.loss_w.is_some()));
        assert!(outcome.log.iter().all(|r| r.loss_f.is_none()));
    }

    #[test]
    fn log_csv_row_has_fixed_column_count() {
        let row = LogRow {
            epoch: 3,
            phase: "pretrain",
            loss_f: Some(1.5),
            lr: 1e-4,
            ..LogRow::default()
        };
        let line = row.to_csv();
        assert_eq!(line.split(',').count(), LOG_HEADER.split(',').count());
        assert!(line.starts_with("3,pretrain,1.5,,,"));
    }
}
