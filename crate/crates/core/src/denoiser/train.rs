//! Combined training objective, the training loop, and full-volume
//! inference.
//!
//! The objective is `base + lambda_le * lesion + lambda_qu * quant`, where
//! base is mean squared error. Components can be toggled off for ablations
//! and then contribute exactly zero to both value and gradient. Training
//! draws weighted (or uniform) batches from the patch table, averages
//! per-item gradients in a fixed order so worker count never changes the
//! result, and drives a reduce-on-plateau learning-rate schedule from a
//! fixed validation patch set.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::denoiser::adam::{adam_step, AdamConfig, OptimizerState};
use crate::denoiser::model::{backward_traced, forward, forward_traced, Architecture, ModelParams};
use crate::error::{Error, Result};
use crate::lesion::{
    build_weight_table_from_maps, lesion_loss, sample_batch, LossNorm, SamplingConfig,
    TrainingPatchRecord,
};
use crate::parcel::{quant_loss, ParcellationPlan, DEFAULT_SCALE_WEIGHTS};
use crate::phantom::Subject;
use crate::seg::{LesionProbMap, ProbmapProvider};
use crate::volume::{build_patch_grid, extract_box, extract_patch, reassemble, Patch, PatchGrid, Volume};

/// Loss-term weights and ablation toggles.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda_le: f64,
    pub lambda_qu: f64,
    pub use_base: bool,
    pub use_le: bool,
    pub use_qu: bool,
    pub le_norm: LossNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_le: 0.15,
            lambda_qu: 0.5,
            use_base: true,
            use_le: true,
            use_qu: true,
            le_norm: LossNorm::SoftCount,
        }
    }
}

/// Raw (unweighted) values of the three loss terms; disabled terms report 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub base: f64,
    pub le: f64,
    pub qu: f64,
}

/// Evaluates the combined objective and its gradient with respect to the
/// denoised patch.
pub fn combined_loss(
    v_den: &[f64],
    v_hc: &[f64],
    prob: &[f64],
    plan: &ParcellationPlan,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, LossComponents)> {
    let n = v_den.len();
    if v_hc.len() != n || prob.len() != n {
        return Err(Error::Dimension(format!(
            "combined loss shape mismatch: den {n}, hc {}, prob {}",
            v_hc.len(),
            prob.len()
        )));
    }
    let mut grad = vec![0.0f64; n];
    let mut comps = LossComponents::default();
    let mut total = 0.0;
    if cfg.use_base {
        let inv_n = 1.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let d = v_den[i] - v_hc[i];
            acc += d * d;
            grad[i] = 2.0 * d * inv_n;
        }
        comps.base = acc * inv_n;
        total += comps.base;
    }
    if cfg.use_le && cfg.lambda_le != 0.0 {
        let le = lesion_loss(v_den, v_hc, prob, cfg.le_norm)?;
        comps.le = le.value;
        total += cfg.lambda_le * le.value;
        for i in 0..n {
            grad[i] += cfg.lambda_le * le.grad[i];
        }
    }
    if cfg.use_qu && cfg.lambda_qu != 0.0 {
        let qu = quant_loss(v_den, v_hc, plan)?;
        comps.qu = qu.value;
        total += cfg.lambda_qu * qu.value;
        for i in 0..n {
            grad[i] += cfg.lambda_qu * qu.grad[i];
        }
    }
    Ok((total, grad, comps))
}

/// Everything the trainer needs beyond the cohort itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub patch_size: usize,
    pub stride: [usize; 3],
    pub loss: LossConfig,
    /// Weighted sampling per the lesion-aware table; false = uniform.
    pub weighted_sampling: bool,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub lr_stop: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of subjects held out for the validation loss.
    pub val_fraction: f64,
    /// Cap on the fixed validation patch set.
    pub val_max_patches: usize,
    pub scale_weights: [f64; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::ConvNet,
            patch_size: 32,
            stride: [8, 8, 8],
            loss: LossConfig::default(),
            weighted_sampling: true,
            lr0: 1e-4,
            lr_decay_factor: 0.1,
            lr_patience: 5,
            lr_stop: 1e-7,
            batch_size: 16,
            max_epochs: 20,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.2,
            val_max_patches: 64,
            scale_weights: DEFAULT_SCALE_WEIGHTS,
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_base: f64,
    pub loss_le: f64,
    pub loss_qu: f64,
    pub val_loss: f64,
    pub lesion_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,lr,loss_total,loss_base,loss_le,loss_qu,val_loss,lesion_fraction\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:.9},{:.9},{:.9},{:.9},{:.9},{:.4}\n",
                e.epoch, e.lr, e.loss_total, e.loss_base, e.loss_le, e.loss_qu, e.val_loss, e.lesion_fraction
            ));
        }
        out
    }
}

fn patch_triplet(
    subjects: &[Subject],
    maps: &[LesionProbMap],
    record: &TrainingPatchRecord,
    patch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let subject = &subjects[record.subject_index];
    let lc = subject.lc_volume(record.count_level).ok_or_else(|| {
        Error::Evaluation(format!(
            "subject {} has no {}% image",
            subject.id, record.count_level
        ))
    })?;
    let v_lc = extract_box(lc.data(), lc.dims(), record.origin, patch_size)?;
    let v_hc = extract_box(subject.hc.data(), subject.hc.dims(), record.origin, patch_size)?;
    let prob = maps[record.subject_index].extract_box(record.origin, patch_size)?;
    Ok((v_lc, v_hc, prob))
}

fn evenly_spaced(len: usize, cap: usize) -> Vec<usize> {
    if len == 0 || cap == 0 {
        return Vec::new();
    }
    if len <= cap {
        return (0..len).collect();
    }
    (0..cap).map(|i| i * len / cap).collect()
}

struct ItemResult {
    loss: f64,
    comps: LossComponents,
    grads: ModelParams,
}

/// Trains a model on the cohort's (low-count, high-count) patch pairs.
/// Returns the final parameters and the per-epoch log. Fully deterministic
/// for a given (cohort, config, sampling config).
pub fn train(
    cohort: &[Subject],
    provider: &dyn ProbmapProvider,
    cfg: &TrainConfig,
    sampling: &SamplingConfig,
) -> Result<(ModelParams, TrainLog)> {
    if cohort.is_empty() {
        return Err(Error::Training("empty cohort".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    sampling.validate()?;
    let dims = cohort[0].hc.dims();
    if let Some(bad) = cohort.iter().find(|s| s.hc.dims() != dims) {
        return Err(Error::Dimension(format!("subject {} has mismatched dims", bad.id)));
    }
    let grid = build_patch_grid(dims, cfg.patch_size, cfg.stride)?;
    let plan = ParcellationPlan::build_with_weights(cfg.patch_size, cfg.scale_weights)?;

    let n_val = ((cfg.val_fraction * cohort.len() as f64).round() as usize).min(cohort.len() - 1);
    let n_train = cohort.len() - n_val;
    let train_subjects = &cohort[..n_train];
    let val_subjects = &cohort[n_train..];

    let maps: Vec<LesionProbMap> = cohort
        .iter()
        .map(|s| provider.probmap(&s.hc, s))
        .collect::<Result<_>>()?;
    let (train_maps, val_maps) = maps.split_at(n_train);

    let table = build_weight_table_from_maps(train_subjects, train_maps, &grid, sampling)?;
    if table.is_empty() {
        return Err(Error::Training("empty training patch table".into()));
    }
    // Fixed validation set; falls back to training patches when no subject
    // is held out.
    let (val_pool_subjects, val_pool_maps, val_table): (&[Subject], &[LesionProbMap], Vec<TrainingPatchRecord>) =
        if val_subjects.is_empty() {
            (train_subjects, train_maps, table.clone())
        } else {
            let vt = build_weight_table_from_maps(val_subjects, val_maps, &grid, sampling)?;
            (val_subjects, val_maps, vt)
        };
    let val_records: Vec<&TrainingPatchRecord> = evenly_spaced(val_table.len(), cfg.val_max_patches)
        .into_iter()
        .map(|i| &val_table[i])
        .collect();

    let mut params = ModelParams::init(cfg.arch, cfg.seed);
    let mut state = OptimizerState::new(&params);
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler_rng.set_stream(1);

    let mut log = TrainLog::default();
    let mut lr = cfg.lr0;
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;
    let batches_per_epoch = (table.len() / cfg.batch_size).max(1);

    for epoch in 1..=cfg.max_epochs {
        if lr < cfg.lr_stop {
            break;
        }
        let lr_epoch = lr;
        let mut sum = LossComponents::default();
        let mut sum_total = 0.0;
        let mut sampled = 0usize;
        let mut lesion_hits = 0usize;
        for batch in 0..batches_per_epoch {
            let indices = if cfg.weighted_sampling {
                sample_batch(&table, cfg.batch_size, &mut sampler_rng)?
            } else {
                (0..cfg.batch_size).map(|_| sampler_rng.random_range(0..table.len())).collect()
            };
            sampled += indices.len();
            lesion_hits += indices.iter().filter(|&&i| table[i].max_lesion_prob > 0.5).count();

            let items: Vec<Result<ItemResult>> = indices
                .par_iter()
                .map(|&i| {
                    let (v_lc, v_hc, prob) = patch_triplet(train_subjects, train_maps, &table[i], cfg.patch_size)?;
                    let patch_dims = [cfg.patch_size; 3];
                    let (v_den, trace) = forward_traced(&params, &v_lc, patch_dims)?;
                    let (loss, grad, comps) = combined_loss(&v_den, &v_hc, &prob, &plan, &cfg.loss)?;
                    let (grads, _) = backward_traced(&params, &v_lc, patch_dims, &trace, &grad)?;
                    Ok(ItemResult { loss, comps, grads })
                })
                .collect();

            let mut mean_grads = ModelParams::zeros(cfg.arch);
            let inv_b = 1.0 / indices.len() as f64;
            for item in items {
                let item = item?;
                if !item.loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss in epoch {epoch} batch {batch}"
                    )));
                }
                sum_total += item.loss;
                sum.base += item.comps.base;
                sum.le += item.comps.le;
                sum.qu += item.comps.qu;
                for (dst, src) in mean_grads.blocks.iter_mut().zip(&item.grads.blocks) {
                    for (d, s) in dst.values.iter_mut().zip(&src.values) {
                        *d += s * inv_b;
                    }
                }
            }
            adam_step(&mut params, &mean_grads, &mut state, lr, &cfg.adam)
                .map_err(|e| Error::Training(format!("epoch {epoch} batch {batch}: {e}")))?;
        }

        let val_loss = if val_records.is_empty() {
            sum_total / sampled as f64
        } else {
            let vals: Vec<Result<f64>> = val_records
                .par_iter()
                .map(|r| {
                    let (v_lc, v_hc, prob) = patch_triplet(val_pool_subjects, val_pool_maps, r, cfg.patch_size)?;
                    let v_den = forward(&params, &v_lc, [cfg.patch_size; 3])?;
                    let (loss, _, _) = combined_loss(&v_den, &v_hc, &prob, &plan, &cfg.loss)?;
                    Ok(loss)
                })
                .collect();
            let mut acc = 0.0;
            for v in vals {
                acc += v?;
            }
            acc / val_records.len() as f64
        };
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss in epoch {epoch}")));
        }

        let denom = sampled as f64;
        log.epochs.push(EpochLog {
            epoch,
            lr: lr_epoch,
            loss_total: sum_total / denom,
            loss_base: sum.base / denom,
            loss_le: sum.le / denom,
            loss_qu: sum.qu / denom,
            val_loss,
            lesion_fraction: lesion_hits as f64 / denom,
        });

        if val_loss < best_val {
            best_val = val_loss;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.lr_patience {
                lr *= cfg.lr_decay_factor;
                stall = 0;
            }
        }
    }
    Ok((params, log))
}

/// Denoises a full volume: per-patch forward passes over the grid, overlap
/// averaging, then clamping negatives to zero (SUV is non-negative).
pub fn denoise_volume(params: &ModelParams, volume: &Volume, grid: &PatchGrid) -> Result<Volume> {
    let patch_dims = [grid.patch_size; 3];
    let patches: Vec<Result<Patch>> = grid
        .origins
        .par_iter()
        .map(|&origin| {
            let patch = extract_patch(volume, origin, grid.patch_size)?;
            let data = forward(params, &patch.data, patch_dims)?;
            Ok(Patch { origin, size: grid.patch_size, data })
        })
        .collect();
    let patches: Vec<Patch> = patches.into_iter().collect::<Result<_>>()?;
    let mut out = reassemble(&patches, volume.dims(), volume.voxel_size())?;
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}
