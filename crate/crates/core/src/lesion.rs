//! Lesion-aware training modulation: noise-aware sampling weights, the
//! weighted patch sampler, and the lesion consistency loss.
//!
//! A patch pair's sampling weight is `eta(level) * max(p_max, w_min)`,
//! where `p_max` is the highest lesion probability inside the high-count
//! patch and `eta` is a noise-aware factor that grows as the count level
//! drops. The lesion consistency loss is a probability-weighted mean
//! absolute error normalized by the (soft) lesion voxel count, with an
//! analytic subgradient.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;

use crate::error::{Error, Result};
use crate::phantom::Subject;
use crate::seg::{LesionProbMap, ProbmapProvider};
use crate::volume::PatchGrid;

/// Noise-aware factors for the standard count levels (percent -> eta).
pub const DEFAULT_ETA_TABLE: [(f64, f64); 6] =
    [(1.0, 0.35), (2.0, 0.25), (5.0, 0.15), (10.0, 0.12), (25.0, 0.08), (50.0, 0.05)];

/// Default minimum weight assigned to lesion-absent patches.
pub const DEFAULT_W_MIN: f64 = 0.3;

/// Settings for the lesion-aware sampling weights.
#[derive(Debug, Clone)]
pub struct SamplingConfig {
    /// Floor applied to the patch lesion probability.
    pub w_min: f64,
    /// (count level %, eta) pairs, sorted by level.
    pub eta_table: Vec<(f64, f64)>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { w_min: DEFAULT_W_MIN, eta_table: DEFAULT_ETA_TABLE.to_vec() }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min > 0.0 && self.w_min <= 1.0) {
            return Err(Error::Config(format!("w_min {} outside (0, 1]", self.w_min)));
        }
        if self.eta_table.is_empty() {
            return Err(Error::Config("eta table is empty".into()));
        }
        for window in self.eta_table.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(Error::Config("eta table levels must be strictly increasing".into()));
            }
            if window[1].1 > window[0].1 {
                return Err(Error::Config("eta must be non-increasing in count level".into()));
            }
        }
        if self.eta_table.iter().any(|&(l, e)| !(l > 0.0) || !(e > 0.0)) {
            return Err(Error::Config("eta table levels and factors must be positive".into()));
        }
        Ok(())
    }

    /// Noise-aware factor for a count level. Tabulated levels return their
    /// entry; intermediate levels interpolate eta linearly in log(level);
    /// levels outside the table clamp to the nearest endpoint.
    pub fn eta(&self, count_level: f64) -> Result<f64> {
        if !(count_level > 0.0) {
            return Err(Error::Domain(format!("count level {count_level} must be positive")));
        }
        let table = &self.eta_table;
        if count_level <= table[0].0 {
            return Ok(table[0].1);
        }
        if count_level >= table[table.len() - 1].0 {
            return Ok(table[table.len() - 1].1);
        }
        for window in table.windows(2) {
            let (l0, e0) = window[0];
            let (l1, e1) = window[1];
            if count_level == l0 {
                return Ok(e0);
            }
            if count_level > l0 && count_level < l1 {
                let t = (count_level.ln() - l0.ln()) / (l1.ln() - l0.ln());
                return Ok(e0 + t * (e1 - e0));
            }
        }
        Ok(table[table.len() - 1].1)
    }
}

/// Sampling weight for one (low-count, high-count) patch pair.
pub fn sampling_weight(max_lesion_prob: f64, count_level: f64, config: &SamplingConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&max_lesion_prob) {
        return Err(Error::Domain(format!("lesion probability {max_lesion_prob} outside [0, 1]")));
    }
    Ok(config.eta(count_level)? * max_lesion_prob.max(config.w_min))
}

/// One row of the training sampling table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPatchRecord {
    pub subject: String,
    pub subject_index: usize,
    pub origin: [usize; 3],
    pub count_level: f64,
    pub max_lesion_prob: f64,
    pub weight: f64,
}

/// Builds one record per (subject, count level, patch origin), with the
/// per-patch lesion probability taken from the provider's map on the
/// high-count volume. Ordering is (subject, level, origin) and is
/// deterministic.
pub fn build_weight_table(
    cohort: &[Subject],
    provider: &dyn ProbmapProvider,
    grid: &PatchGrid,
    config: &SamplingConfig,
) -> Result<Vec<TrainingPatchRecord>> {
    let maps: Vec<LesionProbMap> =
        cohort.iter().map(|s| provider.probmap(&s.hc, s)).collect::<Result<_>>()?;
    build_weight_table_from_maps(cohort, &maps, grid, config)
}

/// Same as [`build_weight_table`] but reuses probability maps the caller
/// already holds (the trainer computes them once per subject).
pub fn build_weight_table_from_maps(
    cohort: &[Subject],
    maps: &[LesionProbMap],
    grid: &PatchGrid,
    config: &SamplingConfig,
) -> Result<Vec<TrainingPatchRecord>> {
    config.validate()?;
    if maps.len() != cohort.len() {
        return Err(Error::Dimension(format!(
            "{} probability maps for {} subjects",
            maps.len(),
            cohort.len()
        )));
    }
    let mut records = Vec::new();
    for (subject_index, (subject, probmap)) in cohort.iter().zip(maps).enumerate() {
        if probmap.dims() != subject.hc.dims() {
            return Err(Error::Dimension(format!(
                "provider map dims {:?} do not match volume dims {:?} for subject {}",
                probmap.dims(),
                subject.hc.dims(),
                subject.id
            )));
        }
        let mut levels = subject.levels();
        levels.sort_by(|a, b| a.total_cmp(b));
        for level in levels {
            for &origin in &grid.origins {
                let prob = probmap.max_in_box(origin, grid.patch_size)?;
                let weight = sampling_weight(prob, level, config)?;
                records.push(TrainingPatchRecord {
                    subject: subject.id.clone(),
                    subject_index,
                    origin,
                    count_level: level,
                    max_lesion_prob: prob,
                    weight,
                });
            }
        }
    }
    Ok(records)
}

/// Renders the table as CSV for inspection.
pub fn weight_table_csv(records: &[TrainingPatchRecord]) -> String {
    let mut out = String::from("subject,level,origin_x,origin_y,origin_z,prob,weight\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.subject, r.count_level, r.origin[0], r.origin[1], r.origin[2], r.max_lesion_prob, r.weight
        ));
    }
    out
}

/// Draws `batch_size` record indices with replacement, each with
/// probability proportional to its weight.
pub fn sample_batch<R: Rng>(
    table: &[TrainingPatchRecord],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if table.is_empty() {
        return Err(Error::Domain("cannot sample from an empty table".into()));
    }
    let dist = WeightedIndex::new(table.iter().map(|r| r.weight))
        .map_err(|e| Error::Domain(format!("invalid sampling weights: {e}")))?;
    Ok((0..batch_size).map(|_| dist.sample(rng)).collect())
}

/// Normalization mode for the lesion consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Divide by the soft lesion count `sum(p)`, epsilon-guarded.
    SoftCount,
    /// Divide by the number of voxels with p > 0.5; zero such voxels
    /// makes the loss vanish.
    HardCount,
}

const SOFT_COUNT_EPS: f64 = 1e-8;

/// Value and per-voxel gradient of the lesion consistency loss.
#[derive(Debug, Clone)]
pub struct LesionLossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Probability-weighted mean absolute error over lesion voxels:
/// `sum_j p_j |den_j - hc_j| / J` with `J` the (soft or hard) lesion voxel
/// count. The gradient routes `p_j * sign(den_j - hc_j) / J` to each voxel.
pub fn lesion_loss(
    v_den: &[f64],
    v_hc: &[f64],
    prob: &[f64],
    norm: LossNorm,
) -> Result<LesionLossResult> {
    if v_den.len() != v_hc.len() || v_den.len() != prob.len() {
        return Err(Error::Dimension(format!(
            "lesion loss shape mismatch: den {}, hc {}, prob {}",
            v_den.len(),
            v_hc.len(),
            prob.len()
        )));
    }
    let normalizer = match norm {
        LossNorm::SoftCount => prob.iter().sum::<f64>().max(SOFT_COUNT_EPS),
        LossNorm::HardCount => {
            let count = prob.iter().filter(|&&p| p > 0.5).count();
            if count == 0 {
                return Ok(LesionLossResult { value: 0.0, grad: vec![0.0; v_den.len()] });
            }
            count as f64
        }
    };
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(v_den.len());
    for i in 0..v_den.len() {
        let diff = v_den[i] - v_hc[i];
        value += prob[i] * diff.abs();
        grad.push(prob[i] * sign(diff) / normalizer);
    }
    Ok(LesionLossResult { value: value / normalizer, grad })
}
