//! Lesion probability maps and the observers that produce them.
//!
//! Two providers sit behind one interface: an oracle that returns the
//! phantom's ground-truth probabilities (optionally blurred to mimic soft
//! network output), and a heuristic segmenter built from a robust z-score
//! and a logistic mapping. Binarization and 26-connected component
//! labeling support lesion-wise quantification.

use crate::error::{Error, Result};
use crate::phantom::Subject;
use crate::smooth;
use crate::volume::{extract_box, Volume};

/// Per-voxel lesion probability in [0, 1], same grid as its source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionProbMap {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl LesionProbMap {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "probability map length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain(format!(
                "probability {} at linear index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Largest probability inside the cubic box at `origin`.
    pub fn max_in_box(&self, origin: [usize; 3], size: usize) -> Result<f64> {
        for axis in 0..3 {
            if origin[axis] + size > self.dims[axis] {
                return Err(Error::Dimension(format!(
                    "box origin {origin:?} size {size} out of bounds for dims {:?}",
                    self.dims
                )));
            }
        }
        let mut best = 0.0f64;
        for dz in 0..size {
            for dy in 0..size {
                let row =
                    origin[0] + self.dims[0] * ((origin[1] + dy) + self.dims[1] * (origin[2] + dz));
                for &p in &self.data[row..row + size] {
                    if p > best {
                        best = p;
                    }
                }
            }
        }
        Ok(best)
    }

    /// Probabilities of the cubic box at `origin`, x-fastest.
    pub fn extract_box(&self, origin: [usize; 3], size: usize) -> Result<Vec<f64>> {
        extract_box(&self.data, self.dims, origin, size)
    }

    /// Serializes through the volume container (LQMV stores probabilities
    /// as single precision).
    pub fn to_volume(&self, voxel_size: [f64; 3]) -> Volume {
        Volume::new(self.dims, voxel_size, self.data.clone()).expect("probabilities are finite")
    }

    pub fn from_volume(volume: &Volume) -> Result<Self> {
        Self::new(volume.dims(), volume.data().to_vec())
    }
}

/// A labeled 26-connected lesion component.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInstance {
    /// 1-based label, assigned after sorting by descending size.
    pub label: usize,
    /// Linear voxel indices in scan order.
    pub voxels: Vec<usize>,
    pub volume_mm3: f64,
    pub suv_mean: Option<f64>,
    pub suv_max: Option<f64>,
}

/// Binary lesion mask on a volume grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Interface shared by all probability-map observers. `volume` is the image
/// to segment; `subject` carries ground truth for observers that use it.
pub trait ProbmapProvider: Sync {
    fn probmap(&self, volume: &Volume, subject: &Subject) -> Result<LesionProbMap>;
    fn name(&self) -> &'static str;
}

/// Returns the phantom's ground-truth probabilities regardless of the input
/// image, optionally blurred for soft boundaries.
#[derive(Debug, Clone, Copy)]
pub struct OracleProvider {
    pub blur_fwhm_mm: f64,
}

impl ProbmapProvider for OracleProvider {
    fn probmap(&self, _volume: &Volume, subject: &Subject) -> Result<LesionProbMap> {
        Ok(oracle_probmap(subject, self.blur_fwhm_mm))
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// Robust-statistics segmenter applied to the image itself.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicProvider {
    pub config: HeuristicConfig,
}

impl ProbmapProvider for HeuristicProvider {
    fn probmap(&self, volume: &Volume, _subject: &Subject) -> Result<LesionProbMap> {
        Ok(heuristic_probmap(volume, &self.config))
    }

    fn name(&self) -> &'static str {
        "heuristic"
    }
}

/// The subject's ground-truth probability map, Gaussian-blurred by
/// `blur_fwhm_mm` and clamped back to [0, 1]. Zero blur returns the map
/// unchanged.
pub fn oracle_probmap(subject: &Subject, blur_fwhm_mm: f64) -> LesionProbMap {
    if blur_fwhm_mm <= 0.0 {
        return subject.oracle_prob.clone();
    }
    let dims = subject.oracle_prob.dims();
    let blurred = smooth::gaussian_blur(
        subject.oracle_prob.data(),
        dims,
        subject.hc.voxel_size(),
        blur_fwhm_mm,
    );
    let clamped: Vec<f64> = blurred.iter().map(|&p| p.clamp(0.0, 1.0)).collect();
    LesionProbMap::new(dims, clamped).expect("clamped probabilities are valid")
}

/// Tuning for the heuristic segmenter.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicConfig {
    /// Pre-smoothing FWHM in mm.
    pub smooth_fwhm_mm: f64,
    /// Robust z-score at which probability reaches 0.5.
    pub z0: f64,
    /// Logistic temperature.
    pub tau: f64,
    /// Components smaller than this (at probability > 0.5) are zeroed.
    pub min_voxels: usize,
    /// Guard added to the MAD-based spread estimate.
    pub eps: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self { smooth_fwhm_mm: 4.0, z0: 4.0, tau: 1.0, min_voxels: 3, eps: 1e-9 }
    }
}

fn median_of(mut values: Vec<f64>) -> f64 {
    let n = values.len();
    debug_assert!(n > 0);
    let mid = n / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *m;
    if n % 2 == 1 {
        hi
    } else {
        let (_, m2, _) = values.select_nth_unstable_by(mid - 1, |a, b| a.total_cmp(b));
        (hi + *m2) / 2.0
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Heuristic lesion probabilities: smooth, robust z-score against the
/// median/MAD background, logistic mapping, then suppression of components
/// smaller than `min_voxels`.
pub fn heuristic_probmap(volume: &Volume, cfg: &HeuristicConfig) -> LesionProbMap {
    let smoothed = volume.smoothed(cfg.smooth_fwhm_mm);
    let values = smoothed.data();
    let b = median_of(values.to_vec());
    let mad = median_of(values.iter().map(|&v| (v - b).abs()).collect());
    let spread = 1.4826 * mad + cfg.eps;
    let mut prob: Vec<f64> = values
        .iter()
        .map(|&v| logistic(((v - b) / spread - cfg.z0) / cfg.tau))
        .collect();
    if cfg.min_voxels > 1 {
        let mask = BinaryMask {
            dims: volume.dims(),
            data: prob.iter().map(|&p| p > 0.5).collect(),
        };
        for comp in connected_components(&mask, volume.voxel_size()) {
            if comp.voxels.len() < cfg.min_voxels {
                for &v in &comp.voxels {
                    prob[v] = 0.0;
                }
            }
        }
    }
    LesionProbMap::new(volume.dims(), prob).expect("logistic output is in [0, 1]")
}

/// Thresholds a probability map with a strict `>` comparison.
pub fn binarize(prob: &LesionProbMap, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("binarize threshold {threshold} outside [0, 1]")));
    }
    Ok(BinaryMask { dims: prob.dims(), data: prob.data().iter().map(|&p| p > threshold).collect() })
}

/// Labels 26-connected components. Components are sorted by descending
/// size, ties broken by the lexicographically smallest (x, y, z) member;
/// labels run 1..=K. SUV fields are left unfilled.
pub fn connected_components(mask: &BinaryMask, voxel_size: [f64; 3]) -> Vec<LesionInstance> {
    let [nx, ny, nz] = mask.dims;
    let n = nx * ny * nz;
    debug_assert_eq!(mask.data.len(), n);
    let voxel_volume = voxel_size[0] * voxel_size[1] * voxel_size[2];
    let mut visited = vec![false; n];
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..n {
        if !mask.data[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(idx) = stack.pop() {
            voxels.push(idx);
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 {
                            continue;
                        }
                        let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                        if xx >= nx || yy >= ny || zz >= nz {
                            continue;
                        }
                        let nidx = xx + nx * (yy + ny * zz);
                        if mask.data[nidx] && !visited[nidx] {
                            visited[nidx] = true;
                            stack.push(nidx);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        components.push(voxels);
    }
    let min_xyz = |voxels: &[usize]| {
        voxels
            .iter()
            .map(|&i| {
                let x = i % nx;
                let y = (i / nx) % ny;
                let z = i / (nx * ny);
                (x, y, z)
            })
            .min()
            .expect("components are non-empty")
    };
    components.sort_by(|a, b| {
        b.len().cmp(&a.len()).then_with(|| min_xyz(a).cmp(&min_xyz(b)))
    });
    components
        .into_iter()
        .enumerate()
        .map(|(i, voxels)| LesionInstance {
            label: i + 1,
            volume_mm3: voxels.len() as f64 * voxel_volume,
            voxels,
            suv_mean: None,
            suv_max: None,
        })
        .collect()
}

/// Fills `suv_mean` and `suv_max` from the given volume over each
/// instance's voxel set.
pub fn quantify_lesions(instances: &[LesionInstance], volume: &Volume) -> Result<Vec<LesionInstance>> {
    let n = volume.len();
    instances
        .iter()
        .map(|inst| {
            if inst.voxels.is_empty() {
                return Err(Error::Domain(format!("lesion instance {} has no voxels", inst.label)));
            }
            if let Some(&bad) = inst.voxels.iter().find(|&&v| v >= n) {
                return Err(Error::Dimension(format!(
                    "lesion instance {} voxel index {bad} outside volume of {n} voxels",
                    inst.label
                )));
            }
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for &v in &inst.voxels {
                let value = volume.data()[v];
                sum += value;
                if value > max {
                    max = value;
                }
            }
            Ok(LesionInstance {
                label: inst.label,
                voxels: inst.voxels.clone(),
                volume_mm3: inst.voxels.len() as f64 * volume.voxel_volume_mm3(),
                suv_mean: Some(sum / inst.voxels.len() as f64),
                suv_max: Some(max),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut data = vec![false; dims[0] * dims[1] * dims[2]];
        for &[x, y, z] in on {
            data[x + dims[0] * (y + dims[1] * z)] = true;
        }
        BinaryMask { dims, data }
    }

    #[test]
    fn binarize_strict_inequality() {
        let p = LesionProbMap::new([3, 1, 1], vec![0.4, 0.5, 0.6]).unwrap();
        let m = binarize(&p, 0.5).unwrap();
        assert_eq!(m.data, vec![false, false, true]);
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let p = LesionProbMap::new([1, 1, 1], vec![0.0]).unwrap();
        assert!(matches!(binarize(&p, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn binarize_empty_map() {
        let p = LesionProbMap::new([2, 2, 2], vec![0.0; 8]).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap().count(), 0);
    }

    #[test]
    fn components_empty_mask() {
        let m = mask_from([4, 4, 4], &[]);
        assert!(connected_components(&m, [1.0; 3]).is_empty());
    }

    #[test]
    fn components_two_clusters() {
        let m = mask_from([8, 8, 8], &[[0, 0, 0], [1, 0, 0], [5, 5, 5], [5, 6, 5]]);
        let comps = connected_components(&m, [1.0; 3]);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].voxels.len(), 2);
        assert_eq!(comps[1].voxels.len(), 2);
        assert_eq!(comps[0].label, 1);
        // tie on size resolved toward the lexicographically smaller voxel
        assert!(comps[0].voxels.contains(&0));
    }

    #[test]
    fn components_diagonal_voxels_connect() {
        let m = mask_from([4, 4, 4], &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        let comps = connected_components(&m, [1.0; 3]);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].voxels.len(), 3);
    }

    #[test]
    fn quantify_single_voxel() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![3.2, 0.0]).unwrap();
        let inst = LesionInstance {
            label: 1,
            voxels: vec![0],
            volume_mm3: 1.0,
            suv_mean: None,
            suv_max: None,
        };
        let out = quantify_lesions(&[inst], &v).unwrap();
        assert_eq!(out[0].suv_mean, Some(3.2));
        assert_eq!(out[0].suv_max, Some(3.2));
    }

    #[test]
    fn quantify_mean_and_max() {
        let v = Volume::new([2, 1, 1], [2.0, 1.0, 1.0], vec![1.0, 3.0]).unwrap();
        let inst = LesionInstance {
            label: 1,
            voxels: vec![0, 1],
            volume_mm3: 0.0,
            suv_mean: None,
            suv_max: None,
        };
        let out = quantify_lesions(&[inst], &v).unwrap();
        assert_eq!(out[0].suv_mean, Some(2.0));
        assert_eq!(out[0].suv_max, Some(3.0));
        assert_eq!(out[0].volume_mm3, 4.0);
    }

    #[test]
    fn quantify_rejects_empty() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        let inst =
            LesionInstance { label: 1, voxels: vec![], volume_mm3: 0.0, suv_mean: None, suv_max: None };
        assert!(matches!(quantify_lesions(&[inst], &v), Err(Error::Domain(_))));
    }

    #[test]
    fn heuristic_uniform_volume_stays_below_half() {
        let v = Volume::filled([16, 16, 16], [1.0; 3], 1.0).unwrap();
        let cfg = HeuristicConfig { min_voxels: 1, ..Default::default() };
        let p = heuristic_probmap(&v, &cfg);
        let max = p.data().iter().cloned().fold(0.0, f64::max);
        assert!(max < 0.5, "max probability {max}");
    }

    #[test]
    fn heuristic_hot_sphere_detected() {
        let mut v = Volume::filled([24, 24, 24], [1.0; 3], 1.0).unwrap();
        let c = 12.0;
        let dims = v.dims();
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    if r2 <= 9.0 {
                        v.data_mut()[x + dims[0] * (y + dims[1] * z)] = 5.0;
                    }
                }
            }
        }
        let cfg = HeuristicConfig { smooth_fwhm_mm: 1.0, ..Default::default() };
        let p = heuristic_probmap(&v, &cfg);
        let max = p.data().iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.9, "max probability {max}");
    }

    #[test]
    fn heuristic_small_component_zeroed() {
        let mut v = Volume::filled([12, 12, 12], [1.0; 3], 1.0).unwrap();
        let idx = v.idx(6, 6, 6);
        v.data_mut()[idx] = 50.0;
        let cfg = HeuristicConfig { smooth_fwhm_mm: 0.0, min_voxels: 3, ..Default::default() };
        let p = heuristic_probmap(&v, &cfg);
        assert_eq!(p.data()[idx], 0.0);
    }
}
