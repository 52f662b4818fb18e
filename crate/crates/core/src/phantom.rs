//! Synthetic SUV phantoms with spherical lesions and low-count simulation.
//!
//! Acquisition is modeled in image space: high-count voxel counts are
//! Poisson draws of activity x sensitivity, and each low-count level is a
//! binomial thinning of those counts, which matches the statistics of
//! splitting an acquisition into disjoint subsets. Images are counts
//! normalized back to SUV, optionally Gaussian post-smoothed, and
//! quantized to f32 so that on-disk round trips are exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seg::LesionProbMap;
use crate::volume::{read_volume, write_volume, Volume};

/// A hot spherical lesion. `center_vox` is in (possibly fractional) voxel
/// coordinates; `radius_mm` and `suv` describe the physical sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub center_vox: [f64; 3],
    pub radius_mm: f64,
    pub suv: f64,
}

/// A smooth additive background structure (organ stand-in).
#[derive(Debug, Clone, PartialEq)]
pub struct OrganBlob {
    pub center_vox: [f64; 3],
    pub radius_mm: f64,
    pub suv: f64,
}

/// Full description of one synthetic subject's activity field.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub background_suv: f64,
    pub organs: Vec<OrganBlob>,
    pub lesions: Vec<Lesion>,
    /// Width of the linear lesion edge ramp, in voxels (0 = hard sphere).
    pub edge_ramp_voxels: f64,
    pub seed: u64,
}

impl PhantomSpec {
    fn ramp_mm(&self) -> f64 {
        let mean_voxel = (self.voxel_size[0] + self.voxel_size[1] + self.voxel_size[2]) / 3.0;
        self.edge_ramp_voxels.max(0.0) * mean_voxel
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.background_suv > 0.0) {
            return Err(Error::Domain(format!(
                "background SUV must be positive, got {}",
                self.background_suv
            )));
        }
        let min_voxel = self.voxel_size.iter().cloned().fold(f64::INFINITY, f64::min);
        let ramp = self.ramp_mm();
        for (i, l) in self.lesions.iter().enumerate() {
            if l.suv <= self.background_suv {
                return Err(Error::Domain(format!(
                    "lesion {i}: SUV {} must exceed background {}",
                    l.suv, self.background_suv
                )));
            }
            if l.radius_mm < min_voxel {
                return Err(Error::Domain(format!(
                    "lesion {i}: radius {} mm smaller than one voxel ({min_voxel} mm)",
                    l.radius_mm
                )));
            }
            let reach = l.radius_mm + ramp;
            for axis in 0..3 {
                let lo = l.center_vox[axis] * self.voxel_size[axis] - reach;
                let hi = l.center_vox[axis] * self.voxel_size[axis] + reach;
                let extent = self.dims[axis] as f64 * self.voxel_size[axis];
                if lo < 0.0 || hi > extent {
                    return Err(Error::Domain(format!(
                        "lesion {i} extends outside the volume on axis {axis}"
                    )));
                }
            }
        }
        for (i, o) in self.organs.iter().enumerate() {
            if o.suv < 0.0 || o.radius_mm <= 0.0 {
                return Err(Error::Domain(format!("organ {i}: invalid radius or SUV")));
            }
        }
        Ok(())
    }
}

/// Lesion profile: 1 inside the sphere, linear ramp down to 0 over
/// `ramp_mm`, 0 beyond.
fn lesion_profile(dist_mm: f64, radius_mm: f64, ramp_mm: f64) -> f64 {
    if dist_mm <= radius_mm {
        1.0
    } else if ramp_mm > 0.0 && dist_mm < radius_mm + ramp_mm {
        (radius_mm + ramp_mm - dist_mm) / ramp_mm
    } else {
        0.0
    }
}

/// Builds the noiseless activity volume plus the ground-truth lesion
/// probability map. Deterministic: the spec fully determines the field.
/// Lesions whose support spheres (radius + ramp) intersect are rejected.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LesionProbMap, Vec<Lesion>)> {
    spec.validate()?;
    let ramp = spec.ramp_mm();
    for i in 0..spec.lesions.len() {
        for j in (i + 1)..spec.lesions.len() {
            let a = &spec.lesions[i];
            let b = &spec.lesions[j];
            let mut d2 = 0.0;
            for axis in 0..3 {
                let d = (a.center_vox[axis] - b.center_vox[axis]) * spec.voxel_size[axis];
                d2 += d * d;
            }
            if d2.sqrt() < a.radius_mm + b.radius_mm + 2.0 * ramp {
                return Err(Error::Generation(format!("lesions {i} and {j} overlap")));
            }
        }
    }
    let [nx, ny, nz] = spec.dims;
    let mut activity = vec![spec.background_suv; nx * ny * nz];
    let mut prob = vec![0.0f64; nx * ny * nz];
    let dist_mm = |center: &[f64; 3], x: usize, y: usize, z: usize| {
        let dx = (x as f64 - center[0]) * spec.voxel_size[0];
        let dy = (y as f64 - center[1]) * spec.voxel_size[1];
        let dz = (z as f64 - center[2]) * spec.voxel_size[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    // Organs and lesions are sparse; restrict each to its bounding box.
    let bounding = |center: &[f64; 3], reach_mm: f64| {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for axis in 0..3 {
            let r_vox = reach_mm / spec.voxel_size[axis];
            lo[axis] = (center[axis] - r_vox).floor().max(0.0) as usize;
            hi[axis] = ((center[axis] + r_vox).ceil() as usize + 1).min(spec.dims[axis]);
        }
        (lo, hi)
    };
    for organ in &spec.organs {
        let amp = organ.suv - spec.background_suv;
        let (lo, hi) = bounding(&organ.center_vox, organ.radius_mm);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let d = dist_mm(&organ.center_vox, x, y, z);
                    if d < organ.radius_mm {
                        let t = 1.0 - (d / organ.radius_mm).powi(2);
                        activity[x + nx * (y + ny * z)] += amp * t * t;
                    }
                }
            }
        }
    }
    for lesion in &spec.lesions {
        let amp = lesion.suv - spec.background_suv;
        let (lo, hi) = bounding(&lesion.center_vox, lesion.radius_mm + ramp);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let d = dist_mm(&lesion.center_vox, x, y, z);
                    let p = lesion_profile(d, lesion.radius_mm, ramp);
                    if p > 0.0 {
                        let idx = x + nx * (y + ny * z);
                        activity[idx] += amp * p;
                        if p > prob[idx] {
                            prob[idx] = p;
                        }
                    }
                }
            }
        }
    }
    // Overlapping cold organs may push activity below zero; counts need a
    // non-negative rate.
    for v in activity.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let volume = Volume::new(spec.dims, spec.voxel_size, activity)?;
    let oracle = LesionProbMap::new(spec.dims, prob)?;
    Ok((volume, oracle, spec.lesions.clone()))
}

/// Count-simulation settings shared by a cohort.
#[derive(Debug, Clone)]
pub struct CountSimConfig {
    /// Expected counts per SUV per voxel at the 100% level.
    pub sensitivity: f64,
    /// Retained-count percentages, e.g. [1, 2, 5, 10, 25, 50].
    pub count_levels: Vec<f64>,
    /// Gaussian post-smoothing FWHM in mm (0 disables smoothing).
    pub smoothing_fwhm_mm: f64,
    pub seed: u64,
}

impl CountSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensitivity > 0.0) {
            return Err(Error::Domain(format!("sensitivity must be > 0, got {}", self.sensitivity)));
        }
        for &l in &self.count_levels {
            if !(l > 0.0 && l <= 100.0) {
                return Err(Error::Domain(format!("count level {l}% outside (0, 100]")));
            }
        }
        Ok(())
    }
}

fn quantize_f32(volume: Volume) -> Volume {
    let dims = volume.dims();
    let voxel = volume.voxel_size();
    let data: Vec<f64> = volume.into_data().into_iter().map(|v| v as f32 as f64).collect();
    Volume::new(dims, voxel, data).expect("quantization preserves validity")
}

fn poisson_draw(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive lambda").sample(rng) as u64
}

fn binomial_draw(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Simulates the high-count acquisition and each requested low-count level.
/// Returns the (smoothed) high-count image and one image per level, sorted
/// by ascending level. Deterministic given `config.seed`; each level uses
/// its own RNG stream so removing a level never reshuffles the others.
pub fn simulate_counts(
    activity: &Volume,
    config: &CountSimConfig,
) -> Result<(Volume, Vec<(f64, Volume)>)> {
    config.validate()?;
    if let Some(i) = activity.data().iter().position(|&v| v < 0.0) {
        return Err(Error::Domain(format!(
            "negative activity {} at linear index {i}",
            activity.data()[i]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let hc_counts: Vec<u64> = activity
        .data()
        .iter()
        .map(|&a| poisson_draw(&mut rng, a * config.sensitivity))
        .collect();
    let hc_data: Vec<f64> = hc_counts.iter().map(|&c| c as f64 / config.sensitivity).collect();
    let hc_image = Volume::new(activity.dims(), activity.voxel_size(), hc_data)?
        .smoothed(config.smoothing_fwhm_mm);
    let hc_image = quantize_f32(hc_image);

    let mut levels = config.count_levels.clone();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    let mut lc_images = Vec::with_capacity(levels.len());
    for &level in &levels {
        let fraction = level / 100.0;
        let mut level_rng = ChaCha8Rng::seed_from_u64(config.seed);
        level_rng.set_stream(1 + (level * 1000.0).round() as u64);
        let scale = 1.0 / (config.sensitivity * fraction);
        let lc_data: Vec<f64> = hc_counts
            .iter()
            .map(|&c| binomial_draw(&mut level_rng, c, fraction) as f64 * scale)
            .collect();
        let lc = Volume::new(activity.dims(), activity.voxel_size(), lc_data)?
            .smoothed(config.smoothing_fwhm_mm);
        lc_images.push((level, quantize_f32(lc)));
    }
    Ok((hc_image, lc_images))
}

/// One simulated subject: high-count reference, low-count images per
/// level, ground-truth probabilities, and the true lesion list.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub hc: Volume,
    pub lc: Vec<(f64, Volume)>,
    pub oracle_prob: LesionProbMap,
    pub lesion_truth: Vec<Lesion>,
}

impl Subject {
    pub fn lc_volume(&self, level: f64) -> Option<&Volume> {
        self.lc.iter().find(|(l, _)| *l == level).map(|(_, v)| v)
    }

    pub fn levels(&self) -> Vec<f64> {
        self.lc.iter().map(|(l, _)| *l).collect()
    }
}

/// Randomization ranges for cohort generation.
#[derive(Debug, Clone)]
pub struct CohortTemplate {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub background_suv: f64,
    pub n_organs: usize,
    pub organ_radius_mm: [f64; 2],
    pub organ_suv: [f64; 2],
    pub max_lesions: usize,
    pub lesion_radius_mm: [f64; 2],
    pub lesion_suv: [f64; 2],
    /// Fraction of subjects generated without lesions.
    pub lesion_free_fraction: f64,
    pub edge_ramp_voxels: f64,
    pub seed: u64,
}

impl Default for CohortTemplate {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            voxel_size: [2.5, 2.5, 2.5],
            background_suv: 1.0,
            n_organs: 2,
            organ_radius_mm: [15.0, 30.0],
            organ_suv: [0.4, 2.2],
            max_lesions: 5,
            lesion_radius_mm: [4.0, 9.0],
            lesion_suv: [3.0, 8.0],
            lesion_free_fraction: 0.3,
            edge_ramp_voxels: 1.0,
            seed: 0,
        }
    }
}

impl CohortTemplate {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lesion_free_fraction) {
            return Err(Error::Config(format!(
                "lesion_free_fraction {} outside [0, 1]",
                self.lesion_free_fraction
            )));
        }
        if self.lesion_suv[0] <= self.background_suv {
            return Err(Error::Config(format!(
                "minimum lesion SUV {} must exceed background {}",
                self.lesion_suv[0], self.background_suv
            )));
        }
        if self.lesion_radius_mm[0] > self.lesion_radius_mm[1]
            || self.lesion_suv[0] > self.lesion_suv[1]
            || self.organ_radius_mm[0] > self.organ_radius_mm[1]
            || self.organ_suv[0] > self.organ_suv[1]
        {
            return Err(Error::Config("range minimum exceeds maximum".into()));
        }
        Ok(())
    }
}

const LESION_FREE_STREAM: u64 = 1;
const SUBJECT_GEOMETRY_STREAM_BASE: u64 = 1000;
const PLACEMENT_RETRIES: usize = 200;

fn subject_count_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn uniform_in(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn draw_spec(template: &CohortTemplate, index: usize, lesion_free: bool) -> Result<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(template.seed);
    rng.set_stream(SUBJECT_GEOMETRY_STREAM_BASE + index as u64);
    let ramp_mm = {
        let mean_voxel =
            (template.voxel_size[0] + template.voxel_size[1] + template.voxel_size[2]) / 3.0;
        template.edge_ramp_voxels.max(0.0) * mean_voxel
    };
    let center_with_margin = |rng: &mut ChaCha8Rng, margin_mm: f64| -> Option<[f64; 3]> {
        let mut c = [0.0; 3];
        for axis in 0..3 {
            let margin_vox = margin_mm / template.voxel_size[axis];
            let lo = margin_vox;
            let hi = template.dims[axis] as f64 - 1.0 - margin_vox;
            if hi <= lo {
                return None;
            }
            c[axis] = rng.random_range(lo..hi);
        }
        Some(c)
    };
    let mut organs = Vec::with_capacity(template.n_organs);
    for _ in 0..template.n_organs {
        let radius = uniform_in(&mut rng, template.organ_radius_mm);
        if let Some(center) = center_with_margin(&mut rng, 0.0) {
            organs.push(OrganBlob { center_vox: center, radius_mm: radius, suv: uniform_in(&mut rng, template.organ_suv) });
        }
    }
    let mut lesions: Vec<Lesion> = Vec::new();
    if !lesion_free && template.max_lesions > 0 {
        let count = rng.random_range(1..=template.max_lesions);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let radius = uniform_in(&mut rng, template.lesion_radius_mm);
                let suv = uniform_in(&mut rng, template.lesion_suv);
                let Some(center) = center_with_margin(&mut rng, radius + ramp_mm + 1.0) else {
                    return Err(Error::Generation(format!(
                        "subject {index}: volume too small for lesion radius {radius} mm"
                    )));
                };
                let clear = lesions.iter().all(|other| {
                    let mut d2 = 0.0;
                    for axis in 0..3 {
                        let d = (center[axis] - other.center_vox[axis]) * template.voxel_size[axis];
                        d2 += d * d;
                    }
                    d2.sqrt() >= radius + other.radius_mm + 2.0 * ramp_mm + 1.0
                });
                if clear {
                    lesions.push(Lesion { center_vox: center, radius_mm: radius, suv });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "subject {index}: could not place lesion after {PLACEMENT_RETRIES} attempts"
                )));
            }
        }
    }
    Ok(PhantomSpec {
        dims: template.dims,
        voxel_size: template.voxel_size,
        background_suv: template.background_suv,
        organs,
        lesions,
        edge_ramp_voxels: template.edge_ramp_voxels,
        seed: subject_count_seed(template.seed, index),
    })
}

/// Generates `n_subjects` independent subjects. Exactly
/// `round(lesion_free_fraction * n)` of them carry no lesions; which ones
/// is a seeded shuffle, and all per-subject randomness is keyed by
/// (seed, subject index), so generation order and parallelism never change
/// the output.
pub fn generate_cohort(
    n_subjects: usize,
    template: &CohortTemplate,
    sim: &CountSimConfig,
) -> Result<Vec<Subject>> {
    if n_subjects == 0 {
        return Err(Error::Generation("cohort must contain at least one subject".into()));
    }
    template.validate()?;
    sim.validate()?;
    let quota = (template.lesion_free_fraction * n_subjects as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(template.seed);
    shuffle_rng.set_stream(LESION_FREE_STREAM);
    order.shuffle(&mut shuffle_rng);
    let lesion_free: Vec<bool> = {
        let mut flags = vec![false; n_subjects];
        for &i in order.iter().take(quota) {
            flags[i] = true;
        }
        flags
    };
    (0..n_subjects)
        .into_par_iter()
        .map(|i| {
            let spec = draw_spec(template, i, lesion_free[i])?;
            let (activity, oracle, truth) = generate_phantom(&spec)?;
            let sim_i = CountSimConfig { seed: spec.seed, ..sim.clone() };
            let (hc, lc) = simulate_counts(&activity, &sim_i)?;
            // f32-quantized like the images, so manifest round trips are exact
            let prob = LesionProbMap::new(
                oracle.dims(),
                oracle.data().iter().map(|&p| p as f32 as f64).collect(),
            )?;
            Ok(Subject { id: format!("s{i:03}"), hc, lc, oracle_prob: prob, lesion_truth: truth })
        })
        .collect()
}

/// Formats a count level for file names and manifest records ("5", "2.5").
pub fn format_level(level: f64) -> String {
    if level == level.trunc() {
        format!("{}", level as u64)
    } else {
        format!("{level}")
    }
}

/// Writes every subject volume as LQMV plus a line-oriented `manifest.txt`
/// describing the cohort. `read_manifest` reconstructs the cohort exactly.
pub fn write_manifest(cohort: &[Subject], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    writeln!(manifest, "# cohort manifest").unwrap();
    writeln!(manifest, "version=1").unwrap();
    writeln!(manifest, "subjects={}", cohort.len()).unwrap();
    for subject in cohort {
        writeln!(manifest, "subject={}", subject.id).unwrap();
        let hc_name = format!("{}_hc.lqmv", subject.id);
        write_volume(&subject.hc, dir.join(&hc_name))?;
        writeln!(manifest, "hc={hc_name}").unwrap();
        let prob_name = format!("{}_prob.lqmv", subject.id);
        write_volume(&subject.oracle_prob.to_volume(subject.hc.voxel_size()), dir.join(&prob_name))?;
        writeln!(manifest, "prob={prob_name}").unwrap();
        for (level, lc) in &subject.lc {
            let lc_name = format!("{}_lc{}.lqmv", subject.id, format_level(*level));
            write_volume(lc, dir.join(&lc_name))?;
            writeln!(manifest, "lc={},{lc_name}", format_level(*level)).unwrap();
        }
        for lesion in &subject.lesion_truth {
            writeln!(
                manifest,
                "lesion={},{},{},{},{}",
                lesion.center_vox[0], lesion.center_vox[1], lesion.center_vox[2], lesion.radius_mm, lesion.suv
            )
            .unwrap();
        }
        writeln!(manifest, "end={}", subject.id).unwrap();
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path.display().to_string(), e))
}

fn manifest_err(line_no: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: line_no as u64, message: format!("manifest line {line_no}: {}", message.into()) }
}

/// Reads a cohort back from a manifest directory. Missing volume files are
/// reported with their path.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut subjects = Vec::new();
    let mut current: Option<(String, Option<PathBuf>, Option<PathBuf>, BTreeMap<String, PathBuf>, Vec<Lesion>)> =
        None;
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| manifest_err(line_no + 1, "expected key=value"))?;
        match key {
            "version" | "subjects" => {}
            "subject" => {
                if current.is_some() {
                    return Err(manifest_err(line_no + 1, "subject block opened before previous end"));
                }
                current = Some((value.to_string(), None, None, BTreeMap::new(), Vec::new()));
            }
            "hc" => {
                let c = current.as_mut().ok_or_else(|| manifest_err(line_no + 1, "hc outside subject"))?;
                c.1 = Some(dir.join(value));
            }
            "prob" => {
                let c = current.as_mut().ok_or_else(|| manifest_err(line_no + 1, "prob outside subject"))?;
                c.2 = Some(dir.join(value));
            }
            "lc" => {
                let c = current.as_mut().ok_or_else(|| manifest_err(line_no + 1, "lc outside subject"))?;
                let (level, file) = value
                    .split_once(',')
                    .ok_or_else(|| manifest_err(line_no + 1, "lc expects level,path"))?;
                c.3.insert(level.to_string(), dir.join(file));
            }
            "lesion" => {
                let c = current.as_mut().ok_or_else(|| manifest_err(line_no + 1, "lesion outside subject"))?;
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| manifest_err(line_no + 1, format!("bad lesion field: {e}")))?;
                if parts.len() != 5 {
                    return Err(manifest_err(line_no + 1, "lesion expects 5 fields"));
                }
                c.4.push(Lesion {
                    center_vox: [parts[0], parts[1], parts[2]],
                    radius_mm: parts[3],
                    suv: parts[4],
                });
            }
            "end" => {
                let (id, hc_path, prob_path, lc_paths, lesions) = current
                    .take()
                    .ok_or_else(|| manifest_err(line_no + 1, "end outside subject"))?;
                let hc_path = hc_path.ok_or_else(|| manifest_err(line_no + 1, format!("subject {id} missing hc")))?;
                let prob_path =
                    prob_path.ok_or_else(|| manifest_err(line_no + 1, format!("subject {id} missing prob")))?;
                let hc = read_volume(&hc_path)?;
                let prob = LesionProbMap::from_volume(&read_volume(&prob_path)?)?;
                let mut lc: Vec<(f64, Volume)> = Vec::with_capacity(lc_paths.len());
                for (level_str, file) in &lc_paths {
                    let level: f64 = level_str
                        .parse()
                        .map_err(|e| manifest_err(line_no + 1, format!("bad lc level: {e}")))?;
                    lc.push((level, read_volume(file)?));
                }
                lc.sort_by(|a, b| a.0.total_cmp(&b.0));
                subjects.push(Subject { id, hc, lc, oracle_prob: prob, lesion_truth: lesions });
            }
            other => return Err(manifest_err(line_no + 1, format!("unknown key '{other}'"))),
        }
    }
    if current.is_some() {
        return Err(Error::Format { offset: 0, message: "manifest ended inside a subject block".into() });
    }
    Ok(subjects)
}
