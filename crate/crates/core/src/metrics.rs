//! Image-quality metrics, lesion quantification biases, and the
//! segmentation-observer evaluation over a cohort.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phantom::Subject;
use crate::seg::{binarize, connected_components, quantify_lesions, BinaryMask, LesionInstance, ProbmapProvider};
use crate::volume::Volume;

/// Root-mean-square error normalized by the reference mean.
pub fn nrmse(test: &Volume, reference: &Volume) -> Result<f64> {
    check_same_dims(test, reference)?;
    let n = reference.len() as f64;
    let ref_mean = reference.data().iter().sum::<f64>() / n;
    if ref_mean <= 0.0 {
        return Err(Error::Domain(format!("reference mean {ref_mean} must be positive")));
    }
    let mse = mean_squared_error(test, reference);
    Ok(mse.sqrt() / ref_mean)
}

/// Peak signal-to-noise ratio in dB with the peak defined as the reference
/// maximum. Identical images return `f64::INFINITY`.
pub fn psnr(test: &Volume, reference: &Volume) -> Result<f64> {
    check_same_dims(test, reference)?;
    let mse = mean_squared_error(test, reference);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = reference.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(20.0 * peak.log10() - 10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 7;

/// Mean local SSIM with a 7^3 uniform window over fully-inside positions;
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = max(reference)`.
pub fn ssim(test: &Volume, reference: &Volume) -> Result<f64> {
    check_same_dims(test, reference)?;
    let dims = reference.dims();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::Domain(format!(
            "volume dims {dims:?} smaller than the {SSIM_WINDOW}^3 SSIM window"
        )));
    }
    let peak = reference.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return Err(Error::Domain("SSIM undefined for a non-positive reference peak".into()));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let x = test.data();
    let y = reference.data();
    let sat_x = sat3(x, dims, |i| x[i]);
    let sat_y = sat3(y, dims, |i| y[i]);
    let sat_xx = sat3(x, dims, |i| x[i] * x[i]);
    let sat_yy = sat3(y, dims, |i| y[i] * y[i]);
    let sat_xy = sat3(x, dims, |i| x[i] * y[i]);
    let w = SSIM_WINDOW;
    let wn = (w * w * w) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for oz in 0..=(dims[2] - w) {
        for oy in 0..=(dims[1] - w) {
            for ox in 0..=(dims[0] - w) {
                let o = [ox, oy, oz];
                let mx = sat_box(&sat_x, dims, o, w) / wn;
                let my = sat_box(&sat_y, dims, o, w) / wn;
                let vx = sat_box(&sat_xx, dims, o, w) / wn - mx * mx;
                let vy = sat_box(&sat_yy, dims, o, w) / wn - my * my;
                let cov = sat_box(&sat_xy, dims, o, w) / wn - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn mean_squared_error(test: &Volume, reference: &Volume) -> f64 {
    let n = reference.len() as f64;
    test.data()
        .iter()
        .zip(reference.data())
        .map(|(t, r)| (t - r) * (t - r))
        .sum::<f64>()
        / n
}

fn check_same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("volume dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn sat3(_data: &[f64], dims: [usize; 3], f: impl Fn(usize) -> f64) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let (ax, ay, az) = (nx + 1, ny + 1, nz + 1);
    let at = move |x: usize, y: usize, z: usize| x + ax * (y + ay * z);
    let mut sat = vec![0.0f64; ax * ay * az];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                sat[at(x + 1, y + 1, z + 1)] = f(x + nx * (y + ny * z))
                    + sat[at(x, y + 1, z + 1)]
                    + sat[at(x + 1, y, z + 1)]
                    + sat[at(x + 1, y + 1, z)]
                    - sat[at(x, y, z + 1)]
                    - sat[at(x, y + 1, z)]
                    - sat[at(x + 1, y, z)]
                    + sat[at(x, y, z)];
            }
        }
    }
    sat
}

fn sat_box(sat: &[f64], dims: [usize; 3], o: [usize; 3], w: usize) -> f64 {
    let (ax, ay) = (dims[0] + 1, dims[1] + 1);
    let at = move |x: usize, y: usize, z: usize| x + ax * (y + ay * z);
    let (x0, y0, z0) = (o[0], o[1], o[2]);
    let (x1, y1, z1) = (x0 + w, y0 + w, z0 + w);
    sat[at(x1, y1, z1)] - sat[at(x0, y1, z1)] - sat[at(x1, y0, z1)] - sat[at(x1, y1, z0)]
        + sat[at(x0, y0, z1)]
        + sat[at(x0, y1, z0)]
        + sat[at(x1, y0, z0)]
        - sat[at(x0, y0, z0)]
}

/// Asymmetric overlap index `|TP| / (|TP| + alpha |FP| + beta |FN|)`.
/// Two empty masks agree perfectly and return 1.0.
pub fn tversky(mask_den: &BinaryMask, mask_hc: &BinaryMask, alpha: f64, beta: f64) -> Result<f64> {
    if mask_den.dims != mask_hc.dims {
        return Err(Error::Dimension(format!(
            "mask dims {:?} vs {:?}",
            mask_den.dims, mask_hc.dims
        )));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Domain("tversky penalties must be non-negative".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (d, h) in mask_den.data.iter().zip(&mask_hc.data) {
        match (d, h) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    let denom = tp as f64 + alpha * fp as f64 + beta * fn_ as f64;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(tp as f64 / denom)
}

/// Per-lesion relative errors of the denoised volume against the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionBias {
    pub label: usize,
    pub suv_mean_bias_pct: f64,
    pub suv_max_bias_pct: f64,
}

/// Lesion-wise and subject-wise quantification biases.
#[derive(Debug, Clone, Default)]
pub struct QuantificationBiases {
    pub per_lesion: Vec<LesionBias>,
    /// Labels skipped because the reference metric was zero.
    pub skipped: Vec<usize>,
    pub tlg_den: Option<f64>,
    pub tlg_hc: Option<f64>,
    pub tlg_bias_pct: Option<f64>,
}

/// Computes SUV_mean/SUV_max bias per lesion (over the reference voxel
/// sets) and the whole-subject total-lesion-glycolysis bias.
pub fn quantification_biases(
    den: &Volume,
    hc: &Volume,
    instances: &[LesionInstance],
) -> Result<QuantificationBiases> {
    check_same_dims(den, hc)?;
    let on_hc = quantify_lesions(instances, hc)?;
    let on_den = quantify_lesions(instances, den)?;
    let mut out = QuantificationBiases::default();
    let mut tlg_den = 0.0;
    let mut tlg_hc = 0.0;
    for (h, d) in on_hc.iter().zip(&on_den) {
        let (h_mean, h_max) = (h.suv_mean.unwrap(), h.suv_max.unwrap());
        let (d_mean, d_max) = (d.suv_mean.unwrap(), d.suv_max.unwrap());
        tlg_den += d.volume_mm3 * d_mean;
        tlg_hc += h.volume_mm3 * h_mean;
        if h_mean == 0.0 || h_max == 0.0 {
            out.skipped.push(h.label);
            continue;
        }
        out.per_lesion.push(LesionBias {
            label: h.label,
            suv_mean_bias_pct: 100.0 * (d_mean - h_mean) / h_mean,
            suv_max_bias_pct: 100.0 * (d_max - h_max) / h_max,
        });
    }
    if !instances.is_empty() && tlg_hc != 0.0 {
        out.tlg_den = Some(tlg_den);
        out.tlg_hc = Some(tlg_hc);
        out.tlg_bias_pct = Some(100.0 * (tlg_den - tlg_hc) / tlg_hc);
    }
    Ok(out)
}

/// Evaluation settings: Tversky penalty pairs and the binarization
/// threshold for the observer masks.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub alphas: Vec<(f64, f64)>,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alphas: vec![(0.3, 0.7), (0.5, 0.5), (0.7, 0.3)], threshold: 0.5 }
    }
}

/// One denoised volume to evaluate.
#[derive(Debug, Clone)]
pub struct DenoisedEntry {
    pub subject_index: usize,
    pub level: f64,
    pub volume: Volume,
}

/// All metrics for one (subject, count level) pair.
#[derive(Debug, Clone)]
pub struct SubjectLevelReport {
    pub subject: String,
    pub level: f64,
    pub nrmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_lesions: usize,
    pub lesion_biases: Vec<LesionBias>,
    pub skipped_lesions: Vec<usize>,
    pub tlg_den: Option<f64>,
    pub tlg_hc: Option<f64>,
    pub tlg_bias_pct: Option<f64>,
    /// Aligned with the configured (alpha, beta) pairs.
    pub tversky: Vec<f64>,
}

impl SubjectLevelReport {
    pub fn mean_suv_mean_bias(&self) -> Option<f64> {
        mean_of(self.lesion_biases.iter().map(|b| b.suv_mean_bias_pct))
    }

    pub fn mean_suv_max_bias(&self) -> Option<f64> {
        mean_of(self.lesion_biases.iter().map(|b| b.suv_max_bias_pct))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn evaluate_one(
    subject: &Subject,
    level: f64,
    den: &Volume,
    provider: &dyn ProbmapProvider,
    cfg: &EvalConfig,
) -> Result<SubjectLevelReport> {
    let hc = &subject.hc;
    let prob_hc = provider.probmap(hc, subject)?;
    let mask_hc = binarize(&prob_hc, cfg.threshold)?;
    let instances = connected_components(&mask_hc, hc.voxel_size());
    let biases = quantification_biases(den, hc, &instances)?;
    let prob_den = provider.probmap(den, subject)?;
    let mask_den = binarize(&prob_den, cfg.threshold)?;
    let tv = cfg
        .alphas
        .iter()
        .map(|&(a, b)| tversky(&mask_den, &mask_hc, a, b))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SubjectLevelReport {
        subject: subject.id.clone(),
        level,
        nrmse: nrmse(den, hc)?,
        psnr_db: psnr(den, hc)?,
        ssim: ssim(den, hc)?,
        n_lesions: instances.len(),
        lesion_biases: biases.per_lesion,
        skipped_lesions: biases.skipped,
        tlg_den: biases.tlg_den,
        tlg_hc: biases.tlg_hc,
        tlg_bias_pct: biases.tlg_bias_pct,
        tversky: tv,
    })
}

/// Runs the full three-tier evaluation for every (subject, level) pair in
/// the cohort. `denoised` must contain one entry per pair; reports come
/// back sorted by (subject, level).
pub fn evaluate_cohort(
    cohort: &[Subject],
    denoised: &[DenoisedEntry],
    provider: &dyn ProbmapProvider,
    cfg: &EvalConfig,
) -> Result<Vec<SubjectLevelReport>> {
    let mut tasks: Vec<(usize, f64, &Volume)> = Vec::new();
    for (si, subject) in cohort.iter().enumerate() {
        let mut levels = subject.levels();
        levels.sort_by(|a, b| a.total_cmp(b));
        for level in levels {
            let entry = denoised
                .iter()
                .find(|e| e.subject_index == si && e.level == level)
                .ok_or_else(|| {
                    Error::Evaluation(format!(
                        "missing denoised volume for subject {} at {}%",
                        subject.id, level
                    ))
                })?;
            tasks.push((si, level, &entry.volume));
        }
    }
    tasks
        .par_iter()
        .map(|&(si, level, den)| evaluate_one(&cohort[si], level, den, provider, cfg))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// Column name for a Tversky penalty pair; (0.5, 0.5) is the Dice column.
pub fn tversky_column(alpha: f64, beta: f64) -> String {
    if alpha == 0.5 && beta == 0.5 {
        "dice".into()
    } else {
        format!("tversky_{:02}_{:02}", (alpha * 10.0).round() as u32, (beta * 10.0).round() as u32)
    }
}

/// Renders reports as the metrics CSV (one row per subject x level).
pub fn metrics_csv(reports: &[SubjectLevelReport], cfg: &EvalConfig) -> String {
    let mut header = String::from(
        "subject,level,nrmse,psnr_db,ssim,ssim_x100,n_lesions,suv_mean_bias_pct,suv_max_bias_pct,tlg_bias_pct",
    );
    for &(a, b) in &cfg.alphas {
        header.push(',');
        header.push_str(&tversky_column(a, b));
    }
    header.push('\n');
    let mut out = header;
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.subject,
            crate::phantom::format_level(r.level),
            fmt_f64(r.nrmse),
            fmt_f64(r.psnr_db),
            fmt_f64(r.ssim),
            fmt_f64(r.ssim * 100.0),
            r.n_lesions,
            fmt_opt(r.mean_suv_mean_bias()),
            fmt_opt(r.mean_suv_max_bias()),
            fmt_opt(r.tlg_bias_pct),
        ));
        for t in &r.tversky {
            out.push(',');
            out.push_str(&fmt_f64(*t));
        }
        out.push('\n');
    }
    out
}

/// Mean and sd of each headline metric, grouped by count level.
#[derive(Debug, Clone)]
pub struct LevelAggregate {
    pub level: f64,
    pub n: usize,
    pub nrmse: (f64, f64),
    pub psnr_db: (f64, f64),
    pub ssim: (f64, f64),
    pub suv_mean_bias_pct: (f64, f64),
    pub suv_max_bias_pct: (f64, f64),
    pub abs_suv_max_bias_pct: (f64, f64),
    pub tlg_bias_pct: (f64, f64),
    pub tversky: Vec<(f64, f64)>,
}

/// Aggregates reports per level. Lesion biases pool individual lesions
/// across subjects; finite PSNR values only.
pub fn aggregate_by_level(reports: &[SubjectLevelReport], cfg: &EvalConfig) -> Vec<LevelAggregate> {
    let mut levels: Vec<f64> = reports.iter().map(|r| r.level).collect();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    levels
        .into_iter()
        .map(|level| {
            let rows: Vec<&SubjectLevelReport> = reports.iter().filter(|r| r.level == level).collect();
            let collect = |f: &dyn Fn(&SubjectLevelReport) -> Option<f64>| -> Vec<f64> {
                rows.iter().filter_map(|r| f(r)).collect()
            };
            let lesions_mean: Vec<f64> = rows
                .iter()
                .flat_map(|r| r.lesion_biases.iter().map(|b| b.suv_mean_bias_pct))
                .collect();
            let lesions_max: Vec<f64> = rows
                .iter()
                .flat_map(|r| r.lesion_biases.iter().map(|b| b.suv_max_bias_pct))
                .collect();
            let lesions_abs_max: Vec<f64> = lesions_max.iter().map(|b| b.abs()).collect();
            let tversky = (0..cfg.alphas.len())
                .map(|i| mean_sd(&rows.iter().map(|r| r.tversky[i]).collect::<Vec<f64>>()))
                .collect();
            LevelAggregate {
                level,
                n: rows.len(),
                nrmse: mean_sd(&collect(&|r| Some(r.nrmse))),
                psnr_db: mean_sd(&collect(&|r| r.psnr_db.is_finite().then_some(r.psnr_db))),
                ssim: mean_sd(&collect(&|r| Some(r.ssim))),
                suv_mean_bias_pct: mean_sd(&lesions_mean),
                suv_max_bias_pct: mean_sd(&lesions_max),
                abs_suv_max_bias_pct: mean_sd(&lesions_abs_max),
                tlg_bias_pct: mean_sd(&collect(&|r| r.tlg_bias_pct)),
                tversky,
            }
        })
        .collect()
}
