//! Command implementations shared by the binary and the test suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use lqmod_core::denoiser::{
    denoise_volume, read_checkpoint, train, write_checkpoint, LossConfig, ModelParams, TrainConfig,
};
use lqmod_core::lesion::SamplingConfig;
use lqmod_core::metrics::{
    aggregate_by_level, evaluate_cohort, metrics_csv, tversky_column, DenoisedEntry, EvalConfig,
    SubjectLevelReport,
};
use lqmod_core::phantom::{
    format_level, generate_cohort, read_manifest, write_manifest, CohortTemplate, CountSimConfig,
    Subject,
};
use lqmod_core::seg::{HeuristicConfig, HeuristicProvider, OracleProvider, ProbmapProvider};
use lqmod_core::stats::{bland_altman, wilcoxon_signed_rank};
use lqmod_core::volume::{build_patch_grid, read_volume, write_volume};
use lqmod_core::{Error, Result};

use crate::config::{ProviderKind, RunConfig};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.display().to_string(), source: e }
}

fn write_echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("config_echo.txt");
    fs::write(&path, cfg.echo()).map_err(io_err(&path))
}

pub fn cohort_template(cfg: &RunConfig) -> CohortTemplate {
    CohortTemplate {
        dims: [cfg.dim; 3],
        voxel_size: [cfg.voxel_mm; 3],
        background_suv: cfg.background_suv,
        n_organs: cfg.organs,
        organ_radius_mm: [cfg.organ_radius_mm_min, cfg.organ_radius_mm_max],
        organ_suv: [cfg.organ_suv_min, cfg.organ_suv_max],
        max_lesions: cfg.max_lesions,
        lesion_radius_mm: [cfg.lesion_radius_mm_min, cfg.lesion_radius_mm_max],
        lesion_suv: [cfg.lesion_suv_min, cfg.lesion_suv_max],
        lesion_free_fraction: cfg.lesion_free_fraction,
        edge_ramp_voxels: cfg.edge_ramp_voxels,
        seed: cfg.seed,
    }
}

pub fn count_sim_config(cfg: &RunConfig) -> CountSimConfig {
    CountSimConfig {
        sensitivity: cfg.sensitivity,
        count_levels: cfg.levels.0.clone(),
        smoothing_fwhm_mm: cfg.smooth_fwhm_mm,
        seed: cfg.seed,
    }
}

pub fn provider_from(cfg: &RunConfig) -> Box<dyn ProbmapProvider> {
    match cfg.provider {
        ProviderKind::Oracle => Box::new(OracleProvider { blur_fwhm_mm: cfg.oracle_blur_fwhm_mm }),
        ProviderKind::Heuristic => Box::new(HeuristicProvider {
            config: HeuristicConfig {
                smooth_fwhm_mm: cfg.heur_fwhm_mm,
                z0: cfg.heur_z0,
                tau: cfg.heur_tau,
                min_voxels: cfg.heur_min_voxels,
                eps: 1e-9,
            },
        }),
    }
}

pub fn sampling_config(cfg: &RunConfig) -> SamplingConfig {
    SamplingConfig { w_min: cfg.w_min, eta_table: cfg.eta.0.clone() }
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        arch: cfg.arch,
        patch_size: cfg.patch,
        stride: [cfg.stride; 3],
        loss: LossConfig {
            lambda_le: cfg.lambda_le,
            lambda_qu: cfg.lambda_qu,
            use_base: true,
            use_le: cfg.use_lemod,
            use_qu: cfg.use_qumod,
            le_norm: cfg.le_norm,
        },
        weighted_sampling: cfg.use_lemod,
        lr0: cfg.lr0,
        lr_decay_factor: cfg.lr_decay,
        lr_patience: cfg.lr_patience,
        lr_stop: cfg.lr_stop,
        batch_size: cfg.batch,
        max_epochs: cfg.epochs,
        adam: lqmod_core::denoiser::AdamConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps },
        seed: cfg.seed,
        val_fraction: cfg.val_fraction,
        val_max_patches: cfg.val_max_patches,
        scale_weights: cfg.scale_weights()?,
    })
}

pub fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig { alphas: cfg.alphas.0.clone(), threshold: cfg.binarize_threshold }
}

/// Generates a cohort and writes it (manifest + volumes) under `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<Subject>> {
    let cohort = generate_cohort(cfg.subjects, &cohort_template(cfg), &count_sim_config(cfg))?;
    write_manifest(&cohort, out)?;
    write_echo(cfg, out)?;
    Ok(cohort)
}

/// Trains on a cohort already in memory; writes checkpoint and log.
pub fn train_in_memory(cfg: &RunConfig, cohort: &[Subject], out: &Path) -> Result<ModelParams> {
    let provider = provider_from(cfg);
    let tc = train_config(cfg)?;
    let (params, log) = train(cohort, provider.as_ref(), &tc, &sampling_config(cfg))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_checkpoint(&params, out.join("model.lqmp"))?;
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log.to_csv()).map_err(io_err(&log_path))?;
    write_echo(cfg, out)?;
    Ok(params)
}

/// Trains from a manifest directory.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<ModelParams> {
    let cohort = read_manifest(data)?;
    let n_train = training_subject_count(cfg, cohort.len())?;
    train_in_memory(cfg, &cohort[..n_train], out)
}

/// Number of leading subjects used for training (the rest are the held-out
/// evaluation split).
pub fn training_subject_count(cfg: &RunConfig, n: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config(format!("test_fraction {} outside [0, 1)", cfg.test_fraction)));
    }
    let held_out = (cfg.test_fraction * n as f64).round() as usize;
    let n_train = n.saturating_sub(held_out).max(1);
    Ok(n_train)
}

pub fn denoised_name(subject: &str, level: f64) -> String {
    format!("den_{subject}_lc{}.lqmv", format_level(level))
}

/// Denoises every (subject, level) pair of the manifest with a checkpoint.
pub fn cmd_denoise(cfg: &RunConfig, data: &Path, model: &Path, out: &Path) -> Result<usize> {
    let cohort = read_manifest(data)?;
    let params = read_checkpoint(model)?;
    if params.arch != cfg.arch {
        return Err(Error::Config(format!(
            "checkpoint architecture {} does not match configured {}",
            params.arch.tag(),
            cfg.arch.tag()
        )));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = 0;
    for subject in &cohort {
        let grid = build_patch_grid(subject.hc.dims(), cfg.patch, [cfg.stride; 3])?;
        for (level, lc) in &subject.lc {
            let den = denoise_volume(&params, lc, &grid)?;
            write_volume(&den, out.join(denoised_name(&subject.id, *level)))?;
            written += 1;
        }
    }
    write_echo(cfg, out)?;
    Ok(written)
}

fn load_denoised(cohort: &[Subject], den_dir: &Path) -> Result<Vec<DenoisedEntry>> {
    let mut entries = Vec::new();
    for (i, subject) in cohort.iter().enumerate() {
        for (level, _) in &subject.lc {
            let path = den_dir.join(denoised_name(&subject.id, *level));
            let volume = read_volume(&path)?;
            entries.push(DenoisedEntry { subject_index: i, level: *level, volume });
        }
    }
    Ok(entries)
}

/// Evaluates denoised volumes against a manifest; writes metrics.csv.
pub fn cmd_eval(cfg: &RunConfig, data: &Path, den_dir: &Path, out: &Path) -> Result<Vec<SubjectLevelReport>> {
    let cohort = read_manifest(data)?;
    let denoised = load_denoised(&cohort, den_dir)?;
    let provider = provider_from(cfg);
    let ecfg = eval_config(cfg);
    let reports = evaluate_cohort(&cohort, &denoised, provider.as_ref(), &ecfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("metrics.csv");
    fs::write(&path, metrics_csv(&reports, &ecfg)).map_err(io_err(&path))?;
    write_echo(cfg, out)?;
    Ok(reports)
}

/// Human-readable per-level summary for stdout.
pub fn summarize(reports: &[SubjectLevelReport], cfg: &EvalConfig) -> String {
    let mut out = String::new();
    for agg in aggregate_by_level(reports, cfg) {
        writeln!(
            out,
            "level {}%: n={} nrmse {:.4}+-{:.4} psnr {:.2}+-{:.2} ssim {:.4}+-{:.4}",
            format_level(agg.level),
            agg.n,
            agg.nrmse.0,
            agg.nrmse.1,
            agg.psnr_db.0,
            agg.psnr_db.1,
            agg.ssim.0,
            agg.ssim.1
        )
        .unwrap();
        writeln!(
            out,
            "  suv_mean bias {:.3}% suv_max bias {:.3}% |suv_max| {:.3}% tlg bias {:.3}%",
            agg.suv_mean_bias_pct.0, agg.suv_max_bias_pct.0, agg.abs_suv_max_bias_pct.0, agg.tlg_bias_pct.0
        )
        .unwrap();
    }
    out
}

/// SHA-256 over the manifest plus every referenced volume, in manifest
/// order. Identifies a cohort in the ablation report.
pub fn cohort_hash(data: &Path) -> Result<String> {
    let manifest_path = data.join("manifest.txt");
    let manifest = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest);
    for line in String::from_utf8_lossy(&manifest).lines() {
        let file = match line.split_once('=') {
            Some(("hc", v)) | Some(("prob", v)) => Some(v.to_string()),
            Some(("lc", v)) => v.split_once(',').map(|(_, f)| f.to_string()),
            _ => None,
        };
        if let Some(file) = file {
            let path = data.join(file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            hasher.update(&bytes);
        }
    }
    let digest = hasher.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// One ablation arm: which modulation components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    LesionOnly,
    QuantOnly,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::LesionOnly, Arm::QuantOnly, Arm::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::LesionOnly => "lemod",
            Arm::QuantOnly => "qumod",
            Arm::Full => "leqmod",
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        let (le, qu) = match self {
            Arm::Baseline => (false, false),
            Arm::LesionOnly => (true, false),
            Arm::QuantOnly => (false, true),
            Arm::Full => (true, true),
        };
        cfg.use_lemod = le;
        cfg.use_qumod = qu;
    }
}

/// Aggregates of one evaluated arm, pooled over the evaluated pairs.
#[derive(Debug, Clone)]
pub struct ArmReport {
    pub arm: &'static str,
    pub reports: Vec<SubjectLevelReport>,
    pub nrmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub suv_mean_bias_pct: f64,
    pub suv_max_bias_pct: f64,
    pub abs_suv_max_bias_pct: f64,
    pub tlg_bias_pct: f64,
    pub tversky: Vec<f64>,
    pub ba_mean_bias: f64,
    pub ba_lower: f64,
    pub ba_upper: f64,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn arm_report(arm: &'static str, reports: Vec<SubjectLevelReport>, n_alphas: usize) -> ArmReport {
    let lesion_max: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.lesion_biases.iter().map(|b| b.suv_max_bias_pct))
        .collect();
    let lesion_mean: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.lesion_biases.iter().map(|b| b.suv_mean_bias_pct))
        .collect();
    let tlg: Vec<f64> = reports.iter().filter_map(|r| r.tlg_bias_pct).collect();
    let tlg_pairs: Vec<(f64, f64)> = reports
        .iter()
        .filter_map(|r| r.tlg_den.zip(r.tlg_hc))
        .collect();
    let ba = if tlg_pairs.len() >= 2 { bland_altman(&tlg_pairs).ok() } else { None };
    let psnr_finite: Vec<f64> = reports.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
    ArmReport {
        arm,
        nrmse: mean(&reports.iter().map(|r| r.nrmse).collect::<Vec<_>>()),
        psnr_db: mean(&psnr_finite),
        ssim: mean(&reports.iter().map(|r| r.ssim).collect::<Vec<_>>()),
        suv_mean_bias_pct: mean(&lesion_mean),
        suv_max_bias_pct: mean(&lesion_max),
        abs_suv_max_bias_pct: mean(&lesion_max.iter().map(|b| b.abs()).collect::<Vec<_>>()),
        tlg_bias_pct: mean(&tlg),
        tversky: (0..n_alphas)
            .map(|i| mean(&reports.iter().map(|r| r.tversky[i]).collect::<Vec<_>>()))
            .collect(),
        ba_mean_bias: ba.as_ref().map(|b| b.mean_bias).unwrap_or(f64::NAN),
        ba_lower: ba.as_ref().map(|b| b.lower_limit).unwrap_or(f64::NAN),
        ba_upper: ba.as_ref().map(|b| b.upper_limit).unwrap_or(f64::NAN),
        reports,
    }
}

/// Paired Wilcoxon p-value of a metric between one arm and the baseline;
/// empty string when fewer than 5 non-tied pairs exist.
fn wilcoxon_cell(arm: &[f64], baseline: &[f64]) -> String {
    if arm.len() != baseline.len() || arm.len() < 5 {
        return String::new();
    }
    match wilcoxon_signed_rank(arm, baseline) {
        Ok(r) if !r.degenerate => format!("{:.6}", r.p_value),
        _ => String::new(),
    }
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Runs the four-arm ablation on one cohort: per arm, train on the leading
/// subjects, denoise and evaluate the held-out ones, then write
/// `ablation.csv` with per-arm aggregates, Bland-Altman limits, and
/// Wilcoxon p-values against the baseline arm.
pub fn cmd_ablate(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<Vec<ArmReport>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cohort_dir: PathBuf = match data {
        Some(dir) => dir.to_path_buf(),
        None => {
            let dir = out.join("cohort");
            cmd_gen(cfg, &dir)?;
            dir
        }
    };
    let cohort = read_manifest(&cohort_dir)?;
    let hash = cohort_hash(&cohort_dir)?;
    let n_train = training_subject_count(cfg, cohort.len())?;
    let eval_subjects: &[Subject] =
        if n_train < cohort.len() { &cohort[n_train..] } else { &cohort };

    let provider = provider_from(cfg);
    let ecfg = eval_config(cfg);
    let mut arms = Vec::new();
    for arm in Arm::ALL {
        let mut arm_cfg = cfg.clone();
        arm.apply(&mut arm_cfg);
        let arm_dir = out.join(format!("arm_{}", arm.name()));
        let params = train_in_memory(&arm_cfg, &cohort[..n_train], &arm_dir)?;
        let mut denoised = Vec::new();
        for (i, subject) in eval_subjects.iter().enumerate() {
            let grid = build_patch_grid(subject.hc.dims(), cfg.patch, [cfg.stride; 3])?;
            for (level, lc) in &subject.lc {
                let den = denoise_volume(&params, lc, &grid)?;
                write_volume(&den, arm_dir.join(denoised_name(&subject.id, *level)))?;
                denoised.push(DenoisedEntry { subject_index: i, level: *level, volume: den });
            }
        }
        let reports = evaluate_cohort(eval_subjects, &denoised, provider.as_ref(), &ecfg)?;
        let metrics_path = arm_dir.join("metrics.csv");
        fs::write(&metrics_path, metrics_csv(&reports, &ecfg)).map_err(io_err(&metrics_path))?;
        arms.push(arm_report(arm.name(), reports, ecfg.alphas.len()));
    }

    let csv = ablation_csv(cfg, &hash, &arms, &ecfg);
    let path = out.join("ablation.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    write_echo(cfg, out)?;
    Ok(arms)
}

fn metric_series(reports: &[SubjectLevelReport]) -> [Vec<f64>; 6] {
    // pairing across arms relies on identical report and lesion ordering,
    // which holds because the reference segmentation is shared
    let nrmse = reports.iter().map(|r| r.nrmse).collect();
    let psnr = reports.iter().map(|r| if r.psnr_db.is_finite() { r.psnr_db } else { 1e9 }).collect();
    let ssim = reports.iter().map(|r| r.ssim).collect();
    let suv_mean = reports
        .iter()
        .flat_map(|r| r.lesion_biases.iter().map(|b| b.suv_mean_bias_pct))
        .collect();
    let suv_max = reports
        .iter()
        .flat_map(|r| r.lesion_biases.iter().map(|b| b.suv_max_bias_pct))
        .collect();
    let tlg = reports.iter().filter_map(|r| r.tlg_bias_pct).collect();
    [nrmse, psnr, ssim, suv_mean, suv_max, tlg]
}

fn ablation_csv(cfg: &RunConfig, hash: &str, arms: &[ArmReport], ecfg: &EvalConfig) -> String {
    let mut out = String::new();
    writeln!(out, "# cohort_hash={hash}").unwrap();
    writeln!(out, "# seed={}", cfg.seed).unwrap();
    writeln!(out, "# arms={}", arms.len()).unwrap();
    let mut header = String::from(
        "arm,nrmse,psnr_db,ssim,suv_mean_bias_pct,suv_max_bias_pct,abs_suv_max_bias_pct,tlg_bias_pct",
    );
    for &(a, b) in &ecfg.alphas {
        header.push(',');
        header.push_str(&tversky_column(a, b));
    }
    header.push_str(",ba_mean_bias,ba_lower,ba_upper");
    header.push_str(",p_nrmse,p_psnr,p_ssim,p_suv_mean_bias,p_suv_max_bias,p_tlg_bias");
    writeln!(out, "{header}").unwrap();
    let baseline_series = metric_series(&arms[0].reports);
    for arm in arms {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            arm.arm,
            fmt_cell(arm.nrmse),
            fmt_cell(arm.psnr_db),
            fmt_cell(arm.ssim),
            fmt_cell(arm.suv_mean_bias_pct),
            fmt_cell(arm.suv_max_bias_pct),
            fmt_cell(arm.abs_suv_max_bias_pct),
            fmt_cell(arm.tlg_bias_pct),
        );
        for t in &arm.tversky {
            row.push(',');
            row.push_str(&fmt_cell(*t));
        }
        row.push_str(&format!(
            ",{},{},{}",
            fmt_cell(arm.ba_mean_bias),
            fmt_cell(arm.ba_lower),
            fmt_cell(arm.ba_upper)
        ));
        if arm.arm == "baseline" {
            row.push_str(",,,,,,");
        } else {
            let series = metric_series(&arm.reports);
            for (a, b) in series.iter().zip(&baseline_series) {
                row.push(',');
                row.push_str(&wilcoxon_cell(a, b));
            }
        }
        writeln!(out, "{row}").unwrap();
    }
    out
}

/// Prints the parcellation plan for the configured patch size.
pub fn plan_dump(cfg: &RunConfig) -> Result<String> {
    let plan = lqmod_core::parcel::ParcellationPlan::build_with_weights(cfg.patch, cfg.scale_weights()?)?;
    Ok(plan.describe())
}
