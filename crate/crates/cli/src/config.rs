//! Flat key=value run configuration.
//!
//! Defaults, an optional config file, and repeated `--set key=value`
//! overrides merge in that order. Unknown keys are rejected, and the
//! effective configuration is echoed into every output directory so a run
//! can be reconstructed from its artifacts alone.

use std::fmt::Write as _;
use std::path::Path;

use lqmod_core::denoiser::Architecture;
use lqmod_core::lesion::LossNorm;
use lqmod_core::{Error, Result};

/// Which probability-map observer to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Oracle,
    Heuristic,
}

trait KeyValue: Sized {
    fn parse_value(key: &str, value: &str) -> Result<Self>;
    fn echo_value(&self) -> String;
}

fn bad(key: &str, value: &str, wanted: &str) -> Error {
    Error::Config(format!("key '{key}': cannot parse '{value}' as {wanted}"))
}

impl KeyValue for usize {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        value.parse().map_err(|_| bad(key, value, "an unsigned integer"))
    }
    fn echo_value(&self) -> String {
        self.to_string()
    }
}

impl KeyValue for u64 {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        value.parse().map_err(|_| bad(key, value, "an unsigned integer"))
    }
    fn echo_value(&self) -> String {
        self.to_string()
    }
}

impl KeyValue for f64 {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        value.parse().map_err(|_| bad(key, value, "a number"))
    }
    fn echo_value(&self) -> String {
        format!("{self}")
    }
}

impl KeyValue for bool {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(key, value, "a boolean")),
        }
    }
    fn echo_value(&self) -> String {
        self.to_string()
    }
}

/// Comma-separated list of numbers ("5" or "1,2,5").
#[derive(Debug, Clone, PartialEq)]
pub struct NumberList(pub Vec<f64>);

impl KeyValue for NumberList {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        let items = value
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad(key, value, "a comma-separated number list"))?;
        if items.is_empty() {
            return Err(bad(key, value, "a non-empty number list"));
        }
        Ok(NumberList(items))
    }
    fn echo_value(&self) -> String {
        self.0.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
    }
}

/// Comma-separated `a:b` pairs ("1:0.35,2:0.25" or "0.3:0.7,0.5:0.5").
#[derive(Debug, Clone, PartialEq)]
pub struct PairList(pub Vec<(f64, f64)>);

impl KeyValue for PairList {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for part in value.split(',') {
            let (a, b) = part
                .split_once(':')
                .ok_or_else(|| bad(key, value, "a comma-separated list of a:b pairs"))?;
            let a = a.trim().parse::<f64>().map_err(|_| bad(key, value, "numeric pairs"))?;
            let b = b.trim().parse::<f64>().map_err(|_| bad(key, value, "numeric pairs"))?;
            pairs.push((a, b));
        }
        if pairs.is_empty() {
            return Err(bad(key, value, "a non-empty pair list"));
        }
        Ok(PairList(pairs))
    }
    fn echo_value(&self) -> String {
        self.0.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(",")
    }
}

impl KeyValue for Architecture {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        Architecture::from_tag(value).map_err(|_| bad(key, value, "convnet|linfilter"))
    }
    fn echo_value(&self) -> String {
        self.tag().to_string()
    }
}

impl KeyValue for ProviderKind {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        match value {
            "oracle" => Ok(ProviderKind::Oracle),
            "heuristic" => Ok(ProviderKind::Heuristic),
            _ => Err(bad(key, value, "oracle|heuristic")),
        }
    }
    fn echo_value(&self) -> String {
        match self {
            ProviderKind::Oracle => "oracle".into(),
            ProviderKind::Heuristic => "heuristic".into(),
        }
    }
}

impl KeyValue for LossNorm {
    fn parse_value(key: &str, value: &str) -> Result<Self> {
        match value {
            "soft" => Ok(LossNorm::SoftCount),
            "hard" => Ok(LossNorm::HardCount),
            _ => Err(bad(key, value, "soft|hard")),
        }
    }
    fn echo_value(&self) -> String {
        match self {
            LossNorm::SoftCount => "soft".into(),
            LossNorm::HardCount => "hard".into(),
        }
    }
}

macro_rules! run_config {
    ($( $key:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        /// Every tunable of the pipeline as one flat configuration.
        #[derive(Debug, Clone)]
        pub struct RunConfig {
            $( pub $key: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )+ }
            }
        }

        impl RunConfig {
            /// Applies one `key=value` override; unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = <$ty as KeyValue>::parse_value(key, value)?;
                        Ok(())
                    } )+
                    _ => Err(Error::Config(format!("unknown configuration key '{key}'"))),
                }
            }

            /// Canonical echo of every effective key, one per line.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{}={}", stringify!($key), self.$key.echo_value()).unwrap(); )+
                out
            }
        }
    };
}

run_config! {
    // cohort geometry and activity
    subjects: usize = 30,
    dim: usize = 64,
    voxel_mm: f64 = 2.5,
    background_suv: f64 = 1.0,
    organs: usize = 2,
    organ_radius_mm_min: f64 = 15.0,
    organ_radius_mm_max: f64 = 30.0,
    organ_suv_min: f64 = 0.4,
    organ_suv_max: f64 = 2.2,
    max_lesions: usize = 5,
    lesion_free_fraction: f64 = 0.3,
    lesion_radius_mm_min: f64 = 4.0,
    lesion_radius_mm_max: f64 = 9.0,
    lesion_suv_min: f64 = 3.0,
    lesion_suv_max: f64 = 8.0,
    edge_ramp_voxels: f64 = 1.0,
    // acquisition simulation
    sensitivity: f64 = 100.0,
    levels: NumberList = NumberList(vec![5.0]),
    smooth_fwhm_mm: f64 = 2.0,
    // patch grid
    patch: usize = 32,
    stride: usize = 8,
    // lesion-aware sampling
    w_min: f64 = 0.3,
    eta: PairList = PairList(lqmod_core::lesion::DEFAULT_ETA_TABLE.to_vec()),
    // losses
    mu: NumberList = NumberList(lqmod_core::parcel::DEFAULT_SCALE_WEIGHTS.to_vec()),
    lambda_le: f64 = 0.15,
    lambda_qu: f64 = 0.5,
    le_norm: LossNorm = LossNorm::SoftCount,
    use_lemod: bool = true,
    use_qumod: bool = true,
    // model and optimization
    arch: Architecture = Architecture::ConvNet,
    lr0: f64 = 1e-4,
    lr_decay: f64 = 0.1,
    lr_patience: usize = 5,
    lr_stop: f64 = 1e-7,
    batch: usize = 16,
    epochs: usize = 20,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    val_fraction: f64 = 0.2,
    val_max_patches: usize = 64,
    test_fraction: f64 = 0.25,
    // probability-map observer
    provider: ProviderKind = ProviderKind::Oracle,
    oracle_blur_fwhm_mm: f64 = 0.0,
    heur_fwhm_mm: f64 = 4.0,
    heur_z0: f64 = 4.0,
    heur_tau: f64 = 1.0,
    heur_min_voxels: usize = 3,
    // evaluation
    alphas: PairList = PairList(vec![(0.3, 0.7), (0.5, 0.5), (0.7, 0.3)]),
    binarize_threshold: f64 = 0.5,
    // randomness
    seed: u64 = 7,
}

impl RunConfig {
    /// Loads overrides from a key=value file ('#' starts a comment line).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    line_no + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `--set key=value` style overrides.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for raw in sets {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{raw}'")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn scale_weights(&self) -> Result<[f64; 4]> {
        let v = &self.mu.0;
        if v.len() != 4 {
            return Err(Error::Config(format!("mu expects 4 weights, got {}", v.len())));
        }
        Ok([v[0], v[1], v[2], v[3]])
    }
}
