use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use usst::datagen::DatasetConfig;
use usst::model::UsstConfig;
use usst::trainer::TrainConfig;

use crate::error::CliError;

/// Everything a run needs, loaded from one JSON file. Command-line flags
/// override individual fields afterwards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: UsstConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Sets the dataset, initialization and training seeds together.
    pub seed: Option<u64>,
}

pub const OUTPUT_ENV: &str = "USST_OUTPUT_DIR";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.dataset.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    /// The environment override beats the flag, which beats the config file.
    pub fn output_dir(&self, flag: Option<PathBuf>, fallback: &str) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .or(flag)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(fallback))
    }

    pub fn data_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        flag.or_else(|| self.data_dir.clone())
            .ok_or_else(|| CliError::Usage("no dataset given; pass --data or set data_dir in the config".into()))
    }
}

/// `0.1..0.9` (steps of 0.1), `lo..hi:step`, or a comma list.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad ratio `{t}`"));
    let ratios = if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (num(hi)?, num(step)?),
            None => (num(rest)?, 0.1),
        };
        let lo = num(lo)?;
        if !(step > 0.0) || hi < lo {
            return Err(format!("empty ratio range `{s}`"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // round to the step's decimals so 0.1..0.9 gives exactly 0.3, not 0.30000000000000004
        (0..=n).map(|k| ((lo + k as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(format!("ratio {r} outside (0, 1)"));
    }
    Ok(ratios)
}
