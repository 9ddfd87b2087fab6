//! Run configuration files, rate tables and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexitok::calibration::{
    derive_alpha, derive_beta, CalibrationReport, RateSpec, DEFAULT_BETA_FLOOR,
};
use flexitok::model::{HeadConfig, HourglassConfig};
use flexitok::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::{config_error, Coded};

/// Either a path to a rate table (relative to the config file) or the table
/// itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatesSource {
    Path(PathBuf),
    Inline(BTreeMap<String, RateSpec>),
}

/// A rate table as written by `calibrate`, or a bare language -> spec map.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateTable {
    Report(CalibrationReport),
    Specs(BTreeMap<String, RateSpec>),
}

impl RateTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_error(format!("rate table {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| config_error(format!("rate table {}: {e}", path.display())))
    }

    /// Specs after the `--alpha` / `--lambda` overrides. `--alpha` re-anchors
    /// a calibration report; a bare spec map has no byte lengths to rescale.
    pub fn resolve(
        &self,
        alpha: Option<f64>,
        lambda: Option<f64>,
    ) -> Result<BTreeMap<String, RateSpec>> {
        let specs = match (self, alpha) {
            (RateTable::Report(r), Some(alpha_anchor)) => {
                let anchor = r
                    .languages
                    .iter()
                    .find(|l| l.lang == r.anchor)
                    .ok_or_else(|| {
                        config_error(format!("anchor `{}` missing from report", r.anchor))
                    })?;
                let scale = alpha_anchor / r.alpha_anchor;
                let mut out = BTreeMap::new();
                for l in &r.languages {
                    let a = derive_alpha(alpha_anchor, anchor.mu, l.mu).map_err(config_error)?;
                    let sigma = l.sigma * scale;
                    out.insert(
                        l.lang.clone(),
                        RateSpec {
                            alpha: a,
                            beta: derive_beta(a, sigma, r.lambda, r.beta_floor),
                            sigma,
                            lambda: r.lambda,
                        },
                    );
                }
                out
            }
            (RateTable::Report(r), None) => r.specs(),
            (RateTable::Specs(_), Some(_)) => {
                bail!(config_error(
                    "--alpha needs a calibration report (with byte lengths), not a bare rate map"
                ))
            }
            (RateTable::Specs(s), None) => s.clone(),
        };
        let floor = match self {
            RateTable::Report(r) => r.beta_floor,
            RateTable::Specs(_) => DEFAULT_BETA_FLOOR,
        };
        let mut specs = specs;
        if let Some(lambda) = lambda {
            if lambda < 0.0 {
                bail!(config_error(format!("--lambda {lambda} < 0")));
            }
            for spec in specs.values_mut() {
                spec.lambda = lambda;
                spec.beta = derive_beta(spec.alpha, spec.sigma, lambda, floor.min(spec.alpha));
            }
        }
        for (lang, spec) in &specs {
            spec.validate()
                .map_err(|e| config_error(format!("rate spec for `{lang}`: {e}")))?;
        }
        Ok(specs)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    /// Language order (ids); defaults to the rate table's keys.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<String>>,
}

impl DataPaths {
    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.train, &mut self.heldout, &mut self.eval]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub model: HourglassConfig,
    pub rates: RatesSource,
    #[serde(default)]
    pub data: DataPaths,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(default)]
    pub train: TrainConfig,
    pub head: HeadConfig,
    /// Defaults to the checkpoint's rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<RatesSource>,
    #[serde(default)]
    pub data: DataPaths,
}

/// Reads a JSON config; relative data paths resolve against its directory.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, PathBuf)> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("config {}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

impl PretrainConfig {
    pub fn rebase(&mut self, base: &Path) {
        self.data.rebase(base);
        if let RatesSource::Path(p) = &mut self.rates {
            *p = base.join(&*p);
        }
    }
}

impl FinetuneConfig {
    pub fn rebase(&mut self, base: &Path) {
        self.data.rebase(base);
        if let Some(RatesSource::Path(p)) = &mut self.rates {
            *p = base.join(&*p);
        }
    }
}

pub fn rate_table(source: &RatesSource) -> Result<RateTable> {
    match source {
        RatesSource::Path(p) => RateTable::load(p),
        RatesSource::Inline(specs) => Ok(RateTable::Specs(specs.clone())),
    }
}

/// Record of one command invocation, written before any work starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub overrides: BTreeMap<String, String>,
}

impl RunManifest {
    /// The run id is a digest of the command, overrides, seed and the bytes
    /// of the config and every input file.
    pub fn new(
        command: &str,
        config: Option<&Path>,
        seed: u64,
        inputs: Vec<PathBuf>,
        output_dir: &Path,
        overrides: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        for (k, v) in &overrides {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        for path in config
            .into_iter()
            .chain(inputs.iter().map(PathBuf::as_path))
        {
            let mut f =
                fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
            let mut buf = [0u8; 1 << 16];
            loop {
                let n = f.read(&mut buf)?;
                if n == 0 {
                    break;
                }
                h.update(&buf[..n]);
            }
        }
        let digest = h.finalize();
        let run_id = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            run_id,
            command: command.to_string(),
            config: config.map(Path::to_path_buf),
            seed,
            inputs,
            output_dir: output_dir.to_path_buf(),
            overrides,
        })
    }

    /// Creates the (empty or new) output directory and writes the manifest.
    pub fn start(&self) -> Result<()> {
        let dir = &self.output_dir;
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            bail!(Coded::usage(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }
}
