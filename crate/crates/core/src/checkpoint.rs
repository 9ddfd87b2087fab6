//! Checkpoints: a little-endian `f64` parameter archive plus a JSON sidecar
//! (`<path>.json`) describing how to rebuild the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bytes_data::LanguageSet;
use crate::calibration::RateSpec;
use crate::error::{Error, Result};
use crate::model::{HeadConfig, Hourglass, HourglassConfig};
use crate::objectives::BoundaryLossKind;

const MAGIC: &[u8; 8] = b"FLXTOK\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: HourglassConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadConfig>,
    pub rates: BTreeMap<String, RateSpec>,
    pub languages: Vec<String>,
    pub step: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_kind: Option<BoundaryLossKind>,
    pub n_params: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Hourglass,
    pub rates: BTreeMap<String, RateSpec>,
    pub languages: LanguageSet,
    pub step: usize,
    pub seed: u64,
    pub loss_kind: Option<BoundaryLossKind>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let sum = fnv1a(&out[16..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err("not a parameter archive".into());
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_end = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(16))
        .ok_or("parameter count overflows")?;
    if bytes.len() != body_end + 8 {
        return Err(format!(
            "archive holds {} bytes, expected {}",
            bytes.len(),
            body_end + 8
        ));
    }
    let sum = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    if sum != fnv1a(&bytes[16..body_end]) {
        return Err("checksum mismatch".into());
    }
    Ok(bytes[16..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            head: self.model.head().copied(),
            rates: self.rates.clone(),
            languages: self.languages.iter().map(str::to_string).collect(),
            step: self.step,
            seed: self.seed,
            loss_kind: self.loss_kind,
            n_params: self.model.num_params(),
        }
    }

    /// Writes the archive to `path` and the sidecar to `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, encode_params(self.model.params()))?;
        fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let meta_text =
            fs::read_to_string(sidecar_path(path)).map_err(|e| fail(format!("sidecar: {e}")))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta_text).map_err(|e| fail(format!("sidecar: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        meta.model.validate().map_err(|e| fail(e.to_string()))?;
        let params = decode_params(&fs::read(path)?).map_err(fail)?;
        if params.len() != meta.n_params {
            return Err(fail(format!(
                "{} parameters, sidecar says {}",
                params.len(),
                meta.n_params
            )));
        }
        let model = Hourglass::from_params(meta.model, meta.head, params)
            .map_err(|e| fail(e.to_string()))?;
        let languages = if meta.languages.is_empty() {
            LanguageSet::default()
        } else {
            LanguageSet::new(&meta.languages)?
        };
        Ok(Self {
            model,
            rates: meta.rates,
            languages,
            step: meta.step,
            seed: meta.seed,
            loss_kind: meta.loss_kind,
        })
    }
}
