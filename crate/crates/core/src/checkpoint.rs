//! Text checkpoint: architecture, scaler, flat parameters and training metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::net::{Architecture, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// `metafap` or `plain_dnn`.
    pub kind: String,
    pub seed: u64,
    pub split: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub inner_lr: f64,
    pub inner_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub scaler: Scaler,
    pub meta: TrainingMeta,
}

#[derive(Serialize)]
struct Out<'a> {
    format_version: u32,
    architecture: &'a Architecture,
    scaler: &'a Scaler,
    metadata: &'a TrainingMeta,
    param_count: usize,
    params: Box<RawValue>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct In {
    format_version: u32,
    architecture: Architecture,
    scaler: Scaler,
    metadata: TrainingMeta,
    param_count: usize,
    params: Vec<f64>,
}

impl Checkpoint {
    pub fn architecture(&self) -> &Architecture {
        self.params.arch()
    }

    /// Serializes to JSON; parameters are written at 17 significant digits.
    pub fn to_text(&self) -> Result<String> {
        let mut list = String::with_capacity(self.params.len() * 25);
        list.push('[');
        for (i, v) in self.params.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::domain(format!("parameter {i} is not finite")));
            }
            if i > 0 {
                list.push(',');
            }
            list.push_str(&format!("{v:.16e}"));
        }
        list.push(']');
        let out = Out {
            format_version: FORMAT_VERSION,
            architecture: self.params.arch(),
            scaler: &self.scaler,
            metadata: &self.meta,
            param_count: self.params.len(),
            params: RawValue::from_string(list)?,
        };
        let mut text = serde_json::to_string_pretty(&out)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let raw: In = serde_json::from_str(text)?;
        if raw.format_version != FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format_version {}",
                raw.format_version
            )));
        }
        if raw.params.len() != raw.param_count {
            return Err(Error::ArchitectureMismatch(format!(
                "param_count says {}, file holds {}",
                raw.param_count,
                raw.params.len()
            )));
        }
        raw.scaler.validate()?;
        let params = ModelParams::from_values(raw.architecture, raw.params)?;
        Ok(Checkpoint {
            params,
            scaler: raw.scaler,
            meta: raw.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Loads and checks the stored architecture against `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_architecture(expected)?;
        Ok(ck)
    }

    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        if self.architecture() != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint architecture {:?} does not match configured {:?}",
                self.architecture(),
                expected
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Ablation};

    fn sample() -> Checkpoint {
        Checkpoint {
            params: init_params(&Architecture::default(), 4).unwrap(),
            scaler: Scaler {
                mean: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
                std: [0.5; 8],
            },
            meta: TrainingMeta {
                kind: "metafap".into(),
                seed: 4,
                split: "primary".into(),
                epochs: 3,
                best_epoch: Some(1),
                best_val_loss: Some(0.01),
                inner_lr: 5e-4,
                inner_steps: 5,
            },
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ck = sample();
        let text = ck.to_text().unwrap();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn default_checkpoint_is_small() {
        let text = sample().to_text().unwrap();
        assert!(text.len() < 256 * 1024, "{}", text.len());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let ck = sample();
        let other = Architecture::default().with_ablation(Ablation::NoFreqBranch);
        assert!(matches!(ck.check_architecture(&other), Err(Error::ArchitectureMismatch(_))));
        assert!(ck.check_architecture(&Architecture::default()).is_ok());

        let text = ck.to_text().unwrap().replace("\"param_count\": 3871", "\"param_count\": 3870");
        assert!(Checkpoint::from_text(&text).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_text().unwrap()).unwrap();
        v["architecture"]["head"][1] = 50.into();
        assert!(Checkpoint::from_text(&v.to_string()).is_err());
    }
}
