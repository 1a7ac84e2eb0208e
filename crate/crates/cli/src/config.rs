//! Experiment files: flat TOML with an `[optimizer]` and a `[subsample]` table.
//!
//! ```toml
//! config_name = "usps2mnist"
//! pair = "usps2mnist"
//! lambda1 = 2.0
//! lambda2 = 0.01
//! lambda3 = 0.1
//! delta_e = 0.1
//! delta_c = 0.05
//! ramp_period = 80
//! epsilon = 3.5
//! epochs = 90
//!
//! [optimizer]
//! decay_epochs = [30, 60]
//! ```
//!
//! Any key can be overridden from the command line with `--set key=value`;
//! nested keys use dots (`optimizer.lr=1e-4`).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dta_core::adversarial::Linearization;
use dta_core::datasets::{PairName, Subsample};
use dta_core::networks::ArchitectureId;
use dta_core::objectives::LossWeights;
use dta_core::scalar::ScalarKind;
use dta_core::training::{DtaConfig, OptimizerConfig};

fn yes() -> bool {
    true
}

fn default_drop_rate() -> f64 {
    0.1
}

fn default_batch() -> usize {
    64
}

fn one() -> usize {
    1
}

fn f32_kind() -> ScalarKind {
    ScalarKind::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub config_name: String,
    /// Relative paths resolve under `OUTPUT_ROOT`; defaults to `config_name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub pair: PairName,
    /// Overrides the pair's default architecture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(default = "f32_kind")]
    pub precision: ScalarKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub delta_e: f64,
    pub delta_c: f64,
    pub epsilon: f64,
    pub ramp_period: u64,
    #[serde(default = "default_drop_rate")]
    pub stochastic_drop_rate: f64,
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub use_fdta: bool,
    #[serde(default = "yes")]
    pub use_cdta: bool,
    #[serde(default = "yes")]
    pub use_entropy: bool,
    #[serde(default = "yes")]
    pub use_vat: bool,
    #[serde(default)]
    pub linearization: Linearization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vat_xi: Option<f64>,
    #[serde(default = "one")]
    pub vat_power_iters: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub subsample: SubsampleFile,
}

/// `[subsample]` caps; absent keys mean "use the whole split".
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
}

impl From<SubsampleFile> for Subsample {
    fn from(s: SubsampleFile) -> Self {
        Subsample {
            source: s.source,
            target: s.target,
            test: s.test,
        }
    }
}

impl ExperimentFile {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, overrides).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let file: ExperimentFile = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            anyhow::anyhow!("{}", e.message())
        })?;
        file.dta_config().validate()?;
        file.architecture()?;
        Ok(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment file serializes")
    }

    pub fn dta_config(&self) -> DtaConfig {
        DtaConfig {
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
            },
            delta_e: self.delta_e,
            delta_c: self.delta_c,
            epsilon: self.epsilon,
            ramp_period: self.ramp_period,
            stochastic_drop_rate: self.stochastic_drop_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
            use_fdta: self.use_fdta,
            use_cdta: self.use_cdta,
            use_entropy: self.use_entropy,
            use_vat: self.use_vat,
            linearization: self.linearization,
            vat_xi: self.vat_xi,
            vat_power_iters: self.vat_power_iters,
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureId> {
        Ok(match &self.arch {
            Some(name) => ArchitectureId::parse(name, self.pair.input_shape(), self.pair.num_classes())?,
            None => self.pair.architecture(),
        })
    }

    pub fn output_dir(&self, output_root: &Path) -> PathBuf {
        let dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from(&self.config_name));
        if dir.is_absolute() {
            dir
        } else {
            output_root.join(dir)
        }
    }

    /// True when every adaptation weight is zero.
    pub fn is_source_only(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0
    }
}

/// Applies `a.b.c=value`. Values parse as TOML (numbers, booleans, arrays)
/// and fall back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let key = key.trim();
    if key.is_empty() {
        bail!("override `{assignment}` has an empty key");
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override key `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
