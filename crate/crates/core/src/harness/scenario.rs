//! Scenario files: a TOML description of the network, data, device mix and
//! federation hyperparameters. Unknown keys are rejected and validation
//! errors point at the offending line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::de::{DeTable, DeValue};

use crate::client::TrainHyper;
use crate::cost::DeviceProfile;
use crate::error::{Error, Result};
use crate::nn::ModelTopology;
use crate::server::UploadBudget;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub rounds: usize,
    /// `|C|`
    pub devices: usize,
    /// Devices selected per round.
    pub participants: usize,
    /// `|D_c|`
    pub samples_per_device: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub batches_per_round: usize,
    pub calibration_batch_size: usize,
    /// Run frozen conv blocks in 8-bit.
    #[serde(default = "yes")]
    pub quantize: bool,
    /// Round deadline `T`; defaults to the full-model training time on the
    /// fastest device class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_seconds: Option<f64>,
    /// Log-normal sigma of the elapsed-time noise; absent means no noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub straggler_sigma: Option<f64>,
    pub model: ModelTopology,
    pub data: DataSource,
    pub device_classes: Vec<DeviceClassSpec>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Idx(IdxSource),
}

/// Template-plus-noise images; the training pool holds exactly
/// `devices × samples_per_device` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub classes: usize,
    pub test_samples: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

/// IDX files; relative paths are resolved against the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceClassSpec {
    pub name: String,
    /// Share of the devices in this class.
    pub fraction: f64,
    pub float_mac_rate: f64,
    pub quant_cost_factor: f64,
    #[serde(default)]
    pub overhead_per_batch: f64,
    #[serde(default = "unlimited")]
    pub upload_budget: UploadBudget,
}

fn unlimited() -> UploadBudget {
    UploadBudget::Unlimited
}

impl DeviceClassSpec {
    pub fn profile(&self) -> DeviceProfile {
        DeviceProfile {
            name: self.name.clone(),
            float_mac_rate: self.float_mac_rate,
            quant_cost_factor: self.quant_cost_factor,
            overhead_per_batch: self.overhead_per_batch,
        }
    }
}

/// Position of a value inside the scenario document.
#[derive(Debug, Clone, PartialEq)]
enum Key {
    Name(&'static str),
    Index(usize),
}

struct Invalid {
    at: Vec<Key>,
    msg: String,
}

fn invalid(at: Vec<Key>, msg: impl Into<String>) -> Invalid {
    Invalid { at, msg: msg.into() }
}

/// 1-based line of the value at `at`, falling back to the closest ancestor
/// that exists in the document.
fn line_of(src: &str, at: &[Key]) -> Option<usize> {
    let root = DeTable::parse(src).ok()?;
    let Some(Key::Name(first)) = at.first() else { return Some(1) };
    let mut node: &toml::Spanned<DeValue> = root.get_ref().get(*first)?;
    for key in &at[1..] {
        let next = match key {
            Key::Name(n) => node.get_ref().get(*n),
            Key::Index(i) => node.get_ref().get(*i),
        };
        match next {
            Some(n) => node = n,
            None => break,
        }
    }
    let offset = node.span().start;
    Some(src[..offset.min(src.len())].matches('\n').count() + 1)
}

impl Scenario {
    /// Parses and validates scenario text. `origin` names the source in
    /// error messages.
    pub fn parse(src: &str, origin: &Path) -> Result<Self> {
        let scenario: Scenario = toml::from_str(src)
            .map_err(|e| Error::Format { path: origin.to_path_buf(), msg: e.to_string().trim_end().to_string() })?;
        if let Err(Invalid { at, msg }) = scenario.check() {
            let msg = match line_of(src, &at) {
                Some(line) => format!("line {line}: {msg}"),
                None => msg,
            };
            return Err(Error::Format { path: origin.to_path_buf(), msg });
        }
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut scenario = Self::parse(&src, path)?;
        if let DataSource::Idx(idx) = &mut scenario.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut idx.train_images, &mut idx.train_labels, &mut idx.test_images, &mut idx.test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(scenario)
    }

    /// Re-validates a scenario built or modified in code.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|Invalid { at, msg }| {
            let path: Vec<String> = at
                .iter()
                .map(|k| match k {
                    Key::Name(n) => n.to_string(),
                    Key::Index(i) => i.to_string(),
                })
                .collect();
            Error::Input(format!("{}: {msg}", path.join(".")))
        })
    }

    fn check(&self) -> std::result::Result<(), Invalid> {
        use Key::Name;
        let positive = [
            ("rounds", self.rounds),
            ("devices", self.devices),
            ("participants", self.participants),
            ("samples_per_device", self.samples_per_device),
            ("batch_size", self.batch_size),
            ("batches_per_round", self.batches_per_round),
            ("calibration_batch_size", self.calibration_batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(vec![Name(key)], format!("{key} must be positive")));
            }
        }
        if self.participants > self.devices {
            return Err(invalid(vec![Name("participants")], "participants exceeds the number of devices"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid(vec![Name("learning_rate")], "learning_rate must be non-negative"));
        }
        if let Some(t) = self.deadline_seconds {
            if !(t > 0.0) {
                return Err(invalid(vec![Name("deadline_seconds")], "deadline_seconds must be positive"));
            }
        }
        if let Some(s) = self.straggler_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(invalid(vec![Name("straggler_sigma")], "straggler_sigma must be non-negative"));
            }
        }
        if let Err(e) = self.model.shapes() {
            return Err(invalid(vec![Name("model")], e.to_string()));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                let at = |k| vec![Name("data"), Name(k)];
                if s.classes != self.model.num_classes() {
                    return Err(invalid(at("classes"), "classes must equal the output block's num_classes"));
                }
                if s.test_samples == 0 {
                    return Err(invalid(at("test_samples"), "test_samples must be positive"));
                }
                if !(s.class_separation.is_finite() && s.class_separation > 0.0) {
                    return Err(invalid(at("class_separation"), "class_separation must be positive"));
                }
                if !(s.noise_sigma.is_finite() && s.noise_sigma >= 0.0) {
                    return Err(invalid(at("noise_sigma"), "noise_sigma must be non-negative"));
                }
            }
            DataSource::Idx(_) => {}
        }
        if self.device_classes.is_empty() {
            return Err(invalid(vec![Name("device_classes")], "at least one device class is required"));
        }
        for (i, c) in self.device_classes.iter().enumerate() {
            let at = |k| vec![Name("device_classes"), Key::Index(i), Name(k)];
            if !(c.fraction.is_finite() && c.fraction >= 0.0) {
                return Err(invalid(at("fraction"), "fraction must be non-negative"));
            }
            if let Err(e) = c.profile().validate() {
                return Err(invalid(vec![Name("device_classes"), Key::Index(i)], e.to_string()));
            }
            if let Err(e) = c.upload_budget.validate() {
                return Err(invalid(at("upload_budget"), e.to_string()));
            }
        }
        let total: f64 = self.device_classes.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(vec![Name("device_classes")], format!("device class fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Devices per class by largest remainder; ties favour earlier classes.
    pub fn class_counts(&self) -> Vec<usize> {
        let exact: Vec<f64> = self.device_classes.iter().map(|c| c.fraction * self.devices as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = self.devices.saturating_sub(counts.iter().sum());
        for &i in order.iter().cycle().take(missing) {
            counts[i] += 1;
        }
        counts
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.learning_rate as f32,
            batch_size: self.batch_size,
            batches_per_round: self.batches_per_round,
            calibration_batch_size: self.calibration_batch_size,
            quantize: self.quantize,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Input(format!("scenario cannot be serialized: {e}")))
    }
}
