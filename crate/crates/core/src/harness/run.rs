//! Turning a scenario into a federation and writing its results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::client::stream_rng;
use crate::cost::{build_cost_table, estimate_time, DeviceProfile};
use crate::data::{generate_synthetic_dataset, load_idx, partition_data, Dataset, SyntheticParams};
use crate::error::{input_err, Error, Result};
use crate::nn::ModelParams;
use crate::quant::Configuration;
use crate::server::{run_federation, Device, DeviceClass, FederationConfig, FederationOutcome};

use super::scenario::{DataSource, Scenario};

const DATA_STREAM: u64 = 0;
const PARTITION_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONTRIBUTIONS_FILE: &str = "contributions.csv";
pub const ECHO_FILE: &str = "scenario.resolved.toml";

/// Everything a federation needs, built from a validated scenario.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// The scenario with the deadline filled in.
    pub scenario: Scenario,
    pub config: FederationConfig,
    pub classes: Vec<DeviceClass>,
    pub devices: Vec<Device>,
    pub initial_model: ModelParams<f32>,
    pub test_set: Dataset,
}

/// Profile as seen by the cost model; without quantization frozen blocks
/// cost the same as float ones.
pub fn effective_profile(scenario: &Scenario, class: usize) -> DeviceProfile {
    let p = scenario.device_classes[class].profile();
    if scenario.quantize {
        p
    } else {
        p.without_quantization()
    }
}

/// Training time of the whole model on the fastest device class.
pub fn default_deadline(scenario: &Scenario) -> Result<f64> {
    let full = Configuration::full(scenario.model.n_blocks());
    let hyper = scenario.train_hyper().cost_hyper();
    let mut best = f64::INFINITY;
    for i in 0..scenario.device_classes.len() {
        best = best.min(estimate_time(&effective_profile(scenario, i), &scenario.model, &full, &hyper)?);
    }
    Ok(best)
}

fn load_data(scenario: &Scenario) -> Result<(Dataset, Dataset)> {
    let needed = scenario.devices * scenario.samples_per_device;
    let (train, test) = match &scenario.data {
        DataSource::Synthetic(s) => {
            let m = &scenario.model;
            if m.input_height != m.input_width {
                return input_err("synthetic data needs a square input");
            }
            let params = SyntheticParams {
                classes: s.classes,
                samples: needed + s.test_samples,
                image_size: m.input_height,
                channels: m.input_channels,
                class_separation: s.class_separation,
                noise_sigma: s.noise_sigma,
                seed: scenario.seed,
            };
            let all = generate_synthetic_dataset(&params, &mut stream_rng(scenario.seed, 0, DATA_STREAM))?;
            (all.slice(0, needed)?, all.slice(needed, s.test_samples)?)
        }
        DataSource::Idx(idx) => {
            (load_idx(&idx.train_images, &idx.train_labels)?, load_idx(&idx.test_images, &idx.test_labels)?)
        }
    };
    let m = &scenario.model;
    for (name, set) in [("training", &train), ("test", &test)] {
        if set.image_shape() != (m.input_channels, m.input_height, m.input_width) {
            return input_err(format!(
                "{name} images have shape {:?}, the model expects {:?}",
                set.image_shape(),
                (m.input_channels, m.input_height, m.input_width)
            ));
        }
        if let Some(l) = set.labels.iter().find(|&&l| l >= m.num_classes()) {
            return input_err(format!("{name} label {l} exceeds the model's {} classes", m.num_classes()));
        }
    }
    Ok((train, test))
}

impl Experiment {
    pub fn prepare(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let mut scenario = scenario.clone();
        if scenario.deadline_seconds.is_none() {
            scenario.deadline_seconds = Some(default_deadline(&scenario)?);
        }
        let hyper = scenario.train_hyper();
        let classes = (0..scenario.device_classes.len())
            .map(|i| {
                let spec = &scenario.device_classes[i];
                let profile = spec.profile();
                let cost_table = build_cost_table(&effective_profile(&scenario, i), &scenario.model, &hyper.cost_hyper())?;
                Ok(DeviceClass { name: spec.name.clone(), profile, budget: spec.upload_budget, cost_table })
            })
            .collect::<Result<Vec<_>>>()?;
        let (train, test_set) = load_data(&scenario)?;
        let shards = partition_data(
            &train,
            scenario.devices,
            scenario.samples_per_device,
            &mut stream_rng(scenario.seed, 0, PARTITION_STREAM),
        )?;
        let class_of = scenario.class_counts().into_iter().enumerate().flat_map(|(c, n)| std::iter::repeat_n(c, n));
        let devices = shards.into_iter().zip(class_of).enumerate().map(|(id, (data, class))| Device { id, class, data }).collect();
        let initial_model = ModelParams::init(&scenario.model, &mut stream_rng(scenario.seed, 0, INIT_STREAM))?;
        let config = FederationConfig {
            topology: scenario.model.clone(),
            hyper,
            rounds: scenario.rounds,
            participants: scenario.participants,
            deadline: scenario.deadline_seconds.unwrap_or(f64::INFINITY),
            straggler_sigma: scenario.straggler_sigma,
            seed: scenario.seed,
        };
        Ok(Self { scenario, config, classes, devices, initial_model, test_set })
    }

    pub fn run(&self) -> Result<FederationOutcome> {
        run_federation(&self.config, &self.classes, &self.devices, self.initial_model.clone(), &self.test_set)
    }
}

pub fn metrics_csv(outcome: &FederationOutcome) -> String {
    let mut out = String::from("round,accuracy,mean_upload_bytes,accepted_updates\n");
    for m in &outcome.metrics {
        let _ = writeln!(out, "{},{},{},{}", m.round, m.accuracy, m.mean_upload_bytes, m.accepted_updates);
    }
    out
}

/// Sit-outs leave `l` and `u` empty.
pub fn contributions_csv(outcome: &FederationOutcome) -> String {
    let mut out = String::from("round,client_id,l,u,upload_bytes,elapsed_s,accepted\n");
    for c in &outcome.contributions {
        let (l, u) = match c.config.as_ref().and_then(|c| c.bounds()) {
            Some((l, u)) => (l.to_string(), u.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.round, c.client_id, l, u, c.upload_bytes, c.elapsed_seconds, c.accepted
        );
    }
    out
}

fn write_file(path: PathBuf, contents: &str) -> Result<()> {
    std::fs::write(&path, contents).map_err(|source| Error::Io { path, source })
}

/// Writes the metrics, the contribution log and the resolved scenario.
pub fn write_outcome(out_dir: &Path, scenario: &Scenario, outcome: &FederationOutcome) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io { path: out_dir.to_path_buf(), source })?;
    write_file(out_dir.join(METRICS_FILE), &metrics_csv(outcome))?;
    write_file(out_dir.join(CONTRIBUTIONS_FILE), &contributions_csv(outcome))?;
    write_file(out_dir.join(ECHO_FILE), &scenario.to_toml()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub deadline_seconds: f64,
    pub out_dir: PathBuf,
}

/// Loads, validates and runs a scenario file, writing all outputs to
/// `out_dir`.
pub fn run_scenario(scenario_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<RunSummary> {
    let mut scenario = Scenario::load(scenario_path)?;
    if let Some(seed) = seed_override {
        scenario.seed = seed;
    }
    let experiment = Experiment::prepare(&scenario)?;
    let outcome = experiment.run()?;
    write_outcome(out_dir, &experiment.scenario, &outcome)?;
    Ok(RunSummary {
        rounds: outcome.metrics.len(),
        final_accuracy: outcome.metrics.last().map_or(0.0, |m| m.accuracy),
        deadline_seconds: experiment.config.deadline,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::tests::SMALL;

    #[test]
    fn toy_run_writes_one_row_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        std::fs::write(&path, SMALL.replace("rounds = 2", "rounds = 3")).unwrap();
        let summary = run_scenario(&path, &dir.path().join("out"), None).unwrap();
        assert_eq!(summary.rounds, 3);
        let metrics = std::fs::read_to_string(dir.path().join("out").join(METRICS_FILE)).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], "round,accuracy,mean_upload_bytes,accepted_updates");
        assert_eq!(lines.len(), 4);
        for row in &lines[1..] {
            let acc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn echo_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        std::fs::write(&path, SMALL).unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_scenario(&path, &a, Some(5)).unwrap();
        run_scenario(&a.join(ECHO_FILE), &b, None).unwrap();
        for f in [METRICS_FILE, CONTRIBUTIONS_FILE, ECHO_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn deadline_is_fastest_full_model_time() {
        let s = Scenario::parse(SMALL, Path::new("s.toml")).unwrap();
        let e = Experiment::prepare(&s).unwrap();
        let full = Configuration::full(2);
        let fast = estimate_time(&s.device_classes[0].profile(), &s.model, &full, &s.train_hyper().cost_hyper()).unwrap();
        assert_eq!(e.config.deadline, fast);
        assert_eq!(e.devices.len(), 4);
        assert_eq!(e.devices.iter().map(|d| d.class).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    }
}
