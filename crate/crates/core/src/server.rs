//! Synchronous federated rounds: device sampling, local training, straggler
//! discard and per-block weighted aggregation of partial updates.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train_round, select_configuration, stream_rng, LocalContext, RoundConstraints, TrainHyper};
use crate::cost::{update_size, CostTable, DeviceProfile};
use crate::data::Dataset;
use crate::error::{dim_err, input_err, Result};
use crate::harness::evaluate_accuracy;
use crate::nn::{BlockParams, ModelParams, ModelTopology};
use crate::quant::Configuration;
use crate::client::UpdateMessage;

/// Random stream reserved for device sampling; client ids never reach it.
const SELECTION_STREAM: u64 = u64::MAX;

/// Uniform `k`-subset of `0..n_devices`, sorted ascending.
pub fn select_devices(n_devices: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > n_devices {
        return input_err(format!("cannot select {k} of {n_devices} devices"));
    }
    let mut ids = rand::seq::index::sample(rng, n_devices, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `Σ w_c·|D_c| / Σ |D_c|` per element, accumulated in f64 in list order.
fn weighted_block_average(parts: &[(&BlockParams<f32>, usize)]) -> Result<BlockParams<f32>> {
    let (first, _) = parts[0];
    let total: f64 = parts.iter().map(|(_, n)| *n as f64).sum();
    if total <= 0.0 {
        return input_err("aggregation weights sum to zero");
    }
    let mut acc: Vec<Vec<f64>> = first.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (params, n) in parts {
        let tensors = params.tensors();
        if tensors.len() != acc.len() || tensors.iter().zip(first.tensors()).any(|(a, b)| a.shape() != b.shape()) {
            return input_err("updates disagree on block parameter shapes");
        }
        let weight = *n as f64;
        for (sum, t) in acc.iter_mut().zip(tensors) {
            for (s, &v) in sum.iter_mut().zip(t.data()) {
                *s += weight * v as f64;
            }
        }
    }
    let mut out = first.clone();
    for (t, sum) in out.tensors_mut().into_iter().zip(acc) {
        for (v, s) in t.data_mut().iter_mut().zip(sum) {
            *v = (s / total) as f32;
        }
    }
    Ok(out)
}

/// Data-size weighted average of complete models, in list order.
pub fn fedavg_aggregate(updates: &[(ModelParams<f32>, usize)]) -> Result<ModelParams<f32>> {
    let Some((first, _)) = updates.first() else {
        return input_err("no updates to aggregate");
    };
    if updates.iter().any(|(m, _)| m.blocks.len() != first.blocks.len()) {
        return dim_err("updates have different block counts");
    }
    let blocks = (0..first.blocks.len())
        .map(|i| weighted_block_average(&updates.iter().map(|(m, n)| (&m.blocks[i], *n)).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(ModelParams { blocks })
}

/// Each block becomes the weighted average over the updates that contain it;
/// blocks nobody trained keep their previous value.
pub fn partial_aggregate(prev: &ModelParams<f32>, updates: &[UpdateMessage]) -> Result<ModelParams<f32>> {
    let mut sorted: Vec<&UpdateMessage> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut next = prev.clone();
    for (i, block) in next.blocks.iter_mut().enumerate() {
        let parts: Vec<_> = sorted.iter().filter_map(|u| u.blocks.get(&i).map(|b| (b, u.data_count))).collect();
        if parts.is_empty() {
            continue;
        }
        if parts.iter().any(|(b, _)| b.tensors().iter().zip(block.tensors()).any(|(x, y)| x.shape() != y.shape()))
            || parts.iter().any(|(b, _)| b.tensors().len() != block.tensors().len())
        {
            return input_err(format!("update for block {i} does not match the global model"));
        }
        *block = weighted_block_average(&parts)?;
    }
    if let Some(u) = sorted.iter().find(|u| u.blocks.keys().any(|&i| i >= prev.blocks.len())) {
        return input_err(format!("update from device {} names a block outside the model", u.client_id));
    }
    Ok(next)
}

/// Upload budget of a device class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadBudget {
    Unlimited,
    Bytes(u64),
    /// Share of the full model's update size.
    FractionOfModel(f64),
    /// A share drawn uniformly from `[lo, hi]` each round.
    RandomFraction(f64, f64),
}

impl UploadBudget {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            UploadBudget::Unlimited | UploadBudget::Bytes(_) => true,
            UploadBudget::FractionOfModel(f) => f.is_finite() && f >= 0.0,
            UploadBudget::RandomFraction(lo, hi) => lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            input_err(format!("invalid upload budget {self:?}"))
        }
    }

    /// Bytes available this round.
    pub fn draw(&self, full_model_bytes: u64, rng: &mut impl Rng) -> f64 {
        match *self {
            UploadBudget::Unlimited => f64::INFINITY,
            UploadBudget::Bytes(b) => b as f64,
            UploadBudget::FractionOfModel(f) => f * full_model_bytes as f64,
            UploadBudget::RandomFraction(lo, hi) => rng.random_range(lo..=hi) * full_model_bytes as f64,
        }
    }
}

/// Devices sharing a profile, budget and cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceClass {
    pub name: String,
    pub profile: DeviceProfile,
    pub budget: UploadBudget,
    pub cost_table: CostTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: usize,
    pub class: usize,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub topology: ModelTopology,
    pub hyper: TrainHyper,
    pub rounds: usize,
    pub participants: usize,
    /// Round deadline `T` in seconds.
    pub deadline: f64,
    /// Log-standard deviation of the multiplicative elapsed-time noise.
    pub straggler_sigma: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub accuracy: f64,
    /// Mean over the selected devices of the bytes they uploaded (0 when
    /// sitting out).
    pub mean_upload_bytes: f64,
    pub accepted_updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionRecord {
    pub round: usize,
    pub client_id: usize,
    /// `None` when the device sat the round out.
    pub config: Option<Configuration>,
    pub upload_bytes: u64,
    pub elapsed_seconds: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub contributions: Vec<ContributionRecord>,
    pub model: ModelParams<f32>,
}

fn run_device(
    cfg: &FederationConfig,
    class: &DeviceClass,
    device: &Device,
    model: &ModelParams<f32>,
    round: usize,
    full_bytes: u64,
) -> Result<(ContributionRecord, Option<UpdateMessage>)> {
    let mut rng = stream_rng(cfg.seed, round as u64, device.id as u64);
    let constraints = RoundConstraints { deadline: cfg.deadline, upload_budget: class.budget.draw(full_bytes, &mut rng) };
    let noise = match cfg.straggler_sigma {
        Some(s) if s > 0.0 => LogNormal::new(0.0, s).map_err(|e| crate::Error::Input(e.to_string()))?.sample(&mut rng),
        _ => 1.0,
    };
    let Some(config) = select_configuration(&class.cost_table, &constraints, &mut rng) else {
        let record = ContributionRecord {
            round,
            client_id: device.id,
            config: None,
            upload_bytes: 0,
            elapsed_seconds: 0.0,
            accepted: false,
        };
        return Ok((record, None));
    };
    let ctx = LocalContext { client_id: device.id, topology: &cfg.topology, profile: &class.profile, hyper: &cfg.hyper };
    let mut update = local_train_round(&ctx, model, &config, &device.data, &mut rng)?;
    update.elapsed_seconds *= noise;
    let accepted = update.elapsed_seconds <= cfg.deadline;
    let record = ContributionRecord {
        round,
        client_id: device.id,
        config: Some(config),
        upload_bytes: update.upload_bytes,
        elapsed_seconds: update.elapsed_seconds,
        accepted,
    };
    Ok((record, accepted.then_some(update)))
}

/// Runs `cfg.rounds` synchronous rounds starting from `model` and evaluates
/// the global model on `test_set` after each one.
pub fn run_federation(
    cfg: &FederationConfig,
    classes: &[DeviceClass],
    devices: &[Device],
    mut model: ModelParams<f32>,
    test_set: &Dataset,
) -> Result<FederationOutcome> {
    model.check_against(&cfg.topology)?;
    if let Some(d) = devices.iter().find(|d| d.class >= classes.len()) {
        return input_err(format!("device {} refers to unknown class {}", d.id, d.class));
    }
    if devices.iter().enumerate().any(|(i, d)| d.id != i) {
        return input_err("device ids must be 0..n in order");
    }
    let full_bytes = update_size(&cfg.topology, &Configuration::full(cfg.topology.n_blocks()))?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut contributions = Vec::new();
    for round in 1..=cfg.rounds {
        let selected =
            select_devices(devices.len(), cfg.participants, &mut stream_rng(cfg.seed, round as u64, SELECTION_STREAM))?;
        let results = selected
            .par_iter()
            .map(|&id| run_device(cfg, &classes[devices[id].class], &devices[id], &model, round, full_bytes))
            .collect::<Result<Vec<_>>>()?;
        let mut updates = Vec::new();
        let mut uploaded = 0u64;
        for (record, update) in results {
            uploaded += record.upload_bytes;
            contributions.push(record);
            updates.extend(update);
        }
        model = partial_aggregate(&model, &updates)?;
        metrics.push(MetricsRecord {
            round,
            accuracy: evaluate_accuracy(&cfg.topology, &model, test_set)?,
            mean_upload_bytes: if selected.is_empty() { 0.0 } else { uploaded as f64 / selected.len() as f64 },
            accepted_updates: updates.len(),
        });
    }
    Ok(FederationOutcome { metrics, contributions, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::nn::{ConvParams, FcParams};
    use std::collections::BTreeMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_block(v: f32) -> BlockParams<f32> {
        BlockParams::Output(FcParams { weight: Tensor::new(vec![1, 1], vec![v]).unwrap(), bias: Tensor::zeros(&[1]) })
    }

    fn scalar_model(vals: &[f32]) -> ModelParams<f32> {
        ModelParams { blocks: vals.iter().map(|&v| scalar_block(v)).collect() }
    }

    fn value(m: &ModelParams<f32>, i: usize) -> f32 {
        m.blocks[i].tensors()[0].data()[0]
    }

    fn update(id: usize, count: usize, blocks: &[(usize, f32)]) -> UpdateMessage {
        UpdateMessage {
            client_id: id,
            config: Configuration::empty(),
            blocks: blocks.iter().map(|&(i, v)| (i, scalar_block(v))).collect::<BTreeMap<_, _>>(),
            data_count: count,
            upload_bytes: 0,
            elapsed_seconds: 0.0,
            losses: vec![],
        }
    }

    #[test]
    fn selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_devices(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        let ten = select_devices(100, 10, &mut rng).unwrap();
        assert_eq!(ten.len(), 10);
        assert!(ten.windows(2).all(|w| w[0] < w[1]));
        assert!(select_devices(3, 4, &mut rng).is_err());
        let a = select_devices(100, 10, &mut stream_rng(7, 3, SELECTION_STREAM)).unwrap();
        assert_eq!(a, select_devices(100, 10, &mut stream_rng(7, 3, SELECTION_STREAM)).unwrap());
    }

    #[test]
    fn fedavg_cases() {
        let one = scalar_model(&[1.5]);
        assert_eq!(fedavg_aggregate(&[(one.clone(), 7)]).unwrap(), one);
        let plain = fedavg_aggregate(&[(scalar_model(&[1.0]), 5), (scalar_model(&[2.0]), 5), (scalar_model(&[3.0]), 5)]);
        assert_eq!(value(&plain.unwrap(), 0), 2.0);
        let weighted = fedavg_aggregate(&[(scalar_model(&[0.0]), 1), (scalar_model(&[4.0]), 3)]).unwrap();
        assert_eq!(value(&weighted, 0), 3.0);
        assert!(fedavg_aggregate(&[]).is_err());
    }

    #[test]
    fn mixed_range_example() {
        let prev = scalar_model(&[9.0, 0.0, 0.0]);
        let ups = [update(1, 500, &[(1, 2.0)]), update(2, 500, &[(1, 4.0), (2, 6.0)])];
        let next = partial_aggregate(&prev, &ups).unwrap();
        assert_eq!([value(&next, 0), value(&next, 1), value(&next, 2)], [9.0, 3.0, 6.0]);
        assert_eq!(partial_aggregate(&prev, &[]).unwrap(), prev);
    }

    #[test]
    fn order_independent_and_rejects_bad_shapes() {
        let prev = scalar_model(&[0.0, 0.0]);
        let a = [update(3, 10, &[(0, 0.1)]), update(1, 30, &[(0, 0.7), (1, 0.2)])];
        let b = [a[1].clone(), a[0].clone()];
        assert_eq!(partial_aggregate(&prev, &a).unwrap(), partial_aggregate(&prev, &b).unwrap());
        let mut bad = update(1, 1, &[]);
        bad.blocks.insert(
            0,
            BlockParams::Conv(ConvParams { weight: Tensor::zeros(&[1, 1, 1, 1]), bias: Tensor::zeros(&[1]), bn: None }),
        );
        assert!(partial_aggregate(&prev, &[bad]).is_err());
        assert!(partial_aggregate(&prev, &[update(1, 1, &[(5, 1.0)])]).is_err());
    }

    #[test]
    fn budgets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(UploadBudget::FractionOfModel(0.25).draw(400, &mut rng), 100.0);
        let r = UploadBudget::RandomFraction(0.2, 0.6).draw(100, &mut rng);
        assert!((20.0..=60.0).contains(&r));
        assert!(UploadBudget::RandomFraction(0.5, 0.1).validate().is_err());
    }
}
