//! Device-side logic: the contiguous configuration space, constraint-driven
//! configuration choice and one round of local training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{estimate_time, update_size, CostHyper, CostTable, DeviceProfile};
use crate::data::Dataset;
use crate::error::{input_err, Result};
use crate::nn::{
    model_backward, model_forward, sgd_update_block, softmax_cross_entropy, update_running_stats, BlockParams,
    ModelParams, ModelTopology, Phase, BN_MOMENTUM,
};
use crate::quant::{apply_configuration, calibrate_round, ApplyOptions, Configuration};

/// Per-round limits of one device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConstraints {
    /// Deadline `T` in seconds.
    pub deadline: f64,
    /// Upload budget `S` in bytes; may be infinite.
    pub upload_budget: f64,
}

impl RoundConstraints {
    pub fn unconstrained() -> Self {
        Self { deadline: f64::INFINITY, upload_budget: f64::INFINITY }
    }
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub batches_per_round: usize,
    pub calibration_batch_size: usize,
    /// Execute frozen conv blocks in 8-bit.
    pub quantize: bool,
}

impl TrainHyper {
    pub fn cost_hyper(&self) -> CostHyper {
        CostHyper {
            batch_size: self.batch_size,
            batches_per_round: self.batches_per_round,
            calibration_batch_size: self.calibration_batch_size,
        }
    }
}

/// What a device uploads after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub client_id: usize,
    pub config: Configuration,
    /// Trained blocks only, running statistics included.
    pub blocks: BTreeMap<usize, BlockParams<f32>>,
    pub data_count: usize,
    pub upload_bytes: u64,
    pub elapsed_seconds: f64,
    /// Training loss of every local step.
    pub losses: Vec<f32>,
}

/// Independent random stream for `(seed, round, stream)`, so that results
/// do not depend on the order in which devices are simulated.
pub fn stream_rng(seed: u64, round: u64, stream: u64) -> ChaCha8Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ round) ^ stream))
}

/// All non-empty contiguous ranges, ordered by first then last block.
pub fn enumerate_contiguous(n_blocks: usize) -> Result<Vec<Configuration>> {
    if n_blocks < 1 {
        return input_err("a network has at least one block");
    }
    Ok((0..n_blocks)
        .flat_map(|l| (l..n_blocks).map(move |u| Configuration::range(l, u).expect("l <= u")))
        .collect())
}

/// Configurations meeting both the deadline and the upload budget.
pub fn feasible_configurations(table: &CostTable, constraints: &RoundConstraints) -> Vec<Configuration> {
    table
        .entries
        .iter()
        .filter(|e| e.time_seconds <= constraints.deadline && e.size_bytes as f64 <= constraints.upload_budget)
        .map(|e| e.config)
        .collect()
}

/// Members not strictly contained in another member.
pub fn maximal_configurations(feasible: &[Configuration]) -> Vec<Configuration> {
    feasible.iter().filter(|a| !feasible.iter().any(|b| a.is_strict_subset_of(b))).copied().collect()
}

/// Uniform choice among the maximal feasible configurations, or `None` when
/// nothing is feasible and the device sits the round out.
pub fn select_configuration(
    table: &CostTable,
    constraints: &RoundConstraints,
    rng: &mut impl Rng,
) -> Option<Configuration> {
    let maximal = maximal_configurations(&feasible_configurations(table, constraints));
    if maximal.is_empty() {
        return None;
    }
    Some(maximal[rng.random_range(0..maximal.len())])
}

/// Fixed inputs of one device's local round.
#[derive(Debug, Clone, Copy)]
pub struct LocalContext<'a> {
    pub client_id: usize,
    pub topology: &'a ModelTopology,
    pub profile: &'a DeviceProfile,
    pub hyper: &'a TrainHyper,
}

/// Endless sequence of mini-batches over reshuffled passes of the data.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize) -> Self {
        Self { order: (0..n).collect(), pos: n, batch: batch.min(n) }
    }

    fn next(&mut self, rng: &mut impl Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

/// Calibrates, partitions and trains the configured blocks with plain SGD.
pub fn local_train_round(
    ctx: &LocalContext<'_>,
    w: &ModelParams<f32>,
    config: &Configuration,
    data: &Dataset,
    rng: &mut impl Rng,
) -> Result<UpdateMessage> {
    let hyper = ctx.hyper;
    if config.is_empty() {
        return input_err("local training needs at least one trained block");
    }
    if data.is_empty() {
        return input_err(format!("device {} has no local data", ctx.client_id));
    }
    if hyper.batch_size == 0 || hyper.calibration_batch_size == 0 {
        return input_err("batch sizes must be positive");
    }

    let mut cal_rows: Vec<usize> = (0..data.len()).collect();
    cal_rows.shuffle(rng);
    cal_rows.truncate(hyper.calibration_batch_size.min(data.len()));
    let cal = data.subset(&cal_rows)?;
    let stats = calibrate_round(ctx.topology, w, config, &cal.images, &cal.labels)?;

    let mut sampler = BatchSampler::new(data.len(), hyper.batch_size);
    let options = ApplyOptions { quantize: hyper.quantize, train_batch_size: sampler.batch };
    let mut part = apply_configuration(ctx.topology, w, config, &stats, options)?;
    let momentum = BN_MOMENTUM as f32;
    let mut losses = Vec::with_capacity(hyper.batches_per_round);
    for _ in 0..hyper.batches_per_round {
        let batch = data.subset(sampler.next(rng))?;
        let (loss, grads, cache) = {
            let plan = part.plan();
            let (logits, cache) = model_forward(ctx.topology, &plan, &batch.images, Phase::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
            (loss, model_backward(ctx.topology, &plan, &cache, &grad)?, cache)
        };
        for (i, g) in &grads.blocks {
            let params = part.w_train.get_mut(i).expect("gradients exist only for trained blocks");
            sgd_update_block(params, g, hyper.learning_rate)?;
            update_running_stats(params, &cache, *i, momentum);
        }
        losses.push(loss);
    }

    let profile = if hyper.quantize { ctx.profile.clone() } else { ctx.profile.without_quantization() };
    Ok(UpdateMessage {
        client_id: ctx.client_id,
        config: *config,
        blocks: part.w_train,
        data_count: data.len(),
        upload_bytes: update_size(ctx.topology, config)?,
        elapsed_seconds: estimate_time(&profile, ctx.topology, config, &hyper.cost_hyper())?,
        losses,
    })
}
