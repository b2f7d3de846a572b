//! Optimisation loop: six training modes, the user-to-user auxiliary task,
//! sparse optimisers, encoder-cost counters and synchronous data-parallel
//! workers with private queues.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{
    build_instances, empirical_item_distribution, Dataset, Instance, ItemCatalog, ItemId,
};
use crate::encoder::{
    batch_backward, encode_user, EncodeCounts, EncoderConfig, ForwardPass, Gradients, Parameters,
};
use crate::losses::{
    contrastive_loss, full_softmax_loss, ipw_loss, sampled_softmax_loss, CandidateLogits,
};
use crate::retrieval::{hit_rate_at_k, top_k, ItemIndex};
use crate::samplers::{
    in_batch_candidates, make_proposal, sample_negatives, Candidate, CandidateSet, FifoQueue,
    Proposal, ProposalKind, QueueMode, Target,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainMode {
    FullMle,
    SampledSoftmax,
    ClrecInBatch,
    ClrecQueue,
    ClrecQueueCached,
    Ipw,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::FullMle,
        TrainMode::SampledSoftmax,
        TrainMode::ClrecInBatch,
        TrainMode::ClrecQueue,
        TrainMode::ClrecQueueCached,
        TrainMode::Ipw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::FullMle => "full_mle",
            TrainMode::SampledSoftmax => "sampled_softmax",
            TrainMode::ClrecInBatch => "clrec_inbatch",
            TrainMode::ClrecQueue => "clrec_queue",
            TrainMode::ClrecQueueCached => "clrec_queue_cached",
            TrainMode::Ipw => "ipw",
        }
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, TrainMode::ClrecQueue | TrainMode::ClrecQueueCached)
    }

    /// Modes that need a proposal distribution.
    pub fn uses_proposal(self) -> bool {
        matches!(self, TrainMode::SampledSoftmax | TrainMode::Ipw)
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::InvalidConfig(alloc::format!(
                "unknown optimizer {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adagrad,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// User-to-user auxiliary task: a user's earlier clicks predict the same
/// user's later clicks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct U2uConfig {
    pub enabled: bool,
    pub weight: f64,
    pub min_prefix: usize,
    pub min_suffix: usize,
    /// Capacity of the queue of cached suffix vectors.
    pub queue_capacity: usize,
}

impl Default for U2uConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            weight: 0.3,
            min_prefix: 1,
            min_suffix: 1,
            queue_capacity: 2560,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub queue_capacity: usize,
    /// Explicit negatives per instance in sampled-softmax mode.
    pub negatives: usize,
    pub epochs: usize,
    pub max_prefix_len: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub u2u: U2uConfig,
    pub clip_floor: f64,
    /// Proposal for sampled softmax, also the propensity model for IPW.
    pub proposal: ProposalKind,
    pub encoder: EncoderConfig,
    /// Cut-off of the per-epoch validation hit rate.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::ClrecQueueCached,
            batch_size: 256,
            queue_capacity: 2560,
            negatives: 256,
            epochs: 5,
            max_prefix_len: 20,
            optimizer: OptimizerConfig::default(),
            seed: 42,
            u2u: U2uConfig::default(),
            clip_floor: 0.01,
            proposal: ProposalKind::Unigram,
            encoder: EncoderConfig::default(),
            eval_k: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.mode.uses_queue() && self.batch_size > self.queue_capacity {
            return bad("batch_size must not exceed queue_capacity");
        }
        if self.mode == TrainMode::SampledSoftmax && self.negatives == 0 {
            return bad("sampled_softmax needs at least one negative");
        }
        if !(0.0..=1.0).contains(&self.clip_floor) {
            return bad("clip_floor must lie in [0, 1]");
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1)
            || !(0.0..1.0).contains(&self.optimizer.beta2)
        {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.optimizer.eps > 0.0) {
            return bad("eps must be positive");
        }
        if let ProposalKind::Popularity { alpha } = self.proposal {
            if !alpha.is_finite() {
                return bad("sampler alpha must be finite");
            }
        }
        if self.u2u.enabled {
            if !(self.u2u.weight >= 0.0 && self.u2u.weight.is_finite()) {
                return bad("u2u weight must be non-negative");
            }
            if self.u2u.min_prefix == 0 || self.u2u.min_suffix == 0 {
                return bad("u2u min_prefix and min_suffix must be positive");
            }
            if self.batch_size > self.u2u.queue_capacity {
                return bad("batch_size must not exceed the u2u queue capacity");
            }
        }
        if self.eval_k == 0 {
            return bad("eval_k must be positive");
        }
        Ok(())
    }
}

/// Simulated encoder and traffic cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounters {
    /// Distinct items run through the item tower.
    pub item_encoder_forwards: u64,
    /// Sequences run through the user tower.
    pub user_encoder_forwards: u64,
    /// Feature rows of candidate items outside the worker's own positives,
    /// `features × d × 8` bytes each. Cached candidates cost nothing.
    pub candidate_bytes_moved: u64,
}

impl StepCounters {
    pub fn add(&mut self, other: &StepCounters) {
        self.item_encoder_forwards += other.item_encoder_forwards;
        self.user_encoder_forwards += other.user_encoder_forwards;
        self.candidate_bytes_moved += other.candidate_bytes_moved;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
    /// Cumulative counters at the end of the epoch.
    pub counters: StepCounters,
    /// Hit rate at `eval_k` on the validation instances, if any.
    pub valid_hit_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// How a batch's logits become a loss.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    FullSoftmax,
    SampledSoftmax {
        logq: &'a [Vec<f64>],
    },
    Contrastive,
    /// Softmax over the candidates weighted by `1 / max(q, clip_floor)`.
    Ipw {
        propensities: &'a [f64],
        clip_floor: f64,
    },
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Unscaled sum of per-instance losses.
    pub loss_sum: f64,
    /// Gradient of `scale × loss_sum`.
    pub gradients: Gradients,
    pub counts: EncodeCounts,
}

/// Scores `queries` against `sets`, applies `objective` and back-propagates.
pub fn batch_objective(
    fwd: ForwardPass<'_>,
    queries: &[usize],
    sets: &[CandidateSet],
    objective: &Objective<'_>,
    scale: f64,
) -> Result<BatchLoss> {
    let (logits, tape) = fwd.score(queries, sets)?;
    let mut loss_sum = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    for (b, (z, set)) in logits.iter().zip(sets).enumerate() {
        let c = CandidateLogits {
            logits: z,
            pos_index: set.pos_index,
            logq: None,
        };
        let (value, mut g) = match objective {
            Objective::FullSoftmax => {
                let out = full_softmax_loss(z, set.pos_index)?;
                (out.value, out.dlogits)
            }
            Objective::Contrastive => {
                let out = contrastive_loss(c)?;
                (out.value, out.dlogits)
            }
            Objective::SampledSoftmax { logq } => {
                let lq = logq.get(b).ok_or(Error::MissingLogq)?;
                let out = sampled_softmax_loss(CandidateLogits {
                    logq: Some(lq),
                    ..c
                })?;
                (out.value, out.dlogits)
            }
            Objective::Ipw {
                propensities,
                clip_floor,
            } => {
                let out = full_softmax_loss(z, set.pos_index)?;
                let q = *propensities.get(b).ok_or(Error::ShapeMismatch)?;
                let term = ipw_loss(out.value, q, *clip_floor)?;
                let mut g = out.dlogits;
                g.iter_mut().for_each(|x| *x *= term.weight);
                (term.value, g)
            }
        };
        g.iter_mut().for_each(|x| *x *= scale);
        loss_sum += value;
        dlogits.push(g);
    }
    let gradients = batch_backward(&tape, &dlogits)?;
    Ok(BatchLoss {
        loss_sum,
        gradients,
        counts: tape.counts(),
    })
}

/// Read-only inputs shared by every worker during one step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub catalog: &'a ItemCatalog,
    pub params: &'a Parameters,
    pub proposal: Option<&'a Proposal>,
    /// Full training record of every user, for the auxiliary task.
    pub histories: &'a BTreeMap<u32, Vec<ItemId>>,
    /// Instances in the global batch; losses are averaged over it.
    pub global_batch: usize,
    pub step: u64,
}

/// State private to one worker.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub queue: Option<FifoQueue>,
    pub u2u_queue: Option<FifoQueue>,
    pub rng: crate::Rng,
    pub u2u_rng: crate::Rng,
}

const STREAM_WORKER: u64 = 1 << 32;
const STREAM_U2U: u64 = 2 << 32;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> crate::Rng {
    let mut rng = crate::seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

impl WorkerState {
    pub fn new(config: &TrainConfig, worker: usize) -> Result<Self> {
        let queue = match config.mode {
            TrainMode::ClrecQueue => Some(FifoQueue::new(config.queue_capacity, QueueMode::Raw)?),
            TrainMode::ClrecQueueCached => {
                Some(FifoQueue::new(config.queue_capacity, QueueMode::Cached)?)
            }
            _ => None,
        };
        let u2u_queue = if config.u2u.enabled {
            Some(FifoQueue::new(
                config.u2u.queue_capacity,
                QueueMode::Cached,
            )?)
        } else {
            None
        };
        Ok(Self {
            queue,
            u2u_queue,
            rng: stream_rng(config.seed, STREAM_WORKER + worker as u64),
            u2u_rng: stream_rng(config.seed, STREAM_U2U + worker as u64),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    /// Unscaled sum of per-instance losses, auxiliary task included.
    pub loss_sum: f64,
    /// Gradient of this worker's share of the global mean loss.
    pub gradients: Gradients,
    pub counters: StepCounters,
}

fn guard(e: Error, ctx: &StepContext<'_>) -> Error {
    match e {
        Error::NonFinite(_) | Error::ZeroVector => Error::NonFiniteLoss {
            step: ctx.step,
            mode: ctx.config.mode.name(),
        },
        e => e,
    }
}

fn candidate_bytes(
    catalog: &ItemCatalog,
    dim: usize,
    sets: &[CandidateSet],
    own: &[ItemId],
) -> Result<u64> {
    let own: BTreeSet<ItemId> = own.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut last: Option<&Arc<[Candidate]>> = None;
    for set in sets {
        if last.is_some_and(|l| Arc::ptr_eq(l, &set.candidates)) {
            continue;
        }
        last = Some(&set.candidates);
        for c in set.candidates.iter() {
            if let (None, Target::Item(id)) = (&c.cached, &c.target) {
                if !own.contains(id) {
                    seen.insert(*id);
                }
            }
        }
    }
    let mut bytes = 0u64;
    for id in seen {
        bytes += (catalog.item(id)?.features.len() * dim * 8) as u64;
    }
    Ok(bytes)
}

/// One user-to-item step for a worker's shard. Queue modes enqueue the
/// shard's positives before reading the queue.
pub fn train_step(
    ctx: &StepContext<'_>,
    batch: &[&Instance],
    state: &mut WorkerState,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Ok(StepOutput::default());
    }
    let cfg = ctx.config;
    let catalog = ctx.catalog;
    let positives: Vec<ItemId> = batch.iter().map(|i| i.target).collect();
    let mut fwd = ForwardPass::new(ctx.params, catalog);
    let queries = batch
        .iter()
        .map(|i| fwd.sequence(i.prefix.items()))
        .collect::<Result<Vec<_>>>()?;
    let proposal = || {
        ctx.proposal
            .ok_or_else(|| Error::InvalidConfig("mode needs a proposal".to_string()))
    };
    let mut logq = Vec::new();
    let mut propensities = Vec::new();
    let sets = match cfg.mode {
        TrainMode::FullMle | TrainMode::Ipw => {
            let all: Arc<[Candidate]> = (0..catalog.len() as u32)
                .map(|i| Candidate::live(ItemId(i)))
                .collect();
            if cfg.mode == TrainMode::Ipw {
                let p = proposal()?;
                propensities = positives.iter().map(|&y| p.prob(y)).collect();
            }
            positives
                .iter()
                .map(|y| CandidateSet::new(Arc::clone(&all), y.index()))
                .collect::<Result<Vec<_>>>()?
        }
        TrainMode::SampledSoftmax => {
            let p = proposal()?;
            let mut sets = Vec::with_capacity(batch.len());
            for &y in &positives {
                let mut ids = vec![y];
                ids.extend(sample_negatives(p, cfg.negatives, &mut state.rng));
                logq.push(ids.iter().map(|&i| p.log_prob(i)).collect::<Vec<_>>());
                sets.push(CandidateSet::new(
                    ids.into_iter().map(Candidate::live).collect(),
                    0,
                )?);
            }
            sets
        }
        TrainMode::ClrecInBatch => in_batch_candidates(&positives),
        TrainMode::ClrecQueue | TrainMode::ClrecQueueCached => {
            let queue = state.queue.as_mut().ok_or(Error::InvalidConfig(
                "queue mode without a queue".to_string(),
            ))?;
            let targets: Vec<Target> = positives.iter().map(|&y| Target::Item(y)).collect();
            if queue.mode() == QueueMode::Cached {
                let vectors = positives
                    .iter()
                    .map(|&y| fwd.item(y).map(|s| Arc::from(fwd.item_vector(s))))
                    .collect::<Result<Vec<Arc<[f64]>>>>()?;
                queue.enqueue_batch(&targets, Some(&vectors))?;
            } else {
                queue.enqueue_batch(&targets, None)?;
            }
            queue.queue_candidates(batch.len())?
        }
    };
    let objective = match cfg.mode {
        TrainMode::FullMle => Objective::FullSoftmax,
        TrainMode::SampledSoftmax => Objective::SampledSoftmax { logq: &logq },
        TrainMode::Ipw => Objective::Ipw {
            propensities: &propensities,
            clip_floor: cfg.clip_floor,
        },
        _ => Objective::Contrastive,
    };
    let bytes = candidate_bytes(catalog, ctx.params.dim(), &sets, &positives)?;
    let scale = 1.0 / ctx.global_batch as f64;
    let out =
        batch_objective(fwd, &queries, &sets, &objective, scale).map_err(|e| guard(e, ctx))?;
    if !out.loss_sum.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: ctx.step,
            mode: cfg.mode.name(),
        });
    }
    Ok(StepOutput {
        loss_sum: out.loss_sum,
        gradients: out.gradients,
        counters: StepCounters {
            item_encoder_forwards: out.counts.item_tower as u64,
            user_encoder_forwards: out.counts.sequences as u64,
            candidate_bytes_moved: bytes,
        },
    })
}

/// Splits `history` at a uniformly drawn point in `[min_prefix, len - min_suffix]`.
pub fn split_history<'h>(
    history: &'h [ItemId],
    min_prefix: usize,
    min_suffix: usize,
    rng: &mut crate::Rng,
) -> Option<(&'h [ItemId], &'h [ItemId])> {
    let n = history.len();
    if min_prefix == 0 || min_suffix == 0 || n < min_prefix + min_suffix {
        return None;
    }
    let s = rng.random_range(min_prefix..=n - min_suffix);
    Some(history.split_at(s))
}

/// Auxiliary step: each shard user's earlier clicks are scored against
/// their later clicks, both encoded by the user tower, with a queue of
/// cached suffix vectors as negatives. The loss is weighted by `λ`.
pub fn u2u_step(
    ctx: &StepContext<'_>,
    batch: &[&Instance],
    state: &mut WorkerState,
) -> Result<StepOutput> {
    let cfg = ctx.config;
    let Some(queue) = state.u2u_queue.as_mut() else {
        return Ok(StepOutput::default());
    };
    let mut prefixes: Vec<&[ItemId]> = Vec::new();
    let mut suffixes: Vec<Arc<[ItemId]>> = Vec::new();
    for inst in batch {
        let Some(history) = ctx.histories.get(&inst.user) else {
            continue;
        };
        if let Some((p, s)) = split_history(
            history,
            cfg.u2u.min_prefix,
            cfg.u2u.min_suffix,
            &mut state.u2u_rng,
        ) {
            prefixes.push(&p[p.len().saturating_sub(cfg.max_prefix_len.max(1))..]);
            suffixes.push(Arc::from(s));
        }
    }
    if prefixes.is_empty() {
        return Ok(StepOutput::default());
    }
    let mut fwd = ForwardPass::new(ctx.params, ctx.catalog);
    let queries = prefixes
        .iter()
        .map(|p| fwd.sequence(p))
        .collect::<Result<Vec<_>>>()?;
    let vectors = suffixes
        .iter()
        .map(|s| {
            fwd.shared_sequence(s)
                .map(|slot| Arc::from(fwd.sequence_vector(slot)))
        })
        .collect::<Result<Vec<Arc<[f64]>>>>()?;
    let targets: Vec<Target> = suffixes.iter().cloned().map(Target::Sequence).collect();
    queue.enqueue_batch(&targets, Some(&vectors))?;
    let sets = queue.queue_candidates(targets.len())?;
    let weight = cfg.u2u.weight;
    let scale = weight / ctx.global_batch as f64;
    let out = batch_objective(fwd, &queries, &sets, &Objective::Contrastive, scale)
        .map_err(|e| guard(e, ctx))?;
    Ok(StepOutput {
        loss_sum: weight * out.loss_sum,
        gradients: out.gradients,
        counters: StepCounters {
            item_encoder_forwards: out.counts.item_tower as u64,
            user_encoder_forwards: out.counts.sequences as u64,
            candidate_bytes_moved: 0,
        },
    })
}

/// Lazily updated optimiser state: only rows with a gradient move.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &Parameters) -> Self {
        let zeros = |on: bool| -> Vec<Vec<f64>> {
            if on {
                params.tables().iter().map(|t| vec![0.0; t.len()]).collect()
            } else {
                Vec::new()
            }
        };
        Self {
            config,
            first: zeros(config.kind == OptimizerKind::Adam),
            second: zeros(config.kind != OptimizerKind::Sgd),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One in-place update, rows visited in key order.
pub fn apply_gradients(state: &mut OptimizerState, params: &mut Parameters, grads: &Gradients) {
    state.steps += 1;
    let c = state.config;
    let lr = c.learning_rate;
    let d = params.dim();
    let t = state.steps as f64;
    let (bc1, bc2) = (
        1.0 - crate::math::pow(c.beta1, t),
        1.0 - crate::math::pow(c.beta2, t),
    );
    for (key, g) in grads.iter() {
        let off = key.row as usize * d;
        let table = key.table as usize;
        let row = params.row_mut(key);
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in row.iter_mut().zip(g) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adagrad => {
                let acc = &mut state.second[table][off..off + d];
                for ((p, g), a) in row.iter_mut().zip(g).zip(acc) {
                    *a += g * g;
                    *p -= lr * g / (crate::math::sqrt(*a) + c.eps);
                }
            }
            OptimizerKind::Adam => {
                let m = &mut state.first[table][off..off + d];
                let v = &mut state.second[table][off..off + d];
                for (((p, g), m), v) in row.iter_mut().zip(g).zip(m).zip(v) {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= lr * (*m / bc1) / (crate::math::sqrt(*v / bc2) + c.eps);
                }
            }
        }
    }
}

/// Runs `f` once per shard and returns the results in shard order.
pub trait ShardExecutor {
    fn map_shards<T, R, F>(&self, shards: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync;
}

/// Runs shards one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ShardExecutor for Sequential {
    fn map_shards<T, R, F>(&self, shards: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync,
    {
        shards.iter_mut().map(f).collect()
    }
}

/// Hit rate at `k` of next-click prediction over `instances`.
/// Prefixes are cut to their `max_prefix_len` most recent clicks.
pub fn evaluate_hit_rate(
    params: &Parameters,
    catalog: &ItemCatalog,
    instances: &[Instance],
    k: usize,
    max_prefix_len: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let index = ItemIndex::build(params, catalog)?;
    let mut hits = 0.0;
    for inst in instances {
        let u = encode_user(
            params,
            catalog,
            inst.prefix.most_recent(max_prefix_len).items(),
        )?;
        hits += hit_rate_at_k(&top_k(&u, &index, k), inst.target, k);
    }
    Ok(hits / instances.len() as f64)
}

/// Shuffled instance order for one epoch.
pub fn epoch_order(num_instances: usize, rng: &mut crate::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_instances).collect();
    order.shuffle(rng);
    order
}

/// Contiguous shard boundaries of a batch of `len` over `workers`.
pub fn shard_ranges(len: usize, workers: usize) -> Vec<core::ops::Range<usize>> {
    let workers = workers.max(1);
    let base = len / workers;
    let extra = len % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let n = base + usize::from(w < extra);
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Everything derived from the dataset once before the first step.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub instances: Vec<Instance>,
    pub histories: BTreeMap<u32, Vec<ItemId>>,
    pub proposal: Option<Proposal>,
}

impl TrainingData {
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let instances = build_instances(dataset, config.max_prefix_len);
        if instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let histories = dataset
            .users()
            .map(|(u, clicks)| (u, clicks.iter().map(|r| r.item).collect()))
            .collect();
        let proposal = if config.mode.uses_proposal() {
            Some(make_proposal(
                config.proposal,
                &empirical_item_distribution(dataset)?,
            )?)
        } else {
            None
        };
        Ok(Self {
            instances,
            histories,
            proposal,
        })
    }
}

/// Single-worker training.
pub fn train(
    config: &TrainConfig,
    catalog: &ItemCatalog,
    dataset: &Dataset,
    valid: &[Instance],
) -> Result<(Parameters, TrainHistory)> {
    run_workers(config, catalog, dataset, valid, 1, &Sequential)
}

/// Synchronous data-parallel training. Each global batch is cut into
/// contiguous shards, one per worker; shard gradients are summed in worker
/// order and a single optimiser step is applied.
pub fn run_workers<E: ShardExecutor>(
    config: &TrainConfig,
    catalog: &ItemCatalog,
    dataset: &Dataset,
    valid: &[Instance],
    num_workers: usize,
    executor: &E,
) -> Result<(Parameters, TrainHistory)> {
    config.validate()?;
    if num_workers == 0 {
        return Err(Error::InvalidConfig("at least one worker".to_string()));
    }
    if dataset.num_items() != catalog.len() {
        return Err(Error::DimensionMismatch {
            expected: catalog.len(),
            actual: dataset.num_items(),
        });
    }
    let data = TrainingData::new(config, dataset)?;
    let mut params = Parameters::init(
        config.encoder,
        &catalog.field_vocab_sizes(),
        &mut stream_rng(config.seed, STREAM_INIT),
    )?;
    let mut optimizer = OptimizerState::new(config.optimizer, &params);
    let mut workers = (0..num_workers)
        .map(|w| WorkerState::new(config, w))
        .collect::<Result<Vec<_>>>()?;
    let mut shuffle = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut history = TrainHistory::default();
    let mut totals = StepCounters::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = epoch_order(data.instances.len(), &mut shuffle);
        let mut loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &data.instances[i]).collect();
            let ctx = StepContext {
                config,
                catalog,
                params: &params,
                proposal: data.proposal.as_ref(),
                histories: &data.histories,
                global_batch: batch.len(),
                step,
            };
            let mut jobs: Vec<(&mut WorkerState, &[&Instance])> = workers
                .iter_mut()
                .zip(shard_ranges(batch.len(), num_workers))
                .map(|(w, r)| (w, &batch[r]))
                .collect();
            let results = executor.map_shards(&mut jobs, |(state, shard)| -> Result<StepOutput> {
                let mut out = train_step(&ctx, shard, state)?;
                if config.u2u.enabled {
                    let aux = u2u_step(&ctx, shard, state)?;
                    out.loss_sum += aux.loss_sum;
                    out.gradients.merge(&aux.gradients);
                    out.counters.add(&aux.counters);
                }
                Ok(out)
            });
            let mut grads = Gradients::new();
            let mut step_loss = 0.0;
            for r in results {
                let r = r?;
                step_loss += r.loss_sum;
                grads.merge(&r.gradients);
                totals.add(&r.counters);
            }
            if !step_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    mode: config.mode.name(),
                });
            }
            apply_gradients(&mut optimizer, &mut params, &grads);
            loss += step_loss;
            steps += 1;
            step += 1;
        }
        let valid_hit_rate = if valid.is_empty() {
            None
        } else {
            Some(evaluate_hit_rate(
                &params,
                catalog,
                valid,
                config.eval_k,
                config.max_prefix_len,
            )?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss / data.instances.len() as f64,
            steps,
            counters: totals,
            valid_hit_rate,
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        simulate_biased_logs, CatalogBuilder, ClickRecord, ClickSequence, WorldConfig,
    };

    fn catalog(n: usize) -> ItemCatalog {
        let mut b = CatalogBuilder::new();
        for i in 0..n {
            b.push(&alloc::format!("i{i}"), &[]).unwrap();
        }
        b.finish().unwrap()
    }

    fn instance(prefix: &[u32], target: u32) -> Instance {
        Instance {
            user: 0,
            prefix: ClickSequence(prefix.iter().map(|&i| ItemId(i)).collect()),
            target: ItemId(target),
        }
    }

    fn context<'a>(
        cfg: &'a TrainConfig,
        cat: &'a ItemCatalog,
        params: &'a Parameters,
        histories: &'a BTreeMap<u32, Vec<ItemId>>,
        proposal: Option<&'a Proposal>,
        b: usize,
    ) -> StepContext<'a> {
        StepContext {
            config: cfg,
            catalog: cat,
            params,
            proposal,
            histories,
            global_batch: b,
            step: 0,
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("mle".parse::<TrainMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            batch_size: 300,
            queue_capacity: 200,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            mode: TrainMode::ClrecInBatch,
            batch_size: 300,
            queue_capacity: 200,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn in_batch_single_instance_has_zero_loss() {
        let cat = catalog(5);
        let cfg = TrainConfig {
            mode: TrainMode::ClrecInBatch,
            ..TrainConfig::default()
        };
        let params = Parameters::init(
            cfg.encoder,
            &cat.field_vocab_sizes(),
            &mut crate::seeded_rng(1),
        )
        .unwrap();
        let h = BTreeMap::new();
        let ctx = context(&cfg, &cat, &params, &h, None, 1);
        let inst = instance(&[1, 2], 3);
        let mut state = WorkerState::new(&cfg, 0).unwrap();
        let out = train_step(&ctx, &[&inst], &mut state).unwrap();
        assert_eq!(out.loss_sum, 0.0);
        assert!(out.gradients.is_empty());
    }

    #[test]
    fn cached_queue_encodes_positives_only() {
        let cat = catalog(200);
        let cfg = TrainConfig {
            batch_size: 64,
            queue_capacity: 640,
            ..TrainConfig::default()
        };
        let params = Parameters::init(
            cfg.encoder,
            &cat.field_vocab_sizes(),
            &mut crate::seeded_rng(1),
        )
        .unwrap();
        let h = BTreeMap::new();
        let mut state = WorkerState::new(&cfg, 0).unwrap();
        for round in 0..3u32 {
            let insts: Vec<Instance> = (0..64)
                .map(|b| instance(&[b], (round * 64 + b) % 200))
                .collect();
            let refs: Vec<&Instance> = insts.iter().collect();
            let ctx = context(&cfg, &cat, &params, &h, None, 64);
            let out = train_step(&ctx, &refs, &mut state).unwrap();
            assert_eq!(out.counters.item_encoder_forwards, 64);
            assert_eq!(out.counters.candidate_bytes_moved, 0);
        }
    }

    #[test]
    fn sampled_softmax_forwards_are_bounded() {
        let cat = catalog(3000);
        let cfg = TrainConfig {
            mode: TrainMode::SampledSoftmax,
            batch_size: 64,
            negatives: 640,
            proposal: ProposalKind::Uniform,
            ..TrainConfig::default()
        };
        let params = Parameters::init(
            cfg.encoder,
            &cat.field_vocab_sizes(),
            &mut crate::seeded_rng(1),
        )
        .unwrap();
        let proposal = make_proposal(ProposalKind::Uniform, &vec![1.0 / 3000.0; 3000]).unwrap();
        let h = BTreeMap::new();
        let insts: Vec<Instance> = (0..64).map(|b| instance(&[b], b + 100)).collect();
        let refs: Vec<&Instance> = insts.iter().collect();
        let ctx = context(&cfg, &cat, &params, &h, Some(&proposal), 64);
        let out = train_step(&ctx, &refs, &mut WorkerState::new(&cfg, 0).unwrap()).unwrap();
        let f = out.counters.item_encoder_forwards;
        assert!((64 + 640..=64 * 641).contains(&f), "{f}");
    }

    #[test]
    fn split_respects_bounds() {
        let h: Vec<ItemId> = (0..6).map(ItemId).collect();
        let mut rng = crate::seeded_rng(3);
        for _ in 0..200 {
            let (p, s) = split_history(&h, 2, 3, &mut rng).unwrap();
            assert!(p.len() >= 2 && s.len() >= 3);
            assert_eq!(p.len() + s.len(), 6);
        }
        assert!(split_history(&h, 4, 3, &mut rng).is_none());
    }

    #[test]
    fn shard_ranges_cover_batch() {
        let r = shard_ranges(10, 4);
        assert_eq!(r, vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(shard_ranges(5, 1), vec![0..5]);
    }

    #[test]
    fn full_mle_memorises_deterministic_cycle() {
        let cat = catalog(3);
        let mut records = Vec::new();
        for u in 0..30u32 {
            for t in 0..9i64 {
                records.push(ClickRecord {
                    user: u,
                    item: ItemId(((u as i64 + t) % 3) as u32),
                    timestamp: t,
                });
            }
        }
        let ds = Dataset::from_records(records, 3).unwrap();
        let valid: Vec<Instance> = (0..3).map(|i| instance(&[i], (i + 1) % 3)).collect();
        let cfg = TrainConfig {
            mode: TrainMode::FullMle,
            batch_size: 32,
            epochs: 30,
            max_prefix_len: 1,
            eval_k: 1,
            ..TrainConfig::default()
        };
        let (_, hist) = train(&cfg, &cat, &ds, &valid).unwrap();
        assert_eq!(hist.epochs.last().unwrap().valid_hit_rate, Some(1.0));
    }

    #[test]
    fn training_is_deterministic() {
        let world = simulate_biased_logs(&WorldConfig {
            num_items: 40,
            num_users: 60,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            queue_capacity: 128,
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &world.catalog, &world.dataset, &[]).unwrap();
        let b = train(&cfg, &world.catalog, &world.dataset, &[]).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn adagrad_moves_only_touched_rows() {
        let cat = catalog(4);
        let cfg = EncoderConfig::default();
        let mut params =
            Parameters::init(cfg, &cat.field_vocab_sizes(), &mut crate::seeded_rng(0)).unwrap();
        let before = params.clone();
        let mut state = OptimizerState::new(OptimizerConfig::default(), &params);
        let mut g = Gradients::new();
        let key = crate::encoder::RowKey { table: 0, row: 2 };
        g.add_row(key, 1.0, &vec![1.0; cfg.dim]);
        apply_gradients(&mut state, &mut params, &g);
        for c in 0..params.num_coordinates() {
            let (k, _) = params.locate(c);
            if k == key {
                assert!((before.coordinate(c) - params.coordinate(c) - 0.1).abs() < 1e-6);
            } else {
                assert_eq!(before.coordinate(c), params.coordinate(c));
            }
        }
    }
}
