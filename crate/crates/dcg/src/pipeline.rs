//! The end-to-end commands: simulate, train, eval, verify-theorem,
//! gradcheck and bench. Each writes machine-readable files stamped with the
//! config hash and returns a summary for the terminal.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dcg_core::corpus::{
    leave_last_split, simulate_biased_logs, ClickSequence, Dataset, GroundTruth, Instance,
    ItemCatalog, ItemId,
};
use dcg_core::encoder::{encode_user, Parameters};
use dcg_core::oracle::{gradient_suite, verify_instance, GradCheckCase, TheoremCase};
use dcg_core::retrieval::{
    aggregate_diversity, degree_histogram, hit_rate_at_k, mrr_at_k, multi_hit_rate_at_k, ndcg_at_k,
    popularity_index, top_k, DegreeBucket, ItemIndex, RecommendationLog,
};
use dcg_core::samplers::{make_proposal, ProposalKind};
use dcg_core::trainer::{
    run_workers, train_step, StepContext, StepCounters, TrainConfig, TrainHistory, TrainMode,
    WorkerState,
};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde_json::{json, Value};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Config, Protocol};
use crate::formats;
use crate::parallel::Threaded;

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const THEOREM_FILE: &str = "report.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const BENCH_FILE: &str = "bench.json";

/// A run finished but missed an acceptance threshold.
#[derive(Debug, thiserror::Error)]
#[error("acceptance threshold not met: {0}")]
pub struct AcceptanceFailure(pub String);

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
}

fn data_dir(cfg: &Config, out: &Path) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| out.to_path_buf())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    formats::write_file(path, &text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub items: usize,
    pub users: usize,
    pub records: usize,
    pub exposure_gini: f64,
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<SimulateSummary> {
    ensure_dir(out)?;
    let world = simulate_biased_logs(&cfg.world)?;
    let hash = cfg.hash();
    let header = format!("config_hash={hash}");
    formats::write_file(
        &out.join(CATALOG_FILE),
        &formats::render_catalog(&world.catalog, &header),
    )?;
    formats::write_file(
        &out.join(INTERACTIONS_FILE),
        &formats::render_interactions(&world.dataset, &world.catalog, &header),
    )?;
    formats::write_file(
        &out.join(TRUTH_FILE),
        &formats::render_truth(&world.truth, &hash),
    )?;
    Ok(SimulateSummary {
        items: world.catalog.len(),
        users: world.dataset.num_users(),
        records: world.dataset.records().len(),
        exposure_gini: dcg_core::retrieval::gini(&world.truth.exposure_counts),
    })
}

/// Catalog, interactions and, when present, the ground truth of a data directory.
pub struct LoadedData {
    pub catalog: ItemCatalog,
    pub dataset: Dataset,
    pub truth: Option<GroundTruth>,
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let catalog = formats::load_catalog(&dir.join(CATALOG_FILE))?;
    let dataset = formats::load_interactions(&dir.join(INTERACTIONS_FILE), &catalog)?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(formats::load_truth(&truth_path)?)
    } else {
        None
    };
    Ok(LoadedData {
        catalog,
        dataset,
        truth,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: TrainHistory,
    pub train_instances: usize,
    pub valid_instances: usize,
}

/// Trains on the leave-last-out training split and validates on the
/// second-to-last clicks.
pub fn train_model(
    cfg: &Config,
    catalog: &ItemCatalog,
    dataset: &Dataset,
) -> Result<(Parameters, TrainSummary)> {
    let split = leave_last_split(dataset)?;
    let (params, history) = run_workers(
        &cfg.train,
        catalog,
        &split.train,
        &split.valid,
        cfg.workers,
        &Threaded,
    )?;
    let train_instances = split
        .train
        .records()
        .len()
        .saturating_sub(split.train.num_users());
    Ok((
        params,
        TrainSummary {
            history,
            train_instances,
            valid_instances: split.valid.len(),
        },
    ))
}

pub fn history_jsonl(history: &TrainHistory, mode: TrainMode, hash: &str) -> String {
    let mut out = String::new();
    for e in &history.epochs {
        let v = json!({
            "config_hash": hash,
            "mode": mode.name(),
            "epoch": e.epoch,
            "mean_loss": e.mean_loss,
            "steps": e.steps,
            "item_encoder_forwards": e.counters.item_encoder_forwards,
            "user_encoder_forwards": e.counters.user_encoder_forwards,
            "candidate_bytes_moved": e.counters.candidate_bytes_moved,
            "valid_hit_rate": e.valid_hit_rate,
        });
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

pub fn train(cfg: &Config, out: &Path) -> Result<TrainSummary> {
    ensure_dir(out)?;
    let data = load_data(&data_dir(cfg, out))?;
    let (params, summary) = train_model(cfg, &data.catalog, &data.dataset)?;
    let hash = cfg.hash();
    checkpoint::save(
        &out.join(CHECKPOINT_FILE),
        &Checkpoint {
            config_hash: hash.clone(),
            params,
        },
    )?;
    formats::write_file(
        &out.join(HISTORY_FILE),
        &history_jsonl(&summary.history, cfg.train.mode, &hash),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Value,
    pub histogram: Vec<DegreeBucket>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Rank of the target among itself and `negatives`, scored by `index`.
/// Ties go to the lower item id.
fn sampled_rank(index: &ItemIndex, user: &[f64], target: ItemId, negatives: &[ItemId]) -> usize {
    let score = |i: ItemId| dcg_core::math::dot(user, index.vector(i)) + 0.0;
    let s = score(target);
    1 + negatives
        .iter()
        .filter(|&&n| {
            let x = score(n);
            x > s || (x == s && n < target)
        })
        .count()
}

fn rank_metric(rank: usize, k: usize, f: impl Fn(usize) -> f64) -> f64 {
    if rank <= k {
        f(rank)
    } else {
        0.0
    }
}

/// Every metric for `params` on the test split of `dataset`.
pub fn evaluate_model(
    cfg: &Config,
    params: &Parameters,
    catalog: &ItemCatalog,
    dataset: &Dataset,
    truth: Option<&GroundTruth>,
) -> Result<Evaluation> {
    let e = &cfg.eval;
    let split = leave_last_split(dataset)?;
    let test: &[Instance] = &split.test;
    anyhow::ensure!(!test.is_empty(), "no test users");
    let k = e.k.min(catalog.len());
    let index = ItemIndex::build(params, catalog)?;
    let popularity = split.train.item_counts();
    let mut log = RecommendationLog::default();
    let (mut hr, mut ndcg, mut mrr) = (Vec::new(), Vec::new(), Vec::new());
    let (mut s_hr1, mut s_hr10, mut s_ndcg5, mut s_ndcg10, mut s_mrr) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut truth_hr, mut truth_expected) = (Vec::new(), Vec::new());
    let pop_proposal = {
        let total: u64 = popularity.iter().sum();
        make_proposal(
            ProposalKind::Unigram,
            &popularity
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect::<Vec<_>>(),
        )?
    };
    let mut rng = dcg_core::seeded_rng(e.seed);
    for inst in test {
        let prefix = inst.prefix.most_recent(cfg.train.max_prefix_len);
        let u = encode_user(params, catalog, prefix.items())?;
        let ranked = top_k(&u, &index, k);
        if e.protocol != Protocol::Sampled {
            hr.push(hit_rate_at_k(&ranked, inst.target, k));
            ndcg.push(ndcg_at_k(&ranked, inst.target, k));
            mrr.push(mrr_at_k(&ranked, inst.target, k));
        }
        if e.protocol != Protocol::Full {
            let mut negatives = Vec::with_capacity(e.sampled_negatives);
            let mut attempts = 0;
            while negatives.len() < e.sampled_negatives
                && attempts < 100 * e.sampled_negatives.max(1)
            {
                attempts += 1;
                let n = pop_proposal.sample(&mut rng);
                if n != inst.target && !negatives.contains(&n) {
                    negatives.push(n);
                }
            }
            let r = sampled_rank(&index, &u, inst.target, &negatives);
            s_hr1.push(rank_metric(r, 1, |_| 1.0));
            s_hr10.push(rank_metric(r, 10, |_| 1.0));
            s_ndcg5.push(rank_metric(r, 5, |r| 1.0 / (r as f64 + 1.0).log2()));
            s_ndcg10.push(rank_metric(r, 10, |r| 1.0 / (r as f64 + 1.0).log2()));
            s_mrr.push(1.0 / r as f64);
        }
        if let Some(t) = truth {
            let user = inst.user as usize;
            if user < t.user_factors.len() && t.item_factors.len() == catalog.len() {
                let clicks = t.sample_unbiased_clicks(user, e.truth_clicks, &mut rng);
                truth_hr.push(multi_hit_rate_at_k(&ranked, &clicks, k));
                let rel = t.relevance(user);
                truth_expected.push(ranked.iter().map(|i| rel[i.index()]).sum());
            }
        }
        log.lists.push(ranked);
    }
    let histogram = degree_histogram(&log, &popularity, e.histogram_buckets);
    let mut metrics = json!({
        "config_hash": cfg.hash(),
        "seed": e.seed,
        "k": k,
        "protocol": e.protocol.name(),
        "mode": cfg.train.mode.name(),
        "test_users": test.len(),
        "fairness": {
            "aggregate_diversity": aggregate_diversity(&log),
            "popularity_index": popularity_index(&log, &popularity),
            "popularity_index_definition": "mean popularity percentile of recommended slots; percentile = fraction of items with training clicks <= the item's",
        },
    });
    if e.protocol != Protocol::Sampled {
        metrics["full"] = json!({ "hit_rate": mean(&hr), "ndcg": mean(&ndcg), "mrr": mean(&mrr) });
    }
    if e.protocol != Protocol::Full {
        metrics["sampled"] = json!({
            "negatives": e.sampled_negatives,
            "negative_distribution": "training click counts",
            "hit_rate@1": mean(&s_hr1),
            "hit_rate@10": mean(&s_hr10),
            "ndcg@5": mean(&s_ndcg5),
            "ndcg@10": mean(&s_ndcg10),
            "mrr": mean(&s_mrr),
        });
    }
    if !truth_hr.is_empty() {
        metrics["truth"] = json!({
            "clicks_per_user": e.truth_clicks,
            "hit_rate": mean(&truth_hr),
            "expected_hit_rate": mean(&truth_expected),
        });
    }
    Ok(Evaluation { metrics, histogram })
}

pub fn histogram_csv(buckets: &[DegreeBucket], hash: &str) -> String {
    let mut out = format!("# config_hash={hash}\nbucket_low,bucket_high,item_count,rec_mass\n");
    for b in buckets {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.low, b.high, b.item_count, b.rec_mass
        ));
    }
    out
}

pub fn eval(cfg: &Config, out: &Path) -> Result<Evaluation> {
    ensure_dir(out)?;
    let data = load_data(&data_dir(cfg, out))?;
    let ckpt = checkpoint::load(&out.join(CHECKPOINT_FILE))?;
    let ev = evaluate_model(
        cfg,
        &ckpt.params,
        &data.catalog,
        &data.dataset,
        data.truth.as_ref(),
    )?;
    write_json(&out.join(METRICS_FILE), &ev.metrics)?;
    formats::write_file(
        &out.join(HISTOGRAM_FILE),
        &histogram_csv(&ev.histogram, &cfg.hash()),
    )?;
    Ok(ev)
}

/// Runs every instance on its own thread; results in instance order.
pub fn run_theorem(cfg: &Config) -> Result<Vec<TheoremCase>> {
    let th = &cfg.theorem;
    let results: Vec<dcg_core::Result<TheoremCase>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..th.instances)
            .map(|i| s.spawn(move || verify_instance(th, i)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    });
    Ok(results.into_iter().collect::<dcg_core::Result<Vec<_>>>()?)
}

pub fn theorem_report(cfg: &Config, cases: &[TheoremCase]) -> Value {
    let th = &cfg.theorem;
    json!({
        "config_hash": cfg.hash(),
        "seed": th.seed,
        "instances": th.instances,
        "contexts": th.contexts,
        "items": th.items,
        "negatives": th.negatives,
        "steps": th.steps,
        "tolerances": {
            "tv": th.tv_tolerance,
            "agreement": th.agreement_tolerance,
            "ipw_kl": th.ipw_kl_tolerance,
        },
        "passed": cases.iter().all(|c| c.passed),
        "cases": cases.iter().map(|c| json!({
            "instance": c.instance,
            "tv_contrastive": c.tv_contrastive,
            "kl_contrastive": c.kl_contrastive,
            "tv_agreement": c.tv_agreement,
            "kl_ipw_descent": c.kl_ipw_descent,
            "ipw_analytic_exact": c.ipw_analytic_exact,
            "passed": c.passed,
        })).collect::<Vec<_>>(),
    })
}

pub fn verify_theorem(cfg: &Config, out: &Path) -> Result<Vec<TheoremCase>> {
    ensure_dir(out)?;
    let cases = run_theorem(cfg)?;
    write_json(&out.join(THEOREM_FILE), &theorem_report(cfg, &cases))?;
    Ok(cases)
}

pub fn gradcheck(cfg: &Config, out: &Path) -> Result<Vec<GradCheckCase>> {
    ensure_dir(out)?;
    let g = &cfg.gradcheck;
    let cases = gradient_suite(g.seed, g.coordinates, g.epsilon)?;
    let report = json!({
        "config_hash": cfg.hash(),
        "seed": g.seed,
        "epsilon": g.epsilon,
        "tolerance": g.tolerance,
        "passed": cases.iter().all(|c| c.max_rel_error <= g.tolerance),
        "cases": cases.iter().map(|c| json!({
            "loss": c.loss.name(),
            "candidates": c.candidates.name(),
            "similarity": c.similarity.name(),
            "coordinates": c.coordinates,
            "max_rel_error": c.max_rel_error,
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join(GRADCHECK_FILE), &report)?;
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: TrainMode,
    pub negatives: usize,
    /// Mean per measured step.
    pub item_encoder_forwards: f64,
    pub user_encoder_forwards: f64,
    pub candidate_bytes_moved: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub rows: Vec<BenchRow>,
    /// Cached-queue over explicit-sampling item-encoder forwards.
    pub forward_ratio: f64,
    /// `B / (B + |Q|)`.
    pub ratio_bound: f64,
}

impl BenchReport {
    pub fn row(&self, mode: TrainMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn passed(&self) -> bool {
        self.forward_ratio <= self.ratio_bound + 1e-9
    }
}

/// Encoder-cost counters of one step per mode at the configured geometry.
/// Explicit sampling draws `|Q|` negatives per instance from a uniform
/// proposal over the bench catalog. Queue modes are warmed up until the
/// queue is full before measuring.
pub fn bench_counters(cfg: &Config) -> Result<BenchReport> {
    let b = cfg.train.batch_size;
    let q = cfg.train.queue_capacity;
    let n = cfg.bench.items;
    anyhow::ensure!(n >= b, "bench.items must be at least the batch size");
    let mut builder = dcg_core::corpus::CatalogBuilder::new();
    for i in 0..n {
        builder.push(&format!("b{i}"), &[])?;
    }
    let catalog = builder.finish()?;
    let mut rng = dcg_core::seeded_rng(cfg.bench.seed);
    let params = Parameters::init(cfg.train.encoder, &catalog.field_vocab_sizes(), &mut rng)?;
    let proposal = make_proposal(ProposalKind::Uniform, &vec![1.0 / n as f64; n])?;
    let histories = Default::default();
    let warmup = q.div_ceil(b);
    let total_steps = warmup + cfg.bench.steps.max(1);
    let batches: Vec<Vec<Instance>> = (0..total_steps)
        .map(|_| {
            let targets = sample_indices(&mut rng, n, b).into_vec();
            targets
                .into_iter()
                .map(|t| Instance {
                    user: 0,
                    prefix: ClickSequence(
                        (0..rng.random_range(1..=5))
                            .map(|_| ItemId(rng.random_range(0..n as u32)))
                            .collect(),
                    ),
                    target: ItemId(t as u32),
                })
                .collect()
        })
        .collect();
    let modes = [
        TrainMode::SampledSoftmax,
        TrainMode::ClrecInBatch,
        TrainMode::ClrecQueue,
        TrainMode::ClrecQueueCached,
    ];
    let mut rows = Vec::new();
    for mode in modes {
        let tc = TrainConfig {
            mode,
            negatives: q,
            ..cfg.train.clone()
        };
        let mut state = WorkerState::new(&tc, 0)?;
        let mut measured = StepCounters::default();
        let skip = if mode.uses_queue() { warmup } else { 0 };
        let mut steps = 0;
        for (i, batch) in batches
            .iter()
            .enumerate()
            .take(skip + cfg.bench.steps.max(1))
        {
            let refs: Vec<&Instance> = batch.iter().collect();
            let ctx = StepContext {
                config: &tc,
                catalog: &catalog,
                params: &params,
                proposal: Some(&proposal),
                histories: &histories,
                global_batch: refs.len(),
                step: i as u64,
            };
            let out = train_step(&ctx, &refs, &mut state)?;
            if i >= skip {
                measured.add(&out.counters);
                steps += 1;
            }
        }
        let per = |x: u64| x as f64 / steps as f64;
        rows.push(BenchRow {
            mode,
            negatives: match mode {
                TrainMode::SampledSoftmax => q,
                TrainMode::ClrecInBatch => b - 1,
                _ => q - 1,
            },
            item_encoder_forwards: per(measured.item_encoder_forwards),
            user_encoder_forwards: per(measured.user_encoder_forwards),
            candidate_bytes_moved: per(measured.candidate_bytes_moved),
        });
    }
    let cached = rows
        .iter()
        .find(|r| r.mode == TrainMode::ClrecQueueCached)
        .map_or(0.0, |r| r.item_encoder_forwards);
    let explicit = rows
        .iter()
        .find(|r| r.mode == TrainMode::SampledSoftmax)
        .map_or(1.0, |r| r.item_encoder_forwards);
    Ok(BenchReport {
        batch_size: b,
        queue_capacity: q,
        rows,
        forward_ratio: cached / explicit,
        ratio_bound: b as f64 / (b + q) as f64,
    })
}

pub fn bench(cfg: &Config, out: &Path) -> Result<BenchReport> {
    ensure_dir(out)?;
    let report = bench_counters(cfg)?;
    let value = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.bench.seed,
        "batch_size": report.batch_size,
        "queue_capacity": report.queue_capacity,
        "catalog_items": cfg.bench.items,
        "forward_ratio": report.forward_ratio,
        "ratio_bound": report.ratio_bound,
        "passed": report.passed(),
        "rows": report.rows.iter().map(|r| json!({
            "mode": r.mode.name(),
            "negatives": r.negatives,
            "item_encoder_forwards": r.item_encoder_forwards,
            "user_encoder_forwards": r.user_encoder_forwards,
            "candidate_bytes_moved": r.candidate_bytes_moved,
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join(BENCH_FILE), &value)?;
    Ok(report)
}
