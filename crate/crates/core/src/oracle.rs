//! Reference computations that do not go through the training engine:
//! the tabular contrastive/IPW equivalence, closed-form targets, divergences,
//! and a central finite-difference gradient checker.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::corpus::{CatalogBuilder, ItemCatalog, ItemId};
use crate::encoder::{EncoderConfig, ForwardPass, Parameters, SimilarityMode};
use crate::losses::{contrastive_loss, CandidateLogits};
use crate::math;
use crate::samplers::{
    in_batch_candidates, make_proposal, Candidate, CandidateSet, FifoQueue, ProposalKind,
    QueueMode, Target,
};
use crate::trainer::{batch_objective, Objective};
use crate::{Error, Result};

/// Row-stochastic matrix: contexts by items.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    cols: usize,
    data: Vec<f64>,
}

impl ProbTable {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 {
            return Err(Error::InvalidDistribution("empty table".to_string()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidDistribution(
                    "row is not a distribution".to_string(),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { cols, data })
    }

    /// Row-wise softmax of a free logit matrix.
    pub fn from_logits(logits: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = logits
            .iter()
            .map(|l| {
                let mut p = vec![0.0; l.len()];
                math::softmax_into(l, &mut p);
                p
            })
            .collect();
        Self::new(&rows)
    }

    pub fn num_rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn num_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.cols..(x + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }
}

/// `r(y) ∝ p_data(y) / q(y)`.
pub fn target_distribution_r(p_data_row: &[f64], q_row: &[f64]) -> Result<Vec<f64>> {
    if p_data_row.len() != q_row.len() {
        return Err(Error::DimensionMismatch {
            expected: p_data_row.len(),
            actual: q_row.len(),
        });
    }
    let mut ratios = Vec::with_capacity(p_data_row.len());
    for (y, (&p, &q)) in p_data_row.iter().zip(q_row).enumerate() {
        if p > 0.0 && !(q > 0.0) {
            return Err(Error::UndefinedPropensity(y));
        }
        ratios.push(if p > 0.0 { p / q } else { 0.0 });
    }
    let z: f64 = ratios.iter().sum();
    if !(z > 0.0) {
        return Err(Error::InvalidDistribution("p_data has no mass".to_string()));
    }
    Ok(ratios.into_iter().map(|x| x / z).collect())
}

/// `KL(p ‖ q) = Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut kl = 0.0;
    for (y, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if !(b > 0.0) {
                return Err(Error::UndefinedPropensity(y));
            }
            kl += a * math::log(a / b);
        }
    }
    Ok(kl.max(0.0))
}

/// Closed-form minimiser of the expected IPW loss: the row-wise target `r`.
pub fn fit_tabular_ipw(p_data: &ProbTable, q: &ProbTable) -> Result<ProbTable> {
    check_compatible(p_data, q)?;
    let rows = p_data
        .rows()
        .zip(q.rows())
        .map(|(p, q)| target_distribution_r(p, q))
        .collect::<Result<Vec<_>>>()?;
    ProbTable::new(&rows)
}

fn check_compatible(p: &ProbTable, q: &ProbTable) -> Result<()> {
    if p.num_rows() != q.num_rows() || p.num_cols() != q.num_cols() {
        return Err(Error::ShapeMismatch);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DescentFit {
    pub table: ProbTable,
    /// `KL(r ‖ p_θ)` per context at the end.
    pub kl: Vec<f64>,
    pub steps: usize,
}

/// Gradient descent on the expected IPW loss per context,
/// `-Σ_y (p_data(y) / q(y)) log softmax(θ)_y`, normalised by `Σ_y p/q`.
/// Stops once every row reaches `kl_tolerance` or after `max_steps`.
pub fn fit_tabular_ipw_descent(
    p_data: &ProbTable,
    q: &ProbTable,
    learning_rate: f64,
    max_steps: usize,
    kl_tolerance: f64,
) -> Result<DescentFit> {
    let target = fit_tabular_ipw(p_data, q)?;
    let n = p_data.num_cols();
    let mut logits = vec![vec![0.0; n]; p_data.num_rows()];
    let mut probs = vec![0.0; n];
    let mut kl = vec![f64::INFINITY; logits.len()];
    let mut steps = 0;
    for (x, theta) in logits.iter_mut().enumerate() {
        let r = target.row(x);
        for step in 0..=max_steps {
            math::softmax_into(theta, &mut probs);
            kl[x] = kl_divergence(r, &probs)?;
            if kl[x] <= kl_tolerance || step == max_steps {
                steps = steps.max(step);
                break;
            }
            for ((t, p), r) in theta.iter_mut().zip(&probs).zip(r) {
                *t -= learning_rate * (p - r);
            }
        }
    }
    Ok(DescentFit {
        table: ProbTable::from_logits(&logits)?,
        kl,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NegativeScheme {
    /// `L` i.i.d. draws from `q(·|x)`.
    Sampled(usize),
    /// Every other item once, so the candidate set is the whole catalog.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveFitConfig {
    pub negatives: NegativeScheme,
    pub steps: usize,
    /// Learning rate decays geometrically from `lr_start` to `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
    /// Fraction of the run after which logits are averaged (Polyak-Ruppert).
    /// `1.0` returns the final iterate.
    pub average_from: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ContrastiveFit {
    pub table: ProbTable,
    /// Total variation to the target `r` per context.
    pub tv_to_target: Vec<f64>,
    /// `KL(r ‖ p_θ)` per context.
    pub kl_to_target: Vec<f64>,
}

impl ContrastiveFit {
    pub fn max_tv(&self) -> f64 {
        self.tv_to_target.iter().copied().fold(0.0, f64::max)
    }

    /// Fails with [`Error::NotConverged`] when any row exceeds `tolerance`.
    pub fn ensure_converged(&self, tolerance: f64) -> Result<()> {
        let tv = self.max_tv();
        if tv > tolerance {
            return Err(Error::NotConverged { tv, tolerance });
        }
        Ok(())
    }
}

fn sample_row(p: &[f64], rng: &mut crate::Rng) -> usize {
    let mut u = rng.random::<f64>();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Stochastic minimisation of the contrastive loss on free per-context
/// logits, drawing a fresh positive from `p_data(·|x)` and negatives from
/// `q(·|x)` at every step. Returns the softmax of the averaged logits.
pub fn fit_tabular_contrastive(
    p_data: &ProbTable,
    q: &ProbTable,
    cfg: &ContrastiveFitConfig,
) -> Result<ContrastiveFit> {
    check_compatible(p_data, q)?;
    let target = fit_tabular_ipw(p_data, q)?;
    if let NegativeScheme::Sampled(0) = cfg.negatives {
        return Err(Error::InvalidConfig("at least one negative".to_string()));
    }
    let n = p_data.num_cols();
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut logits = vec![vec![0.0; n]; p_data.num_rows()];
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    let mut scores: Vec<f64> = Vec::with_capacity(n);
    if !(0.0..=1.0).contains(&cfg.average_from) {
        return Err(Error::InvalidConfig(
            "average_from must lie in [0, 1]".to_string(),
        ));
    }
    let ratio = if cfg.steps > 1 {
        cfg.lr_end / cfg.lr_start
    } else {
        1.0
    };
    let first_averaged =
        ((cfg.steps as f64 * cfg.average_from) as usize).min(cfg.steps.saturating_sub(1));
    let mut averaged = vec![vec![0.0; n]; p_data.num_rows()];
    let mut averaged_count = 0.0;
    for step in 0..cfg.steps {
        let lr = cfg.lr_start * math::pow(ratio, step as f64 / (cfg.steps.max(2) - 1) as f64);
        for (x, theta) in logits.iter_mut().enumerate() {
            let y = sample_row(p_data.row(x), &mut rng);
            candidates.clear();
            candidates.push(y);
            match cfg.negatives {
                NegativeScheme::Sampled(l) => {
                    for _ in 0..l {
                        candidates.push(sample_row(q.row(x), &mut rng));
                    }
                }
                NegativeScheme::Exhaustive => candidates.extend((0..n).filter(|&j| j != y)),
            }
            scores.clear();
            scores.extend(candidates.iter().map(|&c| theta[c]));
            let out = contrastive_loss(CandidateLogits {
                logits: &scores,
                pos_index: 0,
                logq: None,
            })?;
            for (&c, g) in candidates.iter().zip(&out.dlogits) {
                theta[c] -= lr * g;
            }
        }
        if step >= first_averaged {
            averaged_count += 1.0;
            for (avg, theta) in averaged.iter_mut().zip(&logits) {
                for (a, t) in avg.iter_mut().zip(theta) {
                    *a += (t - *a) / averaged_count;
                }
            }
        }
    }
    let table = ProbTable::from_logits(if averaged_count > 0.0 {
        &averaged
    } else {
        &logits
    })?;
    let mut tv_to_target = Vec::new();
    let mut kl_to_target = Vec::new();
    for (fit, r) in table.rows().zip(target.rows()) {
        tv_to_target.push(math::total_variation(fit, r));
        kl_to_target.push(kl_divergence(r, fit)?);
    }
    Ok(ContrastiveFit {
        table,
        tv_to_target,
        kl_to_target,
    })
}

/// Random `contexts × items` distribution with every entry at least `min_prob`.
pub fn random_table(
    contexts: usize,
    items: usize,
    min_prob: f64,
    rng: &mut crate::Rng,
) -> Result<ProbTable> {
    if items == 0 || min_prob * items as f64 > 1.0 {
        return Err(Error::InvalidConfig(
            "min_prob * items must be <= 1".to_string(),
        ));
    }
    let free = 1.0 - min_prob * items as f64;
    let rows: Vec<Vec<f64>> = (0..contexts)
        .map(|_| {
            let w: Vec<f64> = (0..items)
                .map(|_| -math::log(1.0 - rng.random::<f64>()))
                .collect();
            let z: f64 = w.iter().sum();
            let mut row: Vec<f64> = w.iter().map(|x| min_prob + free * x / z).collect();
            // Put the rounding residue on the largest entry.
            let s: f64 = row.iter().sum();
            let top = (0..items)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            row[top] += 1.0 - s;
            row
        })
        .collect();
    ProbTable::new(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremConfig {
    pub instances: usize,
    pub contexts: usize,
    pub items: usize,
    pub min_prob: f64,
    pub negatives: usize,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub average_from: f64,
    pub tv_tolerance: f64,
    pub agreement_tolerance: f64,
    pub ipw_kl_tolerance: f64,
    pub seed: u64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            instances: 10,
            contexts: 4,
            items: 8,
            min_prob: 0.02,
            negatives: 7,
            steps: 200_000,
            lr_start: 0.5,
            lr_end: 0.01,
            average_from: 0.5,
            tv_tolerance: 0.02,
            agreement_tolerance: 0.03,
            ipw_kl_tolerance: 1e-8,
            seed: 2020,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCase {
    pub instance: usize,
    /// TV between the contrastive fit and `r`, per context.
    pub tv_contrastive: Vec<f64>,
    /// `KL(r ‖ p_contrastive)` per context.
    pub kl_contrastive: Vec<f64>,
    /// TV between the contrastive fit and the IPW fit, per context.
    pub tv_agreement: Vec<f64>,
    /// `KL(r ‖ p_ipw)` on the descent path, per context.
    pub kl_ipw_descent: Vec<f64>,
    /// Analytic IPW solution equals `r` bit for bit.
    pub ipw_analytic_exact: bool,
    pub passed: bool,
}

/// One verification case: random `(p_data, q)`, both fits, and the checks.
pub fn verify_instance(cfg: &TheoremConfig, instance: usize) -> Result<TheoremCase> {
    let mut rng = crate::seeded_rng(cfg.seed.wrapping_add(instance as u64 * 0x9E37_79B9));
    let p = random_table(cfg.contexts, cfg.items, cfg.min_prob, &mut rng)?;
    let q = random_table(cfg.contexts, cfg.items, cfg.min_prob, &mut rng)?;
    let ipw = fit_tabular_ipw(&p, &q)?;
    let ipw_analytic_exact = p
        .rows()
        .zip(q.rows())
        .zip(ipw.rows())
        .all(|((p, q), fit)| target_distribution_r(p, q).is_ok_and(|r| r == fit));
    let descent = fit_tabular_ipw_descent(&p, &q, 1.0, 1_000_000, cfg.ipw_kl_tolerance * 1e-2)?;
    let fit = fit_tabular_contrastive(
        &p,
        &q,
        &ContrastiveFitConfig {
            negatives: NegativeScheme::Sampled(cfg.negatives),
            steps: cfg.steps,
            lr_start: cfg.lr_start,
            lr_end: cfg.lr_end,
            average_from: cfg.average_from,
            seed: rng.random(),
        },
    )?;
    let tv_agreement: Vec<f64> = fit
        .table
        .rows()
        .zip(ipw.rows())
        .map(|(a, b)| math::total_variation(a, b))
        .collect();
    let passed = ipw_analytic_exact
        && fit.tv_to_target.iter().all(|&t| t <= cfg.tv_tolerance)
        && tv_agreement.iter().all(|&t| t <= cfg.agreement_tolerance)
        && descent.kl.iter().all(|&k| k <= cfg.ipw_kl_tolerance);
    Ok(TheoremCase {
        instance,
        tv_contrastive: fit.tv_to_target,
        kl_contrastive: fit.kl_to_target,
        tv_agreement,
        kl_ipw_descent: descent.kl,
        ipw_analytic_exact,
        passed,
    })
}

pub fn verify_theorem(cfg: &TheoremConfig) -> Result<Vec<TheoremCase>> {
    (0..cfg.instances)
        .map(|i| verify_instance(cfg, i))
        .collect()
}

/// Flat read/write access to a parameter vector.
pub trait Coordinates {
    fn num_coordinates(&self) -> usize;
    fn coordinate(&self, i: usize) -> f64;
    fn set_coordinate(&mut self, i: usize, value: f64);
}

impl Coordinates for Vec<f64> {
    fn num_coordinates(&self) -> usize {
        self.len()
    }
    fn coordinate(&self, i: usize) -> f64 {
        self[i]
    }
    fn set_coordinate(&mut self, i: usize, value: f64) {
        self[i] = value;
    }
}

impl Coordinates for Parameters {
    fn num_coordinates(&self) -> usize {
        Parameters::num_coordinates(self)
    }
    fn coordinate(&self, i: usize) -> f64 {
        Parameters::coordinate(self, i)
    }
    fn set_coordinate(&mut self, i: usize, value: f64) {
        Parameters::set_coordinate(self, i, value)
    }
}

/// When both gradients are at most this large the coordinate counts as
/// agreeing if they differ by no more than it.
pub const FD_ABSOLUTE_TOLERANCE: f64 = 1e-8;

/// Relative error, with an absolute fallback when the denominator vanishes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale <= FD_ABSOLUTE_TOLERANCE {
        if diff <= FD_ABSOLUTE_TOLERANCE {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(coordinate, analytic, numeric, relative error)`
    pub entries: Vec<(usize, f64, f64, f64)>,
}

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε` against `analytic(coord)`.
/// Every coordinate is restored after probing.
pub fn finite_difference_check<P, F, G>(
    mut loss: F,
    params: &mut P,
    analytic: G,
    coords: &[usize],
    eps: f64,
) -> Result<FdReport>
where
    P: Coordinates,
    F: FnMut(&P) -> f64,
    G: Fn(usize) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(alloc::format!(
            "epsilon {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel_error: f64 = 0.0;
    for &c in coords {
        let x = params.coordinate(c);
        params.set_coordinate(c, x + eps);
        let plus = loss(params);
        params.set_coordinate(c, x - eps);
        let minus = loss(params);
        params.set_coordinate(c, x);
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic(c);
        let err = relative_error(a, numeric);
        max_rel_error = max_rel_error.max(err);
        entries.push((c, a, numeric, err));
    }
    Ok(FdReport {
        max_rel_error,
        entries,
    })
}

/// Candidate construction exercised by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateCase {
    /// Other positives of the batch.
    InBatch,
    /// Queue with cached vectors from an earlier batch.
    CachedQueue,
    /// Per-instance explicit negatives from a proposal.
    Sampled,
    /// Every catalog item.
    FullCatalog,
    /// Suffix sequences scored by the user tower, with cached negatives.
    Sequences,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCase {
    FullSoftmax,
    SampledSoftmax,
    Contrastive,
    Ipw,
}

impl LossCase {
    pub fn name(self) -> &'static str {
        match self {
            LossCase::FullSoftmax => "full_softmax",
            LossCase::SampledSoftmax => "sampled_softmax",
            LossCase::Contrastive => "contrastive",
            LossCase::Ipw => "ipw",
        }
    }
}

impl CandidateCase {
    pub fn name(self) -> &'static str {
        match self {
            CandidateCase::InBatch => "in_batch",
            CandidateCase::CachedQueue => "cached_queue",
            CandidateCase::Sampled => "sampled",
            CandidateCase::FullCatalog => "full_catalog",
            CandidateCase::Sequences => "user_sequences",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub loss: LossCase,
    pub candidates: CandidateCase,
    pub similarity: SimilarityMode,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Every shipped loss/candidate/similarity composition, checked on a small
/// random model at `coords_per_case` distinct coordinates.
pub fn gradient_suite(seed: u64, coords_per_case: usize, eps: f64) -> Result<Vec<GradCheckCase>> {
    let combos = [
        (LossCase::FullSoftmax, CandidateCase::FullCatalog),
        (LossCase::Ipw, CandidateCase::FullCatalog),
        (LossCase::SampledSoftmax, CandidateCase::Sampled),
        (LossCase::Contrastive, CandidateCase::InBatch),
        (LossCase::Contrastive, CandidateCase::CachedQueue),
        (LossCase::Contrastive, CandidateCase::Sequences),
    ];
    let mut out = Vec::new();
    for (i, (loss, cands)) in combos.iter().enumerate() {
        for mode in [SimilarityMode::InnerProduct, SimilarityMode::Cosine] {
            let case_seed = seed
                .wrapping_mul(31)
                .wrapping_add(i as u64 * 2 + (mode == SimilarityMode::Cosine) as u64);
            out.push(check_case(
                *loss,
                *cands,
                mode,
                case_seed,
                coords_per_case,
                eps,
            )?);
        }
    }
    Ok(out)
}

fn gradcheck_catalog() -> Result<ItemCatalog> {
    let mut b = CatalogBuilder::new();
    for i in 0..12 {
        let g = alloc::format!("g{}", i % 3);
        let s = alloc::format!("s{}", i % 2);
        b.push(
            &alloc::format!("i{i}"),
            &[("group", g.as_str()), ("shop", s.as_str())],
        )?;
    }
    b.finish()
}

fn check_case(
    loss: LossCase,
    cands: CandidateCase,
    mode: SimilarityMode,
    seed: u64,
    coords: usize,
    eps: f64,
) -> Result<GradCheckCase> {
    let catalog = gradcheck_catalog()?;
    let n = catalog.len();
    let mut rng = crate::seeded_rng(seed);
    let cfg = EncoderConfig {
        dim: 4,
        similarity: mode,
        temperature: 0.5,
        decay: 0.7,
        init_scale: 0.5,
    };
    let mut params = Parameters::init(cfg, &catalog.field_vocab_sizes(), &mut rng)?;
    let batch = 4;
    let prefixes: Vec<Vec<ItemId>> = (0..batch)
        .map(|_| {
            (0..rng.random_range(1..4))
                .map(|_| ItemId(rng.random_range(0..n as u32)))
                .collect()
        })
        .collect();
    let positives: Vec<ItemId> = (0..batch)
        .map(|_| ItemId(rng.random_range(0..n as u32)))
        .collect();
    let p_data: Vec<f64> = {
        let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    };
    let proposal = make_proposal(ProposalKind::Unigram, &p_data)?;

    // Cached vectors come from an unrelated snapshot, as after earlier steps.
    let snapshot = Parameters::init(cfg, &catalog.field_vocab_sizes(), &mut rng)?;
    let (sets, logq, suffixes) = match cands {
        CandidateCase::InBatch => (in_batch_candidates(&positives), None, None),
        CandidateCase::FullCatalog => {
            let all: Arc<[Candidate]> = (0..n as u32).map(|i| Candidate::live(ItemId(i))).collect();
            let sets = positives
                .iter()
                .map(|p| CandidateSet::new(Arc::clone(&all), p.index()))
                .collect::<Result<Vec<_>>>()?;
            (sets, None, None)
        }
        CandidateCase::Sampled => {
            let mut sets = Vec::new();
            let mut logq = Vec::new();
            for p in &positives {
                let mut c = vec![*p];
                c.extend(crate::samplers::sample_negatives(&proposal, 5, &mut rng));
                logq.push(c.iter().map(|&i| proposal.log_prob(i)).collect::<Vec<_>>());
                sets.push(CandidateSet::new(
                    c.into_iter().map(Candidate::live).collect(),
                    0,
                )?);
            }
            (sets, Some(logq), None)
        }
        CandidateCase::CachedQueue => {
            let mut queue = FifoQueue::new(10, QueueMode::Cached)?;
            let mut fwd = ForwardPass::new(&snapshot, &catalog);
            let old: Vec<ItemId> = (0..6)
                .map(|_| ItemId(rng.random_range(0..n as u32)))
                .collect();
            let vecs = old
                .iter()
                .map(|&i| fwd.item(i).map(|s| Arc::from(fwd.item_vector(s))))
                .collect::<Result<Vec<Arc<[f64]>>>>()?;
            let targets: Vec<Target> = old.iter().map(|&i| Target::Item(i)).collect();
            queue.enqueue_batch(&targets, Some(&vecs))?;
            let mut fwd = ForwardPass::new(&params, &catalog);
            let cur = positives
                .iter()
                .map(|&i| fwd.item(i).map(|s| Arc::from(fwd.item_vector(s))))
                .collect::<Result<Vec<Arc<[f64]>>>>()?;
            let targets: Vec<Target> = positives.iter().map(|&i| Target::Item(i)).collect();
            queue.enqueue_batch(&targets, Some(&cur))?;
            (queue.queue_candidates(batch)?, None, None)
        }
        CandidateCase::Sequences => {
            let suffixes: Vec<Arc<[ItemId]>> = (0..batch)
                .map(|_| {
                    (0..rng.random_range(1..4))
                        .map(|_| ItemId(rng.random_range(0..n as u32)))
                        .collect()
                })
                .collect();
            let mut queue = FifoQueue::new(8, QueueMode::Cached)?;
            let mut fwd = ForwardPass::new(&snapshot, &catalog);
            let old: Vec<Arc<[ItemId]>> = (0..4)
                .map(|_| {
                    (0..2)
                        .map(|_| ItemId(rng.random_range(0..n as u32)))
                        .collect()
                })
                .collect();
            let vecs = old
                .iter()
                .map(|s| {
                    fwd.sequence(s)
                        .map(|slot| Arc::from(fwd.sequence_vector(slot)))
                })
                .collect::<Result<Vec<Arc<[f64]>>>>()?;
            let targets: Vec<Target> = old.into_iter().map(Target::Sequence).collect();
            queue.enqueue_batch(&targets, Some(&vecs))?;
            let targets: Vec<Target> = suffixes.iter().cloned().map(Target::Sequence).collect();
            // Current-batch vectors are recomputed live during scoring.
            let placeholder: Vec<Arc<[f64]>> =
                (0..batch).map(|_| Arc::from(vec![0.0; cfg.dim])).collect();
            queue.enqueue_batch(&targets, Some(&placeholder))?;
            (queue.queue_candidates(batch)?, None, Some(suffixes))
        }
    };
    let _ = suffixes;
    let propensities: Vec<f64> = positives.iter().map(|&p| proposal.prob(p)).collect();
    let objective = match loss {
        LossCase::FullSoftmax => Objective::FullSoftmax,
        LossCase::Contrastive => Objective::Contrastive,
        LossCase::SampledSoftmax => Objective::SampledSoftmax {
            logq: logq.as_deref().unwrap_or(&[]),
        },
        LossCase::Ipw => Objective::Ipw {
            propensities: &propensities,
            clip_floor: 0.01,
        },
    };
    let scale = 1.0 / batch as f64;
    let evaluate = |p: &Parameters| -> Result<(f64, crate::encoder::Gradients)> {
        let mut fwd = ForwardPass::new(p, &catalog);
        let queries = prefixes
            .iter()
            .map(|s| fwd.sequence(s))
            .collect::<Result<Vec<_>>>()?;
        let out = batch_objective(fwd, &queries, &sets, &objective, scale)?;
        Ok((out.loss_sum * scale, out.gradients))
    };
    let (_, grads) = evaluate(&params)?;
    let total = params.num_coordinates();
    let picked: Vec<usize> = sample_indices(&mut rng, total, coords.min(total)).into_vec();
    let mut failure = None;
    let analytic_params = params.clone();
    let report = finite_difference_check(
        |p: &Parameters| match evaluate(p) {
            Ok((v, _)) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        &mut params,
        |c| grads.coordinate(&analytic_params, c),
        &picked,
        eps,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheckCase {
        loss,
        candidates: cands,
        similarity: mode,
        coordinates: picked.len(),
        max_rel_error: report.max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_distribution_example() {
        let r = target_distribution_r(&[0.5, 0.3, 0.2], &[0.5, 0.25, 0.25]).unwrap();
        let want = [1.0 / 3.0, 0.4, 0.8 / 3.0];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn target_distribution_limits() {
        let p = [0.1, 0.6, 0.3];
        let r = target_distribution_r(&p, &[1.0 / 3.0; 3]).unwrap();
        for (a, b) in r.iter().zip(p) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = [0.2, 0.0, 0.8];
        let r = target_distribution_r(&p, &p).unwrap();
        assert_eq!(r, vec![0.5, 0.0, 0.5]);
        assert_eq!(
            target_distribution_r(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::UndefinedPropensity(1))
        );
    }

    #[test]
    fn ipw_fit_examples() {
        let p = ProbTable::new(&[vec![0.5, 0.3, 0.2]]).unwrap();
        let q = ProbTable::new(&[vec![0.5, 0.25, 0.25]]).unwrap();
        let fit = fit_tabular_ipw(&p, &q).unwrap();
        assert_eq!(
            fit.row(0),
            target_distribution_r(p.row(0), q.row(0))
                .unwrap()
                .as_slice()
        );

        let uniform = ProbTable::new(&[vec![1.0 / 3.0; 3]]).unwrap();
        let fit = fit_tabular_ipw(&p, &uniform).unwrap();
        for (a, b) in fit.row(0).iter().zip(p.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }

        let one = ProbTable::new(&[vec![1.0]]).unwrap();
        assert_eq!(fit_tabular_ipw(&one, &one).unwrap().row(0), &[1.0]);
    }

    #[test]
    fn ipw_descent_reaches_closed_form() {
        let mut rng = crate::seeded_rng(4);
        let p = random_table(3, 8, 0.02, &mut rng).unwrap();
        let q = random_table(3, 8, 0.02, &mut rng).unwrap();
        let fit = fit_tabular_ipw_descent(&p, &q, 1.0, 1_000_000, 1e-10).unwrap();
        assert!(fit.kl.iter().all(|&k| k <= 1e-8), "{:?}", fit.kl);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(
            (kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap() - 0.5108256237659907).abs() < 1e-12
        );
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn contrastive_fit_matches_target_on_one_context() {
        let mut rng = crate::seeded_rng(99);
        let p = random_table(1, 8, 0.02, &mut rng).unwrap();
        let q = random_table(1, 8, 0.02, &mut rng).unwrap();
        let cfg = ContrastiveFitConfig {
            negatives: NegativeScheme::Sampled(7),
            steps: 200_000,
            lr_start: 0.5,
            lr_end: 0.01,
            average_from: 0.5,
            seed: 1,
        };
        let fit = fit_tabular_contrastive(&p, &q, &cfg).unwrap();
        fit.ensure_converged(0.02).unwrap();
    }

    #[test]
    fn contrastive_with_data_proposal_flattens() {
        let mut rng = crate::seeded_rng(5);
        let p = random_table(1, 8, 0.02, &mut rng).unwrap();
        let cfg = ContrastiveFitConfig {
            negatives: NegativeScheme::Sampled(7),
            steps: 200_000,
            lr_start: 0.5,
            lr_end: 0.01,
            average_from: 0.5,
            seed: 2,
        };
        let fit = fit_tabular_contrastive(&p, &p, &cfg).unwrap();
        let tv = math::total_variation(fit.table.row(0), &[0.125; 8]);
        assert!(tv <= 0.02, "{tv}");
    }

    #[test]
    fn exhaustive_negatives_recover_data_distribution() {
        let mut rng = crate::seeded_rng(6);
        let p = random_table(2, 8, 0.02, &mut rng).unwrap();
        let q = ProbTable::new(&[vec![0.125; 8], vec![0.125; 8]]).unwrap();
        let cfg = ContrastiveFitConfig {
            negatives: NegativeScheme::Exhaustive,
            steps: 100_000,
            lr_start: 0.5,
            lr_end: 0.01,
            average_from: 0.5,
            seed: 3,
        };
        let fit = fit_tabular_contrastive(&p, &q, &cfg).unwrap();
        for (a, b) in fit.table.rows().zip(p.rows()) {
            assert!(math::total_variation(a, b) <= 0.02);
        }
    }

    #[test]
    fn unconverged_fit_is_reported() {
        let mut rng = crate::seeded_rng(8);
        let p = random_table(1, 8, 0.02, &mut rng).unwrap();
        let q = random_table(1, 8, 0.02, &mut rng).unwrap();
        let cfg = ContrastiveFitConfig {
            negatives: NegativeScheme::Sampled(3),
            steps: 1,
            lr_start: 1e-6,
            lr_end: 1e-6,
            average_from: 1.0,
            seed: 1,
        };
        let fit = fit_tabular_contrastive(&p, &q, &cfg).unwrap();
        assert!(matches!(
            fit.ensure_converged(1e-6),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn finite_differences_on_quadratic() {
        let mut w = vec![3.0];
        let r = finite_difference_check(|w: &Vec<f64>| w[0] * w[0], &mut w, |_| 6.0, &[0], 1e-5)
            .unwrap();
        assert!((r.entries[0].2 - 6.0).abs() < 1e-9);
        assert_eq!(w, vec![3.0]);
        let wrong =
            finite_difference_check(|w: &Vec<f64>| w[0] * w[0], &mut w, |_| 7.0, &[0], 1e-5)
                .unwrap();
        assert!((wrong.max_rel_error - 1.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn finite_differences_on_flat_function() {
        let mut w = vec![1.0, 2.0];
        let r =
            finite_difference_check(|_: &Vec<f64>| 4.0, &mut w, |_| 0.0, &[0, 1], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(finite_difference_check(|_: &Vec<f64>| 0.0, &mut w, |_| 0.0, &[0], 1.0).is_err());
    }

    #[test]
    fn gradient_suite_passes_on_one_seed() {
        for case in gradient_suite(3, 100, 1e-5).unwrap() {
            assert!(case.max_rel_error <= 1e-4, "{case:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_equal_rows(
            a in proptest::collection::vec(0.01f64..1.0, 2..10),
            b in proptest::collection::vec(0.01f64..1.0, 10),
        ) {
            let za: f64 = a.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / za).collect();
            let b = &b[..p.len()];
            let zb: f64 = b.iter().sum();
            let q: Vec<f64> = b.iter().map(|x| x / zb).collect();
            proptest::prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            proptest::prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        }
    }
}
