//! Proposal distributions and the candidate-construction strategies:
//! explicit sampling, in-batch sharing, and FIFO queues holding either raw
//! items or cached representations.

use alloc::collections::VecDeque;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::ItemId;
use crate::math;
use crate::{Error, Result};

/// What a candidate column scores against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// An item, encoded by the item tower.
    Item(ItemId),
    /// A click sequence, encoded by the user tower (user-to-user task).
    Sequence(Arc<[ItemId]>),
}

impl Target {
    pub fn item(&self) -> Option<ItemId> {
        match self {
            Target::Item(i) => Some(*i),
            Target::Sequence(_) => None,
        }
    }
}

/// One element of a candidate multiset. A candidate with a cached vector is
/// scored against that vector and receives no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub target: Target,
    pub cached: Option<Arc<[f64]>>,
}

impl Candidate {
    pub fn live(item: ItemId) -> Self {
        Self {
            target: Target::Item(item),
            cached: None,
        }
    }

    pub fn is_cached(&self) -> bool {
        self.cached.is_some()
    }
}

/// Positive plus negatives. The candidate list is reference counted so every
/// instance of a batch can share one queue snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Arc<[Candidate]>,
    pub pos_index: usize,
}

impl CandidateSet {
    pub fn new(candidates: Arc<[Candidate]>, pos_index: usize) -> Result<Self> {
        if pos_index >= candidates.len() {
            return Err(Error::PositiveOutOfRange {
                index: pos_index,
                len: candidates.len(),
            });
        }
        Ok(Self {
            candidates,
            pos_index,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Number of negatives, `L`.
    pub fn negatives(&self) -> usize {
        self.candidates.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposalKind {
    Uniform,
    Unigram,
    /// `p_data^alpha`, renormalised.
    Popularity {
        alpha: f64,
    },
}

/// A distribution over items with O(1) alias-method sampling.
#[derive(Debug, Clone)]
pub struct Proposal {
    kind: ProposalKind,
    probs: Vec<f64>,
    // Alias table over the support only, so zero-mass items are never drawn.
    support: Vec<u32>,
    accept: Vec<f64>,
    alias: Vec<u32>,
}

/// Builds `q` from the empirical item distribution.
pub fn make_proposal(kind: ProposalKind, p_data: &[f64]) -> Result<Proposal> {
    let n = p_data.len();
    if n == 0 {
        return Err(Error::InvalidDistribution(
            "empty item universe".to_string(),
        ));
    }
    let probs = match kind {
        ProposalKind::Uniform => vec![1.0 / n as f64; n],
        ProposalKind::Unigram => {
            check_distribution(p_data)?;
            p_data.to_vec()
        }
        ProposalKind::Popularity { alpha } => {
            if !alpha.is_finite() {
                return Err(Error::InvalidConfig("alpha must be finite".to_string()));
            }
            let w: Vec<f64> = p_data
                .iter()
                .map(|&p| if p > 0.0 { math::pow(p, alpha) } else { 0.0 })
                .collect();
            let z: f64 = w.iter().sum();
            if !(z > 0.0) || !z.is_finite() {
                return Err(Error::InvalidDistribution("all-zero p_data".to_string()));
            }
            w.into_iter().map(|x| x / z).collect()
        }
    };
    Proposal::from_probs(kind, probs)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution(
            "negative or non-finite entry".to_string(),
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(alloc::format!("sums to {s}")));
    }
    Ok(())
}

impl Proposal {
    pub fn from_probs(kind: ProposalKind, probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs)?;
        let support: Vec<u32> = (0..probs.len() as u32)
            .filter(|&i| probs[i as usize] > 0.0)
            .collect();
        let m = support.len();
        let total: f64 = support.iter().map(|&i| probs[i as usize]).sum();
        let mut scaled: Vec<f64> = support
            .iter()
            .map(|&i| probs[i as usize] * m as f64 / total)
            .collect();
        let mut accept = vec![1.0; m];
        let mut alias: Vec<u32> = (0..m as u32).collect();
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            accept[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to rounding.
        for i in small.into_iter().chain(large) {
            accept[i] = 1.0;
        }
        Ok(Self {
            kind,
            probs,
            support,
            accept,
            alias,
        })
    }

    pub fn kind(&self) -> ProposalKind {
        self.kind
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, item: ItemId) -> f64 {
        self.probs[item.index()]
    }

    /// Natural log of `q(item)`; `-inf` off the support.
    pub fn log_prob(&self, item: ItemId) -> f64 {
        math::log(self.probs[item.index()])
    }

    pub fn sample(&self, rng: &mut crate::Rng) -> ItemId {
        let slot = rng.random_range(0..self.support.len());
        let pick = if rng.random::<f64>() < self.accept[slot] {
            slot
        } else {
            self.alias[slot] as usize
        };
        ItemId(self.support[pick])
    }
}

/// `count` i.i.d. draws from the proposal.
pub fn sample_negatives(proposal: &Proposal, count: usize, rng: &mut crate::Rng) -> Vec<ItemId> {
    (0..count).map(|_| proposal.sample(rng)).collect()
}

/// Every instance scores the batch's full multiset of positives; its own
/// positive sits at its batch position.
pub fn in_batch_candidates(batch_positives: &[ItemId]) -> Vec<CandidateSet> {
    let shared: Arc<[Candidate]> = batch_positives
        .iter()
        .map(|&i| Candidate::live(i))
        .collect();
    (0..batch_positives.len())
        .map(|b| CandidateSet {
            candidates: Arc::clone(&shared),
            pos_index: b,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueMode {
    /// Stores raw targets; every read re-encodes them.
    Raw,
    /// Stores the representation computed at enqueue time.
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub target: Target,
    pub vector: Option<Arc<[f64]>>,
}

/// Fixed-capacity first-in-first-out store of recent positives.
#[derive(Debug, Clone)]
pub struct FifoQueue {
    capacity: usize,
    mode: QueueMode,
    entries: VecDeque<QueueEntry>,
    dim: Option<usize>,
}

impl FifoQueue {
    pub fn new(capacity: usize, mode: QueueMode) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            mode,
            entries: VecDeque::with_capacity(capacity),
            dim: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> QueueMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Appends the batch in order, evicting the oldest entries past capacity.
    /// Cached queues need one vector per target, all of the same dimension.
    pub fn enqueue_batch(
        &mut self,
        targets: &[Target],
        vectors: Option<&[Arc<[f64]>]>,
    ) -> Result<()> {
        let vectors = match (self.mode, vectors) {
            (QueueMode::Raw, _) => None,
            (QueueMode::Cached, Some(v)) if v.len() == targets.len() => {
                for x in v {
                    let expected = *self.dim.get_or_insert(x.len());
                    if x.len() != expected {
                        return Err(Error::DimensionMismatch {
                            expected,
                            actual: x.len(),
                        });
                    }
                }
                Some(v)
            }
            (QueueMode::Cached, _) => return Err(Error::MissingCachedVectors),
        };
        for (i, t) in targets.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                target: t.clone(),
                vector: vectors.map(|v| Arc::clone(&v[i])),
            });
        }
        Ok(())
    }

    /// Candidate sets for the batch of `batch_len` positives just enqueued.
    ///
    /// The candidates are the whole queue. Instance `b` owns the entry at
    /// `len - batch_len + b`; older occurrences of the same target remain
    /// negatives. In cached mode, entries older than the current batch carry
    /// their stored vectors and are excluded from back-propagation.
    pub fn queue_candidates(&self, batch_len: usize) -> Result<Vec<CandidateSet>> {
        let len = self.entries.len();
        if batch_len > len {
            return Err(Error::PositiveNotQueued {
                batch: batch_len,
                len,
            });
        }
        let first_live = len - batch_len;
        let shared: Arc<[Candidate]> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| Candidate {
                target: e.target.clone(),
                cached: match self.mode {
                    QueueMode::Cached if i < first_live => e.vector.clone(),
                    _ => None,
                },
            })
            .collect();
        Ok((0..batch_len)
            .map(|b| CandidateSet {
                candidates: Arc::clone(&shared),
                pos_index: first_live + b,
            })
            .collect())
    }
}
