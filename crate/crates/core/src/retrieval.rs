//! Exact top-k retrieval and the accuracy and fairness metrics used to
//! compare training objectives.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{ItemCatalog, ItemId};
use crate::encoder::{encode_item, Parameters, SimilarityMode};
use crate::math::{self, dot, norm};
use crate::{Error, Result};

/// Item vectors for brute-force retrieval; rows are unit length in cosine mode.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    dim: usize,
    vectors: Vec<f64>,
    normalized: bool,
}

impl ItemIndex {
    pub fn build(params: &Parameters, catalog: &ItemCatalog) -> Result<Self> {
        let normalized = params.config().similarity == SimilarityMode::Cosine;
        let mut vectors = Vec::with_capacity(catalog.len() * params.dim());
        for item in catalog.items() {
            let mut v = encode_item(params, item)?;
            if normalized {
                let n = norm(&v);
                if n == 0.0 {
                    return Err(Error::ZeroVector);
                }
                v.iter_mut().for_each(|x| *x /= n);
            }
            vectors.extend_from_slice(&v);
        }
        Ok(Self {
            dim: params.dim(),
            vectors,
            normalized,
        })
    }

    pub fn from_vectors(rows: &[Vec<f64>], normalized: bool) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            let n = if normalized { norm(r) } else { 1.0 };
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            vectors.extend(r.iter().map(|x| x / n));
        }
        Ok(Self {
            dim,
            vectors,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn vector(&self, id: ItemId) -> &[f64] {
        &self.vectors[id.index() * self.dim..(id.index() + 1) * self.dim]
    }

    /// Ranking scores of every item for `user_vec`.
    pub fn scores(&self, user_vec: &[f64]) -> Vec<f64> {
        // `+ 0.0` folds -0.0 into 0.0 so ties compare equal.
        self.vectors
            .chunks_exact(self.dim)
            .map(|v| dot(user_vec, v) + 0.0)
            .collect()
    }
}

/// Exact top-`k` by similarity, ties broken by ascending item id.
pub fn top_k(user_vec: &[f64], index: &ItemIndex, k: usize) -> Vec<ItemId> {
    let scores = index.scores(user_vec);
    let k = k.min(scores.len());
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    if k == 0 {
        return Vec::new();
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(ItemId).collect()
}

/// 1-based rank of `target` within the first `k` entries.
pub fn rank_within(ranked: &[ItemId], target: ItemId, k: usize) -> Option<usize> {
    ranked
        .iter()
        .take(k)
        .position(|&i| i == target)
        .map(|p| p + 1)
}

pub fn hit_rate_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    if rank_within(ranked, target, k).is_some() {
        1.0
    } else {
        0.0
    }
}

/// Single-target NDCG: `1 / log2(rank + 1)`.
pub fn ndcg_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    rank_within(ranked, target, k).map_or(0.0, |r| 1.0 / math::log2(r as f64 + 1.0))
}

pub fn mrr_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    rank_within(ranked, target, k).map_or(0.0, |r| 1.0 / r as f64)
}

/// Fraction of `targets` found in the first `k` entries.
pub fn multi_hit_rate_at_k(ranked: &[ItemId], targets: &[ItemId], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let top: BTreeSet<ItemId> = ranked.iter().take(k).copied().collect();
    targets.iter().filter(|t| top.contains(t)).count() as f64 / targets.len() as f64
}

/// Per-user ranked recommendation lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecommendationLog {
    pub lists: Vec<Vec<ItemId>>,
}

impl RecommendationLog {
    pub fn slots(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.lists.iter().flatten().copied()
    }

    pub fn total_slots(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// Number of distinct items recommended to anyone.
pub fn aggregate_diversity(log: &RecommendationLog) -> usize {
    log.slots().collect::<BTreeSet<_>>().len()
}

/// Popularity percentile of every item: the fraction of items whose count
/// is at most its own. The most popular item scores 1.
pub fn popularity_percentiles(counts: &[u64]) -> Vec<f64> {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = counts.len() as f64;
    counts
        .iter()
        .map(|c| sorted.partition_point(|x| x <= c) as f64 / n)
        .collect()
}

/// Mean popularity percentile over all recommended slots. Uses ranks only,
/// so any strictly increasing transform of `popularity_counts` leaves it
/// unchanged.
pub fn popularity_index(log: &RecommendationLog, popularity_counts: &[u64]) -> f64 {
    let pct = popularity_percentiles(popularity_counts);
    let total = log.total_slots();
    if total == 0 {
        return 0.0;
    }
    log.slots().map(|i| pct[i.index()]).sum::<f64>() / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreeBucket {
    /// Degree range `[low, high)`.
    pub low: f64,
    pub high: f64,
    /// Items whose degree falls in the bucket.
    pub item_count: usize,
    /// Recommendation slots that went to those items.
    pub rec_mass: u64,
}

/// Buckets items by `ln(degree + 1)` in equal-width bins up to the largest
/// degree and counts how often each bucket is recommended.
pub fn degree_histogram(
    log: &RecommendationLog,
    degrees: &[u64],
    num_buckets: usize,
) -> Vec<DegreeBucket> {
    let nb = num_buckets.max(1);
    let max_log = math::log(degrees.iter().copied().max().unwrap_or(0) as f64 + 1.0);
    let width = max_log / nb as f64;
    let bucket_of = |deg: u64| -> usize {
        if width == 0.0 {
            return 0;
        }
        let b = (math::log(deg as f64 + 1.0) / width) as usize;
        b.min(nb - 1)
    };
    let mut out: Vec<DegreeBucket> = (0..nb)
        .map(|b| DegreeBucket {
            low: math::exp(b as f64 * width) - 1.0,
            high: math::exp((b + 1) as f64 * width) - 1.0,
            item_count: 0,
            rec_mass: 0,
        })
        .collect();
    for &d in degrees {
        out[bucket_of(d)].item_count += 1;
    }
    for i in log.slots() {
        out[bucket_of(degrees[i.index()])].rec_mass += 1;
    }
    out
}

/// True when `high`'s recommendation mass first-order stochastically
/// dominates `low`'s toward high-degree buckets: for every cut, the share of
/// mass at or above the cut is at least as large.
pub fn mass_dominates(high: &[DegreeBucket], low: &[DegreeBucket]) -> bool {
    let share = |h: &[DegreeBucket]| -> Vec<f64> {
        let total: u64 = h.iter().map(|b| b.rec_mass).sum();
        let mut tail = vec![0.0; h.len()];
        let mut acc = 0u64;
        for (i, b) in h.iter().enumerate().rev() {
            acc += b.rec_mass;
            tail[i] = acc as f64 / total.max(1) as f64;
        }
        tail
    };
    let (a, b) = (share(high), share(low));
    a.iter().zip(&b).all(|(x, y)| *x >= *y - 1e-12)
}

/// Gini coefficient of non-negative counts.
pub fn gini(counts: &[u64]) -> f64 {
    let n = counts.len();
    let total: u64 = counts.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (2 * (i + 1)) as f64 * c as f64)
        .sum();
    weighted / (n as f64 * total as f64) - (n + 1) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn top_k_examples() {
        let idx = ItemIndex::from_vectors(&[vec![1.0, 0.0], vec![0.0, 1.0]], false).unwrap();
        assert_eq!(top_k(&[2.0, 1.0], &idx, 2), ids(&[0, 1]));

        let tied =
            ItemIndex::from_vectors(&[vec![1.0], vec![2.0], vec![2.0], vec![1.0]], false).unwrap();
        assert_eq!(top_k(&[1.0], &tied, 4), ids(&[1, 2, 0, 3]));
        assert_eq!(top_k(&[1.0], &tied, 1), ids(&[1]));
    }

    #[test]
    fn rank_metrics() {
        let r = ids(&[5, 7, 9, 1]);
        assert_eq!(hit_rate_at_k(&r, ItemId(5), 1), 1.0);
        assert_eq!(ndcg_at_k(&r, ItemId(5), 5), 1.0);
        assert_eq!(mrr_at_k(&r, ItemId(5), 5), 1.0);
        assert!((ndcg_at_k(&r, ItemId(7), 5) - 0.6309297535714575).abs() < 1e-12);
        assert!((mrr_at_k(&r, ItemId(9), 5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(hit_rate_at_k(&r, ItemId(1), 3), 0.0);

        let long: Vec<ItemId> = (0..100).map(ItemId).collect();
        assert_eq!(hit_rate_at_k(&long, ItemId(50), 50), 0.0);
        assert_eq!(hit_rate_at_k(&long, ItemId(49), 50), 1.0);
    }

    #[test]
    fn random_ranking_hit_rate_baseline() {
        let mut rng = crate::seeded_rng(17);
        let mut ranked: Vec<ItemId> = (0..100).map(ItemId).collect();
        let trials = 5000;
        let mut hits = 0.0;
        for _ in 0..trials {
            rand::seq::SliceRandom::shuffle(ranked.as_mut_slice(), &mut rng);
            hits += hit_rate_at_k(&ranked, ItemId(rng.random_range(0..100)), 10);
        }
        let hr = hits / trials as f64;
        assert!((hr - 0.10).abs() <= 0.02, "{hr}");
    }

    #[test]
    fn aggregate_diversity_examples() {
        let log = RecommendationLog {
            lists: vec![ids(&[0, 1]), ids(&[1, 2])],
        };
        assert_eq!(aggregate_diversity(&log), 3);
        let same = RecommendationLog {
            lists: vec![ids(&[3, 4, 5]); 10],
        };
        assert_eq!(aggregate_diversity(&same), 3);
        let disjoint = RecommendationLog {
            lists: vec![ids(&[0, 1]), ids(&[2, 3]), ids(&[4])],
        };
        assert_eq!(aggregate_diversity(&disjoint), 5);
    }

    #[test]
    fn popularity_index_examples() {
        let counts = [5, 100, 1, 40];
        let top = RecommendationLog {
            lists: vec![ids(&[1]); 7],
        };
        assert_eq!(popularity_index(&top, &counts), 1.0);
        let bottom = RecommendationLog {
            lists: vec![ids(&[2]); 7],
        };
        assert_eq!(popularity_index(&bottom, &counts), 0.25);

        let mut rng = crate::seeded_rng(23);
        let n = 200u32;
        let counts: Vec<u64> = (0..n as u64).collect();
        let lists = (0..2000)
            .map(|_| vec![ItemId(rng.random_range(0..n))])
            .collect();
        let pi = popularity_index(&RecommendationLog { lists }, &counts);
        assert!((pi - 0.5).abs() <= 0.05, "{pi}");
    }

    #[test]
    fn degree_histogram_examples() {
        let log = RecommendationLog {
            lists: vec![ids(&[0, 1]), ids(&[2])],
        };
        let same = degree_histogram(&log, &[7, 7, 7], 4);
        assert_eq!(same.iter().filter(|b| b.item_count > 0).count(), 1);

        let degrees = [1, 1, 1000, 1000];
        let log = RecommendationLog {
            lists: vec![ids(&[0, 2]), ids(&[3, 1])],
        };
        let h = degree_histogram(&log, &degrees, 8);
        assert_eq!(h[0].rec_mass, 2);
        assert_eq!(h[7].rec_mass, 2);
        assert_eq!(h.iter().map(|b| b.rec_mass).sum::<u64>(), 4);
        assert!(h[1..7].iter().all(|b| b.item_count == 0));
    }

    #[test]
    fn gini_extremes() {
        assert_eq!(gini(&[5, 5, 5, 5]), 0.0);
        assert!((gini(&[0, 0, 0, 10]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cosine_ranking_is_scale_invariant() {
        use crate::corpus::CatalogBuilder;
        use crate::encoder::{encode_user, EncoderConfig};
        let mut b = CatalogBuilder::new();
        for i in 0..30 {
            let g = alloc::format!("{}", i % 4);
            b.push(&alloc::format!("{i}"), &[("g", g.as_str())])
                .unwrap();
        }
        let cat = b.finish().unwrap();
        let mut p = Parameters::init(
            EncoderConfig::default(),
            &cat.field_vocab_sizes(),
            &mut crate::seeded_rng(8),
        )
        .unwrap();
        let seq = [ItemId(3), ItemId(9)];
        let before = top_k(
            &encode_user(&p, &cat, &seq).unwrap(),
            &ItemIndex::build(&p, &cat).unwrap(),
            10,
        );
        p.scale(7.5);
        let after = top_k(
            &encode_user(&p, &cat, &seq).unwrap(),
            &ItemIndex::build(&p, &cat).unwrap(),
            10,
        );
        assert_eq!(before, after);
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(
            rows in prop::collection::vec(prop::collection::vec(-3i8..3, 3), 1..40),
            user in prop::collection::vec(-3i8..3, 3),
            k in 1usize..40,
        ) {
            let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let user: Vec<f64> = user.iter().map(|&x| x as f64).collect();
            let idx = ItemIndex::from_vectors(&rows, false).unwrap();
            let k = k.min(rows.len());
            let mut naive: Vec<(f64, u32)> = rows.iter().enumerate().map(|(i, r)| (dot(&user, r), i as u32)).collect();
            naive.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<ItemId> = naive.iter().take(k).map(|x| ItemId(x.1)).collect();
            prop_assert_eq!(top_k(&user, &idx, k), want);
        }

        #[test]
        fn metric_orderings(perm in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(), t in 0u32..30, k in 1usize..30) {
            let ranked = ids(&perm);
            let target = ItemId(t);
            prop_assert!(hit_rate_at_k(&ranked, target, k) <= hit_rate_at_k(&ranked, target, k + 1));
            prop_assert!(ndcg_at_k(&ranked, target, k) <= hit_rate_at_k(&ranked, target, k));
            prop_assert!(mrr_at_k(&ranked, target, k) <= hit_rate_at_k(&ranked, target, k));
        }

        #[test]
        fn diversity_is_bounded(lists in prop::collection::vec(prop::collection::vec(0u32..25, 0..6), 1..10)) {
            let log = RecommendationLog { lists: lists.iter().map(|l| ids(l)).collect() };
            prop_assert!(aggregate_diversity(&log) <= 25usize.min(log.total_slots()));
        }

        #[test]
        fn popularity_index_uses_ranks_only(
            counts in prop::collection::vec(0u64..1000, 2..30),
            picks in prop::collection::vec(0usize..1000, 1..50),
        ) {
            let n = counts.len();
            let log = RecommendationLog { lists: vec![picks.iter().map(|&p| ItemId((p % n) as u32)).collect()] };
            let transformed: Vec<u64> = counts.iter().map(|&c| 3 * c * c + 7).collect();
            prop_assert_eq!(popularity_index(&log, &counts), popularity_index(&log, &transformed));
        }
    }
}
