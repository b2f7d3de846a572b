//! Click logs, training instances, empirical distributions and a synthetic
//! world whose logging policy has a known exposure bias.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::math;
use crate::{Error, Result};

/// Dense item index in `[0, |Y|)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Field 0 of every catalog is the item's own identifier.
pub const ID_FIELD: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: ItemId,
    /// `(field, feature id)` pairs sorted by field; always starts with the id field.
    pub features: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    items: Vec<Item>,
    external_ids: Vec<String>,
    field_names: Vec<String>,
    /// Value strings per field; the id field's values are the external ids.
    field_values: Vec<Vec<String>>,
}

impl ItemCatalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: ItemId) -> Result<&Item> {
        self.items.get(id.index()).ok_or(Error::UnknownItem(id.0))
    }

    pub fn external_id(&self, id: ItemId) -> &str {
        &self.external_ids[id.index()]
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn field_vocab_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.field_values.iter().map(Vec::len).collect();
        sizes[ID_FIELD] = self.items.len();
        sizes
    }

    pub fn feature_value(&self, field: usize, feature: u32) -> &str {
        if field == ID_FIELD {
            &self.external_ids[feature as usize]
        } else {
            &self.field_values[field][feature as usize]
        }
    }

    /// Looks up an item by its external identifier.
    pub fn find(&self, external_id: &str) -> Option<ItemId> {
        self.external_ids
            .iter()
            .position(|e| e == external_id)
            .map(|i| ItemId(i as u32))
    }

    /// Map from external id to dense id, for loaders resolving many references.
    pub fn id_map(&self) -> BTreeMap<&str, ItemId> {
        self.external_ids
            .iter()
            .enumerate()
            .map(|(i, e)| (e.as_str(), ItemId(i as u32)))
            .collect()
    }
}

/// Interns external ids and `field=value` strings into a dense catalog.
/// Dense ids follow insertion order.
#[derive(Debug, Default)]
pub struct CatalogBuilder {
    ids: BTreeMap<String, ItemId>,
    items: Vec<Item>,
    external_ids: Vec<String>,
    fields: BTreeMap<String, usize>,
    field_names: Vec<String>,
    values: Vec<BTreeMap<String, u32>>,
    field_values: Vec<Vec<String>>,
}

impl CatalogBuilder {
    pub fn new() -> Self {
        let mut b = Self::default();
        b.fields.insert("id".to_string(), ID_FIELD);
        b.field_names.push("id".to_string());
        b.values.push(BTreeMap::new());
        b.field_values.push(Vec::new());
        b
    }

    pub fn push(&mut self, external_id: &str, features: &[(&str, &str)]) -> Result<ItemId> {
        if self.ids.contains_key(external_id) {
            return Err(Error::DuplicateItem(external_id.to_string()));
        }
        let id = ItemId(self.items.len() as u32);
        let mut feats = vec![(ID_FIELD, id.0)];
        for &(field, value) in features {
            let f = match self.fields.get(field) {
                Some(&f) => f,
                None => {
                    let f = self.field_names.len();
                    self.fields.insert(field.to_string(), f);
                    self.field_names.push(field.to_string());
                    self.values.push(BTreeMap::new());
                    self.field_values.push(Vec::new());
                    f
                }
            };
            if f == ID_FIELD {
                return Err(Error::InvalidConfig(
                    "`id` is a reserved feature field".to_string(),
                ));
            }
            let next = self.field_values[f].len() as u32;
            let v = *self.values[f].entry(value.to_string()).or_insert_with(|| {
                self.field_values[f].push(value.to_string());
                next
            });
            feats.push((f, v));
        }
        feats.sort_unstable();
        feats.dedup();
        self.ids.insert(external_id.to_string(), id);
        self.external_ids.push(external_id.to_string());
        self.items.push(Item {
            id,
            features: feats,
        });
        Ok(id)
    }

    pub fn finish(self) -> Result<ItemCatalog> {
        if self.items.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        Ok(ItemCatalog {
            items: self.items,
            external_ids: self.external_ids,
            field_names: self.field_names,
            field_values: self.field_values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickRecord {
    pub user: u32,
    pub item: ItemId,
    pub timestamp: i64,
}

/// Click records grouped by user (ascending user id) and sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ClickRecord>,
    users: Vec<u32>,
    offsets: Vec<usize>,
    num_items: usize,
}

impl Dataset {
    /// Groups and sorts `records`; every item must be below `num_items` and
    /// no user may have two clicks with the same timestamp.
    pub fn from_records(mut records: Vec<ClickRecord>, num_items: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(r) = records.iter().find(|r| r.item.index() >= num_items) {
            return Err(Error::UnknownItem(r.item.0));
        }
        records.sort_by_key(|r| (r.user, r.timestamp));
        let mut users = Vec::new();
        let mut offsets = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if i == 0 || records[i - 1].user != r.user {
                users.push(r.user);
                offsets.push(i);
            } else if records[i - 1].timestamp >= r.timestamp {
                return Err(Error::NonMonotoneTimestamps { user: r.user });
            }
        }
        offsets.push(records.len());
        Ok(Self {
            records,
            users,
            offsets,
            num_items,
        })
    }

    pub fn records(&self) -> &[ClickRecord] {
        &self.records
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn user_lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `(user id, clicks)` for every user in ascending id order.
    pub fn users(&self) -> impl Iterator<Item = (u32, &[ClickRecord])> + '_ {
        self.users
            .iter()
            .zip(self.offsets.windows(2))
            .map(|(&u, w)| (u, &self.records[w[0]..w[1]]))
    }

    pub fn clicks_of(&self, user: u32) -> Option<&[ClickRecord]> {
        let i = self.users.binary_search(&user).ok()?;
        Some(&self.records[self.offsets[i]..self.offsets[i + 1]])
    }

    /// Click counts per item.
    pub fn item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_items];
        for r in &self.records {
            counts[r.item.index()] += 1;
        }
        counts
    }
}

/// A user's clicks before a target, most recent last.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClickSequence(pub Vec<ItemId>);

impl ClickSequence {
    pub fn items(&self) -> &[ItemId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The last `max_len` clicks.
    pub fn most_recent(&self, max_len: usize) -> ClickSequence {
        let start = self.0.len().saturating_sub(max_len.max(1));
        ClickSequence(self.0[start..].to_vec())
    }
}

/// One `(x, y)` training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub user: u32,
    pub prefix: ClickSequence,
    pub target: ItemId,
}

/// One instance per click after a user's first, with the prefix cut to the
/// most recent `max_prefix_len` clicks.
pub fn build_instances(dataset: &Dataset, max_prefix_len: usize) -> Vec<Instance> {
    let max_len = max_prefix_len.max(1);
    let mut out = Vec::new();
    for (user, clicks) in dataset.users() {
        for t in 1..clicks.len() {
            let start = t.saturating_sub(max_len);
            out.push(Instance {
                user,
                prefix: ClickSequence(clicks[start..t].iter().map(|r| r.item).collect()),
                target: clicks[t].item,
            });
        }
    }
    out
}

/// `p_data(y) = count(y) / |records|` over the dataset's item universe.
pub fn empirical_item_distribution(dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.records.len() as f64;
    Ok(dataset
        .item_counts()
        .into_iter()
        .map(|c| c as f64 / n)
        .collect())
}

/// Leave-last-out split. Prefixes of the held-out instances are untruncated.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
    /// Users with fewer than three clicks.
    pub dropped_users: usize,
}

/// Last click per user is the test target, second-to-last the validation
/// target, the rest is training data. Fails only when every user is dropped.
pub fn leave_last_split(dataset: &Dataset) -> Result<Split> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut dropped_users = 0;
    for (user, clicks) in dataset.users() {
        let n = clicks.len();
        if n < 3 {
            dropped_users += 1;
            continue;
        }
        train.extend_from_slice(&clicks[..n - 2]);
        let items: Vec<ItemId> = clicks.iter().map(|r| r.item).collect();
        valid.push(Instance {
            user,
            prefix: ClickSequence(items[..n - 2].to_vec()),
            target: items[n - 2],
        });
        test.push(Instance {
            user,
            prefix: ClickSequence(items[..n - 1].to_vec()),
            target: items[n - 1],
        });
    }
    Ok(Split {
        train: Dataset::from_records(train, dataset.num_items)?,
        valid,
        test,
        dropped_users,
    })
}

/// Parameters of the synthetic logging world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_items: usize,
    pub num_users: usize,
    /// Latent dimension of the ground-truth relevance model.
    pub relevance_rank: usize,
    /// Multiplier on the normalised latent inner product before the softmax.
    pub relevance_sharpness: f64,
    /// Exponent on popularity in the logging policy; 0 means uniform exposure.
    pub exposure_skew: f64,
    pub slate_size: usize,
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_items: 500,
            num_users: 1000,
            relevance_rank: 8,
            relevance_sharpness: 3.0,
            exposure_skew: 1.0,
            slate_size: 10,
            interactions_per_user: 20,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_items == 0 || self.num_users == 0 || self.relevance_rank == 0 {
            return bad("world counts must be positive");
        }
        if self.slate_size == 0 || self.slate_size > self.num_items {
            return bad("slate_size must be in [1, num_items]");
        }
        if self.interactions_per_user == 0 {
            return bad("interactions_per_user must be positive");
        }
        if !(self.exposure_skew >= 0.0) || !self.exposure_skew.is_finite() {
            return bad("exposure_skew must be finite and >= 0");
        }
        if !(self.relevance_sharpness > 0.0) || !self.relevance_sharpness.is_finite() {
            return bad("relevance_sharpness must be finite and > 0");
        }
        Ok(())
    }
}

/// Hidden state of a simulated world. Evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub relevance_sharpness: f64,
    /// Times each item was shown by the logging policy.
    pub exposure_counts: Vec<u64>,
    /// Times each item was clicked.
    pub click_counts: Vec<u64>,
}

impl GroundTruth {
    /// True click distribution of `user` when every item is exposed.
    pub fn relevance(&self, user: usize) -> Vec<f64> {
        let u = &self.user_factors[user];
        let scale = self.relevance_sharpness / math::sqrt(u.len() as f64);
        let logits: Vec<f64> = self
            .item_factors
            .iter()
            .map(|v| scale * math::dot(u, v))
            .collect();
        let mut out = vec![0.0; logits.len()];
        math::softmax_into(&logits, &mut out);
        out
    }

    /// Mean of the per-user relevance distributions.
    pub fn marginal_relevance(&self) -> Vec<f64> {
        let n = self.user_factors.len();
        let mut acc = vec![0.0; self.item_factors.len()];
        for u in 0..n {
            math::axpy(1.0 / n as f64, &self.relevance(u), &mut acc);
        }
        acc
    }

    /// Clicks `user` would make under uniform, full exposure.
    pub fn sample_unbiased_clicks(
        &self,
        user: usize,
        n: usize,
        rng: &mut crate::Rng,
    ) -> Vec<ItemId> {
        let rel = self.relevance(user);
        (0..n)
            .map(|_| ItemId(sample_categorical(&rel, rng) as u32))
            .collect()
    }
}

fn sample_categorical(p: &[f64], rng: &mut crate::Rng) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Output of [`simulate_biased_logs`].
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub catalog: ItemCatalog,
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Simulates click logs collected under a popularity-driven logging policy.
///
/// Users and items get Gaussian latent factors; a user's true click
/// distribution is the softmax of scaled inner products. At each round every
/// user is shown a slate drawn without replacement with probability
/// proportional to `popularity^exposure_skew`, and clicks one slate item in
/// proportion to true relevance. Popularity starts as a Zipf law over a random
/// item order and grows by one per realised click, which feeds popular items
/// more exposure. Items carry a `group` feature: the argmax latent coordinate.
pub fn simulate_biased_logs(world: &WorldConfig) -> Result<World> {
    world.validate()?;
    let mut rng = crate::seeded_rng(world.seed);
    let rank = world.relevance_rank;
    let gaussian_rows = |n: usize, rng: &mut crate::Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..rank).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    };
    let user_factors = gaussian_rows(world.num_users, &mut rng);
    let item_factors = gaussian_rows(world.num_items, &mut rng);

    let mut order: Vec<usize> = (0..world.num_items).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut popularity = vec![0.0; world.num_items];
    for (r, &item) in order.iter().enumerate() {
        popularity[item] = world.num_users as f64 / (r + 1) as f64;
    }

    let mut truth = GroundTruth {
        user_factors,
        item_factors,
        relevance_sharpness: world.relevance_sharpness,
        exposure_counts: vec![0; world.num_items],
        click_counts: vec![0; world.num_items],
    };
    let relevance: Vec<Vec<f64>> = (0..world.num_users).map(|u| truth.relevance(u)).collect();

    let mut records = Vec::with_capacity(world.num_users * world.interactions_per_user);
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(world.num_items);
    let mut slate_weights = vec![0.0; world.slate_size];
    for t in 0..world.interactions_per_user {
        for (u, rel) in relevance.iter().enumerate() {
            // Weighted sampling without replacement: largest ln(U)/w keys.
            keys.clear();
            for (i, &p) in popularity.iter().enumerate() {
                let w = math::pow(p, world.exposure_skew);
                let e: f64 = 1.0 - rng.random::<f64>();
                keys.push((math::log(e) / w, i));
            }
            let k = world.slate_size;
            if k < keys.len() {
                keys.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            }
            let slate = &mut keys[..k];
            slate.sort_unstable_by_key(|&(_, i)| i);
            for (w, &(_, i)) in slate_weights.iter_mut().zip(slate.iter()) {
                *w = rel[i];
                truth.exposure_counts[i] += 1;
            }
            let clicked = slate[sample_categorical(&slate_weights, &mut rng)].1;
            truth.click_counts[clicked] += 1;
            popularity[clicked] += 1.0;
            records.push(ClickRecord {
                user: u as u32,
                item: ItemId(clicked as u32),
                timestamp: (t * world.num_users + u) as i64,
            });
        }
    }

    let mut builder = CatalogBuilder::new();
    for (i, v) in truth.item_factors.iter().enumerate() {
        let group = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(g, _)| g)
            .unwrap_or(0);
        let value = alloc::format!("g{group}");
        builder.push(&alloc::format!("i{i}"), &[("group", value.as_str())])?;
    }
    let catalog = builder.finish()?;
    let dataset = Dataset::from_records(records, world.num_items)?;
    Ok(World {
        catalog,
        dataset,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::gini;

    fn rec(user: u32, item: u32, timestamp: i64) -> ClickRecord {
        ClickRecord {
            user,
            item: ItemId(item),
            timestamp,
        }
    }

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn builder_assigns_dense_ids_in_order() {
        let mut b = CatalogBuilder::new();
        for id in ["i0", "i1", "i2"] {
            b.push(id, &[("cat", "x")]).unwrap();
        }
        let c = b.finish().unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.find("i2"), Some(ItemId(2)));
        assert_eq!(c.field_vocab_sizes(), vec![3, 1]);
        assert_eq!(c.items()[1].features, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn builder_rejects_duplicates_and_empty() {
        let mut b = CatalogBuilder::new();
        b.push("a", &[]).unwrap();
        assert_eq!(b.push("a", &[]), Err(Error::DuplicateItem("a".into())));
        assert_eq!(CatalogBuilder::new().finish(), Err(Error::EmptyCatalog));
    }

    #[test]
    fn dataset_groups_users_and_sorts_time() {
        let d = Dataset::from_records(
            vec![rec(2, 0, 5), rec(1, 1, 9), rec(2, 2, 1), rec(1, 0, 3)],
            3,
        )
        .unwrap();
        assert_eq!(d.num_users(), 2);
        assert_eq!(d.user_lengths(), vec![2, 2]);
        let u2: Vec<_> = d.clicks_of(2).unwrap().iter().map(|r| r.item).collect();
        assert_eq!(u2, ids(&[2, 0]));
    }

    #[test]
    fn dataset_rejects_unknown_items_and_ties() {
        assert_eq!(
            Dataset::from_records(vec![rec(0, 5, 0)], 3),
            Err(Error::UnknownItem(5))
        );
        assert_eq!(
            Dataset::from_records(vec![rec(4, 0, 1), rec(4, 1, 1)], 3),
            Err(Error::NonMonotoneTimestamps { user: 4 })
        );
    }

    #[test]
    fn instances_follow_each_click() {
        let d = Dataset::from_records(
            vec![rec(0, 0, 0), rec(0, 1, 1), rec(0, 2, 2), rec(1, 2, 0)],
            3,
        )
        .unwrap();
        let full = build_instances(&d, 10);
        assert_eq!(full.len(), 2);
        assert_eq!(full[0].prefix.items(), &ids(&[0])[..]);
        assert_eq!(full[0].target, ItemId(1));
        assert_eq!(full[1].prefix.items(), &ids(&[0, 1])[..]);
        assert_eq!(full[1].target, ItemId(2));

        let cut = build_instances(&d, 1);
        assert_eq!(cut[1].prefix.items(), &ids(&[1])[..]);
        assert_eq!(cut[1].target, ItemId(2));
    }

    #[test]
    fn empirical_distribution_counts_clicks() {
        let d = Dataset::from_records(
            vec![rec(0, 0, 0), rec(0, 0, 1), rec(1, 1, 0), rec(1, 2, 1)],
            3,
        )
        .unwrap();
        assert_eq!(
            empirical_item_distribution(&d).unwrap(),
            vec![0.5, 0.25, 0.25]
        );

        let point = Dataset::from_records(vec![rec(0, 1, 0), rec(0, 1, 1)], 3).unwrap();
        assert_eq!(
            empirical_item_distribution(&point).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn empirical_distribution_of_uniform_clicks_is_flat() {
        let mut rng = crate::seeded_rng(3);
        let records = (0..10_000)
            .map(|t| rec(0, rng.random_range(0..10), t))
            .collect();
        let d = Dataset::from_records(records, 10).unwrap();
        let p = empirical_item_distribution(&d).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| (0.07..=0.13).contains(&x)), "{p:?}");
    }

    #[test]
    fn split_holds_out_last_two_clicks() {
        let d = Dataset::from_records(
            vec![
                rec(0, 0, 0),
                rec(0, 1, 1),
                rec(0, 2, 2),
                rec(0, 0, 3),
                rec(1, 1, 0),
                rec(1, 2, 1),
            ],
            3,
        )
        .unwrap();
        let s = leave_last_split(&d).unwrap();
        assert_eq!(s.dropped_users, 1);
        assert_eq!(s.train.records().len(), 2);
        assert_eq!(s.valid[0].target, ItemId(2));
        assert_eq!(s.valid[0].prefix.items(), &ids(&[0, 1])[..]);
        assert_eq!(s.test[0].target, ItemId(0));
        assert_eq!(s.test[0].prefix.len(), 3);
    }

    fn small_world(skew: f64, slate: usize, per_user: usize) -> WorldConfig {
        WorldConfig {
            num_items: 20,
            num_users: 200,
            relevance_rank: 4,
            exposure_skew: skew,
            slate_size: slate,
            interactions_per_user: per_user,
            seed: 7,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = small_world(1.5, 5, 30);
        assert_eq!(
            simulate_biased_logs(&cfg).unwrap(),
            simulate_biased_logs(&cfg).unwrap()
        );
    }

    #[test]
    fn skewed_logging_concentrates_exposure() {
        // Generated log has exposure Gini 0.677.
        let w = simulate_biased_logs(&small_world(1.5, 5, 30)).unwrap();
        let g = gini(&w.truth.exposure_counts);
        assert!((0.4..=0.9).contains(&g), "gini {g}");
    }

    #[test]
    fn unbiased_logging_converges_to_true_relevance() {
        let tv_at = |per_user| {
            let w = simulate_biased_logs(&small_world(0.0, 20, per_user)).unwrap();
            let p = empirical_item_distribution(&w.dataset).unwrap();
            math::total_variation(&p, &w.truth.marginal_relevance())
        };
        let (small, large) = (tv_at(5), tv_at(100));
        assert!(large < small, "{large} !< {small}");
        assert!(large < 0.02, "{large}");
    }

    #[test]
    fn invalid_world_is_rejected() {
        let mut cfg = small_world(-1.0, 5, 30);
        assert!(simulate_biased_logs(&cfg).is_err());
        cfg.exposure_skew = 1.0;
        cfg.slate_size = 0;
        assert!(simulate_biased_logs(&cfg).is_err());
    }
}
