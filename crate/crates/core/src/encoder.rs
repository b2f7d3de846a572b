//! Two-tower model with explicit forward records and exact manual gradients.
//!
//! The item tower maps an item to the mean of its feature embeddings. The
//! user tower has its own embedding tables; it pools each clicked item the
//! same way and takes a recency-decayed mean over the sequence, weight
//! `decay^age` with age 0 for the most recent click.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{Item, ItemCatalog, ItemId};
use crate::math::{self, dot, norm};
use crate::samplers::{CandidateSet, Target};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    InnerProduct,
    /// Cosine divided by a temperature.
    Cosine,
}

impl SimilarityMode {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityMode::InnerProduct => "inner_product",
            SimilarityMode::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub similarity: SimilarityMode,
    /// Only used in cosine mode.
    pub temperature: f64,
    /// Recency decay of the user tower, in (0, 1].
    pub decay: f64,
    /// Standard deviation of the initial embeddings.
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            similarity: SimilarityMode::Cosine,
            temperature: 0.1,
            decay: 0.9,
            init_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("embedding dimension must be positive");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must be in (0, 1]");
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return bad("init_scale must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Item,
    User,
}

/// Identifies one embedding row: `table` indexes item-tower fields first,
/// then user-tower fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub table: u32,
    pub row: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: EncoderConfig,
    vocab_sizes: Vec<usize>,
    tables: Vec<Vec<f64>>,
    offsets: Vec<usize>,
}

impl Parameters {
    /// Gaussian initialisation with standard deviation `config.init_scale`.
    pub fn init(
        config: EncoderConfig,
        vocab_sizes: &[usize],
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(config, vocab_sizes)?;
        for t in &mut p.tables {
            for x in t.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *x = config.init_scale * z;
            }
        }
        Ok(p)
    }

    pub fn zeros(config: EncoderConfig, vocab_sizes: &[usize]) -> Result<Self> {
        let tables = vocab_sizes
            .iter()
            .chain(vocab_sizes)
            .map(|&v| vec![0.0; v * config.dim])
            .collect();
        Self::from_tables(config, vocab_sizes.to_vec(), tables)
    }

    /// `tables` holds `2 * vocab_sizes.len()` row-major tables, item tower first.
    pub fn from_tables(
        config: EncoderConfig,
        vocab_sizes: Vec<usize>,
        tables: Vec<Vec<f64>>,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_sizes.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one feature field".to_string(),
            ));
        }
        if tables.len() != 2 * vocab_sizes.len() {
            return Err(Error::ShapeMismatch);
        }
        let mut offsets = Vec::with_capacity(tables.len() + 1);
        let mut acc = 0;
        for (t, table) in tables.iter().enumerate() {
            let expected = vocab_sizes[t % vocab_sizes.len()] * config.dim;
            if table.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: table.len(),
                });
            }
            offsets.push(acc);
            acc += table.len();
        }
        offsets.push(acc);
        Ok(Self {
            config,
            vocab_sizes,
            tables,
            offsets,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tables
    }

    pub fn table_index(&self, tower: Tower, field: usize) -> u32 {
        match tower {
            Tower::Item => field as u32,
            Tower::User => (self.vocab_sizes.len() + field) as u32,
        }
    }

    pub fn row(&self, key: RowKey) -> &[f64] {
        let d = self.config.dim;
        let r = key.row as usize;
        &self.tables[key.table as usize][r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, key: RowKey) -> &mut [f64] {
        let d = self.config.dim;
        let r = key.row as usize;
        &mut self.tables[key.table as usize][r * d..(r + 1) * d]
    }

    /// Multiplies every table by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tables {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_coordinates(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Row and column of a flat coordinate.
    pub fn locate(&self, coord: usize) -> (RowKey, usize) {
        let t = self.offsets.partition_point(|&o| o <= coord) - 1;
        let local = coord - self.offsets[t];
        let d = self.config.dim;
        (
            RowKey {
                table: t as u32,
                row: (local / d) as u32,
            },
            local % d,
        )
    }

    pub fn flat_index(&self, key: RowKey, col: usize) -> usize {
        self.offsets[key.table as usize] + key.row as usize * self.config.dim + col
    }

    pub fn coordinate(&self, coord: usize) -> f64 {
        let (k, c) = self.locate(coord);
        self.row(k)[c]
    }

    pub fn set_coordinate(&mut self, coord: usize, value: f64) {
        let (k, c) = self.locate(coord);
        self.row_mut(k)[c] = value;
    }

    fn feature_rows(&self, tower: Tower, item: &Item) -> Result<Vec<RowKey>> {
        item.features
            .iter()
            .map(|&(field, feature)| {
                let vocab = *self
                    .vocab_sizes
                    .get(field)
                    .ok_or(Error::FeatureOutOfRange {
                        field,
                        feature,
                        vocab: 0,
                    })?;
                if feature as usize >= vocab {
                    return Err(Error::FeatureOutOfRange {
                        field,
                        feature,
                        vocab,
                    });
                }
                Ok(RowKey {
                    table: self.table_index(tower, field),
                    row: feature,
                })
            })
            .collect()
    }

    fn mean_of_rows(&self, rows: &[RowKey]) -> Vec<f64> {
        let mut v = vec![0.0; self.config.dim];
        let w = 1.0 / rows.len() as f64;
        for &k in rows {
            math::axpy(w, self.row(k), &mut v);
        }
        v
    }
}

/// Item tower: mean of the item's feature embeddings (unnormalised).
pub fn encode_item(params: &Parameters, item: &Item) -> Result<Vec<f64>> {
    let rows = params.feature_rows(Tower::Item, item)?;
    Ok(params.mean_of_rows(&rows))
}

fn decay_weights(len: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|k| math::pow(decay, (len - 1 - k) as f64))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// User tower over a click sequence, most recent click last.
pub fn encode_user(
    params: &Parameters,
    catalog: &ItemCatalog,
    sequence: &[ItemId],
) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Err(Error::EmptySequence);
    }
    let weights = decay_weights(sequence.len(), params.config.decay);
    let mut out = vec![0.0; params.dim()];
    for (&id, w) in sequence.iter().zip(weights) {
        let rows = params.feature_rows(Tower::User, catalog.item(id)?)?;
        math::axpy(w, &params.mean_of_rows(&rows), &mut out);
    }
    Ok(out)
}

/// `φ(u, i)`: inner product, or cosine over the temperature.
pub fn similarity(u: &[f64], i: &[f64], mode: SimilarityMode, temperature: f64) -> Result<f64> {
    if u.len() != i.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: i.len(),
        });
    }
    match mode {
        SimilarityMode::InnerProduct => Ok(dot(u, i)),
        SimilarityMode::Cosine => {
            let (nu, ni) = (norm(u), norm(i));
            if nu == 0.0 || ni == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(dot(u, i) / (nu * ni) / temperature)
        }
    }
}

#[derive(Debug, Clone)]
struct Pooled {
    rows: Vec<RowKey>,
    vector: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SequenceRecord {
    /// (user-tower item slot, normalised weight)
    parts: Vec<(usize, f64)>,
    vector: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Column {
    Item(usize),
    Sequence(usize),
    Cached(Arc<[f64]>),
}

#[derive(Debug, Clone)]
struct Block {
    columns: Vec<Column>,
    norms: Vec<f64>,
}

/// Per-row logits, one row per instance.
pub type Logits = Vec<Vec<f64>>;

/// Encoder calls made during one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeCounts {
    /// Distinct items pooled by the item tower.
    pub item_tower: usize,
    /// Distinct items pooled by the user tower.
    pub user_tower_items: usize,
    /// Sequences encoded by the user tower.
    pub sequences: usize,
}

/// Forward record sufficient for an exact backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: SimilarityMode,
    temperature: f64,
    dim: usize,
    items: Vec<Pooled>,
    context: Vec<Pooled>,
    sequences: Vec<SequenceRecord>,
    queries: Vec<usize>,
    blocks: Vec<Block>,
    instance_block: Vec<usize>,
    row_lens: Vec<usize>,
}

impl Tape {
    pub fn counts(&self) -> EncodeCounts {
        EncodeCounts {
            item_tower: self.items.len(),
            user_tower_items: self.context.len(),
            sequences: self.sequences.len(),
        }
    }
}

/// Incremental forward pass. Each distinct item is pooled once per tower and
/// shared by every instance and candidate that references it.
pub struct ForwardPass<'a> {
    params: &'a Parameters,
    catalog: &'a ItemCatalog,
    items: Vec<Pooled>,
    item_slots: BTreeMap<ItemId, usize>,
    context: Vec<Pooled>,
    context_slots: BTreeMap<ItemId, usize>,
    sequences: Vec<SequenceRecord>,
    shared_sequences: BTreeMap<usize, (Arc<[ItemId]>, usize)>,
}

impl<'a> ForwardPass<'a> {
    pub fn new(params: &'a Parameters, catalog: &'a ItemCatalog) -> Self {
        Self {
            params,
            catalog,
            items: Vec::new(),
            item_slots: BTreeMap::new(),
            context: Vec::new(),
            context_slots: BTreeMap::new(),
            sequences: Vec::new(),
            shared_sequences: BTreeMap::new(),
        }
    }

    /// Item-tower slot of `id`, encoding it on first use.
    pub fn item(&mut self, id: ItemId) -> Result<usize> {
        if let Some(&s) = self.item_slots.get(&id) {
            return Ok(s);
        }
        let rows = self
            .params
            .feature_rows(Tower::Item, self.catalog.item(id)?)?;
        let vector = self.params.mean_of_rows(&rows);
        self.items.push(Pooled { rows, vector });
        self.item_slots.insert(id, self.items.len() - 1);
        Ok(self.items.len() - 1)
    }

    pub fn item_vector(&self, slot: usize) -> &[f64] {
        &self.items[slot].vector
    }

    fn context_item(&mut self, id: ItemId) -> Result<usize> {
        if let Some(&s) = self.context_slots.get(&id) {
            return Ok(s);
        }
        let rows = self
            .params
            .feature_rows(Tower::User, self.catalog.item(id)?)?;
        let vector = self.params.mean_of_rows(&rows);
        self.context.push(Pooled { rows, vector });
        self.context_slots.insert(id, self.context.len() - 1);
        Ok(self.context.len() - 1)
    }

    /// Encodes a sequence with the user tower and returns its slot.
    pub fn sequence(&mut self, items: &[ItemId]) -> Result<usize> {
        if items.is_empty() {
            return Err(Error::EmptySequence);
        }
        let weights = decay_weights(items.len(), self.params.config.decay);
        let mut vector = vec![0.0; self.params.dim()];
        let mut parts = Vec::with_capacity(items.len());
        for (&id, w) in items.iter().zip(weights) {
            let slot = self.context_item(id)?;
            math::axpy(w, &self.context[slot].vector, &mut vector);
            parts.push((slot, w));
        }
        self.sequences.push(SequenceRecord { parts, vector });
        Ok(self.sequences.len() - 1)
    }

    /// Like [`Self::sequence`], memoised on the allocation of `items`.
    pub fn shared_sequence(&mut self, items: &Arc<[ItemId]>) -> Result<usize> {
        let key = Arc::as_ptr(items) as *const ItemId as usize;
        if let Some((_, s)) = self.shared_sequences.get(&key) {
            return Ok(*s);
        }
        let s = self.sequence(items)?;
        self.shared_sequences.insert(key, (Arc::clone(items), s));
        Ok(s)
    }

    pub fn sequence_vector(&self, slot: usize) -> &[f64] {
        &self.sequences[slot].vector
    }

    pub fn counts(&self) -> EncodeCounts {
        EncodeCounts {
            item_tower: self.items.len(),
            user_tower_items: self.context.len(),
            sequences: self.sequences.len(),
        }
    }

    fn column_vector<'v>(&'v self, c: &'v Column) -> &'v [f64] {
        match c {
            Column::Item(s) => &self.items[*s].vector,
            Column::Sequence(s) => &self.sequences[*s].vector,
            Column::Cached(v) => v,
        }
    }

    /// Scores query sequence `queries[b]` against every candidate of `sets[b]`.
    pub fn score(mut self, queries: &[usize], sets: &[CandidateSet]) -> Result<(Logits, Tape)> {
        if queries.len() != sets.len() {
            return Err(Error::ShapeMismatch);
        }
        let d = self.params.dim();
        let mode = self.params.config.similarity;
        let tau = self.params.config.temperature;
        let mut blocks: Vec<Block> = Vec::new();
        let mut block_sources: Vec<Arc<[crate::samplers::Candidate]>> = Vec::new();
        let mut instance_block = Vec::with_capacity(sets.len());
        for set in sets {
            if set.pos_index >= set.len() {
                return Err(Error::PositiveOutOfRange {
                    index: set.pos_index,
                    len: set.len(),
                });
            }
            if let Some(last) = block_sources.last() {
                if Arc::ptr_eq(last, &set.candidates) {
                    instance_block.push(blocks.len() - 1);
                    continue;
                }
            }
            let mut columns = Vec::with_capacity(set.len());
            for c in set.candidates.iter() {
                let col = match (&c.cached, &c.target) {
                    (Some(v), _) => {
                        if v.len() != d {
                            return Err(Error::DimensionMismatch {
                                expected: d,
                                actual: v.len(),
                            });
                        }
                        Column::Cached(Arc::clone(v))
                    }
                    (None, Target::Item(id)) => Column::Item(self.item(*id)?),
                    (None, Target::Sequence(s)) => Column::Sequence(self.shared_sequence(s)?),
                };
                columns.push(col);
            }
            let norms = columns
                .iter()
                .map(|c| norm(self.column_vector(c)))
                .collect();
            blocks.push(Block { columns, norms });
            block_sources.push(Arc::clone(&set.candidates));
            instance_block.push(blocks.len() - 1);
        }

        let mut logits = Vec::with_capacity(queries.len());
        let mut unit = vec![0.0; d];
        for (&q, &k) in queries.iter().zip(&instance_block) {
            let u = &self.sequences.get(q).ok_or(Error::ShapeMismatch)?.vector;
            let block = &blocks[k];
            let row: Vec<f64> = match mode {
                SimilarityMode::InnerProduct => block
                    .columns
                    .iter()
                    .map(|c| dot(u, self.column_vector(c)))
                    .collect(),
                SimilarityMode::Cosine => {
                    let nu = norm(u);
                    if nu == 0.0 || block.norms.contains(&0.0) {
                        return Err(Error::ZeroVector);
                    }
                    for (o, x) in unit.iter_mut().zip(u) {
                        *o = x / nu;
                    }
                    block
                        .columns
                        .iter()
                        .zip(&block.norms)
                        .map(|(c, &nc)| dot(&unit, self.column_vector(c)) / nc / tau)
                        .collect()
                }
            };
            logits.push(row);
        }
        let row_lens = logits.iter().map(Vec::len).collect();
        let tape = Tape {
            mode,
            temperature: tau,
            dim: d,
            items: self.items,
            context: self.context,
            sequences: self.sequences,
            queries: queries.to_vec(),
            blocks,
            instance_block,
            row_lens,
        };
        Ok((logits, tape))
    }
}

/// Encodes `queries` with the user tower and scores them against `sets`.
pub fn batch_forward(
    params: &Parameters,
    catalog: &ItemCatalog,
    queries: &[&[ItemId]],
    sets: &[CandidateSet],
) -> Result<(Logits, Tape)> {
    let mut fwd = ForwardPass::new(params, catalog);
    let slots = queries
        .iter()
        .map(|q| fwd.sequence(q))
        .collect::<Result<Vec<_>>>()?;
    fwd.score(&slots, sets)
}

/// Sparse parameter gradient: one dense row per touched embedding row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    rows: BTreeMap<RowKey, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, key: RowKey) -> Option<&[f64]> {
        self.rows.get(&key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (RowKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// `self[key] += scale * grad`
    pub fn add_row(&mut self, key: RowKey, scale: f64, grad: &[f64]) {
        let row = self
            .rows
            .entry(key)
            .or_insert_with(|| vec![0.0; grad.len()]);
        math::axpy(scale, grad, row);
    }

    /// Sums `other` into `self` in key order.
    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in &other.rows {
            self.add_row(*k, 1.0, v);
        }
    }

    /// Gradient at a flat coordinate of `params`; zero for untouched rows.
    pub fn coordinate(&self, params: &Parameters, coord: usize) -> f64 {
        let (k, c) = params.locate(coord);
        self.rows.get(&k).map_or(0.0, |r| r[c])
    }

    fn prune(&mut self) {
        self.rows.retain(|_, v| v.iter().any(|&x| x != 0.0));
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, dim: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; dim])
}

/// Exact gradient of `Σ_b Σ_j dlogits[b][j] · logits[b][j]` with respect to
/// the parameters. Cached columns pass gradient to the query side only.
pub fn batch_backward(tape: &Tape, dlogits: &[Vec<f64>]) -> Result<Gradients> {
    if dlogits.len() != tape.queries.len()
        || dlogits
            .iter()
            .zip(&tape.row_lens)
            .any(|(r, &n)| r.len() != n)
    {
        return Err(Error::ShapeMismatch);
    }
    let d = tape.dim;
    let tau = tape.temperature;
    let mut g_items: Vec<Option<Vec<f64>>> = vec![None; tape.items.len()];
    let mut g_seqs: Vec<Option<Vec<f64>>> = vec![None; tape.sequences.len()];
    fn col_vec<'t>(tape: &'t Tape, c: &'t Column) -> &'t [f64] {
        match c {
            Column::Item(s) => &tape.items[*s].vector,
            Column::Sequence(s) => &tape.sequences[*s].vector,
            Column::Cached(v) => v,
        }
    }
    let mut gu = vec![0.0; d];
    for (b, row) in dlogits.iter().enumerate() {
        let q = tape.queries[b];
        let u = &tape.sequences[q].vector;
        let block = &tape.blocks[tape.instance_block[b]];
        let nu = norm(u);
        gu.iter_mut().for_each(|x| *x = 0.0);
        let mut any = false;
        for ((&dl, col), &nc) in row.iter().zip(&block.columns).zip(&block.norms) {
            if dl == 0.0 {
                continue;
            }
            any = true;
            let c = col_vec(tape, col);
            let target = match col {
                Column::Item(s) => Some(accumulate(&mut g_items[*s], d)),
                Column::Sequence(s) if *s != q => Some(accumulate(&mut g_seqs[*s], d)),
                // Self-similarity: add the column term to the query gradient.
                Column::Sequence(_) => None,
                Column::Cached(_) => None,
            };
            let self_column = matches!(col, Column::Sequence(s) if *s == q);
            match tape.mode {
                SimilarityMode::InnerProduct => {
                    math::axpy(dl, c, &mut gu);
                    if let Some(g) = target {
                        math::axpy(dl, u, g);
                    } else if self_column {
                        math::axpy(dl, u, &mut gu);
                    }
                }
                SimilarityMode::Cosine => {
                    let inv = 1.0 / (nu * nc);
                    let cos = dot(u, c) * inv;
                    let s = dl / tau;
                    if !self_column {
                        math::axpy(s * inv, c, &mut gu);
                        math::axpy(-s * cos / (nu * nu), u, &mut gu);
                    }
                    if let Some(g) = target {
                        math::axpy(s * inv, u, g);
                        math::axpy(-s * cos / (nc * nc), c, g);
                    }
                    // φ(u, u) is constant in cosine mode: no self term.
                }
            }
        }
        if any {
            math::axpy(1.0, &gu, accumulate(&mut g_seqs[q], d));
        }
    }

    let mut g_context: Vec<Option<Vec<f64>>> = vec![None; tape.context.len()];
    for (rec, g) in tape.sequences.iter().zip(&g_seqs) {
        if let Some(g) = g {
            for &(slot, w) in &rec.parts {
                math::axpy(w, g, accumulate(&mut g_context[slot], d));
            }
        }
    }

    let mut grads = Gradients::new();
    for (pooled, g) in tape
        .items
        .iter()
        .zip(&g_items)
        .chain(tape.context.iter().zip(&g_context))
    {
        if let Some(g) = g {
            let w = 1.0 / pooled.rows.len() as f64;
            for &k in &pooled.rows {
                grads.add_row(k, w, g);
            }
        }
    }
    grads.prune();
    Ok(grads)
}
