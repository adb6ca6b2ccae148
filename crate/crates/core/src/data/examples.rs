//! Training and evaluation examples: a history prefix of one sequence and
//! the interaction that follows it.

use rand::seq::SliceRandom;
use rand::Rng;

use super::negatives::sample_negatives;
use super::preprocess::Dataset;
use super::records::Scenario;
use crate::batch::{BatchRow, SequenceBatch};
use crate::error::{Error, Result};
use crate::seeding::{purpose, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Targets inside the pretraining part.
    Pretrain,
    /// Task-part targets before validation and test.
    Train,
    Valid,
    Test,
}

/// `events[..target]` of sequence `seq` predicting `events[target]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub seq: usize,
    pub target: usize,
}

impl Example {
    pub fn history_len(&self) -> usize {
        self.target
    }
}

/// Every example of one scenario and split, in sequence order. Training
/// splits enumerate all prefixes; evaluation splits give one example per
/// sequence.
pub fn make_examples(ds: &Dataset, scenario: Scenario, split: Split) -> Vec<Example> {
    let mut out = Vec::new();
    for s in ds.sequences_of(scenario) {
        match split {
            Split::Pretrain => out.extend(s.pretrain_targets().map(|t| Example { seq: s.id, target: t })),
            Split::Train => out.extend(s.finetune_targets().map(|t| Example { seq: s.id, target: t })),
            Split::Valid => out.extend(s.valid_target().map(|t| Example { seq: s.id, target: t })),
            Split::Test => out.extend(s.test_target().map(|t| Example { seq: s.id, target: t })),
        }
    }
    out
}

/// History row for `ex` with the given candidate list. Search rows carry
/// the queries of the history plus the query of the target interaction.
pub fn history_row(ds: &Dataset, ex: Example, candidates: Vec<u32>, target_col: usize) -> Result<BatchRow> {
    let s = ds
        .sequences
        .get(ex.seq)
        .ok_or_else(|| Error::data(format!("unknown sequence {}", ex.seq)))?;
    if ex.target == 0 || ex.target >= s.len() {
        return Err(Error::data(format!("target {} outside sequence of {}", ex.target, s.len())));
    }
    let hist = &s.events[..ex.target];
    let (queries, query_times) = match s.scenario {
        Scenario::Search => (
            s.events[..=ex.target].iter().map(|e| e.query.clone()).collect(),
            s.events[..=ex.target].iter().map(|e| e.time).collect(),
        ),
        Scenario::Rec => (Vec::new(), Vec::new()),
    };
    Ok(BatchRow {
        user: s.user,
        products: hist.iter().map(|e| e.product).collect(),
        product_times: hist.iter().map(|e| e.time).collect(),
        queries,
        query_times,
        candidates,
        target_col,
    })
}

/// Builds candidate lists and batches with deterministic negatives.
#[derive(Clone, Copy, Debug)]
pub struct ExampleBuilder<'a> {
    pub ds: &'a Dataset,
    pub seed: u64,
    pub negatives_train: usize,
    pub eval_negatives: usize,
}

impl<'a> ExampleBuilder<'a> {
    fn target(&self, ex: Example) -> (u32, u32) {
        let s = &self.ds.sequences[ex.seq];
        (s.user, s.events[ex.target].product)
    }

    /// Positive in column 0 followed by fresh negatives for this epoch.
    pub fn train_row(&self, ex: Example, epoch: usize) -> Result<BatchRow> {
        let (user, target) = self.target(ex);
        let key = [self.seed, purpose::TRAIN_NEGATIVES, user as u64, ex.seq as u64, ex.target as u64, epoch as u64];
        let negs = sample_negatives(
            self.ds.history(user),
            target,
            self.ds.manifest.vocab.products,
            self.negatives_train,
            &key,
        )?;
        let mut candidates = Vec::with_capacity(negs.len() + 1);
        candidates.push(target);
        candidates.extend(negs);
        history_row(self.ds, ex, candidates, 0)
    }

    /// Positive plus `eval_negatives` negatives, the positive placed in a
    /// seeded random column.
    pub fn eval_row(&self, ex: Example, split: Split) -> Result<BatchRow> {
        let (user, target) = self.target(ex);
        let tag = match split {
            Split::Valid => purpose::VALID_NEGATIVES,
            _ => purpose::TEST_NEGATIVES,
        };
        let key = [self.seed, tag, user as u64, ex.seq as u64, ex.target as u64];
        let mut candidates = sample_negatives(
            self.ds.history(user),
            target,
            self.ds.manifest.vocab.products,
            self.eval_negatives,
            &key,
        )?;
        let slot = rng_for(&[self.seed, purpose::TARGET_SLOT, user as u64, ex.seq as u64, ex.target as u64])
            .gen_range(0..=candidates.len());
        candidates.insert(slot, target);
        history_row(self.ds, ex, candidates, slot)
    }

    pub fn train_batch(&self, scenario: Scenario, examples: &[Example], epoch: usize, query_words: usize) -> Result<SequenceBatch> {
        let rows = examples
            .iter()
            .map(|&ex| self.train_row(ex, epoch))
            .collect::<Result<Vec<_>>>()?;
        SequenceBatch::from_rows(scenario, &rows, query_words)
    }

    pub fn eval_batch(&self, scenario: Scenario, examples: &[Example], split: Split, query_words: usize) -> Result<SequenceBatch> {
        let rows = examples
            .iter()
            .map(|&ex| self.eval_row(ex, split))
            .collect::<Result<Vec<_>>>()?;
        SequenceBatch::from_rows(scenario, &rows, query_words)
    }
}

/// Shuffled mini-batches with similar history lengths grouped together:
/// examples are shuffled, sorted by length within windows of 32 batches,
/// cut into batches, and the batch order is shuffled again.
pub fn plan_batches(examples: &[Example], batch_size: usize, key: &[u64]) -> Vec<Vec<Example>> {
    let mut rng = rng_for(key);
    let mut order = examples.to_vec();
    order.shuffle(&mut rng);
    let window = batch_size * 32;
    let mut batches = Vec::with_capacity(order.len() / batch_size.max(1) + 1);
    for chunk in order.chunks_mut(window) {
        chunk.sort_by_key(Example::history_len);
        batches.extend(chunk.chunks(batch_size).map(<[Example]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Evaluation batches in length order; the result order does not matter
/// for averaged metrics.
pub fn eval_batches(examples: &[Example], batch_size: usize) -> Vec<Vec<Example>> {
    let mut order = examples.to_vec();
    order.sort_by_key(|e| (e.history_len(), e.seq));
    order.chunks(batch_size).map(<[Example]>::to_vec).collect()
}
