//! Small self-checks runnable without a dataset.

use rand::Rng;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::batch::{BatchRow, SequenceBatch};
use crate::config::RunConfig;
use crate::data::{eval_batches, make_examples, BoundaryRecord, Dataset, ExampleBuilder, Scenario, Split};
use crate::error::{Error, Result};
use crate::model::{UnifiedSsr, VocabSizes};
use crate::numeric::{GradCheckReport, Real};
use crate::seeding::rng_for;
use crate::session::boundary_error;

/// Configuration of the default gradient check: d 8, 2 heads, 2 layers,
/// 2 sessions, no dropout.
pub fn toy_config() -> RunConfig {
    RunConfig {
        d: 8,
        heads: 2,
        layers: 2,
        sessions: 2,
        dropout: 0.0,
        max_len: 8,
        ..RunConfig::default()
    }
}

pub const TOY_VOCAB: VocabSizes = VocabSizes {
    users: 2,
    products: 12,
    words: 6,
};

/// One batch per scenario: two users with eight random interactions each,
/// two-word queries, the positive plus two negatives as candidates.
pub fn toy_batches(seed: u64, t: usize) -> Result<Vec<SequenceBatch>> {
    let mut rng = rng_for(&[seed, 0x70f]);
    let mut rows = Vec::new();
    for user in 1..=TOY_VOCAB.users as u32 {
        let products: Vec<u32> = (0..t).map(|_| rng.gen_range(1..=TOY_VOCAB.products as u32)).collect();
        let times: Vec<i64> = (0..=t as i64).map(|i| i * 10 + rng.gen_range(0..5)).collect();
        let queries = (0..=t)
            .map(|_| (0..2).map(|_| rng.gen_range(1..=TOY_VOCAB.words as u32)).collect())
            .collect();
        let mut candidates: Vec<u32> = Vec::new();
        while candidates.len() < 3 {
            let c = rng.gen_range(1..=TOY_VOCAB.products as u32);
            if !candidates.contains(&c) {
                candidates.push(c);
            }
        }
        rows.push(BatchRow {
            user,
            products,
            product_times: times[..t].to_vec(),
            queries,
            query_times: times,
            candidates,
            target_col: 0,
        });
    }
    Scenario::BOTH
        .iter()
        .map(|&s| SequenceBatch::from_rows(s, &rows, 2))
        .collect()
}

/// Central-difference check of the joint loss summed over both toy
/// batches, with the session projection moved off its all-zero start.
pub fn toy_gradcheck(cfg: &RunConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut model = UnifiedSsr::<f64>::new(cfg.clone(), TOY_VOCAB)?;
    model.jitter_session_projection(0.5, cfg.seed);
    let batches = toy_batches(cfg.seed, cfg.max_len)?;
    model.check_gradients(&batches, h, tol)
}

/// Agreement between learned hard sessions and planted sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecovery {
    /// Mean symmetric boundary distance over scored histories.
    pub mean_boundary_error: f64,
    /// Mean planted session length over the same histories.
    pub mean_session_len: f64,
    pub sequences: usize,
}

impl SessionRecovery {
    pub fn relative_error(&self) -> f64 {
        self.mean_boundary_error / self.mean_session_len
    }
}

/// Scores the hard product-branch sessions of every test history in
/// `scenarios` against the planted boundaries. The dataset must keep every
/// generated interaction (no filtering), so positions line up.
pub fn session_recovery<F: Real>(
    model: &UnifiedSsr<F>,
    ds: &Dataset,
    planted: &[BoundaryRecord],
    scenarios: &[Scenario],
) -> Result<SessionRecovery> {
    let by_key: BTreeMap<(u64, Scenario), &BoundaryRecord> = planted.iter().map(|b| ((b.user, b.scenario), b)).collect();
    let cfg = &model.config;
    let builder = ExampleBuilder {
        ds,
        seed: cfg.seed,
        negatives_train: cfg.negatives_train,
        eval_negatives: 1,
    };
    let (mut err, mut positions, mut sessions, mut n) = (0.0, 0usize, 0usize, 0usize);
    for &scenario in scenarios {
        let examples = make_examples(ds, scenario, Split::Test);
        for chunk in eval_batches(&examples, cfg.batch_size) {
            let batch = builder.eval_batch(scenario, &chunk, Split::Test, cfg.max_query_words)?;
            let ids: Vec<u64> = chunk.iter().map(|e| e.seq as u64).collect();
            for (ex, a) in chunk.iter().zip(model.session_assignments(&batch, &ids)?) {
                let seq = &ds.sequences[ex.seq];
                let user = ds.manifest.user_ids[seq.user as usize - 1];
                let truth = by_key
                    .get(&(user, scenario))
                    .ok_or_else(|| Error::data(format!("no planted boundaries for user {user} ({scenario})")))?;
                if truth.intents.len() != seq.len() {
                    return Err(Error::data(format!(
                        "user {user} ({scenario}): {} planted positions but {} in the dataset",
                        truth.intents.len(),
                        seq.len()
                    )));
                }
                let planted: Vec<usize> = truth.boundaries.iter().copied().filter(|&b| b < a.valid_len).collect();
                err += boundary_error(&a.boundaries(), &planted, a.valid_len);
                positions += a.valid_len;
                sessions += planted.len() + 1;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::data("no test histories to score"));
    }
    Ok(SessionRecovery {
        mean_boundary_error: err / n as f64,
        mean_session_len: positions as f64 / sessions as f64,
        sequences: n,
    })
}
