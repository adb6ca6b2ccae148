//! Synthetic behavior logs with planted intents and session boundaries.
//!
//! Every product belongs to one intent and every intent owns a disjoint
//! block of query words. A user has a few favorite intents and moves
//! through them in sessions: a run of interactions drawn from one intent's
//! pool (Zipf popularity), then a switch to another favorite, usually the
//! next one in the user's cyclic order. Gaps between timestamps are small
//! inside a session and large between sessions.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::records::{Scenario, UserRecord};
use crate::error::{Error, Result};
use crate::seeding::{purpose, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub products: usize,
    pub intents: usize,
    /// When set, intent `k` owns products `k·n + 1 ..= (k+1)·n` and
    /// `intents · n` must equal `products`. Otherwise products are dealt
    /// round-robin.
    pub products_per_intent: Option<usize>,
    pub words_per_intent: usize,
    /// Inclusive range of words per query.
    pub query_words: (usize, usize),
    /// Inclusive range of session lengths.
    pub session_len: (usize, usize),
    /// Inclusive range of interactions per user and scenario.
    pub interactions: (usize, usize),
    pub favorite_intents: usize,
    /// Probability that a session switches to the next favorite rather than
    /// a random other favorite.
    pub next_favorite: f64,
    /// Share of interactions replaced by a uniformly random product.
    pub noise: f64,
    pub zipf_exponent: f64,
    /// Inclusive ranges of timestamp gaps inside and between sessions.
    pub gap_within: (i64, i64),
    pub gap_between: (i64, i64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            products: 500,
            intents: 8,
            products_per_intent: None,
            words_per_intent: 20,
            query_words: (2, 4),
            session_len: (4, 8),
            interactions: (12, 20),
            favorite_intents: 3,
            next_favorite: 0.7,
            noise: 0.1,
            zipf_exponent: 1.0,
            gap_within: (1, 10),
            gap_between: (100, 1000),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.users == 0 || self.intents == 0 || self.products < self.intents {
            return fail(format!(
                "need users > 0 and at least one product per intent ({} products, {} intents)",
                self.products, self.intents
            ));
        }
        if let Some(n) = self.products_per_intent {
            if n * self.intents != self.products {
                return fail(format!(
                    "{} intents × {n} products per intent does not match {} products",
                    self.intents, self.products
                ));
            }
        }
        let ranges = [
            ("query_words", self.query_words),
            ("session_len", self.session_len),
            ("interactions", self.interactions),
        ];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return fail(format!("{name} range ({lo}, {hi}) is empty or starts at 0"));
            }
        }
        if self.words_per_intent < self.query_words.1 {
            return fail("words_per_intent must cover the longest query".into());
        }
        if self.favorite_intents == 0 || self.favorite_intents > self.intents {
            return fail(format!("favorite_intents must lie in 1..={}", self.intents));
        }
        for (name, p) in [("next_favorite", self.next_favorite), ("noise", self.noise)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be a probability, got {p}"));
            }
        }
        if self.gap_within.0 < 0 || self.gap_within.0 > self.gap_within.1 || self.gap_between.0 > self.gap_between.1 {
            return fail("timestamp gap ranges are invalid".into());
        }
        Ok(())
    }

    /// Intent of product `p` (1-based).
    pub fn intent_of(&self, p: u64) -> usize {
        match self.products_per_intent {
            Some(n) => (p as usize - 1) / n,
            None => (p as usize - 1) % self.intents,
        }
    }

    /// Products of intent `k`, ascending (most popular first).
    pub fn pool(&self, k: usize) -> Vec<u64> {
        (1..=self.products as u64).filter(|&p| self.intent_of(p) == k).collect()
    }

    /// Word ids of intent `k`.
    pub fn words(&self, k: usize) -> std::ops::RangeInclusive<u64> {
        let w = self.words_per_intent as u64;
        (k as u64 * w + 1)..=((k as u64 + 1) * w)
    }
}

/// Planted structure of one generated sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub user: u64,
    pub scenario: Scenario,
    /// Positions (0-based, chronological) where a new session starts, excluding 0.
    pub boundaries: Vec<usize>,
    /// Timestamps of every session's first interaction, including the first.
    pub session_starts: Vec<i64>,
    /// Planted intent of every interaction.
    pub intents: Vec<usize>,
}

pub struct SyntheticData {
    pub records: Vec<UserRecord>,
    pub boundaries: Vec<BoundaryRecord>,
}

struct Event {
    product: u64,
    time: i64,
    intent: usize,
    session_start: bool,
}

fn sequence(cfg: &SyntheticConfig, favorites: &[usize], pools: &[(Vec<u64>, WeightedIndex<f64>)], rng: &mut impl Rng) -> Vec<Event> {
    let n = rng.gen_range(cfg.interactions.0..=cfg.interactions.1);
    let mut out = Vec::with_capacity(n);
    let mut slot = rng.gen_range(0..favorites.len());
    let mut time = rng.gen_range(0..1000);
    while out.len() < n {
        let len = rng.gen_range(cfg.session_len.0..=cfg.session_len.1);
        let intent = favorites[slot];
        for j in 0..len.min(n - out.len()) {
            if j > 0 {
                time += rng.gen_range(cfg.gap_within.0..=cfg.gap_within.1);
            }
            let product = if rng.gen_bool(cfg.noise) {
                rng.gen_range(1..=cfg.products as u64)
            } else {
                let (pool, weights) = &pools[intent];
                pool[weights.sample(rng)]
            };
            out.push(Event {
                product,
                time,
                intent,
                session_start: j == 0,
            });
        }
        time += rng.gen_range(cfg.gap_between.0..=cfg.gap_between.1);
        if favorites.len() > 1 {
            slot = if rng.gen_bool(cfg.next_favorite) {
                (slot + 1) % favorites.len()
            } else {
                let others: Vec<usize> = (0..favorites.len()).filter(|&s| s != slot).collect();
                *others.choose(rng).expect("at least one other favorite")
            };
        }
    }
    out
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let pools: Vec<(Vec<u64>, WeightedIndex<f64>)> = (0..cfg.intents)
        .map(|k| {
            let pool = cfg.pool(k);
            let weights: Vec<f64> = (1..=pool.len()).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
            let dist = WeightedIndex::new(weights).expect("non-empty positive weights");
            (pool, dist)
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.users);
    let mut boundaries = Vec::with_capacity(2 * cfg.users);
    for user in 1..=cfg.users as u64 {
        let mut rng = rng_for(&[cfg.seed, purpose::SYNTHETIC, user]);
        let mut all: Vec<usize> = (0..cfg.intents).collect();
        all.shuffle(&mut rng);
        let favorites = &all[..cfg.favorite_intents];
        let mut record = UserRecord {
            user,
            ..UserRecord::default()
        };
        for scenario in Scenario::BOTH {
            let events = sequence(cfg, favorites, &pools, &mut rng);
            boundaries.push(BoundaryRecord {
                user,
                scenario,
                boundaries: events.iter().enumerate().skip(1).filter(|(_, e)| e.session_start).map(|(i, _)| i).collect(),
                session_starts: events.iter().filter(|e| e.session_start).map(|e| e.time).collect(),
                intents: events.iter().map(|e| e.intent).collect(),
            });
            match scenario {
                Scenario::Rec => record.rec = events.iter().map(|e| (e.product, e.time)).collect(),
                Scenario::Search => {
                    record.search = events
                        .iter()
                        .map(|e| {
                            let k = cfg.intent_of(e.product);
                            let vocab: Vec<u64> = cfg.words(k).collect();
                            let n = rng.gen_range(cfg.query_words.0..=cfg.query_words.1);
                            let words = vocab.choose_multiple(&mut rng, n).copied().collect();
                            (e.product, e.time, words)
                        })
                        .collect()
                }
            }
        }
        records.push(record);
    }
    Ok(SyntheticData { records, boundaries })
}
