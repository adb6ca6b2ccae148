//! Ranking metrics over candidate lists: hit ratio and NDCG at K.

use std::fmt::{self, Write as _};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TieBreak, Variant};
use crate::data::Scenario;
use crate::error::{Error, Result};

/// 0-based position of `scores[target]` in a descending sort. Stable mode
/// puts tied candidates with a lower index first; random mode places the
/// target uniformly among its ties.
pub fn rank(scores: &[f64], target: usize, tie_break: TieBreak, rng: &mut impl Rng) -> usize {
    let s = scores[target];
    let above = scores.iter().filter(|&&x| x > s).count();
    match tie_break {
        TieBreak::Stable => above + scores[..target].iter().filter(|&&x| x == s).count(),
        TieBreak::Random => {
            let ties = scores.iter().filter(|&&x| x == s).count();
            above + rng.gen_range(0..ties)
        }
    }
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank < k {
        1.0
    } else {
        0.0
    }
}

/// With a single relevant item the ideal DCG is 1, so NDCG is the gain
/// `1 / log2(rank + 2)` inside the cutoff.
pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank < k {
        1.0 / ((rank + 2) as f64).log2()
    } else {
        0.0
    }
}

/// Sums of per-user metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub n: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, rank: usize) {
        self.hr5 += hit_at(rank, 5);
        self.hr10 += hit_at(rank, 10);
        self.ndcg5 += ndcg_at(rank, 5);
        self.ndcg10 += ndcg_at(rank, 10);
        self.n += 1;
    }

    pub fn ndcg10_mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.ndcg10 / self.n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub n_users: usize,
    pub seed: u64,
    pub variant: Variant,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_accumulator(acc: &MetricsAccumulator, scenario: Scenario, seed: u64, variant: Variant, config_hash: String) -> Self {
        let mean = |x: f64| if acc.n == 0 { 0.0 } else { x / acc.n as f64 };
        Self {
            scenario,
            hr5: mean(acc.hr5),
            hr10: mean(acc.hr10),
            ndcg5: mean(acc.ndcg5),
            ndcg10: mean(acc.ndcg10),
            n_users: acc.n,
            seed,
            variant,
            config_hash,
        }
    }

    /// `0 ≤ NDCG@K ≤ HR@K ≤ 1` and both metrics non-decreasing in K.
    pub fn check(&self) -> Result<()> {
        const EPS: f64 = 1e-12;
        let ok = 0.0 <= self.ndcg5
            && self.ndcg5 <= self.hr5 + EPS
            && self.ndcg10 <= self.hr10 + EPS
            && self.hr5 <= self.hr10 + EPS
            && self.ndcg5 <= self.ndcg10 + EPS
            && self.hr10 <= 1.0 + EPS;
        if ok {
            Ok(())
        } else {
            Err(Error::data(format!("inconsistent metrics report: {self:?}")))
        }
    }

    pub fn table_header() -> String {
        format!(
            "{:<8} {:<8} {:>6} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "scenario", "variant", "seed", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "users"
        )
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<8} {:<8} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8}",
            self.scenario.to_string(),
            self.variant.tag(),
            self.seed,
            self.hr5,
            self.hr10,
            self.ndcg5,
            self.ndcg10,
            self.n_users
        )
    }

    /// Header plus one row per report.
    pub fn table(reports: &[MetricsReport]) -> String {
        let mut out = Self::table_header();
        for r in reports {
            let _ = write!(out, "\n{}", r.table_row());
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Self::table(std::slice::from_ref(self)))
    }
}
