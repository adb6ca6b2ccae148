//! Uniform negative sampling outside a user's history.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Draws `n` distinct products from `1..=n_products`, none of them in
/// `history` (sorted) or equal to `target`. The stream is fixed by `key`.
pub fn sample_negatives(history: &[u32], target: u32, n_products: usize, n: usize, key: &[u64]) -> Result<Vec<u32>> {
    let blocked = history.len() + usize::from(history.binary_search(&target).is_err());
    let available = n_products.saturating_sub(blocked);
    if available < n {
        return Err(Error::data(format!(
            "catalog of {n_products} products leaves {available} candidates outside the history, {n} negatives requested"
        )));
    }
    let mut rng = rng_for(key);
    let mut picked = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = rng.gen_range(1..=n_products as u32);
        if p != target && history.binary_search(&p).is_err() && picked.insert(p) {
            out.push(p);
        }
    }
    Ok(out)
}
