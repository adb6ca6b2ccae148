use crate::data::Scenario;
use crate::error::{Error, Result};

/// One training or evaluation example before padding.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub user: u32,
    /// History products, oldest first.
    pub products: Vec<u32>,
    pub product_times: Vec<i64>,
    /// Search only: one query per history step plus the next query.
    pub queries: Vec<Vec<u32>>,
    pub query_times: Vec<i64>,
    pub candidates: Vec<u32>,
    pub target_col: usize,
}

/// Right-padded batch of sequences. Positions at or beyond a row's valid
/// length hold pad id 0. In search batches, product step `t` pairs with
/// query step `t` and the query branch carries one extra step (the query
/// issued for the predicted interaction).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub scenario: Scenario,
    pub users: Vec<u32>,
    pub width: usize,
    pub products: Vec<u32>,
    pub lens: Vec<usize>,
    pub product_times: Vec<i64>,
    pub query_words: usize,
    pub queries: Vec<u32>,
    pub query_times: Vec<i64>,
    pub n_candidates: usize,
    pub candidates: Vec<u32>,
    pub target_col: Vec<usize>,
}

impl SequenceBatch {
    pub fn from_rows(scenario: Scenario, rows: &[BatchRow], query_words: usize) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::data("empty batch"))?;
        if query_words == 0 {
            return Err(Error::config("max query words must be positive"));
        }
        let n_candidates = first.candidates.len();
        let width = rows.iter().map(|r| r.products.len()).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::data("batch rows need at least one history item"));
        }
        let b = rows.len();
        let mut out = SequenceBatch {
            scenario,
            users: Vec::with_capacity(b),
            width,
            products: vec![0; b * width],
            lens: Vec::with_capacity(b),
            product_times: vec![0; b * width],
            query_words,
            queries: Vec::new(),
            query_times: Vec::new(),
            n_candidates,
            candidates: Vec::with_capacity(b * n_candidates),
            target_col: Vec::with_capacity(b),
        };
        if scenario == Scenario::Search {
            out.queries = vec![0; b * (width + 1) * query_words];
            out.query_times = vec![0; b * (width + 1)];
        }
        for (i, row) in rows.iter().enumerate() {
            let len = row.products.len();
            if len == 0 {
                return Err(Error::data(format!("row {i} has an empty history")));
            }
            if row.product_times.len() != len {
                return Err(Error::data(format!("row {i}: timestamps do not match history")));
            }
            if row.candidates.len() != n_candidates || row.target_col >= n_candidates {
                return Err(Error::data(format!("row {i}: inconsistent candidate list")));
            }
            out.users.push(row.user);
            out.lens.push(len);
            out.products[i * width..i * width + len].copy_from_slice(&row.products);
            out.product_times[i * width..i * width + len].copy_from_slice(&row.product_times);
            if scenario == Scenario::Search {
                if row.queries.len() != len + 1 || row.query_times.len() != len + 1 {
                    return Err(Error::data(format!(
                        "row {i}: search rows need {} queries, got {}",
                        len + 1,
                        row.queries.len()
                    )));
                }
                for (t, q) in row.queries.iter().enumerate() {
                    let base = (i * (width + 1) + t) * query_words;
                    for (w, &word) in q.iter().take(query_words).enumerate() {
                        out.queries[base + w] = word;
                    }
                }
                out.query_times[i * (width + 1)..i * (width + 1) + len + 1].copy_from_slice(&row.query_times);
            }
            out.candidates.extend_from_slice(&row.candidates);
            out.target_col.push(row.target_col);
        }
        Ok(out)
    }

    pub fn batch_size(&self) -> usize {
        self.users.len()
    }

    /// Width of the query branch (`width + 1`).
    pub fn query_width(&self) -> usize {
        self.width + 1
    }

    pub fn query_lens(&self) -> Vec<usize> {
        self.lens.iter().map(|l| l + 1).collect()
    }

    pub fn product_mask(&self) -> Vec<bool> {
        mask(&self.lens, self.width)
    }

    pub fn query_mask(&self) -> Vec<bool> {
        mask(&self.query_lens(), self.query_width())
    }

    pub fn candidates_row(&self, b: usize) -> &[u32] {
        &self.candidates[b * self.n_candidates..(b + 1) * self.n_candidates]
    }
}

pub(crate) fn mask(lens: &[usize], width: usize) -> Vec<bool> {
    let mut m = vec![false; lens.len() * width];
    for (b, &l) in lens.iter().enumerate() {
        m[b * width..b * width + l].iter_mut().for_each(|v| *v = true);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(products: Vec<u32>, search: bool) -> BatchRow {
        let n = products.len();
        BatchRow {
            user: 1,
            product_times: (0..n as i64).collect(),
            queries: if search { (0..=n).map(|t| vec![t as u32 + 1; 20]).collect() } else { vec![] },
            query_times: if search { (0..=n as i64).collect() } else { vec![] },
            products,
            candidates: vec![9, 8],
            target_col: 0,
        }
    }

    #[test]
    fn pads_right_and_truncates_queries() {
        let rows = [row(vec![3, 4, 5], true), row(vec![6], true)];
        let b = SequenceBatch::from_rows(Scenario::Search, &rows, 16).unwrap();
        assert_eq!(b.width, 3);
        assert_eq!(b.products, vec![3, 4, 5, 6, 0, 0]);
        assert_eq!(b.query_width(), 4);
        assert_eq!(b.query_lens(), vec![4, 2]);
        assert_eq!(b.queries.len(), 2 * 4 * 16);
        // second row: steps 0 and 1 valid, rest pad
        let base = 4 * 16;
        assert!(b.queries[base..base + 16].iter().all(|&w| w == 1));
        assert!(b.queries[base + 2 * 16..].iter().all(|&w| w == 0));
        assert_eq!(b.product_mask(), vec![true, true, true, true, false, false]);
    }

    #[test]
    fn search_rows_need_next_query() {
        let mut r = row(vec![3, 4], true);
        r.queries.pop();
        assert!(SequenceBatch::from_rows(Scenario::Search, &[r], 4).is_err());
    }
}
