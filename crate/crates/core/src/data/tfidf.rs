//! Query construction for logs without real queries: product attribute
//! terms followed by the top TF-IDF keywords of the interaction's review.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::records::UserRecord;
use crate::error::{Error, Result};

/// Whitespace split, lowercase, punctuation stripped; empty tokens dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Document frequencies over a tokenized corpus.
#[derive(Clone, Debug, Default)]
pub struct TfIdf {
    docs: usize,
    df: BTreeMap<String, usize>,
}

impl TfIdf {
    pub fn fit(corpus: &[Vec<String>]) -> Self {
        let mut df = BTreeMap::new();
        for doc in corpus {
            for term in doc.iter().collect::<BTreeSet<_>>() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
        }
        Self { docs: corpus.len(), df }
    }

    /// Smoothed `ln((1 + D) / (1 + df)) + 1`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0);
        ((1 + self.docs) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// `count(term) / len(doc) · idf(term)` for each distinct term.
    pub fn scores(&self, doc: &[String]) -> BTreeMap<String, f64> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in doc {
            *counts.entry(t).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .map(|(t, c)| (t.to_string(), c as f64 / doc.len() as f64 * self.idf(t)))
            .collect()
    }

    /// Highest-scoring `k` terms; equal scores in lexicographic order.
    pub fn top_k(&self, doc: &[String], k: usize) -> Vec<String> {
        let mut scored: Vec<(String, f64)> = self.scores(doc).into_iter().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(t, _)| t).collect()
    }
}

/// Attribute terms of each interaction's product followed by the top `k`
/// keywords of its review, duplicates removed in order. An empty review
/// gives the attribute terms alone.
pub fn tfidf_queries(reviews: &[String], attributes: &[Vec<String>], k: usize) -> Result<Vec<Vec<String>>> {
    if reviews.len() != attributes.len() {
        return Err(Error::data("one attribute list per review is required"));
    }
    let docs: Vec<Vec<String>> = reviews.iter().map(|r| tokenize(r)).collect();
    let model = TfIdf::fit(&docs);
    Ok(docs
        .iter()
        .zip(attributes)
        .map(|(doc, attrs)| {
            let mut seen = BTreeSet::new();
            attrs
                .iter()
                .flat_map(|a| tokenize(a))
                .chain(model.top_k(doc, k))
                .filter(|t| seen.insert(t.clone()))
                .collect()
        })
        .collect())
}

/// One raw interaction carrying review text and product attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewInteraction {
    pub user: u64,
    pub product: u64,
    pub timestamp: i64,
    #[serde(default)]
    pub review: String,
    /// Category, title, brand and similar fields.
    #[serde(default)]
    pub attributes: Vec<String>,
}

/// Converts review logs into wire records. Each user's interactions are
/// ordered by time and dealt alternately to recommendation (even index)
/// and search (odd index); search interactions get a built query. Returns
/// the records and the word list (word id `i + 1` is `words[i]`).
pub fn ingest_reviews(raw: &[ReviewInteraction], k: usize) -> Result<(Vec<UserRecord>, Vec<String>)> {
    let queries = tfidf_queries(
        &raw.iter().map(|r| r.review.clone()).collect::<Vec<_>>(),
        &raw.iter().map(|r| r.attributes.clone()).collect::<Vec<_>>(),
        k,
    )?;
    let words: Vec<String> = queries.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let word_id: BTreeMap<&str, u64> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i as u64 + 1)).collect();
    let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in raw.iter().enumerate() {
        by_user.entry(r.user).or_default().push(i);
    }
    let mut records = Vec::with_capacity(by_user.len());
    for (user, mut idx) in by_user {
        idx.sort_by_key(|&i| raw[i].timestamp);
        let mut rec = UserRecord {
            user,
            ..UserRecord::default()
        };
        for (n, &i) in idx.iter().enumerate() {
            let r = &raw[i];
            if n % 2 == 0 {
                rec.rec.push((r.product, r.timestamp));
            } else {
                let q: Vec<u64> = queries[i].iter().map(|w| word_id[w.as_str()]).collect();
                if q.is_empty() {
                    return Err(Error::data(format!(
                        "user {user}: product {} at {} has neither attributes nor review words",
                        r.product, r.timestamp
                    )));
                }
                rec.search.push((r.product, r.timestamp, q));
            }
        }
        records.push(rec);
    }
    Ok((records, words))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer() {
        assert_eq!(toks("Great, GREAT phone!! 5-star"), vec!["great", "great", "phone", "5star"]);
        assert!(toks(" ... ").is_empty());
    }

    #[test]
    fn loop_oracle_on_three_documents() {
        let corpus = vec![toks("red shoe red"), toks("blue shoe"), toks("red hat")];
        let model = TfIdf::fit(&corpus);
        // independent evaluation of tf·idf with plain loops
        for doc in &corpus {
            let scores = model.scores(doc);
            for (term, got) in scores {
                let tf = doc.iter().filter(|t| **t == term).count() as f64 / doc.len() as f64;
                let df = corpus.iter().filter(|d| d.contains(&term)).count() as f64;
                let want = tf * (((1.0 + 3.0) / (1.0 + df)).ln() + 1.0);
                assert!((got - want).abs() < 1e-12, "{term}");
            }
        }
        assert!((model.idf("red") - ((4.0f64 / 3.0).ln() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn unique_word_is_selected() {
        let corpus = vec![toks("good zebra"), toks("good"), toks("good")];
        let model = TfIdf::fit(&corpus);
        assert_eq!(model.top_k(&corpus[0], 1), vec!["zebra"]);
        let max_idf = corpus.iter().flatten().map(|t| model.idf(t)).fold(0.0, f64::max);
        assert_eq!(model.idf("zebra"), max_idf);
    }

    #[test]
    fn identical_documents_tie_lexicographically() {
        let corpus = vec![toks("b a c"), toks("b a c")];
        let model = TfIdf::fit(&corpus);
        assert_eq!(model.top_k(&corpus[0], 3), vec!["a", "b", "c"]);
    }

    #[test]
    fn attributes_then_keywords() {
        let q = tfidf_queries(
            &["lovely soft scarf".into(), String::new()],
            &[vec!["Scarf".into(), "Acme".into()], vec!["Hat".into()]],
            2,
        )
        .unwrap();
        // all three review words tie; "lovely" and "scarf" win, "scarf" is already present
        assert_eq!(q[0], vec!["scarf", "acme", "lovely"]);
        assert_eq!(q[1], vec!["hat"]);
    }

    #[test]
    fn ingestion_alternates() {
        let raw: Vec<ReviewInteraction> = (0..4)
            .map(|i| ReviewInteraction {
                user: 1,
                product: 10 + i,
                timestamp: 100 - i as i64,
                review: format!("word{i}"),
                attributes: vec!["thing".into()],
            })
            .collect();
        let (records, words) = ingest_reviews(&raw, 1).unwrap();
        let r = &records[0];
        // chronological: products 13, 12, 11, 10
        assert_eq!(r.rec, vec![(13, 97), (11, 99)]);
        assert_eq!(r.search.iter().map(|s| s.0).collect::<Vec<_>>(), vec![12, 10]);
        assert!(words.contains(&"thing".to_string()));
    }
}
