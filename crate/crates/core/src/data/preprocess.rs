//! Filtering, id remapping, chronological ordering, length chunking and
//! the pretrain/task split.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use std::path::Path;

use super::records::{read_json, read_records, write_json, write_jsonl, Scenario, UserRecord};
use crate::error::{Error, Result};
use crate::model::VocabSizes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Users and products with fewer interactions (both scenarios
    /// together) are dropped, repeatedly, until none remain.
    pub min_interactions: usize,
    /// Sequences longer than this are cut into consecutive pieces.
    pub max_len: usize,
    /// Leading share of each sequence used for joint pretraining.
    pub pretrain_ratio: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_interactions: 10,
            max_len: 100,
            pretrain_ratio: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub product: u32,
    pub time: i64,
    /// Empty in recommendation sequences.
    pub query: Vec<u32>,
}

/// One chronological piece (at most `max_len` long) of a user's behavior in
/// one scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub id: usize,
    pub user: u32,
    pub scenario: Scenario,
    pub events: Vec<Event>,
    pub pretrain_len: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn task_len(&self) -> usize {
        self.events.len() - self.pretrain_len
    }

    /// Newest interaction, when it belongs to the task part and has history.
    pub fn test_target(&self) -> Option<usize> {
        let n = self.len();
        (self.task_len() >= 1 && n >= 2).then(|| n - 1)
    }

    /// Second newest interaction, under the same conditions.
    pub fn valid_target(&self) -> Option<usize> {
        let n = self.len();
        (self.task_len() >= 2 && n >= 3).then(|| n - 2)
    }

    pub fn pretrain_targets(&self) -> std::ops::Range<usize> {
        1.min(self.pretrain_len)..self.pretrain_len
    }

    /// Task-part targets before the validation and test interactions.
    pub fn finetune_targets(&self) -> std::ops::Range<usize> {
        let end = self.len() - self.task_len().min(2);
        self.pretrain_len.max(1).min(end)..end
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub interactions: usize,
    pub sequences: usize,
    pub pretrain_targets: usize,
    pub train_targets: usize,
    pub valid_targets: usize,
    pub test_targets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub vocab: VocabSizes,
    pub config: PreprocessConfig,
    pub search: ScenarioStats,
    pub rec: ScenarioStats,
    /// Original id of dense user `i + 1`, likewise for products and words.
    pub user_ids: Vec<u64>,
    pub product_ids: Vec<u64>,
    pub word_ids: Vec<u64>,
    /// SHA-256 of the processed records in wire format.
    pub records_hash: String,
}

impl DatasetManifest {
    pub fn stats(&self, scenario: Scenario) -> &ScenarioStats {
        match scenario {
            Scenario::Search => &self.search,
            Scenario::Rec => &self.rec,
        }
    }
}

/// Preprocessed data: records with dense ids in chronological order, the
/// derived sequences, and every user's full product history.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<UserRecord>,
    pub sequences: Vec<Sequence>,
    /// Sorted distinct products per dense user id (index 0 unused).
    pub histories: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn sequences_of(&self, scenario: Scenario) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.scenario == scenario)
    }

    pub fn history(&self, user: u32) -> &[u32] {
        &self.histories[user as usize]
    }

    /// Writes `manifest.json`, the filtered records with dense ids
    /// (`records.jsonl`) and one split summary per sequence (`splits.jsonl`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        write_jsonl(&dir.join(RECORDS_FILE), &self.records)?;
        write_jsonl(&dir.join(SPLITS_FILE), self.sequences.iter().map(SplitSummary::of))
    }

    /// Reads a directory written by [`Dataset::save`]. The sequences are
    /// rebuilt from the records and checked against the manifest hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let records = read_records(&dir.join(RECORDS_FILE))?;
        let mut ds = preprocess(records, &manifest.config)?;
        if ds.manifest.records_hash != manifest.records_hash {
            return Err(Error::data(format!(
                "{}: records do not match the manifest hash",
                dir.display()
            )));
        }
        ds.manifest = manifest;
        Ok(ds)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SPLITS_FILE: &str = "splits.jsonl";

/// Split boundaries of one sequence, as written to `splits.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub sequence: usize,
    pub user: u32,
    pub scenario: Scenario,
    pub len: usize,
    pub pretrain_len: usize,
    pub train_targets: (usize, usize),
    pub valid_target: Option<usize>,
    pub test_target: Option<usize>,
}

impl SplitSummary {
    pub fn of(s: &Sequence) -> Self {
        let t = s.finetune_targets();
        Self {
            sequence: s.id,
            user: s.user,
            scenario: s.scenario,
            len: s.len(),
            pretrain_len: s.pretrain_len,
            train_targets: (t.start, t.end),
            valid_target: s.valid_target(),
            test_target: s.test_target(),
        }
    }
}

fn filter_to_fixpoint(records: &mut Vec<UserRecord>, min: usize) {
    loop {
        let mut product_counts: BTreeMap<u64, usize> = BTreeMap::new();
        for r in records.iter() {
            for i in r.interactions() {
                *product_counts.entry(i.product).or_default() += 1;
            }
        }
        let keep = |p: &u64| product_counts[p] >= min;
        let mut changed = false;
        for r in records.iter_mut() {
            let before = r.len();
            r.rec.retain(|(p, _)| keep(p));
            r.search.retain(|(p, _, _)| keep(p));
            changed |= r.len() != before;
        }
        let before = records.len();
        records.retain(|r| r.len() >= min);
        changed |= records.len() != before;
        if !changed {
            return;
        }
    }
}

fn dense_map(ids: BTreeSet<u64>) -> (BTreeMap<u64, u32>, Vec<u64>) {
    let order: Vec<u64> = ids.into_iter().collect();
    let map = order.iter().enumerate().map(|(i, &id)| (id, i as u32 + 1)).collect();
    (map, order)
}

fn records_hash(records: &[UserRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_string(r).expect("record serializes").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Runs the whole preprocessing chain. Applying it to its own output
/// records reproduces them unchanged.
pub fn preprocess(mut records: Vec<UserRecord>, cfg: &PreprocessConfig) -> Result<Dataset> {
    if cfg.max_len < 2 || !(cfg.pretrain_ratio >= 0.0 && cfg.pretrain_ratio <= 1.0) {
        return Err(Error::config("max_len must be at least 2 and pretrain_ratio in [0, 1]"));
    }
    let raw_users = records.len();
    let raw_interactions: usize = records.iter().map(UserRecord::len).sum();
    for r in &records {
        r.validate()?;
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.user)) {
        return Err(Error::data(format!("user {} appears on more than one line", dup.user)));
    }
    filter_to_fixpoint(&mut records, cfg.min_interactions);
    if records.is_empty() {
        return Err(Error::data(format!(
            "no data left after filtering: {raw_users} users and {raw_interactions} interactions in, \
             threshold {} interactions per user and per product",
            cfg.min_interactions
        )));
    }

    let (user_map, user_ids) = dense_map(records.iter().map(|r| r.user).collect());
    let (product_map, product_ids) = dense_map(records.iter().flat_map(|r| r.interactions().map(|i| i.product)).collect());
    let (word_map, word_ids) = dense_map(
        records
            .iter()
            .flat_map(|r| r.search.iter().flat_map(|(_, _, w)| w.iter().copied()))
            .collect(),
    );

    let mut dense: Vec<UserRecord> = records
        .into_iter()
        .map(|r| {
            let mut rec: Vec<(u64, i64)> = r.rec.iter().map(|&(p, t)| (product_map[&p] as u64, t)).collect();
            let mut search: Vec<(u64, i64, Vec<u64>)> = r
                .search
                .iter()
                .map(|(p, t, w)| (product_map[p] as u64, *t, w.iter().map(|x| word_map[x] as u64).collect()))
                .collect();
            // stable: equal timestamps keep input order
            rec.sort_by_key(|&(_, t)| t);
            search.sort_by_key(|(_, t, _)| *t);
            UserRecord {
                user: user_map[&r.user] as u64,
                rec,
                search,
            }
        })
        .collect();
    dense.sort_by_key(|r| r.user);

    let mut sequences = Vec::new();
    let mut histories = vec![Vec::new(); user_ids.len() + 1];
    let mut stats = [ScenarioStats::default(), ScenarioStats::default()];
    for r in &dense {
        let user = r.user as u32;
        let mut hist: Vec<u32> = r.interactions().map(|i| i.product as u32).collect();
        hist.sort_unstable();
        hist.dedup();
        histories[user as usize] = hist;
        let streams: [(Scenario, Vec<Event>); 2] = [
            (
                Scenario::Search,
                r.search
                    .iter()
                    .map(|(p, t, w)| Event {
                        product: *p as u32,
                        time: *t,
                        query: w.iter().map(|&x| x as u32).collect(),
                    })
                    .collect(),
            ),
            (
                Scenario::Rec,
                r.rec
                    .iter()
                    .map(|&(p, t)| Event {
                        product: p as u32,
                        time: t,
                        query: Vec::new(),
                    })
                    .collect(),
            ),
        ];
        for (k, (scenario, events)) in streams.into_iter().enumerate() {
            stats[k].interactions += events.len();
            for piece in events.chunks(cfg.max_len) {
                let pretrain_len = (piece.len() as f64 * cfg.pretrain_ratio).floor() as usize;
                let seq = Sequence {
                    id: sequences.len(),
                    user,
                    scenario,
                    events: piece.to_vec(),
                    pretrain_len,
                };
                stats[k].sequences += 1;
                stats[k].pretrain_targets += seq.pretrain_targets().len();
                stats[k].train_targets += seq.finetune_targets().len();
                stats[k].valid_targets += usize::from(seq.valid_target().is_some());
                stats[k].test_targets += usize::from(seq.test_target().is_some());
                sequences.push(seq);
            }
        }
    }
    let [search, rec] = stats;
    let manifest = DatasetManifest {
        vocab: VocabSizes {
            users: user_ids.len(),
            products: product_ids.len(),
            words: word_ids.len(),
        },
        config: cfg.clone(),
        search,
        rec,
        user_ids,
        product_ids,
        word_ids,
        records_hash: records_hash(&dense),
    };
    Ok(Dataset {
        manifest,
        records: dense,
        sequences,
        histories,
    })
}
