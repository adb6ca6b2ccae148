//! Dataset records, preprocessing, example construction, negative sampling,
//! query building and the synthetic generator.

pub mod examples;
pub mod negatives;
pub mod preprocess;
pub mod records;
pub mod synthetic;
pub mod tfidf;

pub use examples::{eval_batches, history_row, make_examples, plan_batches, Example, ExampleBuilder, Split};
pub use negatives::sample_negatives;
pub use preprocess::{preprocess, Dataset, DatasetManifest, Event, PreprocessConfig, ScenarioStats, Sequence, SplitSummary};
pub use records::{read_json, read_jsonl, read_records, write_json, write_jsonl, InteractionRecord, Scenario, UserRecord};
pub use synthetic::{generate_synthetic, BoundaryRecord, SyntheticConfig, SyntheticData};
pub use tfidf::{ingest_reviews, tfidf_queries, tokenize, ReviewInteraction, TfIdf};
