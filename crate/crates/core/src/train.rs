//! Two-stage training: joint pretraining over both scenarios, then
//! per-scenario fine-tuning, plus evaluation against sampled candidates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{Alternation, RunConfig, Variant};
use crate::data::{eval_batches, make_examples, plan_batches, Dataset, Example, ExampleBuilder, Scenario, Split};
use crate::error::{Error, Result};
use crate::metrics::{rank, MetricsAccumulator, MetricsReport};
use crate::model::{UnifiedSsr, VocabSizes};
use crate::numeric::{lr_at, AdamState, Mode, Real, Tape};
use crate::seeding::{purpose, rng_for, stream_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "finetune-search")]
    FinetuneSearch,
    #[serde(rename = "finetune-rec")]
    FinetuneRec,
}

impl Stage {
    pub fn finetune(scenario: Scenario) -> Self {
        match scenario {
            Scenario::Search => Stage::FinetuneSearch,
            Scenario::Rec => Stage::FinetuneRec,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::FinetuneSearch => "finetune-search",
            Stage::FinetuneRec => "finetune-rec",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub stage: Stage,
    pub scenario: Scenario,
    pub loss: f64,
    pub ssl: Option<f64>,
    pub lr: f64,
}

/// Receives training progress. Both methods default to doing nothing.
pub trait Observer<F: Real> {
    fn log(&mut self, _entry: &LogEntry) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _stage: Stage, _epoch: usize, _model: &UnifiedSsr<F>, _optimizer: &AdamState<F>) -> Result<()> {
        Ok(())
    }
}

impl<F: Real> Observer<F> for () {}

/// Keeps every log entry in memory.
#[derive(Clone, Debug, Default)]
pub struct LogRecorder {
    pub entries: Vec<LogEntry>,
}

impl<F: Real> Observer<F> for LogRecorder {
    fn log(&mut self, entry: &LogEntry) -> Result<()> {
        self.entries.push(entry.clone());
        Ok(())
    }
}

pub fn vocab_of(ds: &Dataset) -> VocabSizes {
    ds.manifest.vocab
}

fn builder<'a>(ds: &'a Dataset, cfg: &RunConfig) -> ExampleBuilder<'a> {
    ExampleBuilder {
        ds,
        seed: cfg.seed,
        negatives_train: cfg.negatives_train,
        eval_negatives: cfg.eval_negatives,
    }
}

/// Optimizer, step counter and learning-rate schedule of one stage.
struct StageRun<'a, F: Real, O: Observer<F>> {
    stage: Stage,
    optimizer: AdamState<F>,
    step: u64,
    observer: &'a mut O,
}

impl<'a, F: Real, O: Observer<F>> StageRun<'a, F, O> {
    fn new(model: &UnifiedSsr<F>, stage: Stage, observer: &'a mut O) -> Self {
        Self {
            stage,
            optimizer: AdamState::new(&model.params, model.config.adam),
            step: 0,
            observer,
        }
    }

    fn train_batch(&mut self, model: &mut UnifiedSsr<F>, ds: &Dataset, scenario: Scenario, examples: &[Example], epoch: usize) -> Result<()> {
        let cfg = &model.config;
        let batch = builder(ds, cfg).train_batch(scenario, examples, epoch, cfg.max_query_words)?;
        let step = self.step + 1;
        let lr = lr_at(step, cfg.d, cfg.warmup as u64) * cfg.lr_factor;
        let dropout_seed = stream_seed(&[cfg.seed, purpose::DROPOUT, self.stage.code(), step]);
        let (loss, ssl, grads) = {
            let mut tape = Tape::new(&model.params, Mode::Train, dropout_seed);
            let parts = model.loss(&mut tape, &batch)?;
            let loss = tape.scalar(parts.joint).as_f64();
            let ssl = parts.ssl.map(|s| tape.scalar(s).as_f64());
            if !loss.is_finite() {
                log::error!(
                    "non-finite loss at step {step} ({}, {scenario}); batch users {:?}, targets {:?}",
                    self.stage,
                    batch.users,
                    examples
                );
                return Err(Error::Diverged {
                    step,
                    stage: self.stage.to_string(),
                    scenario: scenario.to_string(),
                    loss,
                });
            }
            (loss, ssl, tape.backward(parts.joint)?)
        };
        model.params.accumulate(&grads);
        self.optimizer.step(&mut model.params, lr)?;
        self.step = step;
        self.observer.log(&LogEntry {
            step,
            stage: self.stage,
            scenario,
            loss,
            ssl,
            lr,
        })
    }
}

/// Scenarios a variant trains on.
pub fn scenarios_of(variant: Variant) -> &'static [Scenario] {
    match variant {
        Variant::E2eRec => &[Scenario::Rec],
        Variant::E2eSearch => &[Scenario::Search],
        _ => &Scenario::BOTH,
    }
}

/// Joint pretraining on the pretraining part of every scenario the variant
/// uses. Batch alternation interleaves search and recommendation batches
/// (S, R, S, R, ...) until both are exhausted; epoch alternation trains
/// search in even epochs and recommendation in odd ones. Returns the final
/// optimizer state.
pub fn pretrain<F: Real, O: Observer<F>>(model: &mut UnifiedSsr<F>, ds: &Dataset, observer: &mut O) -> Result<AdamState<F>> {
    let cfg = model.config.clone();
    let mut pools: Vec<(Scenario, Vec<Example>)> = scenarios_of(cfg.variant)
        .iter()
        .map(|&s| (s, make_examples(ds, s, Split::Pretrain)))
        .collect();
    for (s, ex) in &pools {
        if ex.is_empty() {
            log::warn!("no {s} pretraining examples; pretraining continues on the remaining scenario");
        }
    }
    pools.retain(|(_, ex)| !ex.is_empty());
    if pools.is_empty() {
        return Err(Error::data("no pretraining examples in any scenario"));
    }
    let mut run = StageRun::new(model, Stage::Pretrain, observer);
    for epoch in 0..cfg.epochs {
        let plans: Vec<(Scenario, Vec<Vec<Example>>)> = pools
            .iter()
            .map(|(s, ex)| {
                let key = [cfg.seed, purpose::SHUFFLE, Stage::Pretrain.code(), *s as u64, epoch as u64];
                (*s, plan_batches(ex, cfg.batch_size, &key))
            })
            .collect();
        let schedule: Vec<(Scenario, &[Example])> = match cfg.alternation {
            Alternation::Batch => {
                let longest = plans.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
                (0..longest)
                    .flat_map(|i| plans.iter().filter_map(move |(s, p)| p.get(i).map(|b| (*s, b.as_slice()))))
                    .collect()
            }
            Alternation::Epoch => {
                let (s, p) = &plans[epoch % plans.len()];
                p.iter().map(|b| (*s, b.as_slice())).collect()
            }
        };
        for (s, b) in schedule {
            run.train_batch(model, ds, s, b, epoch)?;
        }
        run.observer.epoch_end(Stage::Pretrain, epoch, model, &run.optimizer)?;
    }
    Ok(run.optimizer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSummary<F> {
    pub optimizer: AdamState<F>,
    pub epochs_run: usize,
    /// Validation NDCG@10 per epoch, when early stopping is on.
    pub valid_ndcg10: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Fine-tunes on one scenario's task part with a fresh optimizer. With
/// early stopping the model is scored on validation after every epoch and
/// the best epoch's parameters are restored at the end.
pub fn finetune<F: Real, O: Observer<F>>(
    model: &mut UnifiedSsr<F>,
    ds: &Dataset,
    scenario: Scenario,
    observer: &mut O,
) -> Result<FinetuneSummary<F>> {
    let cfg = model.config.clone();
    if !scenarios_of(cfg.variant).contains(&scenario) {
        return Err(Error::config(format!("variant {} does not train on {scenario}", cfg.variant)));
    }
    if ds.sequences_of(scenario).next().is_none() {
        return Err(Error::data(format!("dataset has no {scenario} sequences")));
    }
    let stage = Stage::finetune(scenario);
    let epochs = if cfg.variant == Variant::WoFT { 0 } else { cfg.finetune_epochs };
    let examples = make_examples(ds, scenario, Split::Train);
    let mut run = StageRun::new(model, stage, observer);
    let mut valid = Vec::new();
    let mut best: Option<(usize, f64, _)> = None;
    let mut epochs_run = 0;
    for epoch in 0..epochs {
        let key = [cfg.seed, purpose::SHUFFLE, stage.code(), scenario as u64, epoch as u64];
        for b in plan_batches(&examples, cfg.batch_size, &key) {
            run.train_batch(model, ds, scenario, &b, epoch)?;
        }
        epochs_run += 1;
        run.observer.epoch_end(stage, epoch, model, &run.optimizer)?;
        if cfg.early_stopping {
            let ndcg = evaluate(model, ds, scenario, Split::Valid)?.ndcg10;
            valid.push(ndcg);
            if best.as_ref().is_none_or(|(_, b, _)| ndcg > *b) {
                best = Some((epoch, ndcg, model.params.snapshot()));
            } else if best.as_ref().is_some_and(|(e, _, _)| epoch - e >= cfg.patience) {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((e, _, snap)) => {
            model.params.load_snapshot(&snap)?;
            Some(e)
        }
        None => None,
    };
    Ok(FinetuneSummary {
        optimizer: run.optimizer,
        epochs_run,
        valid_ndcg10: valid,
        best_epoch,
    })
}

/// HR@{5,10} and NDCG@{5,10} of `score` over one example per sequence of
/// `split`. `score` maps a batch to one score row per example.
pub fn evaluate_with(
    ds: &Dataset,
    cfg: &RunConfig,
    scenario: Scenario,
    split: Split,
    mut score: impl FnMut(&crate::batch::SequenceBatch) -> Result<Vec<Vec<f64>>>,
) -> Result<MetricsReport> {
    let examples = make_examples(ds, scenario, split);
    let b = builder(ds, cfg);
    let mut rng = rng_for(&[cfg.seed, purpose::TIES, scenario as u64, split as u64]);
    let mut acc = MetricsAccumulator::default();
    for chunk in eval_batches(&examples, cfg.batch_size) {
        let batch = b.eval_batch(scenario, &chunk, split, cfg.max_query_words)?;
        let scores = score(&batch)?;
        for (row, &t) in scores.iter().zip(&batch.target_col) {
            acc.push(rank(row, t, cfg.tie_break, &mut rng));
        }
    }
    let report = MetricsReport::from_accumulator(&acc, scenario, cfg.seed, cfg.variant, cfg.full_hash());
    report.check()?;
    Ok(report)
}

pub fn evaluate<F: Real>(model: &UnifiedSsr<F>, ds: &Dataset, scenario: Scenario, split: Split) -> Result<MetricsReport> {
    evaluate_with(ds, &model.config, scenario, split, |b| model.score(b))
}

/// Pretraining followed by fine-tuning and test evaluation for each
/// scenario the variant covers. Fine-tuning starts from the same
/// pretrained parameters for every scenario.
pub fn run_pipeline<F: Real, O: Observer<F>>(cfg: &RunConfig, ds: &Dataset, observer: &mut O) -> Result<Vec<MetricsReport>> {
    let mut model = UnifiedSsr::<F>::new(cfg.clone(), vocab_of(ds))?;
    pretrain(&mut model, ds, observer)?;
    let mut reports = Vec::new();
    for &scenario in scenarios_of(cfg.variant) {
        if ds.sequences_of(scenario).next().is_none() {
            continue;
        }
        let mut tuned = model.clone();
        finetune(&mut tuned, ds, scenario, observer)?;
        reports.push(evaluate(&tuned, ds, scenario, Split::Test)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, preprocess, PreprocessConfig, SyntheticConfig};

    pub(crate) fn toy() -> Dataset {
        let data = generate_synthetic(&SyntheticConfig {
            users: 24,
            products: 60,
            intents: 4,
            interactions: (12, 16),
            ..SyntheticConfig::default()
        })
        .unwrap();
        preprocess(
            data.records,
            &PreprocessConfig {
                min_interactions: 1,
                ..PreprocessConfig::default()
            },
        )
        .unwrap()
    }

    fn cfg() -> RunConfig {
        RunConfig {
            d: 8,
            heads: 2,
            layers: 1,
            sessions: 2,
            batch_size: 16,
            epochs: 2,
            finetune_epochs: 2,
            warmup: 10,
            eval_negatives: 20,
            ..RunConfig::default()
        }
    }

    #[test]
    fn batch_alternation_in_log() {
        let ds = toy();
        let mut model = UnifiedSsr::<f64>::new(cfg(), vocab_of(&ds)).unwrap();
        let mut rec = LogRecorder::default();
        pretrain(&mut model, &ds, &mut rec).unwrap();
        let n_s = make_examples(&ds, Scenario::Search, Split::Pretrain).len().div_ceil(16);
        let n_r = make_examples(&ds, Scenario::Rec, Split::Pretrain).len().div_ceil(16);
        assert_eq!(rec.entries.len(), 2 * (n_s + n_r));
        let first: Vec<Scenario> = rec.entries[..2 * n_s.min(n_r)].iter().map(|e| e.scenario).collect();
        for (i, s) in first.iter().enumerate() {
            assert_eq!(*s, Scenario::BOTH[i % 2]);
        }
        assert!(rec.entries.windows(2).all(|w| w[1].step == w[0].step + 1 || w[1].step == 1));
    }

    #[test]
    fn zero_finetune_epochs_keep_pretrained_scores() {
        let ds = toy();
        let c = RunConfig {
            variant: Variant::WoFT,
            ..cfg()
        };
        let mut model = UnifiedSsr::<f64>::new(c, vocab_of(&ds)).unwrap();
        pretrain(&mut model, &ds, &mut ()).unwrap();
        let before = evaluate(&model, &ds, Scenario::Rec, Split::Test).unwrap();
        let summary = finetune(&mut model, &ds, Scenario::Rec, &mut ()).unwrap();
        assert_eq!(summary.epochs_run, 0);
        assert_eq!(evaluate(&model, &ds, Scenario::Rec, Split::Test).unwrap(), before);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let ds = toy();
        let c = RunConfig {
            early_stopping: true,
            patience: 2,
            finetune_epochs: 5,
            ..cfg()
        };
        let mut model = UnifiedSsr::<f64>::new(c, vocab_of(&ds)).unwrap();
        let s = finetune(&mut model, &ds, Scenario::Search, &mut ()).unwrap();
        let best = s.valid_ndcg10.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(s.valid_ndcg10[s.best_epoch.unwrap()], best);
        let now = evaluate(&model, &ds, Scenario::Search, Split::Valid).unwrap().ndcg10;
        assert_eq!(now, best);
    }

    #[test]
    fn e2e_variant_rejects_other_scenario() {
        let ds = toy();
        let c = RunConfig {
            variant: Variant::E2eRec,
            ..cfg()
        };
        let mut model = UnifiedSsr::<f64>::new(c, vocab_of(&ds)).unwrap();
        let mut rec = LogRecorder::default();
        pretrain(&mut model, &ds, &mut rec).unwrap();
        assert!(rec.entries.iter().all(|e| e.scenario == Scenario::Rec));
        assert!(finetune(&mut model, &ds, Scenario::Search, &mut ()).is_err());
    }

    #[test]
    fn search_only_when_rec_is_empty() {
        let mut ds = toy();
        ds.sequences.retain(|s| s.scenario == Scenario::Search);
        for (i, s) in ds.sequences.iter_mut().enumerate() {
            s.id = i;
        }
        let mut model = UnifiedSsr::<f64>::new(cfg(), vocab_of(&ds)).unwrap();
        let mut rec = LogRecorder::default();
        pretrain(&mut model, &ds, &mut rec).unwrap();
        assert!(!rec.entries.is_empty());
        assert!(rec.entries.iter().all(|e| e.scenario == Scenario::Search));
    }
}
