//! Model assembly: embeddings, encoder stacks with their sharing pattern,
//! session module and predictor, plus the forward pass and loss for one
//! batch of either scenario.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::batch::SequenceBatch;
use crate::config::{MembershipMode, RunConfig, Variant};
use crate::data::Scenario;
use crate::embedding::{build_sequence_matrix, Branch, PositionalEncoding, VocabTables};
use crate::encoder::{encode_rec, encode_search, EncoderStack, StackShape};
use crate::error::{Error, Result};
use crate::numeric::{grad_check, xavier_uniform, GradCheckReport, Mode, ParamId, ParamRegistry, Real, Tape, Var};
use crate::predictor::{blend, joint_loss, score_candidates, PredictorParams};
use crate::session::{run_sessions, ssl_loss, IsmParams, LayoutSource, SessionAssignment, SessionOutput};

/// Vocabulary sizes, counting real ids only (pad id 0 excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSizes {
    pub users: usize,
    pub products: usize,
    pub words: usize,
}

#[derive(Clone, Debug)]
pub struct UnifiedSsr<F> {
    pub config: RunConfig,
    pub vocab: VocabSizes,
    pub params: ParamRegistry<F>,
    pub tables: VocabTables,
    pub positions: PositionalEncoding<F>,
    pub search_product: EncoderStack,
    pub search_query: EncoderStack,
    pub rec_product: EncoderStack,
    /// Absent when sessions are not learned.
    pub ism: Option<IsmParams>,
    pub predictor: PredictorParams,
}

pub struct ForwardOutput {
    /// `[B, C]` candidate scores.
    pub scores: Var,
    pub ssl: Option<Var>,
    pub product_sessions: Option<SessionOutput>,
    pub query_sessions: Option<SessionOutput>,
}

pub struct LossParts {
    pub joint: Var,
    pub predict: Var,
    pub ssl: Option<Var>,
}

impl<F: Real> UnifiedSsr<F> {
    pub fn new(config: RunConfig, vocab: VocabSizes) -> Result<Self> {
        config.validate()?;
        if vocab.users == 0 || vocab.products == 0 {
            return Err(Error::config("vocabulary needs at least one user and one product"));
        }
        let mut params = ParamRegistry::new();
        let seed = config.seed;
        let tables = VocabTables::register(&mut params, vocab.users, vocab.products, vocab.words, config.d, seed)?;
        let shape = StackShape {
            d: config.d,
            heads: config.heads,
            layers: config.layers,
            cross: config.variant.cross_attention(),
            dropout: config.dropout,
        };
        let search_product = EncoderStack::register(&mut params, "encoder.search_product", &shape, seed)?;
        let search_query = match config.variant {
            Variant::WoSEa => EncoderStack::register(&mut params, "encoder.search_query", &shape, seed)?,
            _ => search_product.alias(&mut params, "encoder.search_query")?,
        };
        let rec_product = match config.variant {
            Variant::WoSEb => EncoderStack::register(&mut params, "encoder.rec_product", &shape, seed)?,
            _ => search_product.alias(&mut params, "encoder.rec_product")?,
        };
        let ism = if config.variant.learned_sessions() {
            Some(IsmParams::register(&mut params, config.sessions, config.d)?)
        } else {
            None
        };
        let predictor = PredictorParams::register(&mut params, config.unconstrained_w)?;
        // the query branch is one step longer than the product branch
        let positions = PositionalEncoding::new(config.max_len + 1, config.d);
        Ok(Self {
            config,
            vocab,
            params,
            tables,
            positions,
            search_product,
            search_query,
            rec_product,
            ism,
            predictor,
        })
    }

    /// Distinct encoder scalars used by one scenario.
    pub fn encoder_numel(&self, scenario: Scenario) -> usize {
        let ids: BTreeSet<ParamId> = match scenario {
            Scenario::Search => self
                .search_product
                .param_ids()
                .into_iter()
                .chain(self.search_query.param_ids())
                .collect(),
            Scenario::Rec => self.rec_product.param_ids().into_iter().collect(),
        };
        ids.into_iter().map(|id| self.params.get(id).len()).sum()
    }

    fn membership_mode(&self, mode: Mode) -> MembershipMode {
        match mode {
            Mode::Train => MembershipMode::Soft,
            Mode::Eval => self.config.eval_membership,
        }
    }

    fn sessions(
        &self,
        tape: &mut Tape<'_, F>,
        h: Var,
        valid: &[usize],
        times: &[i64],
    ) -> Result<Option<SessionOutput>> {
        if !self.config.variant.session_module() {
            return Ok(None);
        }
        let source = match &self.ism {
            Some(ism) => LayoutSource::Learned(ism),
            None => LayoutSource::TimeGaps(times),
        };
        let mode = self.membership_mode(tape.mode());
        run_sessions(tape, h, valid, self.config.sessions, source, mode, self.config.tau).map(Some)
    }

    pub fn forward(&self, tape: &mut Tape<'_, F>, batch: &SequenceBatch) -> Result<ForwardOutput> {
        if batch.width > self.config.max_len {
            return Err(Error::data(format!(
                "history of {} exceeds max_len {}",
                batch.width, self.config.max_len
            )));
        }
        let last: Vec<usize> = batch.lens.iter().map(|l| l - 1).collect();
        let ep = build_sequence_matrix(tape, &self.tables, &self.positions, batch, Branch::Product)?;
        let mask_p = batch.product_mask();
        match batch.scenario {
            Scenario::Search => {
                let eq = build_sequence_matrix(tape, &self.tables, &self.positions, batch, Branch::Query)?;
                let mask_q = batch.query_mask();
                let (hp, hq) = encode_search(tape, &self.search_product, &self.search_query, ep, &mask_p, eq, &mask_q)?;
                let sp = self.sessions(tape, hp, &batch.lens, &batch.product_times)?;
                let sq = self.sessions(tape, hq, &batch.query_lens(), &batch.query_times)?;
                let (fp_all, fq_all, ssl) = match (&sp, &sq) {
                    (Some(p), Some(q)) => (p.enhanced, q.enhanced, Some(ssl_loss(tape, p.reps, Some(q.reps))?)),
                    _ => (hp, hq, None),
                };
                let fp = tape.take_rows(fp_all, &last)?;
                let fq = tape.take_rows(fq_all, &batch.lens)?;
                let w = self.predictor.weight(tape);
                let f = blend(tape, w, fp, fq)?;
                let scores = score_candidates(tape, self.tables.products, f, &batch.candidates, batch.n_candidates)?;
                Ok(ForwardOutput {
                    scores,
                    ssl,
                    product_sessions: sp,
                    query_sessions: sq,
                })
            }
            Scenario::Rec => {
                let h = encode_rec(tape, &self.rec_product, ep, &mask_p)?;
                let sp = self.sessions(tape, h, &batch.lens, &batch.product_times)?;
                let (f_all, ssl) = match &sp {
                    Some(p) => (p.enhanced, Some(ssl_loss(tape, p.reps, None)?)),
                    None => (h, None),
                };
                let f = tape.take_rows(f_all, &last)?;
                let scores = score_candidates(tape, self.tables.products, f, &batch.candidates, batch.n_candidates)?;
                Ok(ForwardOutput {
                    scores,
                    ssl,
                    product_sessions: sp,
                    query_sessions: None,
                })
            }
        }
    }

    /// Joint loss of a training batch. Every row's positive must sit in
    /// candidate column 0.
    pub fn loss(&self, tape: &mut Tape<'_, F>, batch: &SequenceBatch) -> Result<LossParts> {
        if batch.target_col.iter().any(|&c| c != 0) {
            return Err(Error::data("training batches keep the positive in column 0"));
        }
        let out = self.forward(tape, batch)?;
        let predict = tape.bce(out.scores)?;
        let joint = joint_loss(tape, predict, out.ssl, self.config.alpha)?;
        Ok(LossParts {
            joint,
            predict,
            ssl: out.ssl,
        })
    }

    /// Eval-mode scores, one row per batch row.
    pub fn score(&self, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.params, Mode::Eval, 0);
        let out = self.forward(&mut tape, batch)?;
        Ok(tape
            .value(out.scores)
            .chunks(batch.n_candidates)
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    /// Hard product-branch session assignments of every row, in eval mode.
    pub fn session_assignments(&self, batch: &SequenceBatch, ids: &[u64]) -> Result<Vec<SessionAssignment>> {
        let mut tape = Tape::new(&self.params, Mode::Eval, 0);
        let out = self.forward(&mut tape, batch)?;
        let Some(sp) = out.product_sessions else {
            return Err(Error::config(format!("variant {} has no sessions", self.config.variant)));
        };
        let n = self.config.sessions;
        let ranges = tape.value(sp.ranges);
        Ok(batch
            .lens
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let r = (0..n)
                    .map(|i| (ranges[(b * n + i) * 2].as_f64(), ranges[(b * n + i) * 2 + 1].as_f64()))
                    .collect();
                SessionAssignment::from_ranges(ids.get(b).copied().unwrap_or(b as u64), len, r)
            })
            .collect())
    }
}

impl UnifiedSsr<f64> {
    /// Finite-difference check of the summed joint loss over `batches`, in
    /// eval mode (dropout off).
    pub fn check_gradients(&mut self, batches: &[SequenceBatch], h: f64, tol: f64) -> Result<GradCheckReport> {
        let mut params = std::mem::take(&mut self.params);
        let report = grad_check(&mut params, h, tol, |tape| {
            let mut total: Option<Var> = None;
            for b in batches {
                let j = self.loss(tape, b)?.joint;
                total = Some(match total {
                    Some(t) => tape.add(t, j)?,
                    None => j,
                });
            }
            total.ok_or_else(|| Error::data("gradient check needs at least one batch"))
        });
        self.params = params;
        report
    }

    /// Replaces the session projection with a small random draw, moving the
    /// layout off the exact uniform split where range clamps have kinks.
    pub fn jitter_session_projection(&mut self, scale: f64, seed: u64) {
        if let Some(ism) = &self.ism {
            let t = self.params.get_mut(ism.w);
            let noise = xavier_uniform::<f64>(t.shape(), seed);
            for (v, n) in t.values_mut().iter_mut().zip(noise.values()) {
                *v = scale * n;
            }
        }
    }
}
