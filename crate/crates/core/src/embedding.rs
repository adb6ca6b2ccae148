//! User, product and query-word embeddings and the three sequence
//! embedding matrices fed to the encoder.

use crate::batch::SequenceBatch;
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::numeric::{xavier_uniform, ParamId, ParamRegistry, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Product,
    Query,
}

/// Embedding tables. Row 0 of each is the all-zero padding row.
#[derive(Clone, Debug)]
pub struct VocabTables {
    pub users: ParamId,
    pub products: ParamId,
    pub words: ParamId,
    pub d: usize,
}

impl VocabTables {
    /// `users`, `products` and `words` count real ids; tables get one extra
    /// row for padding.
    pub fn register<F: Real>(
        params: &mut ParamRegistry<F>,
        users: usize,
        products: usize,
        words: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut table = |name: &str, rows: usize, salt: u64| {
            let mut t = xavier_uniform::<F>(&[rows + 1, d], seed.wrapping_add(salt));
            t.row_mut(0).iter_mut().for_each(|v| *v = F::zero());
            params.register(name, t)
        };
        Ok(Self {
            users: table("embedding.users", users, 1)?,
            products: table("embedding.products", products, 2)?,
            words: table("embedding.words", words.max(1), 3)?,
            d,
        })
    }
}

/// `t`-th row of the fixed interleaved sinusoid table:
/// `[sin(t·ω₀), cos(t·ω₀), sin(t·ω₁), cos(t·ω₁), …]` with `ωᵢ = 10000^(-2i/d)`.
pub fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = t as f64 * 10000f64.powf(-2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PositionalEncoding<F> {
    table: Tensor<F>,
}

impl<F: Real> PositionalEncoding<F> {
    pub fn new(max_positions: usize, d: usize) -> Self {
        let values = (0..max_positions)
            .flat_map(|t| sinusoid(t, d))
            .map(F::of)
            .collect();
        Self {
            table: Tensor::new(vec![max_positions, d], values).expect("positional table"),
        }
    }

    pub fn max_positions(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn row(&self, t: usize) -> &[F] {
        self.table.row(t)
    }

    /// `[B, width, d]` constant with the first `width` rows repeated per batch row.
    fn tiled(&self, batch: usize, width: usize) -> Result<Vec<F>> {
        if width > self.max_positions() {
            return Err(Error::data(format!(
                "sequence of {width} positions exceeds the maximum of {}",
                self.max_positions()
            )));
        }
        let d = self.table.shape()[1];
        let block = &self.table.values()[..width * d];
        Ok(std::iter::repeat_n(block, batch).flatten().copied().collect())
    }
}

/// Mean of the non-pad word embeddings of one query; an all-pad query gives
/// the zero vector.
pub fn embed_query<F: Real>(tape: &mut Tape<'_, F>, tables: &VocabTables, words: &[u32]) -> Result<Var> {
    if words.is_empty() {
        return Err(Error::data("query without word slots"));
    }
    if words.iter().all(|&w| w == 0) {
        log::debug!("all-pad query embedded as zero vector");
    }
    let table = tape.param(tables.words);
    let bag = tape.bag_mean(table, words, words.len(), &[1])?;
    tape.reshape(bag, &[tables.d])
}

/// Sequence embedding matrix of one branch: item (or query) embedding plus
/// the user embedding at every valid position, plus positional encoding.
/// Pad positions carry only the positional row. Product branch is
/// `[B, T, d]`, query branch `[B, T+1, d]`.
pub fn build_sequence_matrix<F: Real>(
    tape: &mut Tape<'_, F>,
    tables: &VocabTables,
    positions: &PositionalEncoding<F>,
    batch: &SequenceBatch,
    branch: Branch,
) -> Result<Var> {
    let b = batch.batch_size();
    let d = tables.d;
    let (items, width, lens) = match branch {
        Branch::Product => {
            let table = tape.param(tables.products);
            let x = tape.gather(table, &batch.products, &[b, batch.width])?;
            (x, batch.width, batch.lens.clone())
        }
        Branch::Query => {
            if batch.scenario != Scenario::Search {
                return Err(Error::data("query branch requested for a recommendation batch"));
            }
            let table = tape.param(tables.words);
            let width = batch.query_width();
            let x = tape.bag_mean(table, &batch.queries, batch.query_words, &[b, width])?;
            (x, width, batch.query_lens())
        }
    };
    let pos = positions.tiled(b, width)?;
    let mask: Vec<F> = crate::batch::mask(&lens, width)
        .into_iter()
        .map(|m| if m { F::one() } else { F::zero() })
        .collect();
    let user_table = tape.param(tables.users);
    let users = tape.gather(user_table, &batch.users, &[b])?;
    let with_user = tape.add_rows_masked(items, users, &mask)?;
    let pos = tape.constant(&[b, width, d], pos)?;
    tape.add(with_user, pos)
}
