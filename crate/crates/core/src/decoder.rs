//! Reversible multi-column decoder.
//!
//! Column `j` maps the previous column state `d^{j-1} = (d_1 .. d_{N-1})` to
//!
//! `d_i^j = L_i^j(d_{i+1}^j, d_{i-1}^{j-1}) + α_i^j d_i^{j-1}` for `i = N-1 .. 1`,
//!
//! with `d_N^j = e_N` and no `d_{i-1}` argument at `i = 1`. Column 0 is
//! `(e_1 .. e_{N-1})`. The inverse runs `i = 1 .. N-1`:
//!
//! `d_i^{j-1} = (d_i^j - L_i^j(d_{i+1}^j, d_{i-1}^{j-1})) / α_i^j`.

use rand::Rng;

use crate::autodiff::{Reversible, Tape, Var};
use crate::backbone::level_channels;
use crate::blocks::Level;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const ALPHA_MIN: f64 = 1e-3;

/// One column: N-1 level modules and their scaling parameters.
#[derive(Clone, Debug)]
pub struct SubDecoder {
    /// `levels[i - 1]` is level `i`.
    pub levels: Vec<Level>,
    pub alphas: Vec<ParamId>,
}

impl SubDecoder {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, j: usize, cfg: &ModelConfig) -> Self {
        let n1 = cfg.levels - 1;
        let levels = pb.scope(&format!("dec{j}"), |pb| {
            (1..=n1)
                .map(|i| {
                    Level::new(
                        pb,
                        &format!("level{i}"),
                        level_channels(cfg.channels, i),
                        i > 1,
                        cfg.fourier,
                    )
                })
                .collect()
        });
        let alphas = pb.scope(&format!("alpha.{j}"), |pb| {
            (1..=n1)
                .map(|i| pb.constant(&i.to_string(), [1, 1, 1, 1], 1.0))
                .collect()
        });
        SubDecoder { levels, alphas }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    fn check_state<T: Real>(&self, tape: &Tape<'_, T>, prev: &[Var], e_n: Var) -> Result<()> {
        if prev.len() != self.depth() {
            return Err(Error::shape(
                "column",
                format!("{} state tensors for {} levels", prev.len(), self.depth()),
            ));
        }
        let top = tape.shape(prev[self.depth() - 1]);
        let en = tape.shape(e_n);
        if en[1] != 2 * top[1] || 2 * en[2] != top[2] || 2 * en[3] != top[3] {
            return Err(Error::shape("column", format!("e_N {en:?} above level {top:?}")));
        }
        Ok(())
    }

    /// One column step (coarse to fine).
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, prev: &[Var], e_n: Var) -> Result<Vec<Var>> {
        self.check_state(tape, prev, e_n)?;
        let n1 = self.depth();
        let mut out = vec![e_n; n1];
        let mut upper = e_n;
        for i in (1..=n1).rev() {
            let down = (i > 1).then(|| prev[i - 2]);
            let l = self.levels[i - 1].forward(tape, upper, down)?;
            let a = tape.param(self.alphas[i - 1]);
            let skip = tape.mul_bcast(prev[i - 1], a)?;
            let d = tape.add(l, skip)?;
            out[i - 1] = d;
            upper = d;
        }
        Ok(out)
    }

    /// Reconstruct the previous column state from this column's output (fine to coarse).
    pub fn inverse<T: Real>(
        &self,
        store: &ParamStore<T>,
        next: &[&Tensor<T>],
        e_n: &Tensor<T>,
        alpha_min: f64,
    ) -> Result<Vec<Tensor<T>>> {
        let order: Vec<usize> = (1..=self.depth()).collect();
        self.inverse_in_order(store, next, e_n, alpha_min, &order)
    }

    /// Inverse with an explicit level order. Only the ascending order is exact: a
    /// level whose finer predecessor has not been reconstructed yet falls back to the
    /// current column's feature, which is wrong whenever that level is not the identity.
    pub fn inverse_in_order<T: Real>(
        &self,
        store: &ParamStore<T>,
        next: &[&Tensor<T>],
        e_n: &Tensor<T>,
        alpha_min: f64,
        order: &[usize],
    ) -> Result<Vec<Tensor<T>>> {
        let n1 = self.depth();
        if next.len() != n1 {
            return Err(Error::shape(
                "column_inverse",
                format!("{} state tensors for {} levels", next.len(), n1),
            ));
        }
        let mut tape = Tape::no_grad(store);
        let mut rec: Vec<Option<Tensor<T>>> = vec![None; n1];
        for &i in order {
            let alpha = store.value(self.alphas[i - 1]).data()[0].f64();
            if alpha.abs() < alpha_min {
                return Err(Error::AlphaTooSmall(alpha));
            }
            let upper = if i == n1 { e_n } else { next[i] };
            let upper = tape.input(upper.clone());
            let down = if i > 1 {
                let src = rec[i - 2].as_ref().unwrap_or(next[i - 2]);
                Some(tape.input(src.clone()))
            } else {
                None
            };
            let l = self.levels[i - 1].forward(&mut tape, upper, down)?;
            let inv = T::c(1.0 / alpha);
            let prev = next[i - 1].zip_map(tape.value(l)?, |d, l| (d - l) * inv)?;
            if !prev.is_finite() {
                return Err(Error::NonFinite { op: "column_inverse" });
            }
            rec[i - 1] = Some(prev);
        }
        rec.into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Invalid(format!("level {} not reconstructed", i + 1))))
            .collect()
    }
}

/// A column as a reversible segment: state is the previous column, context is `[e_N]`.
pub struct ColumnSegment<'n> {
    pub column: &'n SubDecoder,
    pub alpha_min: f64,
}

impl<T: Real> Reversible<T> for ColumnSegment<'_> {
    fn forward(&self, tape: &mut Tape<'_, T>, state: &[Var], context: &[Var]) -> Result<Vec<Var>> {
        self.column.forward(tape, state, context[0])
    }

    fn inverse(
        &self,
        store: &ParamStore<T>,
        outputs: &[&Tensor<T>],
        context: &[&Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        self.column.inverse(store, outputs, context[0], self.alpha_min)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub columns: Vec<SubDecoder>,
}

impl DecoderStack {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Self {
        DecoderStack {
            columns: (1..=cfg.columns).map(|j| SubDecoder::new(pb, j, cfg)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Push every |α| below `alpha_min` back onto the bound, keeping its sign.
    pub fn clamp_alphas<T: Real>(&self, store: &mut ParamStore<T>, alpha_min: f64) {
        for col in &self.columns {
            for &id in &col.alphas {
                let v = &mut store.value_mut(id).data_mut()[0];
                let a = v.f64();
                if a.abs() < alpha_min {
                    *v = T::c(if a < 0.0 { -alpha_min } else { alpha_min });
                }
            }
        }
    }

    /// Columns 1..=`upto`, starting from `(e_1 .. e_{N-1})`. Column 1 always runs as
    /// ordinary ops; later columns run as reversible segments when the tape is reversible.
    /// Returns every column state, index 0 being the encoder features.
    pub fn forward<'n, T: Real>(
        &'n self,
        tape: &mut Tape<'n, T>,
        enc: &[Var],
        upto: usize,
        alpha_min: f64,
        mut after_column: impl FnMut(&mut Tape<'n, T>, usize, &[Var]) -> Result<()>,
    ) -> Result<Vec<Vec<Var>>> {
        if upto > self.len() {
            return Err(Error::Invalid(format!(
                "requested {upto} columns of {}",
                self.len()
            )));
        }
        let n = enc.len();
        let e_n = enc[n - 1];
        let mut states = vec![enc[..n - 1].to_vec()];
        for (j, col) in self.columns.iter().take(upto).enumerate() {
            let prev = &states[j];
            let next = if j == 0 {
                col.forward(tape, prev, e_n)?
            } else {
                let seg = std::rc::Rc::new(ColumnSegment {
                    column: col,
                    alpha_min,
                });
                tape.reversible(seg, prev, &[e_n])?
            };
            after_column(tape, j + 1, &next)?;
            states.push(next);
        }
        Ok(states)
    }
}
