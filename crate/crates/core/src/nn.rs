//! Layers shared by the encoder, the decoder and the role learner.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, TensorResult, Var};

/// Loads each parameter onto a tape at most once.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    cache: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        *self
            .cache
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.tape.param(self.store, id))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}/g"), Tensor::full(&[d], 1.0)),
            bias: store.insert(format!("{name}/b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> TensorResult<Var<'t>> {
        x.layer_norm(&b.get(self.gain), &b.get(self.bias), LN_EPS)
    }
}

/// `x · W (+ b)` with `W: (d_in, d_out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(format!("{name}/w"), Tensor::randn(&[d_in, d_out], std, rng));
        let bias = with_bias.then(|| store.insert(format!("{name}/b"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: &Var<'t>) -> TensorResult<Var<'t>> {
        let y = x.matmul(&b.get(self.weight))?;
        match self.bias {
            Some(bias) => y.add_row(&b.get(bias)),
            None => Ok(y),
        }
    }
}

pub struct AttentionOutput<'t> {
    /// `(n_query, d)` concatenation of per-head outputs.
    pub output: Var<'t>,
    /// Per-head `(n_query, n_key)` attention weights.
    pub weights: Vec<Var<'t>>,
}

/// Scaled dot-product attention split over `heads` column blocks.
/// `visible` is a row-major `(n_query, n_key)` mask; hidden keys receive
/// exactly zero weight.
pub fn multi_head_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    heads: usize,
    visible: &[bool],
) -> TensorResult<AttentionOutput<'t>> {
    let (nq, d) = q.value().as_matrix_dims();
    let (nk, dk) = k.value().as_matrix_dims();
    let (nv, dv) = v.value().as_matrix_dims();
    if dk != d || dv != d || nk != nv || heads == 0 || d % heads != 0 {
        return Err(TensorError::Dimension {
            op: "attention",
            left: vec![nq, d, nk, dk],
            right: vec![nv, dv, heads],
        });
    }
    if visible.len() != nq * nk {
        return Err(TensorError::Dimension {
            op: "attention_mask",
            left: vec![nq, nk],
            right: vec![visible.len()],
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (*q, *k, *v)
        } else {
            (q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?)
        };
        let scores = qh.matmul_t(&kh)?.scale(scale)?;
        let w = scores.masked_softmax(visible)?;
        outs.push(w.matmul(&vh)?);
        weights.push(w);
    }
    let output = if heads == 1 {
        outs[0]
    } else {
        q.tape().concat_cols(&outs)?
    };
    Ok(AttentionOutput { output, weights })
}

/// Causal visibility for `n` sequence positions preceded by `prefix` always
/// visible slots: query `i` sees every prefix slot and sequence keys `<= i`.
pub fn causal_visibility(n: usize, prefix: usize) -> Vec<bool> {
    let width = prefix + n;
    let mut m = vec![false; n * width];
    for i in 0..n {
        for j in 0..width {
            m[i * width + j] = j < prefix || j - prefix <= i;
        }
    }
    m
}

/// Bidirectional visibility that hides padded keys.
pub fn padding_visibility(attention_mask: &[bool]) -> Vec<bool> {
    let n = attention_mask.len();
    let mut m = Vec::with_capacity(n * n);
    for _ in 0..n {
        m.extend_from_slice(attention_mask);
    }
    m
}
