//! Modern Hopfield energy, the one-step retrieval update, the multi-head
//! association layer and the pooling layer driven by a learned query.
//!
//! Stored patterns are the rows of `X` (`N x d`); state patterns are row
//! vectors. Retrieval is `q' = softmax(beta q X^T) X`, i.e. a convex
//! combination of the stored rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation used to initialize the learned pooling query.
pub const QUERY_INIT_STD: f64 = 0.02;
/// Default association width of the pooling layer.
pub const DEFAULT_POOL_HIDDEN: usize = 2048;

/// `log sum exp` of every entry of `s`, stabilized by subtracting the
/// (constant) maximum.
fn log_sum_exp(tape: &mut Tape, s: Var) -> Result<Var> {
    let m = tape
        .value(s)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let m = tape.constant(Tensor::scalar(m));
    let shifted = tape.sub(s, m)?;
    let e = tape.exp(shifted)?;
    let total = tape.sum(e)?;
    let l = tape.log(total)?;
    tape.add(l, m)
}

fn check_state(patterns: &Tensor, q: &Tensor) -> Result<()> {
    if patterns.rows() == 0 {
        return Err(Error::InvalidArgument("no stored patterns".into()));
    }
    if q.cols() != patterns.cols() {
        return Err(Error::ShapeMismatch {
            op: "hopfield",
            detail: format!(
                "state dimension {} vs pattern dimension {}",
                q.cols(),
                patterns.cols()
            ),
        });
    }
    Ok(())
}

/// Energy of a single state row `q` (1 x d) against patterns `x` (N x d),
/// recorded on `tape`:
/// `-1/beta lse(beta X q) + q.q / 2 + log(N) / beta + M^2 / 2`.
pub fn energy_on_tape(tape: &mut Tape, x: Var, q: Var, beta: f64) -> Result<Var> {
    check_state(tape.value(x), tape.value(q))?;
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    let n = tape.value(x).rows();
    let d = tape.value(x).cols();

    let xt = tape.transpose(x)?;
    let scores = tape.matmul(q, xt)?;
    let scaled = tape.scale(scores, beta)?;
    let lse = log_sum_exp(tape, scaled)?;
    let free = tape.scale(lse, -1.0 / beta)?;

    let qq = tape.mul(q, q)?;
    let qq = tape.sum(qq)?;
    let internal = tape.scale(qq, 0.5)?;

    // largest squared row norm; the gradient flows through the arg-max row
    let xx = tape.mul(x, x)?;
    let ones = tape.constant(Tensor::filled(d, 1, 1.0));
    let norms = tape.matmul(xx, ones)?;
    let arg = tape
        .value(norms)
        .data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    let m2 = tape.slice_rows(norms, arg..arg + 1)?;
    let reg = tape.scale(m2, 0.5)?;

    let log_n = tape.constant(Tensor::scalar((n as f64).ln() / beta));
    let e = tape.add(free, internal)?;
    let e = tape.add(e, log_n)?;
    tape.add(e, reg)
}

pub fn hopfield_energy(patterns: &Tensor, q: &[f64], beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(patterns.clone());
    let q = tape.constant(Tensor::row(q.to_vec()));
    let e = energy_on_tape(&mut tape, x, q, beta)?;
    Ok(tape.value(e).item())
}

/// One retrieval step for every state row of `q`: `softmax(beta q X^T) X`.
pub fn update_on_tape(tape: &mut Tape, x: Var, q: Var, beta: f64) -> Result<Var> {
    check_state(tape.value(x), tape.value(q))?;
    let xt = tape.transpose(x)?;
    let scores = tape.matmul(q, xt)?;
    let scaled = tape.scale(scores, beta)?;
    let p = tape.softmax(scaled)?;
    tape.matmul(p, x)
}

pub fn hopfield_update(patterns: &Tensor, q: &[f64], beta: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(patterns.clone());
    let q = tape.constant(Tensor::row(q.to_vec()));
    let out = update_on_tape(&mut tape, x, q, beta)?;
    Ok(tape.value(out).data().to_vec())
}

/// Retrieval coefficients `softmax(beta X q)` of one state.
pub fn retrieval_weights(patterns: &Tensor, q: &[f64], beta: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(patterns.clone());
    let qv = tape.constant(Tensor::row(q.to_vec()));
    check_state(patterns, tape.value(qv))?;
    let xt = tape.transpose(x)?;
    let s = tape.matmul(qv, xt)?;
    let s = tape.scale(s, beta)?;
    let p = tape.softmax(s)?;
    Ok(tape.value(p).data().to_vec())
}

/// Shape and naming of one multi-head Hopfield association layer.
///
/// Parameters live in a [`ParamStore`] under `<prefix>.w_q`, `.w_k`, `.w_v`
/// and `.w_o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopfieldParams {
    pub prefix: String,
    pub query_dim: usize,
    pub key_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    /// Inverse temperature; `None` means `1 / sqrt(hidden_dim / heads)`.
    pub beta: Option<f64>,
}

impl HopfieldParams {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn beta(&self) -> f64 {
        self.beta
            .unwrap_or_else(|| 1.0 / (self.head_dim() as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::InvalidArgument(format!("beta must be > 0, got {b}")));
            }
        }
        Ok(())
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Projections drawn from N(0, 1/sqrt(fan_in)).
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let w = |rows: usize, cols: usize, rng: &mut _| {
            ParamStore::normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        };
        store.insert(self.name("w_q"), w(self.query_dim, self.hidden_dim, rng))?;
        store.insert(self.name("w_k"), w(self.key_dim, self.hidden_dim, rng))?;
        store.insert(self.name("w_v"), w(self.key_dim, self.hidden_dim, rng))?;
        store.insert(self.name("w_o"), w(self.hidden_dim, self.out_dim, rng))?;
        Ok(())
    }

    /// Identity projections (requires all dimensions equal).
    pub fn init_identity(&self, store: &mut ParamStore) -> Result<()> {
        let d = self.hidden_dim;
        if [self.query_dim, self.key_dim, self.out_dim].iter().any(|&x| x != d) {
            return Err(Error::InvalidArgument(
                "identity projections need equal dimensions".into(),
            ));
        }
        for part in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(self.name(part), Tensor::identity(d))?;
        }
        Ok(())
    }
}

/// Multi-head association of state rows `q` against keys `k` and values `v`.
///
/// The rows of `q`, `k` and `v` are split into `blocks` equal contiguous
/// blocks and attention only runs inside a block, so a batch of windows can
/// be stacked vertically. Per block and head `h`:
/// `softmax(beta (q W_Q,h)(k W_K,h)^T)(v W_V,h)`; heads are concatenated
/// and projected by `W_O`.
pub fn association_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    p: &HopfieldParams,
    q: Var,
    k: Var,
    v: Var,
    blocks: usize,
) -> Result<Var> {
    p.validate()?;
    let (qr, kr) = (tape.value(q).rows(), tape.value(k).rows());
    if blocks == 0 || qr % blocks != 0 || kr % blocks != 0 || tape.value(v).rows() != kr {
        return Err(Error::ShapeMismatch {
            op: "hopfield_association",
            detail: format!(
                "{qr} state rows and {kr} key rows do not split into {blocks} blocks"
            ),
        });
    }
    let (q_per, k_per) = (qr / blocks, kr / blocks);
    let w_q = store_leaf(tape, store, &p.name("w_q"))?;
    let w_k = store_leaf(tape, store, &p.name("w_k"))?;
    let w_v = store_leaf(tape, store, &p.name("w_v"))?;
    let w_o = store_leaf(tape, store, &p.name("w_o"))?;

    let qp = tape.matmul(q, w_q)?;
    let kp = tape.matmul(k, w_k)?;
    let vp = tape.matmul(v, w_v)?;
    let beta = p.beta();
    let dh = p.head_dim();

    let mut head_parts = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        let (qh, kh, vh) = if p.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, cols.clone())?,
                tape.slice_cols(kp, cols.clone())?,
                tape.slice_cols(vp, cols)?,
            )
        };
        head_parts.push((qh, kh, vh));
    }

    let mut block_out = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut heads_out = Vec::with_capacity(p.heads);
        for &(qh, kh, vh) in &head_parts {
            let (qb, kb, vb) = if blocks == 1 {
                (qh, kh, vh)
            } else {
                (
                    tape.slice_rows(qh, b * q_per..(b + 1) * q_per)?,
                    tape.slice_rows(kh, b * k_per..(b + 1) * k_per)?,
                    tape.slice_rows(vh, b * k_per..(b + 1) * k_per)?,
                )
            };
            let kt = tape.transpose(kb)?;
            let s = tape.matmul(qb, kt)?;
            let s = tape.scale(s, beta)?;
            let a = tape.softmax(s)?;
            heads_out.push(tape.matmul(a, vb)?);
        }
        block_out.push(if heads_out.len() == 1 {
            heads_out[0]
        } else {
            tape.concat_cols(&heads_out)?
        });
    }
    let joined = if block_out.len() == 1 {
        block_out[0]
    } else {
        tape.concat_rows(&block_out)?
    };
    tape.matmul(joined, w_o)
}

fn store_leaf(tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
    store.leaf(tape, name)
}

pub fn hopfield_association(
    store: &ParamStore,
    p: &HopfieldParams,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = association_on_tape(&mut tape, store, p, qv, kv, vv, 1)?;
    Ok(tape.value(out).clone())
}

/// Pooling layer: one learned query (`<prefix>.query`, 1 x key_dim) attends
/// over the time steps of each sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopfieldPooling {
    pub layer: HopfieldParams,
}

impl HopfieldPooling {
    /// Pooling over `feature_dim` inputs with one head and output width equal
    /// to the input width.
    pub fn new(prefix: &str, feature_dim: usize, hidden_dim: usize) -> Self {
        Self {
            layer: HopfieldParams {
                prefix: prefix.to_string(),
                query_dim: feature_dim,
                key_dim: feature_dim,
                hidden_dim,
                out_dim: feature_dim,
                heads: 1,
                beta: None,
            },
        }
    }

    pub fn query_name(&self) -> String {
        self.layer.name("query")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            self.query_name(),
            ParamStore::normal(1, self.layer.query_dim, QUERY_INIT_STD, rng),
        )?;
        self.layer.init(store, rng)
    }

    /// `x_seq` holds `batch` sequences of equal length stacked vertically;
    /// returns one pooled row per sequence.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_seq: Var,
        batch: usize,
    ) -> Result<Var> {
        let rows = tape.value(x_seq).rows();
        if batch == 0 || rows == 0 || rows % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "hopfield_pooling",
                detail: format!("{rows} rows do not split into {batch} sequences"),
            });
        }
        let query = store.leaf(tape, &self.query_name())?;
        let q = if batch == 1 {
            query
        } else {
            tape.concat_rows(&vec![query; batch])?
        };
        association_on_tape(tape, store, &self.layer, q, x_seq, x_seq, batch)
    }
}

/// `B x T x F` input given as `B` tensors of shape `T x F`.
pub fn hopfield_pooling(
    store: &ParamStore,
    pooling: &HopfieldPooling,
    seqs: &[Tensor],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let parts: Vec<Var> = seqs.iter().map(|s| tape.constant(s.clone())).collect();
    let x = tape.concat_rows(&parts)?;
    let out = pooling.forward_on_tape(&mut tape, store, x, seqs.len())?;
    Ok(tape.value(out).clone())
}
