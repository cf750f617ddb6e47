//! Time2Vec, the Hopfield pooling and Hopfield encoder allocators, the LSTM
//! baseline, and the differentiable Sharpe / volatility losses.
//!
//! A batch of `B` look-back windows (`L x N` each) is stacked vertically into
//! a `(B * L) x F` matrix; layers that must not mix windows work block-wise.
//! Every forward ends in a row softmax, so each output row is a long-only
//! allocation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hopfield::{association_on_tape, HopfieldParams, HopfieldPooling, DEFAULT_POOL_HIDDEN};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "HOP-POOL")]
    HopPool,
    #[serde(rename = "HOP-TRA")]
    HopTra,
    #[serde(rename = "LSTM")]
    Lstm,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::HopPool => "HOP-POOL",
            ModelKind::HopTra => "HOP-TRA",
            ModelKind::Lstm => "LSTM",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    NegativeSharpe,
    Volatility,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Periodic {
    #[default]
    Sine,
    Cosine,
}

impl Periodic {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Periodic::Sine => x.sin(),
            Periodic::Cosine => x.cos(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Number of periodic Time2Vec components per asset.
    pub time2vec_k: usize,
    pub periodic: Periodic,
    /// Feed Time2Vec features to the pooling model as well.
    pub pool_time2vec: bool,
    pub pool_hidden: usize,
    pub n_blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub lstm_hidden: usize,
    /// Inverse temperature override for every Hopfield layer.
    pub beta: Option<f64>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            time2vec_k: 7,
            periodic: Periodic::Sine,
            pool_time2vec: false,
            pool_hidden: DEFAULT_POOL_HIDDEN,
            n_blocks: 4,
            embed_dim: 128,
            heads: 8,
            lstm_hidden: 64,
            beta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_assets: usize,
    pub lookback: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub arch: ArchConfig,
}

/// Time2Vec parameters of one asset: `omega` and `phi` have `K + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Time2VecParams {
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
    pub activation: Periodic,
}

/// `T x (K + 1)` embedding of one asset's window. Column 0 is `omega_0 t +
/// phi_0`, the rest are `F(omega_k t + phi_k)`, with `t` the step index
/// inside the window.
pub fn time2vec_embed(series: &[f64], p: &Time2VecParams) -> Result<Tensor> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    if p.omega.len() != p.phi.len() || p.omega.is_empty() {
        return Err(Error::InvalidArgument(
            "omega and phi must have K + 1 entries".into(),
        ));
    }
    let width = p.omega.len();
    let mut out = Tensor::zeros(series.len(), width);
    for t in 0..series.len() {
        for k in 0..width {
            let lin = p.omega[k] * t as f64 + p.phi[k];
            out.set(t, k, if k == 0 { lin } else { p.activation.apply(lin) });
        }
    }
    Ok(out)
}

fn shape_err(detail: String) -> Error {
    Error::ShapeMismatch {
        op: "model_forward",
        detail,
    }
}

/// A model architecture bound to its hyperparameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.n_assets < 1 || spec.lookback < 1 {
            return Err(Error::InvalidArgument(
                "model needs at least one asset and one look-back step".into(),
            ));
        }
        let a = &spec.arch;
        if spec.kind == ModelKind::HopTra && (a.heads == 0 || a.embed_dim % a.heads != 0) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} must be a multiple of heads {}",
                a.embed_dim, a.heads
            )));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn uses_time2vec(&self) -> bool {
        match self.spec.kind {
            ModelKind::HopPool => self.spec.arch.pool_time2vec,
            ModelKind::HopTra => true,
            ModelKind::Lstm => false,
        }
    }

    fn t2v_width(&self) -> usize {
        self.spec.n_assets * (self.spec.arch.time2vec_k + 1)
    }

    /// Per-step feature width: raw returns plus any Time2Vec columns.
    pub fn feature_dim(&self) -> usize {
        let n = self.spec.n_assets;
        if self.uses_time2vec() {
            n + self.t2v_width()
        } else {
            n
        }
    }

    fn pooling(&self) -> HopfieldPooling {
        let mut pool = HopfieldPooling::new("pool", self.feature_dim(), self.spec.arch.pool_hidden);
        pool.layer.beta = self.spec.arch.beta;
        pool
    }

    fn block_attention(&self, b: usize) -> HopfieldParams {
        let d = self.spec.arch.embed_dim;
        HopfieldParams {
            prefix: format!("enc{b}.attn"),
            query_dim: d,
            key_dim: d,
            hidden_dim: d,
            out_dim: d,
            heads: self.spec.arch.heads,
            beta: self.spec.arch.beta,
        }
    }

    /// Fresh parameters: projections from N(0, 1/sqrt(fan_in)), zero biases,
    /// unit layer-norm gains, Time2Vec frequencies from U(0, 1) and zero
    /// phases.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let n = self.spec.n_assets;
        let a = &self.spec.arch;
        let dense = |rows: usize, cols: usize, rng: &mut _| {
            ParamStore::normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        };
        if self.uses_time2vec() {
            let w = self.t2v_width();
            store.insert("t2v.omega", ParamStore::uniform(1, w, 0.0, 1.0, rng))?;
            store.insert("t2v.phi", Tensor::zeros(1, w))?;
        }
        let head_in = match self.spec.kind {
            ModelKind::HopPool => {
                self.pooling().init(&mut store, rng)?;
                self.feature_dim()
            }
            ModelKind::HopTra => {
                let d = a.embed_dim;
                store.insert("embed.w", dense(self.feature_dim(), d, rng))?;
                store.insert("embed.b", Tensor::zeros(1, d))?;
                for b in 0..a.n_blocks {
                    self.block_attention(b).init(&mut store, rng)?;
                    store.insert(format!("enc{b}.ln1.gain"), Tensor::filled(1, d, 1.0))?;
                    store.insert(format!("enc{b}.ln1.bias"), Tensor::zeros(1, d))?;
                    store.insert(format!("enc{b}.mlp.w1"), dense(d, 4 * d, rng))?;
                    store.insert(format!("enc{b}.mlp.b1"), Tensor::zeros(1, 4 * d))?;
                    store.insert(format!("enc{b}.mlp.w2"), dense(4 * d, d, rng))?;
                    store.insert(format!("enc{b}.mlp.b2"), Tensor::zeros(1, d))?;
                    store.insert(format!("enc{b}.ln2.gain"), Tensor::filled(1, d, 1.0))?;
                    store.insert(format!("enc{b}.ln2.bias"), Tensor::zeros(1, d))?;
                }
                d
            }
            ModelKind::Lstm => {
                let h = a.lstm_hidden;
                store.insert("lstm.w_x", dense(n, 4 * h, rng))?;
                store.insert("lstm.w_h", dense(h, 4 * h, rng))?;
                store.insert("lstm.b", Tensor::zeros(1, 4 * h))?;
                h
            }
        };
        store.insert("head.w", dense(head_in, n, rng))?;
        store.insert("head.b", Tensor::zeros(1, n))?;
        Ok(store)
    }

    fn check_batch(&self, batch: &[Tensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(shape_err("empty batch".into()));
        }
        let (l, n) = (self.spec.lookback, self.spec.n_assets);
        for (b, w) in batch.iter().enumerate() {
            if w.shape() != [l, n] {
                return Err(shape_err(format!(
                    "window {b} has shape {:?}, expected [{l}, {n}]",
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// `L x N(K+1)` Time2Vec block shared by every window: linear columns at
    /// multiples of `K + 1`, periodic columns elsewhere.
    fn time2vec_on_tape(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let l = self.spec.lookback;
        let k1 = self.spec.arch.time2vec_k + 1;
        let w = self.t2v_width();
        let omega = store.leaf(tape, "t2v.omega")?;
        let phi = store.leaf(tape, "t2v.phi")?;
        let t = tape.constant(Tensor::column((0..l).map(|t| t as f64).collect()));
        let lin = tape.matmul(t, omega)?;
        let lin = tape.add(lin, phi)?;
        let periodic = match self.spec.arch.periodic {
            Periodic::Sine => tape.sin(lin)?,
            Periodic::Cosine => {
                let shift = tape.constant(Tensor::scalar(std::f64::consts::FRAC_PI_2));
                let shifted = tape.add(lin, shift)?;
                tape.sin(shifted)?
            }
        };
        let linear_mask: Vec<f64> = (0..w).map(|c| if c % k1 == 0 { 1.0 } else { 0.0 }).collect();
        let periodic_mask: Vec<f64> = linear_mask.iter().map(|m| 1.0 - m).collect();
        let lm = tape.constant(Tensor::row(linear_mask));
        let pm = tape.constant(Tensor::row(periodic_mask));
        let a = tape.mul(lin, lm)?;
        let b = tape.mul(periodic, pm)?;
        tape.add(a, b)
    }

    /// Stacked `(B * L) x F` features for a batch.
    fn features_on_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &[Tensor]) -> Result<Var> {
        let parts: Vec<Var> = batch.iter().map(|w| tape.constant(w.clone())).collect();
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        if !self.uses_time2vec() {
            return Ok(x);
        }
        let t2v = self.time2vec_on_tape(tape, store)?;
        let tiled = if batch.len() == 1 {
            t2v
        } else {
            tape.concat_rows(&vec![t2v; batch.len()])?
        };
        tape.concat_cols(&[x, tiled])
    }

    fn affine_layer_norm(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        prefix: &str,
    ) -> Result<Var> {
        let gain = store.leaf(tape, &format!("{prefix}.gain"))?;
        let bias = store.leaf(tape, &format!("{prefix}.bias"))?;
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let n = tape.mul(n, gain)?;
        tape.add(n, bias)
    }

    /// One encoder block over `blocks` stacked sequences:
    /// `X' = LN(Hopfield(X) + X)`, `out = LN(MLP(X') + X')`.
    pub fn encoder_block_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        block: usize,
        blocks: usize,
    ) -> Result<Var> {
        let d = self.spec.arch.embed_dim;
        if tape.value(x).cols() != d {
            return Err(shape_err(format!(
                "encoder input width {} != embed_dim {d}",
                tape.value(x).cols()
            )));
        }
        let attn = association_on_tape(tape, store, &self.block_attention(block), x, x, x, blocks)?;
        let res = tape.add(attn, x)?;
        let x1 = self.affine_layer_norm(tape, store, res, &format!("enc{block}.ln1"))?;
        let w1 = store.leaf(tape, &format!("enc{block}.mlp.w1"))?;
        let b1 = store.leaf(tape, &format!("enc{block}.mlp.b1"))?;
        let w2 = store.leaf(tape, &format!("enc{block}.mlp.w2"))?;
        let b2 = store.leaf(tape, &format!("enc{block}.mlp.b2"))?;
        let h = tape.linear(x1, w1, b1)?;
        let h = tape.gelu(h)?;
        let m = tape.linear(h, w2, b2)?;
        let res = tape.add(m, x1)?;
        self.affine_layer_norm(tape, store, res, &format!("enc{block}.ln2"))
    }

    fn head_on_tape(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let w = store.leaf(tape, "head.w")?;
        let b = store.leaf(tape, "head.b")?;
        let logits = tape.linear(z, w, b)?;
        tape.softmax(logits)
    }

    /// `B x N` allocation rows for a batch of `L x N` windows.
    pub fn forward_on_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &[Tensor]) -> Result<Var> {
        self.check_batch(batch)?;
        let bsz = batch.len();
        let l = self.spec.lookback;
        let z = match self.spec.kind {
            ModelKind::HopPool => {
                let x = self.features_on_tape(tape, store, batch)?;
                self.pooling().forward_on_tape(tape, store, x, bsz)?
            }
            ModelKind::HopTra => {
                let x = self.features_on_tape(tape, store, batch)?;
                let w = store.leaf(tape, "embed.w")?;
                let b = store.leaf(tape, "embed.b")?;
                let mut h = tape.linear(x, w, b)?;
                for block in 0..self.spec.arch.n_blocks {
                    h = self.encoder_block_on_tape(tape, store, h, block, bsz)?;
                }
                // mean over the time axis of each window
                let mut avg = Tensor::zeros(bsz, bsz * l);
                for b in 0..bsz {
                    for t in 0..l {
                        avg.set(b, b * l + t, 1.0 / l as f64);
                    }
                }
                let avg = tape.constant(avg);
                tape.matmul(avg, h)?
            }
            ModelKind::Lstm => self.lstm_on_tape(tape, store, batch)?,
        };
        self.head_on_tape(tape, store, z)
    }

    /// Single-layer LSTM over the window, gates ordered (input, forget,
    /// cell, output); returns the final hidden state of each window.
    fn lstm_on_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &[Tensor]) -> Result<Var> {
        let h_dim = self.spec.arch.lstm_hidden;
        let (bsz, n) = (batch.len(), self.spec.n_assets);
        let w_x = store.leaf(tape, "lstm.w_x")?;
        let w_h = store.leaf(tape, "lstm.w_h")?;
        let bias = store.leaf(tape, "lstm.b")?;
        let mut h = tape.constant(Tensor::zeros(bsz, h_dim));
        let mut c = tape.constant(Tensor::zeros(bsz, h_dim));
        for t in 0..self.spec.lookback {
            let mut step = Tensor::zeros(bsz, n);
            for (b, w) in batch.iter().enumerate() {
                step.data_mut()[b * n..(b + 1) * n].copy_from_slice(w.row_slice(t));
            }
            let x = tape.constant(step);
            let (h_next, c_next) = lstm_cell_on_tape(tape, x, h, c, w_x, w_h, bias, h_dim)?;
            h = h_next;
            c = c_next;
        }
        Ok(h)
    }

    /// Allocation rows without keeping the tape.
    pub fn predict(&self, store: &ParamStore, batch: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.forward_on_tape(&mut tape, store, batch)?;
        Ok(tape.value(w).clone())
    }

    /// Forward plus loss against the return row that follows each window.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[Tensor],
        next_returns: &Tensor,
    ) -> Result<(Var, Var)> {
        let w = self.forward_on_tape(tape, store, batch)?;
        let loss = portfolio_loss_on_tape(tape, w, next_returns, self.spec.loss)?;
        Ok((w, loss))
    }
}

/// One LSTM step: `c' = f * c + i * g`, `h' = o * tanh(c')`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_on_tape(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w_x: Var,
    w_h: Var,
    bias: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let zx = tape.matmul(x, w_x)?;
    let zh = tape.matmul(h, w_h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, bias)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice_cols(z, k * hidden..(k + 1) * hidden);
    let i = gate(tape, 0)?;
    let i = tape.sigmoid(i)?;
    let f = gate(tape, 1)?;
    let f = tape.sigmoid(f)?;
    let g = gate(tape, 2)?;
    let g = tape.tanh(g)?;
    let o = gate(tape, 3)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Loss of allocation rows `weights` (B x N) against the realized next-day
/// returns (B x N): negative in-batch Sharpe, or in-batch volatility.
pub fn portfolio_loss_on_tape(
    tape: &mut Tape,
    weights: Var,
    next_returns: &Tensor,
    kind: LossKind,
) -> Result<Var> {
    let shape = tape.value(weights).shape();
    if shape != next_returns.shape() {
        return Err(Error::ShapeMismatch {
            op: "sharpe_loss",
            detail: format!("weights {:?} vs returns {:?}", shape, next_returns.shape()),
        });
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument("loss needs at least two windows".into()));
    }
    let y = tape.constant(next_returns.clone());
    let wy = tape.mul(weights, y)?;
    let ones = tape.constant(Tensor::filled(shape[1], 1, 1.0));
    let realized = tape.matmul(wy, ones)?;
    let sd = tape.std(realized)?;
    let sd_value = tape.value(sd).item();
    let mean_abs = tape.value(realized).data().iter().map(|v| v.abs()).sum::<f64>() / shape[0] as f64;
    // identical realized returns can leave rounding noise in the std
    if !(sd_value > 1e-12 * mean_abs) || sd_value == 0.0 {
        return Err(Error::DegenerateLoss);
    }
    match kind {
        LossKind::Volatility => Ok(sd),
        LossKind::NegativeSharpe => {
            let m = tape.mean(realized)?;
            let ratio = tape.div(m, sd)?;
            tape.scale(ratio, -1.0)
        }
    }
}

/// Scalar loss value for fixed weights.
pub fn sharpe_loss(weights: &Tensor, next_returns: &Tensor, kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.constant(weights.clone());
    let l = portfolio_loss_on_tape(&mut tape, w, next_returns, kind)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            n_assets: 3,
            lookback: 8,
            loss: LossKind::NegativeSharpe,
            arch: ArchConfig {
                time2vec_k: 2,
                pool_hidden: 6,
                n_blocks: 2,
                embed_dim: 4,
                heads: 2,
                lstm_hidden: 3,
                ..ArchConfig::default()
            },
        }
    }

    fn random_batch(b: usize, l: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (0..b).map(|_| ParamStore::normal(l, n, 0.02, rng)).collect()
    }

    #[test]
    fn time2vec_components() {
        let p = Time2VecParams {
            omega: vec![1.0, 0.0, std::f64::consts::FRAC_PI_2],
            phi: vec![0.0, 0.0, 0.0],
            activation: Periodic::Sine,
        };
        let e = time2vec_embed(&[0.0; 4], &p).unwrap();
        assert_eq!(e.shape(), [4, 3]);
        assert_eq!(e.get(3, 0), 3.0);
        assert_eq!(e.get(3, 1), 0.0);
        assert!((e.get(1, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tape_time2vec_matches_direct_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(toy_spec(ModelKind::HopTra)).unwrap();
        let store = model.init_params(&mut rng).unwrap();
        let mut tape = Tape::new();
        let v = model.time2vec_on_tape(&mut tape, &store).unwrap();
        let got = tape.value(v).clone();
        let omega = store.get("t2v.omega").unwrap().data();
        let phi = store.get("t2v.phi").unwrap().data();
        let k1 = 3;
        for asset in 0..3 {
            let p = Time2VecParams {
                omega: omega[asset * k1..(asset + 1) * k1].to_vec(),
                phi: phi[asset * k1..(asset + 1) * k1].to_vec(),
                activation: Periodic::Sine,
            };
            let e = time2vec_embed(&[0.0; 8], &p).unwrap();
            for t in 0..8 {
                for k in 0..k1 {
                    assert!((got.get(t, asset * k1 + k) - e.get(t, k)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn forwards_produce_simplex_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ModelKind::HopPool, ModelKind::HopTra, ModelKind::Lstm] {
            let model = Model::new(toy_spec(kind)).unwrap();
            let store = model.init_params(&mut rng).unwrap();
            let batch = random_batch(4, 8, 3, &mut rng);
            let w = model.predict(&store, &batch).unwrap();
            assert_eq!(w.shape(), [4, 3]);
            for r in 0..4 {
                let row = w.row_slice(r);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(toy_spec(ModelKind::HopPool)).unwrap();
        let mut store = model.init_params(&mut rng).unwrap();
        for name in ["head.w", "head.b"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let w = model.predict(&store, &random_batch(2, 8, 3, &mut rng)).unwrap();
        assert!(w.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_lstm_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::new(toy_spec(ModelKind::Lstm)).unwrap();
        let mut store = model.init_params(&mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let w = model.predict(&store, &random_batch(3, 8, 3, &mut rng)).unwrap();
        assert!(w.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn lstm_cell_by_hand() {
        // one unit, one input; z = (zi, zf, zg, zo) = bias
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let h = tape.constant(Tensor::scalar(0.0));
        let c = tape.constant(Tensor::scalar(0.8));
        let w_x = tape.constant(Tensor::zeros(1, 4));
        let w_h = tape.constant(Tensor::zeros(1, 4));
        let bias = tape.constant(Tensor::row(vec![0.5, -1.0, 0.3, 2.0]));
        let (h1, c1) = lstm_cell_on_tape(&mut tape, x, h, c, w_x, w_h, bias, 1).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let expected_c = sig(-1.0) * 0.8 + sig(0.5) * 0.3f64.tanh();
        assert!((tape.value(c1).item() - expected_c).abs() < 1e-15);
        assert!((tape.value(h1).item() - sig(2.0) * expected_c.tanh()).abs() < 1e-15);
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ModelKind::HopPool, ModelKind::HopTra] {
            let model = Model::new(toy_spec(kind)).unwrap();
            let store = model.init_params(&mut rng).unwrap();
            let batch = random_batch(4, 8, 3, &mut rng);
            let perm = [2, 0, 3, 1];
            let shuffled: Vec<Tensor> = perm.iter().map(|&i| batch[i].clone()).collect();
            let a = model.predict(&store, &batch).unwrap();
            let b = model.predict(&store, &shuffled).unwrap();
            for (r, &src) in perm.iter().enumerate() {
                for c in 0..3 {
                    assert!((b.get(r, c) - a.get(src, c)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = Model::new(toy_spec(ModelKind::HopTra)).unwrap();
        let store = model.init_params(&mut rng).unwrap();
        let batch = random_batch(3, 8, 3, &mut rng);
        assert_eq!(
            model.predict(&store, &batch).unwrap(),
            model.predict(&store, &batch).unwrap()
        );
    }

    #[test]
    fn rejects_wrong_window_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::new(toy_spec(ModelKind::HopPool)).unwrap();
        let store = model.init_params(&mut rng).unwrap();
        let bad = vec![Tensor::zeros(7, 3)];
        assert!(matches!(
            model.predict(&store, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn loss_cases() {
        let y = Tensor::from_rows(&[vec![0.01, 0.2], vec![0.01, -0.1], vec![0.01, 0.3]]).unwrap();
        let one_hot = Tensor::from_rows(&vec![vec![1.0, 0.0]; 3]).unwrap();
        assert!(matches!(
            sharpe_loss(&one_hot, &y, LossKind::NegativeSharpe),
            Err(Error::DegenerateLoss)
        ));
        let second = Tensor::from_rows(&vec![vec![0.0, 1.0]; 3]).unwrap();
        let col = [0.2, -0.1, 0.3];
        let mean = col.iter().sum::<f64>() / 3.0;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0).sqrt();
        let got = sharpe_loss(&second, &y, LossKind::NegativeSharpe).unwrap();
        assert!((got + mean / sd).abs() < 1e-14);
        let vol = sharpe_loss(&second, &y, LossKind::Volatility).unwrap();
        assert!((vol - sd).abs() < 1e-14);
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for kind in [ModelKind::HopPool, ModelKind::HopTra, ModelKind::Lstm] {
            let mut spec = toy_spec(kind);
            spec.arch.pool_time2vec = true;
            let model = Model::new(spec).unwrap();
            let store = model.init_params(&mut rng).unwrap();
            let batch = random_batch(4, 8, 3, &mut rng);
            let next = ParamStore::normal(4, 3, 0.02, &mut rng);
            let mut tape = Tape::new();
            let (_, loss) = model.loss_on_tape(&mut tape, &store, &batch, &next).unwrap();
            let err = finite_diff_check(&mut tape, loss, 1e-6).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn zeroed_branches_reduce_block_to_double_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::new(toy_spec(ModelKind::HopTra)).unwrap();
        let mut store = model.init_params(&mut rng).unwrap();
        for name in ["enc0.attn.w_v", "enc0.attn.w_o", "enc0.mlp.w2"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = ParamStore::normal(8, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model.encoder_block_on_tape(&mut tape, &store, xv, 0, 1).unwrap();
        let got = tape.value(out).clone();
        assert_eq!(got.shape(), [8, 4]);
        let ln = |t: &Tensor| {
            let mut o = t.clone();
            for r in 0..t.rows() {
                let row = t.row_slice(r);
                let m = row.iter().sum::<f64>() / row.len() as f64;
                let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / row.len() as f64;
                for c in 0..t.cols() {
                    o.set(r, c, (row[c] - m) / (v + LAYER_NORM_EPS).sqrt());
                }
            }
            o
        };
        assert!(got.max_abs_diff(&ln(&ln(&x))) < 1e-12);
    }

    #[test]
    fn block_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = Model::new(toy_spec(ModelKind::HopTra)).unwrap();
        let store = model.init_params(&mut rng).unwrap();
        let x = ParamStore::normal(8, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model.encoder_block_on_tape(&mut tape, &store, xv, 1, 1).unwrap();
        let got = tape.value(out).clone();

        let attn = crate::hopfield::hopfield_association(&store, &model.block_attention(1), &x, &x, &x)
            .unwrap();
        let lnorm = |t: &Tensor, prefix: &str| {
            let mut h = Tape::new();
            let v = h.constant(t.clone());
            let n = h.layer_norm(v, LAYER_NORM_EPS).unwrap();
            let n = h.value(n).clone();
            let g = store.get(&format!("{prefix}.gain")).unwrap();
            let b = store.get(&format!("{prefix}.bias")).unwrap();
            let mut o = n.clone();
            for r in 0..n.rows() {
                for c in 0..n.cols() {
                    o.set(r, c, n.get(r, c) * g.get(0, c) + b.get(0, c));
                }
            }
            o
        };
        let add = |a: &Tensor, b: &Tensor| a.zip_map(b, |p, q| p + q);
        let affine = |t: &Tensor, w: &str, b: &str| {
            let y = t.matmul(store.get(w).unwrap()).unwrap();
            let bias = store.get(b).unwrap();
            let mut o = y.clone();
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    o.set(r, c, y.get(r, c) + bias.get(0, c));
                }
            }
            o
        };
        let x1 = lnorm(&add(&attn, &x), "enc1.ln1");
        let h = affine(&x1, "enc1.mlp.w1", "enc1.mlp.b1").map(|v| {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        });
        let m = affine(&h, "enc1.mlp.w2", "enc1.mlp.b2");
        let expected = lnorm(&add(&m, &x1), "enc1.ln2");
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_block_encoder_is_time2vec_mean_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut spec = toy_spec(ModelKind::HopTra);
        spec.arch.n_blocks = 0;
        let model = Model::new(spec).unwrap();
        let store = model.init_params(&mut rng).unwrap();
        let batch = random_batch(2, 8, 3, &mut rng);
        let got = model.predict(&store, &batch).unwrap();

        let omega = store.get("t2v.omega").unwrap().data().to_vec();
        let k1 = 3;
        let mut expected = Tensor::zeros(2, 3);
        for (b, w) in batch.iter().enumerate() {
            let mut feats = Tensor::zeros(8, 3 + 9);
            for t in 0..8 {
                for a in 0..3 {
                    feats.set(t, a, w.get(t, a));
                    let p = Time2VecParams {
                        omega: omega[a * k1..(a + 1) * k1].to_vec(),
                        phi: vec![0.0; k1],
                        activation: Periodic::Sine,
                    };
                    let e = time2vec_embed(&[0.0; 8], &p).unwrap();
                    for k in 0..k1 {
                        feats.set(t, 3 + a * k1 + k, e.get(t, k));
                    }
                }
            }
            let emb = feats.matmul(store.get("embed.w").unwrap()).unwrap();
            let mean: Vec<f64> = (0..4)
                .map(|c| (0..8).map(|t| emb.get(t, c)).sum::<f64>() / 8.0)
                .collect();
            let logits = Tensor::row(mean).matmul(store.get("head.w").unwrap()).unwrap();
            let mx = logits.data().iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.data().iter().map(|l| (l - mx).exp()).sum();
            for a in 0..3 {
                expected.set(b, a, (logits.get(0, a) - mx).exp() / z);
            }
        }
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn one_hot_loss_matches_metrics_sharpe() {
        let y = Tensor::from_rows(&[
            vec![0.01, 0.02, -0.01],
            vec![0.03, -0.01, 0.0],
            vec![-0.02, 0.02, 0.01],
            vec![0.00, 0.04, 0.02],
        ])
        .unwrap();
        let w = Tensor::from_rows(&vec![vec![0.0, 1.0, 0.0]; 4]).unwrap();
        let got = sharpe_loss(&w, &y, LossKind::NegativeSharpe).unwrap();
        let col: Vec<f64> = (0..4).map(|r| y.get(r, 1)).collect();
        let annual = crate::metrics::sharpe_ratio(&crate::metrics::PortfolioSeries::from_values(col)).unwrap();
        assert!((got + annual / crate::metrics::ANNUALIZATION.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn periodic_columns_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = Time2VecParams {
            omega: (0..6).map(|_| rng.random_range(-5.0..5.0)).collect(),
            phi: (0..6).map(|_| rng.random_range(-5.0..5.0)).collect(),
            activation: Periodic::Sine,
        };
        let e = time2vec_embed(&[0.0; 50], &p).unwrap();
        for t in 0..50 {
            for k in 1..6 {
                assert!(e.get(t, k).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = toy_spec(ModelKind::HopTra);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"HOP-TRA\""));
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), spec);
        let minimal: ModelSpec =
            serde_json::from_str(r#"{"kind":"LSTM","n_assets":4,"lookback":16}"#).unwrap();
        assert_eq!(minimal.arch, ArchConfig::default());
        assert_eq!(minimal.loss, LossKind::NegativeSharpe);
    }
}
