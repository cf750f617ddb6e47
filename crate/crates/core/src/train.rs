//! AdamW training with early stopping, and inference by weight averaging.

use std::io::Write;
use std::ops::Range;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::data::{BatchConfig, BatchSet, ReturnMatrix};
use crate::error::{Error, Result};
use crate::models::Model;

/// Share of the purged training rows used for fitting; the rest validates.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 || !(self.lr > 0.0) || self.patience < 1 {
            return Err(Error::InvalidArgument(format!(
                "need max_epochs >= 1, lr > 0 and patience >= 1, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One decoupled-weight-decay Adam update. `grads` are looked up by
/// parameter name; a missing gradient counts as zero.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            detail: format!("state has {} slots for {} params", state.m.len(), params.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (name, theta)) in params.iter_mut().enumerate() {
        let g = grads.iter().find(|(n, _)| n == name).map(|(_, g)| g);
        if let Some(g) = g {
            if g.shape() != theta.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("gradient of {name} is {:?}, param {:?}", g.shape(), theta.shape()),
                });
            }
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, th) in theta.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *th -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *th);
        }
    }
    Ok(())
}

/// Best validation loss seen so far and the parameters that produced it.
#[derive(Clone, Debug)]
pub struct EarlyStopState {
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best: Option<ParamStore>,
    pub since_improvement: usize,
    patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best: None,
            since_improvement: 0,
            patience,
        }
    }

    /// Record an epoch; returns true when training should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64, params: &ParamStore) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.best = Some(params.clone());
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,skipped_batches")?;
        for e in &self.epochs {
            writeln!(w, "{},{:?},{:?},{}", e.epoch, e.train_loss, e.val_loss, e.skipped_batches)?;
        }
        Ok(())
    }
}

/// Maximal runs of consecutive row indices in a sorted list.
pub fn contiguous_runs(rows: &[usize]) -> Vec<Range<usize>> {
    let mut runs: Vec<Range<usize>> = Vec::new();
    for &r in rows {
        match runs.last_mut() {
            Some(last) if last.end == r => last.end = r + 1,
            _ => runs.push(r..r + 1),
        }
    }
    runs
}

/// Window origins and targets for training and validation.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Windows over the purged training rows. The first 80% of the rows (in
/// time order) fit the model: a window `[t, t + L)` and its target `t + L`
/// must lie in one contiguous run of them. Validation targets are the last
/// 20% of the rows; their windows may reach back into contiguous fitting
/// rows.
pub fn plan_windows(train_rows: &[usize], lookback: usize) -> Result<WindowPlan> {
    let mut rows = train_rows.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let cut = ((rows.len() as f64) * TRAIN_FRACTION).round() as usize;
    let (fit, _) = rows.split_at(cut);
    let mut train = Vec::new();
    for run in contiguous_runs(fit) {
        if run.len() > lookback {
            train.extend(run.start..run.end - lookback);
        }
    }
    let mut validation = Vec::new();
    for run in contiguous_runs(&rows) {
        for target in run.start.max(rows.get(cut).copied().unwrap_or(usize::MAX))..run.end {
            if target >= run.start + lookback {
                validation.push(target - lookback);
            }
        }
    }
    if train.len() < 2 || validation.len() < 2 {
        return Err(Error::FoldUnusable {
            rows: rows.len(),
            needed: lookback + 2,
        });
    }
    Ok(WindowPlan { train, validation })
}

/// Windows starting at `origins` and the return row following each.
pub fn gather(r: &ReturnMatrix, origins: &[usize], lookback: usize) -> (Vec<Tensor>, Tensor) {
    let n = r.n_assets();
    let windows = origins.iter().map(|&o| r.window(o, lookback)).collect();
    let mut targets = Tensor::zeros(origins.len(), n);
    for (b, &o) in origins.iter().enumerate() {
        for i in 0..n {
            targets.set(b, i, r.get(o + lookback, i));
        }
    }
    (windows, targets)
}

fn batch_loss(
    model: &Model,
    params: &ParamStore,
    r: &ReturnMatrix,
    origins: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<Vec<(String, Tensor)>>)> {
    let lookback = model.spec().lookback;
    let (windows, targets) = gather(r, origins, lookback);
    let mut tape = Tape::new();
    let (_, loss) = model.loss_on_tape(&mut tape, params, &windows, &targets)?;
    let value = tape.value(loss).item();
    let grads = if with_grad {
        Some(tape.backward(loss)?.into_named())
    } else {
        None
    };
    Ok((value, grads))
}

/// Mean loss over batches, skipping degenerate ones. `None` when every
/// batch was degenerate.
fn mean_loss(model: &Model, params: &ParamStore, r: &ReturnMatrix, batches: &BatchSet) -> Result<Option<f64>> {
    let (mut total, mut count) = (0.0, 0);
    for b in batches.batches().filter(|b| b.len() >= 2) {
        match batch_loss(model, params, r, b, false) {
            Ok((v, _)) => {
                total += v;
                count += 1;
            }
            Err(Error::DegenerateLoss) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Fit `params` in place on the planned windows and return the
/// best-validation snapshot.
pub fn fit(
    model: &Model,
    mut params: ParamStore,
    r: &ReturnMatrix,
    plan: &WindowPlan,
    batch_size: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(ParamStore, TrainHistory)> {
    cfg.validate()?;
    let bcfg = BatchConfig {
        lookback: model.spec().lookback,
        batch_size,
    };
    bcfg.validate()?;
    let train = BatchSet::from_origins(plan.train.clone(), bcfg);
    let val = BatchSet::from_origins(plan.validation.clone(), bcfg);
    let mut adam = AdamState::new(&params);
    let mut early = EarlyStopState::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut batches: Vec<&[usize]> = train.batches().filter(|b| b.len() >= 2).collect();
    for epoch in 1..=cfg.max_epochs {
        batches.shuffle(rng);
        let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for b in &batches {
            match batch_loss(model, &params, r, b, true) {
                Ok((v, Some(g))) => {
                    adamw_step(&mut params, &g, &mut adam, cfg)?;
                    total += v;
                    used += 1;
                }
                Ok((_, None)) => unreachable!("gradients requested"),
                Err(Error::DegenerateLoss) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::AllBatchesDegenerate { epoch });
        }
        if skipped > 0 {
            warn!("epoch {epoch}: skipped {skipped} degenerate batches");
        }
        let val_loss = mean_loss(model, &params, r, &val)?.ok_or(Error::AllBatchesDegenerate { epoch })?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / used as f64,
            val_loss,
            skipped_batches: skipped,
        });
        if early.update(epoch, val_loss, &params) {
            break;
        }
    }
    history.best_epoch = early.best_epoch;
    Ok((early.best.unwrap_or(params), history))
}

/// Initialize and train `model` on the purged training rows.
pub fn train_model(
    model: &Model,
    r: &ReturnMatrix,
    train_rows: &[usize],
    batch_size: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(ParamStore, TrainHistory)> {
    let plan = plan_windows(train_rows, model.spec().lookback)?;
    let params = model.init_params(rng)?;
    fit(model, params, r, &plan, batch_size, cfg, rng)
}

/// Mean predicted allocation over every window lying inside `test_rows`.
pub fn infer_weights(
    model: &Model,
    params: &ParamStore,
    r: &ReturnMatrix,
    test_rows: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let lookback = model.spec().lookback;
    let mut rows = test_rows.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let origins: Vec<usize> = contiguous_runs(&rows)
        .into_iter()
        .filter(|run| run.len() >= lookback)
        .flat_map(|run| run.start..=run.end - lookback)
        .collect();
    if origins.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: lookback,
            available: contiguous_runs(&rows).iter().map(|r| r.len()).max().unwrap_or(0),
        });
    }
    let n = r.n_assets();
    let mut sum = vec![0.0; n];
    for chunk in origins.chunks(batch_size.max(1)) {
        let windows: Vec<Tensor> = chunk.iter().map(|&o| r.window(o, lookback)).collect();
        let w = model.predict(params, &windows)?;
        for b in 0..w.rows() {
            for (s, x) in sum.iter_mut().zip(w.row_slice(b)) {
                *s += x;
            }
        }
    }
    Ok(sum.into_iter().map(|s| s / origins.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchConfig, LossKind, ModelKind, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_stationary() {
        let mut p = scalar_store(1.5);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut p, &[("theta".into(), Tensor::scalar(0.0))], &mut st, &cfg).unwrap();
        assert_eq!(p.get("theta").unwrap().item(), 1.5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = scalar_store(2.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adamw_step(&mut p, &[], &mut st, &cfg).unwrap();
        assert!((p.get("theta").unwrap().item() - 2.0 * (1.0 - 1e-3 * 1e-2)).abs() < 1e-15);
    }

    #[test]
    fn single_step_by_hand() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adamw_step(&mut p, &[("theta".into(), Tensor::scalar(2.0))], &mut st, &cfg).unwrap();
        let m_hat = (0.1 * 2.0) / (1.0 - 0.9);
        let v_hat: f64 = (0.001 * 4.0) / (1.0 - 0.999);
        let expected = 1.0 - 1e-3 * (m_hat / (v_hat.sqrt() + 1e-8) + 1e-2 * 1.0);
        assert!((p.get("theta").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn without_decay_matches_adam() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let mut p = scalar_store(0.3);
        let mut st = AdamState::new(&p);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.3f64);
        for (t, g) in [0.5, -1.2, 0.7, 0.1].into_iter().enumerate() {
            adamw_step(&mut p, &[("theta".into(), Tensor::scalar(g))], &mut st, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("theta").unwrap().item() - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_shape_checked() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let bad = [("theta".to_string(), Tensor::zeros(2, 1))];
        assert!(adamw_step(&mut p, &bad, &mut st, &TrainConfig::default()).is_err());
    }

    #[test]
    fn early_stop_contract() {
        let mut es = EarlyStopState::new(1);
        assert!(!es.update(1, 0.5, &scalar_store(1.0)));
        assert!(es.update(2, 0.7, &scalar_store(2.0)));
        assert_eq!(es.best_epoch, 1);
        assert_eq!(es.best.unwrap().get("theta").unwrap().item(), 1.0);
    }

    #[test]
    fn runs_and_window_plan() {
        assert_eq!(contiguous_runs(&[1, 2, 3, 7, 8, 10]), vec![1..4, 7..9, 10..11]);
        let rows: Vec<usize> = (0..50).chain(100..150).collect();
        let plan = plan_windows(&rows, 10).unwrap();
        // fitting rows are the first 80: [0, 50) and [100, 130)
        assert_eq!(plan.train, (0..40).chain(100..120).collect::<Vec<_>>());
        // validation targets [130, 150), windows reaching back into fitting rows
        assert_eq!(plan.validation, (120..140).collect::<Vec<_>>());
        assert!(matches!(plan_windows(&(0..12).collect::<Vec<_>>(), 10), Err(Error::FoldUnusable { .. })));
    }

    fn toy_model() -> Model {
        Model::new(ModelSpec {
            kind: ModelKind::HopPool,
            n_assets: 3,
            lookback: 8,
            loss: LossKind::NegativeSharpe,
            arch: ArchConfig {
                pool_hidden: 8,
                ..ArchConfig::default()
            },
        })
        .unwrap()
    }

    #[test]
    fn inference_averages_simplex_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = toy_model();
        let params = model.init_params(&mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(-0.02..0.02)).collect())
            .collect();
        let r = ReturnMatrix::from_rows(&rows).unwrap();
        let single = infer_weights(&model, &params, &r, &(5..13).collect::<Vec<_>>(), 4).unwrap();
        let direct = model.predict(&params, &[r.window(5, 8)]).unwrap();
        assert_eq!(single, direct.row_slice(0));
        let all = infer_weights(&model, &params, &r, &(0..40).collect::<Vec<_>>(), 5).unwrap();
        assert!((all.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(infer_weights(&model, &params, &r, &[1, 2, 3], 4).is_err());
    }

    #[test]
    fn constant_predictions_average_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = toy_model();
        let mut params = model.init_params(&mut rng).unwrap();
        params.get_mut("head.w").unwrap().data_mut().fill(0.0);
        params.get_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.3, -0.1, 0.5]);
        let r = ReturnMatrix::from_rows(&vec![vec![0.01, 0.0, -0.01]; 30]).unwrap();
        let w = infer_weights(&model, &params, &r, &(0..30).collect::<Vec<_>>(), 7).unwrap();
        let expected = model.predict(&params, &[r.window(0, 8)]).unwrap();
        for (a, b) in w.iter().zip(expected.row_slice(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn signal_panel(seed: u64) -> ReturnMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                (0..3)
                    .map(|i| {
                        let drift = if i == 0 { 0.01 } else { 0.0 };
                        drift + 0.01 * rng.random_range(-1.7..1.7)
                    })
                    .collect()
            })
            .collect();
        ReturnMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_beats_uniform() {
        let r = signal_panel(3);
        let model = toy_model();
        let cfg = TrainConfig {
            max_epochs: 30,
            lr: 1e-2,
            patience: 5,
            ..TrainConfig::default()
        };
        let rows: Vec<usize> = (0..r.n_rows()).collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            train_model(&model, &r, &rows, 16, &cfg, &mut rng).unwrap()
        };
        let (p1, h1) = run();
        let (p2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1.iter().collect::<Vec<_>>(), p2.iter().collect::<Vec<_>>());

        let plan = plan_windows(&rows, 8).unwrap();
        let (_, targets) = gather(&r, &plan.validation, 8);
        let uniform = Tensor::filled(targets.rows(), 3, 1.0 / 3.0);
        let uniform_loss = crate::models::sharpe_loss(&uniform, &targets, LossKind::NegativeSharpe).unwrap();
        let (windows, _) = gather(&r, &plan.validation, 8);
        let trained = model.predict(&p1, &windows).unwrap();
        let trained_loss = crate::models::sharpe_loss(&trained, &targets, LossKind::NegativeSharpe).unwrap();
        assert!(trained_loss < uniform_loss, "{trained_loss} vs {uniform_loss}");
        let best = h1.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h1.epochs[h1.best_epoch - 1].val_loss, best);
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: -0.5,
                val_loss: -0.25,
                skipped_batches: 0,
            }],
            best_epoch: 1,
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss,skipped_batches\n1,-0.5,-0.25,0\n");
    }
}
