//! Loss and error metrics, the Adam optimizer, the mini-batch training loop
//! with patience-based early stopping, and weight-transfer initialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};

use crate::data::{FeatureWindow, WindowSet};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::model::{ArchSpec, CnnModel, GradientSet};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    None,
    DenseFrozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2_coeff: f64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// Stop as soon as the validation loss is at or below this value.
    pub target_val_mse: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_coeff: 1e-4,
            seed: 0,
            freeze: FreezePolicy::None,
            target_val_mse: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= patience ({}) <= max epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("bad Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Mean absolute error in percent of SoC.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(100.0 * pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Maximum absolute error in percent of SoC.
pub fn max_err(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(100.0 * pred.iter().zip(target).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max))
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Empty("prediction vector"));
    }
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<(Tensor, Tensor)>,
    pub second: Vec<(Tensor, Tensor)>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[LayerParams]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| (Tensor::zeros(p.weights.shape()), Tensor::zeros(p.biases.shape())))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters with `trainable == false` are
/// left bit-for-bit unchanged; the step counter always advances.
pub fn adam_step(params: &mut [LayerParams], grads: &GradientSet, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.layers.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch("parameter, gradient and optimizer state counts differ".into()));
    }
    for (p, g) in params.iter().zip(&grads.layers) {
        if p.weights.shape() != g.weights.shape() || p.biases.shape() != g.biases.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} for parameter {:?}",
                g.weights.shape(),
                p.weights.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let update = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    };
    for (i, (p, g)) in params.iter_mut().zip(&grads.layers).enumerate() {
        if !p.trainable {
            continue;
        }
        let (mw, mb) = &mut state.first[i];
        let (vw, vb) = &mut state.second[i];
        update(p.weights.data_mut(), g.weights.data(), mw.data_mut(), vw.data_mut());
        update(p.biases.data_mut(), g.biases.data(), mb.data_mut(), vb.data_mut());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation loss has failed to strictly improve on the
/// best value for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    /// Records the validation loss of the next (1-based) epoch.
    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Key/value provenance written as `#` comment lines ahead of the CSV.
    pub provenance: BTreeMap<String, String>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_mse, e.val_mse);
        }
        out
    }

    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_mse).collect()
    }
}

/// Anything that maps a window to an SoC estimate.
pub trait SocPredictor {
    fn predict_window(&self, window: &FeatureWindow<'_>) -> Result<f64>;
}

impl SocPredictor for CnnModel {
    fn predict_window(&self, window: &FeatureWindow<'_>) -> Result<f64> {
        self.predict(window)
    }
}

/// Predicts the true label; every metric against it is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelOracle;

impl SocPredictor for LabelOracle {
    fn predict_window(&self, window: &FeatureWindow<'_>) -> Result<f64> {
        Ok(window.label)
    }
}

/// Mean squared error of inference-mode predictions over a window set.
pub fn dataset_mse<P: SocPredictor + ?Sized>(model: &P, windows: &WindowSet) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("window set"));
    }
    let mut sum = 0.0;
    for w in windows.iter() {
        sum += (model.predict_window(&w)? - w.label).powi(2);
    }
    Ok(sum / windows.len() as f64)
}

/// Trains against the validation MSE of `val`, returning the checkpoint
/// with the lowest validation MSE.
pub fn train(model: CnnModel, train_set: &WindowSet, val_set: &WindowSet, config: &TrainConfig, rng: &mut Rng) -> Result<(CnnModel, TrainReport)> {
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    train_with_validator(model, train_set, config, rng, |m, _| dataset_mse(m, val_set))
}

/// The training loop with a caller-supplied validation loss, called once
/// per epoch with the current model and the 1-based epoch number.
pub fn train_with_validator<F>(mut model: CnnModel, train_set: &WindowSet, config: &TrainConfig, rng: &mut Rng, mut validate: F) -> Result<(CnnModel, TrainReport)>
where
    F: FnMut(&CnnModel, usize) -> Result<f64>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if train_set.t_w != model.spec.t_w {
        return Err(Error::SpecMismatch(format!(
            "windows have t_w = {}, model expects {}",
            train_set.t_w, model.spec.t_w
        )));
    }
    model.spec.l2_coeff = config.l2_coeff;
    match config.freeze {
        FreezePolicy::None => {}
        FreezePolicy::DenseFrozen => model.freeze_dense(),
    }

    let mut adam = AdamState::new(&model.params);
    let mut grads = GradientSet::zeros_like(&model);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop_epoch = 0;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut sq_err_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grads.clear();
            let scale = 2.0 / batch.len() as f64;
            let mut batch_sq = 0.0;
            for &i in batch {
                let w = train_set.get(i);
                let (pred, cache) = model.forward(&w, rng, true)?;
                let err = pred - w.label;
                batch_sq += err * err;
                model.accumulate_gradients(&cache, scale * err, &mut grads)?;
            }
            let batch_loss = batch_sq / batch.len() as f64 + model.l2_penalty();
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: batch_loss,
                });
            }
            model.add_l2_gradient(&mut grads);
            adam_step(&mut model.params, &grads, &mut adam, config)?;
            sq_err_sum += batch_sq;
        }
        let train_mse = sq_err_sum / train_set.len() as f64;
        let val_mse = validate(&model, epoch)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                value: val_mse,
            });
        }
        let seconds = started.elapsed().as_secs_f64();
        info!("epoch {epoch}: train mse {train_mse:.3e}, val mse {val_mse:.3e} ({seconds:.1} s)");
        epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds,
        });
        stop_epoch = epoch;
        match stopper.observe(val_mse) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                info!("early stop at epoch {epoch}, best epoch {}", stopper.best_epoch());
                break;
            }
        }
        if config.target_val_mse.is_some_and(|t| val_mse <= t) {
            info!("validation target reached at epoch {epoch}");
            break;
        }
    }

    let mut provenance = BTreeMap::new();
    provenance.insert("batch_size".into(), config.batch_size.to_string());
    provenance.insert("learning_rate".into(), format!("{:?}", config.learning_rate));
    provenance.insert("adam_betas".into(), format!("{:?},{:?}", config.beta1, config.beta2));
    provenance.insert("adam_epsilon".into(), format!("{:?}", config.epsilon));
    provenance.insert("l2_coeff".into(), format!("{:?}", config.l2_coeff));
    provenance.insert("patience".into(), config.patience.to_string());
    provenance.insert("max_epochs".into(), config.max_epochs.to_string());
    provenance.insert("seed".into(), config.seed.to_string());
    if let Some(t) = config.target_val_mse {
        provenance.insert("target_val_mse".into(), format!("{t:?}"));
    }
    provenance.insert(
        "freeze".into(),
        match config.freeze {
            FreezePolicy::None => "none",
            FreezePolicy::DenseFrozen => "dense-frozen",
        }
        .into(),
    );
    let report = TrainReport {
        epochs,
        stop_epoch,
        best_epoch: stopper.best_epoch(),
        best_val_mse: stopper.best(),
        provenance,
    };
    Ok((best, report))
}

/// Copies every parameter of `source` into a model of `target` structure
/// and freezes the dense blocks and the final neuron.
pub fn transfer_init(target: &ArchSpec, source: &CnnModel) -> Result<CnnModel> {
    target.validate()?;
    if !target.same_structure(&source.spec) {
        return Err(Error::SpecMismatch(format!(
            "source is {} / {} conv layers / t_w {}, target is {} / {} / {}",
            source.spec.arch, source.spec.conv_layers, source.spec.t_w, target.arch, target.conv_layers, target.t_w
        )));
    }
    let mut model = source.clone();
    model.freeze_dense();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub cycle: String,
    /// `None` for the aggregate row.
    pub temp_c: Option<i32>,
    pub mae_pct: f64,
    pub max_pct: f64,
    pub mse: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregate: MetricsRow,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cycle,temp_c,mae_pct,max_pct,mse\n");
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let temp = r.temp_c.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.cycle, temp, r.mae_pct, r.max_pct, r.mse);
        }
        out
    }

    pub fn row(&self, cycle: &str, temp_c: i32) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.cycle == cycle && r.temp_c == Some(temp_c))
    }

    /// Mean absolute error over all windows of one cycle name, any temperature.
    pub fn cycle_mae(&self, cycle: &str) -> Option<f64> {
        let rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.cycle == cycle).collect();
        let n: usize = rows.iter().map(|r| r.windows).sum();
        (n > 0).then(|| rows.iter().map(|r| r.mae_pct * r.windows as f64).sum::<f64>() / n as f64)
    }
}

fn metrics_row(cycle: String, temp_c: Option<i32>, pred: &[f64], target: &[f64]) -> Result<MetricsRow> {
    Ok(MetricsRow {
        cycle,
        temp_c,
        mae_pct: mae(pred, target)?,
        max_pct: max_err(pred, target)?,
        mse: mse_loss(pred, target)?.0,
        windows: pred.len(),
    })
}

/// Per-(cycle, temperature) and pooled metrics in inference mode.
pub fn evaluate<P: SocPredictor + ?Sized>(model: &P, windows: &WindowSet) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let (mut all_pred, mut all_target) = (Vec::new(), Vec::new());
    for ((cycle, temp), idx) in windows.groups() {
        if idx.is_empty() {
            warn!("{cycle}@{temp}C has no windows; skipped in the report");
            continue;
        }
        let mut pred = Vec::with_capacity(idx.len());
        let mut target = Vec::with_capacity(idx.len());
        for i in idx {
            let w = windows.get(i);
            pred.push(model.predict_window(&w)?);
            target.push(w.label);
        }
        rows.push(metrics_row(cycle, Some(temp), &pred, &target)?);
        all_pred.extend(pred);
        all_target.extend(target);
    }
    if all_pred.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let aggregate = metrics_row("ALL".into(), None, &all_pred, &all_target)?;
    Ok(MetricsReport { rows, aggregate })
}
