//! Losses, optimizers and the semi-supervised training loop.
//!
//! Every row of the input takes part in the forward pass so unlabeled rows
//! shape the pooled representations; only rows selected by the training mask
//! contribute to the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{forward_on_tape, predict_classes, HeadKind, ModelParams, ModelSpec};
use crate::metrics::{accuracy, concordance_index};
use crate::ndcore::{Matrix, Tape, Var};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Mean of `−log softmax(logits)[label]` over rows with `mask[i]`.
pub fn masked_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let (n, c) = tape.value(logits).shape();
    if labels.len() != n || mask.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: if labels.len() != n { labels.len() } else { mask.len() },
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut picked = Vec::with_capacity(rows.len());
    for &i in &rows {
        if labels[i] >= c {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: labels[i],
                classes: c,
            });
        }
        picked.push(labels[i]);
    }
    let sub = tape.gather_rows(logits, &rows)?;
    let logp = tape.row_log_softmax(sub)?;
    let chosen = tape.pick(logp, &picked)?;
    let mean = tape.mean(chosen);
    Ok(tape.neg(mean))
}

/// Breslow negative log partial likelihood averaged over events.
/// `risks` is n×1.
pub fn cox_nll<T: Scalar>(tape: &mut Tape<T>, risks: Var, time: &[T], event: &[bool]) -> Result<Var> {
    tape.cox_nll(risks, time, event)
}

/// Cox loss restricted to the rows with `mask[i]`.
pub fn masked_cox_nll<T: Scalar>(
    tape: &mut Tape<T>,
    risks: Var,
    time: &[f64],
    event: &[bool],
    mask: &[bool],
) -> Result<Var> {
    let n = tape.value(risks).rows();
    if time.len() != n || event.len() != n || mask.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: time.len().min(event.len()).min(mask.len()),
        });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let t: Vec<T> = rows.iter().map(|&i| T::of(time[i])).collect();
    let e: Vec<bool> = rows.iter().map(|&i| event[i]).collect();
    let sub = tape.gather_rows(risks, &rows)?;
    tape.cox_nll(sub, &t, &e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Moment buffers, one per parameter tensor in [`ModelParams::iter`] order.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
    steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Applies one update. `grads` aligns with `params.iter()`; `None` (or a
/// frozen tensor) leaves the tensor unchanged.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Option<Matrix<T>>],
    state: &mut OptimizerState<T>,
    optimizer: &Optimizer,
    learning_rate: f64,
) -> Result<()> {
    let count = params.iter().count();
    if grads.len() != count {
        return Err(Error::LengthMismatch {
            left: count,
            right: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
        }
    }
    if state.first.is_empty() {
        state.first = params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        state.second = state.first.clone();
    } else if state.first.len() != count
        || state
            .first
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.shape() != p.value.shape())
    {
        return Err(Error::ShapeMismatch {
            op: "optimizer_state",
            left: (state.first.len(), 0),
            right: (count, 0),
        });
    }
    state.steps += 1;
    params.step += 1;
    let lr = T::of(learning_rate);
    match *optimizer {
        Optimizer::Adam { beta1, beta2, eps } => {
            let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
            let t = state.steps as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let Some(g) = g.as_ref().filter(|_| p.trainable) else {
                    continue;
                };
                let m = state.first[i].data_mut();
                let v = state.second[i].data_mut();
                for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = b1 * m[j] + (T::one() - b1) * gj;
                    v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                    let mhat = m[j] / c1;
                    let vhat = v[j] / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Optimizer::Sgd { momentum } => {
            let mu = T::of(momentum);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let Some(g) = g.as_ref().filter(|_| p.trainable) else {
                    continue;
                };
                let vel = state.first[i].data_mut();
                for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                    vel[j] = mu * vel[j] + gj;
                    *w -= lr * vel[j];
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchMode {
    Full,
    Partial { batch_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    TrainLoss,
    TestMetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub metric: StopMetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub batch_mode: BatchMode,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            batch_mode: BatchMode::Full,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let BatchMode::Partial { batch_size: 0 } = self.batch_mode {
            return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return Err(Error::InvalidParameter("adam needs β in [0, 1) and ε > 0".into()));
                }
            }
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidParameter("momentum must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// One row of the training history. For classification the metrics are
/// accuracies; for survival they are concordance indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// Tab-separated table with a header row.
    pub fn to_tsv(&self, metric_name: &str) -> String {
        let mut s = format!("epoch\ttrain_loss\ttrain_{metric_name}\ttest_{metric_name}\n");
        for r in &self.records {
            let test = r.test_metric.map_or_else(|| "NA".to_string(), |v| format!("{v:.16e}"));
            s.push_str(&format!(
                "{}\t{:.16e}\t{:.16e}\t{}\n",
                r.epoch, r.train_loss, r.train_metric, test
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Classes(&'a [usize]),
    Survival { time: &'a [f64], event: &'a [bool] },
}

/// Inputs to [`train`]. All rows of `x` are fed forward; `train_mask`
/// selects the rows whose loss is backpropagated.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a, T> {
    pub x: &'a Matrix<T>,
    pub target: Target<'a>,
    pub train_mask: &'a [bool],
    pub test_mask: Option<&'a [bool]>,
    pub given: Option<&'a Matrix<T>>,
}

impl<T: Scalar> TrainData<'_, T> {
    fn check(&self, spec: &ModelSpec) -> Result<()> {
        let n = self.x.rows();
        let lens = [
            Some(self.train_mask.len()),
            self.test_mask.map(<[bool]>::len),
            Some(match self.target {
                Target::Classes(l) => l.len(),
                Target::Survival { time, event } => {
                    if time.len() != event.len() {
                        return Err(Error::LengthMismatch {
                            left: time.len(),
                            right: event.len(),
                        });
                    }
                    time.len()
                }
            }),
        ];
        for len in lens.into_iter().flatten() {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        match (spec.head(), self.target) {
            (HeadKind::Classification { .. }, Target::Classes(_)) => {}
            (HeadKind::Cox, Target::Survival { time, event }) => {
                if !(0..n).any(|i| self.train_mask[i] && event[i]) {
                    return Err(Error::NoEvents);
                }
                if time.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                    return Err(Error::InvalidParameter("survival times must be positive".into()));
                }
            }
            _ => {
                return Err(Error::SpecInvalid(
                    "model head does not match the training target".into(),
                ))
            }
        }
        if !self.train_mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }
}

/// Shuffled partition of `0..n` into batches of `batch_size` (the last one
/// may be shorter).
pub fn partial_batch_iter(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn metric_on(target: Target<'_>, output: &[f64], cols: usize, mask: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    match target {
        Target::Classes(labels) => {
            let m = Matrix::from_vec(rows.len(), cols, rows.iter().flat_map(|&i| output[i * cols..(i + 1) * cols].iter().copied()).collect())
                .expect("shape");
            let pred = predict_classes(&m);
            let truth: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            accuracy(&pred, &truth).unwrap_or(f64::NAN)
        }
        Target::Survival { time, event } => {
            let t: Vec<f64> = rows.iter().map(|&i| time[i]).collect();
            let e: Vec<bool> = rows.iter().map(|&i| event[i]).collect();
            let r: Vec<f64> = rows.iter().map(|&i| output[i]).collect();
            concordance_index(&r, &t, &e).unwrap_or(f64::NAN)
        }
    }
}

fn sub_target<'a>(target: Target<'_>, rows: &[usize], store: &'a mut TargetStore) -> Target<'a> {
    match target {
        Target::Classes(l) => {
            store.labels = rows.iter().map(|&i| l[i]).collect();
            Target::Classes(&store.labels)
        }
        Target::Survival { time, event } => {
            store.time = rows.iter().map(|&i| time[i]).collect();
            store.event = rows.iter().map(|&i| event[i]).collect();
            Target::Survival {
                time: &store.time,
                event: &store.event,
            }
        }
    }
}

#[derive(Default)]
struct TargetStore {
    labels: Vec<usize>,
    time: Vec<f64>,
    event: Vec<bool>,
}

/// Forward, masked loss and backward on one (partial) graph. Returns the loss
/// value, gradients aligned with `params.iter()`, and the head output.
fn loss_and_grads<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    x: &Matrix<T>,
    target: Target<'_>,
    mask: &[bool],
    given: Option<&Matrix<T>>,
) -> Result<(f64, Vec<Option<Matrix<T>>>, Matrix<T>)> {
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, spec, params, x, given, false)?;
    let loss = match target {
        Target::Classes(labels) => masked_cross_entropy(&mut tape, fwd.output, labels, mask)?,
        Target::Survival { time, event } => masked_cox_nll(&mut tape, fwd.output, time, event, mask)?,
    };
    tape.backward(loss)?;
    let grads = fwd
        .param_vars
        .iter()
        .flatten()
        .map(|&v| tape.grad(v).cloned())
        .collect();
    let value = tape.value(loss).item().to_f64_lossy();
    Ok((value, grads, tape.value(fwd.output).clone()))
}

/// Loss and parameter gradients of a full-input forward pass, exposed for
/// gradient checks.
pub fn loss_gradients<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    data: &TrainData<'_, T>,
) -> Result<(f64, Vec<Option<Matrix<T>>>)> {
    data.check(spec)?;
    let (loss, grads, _) = loss_and_grads(spec, params, data.x, data.target, data.train_mask, data.given)?;
    Ok((loss, grads))
}

fn diverged_on(err: Error, epoch: usize, history: &TrainHistory) -> Error {
    match err {
        Error::NonFinite(_) => Error::Diverged {
            epoch,
            history: Box::new(history.clone()),
        },
        other => other,
    }
}

/// Trains from `ModelParams::init(spec, config.seed)`.
pub fn train<T: Scalar>(
    spec: &ModelSpec,
    data: &TrainData<'_, T>,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainHistory)> {
    let params = ModelParams::init(spec, config.seed)?;
    train_from(spec, params, data, config)
}

/// Trains starting from the given parameters.
pub fn train_from<T: Scalar>(
    spec: &ModelSpec,
    mut params: ModelParams<T>,
    data: &TrainData<'_, T>,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainHistory)> {
    config.validate()?;
    spec.validate()?;
    data.check(spec)?;
    let n = data.x.rows();
    let out_cols = *spec.widths().last().expect("nonempty");
    let mut state = OptimizerState::new();
    let mut history = TrainHistory::default();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..config.epochs {
        let (loss, output) = match config.batch_mode {
            BatchMode::Full => {
                let (loss, grads, out) =
                    loss_and_grads(spec, &params, data.x, data.target, data.train_mask, data.given)
                        .map_err(|e| diverged_on(e, epoch, &history))?;
                if !loss.is_finite() {
                    return Err(diverged_on(Error::NonFinite("loss"), epoch, &history));
                }
                optimizer_step(&mut params, &grads, &mut state, &config.optimizer, config.learning_rate)?;
                (loss, out.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>())
            }
            BatchMode::Partial { batch_size } => {
                let batches = partial_batch_iter(n, batch_size, config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut output = vec![0.0; n * out_cols];
                let (mut total, mut weight) = (0.0, 0usize);
                for rows in batches {
                    let x = data.x.gather_rows(&rows);
                    let given = data.given.map(|g| g.submatrix(&rows));
                    let mask: Vec<bool> = rows.iter().map(|&i| data.train_mask[i]).collect();
                    let labeled = mask.iter().filter(|&&m| m).count();
                    let mut store = TargetStore::default();
                    let target = sub_target(data.target, &rows, &mut store);
                    let has_events = match target {
                        Target::Survival { event, .. } => (0..rows.len()).any(|i| mask[i] && event[i]),
                        Target::Classes(_) => true,
                    };
                    if labeled == 0 || !has_events {
                        let mut tape = Tape::new();
                        let fwd = forward_on_tape(&mut tape, spec, &params, &x, given.as_ref(), false)
                            .map_err(|e| diverged_on(e, epoch, &history))?;
                        scatter(&mut output, tape.value(fwd.output), &rows);
                        continue;
                    }
                    let (loss, grads, out) = loss_and_grads(spec, &params, &x, target, &mask, given.as_ref())
                        .map_err(|e| diverged_on(e, epoch, &history))?;
                    if !loss.is_finite() {
                        return Err(diverged_on(Error::NonFinite("loss"), epoch, &history));
                    }
                    scatter(&mut output, &out, &rows);
                    total += loss * labeled as f64;
                    weight += labeled;
                    optimizer_step(&mut params, &grads, &mut state, &config.optimizer, config.learning_rate)?;
                }
                (total / weight.max(1) as f64, output)
            }
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss,
            train_metric: metric_on(data.target, &output, out_cols, data.train_mask),
            test_metric: data.test_mask.map(|m| metric_on(data.target, &output, out_cols, m)),
        };
        history.records.push(record);
        if let Some(stop) = config.early_stop {
            let score = match stop.metric {
                StopMetric::TrainLoss => -loss,
                StopMetric::TestMetric => history.records[epoch].test_metric.unwrap_or(f64::NAN),
            };
            if score > best {
                best = score;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= stop.patience {
                    break;
                }
            }
        }
    }
    Ok((params, history))
}

fn scatter<T: Scalar>(output: &mut [f64], block: &Matrix<T>, rows: &[usize]) {
    let c = block.cols();
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..c {
            output[i * c + j] = block[(r, j)].to_f64_lossy();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{model_forward, LayerSpec};
    use crate::ndcore::compare_gradient;

    fn random(n: usize, p: usize, seed: u64) -> Matrix<f64> {
        let mut r = SplitMix64::new(seed);
        Matrix::from_fn(n, p, |_, _| r.normal())
    }

    fn ce_value(logits: &Matrix<f64>, labels: &[usize], mask: &[bool]) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let loss = masked_cross_entropy(&mut tape, l, labels, mask).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Matrix::zeros(3, 4);
        let v = ce_value(&logits, &[0, 1, 2], &[false, true, false]);
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let confident = Matrix::from_rows(&[[0.0, 800.0]]).unwrap();
        assert!(ce_value(&confident, &[1], &[true]) < 1e-300);

        let logits = random(4, 3, 1);
        let mut tape = Tape::new();
        let l = tape.param(logits);
        let loss = masked_cross_entropy(&mut tape, l, &[0, 2, 1, 1], &[true, false, true, false]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap();
        assert!(g.row(1).iter().chain(g.row(3)).all(|&v| v == 0.0));
        assert!(g.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Matrix::zeros(2, 3));
        assert!(matches!(
            masked_cross_entropy(&mut tape, l, &[0, 1], &[false, false]),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            masked_cross_entropy(&mut tape, l, &[0, 3], &[true, true]),
            Err(Error::LabelOutOfRange { row: 1, label: 3, classes: 3 })
        ));
        // out-of-range labels on unmasked rows are ignored
        assert!(masked_cross_entropy(&mut tape, l, &[0, 7], &[true, false]).is_ok());
    }

    fn cox_value(risks: &[f64], time: &[f64], event: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let r = tape.constant(Matrix::col_vector(risks));
        let loss = cox_nll(&mut tape, r, time, event)?;
        Ok(tape.value(loss).item())
    }

    #[test]
    fn cox_examples() {
        let v = cox_value(&[0.3, 0.3], &[1.0, 2.0], &[true, false]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = cox_value(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0], &[true, false, false, false, false]).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-14);
        assert!(matches!(cox_value(&[0.0; 2], &[1.0, 2.0], &[false, false]), Err(Error::NoEvents)));

        // Four subjects with a tie at t = 2 (Breslow: both tied events share the same risk set).
        let r: [f64; 4] = [0.5, -0.2, 1.1, 0.0];
        let t: [f64; 4] = [2.0, 2.0, 1.0, 3.0];
        let e = [true, true, false, true];
        let set = |ti: f64| (0..4).filter(|&j| t[j] >= ti).map(|j| r[j].exp()).sum::<f64>();
        let direct = [0, 1, 3].iter().map(|&i| -(r[i] - set(t[i]).ln())).sum::<f64>() / 3.0;
        assert!((cox_value(&r, &t, &e).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn optimizer_examples() {
        let spec = ModelSpec {
            input_dim: 1,
            layers: vec![LayerSpec::CoxHead],
        };
        let mut params = ModelParams::<f64>::init(&spec, 0).unwrap();
        params.layers[0][0].value = Matrix::zeros(1, 1);
        let mut state = OptimizerState::new();
        let sgd = Optimizer::Sgd { momentum: 0.0 };
        optimizer_step(&mut params, &[Some(Matrix::scalar(1.0))], &mut state, &sgd, 0.1).unwrap();
        assert!((params.layers[0][0].value.item() + 0.1).abs() < 1e-15);
        optimizer_step(&mut params, &[Some(Matrix::scalar(0.0))], &mut state, &sgd, 0.1).unwrap();
        assert!((params.layers[0][0].value.item() + 0.1).abs() < 1e-15);

        for g in [3.0, -0.02] {
            let mut p = params.clone();
            p.layers[0][0].value = Matrix::zeros(1, 1);
            let mut st = OptimizerState::new();
            optimizer_step(&mut p, &[Some(Matrix::scalar(g))], &mut st, &Optimizer::default(), 1e-3).unwrap();
            let moved = p.layers[0][0].value.item();
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-8, "{moved}");
        }
        assert!(matches!(
            optimizer_step(&mut params, &[Some(Matrix::zeros(2, 1))], &mut state, &sgd, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_mode: BatchMode::Partial { batch_size: 0 },
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn batches_partition_rows() {
        for (n, b) in [(10, 3), (7, 7), (5, 20), (6, 1)] {
            let batches = partial_batch_iter(n, b, 42);
            assert_eq!(batches.len(), n.div_ceil(b));
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    fn toy() -> (Matrix<f64>, Vec<usize>, Vec<bool>, Vec<bool>) {
        let x = random(30, 4, 5);
        let labels: Vec<usize> = (0..30).map(|i| usize::from(x[(i, 0)] + x[(i, 1)] > 0.0)).collect();
        let train: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let test: Vec<bool> = train.iter().map(|t| !t).collect();
        (x, labels, train, test)
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (x, labels, train_mask, test_mask) = toy();
        let data = TrainData {
            x: &x,
            target: Target::Classes(&labels),
            train_mask: &train_mask,
            test_mask: Some(&test_mask),
            given: None,
        };
        let spec = ModelSpec::affinitynet(4, 8, 2, 2);
        let config = TrainConfig {
            epochs: 40,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&spec, &data, &config).unwrap();
        let (p2, h2) = train(&spec, &data, &config).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.len(), 40);
        assert!(h1.records[39].train_loss < h1.records[0].train_loss);
        assert_eq!(p1.step, 40);
        assert!(h1.to_tsv("acc").starts_with("epoch\ttrain_loss\ttrain_acc\ttest_acc\n"));
    }

    #[test]
    fn early_stop_and_partial_batches() {
        let (x, labels, train_mask, _) = toy();
        let data = TrainData {
            x: &x,
            target: Target::Classes(&labels),
            train_mask: &train_mask,
            test_mask: None,
            given: None,
        };
        let spec = ModelSpec::affinitynet(4, 8, 2, 2);
        let config = TrainConfig {
            epochs: 50,
            learning_rate: 1e-300,
            early_stop: Some(EarlyStop {
                patience: 1,
                metric: StopMetric::TrainLoss,
            }),
            ..TrainConfig::default()
        };
        let (_, h) = train(&spec, &data, &config).unwrap();
        assert!(h.len() < 50);

        // One batch covering every row equals full mode.
        let full = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let single = TrainConfig {
            batch_mode: BatchMode::Partial { batch_size: 100 },
            ..full.clone()
        };
        let (pa, ha) = train(&spec, &data, &full).unwrap();
        let (pb, hb) = train(&spec, &data, &single).unwrap();
        for (a, b) in ha.records.iter().zip(&hb.records) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-12);
        }
        for (a, b) in pa.iter().zip(pb.iter()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-12);
        }
    }

    #[test]
    fn single_row_batches_pool_nothing() {
        let spec = ModelSpec::affinitynet(3, 4, 2, 2);
        let params = ModelParams::<f64>::init(&spec, 1).unwrap();
        let x = random(5, 3, 2);
        let whole = model_forward(&spec, &params, &x, None).unwrap();
        // Each row alone: pooling over {i} only.
        for i in 0..5 {
            let single = model_forward(&spec, &params, &x.gather_rows(&[i]), None).unwrap();
            let mut k0 = spec.clone();
            for l in &mut k0.layers {
                match l {
                    LayerSpec::FeatureAttention { k, .. } | LayerSpec::KnnPooling { k, .. } => *k = 0,
                    _ => {}
                }
            }
            let plain = model_forward(&k0, &params, &x, None).unwrap();
            assert!(single.output.max_abs_diff(&plain.output.gather_rows(&[i])) < 1e-14);
        }
        assert_eq!(whole.output.rows(), 5);
    }

    #[test]
    fn unlabeled_rows_do_not_matter_without_pooling() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![
                LayerSpec::KnnPooling {
                    out: 4,
                    k: 0,
                    attention_kernel: crate::affinity::KernelKind::Cosine,
                    graph_kernel: crate::affinity::KernelKind::Cosine,
                    lambda: 0.0,
                    eta: 1.0,
                },
                LayerSpec::LinearHead { classes: 2 },
            ],
        };
        let params = ModelParams::<f64>::init(&spec, 4).unwrap();
        let labels = [0, 1, 0, 1];
        let mask = [true, true, false, false];
        let mut x = random(4, 3, 6);
        let grads = |x: &Matrix<f64>| {
            let data = TrainData {
                x,
                target: Target::Classes(&labels),
                train_mask: &mask,
                test_mask: None,
                given: None,
            };
            loss_gradients(&spec, &params, &data).unwrap().1
        };
        let before = grads(&x);
        x.row_mut(3).copy_from_slice(&[9.0, -4.0, 2.0]);
        let after = grads(&x);
        assert_eq!(before, after);
    }

    #[test]
    fn survival_training_and_gradients() {
        let x = random(20, 3, 8);
        let mut r = SplitMix64::new(3);
        let time: Vec<f64> = (0..20).map(|i| (-(x[(i, 0)])).exp() * (0.1 + r.uniform())).collect();
        let event: Vec<bool> = (0..20).map(|i| i % 4 != 0).collect();
        let mask: Vec<bool> = (0..20).map(|i| i < 14).collect();
        let spec = ModelSpec::affinitynet(3, 4, 2, 2).with_cox_head();
        let data = TrainData {
            x: &x,
            target: Target::Survival { time: &time, event: &event },
            train_mask: &mask,
            test_mask: None,
            given: None,
        };
        let (params, hist) = train(
            &spec,
            &data,
            &TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(hist.len(), 3);
        let (_, grads) = loss_gradients(&spec, &params, &data).unwrap();
        let slot = 0;
        let layer = spec.layers.len() - 1;
        let flat = params.layers[..layer].iter().map(Vec::len).sum::<usize>() + slot;
        let analytic = grads[flat].clone().unwrap();
        let err = compare_gradient(
            |m: &Matrix<f64>| {
                let mut p = params.clone();
                p.layers[layer][slot].value = m.clone();
                Ok(loss_gradients(&spec, &p, &data)?.0)
            },
            &params.layers[layer][slot].value,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let (x, labels, train_mask, _) = toy();
        let x = x.scale(1e200);
        let data = TrainData {
            x: &x,
            target: Target::Classes(&labels),
            train_mask: &train_mask,
            test_mask: None,
            given: None,
        };
        let spec = ModelSpec::neural_net(4, 8, 2);
        let config = TrainConfig {
            learning_rate: 1e200,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            ..TrainConfig::default()
        };
        match train(&spec, &data, &config).unwrap_err() {
            Error::Diverged { epoch, history } => {
                assert!(epoch >= 1);
                assert_eq!(history.len(), epoch);
            }
            other => panic!("{other:?}"),
        }
    }
}
