//! Losses, minibatch gradients and the Adam training loop.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Scalar, Tape, Var};
use crate::data::{DatasetBundle, TrainPoint};
use crate::error::{Error, Result};
use crate::integrators::{Scheme, StepperConfig};
use crate::models::{eval_g_taped, jacobian_metrics, jacobian_penalty, DynamicsModel, Regularizer, RegularizerKind};
use crate::par::Exec;
use crate::physics::OscillatorSpec;
use crate::rng::{substream, Purpose};
use crate::system::State;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub regularizer: Regularizer,
    pub stepper: StepperConfig,
    pub seed: u64,
    /// Eval loss cadence in optimizer steps.
    pub eval_every: usize,
    /// Jacobian metric cadence in optimizer steps.
    pub metrics_every: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 64,
            learning_rate: 1e-3,
            regularizer: Regularizer::new(RegularizerKind::None),
            stepper: StepperConfig::new(Scheme::Dg, 0.01),
            seed: 0,
            eval_every: 1_000,
            metrics_every: 50,
            exec: Exec::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stepper.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.metrics_every == 0 {
            return Err(Error::Config("batch_size, eval_every and metrics_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.regularizer.lambda >= 0.0) {
            return Err(Error::Config("learning rate must be positive and lambda non-negative".into()));
        }
        Ok(())
    }
}

/// Mean `‖(x_{n+1} − g(x_n, u_n)) / h‖₁` over the batch.
pub fn loss_discrete(model: &DynamicsModel, batch: &[TrainPoint], stepper: &StepperConfig) -> Result<f64> {
    loss_regularized(model, batch, stepper, &Regularizer::new(RegularizerKind::None))
}

/// Discrete loss plus `λ` times the mean Jacobian penalty at the inputs.
pub fn loss_regularized(model: &DynamicsModel, batch: &[TrainPoint], stepper: &StepperConfig, reg: &Regularizer) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let bm = model.values();
    let mut total = 0.0;
    for p in batch {
        let g = bm.eval_g(p.x, p.u, stepper)?.x_next;
        total += ((p.x_next[0] - g[0]).abs() + (p.x_next[1] - g[1]).abs()) / stepper.h;
        if reg.is_active() {
            total += reg.lambda * jacobian_penalty(bm.state_jacobian(p.x, p.u), reg.kind);
        }
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NumericFailure { op: "loss" });
    }
    Ok(loss)
}

/// State, input and true time derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativePoint {
    pub x: State<f64>,
    pub u: f64,
    pub xdot: State<f64>,
}

pub fn derivative_points(spec: &OscillatorSpec, batch: &[TrainPoint]) -> Vec<DerivativePoint> {
    batch
        .iter()
        .map(|p| DerivativePoint {
            x: p.x,
            u: p.u,
            xdot: spec.true_dynamics(p.x, p.u).0,
        })
        .collect()
}

/// Mean `‖ẋ − f(x, u)‖₂²`.
pub fn loss_continuous(model: &DynamicsModel, batch: &[DerivativePoint]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let bm = model.values();
    let total: f64 = batch
        .iter()
        .map(|p| {
            let f = bm.eval_f(p.x, p.u).xdot;
            (p.xdot[0] - f[0]).powi(2) + (p.xdot[1] - f[1]).powi(2)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

fn point_loss_grad(model: &DynamicsModel, p: &TrainPoint, stepper: &StepperConfig, reg: &Regularizer) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::with_capacity(model.n_params() * 8);
    let vars = tape.vars(&model.params.values);
    let value = model.values();
    let bound = model.bind(&vars);
    let x = [Var::constant(p.x[0]), Var::constant(p.x[1])];
    let u = Var::constant(p.u);
    let g = eval_g_taped(&value, &bound, x, u, stepper)?;
    let mut loss = ((g[0] - p.x_next[0]).abs() + (g[1] - p.x_next[1]).abs()) / stepper.h;
    if reg.is_active() {
        loss = loss + jacobian_penalty(bound.state_jacobian(x, u), reg.kind) * reg.lambda;
    }
    if let Some(op) = tape.failure() {
        return Err(Error::NumericFailure { op });
    }
    if !loss.value().is_finite() {
        return Err(Error::NumericFailure { op: "loss" });
    }
    Ok((loss.value(), tape.gradient(loss, &vars)))
}

/// Regularised batch loss and its parameter gradient. Samples are taped
/// independently and reduced in batch order.
pub fn loss_and_grad(
    model: &DynamicsModel,
    batch: &[TrainPoint],
    stepper: &StepperConfig,
    reg: &Regularizer,
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let parts = exec.map(batch, |p| point_loss_grad(model, p, stepper, reg));
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l * scale;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let segment = model.params.segment_of(i).map_or_else(|| format!("#{i}"), |s| s.name.clone());
        return Err(Error::NonFiniteGradient { segment });
    }
    Ok((loss, grad))
}

/// Mean `(κ, σ_max, ρ)` of the model Jacobian over the batch.
pub fn mean_jacobian_metrics(model: &DynamicsModel, batch: &[TrainPoint]) -> (f64, f64, f64) {
    let bm = model.values();
    let n = batch.len() as f64;
    batch.iter().fold((0.0, 0.0, 0.0), |acc, p| {
        let (sigma, kappa, rho) = jacobian_metrics(bm.state_jacobian(p.x, p.u));
        (acc.0 + kappa / n, acc.1 + sigma / n, acc.2 + rho / n)
    })
}

/// Eval loss over a fixed point set, evaluated in chunks on `exec`.
pub fn eval_loss(model: &DynamicsModel, points: &[TrainPoint], stepper: &StepperConfig, exec: Exec) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let chunks: Vec<&[TrainPoint]> = points.chunks(64).collect();
    let parts = exec.map(&chunks, |c| loss_discrete(model, c, stepper).map(|l| l * c.len() as f64));
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub mean_cond: Option<f64>,
    pub mean_specnorm: Option<f64>,
    pub mean_stiffness: Option<f64>,
}

impl MetricRecord {
    fn at(step: usize) -> Self {
        MetricRecord {
            step,
            train_loss: None,
            eval_loss: None,
            mean_cond: None,
            mean_specnorm: None,
            mean_stiffness: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.16e}"))
}

impl MetricLog {
    fn entry(&mut self, step: usize) -> &mut MetricRecord {
        if self.records.last().is_none_or(|r| r.step != step) {
            self.records.push(MetricRecord::at(step));
        }
        self.records.last_mut().unwrap()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step,train_loss,eval_loss,mean_cond,mean_specnorm,mean_stiffness")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                cell(r.train_loss),
                cell(r.eval_loss),
                cell(r.mean_cond),
                cell(r.mean_specnorm),
                cell(r.mean_stiffness)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn eval_losses(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| r.eval_loss.map(|l| (r.step, l)))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest eval loss seen.
    pub model: DynamicsModel,
    pub log: MetricLog,
    pub best_step: usize,
    pub best_eval: f64,
    pub steps_done: usize,
    /// Set when a step failed and training stopped early.
    pub failure: Option<String>,
}

/// `batch_size` indices into `0..n`, drawn with replacement.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

/// Adam on minibatches of the train split, keeping the best eval checkpoint.
pub fn train_run(model0: &DynamicsModel, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bundle.train.is_empty() || bundle.eval.is_empty() {
        return Err(Error::Config("train and eval splits must be non-empty".into()));
    }
    let h_data = bundle.header.config.h_train();
    if (cfg.stepper.h - h_data).abs() > 1e-12 * h_data {
        return Err(Error::Config(format!("stepper h = {} differs from the data step {h_data}", cfg.stepper.h)));
    }
    if model0.kind == crate::models::ModelKind::Node && cfg.stepper.scheme == Scheme::Dg {
        return Err(Error::Config("the NODE baseline is only stepped with RK2".into()));
    }
    let mut model = model0.clone();
    let mut adam = AdamState::new(model.n_params(), cfg.learning_rate);
    let mut rng = substream(cfg.seed, Purpose::Batch, 0);
    let mut log = MetricLog::default();

    let eval0 = eval_loss(&model, &bundle.eval, &cfg.stepper, cfg.exec)?;
    log.entry(0).eval_loss = Some(eval0);
    let mut best = (model.clone(), 0, eval0);
    let mut failure = None;
    let mut steps_done = 0;

    for step in 1..=cfg.steps {
        let idx = sample_batch(&mut rng, bundle.train.len(), cfg.batch_size);
        let batch: Vec<TrainPoint> = idx.iter().map(|&i| bundle.train[i]).collect();
        let result = (|| -> Result<()> {
            let (loss, grad) = loss_and_grad(&model, &batch, &cfg.stepper, &cfg.regularizer, cfg.exec)?;
            if step % cfg.metrics_every == 0 {
                let (k, s, r) = mean_jacobian_metrics(&model, &batch);
                let e = log.entry(step);
                e.train_loss = Some(loss);
                (e.mean_cond, e.mean_specnorm, e.mean_stiffness) = (Some(k), Some(s), Some(r));
            }
            adam.step(&mut model.params, &grad)?;
            if !model.params.is_finite() {
                return Err(Error::NumericFailure { op: "adam" });
            }
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let ev = eval_loss(&model, &bundle.eval, &cfg.stepper, cfg.exec)?;
                log.entry(step).eval_loss = Some(ev);
                if ev < best.2 {
                    best = (model.clone(), step, ev);
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("training stopped at step {step}: {e}");
            failure = Some(e.at_step(step).to_string());
            break;
        }
        steps_done = step;
    }
    let (model, best_step, best_eval) = best;
    Ok(TrainOutcome {
        model,
        log,
        best_step,
        best_eval,
        steps_done,
        failure,
    })
}
