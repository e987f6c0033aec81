//! Full-graph training with Adam, periodic validation and temperature
//! selection.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{backward, forward, init_weights, GcnConfig, GcnModel};
use crate::infer::{evaluate_model, QuerySet};
use crate::kgraph::{propagation_matrix, KnowledgeGraph};
use crate::linalg::DenseMatrix;
use crate::loss::{mean_batch_loss_with, scatter_rows, LossConfig, SamplingIndex};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` steps.
    StepDecay {
        every: usize,
        factor: f64,
    },
}

impl LrSchedule {
    /// Rate used for 1-based step `step`.
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { every, factor } => {
                base * factor.powi(((step - 1) / every.max(1)) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            loss: LossConfig::default(),
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if let LrSchedule::StepDecay { every, factor } = self.schedule {
            if every == 0 || factor.is_nan() || factor <= 0.0 {
                return Err(Error::Config(
                    "step decay needs every >= 1 and factor > 0".into(),
                ));
            }
        }
        self.loss.validate()
    }
}

/// First and second moment estimates per weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &GcnModel) -> Self {
        let zeros: Vec<DenseMatrix> = model
            .weights()
            .iter()
            .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    model: &mut GcnModel,
    grads: &[DenseMatrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != model.n_layers()
        || state.m.len() != model.n_layers()
        || grads
            .iter()
            .zip(model.weights())
            .zip(&state.m)
            .any(|((g, w), m)| g.shape() != w.shape() || m.shape() != w.shape())
    {
        return Err(Error::Shape(
            "gradients or optimizer state do not match the model".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (l, w) in model.weights_mut().iter_mut().enumerate() {
        let g = grads[l].data();
        let m = state.m[l].data_mut();
        let v = state.v[l].data_mut();
        for (k, p) in w.data_mut().iter_mut().enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_map: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub val_hit_ratio: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Mean batch loss at every step, before that step's update.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")
                .map_err(|e| Error::Format(format!("writing log: {e}")))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Trailing moving average of the per-step losses.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        self.step_losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

pub fn train(
    graph: &KnowledgeGraph,
    features: &DenseMatrix,
    gcn_config: &GcnConfig,
    config: &TrainConfig,
    validation: Option<&QuerySet>,
) -> Result<(GcnModel, TrainLog)> {
    train_with(graph, features, gcn_config, config, validation, |_, _| {
        Ok(())
    })
}

/// Trains a fresh model. `on_eval` sees the model after every evaluation
/// step (every `eval_every` steps and the last one).
pub fn train_with<F>(
    graph: &KnowledgeGraph,
    features: &DenseMatrix,
    gcn_config: &GcnConfig,
    config: &TrainConfig,
    validation: Option<&QuerySet>,
    mut on_eval: F,
) -> Result<(GcnModel, TrainLog)>
where
    F: FnMut(usize, &GcnModel) -> Result<()>,
{
    config.validate()?;
    if features.rows() != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} graph nodes",
            features.rows(),
            graph.n_nodes()
        )));
    }
    let adj = propagation_matrix(graph)?;
    let index = SamplingIndex::new(graph)?;
    index.check_negatives(config.loss.negatives)?;
    let mut model = init_weights(gcn_config)?;
    let mut adam = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();

    for step in 1..=config.steps {
        let (h, cache) = forward(&model, &adj, features)?;
        let batches = index.sample(&config.loss, &mut rng)?;
        let (loss, row_grads) = mean_batch_loss_with(
            &h,
            &batches,
            config.loss.temperature,
            config.loss.include_positive,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "loss {loss}; max |embedding| {}",
                    h.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                ),
            });
        }
        let grad_h = scatter_rows(&row_grads, h.rows(), h.cols())?;
        let grads = backward(&model, &cache, &grad_h)?;
        adam_step(
            &mut model,
            &grads,
            &mut adam,
            config.schedule.rate(config.learning_rate, step),
        )?;
        log.step_losses.push(loss);

        if step % config.eval_every.max(1) == 0 || step == config.steps {
            let mut entry = LogEntry {
                step,
                loss,
                val_map: None,
                val_hit_ratio: BTreeMap::new(),
            };
            if let Some(val) = validation {
                let report = evaluate_model(&model, val, &[1, 3, 5])?;
                entry.val_map = Some(report.map);
                entry.val_hit_ratio = report.hit_ratio;
            }
            log::info!("step {step}: loss {loss:.6} val mAP {:?}", entry.val_map);
            log.entries.push(entry);
            on_eval(step, &model)?;
        }
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureTrial {
    pub temperature: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: f64,
    pub trials: Vec<TemperatureTrial>,
}

/// Trains one model per candidate temperature (same seeds otherwise) and
/// keeps the one with the highest validation mAP; ties go to the smaller
/// temperature.
pub fn tune_temperature(
    candidates: &[f64],
    graph: &KnowledgeGraph,
    features: &DenseMatrix,
    gcn_config: &GcnConfig,
    config: &TrainConfig,
    validation: &QuerySet,
) -> Result<TuneResult> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate temperatures".into()));
    }
    let mut trials = Vec::with_capacity(candidates.len());
    for &t in candidates {
        let mut cfg = config.clone();
        cfg.loss.temperature = t;
        let (model, _) = train(graph, features, gcn_config, &cfg, None)?;
        let report = evaluate_model(&model, validation, &[1])?;
        trials.push(TemperatureTrial {
            temperature: t,
            val_map: report.map,
        });
    }
    let best = trials
        .iter()
        .fold(None::<&TemperatureTrial>, |best, t| match best {
            Some(b)
                if b.val_map > t.val_map
                    || (b.val_map == t.val_map && b.temperature <= t.temperature) =>
            {
                Some(b)
            }
            _ => Some(t),
        })
        .unwrap()
        .temperature;
    Ok(TuneResult { best, trials })
}
