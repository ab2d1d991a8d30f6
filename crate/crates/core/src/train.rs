//! Mini-batch Adam training with validation-driven early stopping.

use serde::{Deserialize, Serialize};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_indices, Dataset, Instance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, transfer_matrix, MetricReport, TransferMatrix};
use crate::model::{ForwardOutput, Layout, Model, ModelConfig, ModelKind};
use crate::objective::{adam_step, total_loss, AdamConfig, AdamState, LossBreakdown, ObjectiveConfig};
use crate::tensor::{Graph, Tensor};

/// Independent generator for one purpose (`stream`) under a run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 10;
const STREAM_NOISE: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

/// Fresh model whose initial weights depend only on `seed`.
pub fn init_model(config: ModelConfig, layout: Layout, seed: u64) -> Result<Model> {
    Model::new(config, layout, &mut seeded_rng(seed, STREAM_INIT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without a merged-CTR validation AUC improvement before stopping.
    pub patience: usize,
    /// Include the auxiliary selection losses.
    pub aux: bool,
    /// Add gate noise during training.
    pub noise: bool,
    pub objective: ObjectiveConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 256,
            seed: 0,
            patience: 3,
            aux: true,
            noise: true,
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_objective(&self) -> ObjectiveConfig {
        if self.aux {
            self.objective.clone()
        } else {
            self.objective.clone().without_aux()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        self.objective.validate()
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_ctr: f64,
    pub loss_ctcvr: f64,
    pub aux_specific: f64,
    pub aux_shared: f64,
    pub l2: f64,
    pub total: f64,
    pub kl_scenario_specific: f64,
    pub kl_scenario_shared: f64,
    pub kl_task_specific: f64,
    pub kl_task_shared: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: usize, b: &LossBreakdown) -> Self {
        StepRecord {
            step,
            epoch,
            loss_ctr: b.per_task[0],
            loss_ctcvr: b.per_task[1],
            aux_specific: b.aux_specific,
            aux_shared: b.aux_shared,
            l2: b.l2,
            total: b.total,
            kl_scenario_specific: b.kl.scenario_specific,
            kl_scenario_shared: b.kl.scenario_shared,
            kl_task_specific: b.kl.task_specific,
            kl_task_shared: b.kl.task_shared,
        }
    }

    pub fn kl_specific(&self) -> f64 {
        self.kl_scenario_specific + self.kl_task_specific
    }

    pub fn kl_shared(&self) -> f64 {
        self.kl_scenario_shared + self.kl_task_shared
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_kl_specific: f64,
    pub mean_kl_shared: f64,
    pub val_ctr_auc: Option<f64>,
    pub val_ctcvr_auc: Option<f64>,
    pub improved: bool,
}

/// Hooks into the training loop. Every method defaults to a no-op.
pub trait TrainObserver {
    /// After each training forward pass, before the loss is built.
    fn on_forward(&mut self, _graph: &Graph, _out: &ForwardOutput) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes each [`StepRecord`] as one JSON line.
pub struct JsonlStepLog<W: std::io::Write> {
    pub out: W,
}

impl<W: std::io::Write> TrainObserver for JsonlStepLog<W> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation model (the final one without validation data).
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn best_val_auc(&self) -> Option<f64> {
        self.best_epoch.and_then(|e| self.epochs[e].val_ctr_auc)
    }
}

/// Forward, loss, backward and one Adam update on a single batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&Instance],
    objective: &ObjectiveConfig,
    noise: bool,
    step: u64,
    rng: &mut ChaCha8Rng,
    observer: &mut dyn TrainObserver,
) -> Result<LossBreakdown> {
    let mut graph = Graph::new();
    let out = model.forward(&mut graph, batch, noise, true, rng)?;
    observer.on_forward(&graph, &out)?;
    let (loss, breakdown) = total_loss(&mut graph, &out, batch, model, objective).map_err(|e| match e {
        Error::Domain(detail) => Error::Diverged {
            step: step as usize,
            detail,
        },
        other => other,
    })?;
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged {
            step: step as usize,
            detail: format!("non-finite loss {breakdown:?}"),
        });
    }
    graph.backward(loss)?;
    let grads: Vec<Vec<f64>> = out.params.vars.iter().map(|&v| graph.grad_or_zero(v)).collect();
    if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::Diverged {
            step: step as usize,
            detail: format!("non-finite gradient for {}", model.params()[i].name),
        });
    }
    let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
    adam_step(&mut params, &grads, adam)?;
    Ok(breakdown)
}

/// Trains `model` on `train`, evaluating merged CTR AUC on `val` after each
/// epoch and keeping the best weights.
pub fn train(
    mut model: Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let objective = cfg.effective_objective();
    let noise = cfg.noise && model.selects_experts();
    let mut adam = AdamState::for_model(cfg.adam, &model);
    let mut noise_rng = seeded_rng(cfg.seed, STREAM_NOISE);
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let shuffle = seeded_rng(cfg.seed, STREAM_SHUFFLE + epoch as u64).next_u64();
        let mut sums = (0.0, 0.0, 0.0);
        let batches = batch_indices(train.len(), cfg.batch_size, Some(shuffle));
        for idx in &batches {
            let batch: Vec<&Instance> = idx.iter().map(|&i| &train.instances[i]).collect();
            step += 1;
            let b = train_step(&mut model, &mut adam, &batch, &objective, noise, step, &mut noise_rng, observer)?;
            let record = StepRecord::new(step, epoch, &b);
            sums.0 += b.total;
            sums.1 += record.kl_specific();
            sums.2 += record.kl_shared();
            observer.on_step(&record)?;
            steps.push(record);
        }
        if let Some(bad) = model.params().iter().find(|p| !p.tensor.all_finite()) {
            return Err(Error::Diverged {
                step: step as usize,
                detail: format!("parameter {} became non-finite", bad.name),
            });
        }
        let nb = batches.len() as f64;
        let report = val.map(|v| evaluate(&model, v)).transpose()?;
        let val_ctr = report.as_ref().and_then(|r| r.all.ctr_auc);
        let improved = match (val_ctr, &best) {
            (Some(a), Some((b, _, _))) => a > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let record = EpochRecord {
            epoch,
            steps: step,
            mean_loss: sums.0 / nb,
            mean_kl_specific: sums.1 / nb,
            mean_kl_shared: sums.2 / nb,
            val_ctr_auc: val_ctr,
            val_ctcvr_auc: report.as_ref().and_then(|r| r.all.ctcvr_auc),
            improved,
        };
        observer.on_epoch(&record)?;
        epochs.push(record);
        if improved {
            best = Some((val_ctr.unwrap_or(f64::NAN), epoch, model.clone()));
            stale = 0;
        } else if val_ctr.is_some() {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        epochs,
        steps,
        best_epoch,
    })
}

/// Initialises from the seed, trains, and evaluates on `test`.
pub fn fit_and_evaluate(
    config: ModelConfig,
    train_set: &Dataset,
    val: Option<&Dataset>,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, MetricReport)> {
    let model = init_model(config, Layout::from_schema(&train_set.schema), cfg.seed)?;
    let outcome = train(model, train_set, val, cfg, &mut ())?;
    let report = evaluate(&outcome.model, test)?;
    Ok((outcome, report))
}

/// One hard-sharing ESMM model per scenario, trained on that scenario only,
/// then scored on every scenario's test data.
pub fn train_transfer(
    config: &ModelConfig,
    train_set: &Dataset,
    val: Option<&Dataset>,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TransferMatrix> {
    let n = train_set.schema.n_scenarios();
    let single = ModelConfig {
        kind: ModelKind::HardSharing,
        ..config.clone()
    };
    let mut models = Vec::with_capacity(n);
    let mut tests = Vec::with_capacity(n);
    for s in 0..n {
        let tr = train_set.filter_scenario(s);
        if tr.is_empty() {
            return Err(Error::Data(format!("scenario {} has no training data", train_set.schema.scenario_name(s))));
        }
        let va = val.map(|v| v.filter_scenario(s));
        let model = init_model(single.clone(), Layout::from_schema(&tr.schema), cfg.seed.wrapping_add(s as u64))?;
        models.push(train(model, &tr, va.as_ref(), cfg, &mut ())?.model);
        tests.push(test.filter_scenario(s));
    }
    transfer_matrix(&models, &tests)
}
