//! Training objective and optimizer.
//!
//! `total = Σ λ_k·BCE_k + λ_sp·L_sp + λ_sh·L_sh + γ·‖W‖²`, where the tasks
//! are CTR (click labels) and CTCVR (conversion labels against `ctr·cvr`).

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, LayerTrace, Model};
use crate::selection::{LayerKind, ReferenceDistributions, SelectionResult};
use crate::tensor::{Graph, KlTerm, Tensor, Var};

pub const BCE_EPS: f64 = 1e-12;

/// Binary cross-entropy with the prediction clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(pred: f64, label: f64) -> Result<f64> {
    bce_with_eps(pred, label, BCE_EPS)
}

pub fn bce_with_eps(pred: f64, label: f64, eps: f64) -> Result<f64> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::Data(format!("label {label} is not 0 or 1")));
    }
    if pred.is_nan() {
        return Err(Error::Domain("prediction is NaN".into()));
    }
    let p = pred.clamp(eps, 1.0 - eps);
    Ok(-label * p.ln() - (1.0 - label) * (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// One weight per supervised head: CTR then CTCVR.
    pub task_weights: Vec<f64>,
    pub lambda_specific: f64,
    pub lambda_shared: f64,
    pub l2: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            task_weights: vec![1.0, 1.0],
            lambda_specific: 0.1,
            lambda_shared: 0.1,
            l2: 1e-5,
        }
    }
}

impl ObjectiveConfig {
    pub fn without_aux(mut self) -> Self {
        self.lambda_specific = 0.0;
        self.lambda_shared = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .task_weights
            .iter()
            .chain([&self.lambda_specific, &self.lambda_shared, &self.l2]);
        for &v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {v} must be finite and non-negative")));
            }
        }
        if self.task_weights.len() != 2 {
            return Err(Error::Config(format!(
                "task_weights needs 2 entries (ctr, ctcvr), got {}",
                self.task_weights.len()
            )));
        }
        Ok(())
    }
}

/// Selected-expert KL sums split by layer kind, each averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KlComponents {
    pub scenario_specific: f64,
    pub scenario_shared: f64,
    pub task_specific: f64,
    pub task_shared: f64,
}

impl KlComponents {
    pub fn specific(&self) -> f64 {
        self.scenario_specific + self.task_specific
    }

    pub fn shared(&self) -> f64 {
        self.scenario_shared + self.task_shared
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_task: Vec<f64>,
    pub aux_specific: f64,
    pub aux_shared: f64,
    pub l2: f64,
    pub total: f64,
    pub kl: KlComponents,
}

impl LossBreakdown {
    /// Re-sums the parts under `cfg`.
    pub fn recompute(&self, cfg: &ObjectiveConfig) -> f64 {
        let tasks: f64 = self.per_task.iter().zip(&cfg.task_weights).map(|(l, w)| w * l).sum();
        tasks + cfg.lambda_specific * self.aux_specific + cfg.lambda_shared * self.aux_shared + cfg.l2 * self.l2
    }
}

/// Differentiable auxiliary terms.
#[derive(Debug, Clone, Copy)]
pub struct AuxVars {
    pub specific: Var,
    pub shared: Var,
    pub kl: KlComponents,
}

fn kl_terms(
    selections: &[SelectionResult],
    n: usize,
    m: usize,
    pick: impl Fn(&SelectionResult) -> &[usize],
    reference: impl Fn(&ReferenceDistributions) -> &[f64],
) -> Result<Vec<KlTerm>> {
    let mut terms = Vec::new();
    for (b, sel) in selections.iter().enumerate() {
        let refs = ReferenceDistributions::new(m, sel.branch_index)?;
        for &k in pick(sel) {
            terms.push(KlTerm {
                row: b * n + k,
                reference: reference(&refs).to_vec(),
            });
        }
    }
    Ok(terms)
}

fn check_trace(trace: &LayerTrace, batch: usize) -> Result<()> {
    let slots = match trace.kind {
        LayerKind::Scenario => 1,
        LayerKind::Task => trace.n_branches,
    };
    if trace.selections.len() != slots || trace.selections.iter().any(|s| s.len() != batch) {
        return Err(Error::Contract(format!(
            "{:?} layer {} carries {} selection slots for batch {batch}, expected {slots}",
            trace.kind,
            trace.layer,
            trace.selections.len()
        )));
    }
    Ok(())
}

/// `L_sp` and `L_sh` over every selecting layer: for each instance, the KL
/// from the one-hot (uniform) reference to each selected specific (shared)
/// expert's row of `G̃`, summed over layers and averaged over the batch.
pub fn aux_losses(graph: &mut Graph, traces: &[LayerTrace], batch: usize) -> Result<AuxVars> {
    if batch == 0 {
        return Err(Error::Contract("auxiliary loss on an empty batch".into()));
    }
    let scale = 1.0 / batch as f64;
    let mut specific = Vec::new();
    let mut shared = Vec::new();
    let mut kl = KlComponents::default();
    for trace in traces {
        check_trace(trace, batch)?;
        let (n, m) = (trace.n_experts, trace.n_branches);
        for slot in &trace.selections {
            let sp = kl_terms(slot, n, m, |s| &s.specific, |r| &r.one_hot)?;
            let sh = kl_terms(slot, n, m, |s| &s.shared, |r| &r.uniform)?;
            let sp = graph.kl_rows(trace.gtilde, sp, scale)?;
            let sh = graph.kl_rows(trace.gtilde, sh, scale)?;
            let (vsp, vsh) = (graph.value(sp).item()?, graph.value(sh).item()?);
            match trace.kind {
                LayerKind::Scenario => {
                    kl.scenario_specific += vsp;
                    kl.scenario_shared += vsh;
                }
                LayerKind::Task => {
                    kl.task_specific += vsp;
                    kl.task_shared += vsh;
                }
            }
            specific.push((sp, 1.0));
            shared.push((sh, 1.0));
        }
    }
    let specific = sum_or_zero(graph, &specific)?;
    let shared = sum_or_zero(graph, &shared)?;
    Ok(AuxVars { specific, shared, kl })
}

fn sum_or_zero(graph: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    if terms.is_empty() {
        Ok(graph.constant(Tensor::scalar(0.0)))
    } else {
        graph.weighted_sum(terms)
    }
}

/// Plain-value auxiliary losses from a gating matrix and its selections.
/// `gtilde` holds `selections.len()·n` rows of length `m`.
pub fn aux_values(gtilde: &Tensor, selections: &[SelectionResult], n: usize) -> Result<(f64, f64)> {
    let m = gtilde.cols();
    if gtilde.rows() != selections.len() * n {
        return Err(Error::Contract(format!(
            "gating matrix has {} rows, expected {} for {} instances",
            gtilde.rows(),
            selections.len() * n,
            selections.len()
        )));
    }
    let scale = 1.0 / selections.len().max(1) as f64;
    let (mut sp, mut sh) = (0.0, 0.0);
    for (b, sel) in selections.iter().enumerate() {
        let refs = ReferenceDistributions::new(m, sel.branch_index)?;
        for &k in &sel.specific {
            sp += crate::selection::kl_divergence(&refs.one_hot, gtilde.row(b * n + k))?;
        }
        for &k in &sel.shared {
            sh += crate::selection::kl_divergence(&refs.uniform, gtilde.row(b * n + k))?;
        }
    }
    Ok((sp * scale, sh * scale))
}

/// Supervision labels `(click, conversion)` as floats.
pub fn labels(batch: &[&Instance]) -> (Vec<f64>, Vec<f64>) {
    batch
        .iter()
        .map(|i| (f64::from(i.click), f64::from(i.conversion)))
        .unzip()
}

/// Assembles the full objective on the graph. Auxiliary terms are included
/// only when the forward pass made selections (AESM²); the KL components
/// are still reported when `λ_sp = λ_sh = 0`.
pub fn total_loss(
    graph: &mut Graph,
    out: &ForwardOutput,
    batch: &[&Instance],
    model: &Model,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let (click, conversion) = labels(batch);
    let ctr = graph.bce_mean(out.heads[0], &click, BCE_EPS)?;
    let ctcvr = graph.bce_mean(out.ctcvr, &conversion, BCE_EPS)?;

    let selecting: Vec<LayerTrace> = out.trace.iter().filter(|t| !t.selections.is_empty()).cloned().collect();
    let aux = if model.selects_experts() && !selecting.is_empty() {
        Some(aux_losses(graph, &selecting, batch.len())?)
    } else {
        None
    };

    let mut squares = Vec::new();
    for (p, &v) in model.params().iter().zip(&out.params.vars) {
        if p.regularized {
            squares.push((graph.sum_squares(v), 1.0));
        }
    }
    let l2 = sum_or_zero(graph, &squares)?;

    let mut terms = vec![(ctr, cfg.task_weights[0]), (ctcvr, cfg.task_weights[1]), (l2, cfg.l2)];
    if let Some(a) = &aux {
        terms.push((a.specific, cfg.lambda_specific));
        terms.push((a.shared, cfg.lambda_shared));
    }
    let total = graph.weighted_sum(&terms)?;

    let value = |g: &Graph, v: Var| g.value(v).item();
    let breakdown = LossBreakdown {
        per_task: vec![value(graph, ctr)?, value(graph, ctcvr)?],
        aux_specific: aux.map(|a| value(graph, a.specific)).transpose()?.unwrap_or(0.0),
        aux_shared: aux.map(|a| value(graph, a.shared)).transpose()?.unwrap_or(0.0),
        l2: value(graph, l2)?,
        total: value(graph, total)?,
        kl: aux.map(|a| a.kl).unwrap_or_default(),
    };
    Ok((total, breakdown))
}

/// Gradients smaller than this are compared on an absolute scale; central
/// differences at `eps = 1e-6` carry roughly 1e-10 of roundoff.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-5;

/// Worst disagreement between backprop and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// `max |a - n| / max(floor, |a|, |n|)` over every checked coordinate.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Loss value of `model` on `batch` without noise.
pub fn loss_value(model: &Model, batch: &[&Instance], cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    let mut graph = Graph::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = model.forward(&mut graph, batch, false, false, &mut rng)?;
    Ok(total_loss(&mut graph, &out, batch, model, cfg)?.1)
}

/// Compares the backprop gradient of the noise-free total loss with central
/// differences for every parameter coordinate.
pub fn check_model_gradient(model: &Model, batch: &[&Instance], cfg: &ObjectiveConfig, eps: f64) -> Result<GradientCheck> {
    let mut graph = Graph::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = model.forward(&mut graph, batch, false, true, &mut rng)?;
    let (loss, _) = total_loss(&mut graph, &out, batch, model, cfg)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = out.params.vars.iter().map(|&v| graph.grad_or_zero(v)).collect();

    let mut probe = model.clone();
    let mut report = GradientCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = probe.params()[pi].tensor.data()[k];
            probe.params_mut()[pi].tensor.data_mut()[k] = orig + eps;
            let up = loss_value(&probe, batch, cfg)?.total;
            probe.params_mut()[pi].tensor.data_mut()[k] = orig - eps;
            let down = loss_value(&probe, batch, cfg)?.total;
            probe.params_mut()[pi].tensor.data_mut()[k] = orig;
            let n = (up - down) / (2.0 * eps);
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            let err = (a - n).abs() / GRADIENT_CHECK_FLOOR.max(a.abs()).max(n.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{k}]", model.params()[pi].name);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { config, step: 0, m, v }
    }

    pub fn for_model(config: AdamConfig, model: &Model) -> Self {
        AdamState::new(config, model.params().iter().map(|p| p.tensor.len()))
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step got {} parameters, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Contract(format!(
                "parameter {i}: {} values, gradient {}, state {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0, 1.0).unwrap() < 1e-11);
        assert!((bce_loss(0.9, 0.0).unwrap() - std::f64::consts::LN_10).abs() < 1e-9);
        assert!(bce_loss(0.0, 1.0).unwrap().is_finite());
        assert!(matches!(bce_loss(0.5, 2.0), Err(Error::Data(_))));
    }

    fn sel(branch: usize, specific: Vec<usize>, shared: Vec<usize>) -> SelectionResult {
        SelectionResult {
            branch_index: branch,
            specific,
            shared,
            specific_scores: Vec::new(),
            shared_scores: Vec::new(),
        }
    }

    #[test]
    fn aux_value_examples() {
        let g = Tensor::from_rows(&[[0.9, 0.1], [0.5, 0.5]]).unwrap();
        let (sp, sh) = aux_values(&g, &[sel(0, vec![0], vec![1])], 2).unwrap();
        assert!((sp - 0.10536051565782628).abs() < 1e-12);
        assert!(sh.abs() < 1e-15);
        let (_, sh) = aux_values(&g, &[sel(0, vec![1], vec![0])], 2).unwrap();
        assert!((sh - 0.5108256237659907).abs() < 1e-12);
        let single = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(aux_values(&single, &[sel(0, vec![0], vec![1])], 2).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn aux_is_batch_mean() {
        let g = Tensor::from_rows(&[[0.9, 0.1], [0.5, 0.5], [0.9, 0.1], [0.5, 0.5]]).unwrap();
        let one = aux_values(&g, &[sel(0, vec![0], vec![1]), sel(0, vec![0], vec![1])], 2).unwrap();
        assert!((one.0 - 0.10536051565782628).abs() < 1e-12);
    }

    #[test]
    fn aux_row_count_mismatch_is_contract_error() {
        let g = Tensor::from_rows(&[[0.9, 0.1]]).unwrap();
        assert!(matches!(aux_values(&g, &[sel(0, vec![0], vec![0])], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut p = Tensor::vector(vec![0.0, 5.0]);
        let mut state = AdamState::new(AdamConfig::default(), [2]);
        adam_step(&mut [&mut p], &[&[1.0, 0.0]], &mut state).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-10);
        assert_eq!(p.data()[1], 5.0);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::vector(vec![0.0, 5.0]);
        let mut state = AdamState::new(AdamConfig::default(), [2]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&[1.0]], &mut state),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        // f(x, y) = (x - 1)^2 + 3 (y + 2)^2
        let f = |d: &[f64]| (d[0] - 1.0).powi(2) + 3.0 * (d[1] + 2.0).powi(2);
        let mut p = Tensor::vector(vec![4.0, 3.0]);
        let mut state = AdamState::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            [2],
        );
        let mut last = f(p.data());
        for _ in 0..100 {
            let d = p.data().to_vec();
            let g = [2.0 * (d[0] - 1.0), 6.0 * (d[1] + 2.0)];
            adam_step(&mut [&mut p], &[&g], &mut state).unwrap();
            let now = f(p.data());
            assert!(now < last, "{now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn breakdown_recompute() {
        let b = LossBreakdown {
            per_task: vec![0.5, 0.25],
            aux_specific: 0.2,
            aux_shared: 0.4,
            l2: 3.0,
            total: 0.5 + 0.25 + 0.02 + 0.04 + 3e-5,
            kl: KlComponents::default(),
        };
        assert!((b.recompute(&ObjectiveConfig::default()) - b.total).abs() < 1e-12);
    }
}
