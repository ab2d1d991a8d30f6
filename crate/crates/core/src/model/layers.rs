//! Graph-level building blocks: experts, MMoE mixing, and the selecting
//! scenario and task layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{
    compute_gate, mask_gate, select_from_rows, validate_k, GateNoise, LayerKind, SelectionResult,
};
use crate::tensor::{Graph, Var};

/// Weight and bias of one affine map, bound to a graph.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

/// Experts plus one gate per branch, bound to a graph.
#[derive(Debug, Clone)]
pub struct MoeLayerVars {
    pub experts: Vec<LinearVars>,
    pub gates: Vec<LinearVars>,
}

/// Fixed expert partition for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticPartition {
    /// `specific[j]` lists the experts reserved for branch `j`.
    pub specific: Vec<Vec<usize>>,
    pub shared: Vec<usize>,
}

impl StaticPartition {
    /// Splits `n` experts into `m` equal specific groups and a shared group
    /// holding the remainder.
    pub fn even(n: usize, m: usize) -> Result<Self> {
        let per = n / (m + 1);
        if per == 0 {
            return Err(Error::Config(format!(
                "{n} experts cannot be split into {m} specific groups plus a shared group"
            )));
        }
        Ok(StaticPartition {
            specific: (0..m).map(|j| (j * per..(j + 1) * per).collect()).collect(),
            shared: (m * per..n).collect(),
        })
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.specific.len() != m {
            return Err(Error::Config(format!(
                "static partition lists {} branches, layer has {m}",
                self.specific.len()
            )));
        }
        for set in self.specific.iter().chain(std::iter::once(&self.shared)) {
            if let Some(&k) = set.iter().find(|&&k| k >= n) {
                return Err(Error::Config(format!("static partition index {k} >= {n} experts")));
            }
        }
        if self.specific.iter().any(|s| s.is_empty()) && self.shared.is_empty() {
            return Err(Error::Config("static partition leaves a branch with no experts".into()));
        }
        Ok(())
    }
}

/// How a layer turns its gating matrix into active expert sets.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionMode {
    /// KL-based top-K selection.
    Auto { k_specific: usize, k_shared: usize },
    /// Every expert active; plain softmax gate.
    Dense,
    /// Config-declared partition, selection bypassed.
    Static(StaticPartition),
}

/// What one layer recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub kind: LayerKind,
    pub layer: usize,
    pub n_experts: usize,
    pub n_branches: usize,
    /// Row-softmaxed gating matrices stacked as (B·n)×m; rows `b·n..(b+1)·n`
    /// belong to instance `b`.
    pub gtilde: Var,
    /// Mixture weights per output slot (one slot per scenario layer, one per
    /// task in a task layer), each B×n.
    pub mix_weights: Vec<Var>,
    /// `selections[slot][instance]`; empty for dense layers.
    pub selections: Vec<Vec<SelectionResult>>,
}

/// `ReLU(x·W_i + b_i)` for every expert.
pub fn expert_outputs(graph: &mut Graph, input: Var, experts: &[LinearVars]) -> Result<Vec<Var>> {
    experts
        .iter()
        .map(|e| {
            let h = graph.linear(input, e.w, e.b)?;
            Ok(graph.relu(h))
        })
        .collect()
}

/// `Σ_i softmax(masked_gate)[i] · f_i(input)`.
pub fn mmoe_forward(graph: &mut Graph, input: Var, experts: &[LinearVars], masked_gate: Var) -> Result<Var> {
    if experts.is_empty() {
        return Err(Error::Config("MMoE layer with no experts".into()));
    }
    let outs = expert_outputs(graph, input, experts)?;
    let weights = graph.softmax_rows(masked_gate)?;
    graph.mixture(weights, &outs)
}

/// Selects experts for every row of `own_logits` and returns the mixture
/// weights plus the selections.
fn gate_weights(
    graph: &mut Graph,
    gtilde: Var,
    own_logits: Var,
    branches: &[usize],
    n: usize,
    m: usize,
    mode: &SelectionMode,
) -> Result<(Var, Vec<SelectionResult>)> {
    match mode {
        SelectionMode::Dense => Ok((graph.softmax_rows(own_logits)?, Vec::new())),
        SelectionMode::Auto { k_specific, k_shared } => {
            let rows = graph.value(gtilde).data().to_vec();
            let mut selections = Vec::with_capacity(branches.len());
            let mut active = Vec::with_capacity(branches.len());
            for (b, &j) in branches.iter().enumerate() {
                let sel = select_from_rows(&rows[b * n * m..(b + 1) * n * m], n, m, j, *k_specific, *k_shared)?;
                active.push(sel.active());
                selections.push(sel);
            }
            let masked = mask_gate(graph, own_logits, &active)?;
            Ok((graph.softmax_rows(masked)?, selections))
        }
        SelectionMode::Static(partition) => {
            let rows = graph.value(gtilde).data().to_vec();
            let mut selections = Vec::with_capacity(branches.len());
            let mut active = Vec::with_capacity(branches.len());
            for (b, &j) in branches.iter().enumerate() {
                let mut sel = select_from_rows(&rows[b * n * m..(b + 1) * n * m], n, m, j, 1, 1)?;
                sel.specific = partition.specific[j].clone();
                sel.shared = partition.shared.clone();
                active.push(sel.active());
                selections.push(sel);
            }
            let masked = mask_gate(graph, own_logits, &active)?;
            Ok((graph.softmax_rows(masked)?, selections))
        }
    }
}

fn check_mode(mode: &SelectionMode, n: usize, m: usize) -> Result<()> {
    match mode {
        SelectionMode::Auto { k_specific, k_shared } => validate_k(n, *k_specific, *k_shared),
        SelectionMode::Static(p) => p.validate(n, m),
        SelectionMode::Dense => Ok(()),
    }
}

/// One multi-scenario layer.
///
/// All `m` branch gates see the same `[input, s_prefix]`; row `b` is routed
/// through the gate of its own branch `branches[b]` after selection.
#[allow(clippy::too_many_arguments)]
pub fn scenario_layer_forward<R: Rng + ?Sized>(
    graph: &mut Graph,
    layer: &MoeLayerVars,
    input: Var,
    s_prefix: Var,
    branches: &[usize],
    mode: &SelectionMode,
    noise: GateNoise,
    layer_index: usize,
    rng: &mut R,
) -> Result<(Var, LayerTrace)> {
    let n = layer.experts.len();
    let m = layer.gates.len();
    check_mode(mode, n, m)?;
    if let Some(&j) = branches.iter().find(|&&j| j >= m) {
        return Err(Error::Contract(format!("scenario branch {j} out of range for {m} gates")));
    }
    let logits: Vec<Var> = layer
        .gates
        .iter()
        .map(|gate| compute_gate(graph, input, s_prefix, gate.w, gate.b, noise, rng))
        .collect::<Result<_>>()?;
    let stacked = graph.stack_columns(&logits)?;
    let gtilde = graph.softmax_rows(stacked)?;
    let own = graph.pick_rows(&logits, branches)?;
    let (weights, selections) = gate_weights(graph, gtilde, own, branches, n, m, mode)?;
    let outs = expert_outputs(graph, input, &layer.experts)?;
    let z = graph.mixture(weights, &outs)?;
    let trace = LayerTrace {
        kind: LayerKind::Scenario,
        layer: layer_index,
        n_experts: n,
        n_branches: m,
        gtilde,
        mix_weights: vec![weights],
        selections: if selections.is_empty() { Vec::new() } else { vec![selections] },
    };
    Ok((z, trace))
}

/// One multi-task layer over a shared expert set.
///
/// `inputs[k]` is task `k`'s input (identical across tasks for the first
/// layer); gate `k` sees `[inputs[k], s_path, task_embeddings[k]]`.
#[allow(clippy::too_many_arguments)]
pub fn task_layer_forward<R: Rng + ?Sized>(
    graph: &mut Graph,
    layer: &MoeLayerVars,
    inputs: &[Var],
    s_path: Var,
    task_embeddings: &[Var],
    mode: &SelectionMode,
    noise: GateNoise,
    layer_index: usize,
    rng: &mut R,
) -> Result<(Vec<Var>, LayerTrace)> {
    let n = layer.experts.len();
    let t = layer.gates.len();
    check_mode(mode, n, t)?;
    if inputs.len() != t || task_embeddings.len() != t {
        return Err(Error::Contract(format!(
            "task layer has {t} gates but received {} inputs and {} task embeddings",
            inputs.len(),
            task_embeddings.len()
        )));
    }
    let mut logits = Vec::with_capacity(t);
    for k in 0..t {
        let branch_emb = graph.concat(&[s_path, task_embeddings[k]], 1)?;
        let gate = layer.gates[k];
        logits.push(compute_gate(graph, inputs[k], branch_emb, gate.w, gate.b, noise, rng)?);
    }
    let stacked = graph.stack_columns(&logits)?;
    let gtilde = graph.softmax_rows(stacked)?;
    let batch = graph.value(inputs[0]).rows();

    let shared_input = inputs.iter().all(|&v| v == inputs[0]);
    let shared_outs = if shared_input {
        Some(expert_outputs(graph, inputs[0], &layer.experts)?)
    } else {
        None
    };

    let mut outputs = Vec::with_capacity(t);
    let mut mix_weights = Vec::with_capacity(t);
    let mut selections = Vec::new();
    for k in 0..t {
        let branches = vec![k; batch];
        let (weights, sel) = gate_weights(graph, gtilde, logits[k], &branches, n, t, mode)?;
        let outs = match &shared_outs {
            Some(o) => o.clone(),
            None => expert_outputs(graph, inputs[k], &layer.experts)?,
        };
        outputs.push(graph.mixture(weights, &outs)?);
        mix_weights.push(weights);
        if !sel.is_empty() {
            selections.push(sel);
        }
    }
    let trace = LayerTrace {
        kind: LayerKind::Task,
        layer: layer_index,
        n_experts: n,
        n_branches: t,
        gtilde,
        mix_weights,
        selections,
    };
    Ok((outputs, trace))
}
