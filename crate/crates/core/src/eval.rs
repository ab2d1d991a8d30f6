//! Metrics and post-hoc analysis: AUC per scenario and task, cross-scenario
//! transfer matrices, expert utilization and KL curves from the step log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, Prediction};
use crate::selection::LayerKind;
use crate::tensor::Graph;

const EVAL_BATCH: usize = 1024;

/// Rank-sum AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("AUC label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("AUC scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `None` when the metric is undefined for this cell.
fn auc_cell(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    match auc(scores, labels) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Noise-free predictions over a whole dataset, in instance order.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.instances.chunks(EVAL_BATCH) {
        let batch: Vec<_> = chunk.iter().collect();
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub name: String,
    pub count: usize,
    pub clicks: usize,
    pub conversions: usize,
    pub ctr_auc: Option<f64>,
    pub ctcvr_auc: Option<f64>,
}

impl CellMetrics {
    fn compute(name: String, preds: &[&Prediction], clicks: &[u8], convs: &[u8]) -> Result<Self> {
        let ctr: Vec<f64> = preds.iter().map(|p| p.ctr).collect();
        let ctcvr: Vec<f64> = preds.iter().map(|p| p.ctcvr).collect();
        Ok(CellMetrics {
            name,
            count: preds.len(),
            clicks: clicks.iter().map(|&c| c as usize).sum(),
            conversions: convs.iter().map(|&c| c as usize).sum(),
            ctr_auc: auc_cell(&ctr, clicks)?,
            ctcvr_auc: auc_cell(&ctcvr, convs)?,
        })
    }
}

/// AUC per scenario and pooled over all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenarios: Vec<CellMetrics>,
    pub all: CellMetrics,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<MetricReport> {
    let preds = predict_dataset(model, dataset)?;
    report_from_predictions(dataset, &preds)
}

pub fn report_from_predictions(dataset: &Dataset, preds: &[Prediction]) -> Result<MetricReport> {
    if preds.len() != dataset.len() {
        return Err(Error::dim("report_from_predictions", &[preds.len()], &[dataset.len()]));
    }
    let n_scen = dataset.schema.n_scenarios();
    let mut cells: Vec<(Vec<&Prediction>, Vec<u8>, Vec<u8>)> = vec![Default::default(); n_scen];
    for (inst, p) in dataset.instances.iter().zip(preds) {
        let cell = &mut cells[dataset.scenario_of(inst)];
        cell.0.push(p);
        cell.1.push(inst.click);
        cell.2.push(inst.conversion);
    }
    let scenarios = cells
        .iter()
        .enumerate()
        .map(|(s, (p, c, v))| CellMetrics::compute(dataset.schema.scenario_name(s), p, c, v))
        .collect::<Result<_>>()?;
    let all_p: Vec<&Prediction> = preds.iter().collect();
    let clicks: Vec<u8> = dataset.instances.iter().map(|i| i.click).collect();
    let convs: Vec<u8> = dataset.instances.iter().map(|i| i.conversion).collect();
    Ok(MetricReport {
        scenarios,
        all: CellMetrics::compute("ALL".into(), &all_p, &clicks, &convs)?,
    })
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per labelled report; columns are scenario×task AUCs then ALL.
/// Undefined cells are left empty.
pub fn metrics_table(rows: &[(String, &MetricReport)]) -> Result<String> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Contract("metrics table with no rows".into()))?
        .1;
    let mut out = String::from("model");
    for cell in first.scenarios.iter().chain(std::iter::once(&first.all)) {
        let _ = write!(out, ",{0}:ctr_auc,{0}:ctcvr_auc", cell.name);
    }
    out.push('\n');
    for (label, report) in rows {
        if report.scenarios.len() != first.scenarios.len() {
            return Err(Error::Contract(format!("report {label} has a different scenario set")));
        }
        out.push_str(label);
        for cell in report.scenarios.iter().chain(std::iter::once(&report.all)) {
            let _ = write!(out, ",{},{}", fmt_cell(cell.ctr_auc), fmt_cell(cell.ctcvr_auc));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Entry `[i][j]`: AUC of the model trained on scenario `i`, tested on `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub scenarios: Vec<String>,
    pub ctr: Vec<Vec<Option<f64>>>,
    pub ctcvr: Vec<Vec<Option<f64>>>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,trained_on");
        for s in &self.scenarios {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        for (task, m) in [("ctr", &self.ctr), ("ctcvr", &self.ctcvr)] {
            for (i, row) in m.iter().enumerate() {
                let _ = write!(out, "{task},{}", self.scenarios[i]);
                for v in row {
                    let _ = write!(out, ",{}", fmt_cell(*v));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Evaluates every per-scenario model on every scenario's test set.
pub fn transfer_matrix(models: &[Model], datasets: &[Dataset]) -> Result<TransferMatrix> {
    if models.len() != datasets.len() || models.is_empty() {
        return Err(Error::Contract(format!(
            "transfer matrix needs one model per scenario dataset, got {} models and {} datasets",
            models.len(),
            datasets.len()
        )));
    }
    let s = models.len();
    let mut ctr = vec![vec![None; s]; s];
    let mut ctcvr = vec![vec![None; s]; s];
    for (i, model) in models.iter().enumerate() {
        for (j, data) in datasets.iter().enumerate() {
            let r = evaluate(model, data)?;
            ctr[i][j] = r.all.ctr_auc;
            ctcvr[i][j] = r.all.ctcvr_auc;
        }
    }
    let scenarios = (0..s).map(|i| datasets[i].schema.scenario_name(i)).collect();
    Ok(TransferMatrix { scenarios, ctr, ctcvr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchUtilization {
    pub branch: usize,
    pub instances: usize,
    /// Fraction of this branch's instances selecting each expert as specific.
    pub specific_freq: Vec<f64>,
    pub shared_freq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUtilization {
    pub kind: LayerKind,
    pub layer: usize,
    pub branches: Vec<BranchUtilization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub layers: Vec<LayerUtilization>,
}

impl UtilizationReport {
    /// Rows `layer,branch,expert,specific_freq,shared_freq`; layers are
    /// named `scenario<l>` or `task<l>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,branch,expert,specific_freq,shared_freq\n");
        for layer in &self.layers {
            let name = match layer.kind {
                LayerKind::Scenario => format!("scenario{}", layer.layer),
                LayerKind::Task => format!("task{}", layer.layer),
            };
            for b in &layer.branches {
                for (e, (sp, sh)) in b.specific_freq.iter().zip(&b.shared_freq).enumerate() {
                    let _ = writeln!(out, "{name},{},{e},{sp},{sh}", b.branch);
                }
            }
        }
        out
    }
}

/// Counts, per layer and branch, how often each expert lands in the
/// specific and shared sets (inference mode, no noise).
pub fn utilization(model: &Model, dataset: &Dataset) -> Result<UtilizationReport> {
    utilization_filtered(model, dataset, |_| true)
}

/// [`utilization`] restricted to one leaf scenario.
pub fn scenario_utilization(model: &Model, dataset: &Dataset, scenario: usize) -> Result<UtilizationReport> {
    utilization_filtered(model, dataset, |s| s == scenario)
}

/// (instances, specific counts, shared counts) for one branch of a layer.
type BranchCounts = (usize, Vec<usize>, Vec<usize>);

fn utilization_filtered(model: &Model, dataset: &Dataset, keep: impl Fn(usize) -> bool) -> Result<UtilizationReport> {
    let instances: Vec<_> = dataset.instances.iter().filter(|i| keep(dataset.scenario_of(i))).collect();
    if instances.is_empty() {
        return Err(Error::Data("utilization needs a non-empty evaluation set".into()));
    }
    let mut counts: Vec<(LayerKind, usize, Vec<BranchCounts>)> = Vec::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for chunk in instances.chunks(EVAL_BATCH) {
        let mut graph = Graph::new();
        let out = model.forward(&mut graph, chunk, false, false, &mut rng)?;
        let traces: Vec<_> = out.trace.iter().filter(|t| !t.selections.is_empty()).collect();
        if traces.is_empty() {
            return Err(Error::Contract(format!(
                "{} model makes no expert selections",
                model.kind()
            )));
        }
        if counts.is_empty() {
            counts = traces
                .iter()
                .map(|t| {
                    let per = (0, vec![0; t.n_experts], vec![0; t.n_experts]);
                    (t.kind, t.layer, vec![per; t.n_branches])
                })
                .collect();
        }
        for (t, slot) in traces.iter().zip(counts.iter_mut()) {
            for sels in &t.selections {
                for sel in sels {
                    let c = &mut slot.2[sel.branch_index];
                    c.0 += 1;
                    for &e in &sel.specific {
                        c.1[e] += 1;
                    }
                    for &e in &sel.shared {
                        c.2[e] += 1;
                    }
                }
            }
        }
    }
    let layers = counts
        .into_iter()
        .map(|(kind, layer, branches)| LayerUtilization {
            kind,
            layer,
            branches: branches
                .into_iter()
                .enumerate()
                .map(|(branch, (n, sp, sh))| {
                    let norm = |v: Vec<usize>| v.into_iter().map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
                    BranchUtilization {
                        branch,
                        instances: n,
                        specific_freq: norm(sp),
                        shared_freq: norm(sh),
                    }
                })
                .collect(),
        })
        .collect();
    Ok(UtilizationReport { layers })
}

/// Per-step selected-expert KL sums read back from the step log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KlCurves {
    pub steps: Vec<u64>,
    pub scenario_specific: Vec<f64>,
    pub scenario_shared: Vec<f64>,
    pub task_specific: Vec<f64>,
    pub task_shared: Vec<f64>,
}

impl KlCurves {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn specific(&self) -> Vec<f64> {
        self.scenario_specific.iter().zip(&self.task_specific).map(|(a, b)| a + b).collect()
    }

    pub fn shared(&self) -> Vec<f64> {
        self.scenario_shared.iter().zip(&self.task_shared).map(|(a, b)| a + b).collect()
    }

    /// Rows `step,kl_specific,kl_shared,scenario_specific,scenario_shared,task_specific,task_shared`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("step,kl_specific,kl_shared,scenario_specific,scenario_shared,task_specific,task_shared\n");
        let (sp, sh) = (self.specific(), self.shared());
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.steps[i],
                sp[i],
                sh[i],
                self.scenario_specific[i],
                self.scenario_shared[i],
                self.task_specific[i],
                self.task_shared[i]
            );
        }
        out
    }
}

/// Parses the JSONL step log.
pub fn kl_curves(log: &str) -> Result<KlCurves> {
    let mut curves = KlCurves::default();
    for (i, line) in log.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::LogFormat(format!("line {}: {e}", i + 1)))?;
        let field = |name: &str| -> Result<&serde_json::Value> {
            v.get(name)
                .ok_or_else(|| Error::LogFormat(format!("line {}: missing field {name:?}", i + 1)))
        };
        let num = |name: &str| -> Result<f64> {
            field(name)?
                .as_f64()
                .ok_or_else(|| Error::LogFormat(format!("line {}: field {name:?} is not a number", i + 1)))
        };
        let step = field("step")?
            .as_u64()
            .ok_or_else(|| Error::LogFormat(format!("line {}: field \"step\" is not an integer", i + 1)))?;
        curves.steps.push(step);
        curves.scenario_specific.push(num("kl_scenario_specific")?);
        curves.scenario_shared.push(num("kl_scenario_shared")?);
        curves.task_specific.push(num("kl_task_specific")?);
        curves.task_shared.push(num("kl_task_shared")?);
    }
    Ok(curves)
}

/// Exponential moving average; output has the input's length.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Running minimum; output has the input's length.
pub fn monotone_envelope(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(f64::INFINITY, |m, &v| {
            *m = m.min(v);
            Some(*m)
        })
        .collect()
}
