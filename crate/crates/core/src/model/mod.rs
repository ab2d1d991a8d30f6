//! The full ranking network and its baselines.
//!
//! `Aesm2` stacks one selecting scenario layer per scenario level, then
//! `task_layers` selecting task layers over a shared expert set, then one
//! MLP tower per task. `Mmoe` and `StaticSplit` use the same stack with dense
//! or fixed gating; `HardSharing` replaces the expert stack with a shared
//! MLP bottom.

mod checkpoint;
pub mod layers;

pub use checkpoint::{write_atomic, Checkpoint, NamedTensor, CHECKPOINT_FORMAT};
pub use layers::{
    expert_outputs, mmoe_forward, scenario_layer_forward, task_layer_forward, LayerTrace, LinearVars,
    MoeLayerVars, SelectionMode, StaticPartition,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, Instance};
use crate::error::{Error, Result};
use crate::selection::GateNoise;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Aesm2,
    Mmoe,
    HardSharing,
    StaticSplit,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Aesm2,
        ModelKind::Mmoe,
        ModelKind::HardSharing,
        ModelKind::StaticSplit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Aesm2 => "aesm2",
            ModelKind::Mmoe => "mmoe",
            ModelKind::HardSharing => "hard_sharing",
            ModelKind::StaticSplit => "static_split",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub scenario_experts: usize,
    pub task_experts: usize,
    pub task_layers: usize,
    pub expert_dim: usize,
    pub tower_hidden: usize,
    pub k_specific: usize,
    pub k_shared: usize,
    /// Gate noise standard deviation per expert; 0 disables noise.
    pub noise_scale: f64,
    /// Per-layer partitions for `static_split`, scenario layers first. When
    /// empty, [`StaticPartition::even`] is used for every layer.
    pub static_partition: Vec<StaticPartition>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Aesm2,
            embed_dim: 8,
            scenario_experts: 6,
            task_experts: 6,
            task_layers: 2,
            expert_dim: 32,
            tower_hidden: 32,
            k_specific: 1,
            k_shared: 1,
            noise_scale: 0.01,
            static_partition: Vec::new(),
        }
    }
}

/// Input-side dimensions a model is built against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub vocab_sizes: Vec<usize>,
    pub level_branches: Vec<usize>,
    pub n_tasks: usize,
}

impl Layout {
    pub fn from_schema(schema: &DatasetSchema) -> Self {
        Layout {
            vocab_sizes: schema.vocab_sizes(),
            level_branches: schema.level_branches(),
            n_tasks: schema.tasks.len(),
        }
    }

    pub fn scenario_layers(&self) -> usize {
        self.level_branches.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct MoeIdx {
    experts: Vec<LinearIdx>,
    gates: Vec<LinearIdx>,
}

/// Positions of every parameter in [`Model::params`].
#[derive(Debug, Clone)]
struct Structure {
    features: Vec<usize>,
    scenario_emb: Vec<usize>,
    task_emb: usize,
    scenario_layers: Vec<MoeIdx>,
    task_layers: Vec<MoeIdx>,
    bottom: Vec<LinearIdx>,
    towers: Vec<[LinearIdx; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamRole {
    Embedding,
    Weight,
    Bias,
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether the L2 penalty applies (weight matrices only).
    pub regularized: bool,
}

type MakeParam<'a> = dyn FnMut(String, [usize; 2], ParamRole) -> Result<usize> + 'a;

fn linear_params(make: &mut MakeParam<'_>, name: String, rows: usize, cols: usize) -> Result<LinearIdx> {
    Ok(LinearIdx {
        w: make(format!("{name}.w"), [rows, cols], ParamRole::Weight)?,
        b: make(format!("{name}.b"), [1, cols], ParamRole::Bias)?,
    })
}

fn moe_params(make: &mut MakeParam<'_>, prefix: &str, n: usize, d_in: usize, h: usize, m: usize, gate_in: usize) -> Result<MoeIdx> {
    let experts = (0..n)
        .map(|i| linear_params(make, format!("{prefix}.expert{i}"), d_in, h))
        .collect::<Result<_>>()?;
    let gates = (0..m)
        .map(|j| linear_params(make, format!("{prefix}.gate{j}"), gate_in, n))
        .collect::<Result<_>>()?;
    Ok(MoeIdx { experts, gates })
}

/// Builds the parameter list for a config/layout pair. `make` is called once
/// per parameter in a fixed order and returns the stored index.
fn build_structure(cfg: &ModelConfig, layout: &Layout, make: &mut MakeParam<'_>) -> Result<Structure> {
    let e = cfg.embed_dim;
    let mut features = Vec::new();
    for (f, &v) in layout.vocab_sizes.iter().enumerate() {
        features.push(make(format!("emb.feature{f}"), [v, e], ParamRole::Embedding)?);
    }
    let mut scenario_emb = Vec::new();
    for (l, &m) in layout.level_branches.iter().enumerate() {
        scenario_emb.push(make(format!("emb.scenario{l}"), [m, e], ParamRole::Embedding)?);
    }
    let task_emb = make("emb.task".into(), [layout.n_tasks, e], ParamRole::Embedding)?;

    let d = layout.vocab_sizes.len() * e;
    let n_levels = layout.level_branches.len();
    let h = cfg.expert_dim;
    let mut scenario_layers = Vec::new();
    let mut task_layers = Vec::new();
    let mut bottom = Vec::new();

    if cfg.kind == ModelKind::HardSharing {
        let mut d_in = d + n_levels * e;
        for i in 0..n_levels + cfg.task_layers {
            bottom.push(linear_params(make, format!("bottom{i}"), d_in, h)?);
            d_in = h;
        }
    } else {
        let mut d_in = d;
        for (l, &m) in layout.level_branches.iter().enumerate() {
            let prefix = format!("scenario_layer{l}");
            scenario_layers.push(moe_params(make, &prefix, cfg.scenario_experts, d_in, h, m, d_in + (l + 1) * e)?);
            d_in = h;
        }
        for l in 0..cfg.task_layers {
            let prefix = format!("task_layer{l}");
            let gate_in = d_in + n_levels * e + e;
            task_layers.push(moe_params(make, &prefix, cfg.task_experts, d_in, h, layout.n_tasks, gate_in)?);
            d_in = h;
        }
    }
    let towers = (0..layout.n_tasks)
        .map(|k| {
            Ok([
                linear_params(make, format!("tower{k}.hidden"), h, cfg.tower_hidden)?,
                linear_params(make, format!("tower{k}.out"), cfg.tower_hidden, 1)?,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(Structure {
        features,
        scenario_emb,
        task_emb,
        scenario_layers,
        task_layers,
        bottom,
        towers,
    })
}

/// Model parameters bound as leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per-task predictions, each B×1 (CTR head first, then CVR).
    pub heads: Vec<Var>,
    /// `ctr · cvr`, B×1.
    pub ctcvr: Var,
    pub trace: Vec<LayerTrace>,
    pub params: BoundParams,
}

/// Plain-value predictions for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub ctr: f64,
    pub cvr: f64,
    pub ctcvr: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    structure: Structure,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layout == other.layout && self.params == other.params
    }
}

impl Model {
    /// Builds a freshly initialised model: Glorot-uniform weight matrices,
    /// zero biases, embeddings uniform in (-0.01, 0.01).
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, layout: Layout, rng: &mut R) -> Result<Self> {
        validate(&config, &layout)?;
        let mut params: Vec<Param> = Vec::new();
        let structure = build_structure(
            &config,
            &layout,
            &mut |name, [rows, cols], role| {
                let tensor = match role {
                    ParamRole::Embedding => Tensor::uniform(&[rows, cols], 0.01, rng),
                    ParamRole::Weight => Tensor::glorot(rows, cols, rng),
                    ParamRole::Bias => Tensor::zeros(&[cols]),
                };
                params.push(Param {
                    name,
                    tensor,
                    regularized: role == ParamRole::Weight,
                });
                Ok(params.len() - 1)
            },
        )?;
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model {
            config,
            layout,
            params,
            index,
            structure,
        })
    }

    pub fn for_schema<R: Rng + ?Sized>(config: ModelConfig, schema: &DatasetSchema, rng: &mut R) -> Result<Self> {
        Model::new(config, Layout::from_schema(schema), rng)
    }

    /// Builds a model from stored tensors, reporting every missing,
    /// unexpected or mis-shaped tensor.
    pub fn from_tensors(config: ModelConfig, layout: Layout, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        validate(&config, &layout)?;
        let mut supplied: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut params: Vec<Param> = Vec::new();
        let mut problems: Vec<String> = Vec::new();
        let structure = build_structure(
            &config,
            &layout,
            &mut |name, [rows, cols], role| {
                let expected: Vec<usize> = if role == ParamRole::Bias { vec![cols] } else { vec![rows, cols] };
                let tensor = match supplied.remove(&name) {
                    Some(t) if t.shape() == expected.as_slice() => t,
                    Some(t) => {
                        problems.push(format!("{name}: shape {:?}, expected {expected:?}", t.shape()));
                        Tensor::zeros(&expected)
                    }
                    None => {
                        problems.push(format!("{name}: missing, expected {expected:?}"));
                        Tensor::zeros(&expected)
                    }
                };
                params.push(Param {
                    name,
                    tensor,
                    regularized: role == ParamRole::Weight,
                });
                Ok(params.len() - 1)
            },
        )?;
        let mut extra: Vec<String> = supplied.into_keys().collect();
        extra.sort();
        problems.extend(extra.into_iter().map(|n| format!("{n}: not part of this model")));
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} offending tensor(s): {}",
                problems.len(),
                problems.join("; ")
            )));
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model {
            config,
            layout,
            params,
            index,
            structure,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.params[i].tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copies every parameter value from `other`, which must share the
    /// same parameter names and shapes.
    pub fn copy_weights_from(&mut self, other: &Model) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .param(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("{} missing in source model", p.name)))?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("{} shape differs", p.name)));
            }
            p.tensor = src.clone();
        }
        Ok(())
    }

    /// Selection mode for a layer given the model kind.
    pub fn selection_mode(&self, layer: usize, n: usize, m: usize) -> Result<SelectionMode> {
        Ok(match self.config.kind {
            ModelKind::Aesm2 => SelectionMode::Auto {
                k_specific: self.config.k_specific,
                k_shared: self.config.k_shared,
            },
            ModelKind::Mmoe | ModelKind::HardSharing => SelectionMode::Dense,
            ModelKind::StaticSplit => match self.config.static_partition.get(layer) {
                Some(p) => SelectionMode::Static(p.clone()),
                None => SelectionMode::Static(StaticPartition::even(n, m)?),
            },
        })
    }

    /// Whether gate noise and the selection losses apply to this model.
    pub fn selects_experts(&self) -> bool {
        self.config.kind == ModelKind::Aesm2
    }

    /// Binds parameters as graph leaves. `trainable` controls whether they
    /// accumulate gradient.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Shared embedding lookup: `x` (B×d), one B×e tensor per scenario
    /// level, and one B×e tensor per task.
    pub fn embed(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        batch: &[&Instance],
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let n_features = self.layout.vocab_sizes.len();
        let n_levels = self.layout.scenario_layers();
        for inst in batch {
            if inst.features.len() != n_features {
                return Err(Error::Data(format!(
                    "instance has {} features, model expects {n_features}",
                    inst.features.len()
                )));
            }
            if inst.scenario_path.len() != n_levels {
                return Err(Error::Data(format!(
                    "scenario path length {} differs from {n_levels} scenario layers",
                    inst.scenario_path.len()
                )));
            }
        }
        let mut parts = Vec::with_capacity(n_features);
        for (f, &table) in self.structure.features.iter().enumerate() {
            let ids: Vec<usize> = batch.iter().map(|i| i.features[f]).collect();
            if let Some(&bad) = ids.iter().find(|&&id| id >= self.layout.vocab_sizes[f]) {
                return Err(Error::Data(format!(
                    "feature {f} ({}) id {bad} out of vocabulary {}",
                    self.params[table].name, self.layout.vocab_sizes[f]
                )));
            }
            parts.push(graph.gather_rows(bound.vars[table], &ids)?);
        }
        let x = graph.concat(&parts, 1)?;
        let mut s_path = Vec::with_capacity(n_levels);
        for (l, &table) in self.structure.scenario_emb.iter().enumerate() {
            let ids: Vec<usize> = batch.iter().map(|i| i.scenario_path[l]).collect();
            s_path.push(graph.gather_rows(bound.vars[table], &ids)?);
        }
        let t_all = (0..self.layout.n_tasks)
            .map(|k| graph.gather_rows(bound.vars[self.structure.task_emb], &vec![k; batch.len()]))
            .collect::<Result<_>>()?;
        Ok((x, s_path, t_all))
    }

    fn moe_vars(idx: &MoeIdx, bound: &BoundParams) -> MoeLayerVars {
        let lv = |l: &LinearIdx| LinearVars {
            w: bound.vars[l.w],
            b: bound.vars[l.b],
        };
        MoeLayerVars {
            experts: idx.experts.iter().map(lv).collect(),
            gates: idx.gates.iter().map(lv).collect(),
        }
    }

    /// Full forward pass on a batch. Noise is drawn only when `training` is
    /// set, the model selects experts and `noise_scale > 0`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph,
        batch: &[&Instance],
        training: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        let bound = self.bind(graph, trainable);
        let (x, s_path, t_all) = self.embed(graph, &bound, batch)?;
        let noise = if self.selects_experts() {
            GateNoise {
                scale: self.config.noise_scale,
                training,
            }
        } else {
            GateNoise::off()
        };
        let mut trace = Vec::new();

        let task_outputs: Vec<Var> = if self.config.kind == ModelKind::HardSharing {
            let mut inputs = vec![x];
            inputs.extend(&s_path);
            let mut h = graph.concat(&inputs, 1)?;
            for l in &self.structure.bottom {
                let a = graph.linear(h, bound.vars[l.w], bound.vars[l.b])?;
                h = graph.relu(a);
            }
            vec![h; self.layout.n_tasks]
        } else {
            let mut h = x;
            for (l, idx) in self.structure.scenario_layers.iter().enumerate() {
                let layer = Self::moe_vars(idx, &bound);
                let prefix = graph.concat(&s_path[..=l], 1)?;
                let branches: Vec<usize> = batch.iter().map(|i| i.scenario_path[l]).collect();
                let mode = self.selection_mode(l, layer.experts.len(), layer.gates.len())?;
                let (z, t) = scenario_layer_forward(graph, &layer, h, prefix, &branches, &mode, noise, l, rng)?;
                h = z;
                trace.push(t);
            }
            let full_path = graph.concat(&s_path, 1)?;
            let mut inputs = vec![h; self.layout.n_tasks];
            let offset = self.structure.scenario_layers.len();
            for (l, idx) in self.structure.task_layers.iter().enumerate() {
                let layer = Self::moe_vars(idx, &bound);
                let mode = self.selection_mode(offset + l, layer.experts.len(), layer.gates.len())?;
                let (zs, t) = task_layer_forward(graph, &layer, &inputs, full_path, &t_all, &mode, noise, l, rng)?;
                inputs = zs;
                trace.push(t);
            }
            inputs
        };

        let mut heads = Vec::with_capacity(self.layout.n_tasks);
        for (tower, &z) in self.structure.towers.iter().zip(&task_outputs) {
            let a = graph.linear(z, bound.vars[tower[0].w], bound.vars[tower[0].b])?;
            let hidden = graph.relu(a);
            let logit = graph.linear(hidden, bound.vars[tower[1].w], bound.vars[tower[1].b])?;
            heads.push(graph.sigmoid(logit));
        }
        let ctcvr = if heads.len() >= 2 {
            graph.mul(heads[0], heads[1])?
        } else {
            heads[0]
        };
        Ok(ForwardOutput {
            heads,
            ctcvr,
            trace,
            params: bound,
        })
    }

    /// Noise-free predictions for a batch.
    pub fn predict(&self, batch: &[&Instance]) -> Result<Vec<Prediction>> {
        let mut graph = Graph::new();
        // no noise is drawn at inference, so the generator is never used
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut graph, batch, false, false, &mut rng)?;
        let ctr = graph.value(out.heads[0]).data();
        let cvr = graph.value(*out.heads.get(1).unwrap_or(&out.heads[0])).data();
        let ctcvr = graph.value(out.ctcvr).data();
        Ok((0..batch.len())
            .map(|i| Prediction {
                ctr: ctr[i],
                cvr: cvr[i],
                ctcvr: ctcvr[i],
            })
            .collect())
    }
}

fn validate(cfg: &ModelConfig, layout: &Layout) -> Result<()> {
    if layout.vocab_sizes.is_empty() || layout.level_branches.is_empty() || layout.n_tasks == 0 {
        return Err(Error::Config("layout needs features, scenario levels and tasks".into()));
    }
    let dims = [
        ("embed_dim", cfg.embed_dim),
        ("expert_dim", cfg.expert_dim),
        ("tower_hidden", cfg.tower_hidden),
    ];
    if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    if cfg.kind != ModelKind::HardSharing {
        if cfg.scenario_experts == 0 || cfg.task_experts == 0 {
            return Err(Error::Config("expert counts must be positive".into()));
        }
        if cfg.kind == ModelKind::Aesm2 {
            crate::selection::validate_k(cfg.scenario_experts, cfg.k_specific, cfg.k_shared)?;
            crate::selection::validate_k(cfg.task_experts, cfg.k_specific, cfg.k_shared)?;
        }
    }
    if cfg.noise_scale < 0.0 || !cfg.noise_scale.is_finite() {
        return Err(Error::Config(format!("noise_scale {} must be non-negative", cfg.noise_scale)));
    }
    if cfg.kind == ModelKind::StaticSplit && !cfg.static_partition.is_empty() {
        let n_layers = layout.level_branches.len() + cfg.task_layers;
        if cfg.static_partition.len() != n_layers {
            return Err(Error::Config(format!(
                "static_partition lists {} layers, model has {n_layers}",
                cfg.static_partition.len()
            )));
        }
        for (l, p) in cfg.static_partition.iter().enumerate() {
            let (n, m) = if l < layout.level_branches.len() {
                (cfg.scenario_experts, layout.level_branches[l])
            } else {
                (cfg.task_experts, layout.n_tasks)
            };
            p.validate(n, m)?;
        }
    }
    Ok(())
}

/// `ctr · cvr`.
pub fn esmm_combine(ctr: f64, cvr: f64) -> f64 {
    ctr * cvr
}

/// Builds one of the comparison models with fresh weights.
pub fn build_baseline<R: Rng + ?Sized>(kind: &str, config: &ModelConfig, layout: Layout, rng: &mut R) -> Result<Model> {
    let kind: ModelKind = kind.parse()?;
    Model::new(
        ModelConfig {
            kind,
            ..config.clone()
        },
        layout,
        rng,
    )
}
