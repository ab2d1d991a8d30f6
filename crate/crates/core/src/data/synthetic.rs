//! Hierarchical multi-scenario click/conversion generator.
//!
//! Each leaf scenario `s` with path `(c, d, ...)` gets a ground-truth weight
//! vector
//!
//! ```text
//! w_s = g·w_global + α·w_level0[c] + β·w_level1[d] + ... + (1 - g - α - β - ...)·w_own[s]
//! ```
//!
//! rescaled to unit component variance. Features are categorical ids mapped
//! through fixed random embeddings `φ`; the click logit is
//! `signal · w_sᵀφ / sqrt(dim) + b_s`, with `b_s` calibrated so the mean
//! click rate of scenario `s` matches its base CTR. Conversions use an
//! independent set of weights with the same mixing structure and are only
//! drawn for clicked impressions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSchema, FeatureGroup, FeatureSpec, Instance, ScenarioLevel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CALIBRATION_SAMPLES: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub groups: Vec<FeatureGroup>,
    pub levels: Vec<ScenarioLevel>,
    /// Weight of each level's shared component (α for level 0, β for level 1, ...).
    pub level_mix: Vec<f64>,
    /// Weight of a component common to every scenario.
    pub global_mix: f64,
    /// Impression share per leaf scenario.
    pub shares: Vec<f64>,
    pub ctr_base: Vec<f64>,
    /// Conversion rate among clicked impressions.
    pub cvr_base: Vec<f64>,
    pub latent_dim: usize,
    /// Standard deviation of the learnable part of each logit.
    pub signal: f64,
    pub samples: SampleCounts,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let feat = |name: &str, vocab_size| FeatureSpec { name: name.into(), vocab_size };
        SyntheticSpec {
            groups: vec![
                FeatureGroup { name: "user".into(), features: vec![feat("age", 8), feat("gender", 3)] },
                FeatureGroup { name: "item".into(), features: vec![feat("brand", 30), feat("price", 10)] },
                FeatureGroup { name: "query".into(), features: vec![feat("query_freq", 12)] },
            ],
            levels: vec![
                ScenarioLevel { name: "channel".into(), branches: 2 },
                ScenarioLevel { name: "domain".into(), branches: 2 },
            ],
            level_mix: vec![0.3, 0.3],
            global_mix: 0.0,
            shares: vec![0.1298, 0.2891, 0.5167, 0.0644],
            ctr_base: vec![0.28, 0.12, 0.40, 0.15],
            cvr_base: vec![0.30, 0.20, 0.25, 0.20],
            latent_dim: 4,
            signal: 2.0,
            samples: SampleCounts { train: 200_000, val: 20_000, test: 20_000 },
        }
    }
}

impl SyntheticSpec {
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            groups: self.groups.clone(),
            scenario_levels: self.levels.clone(),
            tasks: vec!["ctr".into(), "cvr".into()],
        }
    }

    pub fn n_scenarios(&self) -> usize {
        self.levels.iter().map(|l| l.branches).product()
    }

    /// Weight of the scenario-specific component.
    pub fn own_mix(&self) -> f64 {
        1.0 - self.global_mix - self.level_mix.iter().sum::<f64>()
    }

    /// Same spec with every scenario given identical statistics: fully
    /// global weights and shared base rates.
    pub fn identical_scenarios(mut self) -> Self {
        self.global_mix = 1.0;
        self.level_mix = vec![0.0; self.levels.len()];
        let n = self.n_scenarios();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        self.ctr_base = vec![mean(&self.ctr_base); n];
        self.cvr_base = vec![mean(&self.cvr_base); n];
        self.shares = vec![1.0 / n as f64; n];
        self
    }

    /// Same spec with no shared components: scenarios are independent.
    pub fn independent_scenarios(mut self) -> Self {
        self.global_mix = 0.0;
        self.level_mix = vec![0.0; self.levels.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schema().validate()?;
        let n = self.n_scenarios();
        if self.level_mix.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "level_mix has {} entries for {} levels",
                self.level_mix.len(),
                self.levels.len()
            )));
        }
        for &c in self.level_mix.iter().chain(std::iter::once(&self.global_mix)) {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("mixing coefficient {c} outside [0, 1]")));
            }
        }
        if self.own_mix() < -1e-12 {
            return Err(Error::Config(format!(
                "mixing coefficients sum to {} > 1",
                1.0 - self.own_mix()
            )));
        }
        for (name, v) in [("shares", &self.shares), ("ctr_base", &self.ctr_base), ("cvr_base", &self.cvr_base)] {
            if v.len() != n {
                return Err(Error::Config(format!("{name} has {} entries for {n} scenarios", v.len())));
            }
        }
        if self.shares.iter().any(|&s| s < 0.0) || (self.shares.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("shares must be non-negative and sum to 1".into()));
        }
        if let Some(r) = self.ctr_base.iter().chain(&self.cvr_base).find(|&&r| !(r > 0.0 && r < 1.0)) {
            return Err(Error::Config(format!("base rate {r} outside (0, 1)")));
        }
        if self.latent_dim == 0 || !(self.signal.is_finite() && self.signal >= 0.0) {
            return Err(Error::Config("latent_dim must be positive and signal finite, non-negative".into()));
        }
        if self.samples.train == 0 {
            return Err(Error::Config("synthetic spec requests zero training samples".into()));
        }
        Ok(())
    }
}

/// Train/validation/test datasets drawn from one ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Fixed ground truth from which any number of samples can be drawn.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    schema: DatasetSchema,
    seed: u64,
    /// `[task][scenario][feature][id]` logit contribution.
    contrib: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[task][scenario]` calibrated bias.
    bias: Vec<Vec<f64>>,
}

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let schema = spec.schema();
        let vocab = schema.vocab_sizes();
        let n_scen = spec.n_scenarios();
        let r = spec.latent_dim;
        let dim = vocab.len() * r;
        let mut rng = stream(seed, 0);

        let embeddings: Vec<Tensor> = vocab
            .iter()
            .map(|&v| Tensor::matrix(v, r, normal_vec(v * r, &mut rng)))
            .collect::<Result<_>>()?;

        let own = spec.own_mix().max(0.0);
        let norm = (spec.global_mix.powi(2) + spec.level_mix.iter().map(|c| c * c).sum::<f64>() + own * own).sqrt();
        let mut contrib = Vec::with_capacity(2);
        for _task in 0..2 {
            let global = normal_vec(dim, &mut rng);
            let per_level: Vec<Vec<Vec<f64>>> = spec
                .levels
                .iter()
                .map(|l| (0..l.branches).map(|_| normal_vec(dim, &mut rng)).collect())
                .collect();
            let per_scenario: Vec<Vec<f64>> = (0..n_scen).map(|_| normal_vec(dim, &mut rng)).collect();

            let mut task_contrib = Vec::with_capacity(n_scen);
            for (s, own_w) in per_scenario.iter().enumerate() {
                let path = schema.scenario_path(s);
                let mut w: Vec<f64> = global.iter().map(|x| spec.global_mix * x).collect();
                for (l, &b) in path.iter().enumerate() {
                    for (wi, x) in w.iter_mut().zip(&per_level[l][b]) {
                        *wi += spec.level_mix[l] * x;
                    }
                }
                for (wi, x) in w.iter_mut().zip(own_w) {
                    *wi += own * x;
                }
                let scale = spec.signal / (norm * (dim as f64).sqrt());
                let feats: Vec<Vec<f64>> = embeddings
                    .iter()
                    .enumerate()
                    .map(|(f, e)| {
                        let block = &w[f * r..(f + 1) * r];
                        (0..e.rows())
                            .map(|id| scale * e.row(id).iter().zip(block).map(|(a, b)| a * b).sum::<f64>())
                            .collect()
                    })
                    .collect();
                task_contrib.push(feats);
            }
            contrib.push(task_contrib);
        }

        let mut world = SyntheticWorld {
            spec: spec.clone(),
            schema,
            seed,
            contrib,
            bias: vec![vec![0.0; n_scen]; 2],
        };
        world.calibrate();
        Ok(world)
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    fn logit(&self, task: usize, scenario: usize, features: &[usize]) -> f64 {
        let c = &self.contrib[task][scenario];
        features.iter().enumerate().map(|(f, &id)| c[f][id]).sum::<f64>() + self.bias[task][scenario]
    }

    fn draw_features<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        self.schema
            .features()
            .map(|f| rng.random_range(0..f.vocab_size))
            .collect()
    }

    /// Chooses biases so that the mean CTR, and the click-weighted mean CVR,
    /// of each scenario match the base rates.
    fn calibrate(&mut self) {
        let mut rng = stream(self.seed, 100);
        let samples: Vec<Vec<usize>> = (0..CALIBRATION_SAMPLES).map(|_| self.draw_features(&mut rng)).collect();
        for s in 0..self.spec.n_scenarios() {
            let z_ctr: Vec<f64> = samples.iter().map(|x| self.logit(0, s, x)).collect();
            let ones = vec![1.0; z_ctr.len()];
            self.bias[0][s] = solve_bias(&z_ctr, &ones, self.spec.ctr_base[s]);
            let click_w: Vec<f64> = z_ctr.iter().map(|z| sigmoid(z + self.bias[0][s])).collect();
            let z_cvr: Vec<f64> = samples.iter().map(|x| self.logit(1, s, x)).collect();
            self.bias[1][s] = solve_bias(&z_cvr, &click_w, self.spec.cvr_base[s]);
        }
    }

    /// Click and conversion probabilities for a feature vector.
    pub fn probabilities(&self, scenario: usize, features: &[usize]) -> (f64, f64) {
        (
            sigmoid(self.logit(0, scenario, features)),
            sigmoid(self.logit(1, scenario, features)),
        )
    }

    /// Draws `n` instances with per-scenario counts allocated exactly from
    /// the shares (largest remainder), in shuffled order.
    pub fn sample(&self, n: usize, stream_id: u64) -> Result<Dataset> {
        let mut rng = stream(self.seed, 1 + stream_id);
        let counts = allocate(&self.spec.shares, n);
        let mut scenarios: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| std::iter::repeat_n(s, c))
            .collect();
        use rand::seq::SliceRandom;
        scenarios.shuffle(&mut rng);

        let instances = scenarios
            .into_iter()
            .map(|s| {
                let features = self.draw_features(&mut rng);
                let (p_click, p_conv) = self.probabilities(s, &features);
                let click = rng.random_bool(p_click);
                let conversion = click && rng.random_bool(p_conv);
                Instance {
                    features,
                    scenario_path: self.schema.scenario_path(s),
                    click: click as u8,
                    conversion: conversion as u8,
                }
            })
            .collect();
        Ok(Dataset {
            schema: self.schema.clone(),
            instances,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid_scalar(x)
}

/// Bisection for `b` with `Σ w·σ(z + b) / Σ w = target`.
fn solve_bias(z: &[f64], weights: &[f64], target: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let rate = |b: f64| z.iter().zip(weights).map(|(z, w)| w * sigmoid(z + b)).sum::<f64>() / total;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn allocate(shares: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Generates train/validation/test splits; deterministic given the seed.
pub fn generate_splits(spec: &SyntheticSpec, seed: u64) -> Result<Splits> {
    let world = SyntheticWorld::new(spec, seed)?;
    Ok(Splits {
        train: world.sample(spec.samples.train, 0)?,
        val: world.sample(spec.samples.val, 1)?,
        test: world.sample(spec.samples.test, 2)?,
    })
}

/// Generates the training split only.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    SyntheticWorld::new(spec, seed)?.sample(spec.samples.train, 0)
}
