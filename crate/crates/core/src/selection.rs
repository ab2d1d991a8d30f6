//! KL-based expert selection.
//!
//! For a gating matrix normalised row-wise over branches (scenarios or
//! tasks), an expert whose row is close to the one-hot indicator of branch
//! `j` is *specific* to `j`; an expert whose row is close to uniform is
//! *shared*. Each branch activates the union of its top-`K_sp` specific and
//! top-`K_sh` shared experts; every other gate logit is masked before the
//! mixture softmax.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// One-hot and uniform reference distributions over `m` branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistributions {
    pub one_hot: Vec<f64>,
    pub uniform: Vec<f64>,
}

impl ReferenceDistributions {
    pub fn new(m: usize, branch: usize) -> Result<Self> {
        if branch >= m {
            return Err(Error::Config(format!(
                "branch {branch} out of range for {m} branches"
            )));
        }
        let mut one_hot = vec![0.0; m];
        one_hot[branch] = 1.0;
        Ok(ReferenceDistributions {
            one_hot,
            uniform: vec![1.0 / m as f64; m],
        })
    }
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", &[p.len()], &[q.len()]));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Domain(format!(
                "q[{i}] = {qi} where p[{i}] = {pi} is nonzero"
            )));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Experts chosen for one branch of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub branch_index: usize,
    pub specific: Vec<usize>,
    pub shared: Vec<usize>,
    /// `-KL(p_j || row_k)` for every expert `k`.
    pub specific_scores: Vec<f64>,
    /// `-KL(q || row_k)` for every expert `k`.
    pub shared_scores: Vec<f64>,
}

impl SelectionResult {
    /// Sorted, deduplicated union of the specific and shared sets.
    pub fn active(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.specific.iter().chain(&self.shared).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Indices of the `k` largest scores; equal scores resolve to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Selects specific and shared experts for `branch` from a row-normalised
/// gating matrix of shape n×m.
pub fn select_experts(
    normalized: &Tensor,
    branch: usize,
    k_specific: usize,
    k_shared: usize,
) -> Result<SelectionResult> {
    if normalized.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "gating matrix must be n×m, got {:?}",
            normalized.shape()
        )));
    }
    select_from_rows(
        normalized.data(),
        normalized.rows(),
        normalized.cols(),
        branch,
        k_specific,
        k_shared,
    )
}

/// Slice form of [`select_experts`]: `rows` holds n rows of length m.
pub fn select_from_rows(
    rows: &[f64],
    n: usize,
    m: usize,
    branch: usize,
    k_specific: usize,
    k_shared: usize,
) -> Result<SelectionResult> {
    if rows.len() != n * m {
        return Err(Error::dim("select_experts", &[n, m], &[rows.len()]));
    }
    validate_k(n, k_specific, k_shared)?;
    let refs = ReferenceDistributions::new(m, branch)?;
    let mut specific_scores = Vec::with_capacity(n);
    let mut shared_scores = Vec::with_capacity(n);
    for row in rows.chunks(m) {
        specific_scores.push(-kl_divergence(&refs.one_hot, row)?);
        shared_scores.push(-kl_divergence(&refs.uniform, row)?);
    }
    Ok(SelectionResult {
        branch_index: branch,
        specific: top_k(&specific_scores, k_specific),
        shared: top_k(&shared_scores, k_shared),
        specific_scores,
        shared_scores,
    })
}

pub fn validate_k(n: usize, k_specific: usize, k_shared: usize) -> Result<()> {
    for (name, k) in [("k_specific", k_specific), ("k_shared", k_shared)] {
        if k == 0 || k > n {
            return Err(Error::Config(format!(
                "{name} = {k} must lie in [1, {n}]"
            )));
        }
    }
    Ok(())
}

/// Exploration noise added to gate logits during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateNoise {
    /// Per-expert proportionality constant; the standard deviation is
    /// `scale · n_experts`.
    pub scale: f64,
    pub training: bool,
}

impl GateNoise {
    pub fn off() -> Self {
        GateNoise {
            scale: 0.0,
            training: false,
        }
    }

    pub fn std_dev(&self, n_experts: usize) -> f64 {
        if self.training {
            self.scale * n_experts as f64
        } else {
            0.0
        }
    }

    /// Draws a rows×n noise tensor, or `None` when noise is inactive.
    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, n: usize, rng: &mut R) -> Result<Option<Tensor>> {
        if self.scale < 0.0 || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "noise scale must be finite and non-negative, got {}",
                self.scale
            )));
        }
        let sd = self.std_dev(n);
        if sd == 0.0 {
            return Ok(None);
        }
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..rows * n).map(|_| normal.sample(rng)).collect();
        Ok(Some(Tensor::matrix(rows, n, data)?))
    }
}

/// Gate logits for one branch: `[input, branch_embedding] · W + b (+ noise)`.
///
/// `input` and `branch_embedding` are row-aligned (B×d and B×e); the result
/// is B×n.
#[allow(clippy::too_many_arguments)]
pub fn compute_gate<R: Rng + ?Sized>(
    graph: &mut Graph,
    input: Var,
    branch_embedding: Var,
    weights: Var,
    bias: Var,
    noise: GateNoise,
    rng: &mut R,
) -> Result<Var> {
    let gate_in = graph.concat(&[input, branch_embedding], 1)?;
    let logits = graph.linear(gate_in, weights, bias)?;
    let v = graph.value(logits);
    let (rows, n) = (v.rows(), v.cols());
    match noise.sample(rows, n, rng)? {
        Some(eta) => graph.add_const(logits, &eta),
        None => Ok(logits),
    }
}

/// Keeps each row's active entries and masks the rest.
pub fn mask_gate(graph: &mut Graph, raw: Var, active: &[Vec<usize>]) -> Result<Var> {
    let v = graph.value(raw);
    let (rows, n) = (v.rows(), v.cols());
    if active.len() != rows {
        return Err(Error::dim("mask_gate", v.shape(), &[active.len()]));
    }
    let mut keep = vec![false; rows * n];
    for (r, set) in active.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::Contract(format!("row {r} has an empty active set")));
        }
        for &k in set {
            if k >= n {
                return Err(Error::Contract(format!(
                    "active index {k} out of range for {n} experts"
                )));
            }
            keep[r * n + k] = true;
        }
    }
    graph.mask(raw, keep)
}

/// Value-level masked softmax for a single gate vector.
pub fn masked_softmax(raw: &[f64], active: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(raw.to_vec()));
    let m = mask_gate(&mut g, v, &[active.to_vec()])?;
    let s = g.softmax_rows(m)?;
    Ok(g.value(s).data().to_vec())
}

/// Whether a gate belongs to a scenario layer or a task layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Scenario,
    Task,
}

/// One line of a selection trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTraceRecord {
    pub step: usize,
    pub kind: LayerKind,
    pub layer: usize,
    pub instance: usize,
    pub branch: usize,
    pub specific: Vec<usize>,
    pub shared: Vec<usize>,
    pub specific_scores: Vec<f64>,
    pub shared_scores: Vec<f64>,
}

/// Appends records as line-delimited JSON.
pub fn append_trace<W: Write>(out: &mut W, records: &[SelectionTraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<SelectionTraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::LogFormat(format!("trace line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!(close(
            kl_divergence(&[1.0, 0.0], &[0.9, 0.1]).unwrap(),
            -(0.9f64.ln()),
            1e-15
        ));
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!(close(got, expected, 1e-15));
        assert!(close(got, 0.51083, 1e-5));
    }

    #[test]
    fn kl_rejects_zero_support() {
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
        // zero mass in p makes a zero in q harmless
        assert!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0]).is_ok());
    }

    fn example_matrix() -> Tensor {
        Tensor::from_rows(&[[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]).unwrap()
    }

    #[test]
    fn select_examples() {
        let g = example_matrix();
        let r = select_experts(&g, 0, 1, 1).unwrap();
        assert_eq!(r.specific, vec![0]);
        assert_eq!(r.shared, vec![1]);
        let kl: Vec<f64> = r.specific_scores.iter().map(|h| -h).collect();
        assert!(close(kl[0], 0.10536, 1e-5));
        assert!(close(kl[1], std::f64::consts::LN_2, 1e-12));
        assert!(close(kl[2], 1.60944, 1e-5));
        assert_eq!(r.shared_scores[1], 0.0);

        let r = select_experts(&g, 1, 1, 1).unwrap();
        assert_eq!(r.specific, vec![2]);
        assert_eq!(r.shared, vec![1]);

        let r = select_experts(&g, 0, 3, 3).unwrap();
        assert_eq!(r.active(), vec![0, 1, 2]);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let g = example_matrix();
        assert!(matches!(select_experts(&g, 0, 4, 1), Err(Error::Config(_))));
        assert!(matches!(select_experts(&g, 0, 1, 0), Err(Error::Config(_))));
        assert!(matches!(select_experts(&g, 2, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn single_branch_specific_equals_shared() {
        let g = Tensor::from_rows(&[[1.0], [1.0], [1.0]]).unwrap();
        let r = select_experts(&g, 0, 2, 2).unwrap();
        assert_eq!(r.specific, r.shared);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0, 0.0, 0.0], 2), vec![0, 1]);
    }

    #[test]
    fn masked_softmax_examples() {
        let w = masked_softmax(&[2.0, 1.0, 0.5], &[0, 1]).unwrap();
        let e = 1f64.exp();
        assert!(close(w[0], e * e / (e * e + e), 1e-12));
        assert!(close(w[0], 0.7311, 1e-4));
        assert!(close(w[1], 0.2689, 1e-4));
        assert_eq!(w[2], 0.0);

        let all = masked_softmax(&[2.0, 1.0, 0.5], &[0, 1, 2]).unwrap();
        let plain = crate::tensor::softmax_rows(&Tensor::vector(vec![2.0, 1.0, 0.5])).unwrap();
        assert_eq!(all, plain.data());

        let one = masked_softmax(&[2.0, 1.0, 0.5], &[2]).unwrap();
        assert_eq!(one, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_active_set_rejected() {
        assert!(matches!(masked_softmax(&[1.0, 2.0], &[]), Err(Error::Contract(_))));
    }

    fn gate_fixture(g: &mut Graph) -> (Var, Var, Var, Var) {
        let x = g.constant(Tensor::from_rows(&[[0.3, -0.2]]).unwrap());
        let s = g.constant(Tensor::from_rows(&[[0.5]]).unwrap());
        let w = g.param(
            Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8], [0.9, 1.0, 1.1, 1.2]])
                .unwrap(),
        );
        let b = g.param(Tensor::vector(vec![0.0, 0.1, 0.2, 0.3]));
        (x, s, w, b)
    }

    #[test]
    fn zero_noise_is_exact_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let (x, s, w, b) = gate_fixture(&mut g);
        let noise = GateNoise {
            scale: 0.0,
            training: true,
        };
        let out = compute_gate(&mut g, x, s, w, b, noise, &mut rng).unwrap();
        let xin = crate::tensor::concat(&[g.value(x), g.value(s)], 1).unwrap();
        let mut expected = crate::tensor::matmul(&xin, g.value(w)).unwrap();
        for (e, bias) in expected.data_mut().iter_mut().zip(g.value(b).data()) {
            *e += bias;
        }
        assert_eq!(g.value(out), &expected);
    }

    #[test]
    fn inference_gate_is_deterministic() {
        let noise = GateNoise {
            scale: 0.5,
            training: false,
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let (x, s, w, b) = gate_fixture(&mut g);
            let out = compute_gate(&mut g, x, s, w, b, noise, &mut rng).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn noise_std_scales_with_expert_count() {
        let noise = GateNoise {
            scale: 0.01,
            training: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = noise.sample(25_000, 4, &mut rng).unwrap().unwrap();
        let n = draws.len() as f64;
        let mean = draws.data().iter().sum::<f64>() / n;
        let var = draws.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        assert!((sd - 0.04).abs() / 0.04 < 0.05, "sd = {sd}");
    }

    #[test]
    fn negative_noise_scale_rejected() {
        let noise = GateNoise {
            scale: -1.0,
            training: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(noise.sample(1, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn trace_lines_round_trip() {
        let rec = SelectionTraceRecord {
            step: 3,
            kind: LayerKind::Task,
            layer: 1,
            instance: 0,
            branch: 1,
            specific: vec![2],
            shared: vec![0],
            specific_scores: vec![-1.0, -0.5, -0.1],
            shared_scores: vec![-0.01, -0.3, -0.2],
        };
        let mut buf = Vec::new();
        append_trace(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let back = read_trace(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
    }
}
