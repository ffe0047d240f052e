//! Group-based memory attention: scores each target region by how poorly it
//! matches the regions of the similar images, and re-weights the target's
//! memory rows accordingly.
//!
//! For target memory `M_0` and similar memories `M_1..M_K`:
//! `R_k = cos(M_k rows, M_0 rows)`, `R̃_k = max over rows of R_k`,
//! `D = softmax(-(1/K) Σ_k R̃_k)`, `A = ω·D + b`, `M' = diag(A)·M_0`.

use groupcap_tensor::{Constraint, Graph, ParamId, ParamStore, Tensor, Var};
use serde::Serialize;

use crate::{Error, Result};

pub const OMEGA_INIT: f64 = 1.0;
pub const BIAS_INIT: f64 = 0.5;

/// Handles of the two global nonnegative scalars `ω` and `b`.
#[derive(Clone, Copy, Debug)]
pub struct GmaParams {
    pub omega: ParamId,
    pub bias: ParamId,
}

impl GmaParams {
    pub fn register(store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            omega: store.add("gma.omega", Tensor::vector(vec![OMEGA_INIT]), Constraint::NonNegative)?,
            bias: store.add("gma.bias", Tensor::vector(vec![BIAS_INIT]), Constraint::NonNegative)?,
        })
    }

    pub fn values(&self, store: &ParamStore) -> (f64, f64) {
        (store.value(self.omega).item(), store.value(self.bias).item())
    }
}

/// Graph nodes of one attention evaluation.
#[derive(Clone, Debug)]
pub struct GmaVars {
    pub similarity: Vec<Var>,
    pub summary: Vec<Var>,
    pub distinctiveness: Var,
    pub attention: Var,
    pub weighted_memory: Var,
}

/// `cos(M_k row i, M_0 row j)` as an `N_k × N_0` node. Zero rows give 0.
pub fn similarity_node(g: &mut Graph, m0: Var, mk: Var) -> Result<Var> {
    if g.shape(m0).len() != 2 || g.shape(mk).len() != 2 || g.shape(m0)[1] != g.shape(mk)[1] {
        return Err(Error::Shape(format!(
            "similarity needs equal-width matrices, got {:?} and {:?}",
            g.shape(m0),
            g.shape(mk)
        )));
    }
    let zero_rows = |t: &Tensor| t.to_rows().iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
    let (z0, zk) = (zero_rows(g.value(m0)), zero_rows(g.value(mk)));
    if z0 + zk > 0 {
        log::debug!("similarity over {} zero-norm memory rows set to 0", z0 + zk);
    }
    let n0 = g.normalize_rows(m0)?;
    let nk = g.normalize_rows(mk)?;
    let r = g.matmul_t(nk, n0)?;
    Ok(g.clamp(r, -1.0, 1.0))
}

/// Builds `R_k`, `R̃_k`, `D`, `A` and `M'` for a target memory and its group.
pub fn attention_graph(g: &mut Graph, m0: Var, others: &[Var], omega: Var, bias: Var) -> Result<GmaVars> {
    if others.is_empty() {
        return Err(Error::Config("memory attention needs at least one similar image".into()));
    }
    let mut similarity = Vec::with_capacity(others.len());
    let mut summary = Vec::with_capacity(others.len());
    for &mk in others {
        let r = similarity_node(g, m0, mk)?;
        similarity.push(r);
        summary.push(g.max_axis0(r)?);
    }
    let total = g.add_all(&summary)?;
    let neg_mean = g.scale(total, -1.0 / others.len() as f64);
    let distinctiveness = g.softmax(neg_mean, 0)?;
    let scaled = g.mul_scalar(distinctiveness, omega)?;
    let attention = g.add_scalar(scaled, bias)?;
    let weighted_memory = apply_node(g, m0, attention)?;
    Ok(GmaVars {
        similarity,
        summary,
        distinctiveness,
        attention,
        weighted_memory,
    })
}

/// `M'` row `j` = `A[j] · M_0` row `j`.
pub fn apply_node(g: &mut Graph, m0: Var, attention: Var) -> Result<Var> {
    let rows = g.shape(m0).first().copied().unwrap_or(0);
    if g.value(attention).numel() != rows || g.shape(attention).len() != 1 {
        return Err(Error::Shape(format!(
            "attention of shape {:?} for {rows} memory rows",
            g.shape(attention)
        )));
    }
    Ok(g.scale_rows(m0, attention)?)
}

/// Values of one attention evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmaResult {
    /// `R_k`, one `N_k × N_0` matrix (as rows) per similar image.
    pub similarity: Vec<Vec<Vec<f64>>>,
    /// `R̃_k`, one length-`N_0` map per similar image.
    pub summary: Vec<Vec<f64>>,
    pub distinctiveness: Vec<f64>,
    pub attention: Vec<f64>,
    pub weighted_memory: Vec<Vec<f64>>,
}

impl GmaResult {
    fn read(g: &Graph, v: &GmaVars) -> Self {
        Self {
            similarity: v.similarity.iter().map(|&r| g.value(r).to_rows()).collect(),
            summary: v.summary.iter().map(|&s| g.value(s).data().to_vec()).collect(),
            distinctiveness: g.value(v.distinctiveness).data().to_vec(),
            attention: g.value(v.attention).data().to_vec(),
            weighted_memory: g.value(v.weighted_memory).to_rows(),
        }
    }

    /// Index of the most attended target region (first on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.attention)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn similarity_matrix(target: &Tensor, similar: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(target.clone()), g.constant(similar.clone()));
    let r = similarity_node(&mut g, a, b)?;
    Ok(g.value(r).clone())
}

pub fn distinctive_attention(target: &Tensor, similar: &[Tensor], omega: f64, bias: f64) -> Result<GmaResult> {
    let mut g = Graph::new();
    let m0 = g.constant(target.clone());
    let others: Vec<Var> = similar.iter().map(|m| g.constant(m.clone())).collect();
    let w = g.constant(Tensor::vector(vec![omega]));
    let b = g.constant(Tensor::vector(vec![bias]));
    let vars = attention_graph(&mut g, m0, &others, w, b)?;
    Ok(GmaResult::read(&g, &vars))
}

pub fn apply_attention(target: &Tensor, attention: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let m0 = g.constant(target.clone());
    let a = g.constant(Tensor::vector(attention.to_vec()));
    let out = apply_node(&mut g, m0, a)?;
    Ok(g.value(out).clone())
}

pub(crate) fn read_result(g: &Graph, v: &GmaVars) -> GmaResult {
    GmaResult::read(g, v)
}
