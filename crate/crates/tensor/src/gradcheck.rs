//! Central finite-difference gradient verification.

use crate::{Graph, ParamStore, Tensor, TensorError, Var};

/// Step size and tolerance for [`check_inputs`] / [`check_params`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub what: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, cfg: &GradCheck, what: &str, element: usize, analytic: f64, numeric: f64) {
        let rel_err = cfg.relative_error(analytic, numeric);
        self.checked += 1;
        let m = Mismatch {
            what: what.to_string(),
            element,
            analytic,
            numeric,
            rel_err,
        };
        if rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel_err);
            self.worst = Some(m.clone());
        }
        // Negated so a NaN error counts as a failure.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(rel_err < cfg.tol) {
            self.failures.push(m);
        }
    }
}

/// Checks the gradient of `build` with respect to each of `inputs`.
pub fn check_inputs<F>(cfg: &GradCheck, inputs: &[Tensor], build: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.gradients(loss)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for e in 0..work[k].numel() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + cfg.h;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - cfg.h;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            report.record(cfg, &format!("input {k}"), e, analytic.data()[e], numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of `build` with respect to every parameter in `store`.
/// The store's gradients are zeroed before and after.
pub fn check_params<F, E>(cfg: &GradCheck, store: &mut ParamStore, build: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();
    for (id, an) in ids.into_iter().zip(analytic) {
        let name = store.get(id).name.clone();
        for e in 0..an.numel() {
            let orig = store.get(id).value.data()[e];
            let mut eval_at = |x: f64| -> Result<f64, E> {
                store.get_mut(id).value.data_mut()[e] = x;
                let mut g = Graph::new();
                let loss = build(&mut g, store)?;
                Ok(g.value(loss).item())
            };
            let up = eval_at(orig + cfg.h)?;
            let down = eval_at(orig - cfg.h)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            report.record(cfg, &name, e, an.data()[e], numeric);
        }
    }
    Ok(report)
}
