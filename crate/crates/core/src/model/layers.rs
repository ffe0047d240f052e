use groupcap_tensor::{Graph, ParamId, ParamStore, Var};

use super::{Init, LN_EPS};
use crate::Result;

/// Multi-head attention with bias-free projections.
pub(super) struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

impl Attention {
    pub(super) fn new(init: &mut Init<'_>, prefix: &str, dm: usize) -> Result<Self> {
        Ok(Self {
            q: init.weight(&format!("{prefix}.q"), dm, dm)?,
            k: init.weight(&format!("{prefix}.k"), dm, dm)?,
            v: init.weight(&format!("{prefix}.v"), dm, dm)?,
            o: init.weight(&format!("{prefix}.o"), dm, dm)?,
        })
    }

    /// Queries from `x`, keys and values from `ctx`; `mask` is added to the
    /// scores before the softmax.
    pub(super) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: Var,
        heads: usize,
        mask: Option<Var>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            g.param(store, self.q),
            g.param(store, self.k),
            g.param(store, self.v),
            g.param(store, self.o),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(ctx, wk)?;
        let v = g.matmul(ctx, wv)?;
        let dm = g.shape(q)[1];
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_t(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s, 1)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok(g.matmul(cat, wo)?)
    }
}

pub(super) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub(super) fn new(init: &mut Init<'_>, prefix: &str, dm: usize) -> Result<Self> {
        Ok(Self {
            gain: init.fill(&format!("{prefix}.g"), dm, 1.0)?,
            bias: init.fill(&format!("{prefix}.b"), dm, 0.0)?,
        })
    }

    pub(super) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// `relu(x W1 + b1) W2 + b2`.
pub(super) struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub(super) fn new(init: &mut Init<'_>, prefix: &str, dm: usize, dff: usize) -> Result<Self> {
        Ok(Self {
            w1: init.weight(&format!("{prefix}.w1"), dm, dff)?,
            b1: init.fill(&format!("{prefix}.b1"), dff, 0.0)?,
            w2: init.weight(&format!("{prefix}.w2"), dff, dm)?,
            b2: init.fill(&format!("{prefix}.b2"), dm, 0.0)?,
        })
    }

    pub(super) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        Ok(g.add_row(o, b2)?)
    }
}
