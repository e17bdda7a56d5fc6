//! Single-head, masked, multi-head and cross attention in the `d × n` layout.
//!
//! Logits are `A = Kᵀ Q / √d_k`, an `m × n` matrix with one row per key and
//! one column per query. Softmax runs down each column, so every query's
//! weights over the keys sum to one and each output column is a convex
//! combination of value columns. The causal mask lets query `t` see keys
//! `0..=t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Axis, Matrix, Var};
use crate::params::{Graph, Init, ParamStore, TrainMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let p = AttentionParams { wq, wk, wv };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.wq.rows() != self.wk.rows() {
            return Err(Error::shape("AttentionParams", "Wq and Wk must share d_k"));
        }
        if self.wq.cols() != self.wk.cols() || self.wq.cols() != self.wv.cols() {
            return Err(Error::shape("AttentionParams", "projections disagree on the model width"));
        }
        Ok(())
    }

    pub fn init(seed: u64, d: usize, d_k: usize, d_v: usize) -> Self {
        let mut store = ParamStore::new();
        init_head(&Init::new(seed), &mut store, "h", d, d_k, d_v);
        AttentionParams::from_store(&store, "h").expect("just initialized")
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.wq"), self.wq.clone());
        store.insert(format!("{prefix}.wk"), self.wk.clone());
        store.insert(format!("{prefix}.wv"), self.wv.clone());
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        AttentionParams::new(
            store.get(&format!("{prefix}.wq"))?.clone(),
            store.get(&format!("{prefix}.wk"))?.clone(),
            store.get(&format!("{prefix}.wv"))?.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadParams {
    pub heads: Vec<AttentionParams>,
    pub wo: Matrix,
}

impl MultiHeadParams {
    pub fn new(heads: Vec<AttentionParams>, wo: Matrix) -> Result<Self> {
        let p = MultiHeadParams { heads, wo };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let first = self.heads.first().ok_or(Error::Empty("MultiHeadParams"))?;
        for h in &self.heads {
            h.validate()?;
            if h.wq.shape() != first.wq.shape() || h.wv.shape() != first.wv.shape() {
                return Err(Error::shape("MultiHeadParams", "heads differ in shape"));
            }
        }
        let d_v = first.wv.rows() * self.heads.len();
        if self.wo.shape() != (d_v, d_v) {
            return Err(Error::shape(
                "MultiHeadParams",
                format!("Wo is {:?}, expected {d_v}x{d_v}", self.wo.shape()),
            ));
        }
        Ok(())
    }

    /// `H` heads over width `d`, each with `d / H` key and value rows.
    pub fn init(seed: u64, d: usize, n_heads: usize) -> Result<Self> {
        check_heads(d, n_heads)?;
        let mut store = ParamStore::new();
        init_multi_head(&Init::new(seed), &mut store, "mh", d, n_heads);
        MultiHeadParams::from_store(&store, "mh", n_heads)
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        for (j, h) in self.heads.iter().enumerate() {
            h.store_into(store, &format!("{prefix}.h{j}"));
        }
        store.insert(format!("{prefix}.wo"), self.wo.clone());
    }

    pub fn from_store(store: &ParamStore, prefix: &str, n_heads: usize) -> Result<Self> {
        let heads = (0..n_heads)
            .map(|j| AttentionParams::from_store(store, &format!("{prefix}.h{j}")))
            .collect::<Result<Vec<_>>>()?;
        MultiHeadParams::new(heads, store.get(&format!("{prefix}.wo"))?.clone())
    }
}

pub(crate) fn check_heads(d: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
    }
    Ok(())
}

pub fn init_head(init: &Init, store: &mut ParamStore, prefix: &str, d: usize, d_k: usize, d_v: usize) {
    for (name, rows) in [("wq", d_k), ("wk", d_k), ("wv", d_v)] {
        let full = format!("{prefix}.{name}");
        store.insert(&full, init.matrix(&full, rows, d));
    }
}

pub fn init_multi_head(init: &Init, store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize) {
    let d_head = d / n_heads;
    for j in 0..n_heads {
        init_head(init, store, &format!("{prefix}.h{j}"), d, d_head, d_head);
    }
    let wo = format!("{prefix}.wo");
    store.insert(&wo, init.matrix(&wo, d, d));
}

/// One attention head recorded on the graph: queries from `x`, keys and
/// values from `ctx`.
pub fn g_attention(g: &mut Graph, x: Var, ctx: Var, prefix: &str, causal: bool) -> Result<Var> {
    let wq = g.param(&format!("{prefix}.wq"))?;
    let wk = g.param(&format!("{prefix}.wk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    let d_k = g.value(wq)?.rows();
    let q = g.matmul(wq, x)?;
    let k = g.matmul(wk, ctx)?;
    let v = g.matmul(wv, ctx)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(kt, q)?;
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let weights = g.softmax_masked(logits, Axis::Cols, causal)?;
    g.matmul(v, weights)
}

pub fn g_multi_head(
    g: &mut Graph,
    x: Var,
    ctx: Var,
    prefix: &str,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let heads = (0..n_heads)
        .map(|j| g_attention(g, x, ctx, &format!("{prefix}.h{j}"), causal))
        .collect::<Result<Vec<_>>>()?;
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_rows(&heads)? };
    let wo = g.param(&format!("{prefix}.wo"))?;
    g.matmul(wo, cat)
}

fn run(store: &ParamStore, f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Matrix> {
    let mask = TrainMask::frozen();
    let mut g = Graph::new(store, &mask);
    let out = f(&mut g)?;
    Ok(g.value(out)?.clone())
}

fn check_input(x: &Matrix, p: &AttentionParams, what: &'static str) -> Result<()> {
    p.validate()?;
    if x.rows() != p.wq.cols() {
        return Err(Error::shape(what, format!("input has {} rows, projections expect {}", x.rows(), p.wq.cols())));
    }
    if x.cols() == 0 {
        return Err(Error::Empty(what));
    }
    Ok(())
}

pub fn self_attention(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_input(x, p, "self_attention")?;
    let mut store = ParamStore::new();
    p.store_into(&mut store, "a");
    run(&store, |g| {
        let xv = g.constant(x.clone());
        g_attention(g, xv, xv, "a", false)
    })
}

pub fn masked_self_attention(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_input(x, p, "masked_self_attention")?;
    let mut store = ParamStore::new();
    p.store_into(&mut store, "a");
    run(&store, |g| {
        let xv = g.constant(x.clone());
        g_attention(g, xv, xv, "a", true)
    })
}

/// Queries from `x` (`d × n`), keys and values from `y` (`d × m`).
pub fn cross_attention(x: &Matrix, y: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_input(x, p, "cross_attention")?;
    check_input(y, p, "cross_attention")?;
    let mut store = ParamStore::new();
    p.store_into(&mut store, "a");
    run(&store, |g| {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        g_attention(g, xv, yv, "a", false)
    })
}

pub fn multi_head(x: &Matrix, p: &MultiHeadParams, masked: bool) -> Result<Matrix> {
    p.validate()?;
    check_input(x, &p.heads[0], "multi_head")?;
    let mut store = ParamStore::new();
    p.store_into(&mut store, "mh");
    run(&store, |g| {
        let xv = g.constant(x.clone());
        g_multi_head(g, xv, xv, "mh", p.heads.len(), masked)
    })
}

pub fn multi_head_cross(x: &Matrix, y: &Matrix, p: &MultiHeadParams) -> Result<Matrix> {
    p.validate()?;
    check_input(x, &p.heads[0], "multi_head_cross")?;
    check_input(y, &p.heads[0], "multi_head_cross")?;
    let mut store = ParamStore::new();
    p.store_into(&mut store, "mh");
    run(&store, |g| {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        g_multi_head(g, xv, yv, "mh", p.heads.len(), false)
    })
}
