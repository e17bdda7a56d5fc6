//! Representative vectors, Input/Process/Output projection heads,
//! intra-modality aggregation and inter-modality fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artefacts::{Composition, ElementKind, Modality};
use crate::error::{Error, Result};
use crate::numerics::{LinearParams, Matrix, Var};
use crate::params::{Graph, ParamStore, TrainMask};
use crate::stack::{g_encode, EncoderParams};

/// Pipeline stage a signal triple was read at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Artefact,
    Intra,
    Intention,
}

/// Input, Process and Output roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Process,
    Output,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Input, Role::Process, Role::Output];

    /// Short key used in parameter names.
    pub fn key(self) -> &'static str {
        match self {
            Role::Input => "i",
            Role::Process => "p",
            Role::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTriple {
    pub i: Vec<f64>,
    pub p: Vec<f64>,
    pub o: Vec<f64>,
    pub stage: Stage,
}

impl SignalTriple {
    pub fn new(i: Vec<f64>, p: Vec<f64>, o: Vec<f64>, stage: Stage) -> Result<Self> {
        if i.len() != p.len() || i.len() != o.len() {
            return Err(Error::shape("SignalTriple", "components differ in width"));
        }
        if i.iter().chain(&p).chain(&o).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SignalTriple"));
        }
        Ok(SignalTriple { i, p, o, stage })
    }

    pub fn component(&self, role: Role) -> &[f64] {
        match role {
            Role::Input => &self.i,
            Role::Process => &self.p,
            Role::Output => &self.o,
        }
    }

    pub fn dim(&self) -> usize {
        self.i.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeadSet {
    pub input: LinearParams,
    pub process: LinearParams,
    pub output: LinearParams,
}

impl ProjectionHeadSet {
    pub fn identity(d: usize) -> Self {
        ProjectionHeadSet {
            input: LinearParams::identity(d),
            process: LinearParams::identity(d),
            output: LinearParams::identity(d),
        }
    }

    pub fn head(&self, role: Role) -> &LinearParams {
        match role {
            Role::Input => &self.input,
            Role::Process => &self.process,
            Role::Output => &self.output,
        }
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        for role in Role::ALL {
            store.insert_linear(&format!("{prefix}.{}", role.key()), self.head(role));
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(ProjectionHeadSet {
            input: store.linear(&format!("{prefix}.i"))?,
            process: store.linear(&format!("{prefix}.p"))?,
            output: store.linear(&format!("{prefix}.o"))?,
        })
    }
}

/// How to read the representative column of an encoded artefact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RepLayout {
    /// `[CLS]` in column 0.
    Text,
    /// Element-wise max over all columns.
    Image,
    /// Mean of per-element representatives.
    Document(Composition),
}

pub fn g_rep(g: &mut Graph, h: Var, layout: &RepLayout) -> Result<Var> {
    let cols = g.value(h)?.cols();
    if cols == 0 {
        return Err(Error::Empty("rep_vector"));
    }
    match layout {
        RepLayout::Text => g.slice_cols(h, 0, 1),
        RepLayout::Image => g.max_pool_cols(h),
        RepLayout::Document(comp) => {
            if comp.elements.is_empty() {
                return Err(Error::Data("document composition has no elements".into()));
            }
            if comp.len != cols {
                return Err(Error::shape("rep_vector", format!("composition covers {} of {cols} columns", comp.len)));
            }
            let mut reps = Vec::with_capacity(comp.elements.len());
            for el in &comp.elements {
                match el.kind {
                    ElementKind::Text => reps.push(g.slice_cols(h, el.start, 1)?),
                    ElementKind::Image => {
                        let picked = el.columns().map(|c| g.slice_cols(h, c, 1)).collect::<Result<Vec<_>>>()?;
                        let block = g.concat_cols(&picked)?;
                        reps.push(g.max_pool_cols(block)?);
                    }
                }
            }
            let all = g.concat_cols(&reps)?;
            g.mean_cols(all)
        }
    }
}

/// The three head projections of a `d × 1` representative.
pub fn g_heads(g: &mut Graph, rep: Var, prefix: &str) -> Result<[Var; 3]> {
    Ok([
        g.linear(rep, &format!("{prefix}.i"))?,
        g.linear(rep, &format!("{prefix}.p"))?,
        g.linear(rep, &format!("{prefix}.o"))?,
    ])
}

pub fn triple_value(g: &Graph, vars: &[Var; 3], stage: Stage) -> Result<SignalTriple> {
    SignalTriple::new(
        g.value(vars[0])?.col(0),
        g.value(vars[1])?.col(0),
        g.value(vars[2])?.col(0),
        stage,
    )
}

fn frozen_graph_value(store: &ParamStore, f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Matrix> {
    let mask = TrainMask::frozen();
    let mut g = Graph::new(store, &mask);
    let v = f(&mut g)?;
    Ok(g.value(v)?.clone())
}

/// Representative vector of an encoded and unified sequence.
pub fn rep_vector(h: &Matrix, layout: &RepLayout, has_cls: bool) -> Result<Vec<f64>> {
    if matches!(layout, RepLayout::Text) && !has_cls {
        return Err(Error::Data("text representative requires a [CLS] column".into()));
    }
    let store = ParamStore::new();
    let m = frozen_graph_value(&store, |g| {
        let hv = g.constant(h.clone());
        g_rep(g, hv, layout)
    })?;
    Ok(m.col(0))
}

pub fn project_signals(rep: &[f64], heads: &ProjectionHeadSet, stage: Stage) -> Result<SignalTriple> {
    let x = Matrix::column(rep)?;
    let apply = |p: &LinearParams| -> Result<Vec<f64>> { Ok(crate::numerics::linear(&x, p)?.col(0)) };
    SignalTriple::new(apply(&heads.input)?, apply(&heads.process)?, apply(&heads.output)?, stage)
}

/// Column-wise concatenation of same-modality encodings, in input order.
pub fn intra_concat(encoded: &[Matrix]) -> Result<Matrix> {
    let refs: Vec<&Matrix> = encoded.iter().collect();
    Matrix::hconcat(&refs)
}

/// Intra-modality encoder, unifier and heads for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraParams {
    pub encoder: EncoderParams,
    pub unify: LinearParams,
    pub heads: ProjectionHeadSet,
}

pub fn g_intra(g: &mut Graph, e: Var, prefix: &str, encoder: &crate::stack::StackConfig) -> Result<(Var, [Var; 3])> {
    let enc = g_encode(g, e, &format!("{prefix}.enc"), encoder)?;
    let h = g.linear(enc, &format!("{prefix}.unify"))?;
    let rep = g.max_pool_cols(h)?;
    let heads = g_heads(g, rep, &format!("{prefix}.heads"))?;
    Ok((h, heads))
}

/// Encode, unify, max-pool and project a concatenated modality block.
pub fn intra_encode_and_signal(e: &Matrix, p: &IntraParams) -> Result<(Matrix, SignalTriple)> {
    let mut store = ParamStore::new();
    p.encoder.store_into(&mut store, "x.enc");
    store.insert_linear("x.unify", &p.unify);
    p.heads.store_into(&mut store, "x.heads");
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let ev = g.constant(e.clone());
    let (h, heads) = g_intra(&mut g, ev, "x", &p.encoder.config)?;
    Ok((g.value(h)?.clone(), triple_value(&g, &heads, Stage::Intra)?))
}

/// Fusion encoder output with the modality of every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionContext {
    pub matrix: Matrix,
    pub segments: Vec<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Learned per-modality vectors added to each block before concatenation.
    pub segments: BTreeMap<Modality, Vec<f64>>,
    pub encoder: EncoderParams,
}

pub fn segment_name(prefix: &str, m: Modality) -> String {
    format!("{prefix}.seg.{m}")
}

pub fn g_fuse(
    g: &mut Graph,
    blocks: &[(Modality, Var)],
    prefix: &str,
    encoder: &crate::stack::StackConfig,
) -> Result<(Var, Vec<Modality>)> {
    if blocks.is_empty() {
        return Err(Error::Empty("fuse"));
    }
    let mut parts = Vec::with_capacity(blocks.len());
    let mut segments = Vec::new();
    for (m, h) in blocks {
        let seg = g.param(&segment_name(prefix, *m))?;
        parts.push(g.add_col(*h, seg)?);
        segments.extend(std::iter::repeat(*m).take(g.value(*h)?.cols()));
    }
    let cat = g.concat_cols(&parts)?;
    let out = g_encode(g, cat, &format!("{prefix}.fusion"), encoder)?;
    Ok((out, segments))
}

pub fn fuse(contexts: &[(Modality, Matrix)], p: &FusionParams) -> Result<FusionContext> {
    let mut store = ParamStore::new();
    for (m, v) in &p.segments {
        store.insert(segment_name("f", *m), Matrix::column(v)?);
    }
    p.encoder.store_into(&mut store, "f.fusion");
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let blocks = contexts
        .iter()
        .map(|(m, h)| (*m, g.constant(h.clone())))
        .collect::<Vec<_>>();
    let (out, segments) = g_fuse(&mut g, &blocks, "f", &p.encoder.config)?;
    Ok(FusionContext {
        matrix: g.value(out)?.clone(),
        segments,
    })
}
