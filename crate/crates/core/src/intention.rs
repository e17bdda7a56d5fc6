//! Autoregressive intention generation with the stopping head, the
//! redundancy criterion and the hard step limit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, linear, mlp, Activation, Axis, LinearParams, Matrix, MlpSpec};
use crate::signals::{ProjectionHeadSet, SignalTriple, Stage};

/// The stopping head accepts a step iff `P(accept)` exceeds this.
pub const HEAD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intention {
    pub step: usize,
    pub i: Vec<f64>,
    pub p: Vec<f64>,
    pub o: Vec<f64>,
}

impl Intention {
    pub fn from_triple(step: usize, t: SignalTriple) -> Self {
        Intention { step, i: t.i, p: t.p, o: t.o }
    }

    pub fn triple(&self) -> SignalTriple {
        SignalTriple {
            i: self.i.clone(),
            p: self.p.clone(),
            o: self.o.clone(),
            stage: Stage::Intention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Head,
    Redundancy,
    HardLimit,
}

/// What happened at one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: usize,
    pub accept_prob: f64,
    pub head_accept: bool,
    /// Highest mean cosine similarity against earlier intentions, if the
    /// redundancy gate ran.
    pub max_similarity: Option<f64>,
    pub redundancy_pass: Option<bool>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionSet {
    pub intentions: Vec<Intention>,
    pub stop_reason: StopReason,
    pub gate_log: Vec<GateRecord>,
}

impl IntentionSet {
    pub fn len(&self) -> usize {
        self.intentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intentions.is_empty()
    }

    pub fn triples(&self) -> Vec<SignalTriple> {
        self.intentions.iter().map(Intention::triple).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingConfig {
    pub tau_sim: f64,
    pub t_max: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig { tau_sim: 0.9, t_max: 5 }
    }
}

impl StoppingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_sim) {
            return Err(Error::Config("tau_sim must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean of the three component cosines (zero-norm components count as 0).
pub fn mean_similarity(a: &Intention, b: &Intention) -> f64 {
    (cosine(&a.i, &b.i) + cosine(&a.p, &b.p) + cosine(&a.o, &b.o)) / 3.0
}

/// Returns `(continue, highest similarity)`; continues iff every earlier
/// intention is strictly below `tau_sim`.
pub fn redundancy_check(candidate: &Intention, history: &[Intention], tau_sim: f64) -> (bool, Option<f64>) {
    let best = history
        .iter()
        .map(|h| mean_similarity(candidate, h))
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    (best.map_or(true, |s| s < tau_sim), best)
}

/// Stopping-head MLP and its decision. Step 1 is always accepted with
/// probability reported as 1.
pub fn stopping_head(s_last: &[f64], head: &MlpSpec, step: usize) -> Result<(bool, f64)> {
    if step <= 1 {
        return Ok((true, 1.0));
    }
    let logits = mlp(&Matrix::column(s_last)?, head)?;
    if logits.shape() != (2, 1) {
        return Err(Error::shape("stopping_head", "head must output two logits"));
    }
    let p = crate::numerics::softmax(&logits, Axis::Cols)?.get(1, 0);
    Ok((p > HEAD_THRESHOLD, p))
}

/// `γ̃ = W_γ s + b_γ` followed by the three intention heads.
pub fn project_intention(s_last: &[f64], gamma: &LinearParams, heads: &ProjectionHeadSet) -> Result<(Vec<f64>, SignalTriple)> {
    let g = linear(&Matrix::column(s_last)?, gamma)?.col(0);
    let triple = crate::signals::project_signals(&g, heads, Stage::Intention)?;
    Ok((g, triple))
}

pub const STOP_ACTIVATIONS: [Activation; 2] = [Activation::Relu, Activation::Identity];

/// The pieces of one decoding step that the generation loop needs. The
/// model implements it on the gradient tape; tests implement it with
/// hand-written stubs.
pub trait Stepper {
    type Handle: Clone;

    /// The `[BOS]` column that seeds the decoded sequence.
    fn bos(&mut self) -> Result<Self::Handle>;
    /// Last output column of the decoder run over `sequence`.
    fn decode_last(&mut self, sequence: &[Self::Handle]) -> Result<Self::Handle>;
    fn project(&mut self, s_last: &Self::Handle) -> Result<Self::Handle>;
    /// `P(accept)` for a step after the first.
    fn accept_prob(&mut self, s_last: &Self::Handle) -> Result<f64>;
    fn heads(&mut self, gamma: &Self::Handle) -> Result<[Self::Handle; 3]>;
    fn read(&self, h: &Self::Handle) -> Result<Vec<f64>>;
}

/// Full record of one generation.
#[derive(Debug, Clone)]
pub struct Trace<H> {
    pub set: IntentionSet,
    /// Triples of accepted intentions, in order.
    pub accepted: Vec<[H; 3]>,
    /// Head probability per consulted step (1 for the forced first step).
    pub probs: Vec<f64>,
}

pub fn generate_with<S: Stepper>(stepper: &mut S, cfg: &StoppingConfig) -> Result<Trace<S::Handle>> {
    cfg.validate()?;
    let mut sequence = vec![stepper.bos()?];
    let mut intentions: Vec<Intention> = Vec::new();
    let mut accepted = Vec::new();
    let mut probs = Vec::new();
    let mut gate_log = Vec::new();
    let mut t = 1;
    let stop_reason = loop {
        if t > cfg.t_max {
            break StopReason::HardLimit;
        }
        let s_last = stepper.decode_last(&sequence)?;
        let gamma = stepper.project(&s_last)?;
        let (head_accept, p) = if t == 1 {
            (true, 1.0)
        } else {
            let p = stepper.accept_prob(&s_last)?;
            (p > HEAD_THRESHOLD, p)
        };
        probs.push(p);
        let mut record = GateRecord {
            step: t,
            accept_prob: p,
            head_accept,
            max_similarity: None,
            redundancy_pass: None,
            accepted: false,
        };
        if !head_accept {
            gate_log.push(record);
            break StopReason::Head;
        }
        let heads = stepper.heads(&gamma)?;
        let candidate = Intention {
            step: t,
            i: stepper.read(&heads[0])?,
            p: stepper.read(&heads[1])?,
            o: stepper.read(&heads[2])?,
        };
        if t > 1 {
            let (pass, sim) = redundancy_check(&candidate, &intentions, cfg.tau_sim);
            record.max_similarity = sim;
            record.redundancy_pass = Some(pass);
            if !pass {
                gate_log.push(record);
                break StopReason::Redundancy;
            }
        }
        record.accepted = true;
        gate_log.push(record);
        intentions.push(candidate);
        accepted.push(heads);
        sequence.push(gamma);
        t += 1;
    };
    Ok(Trace {
        set: IntentionSet { intentions, stop_reason, gate_log },
        accepted,
        probs,
    })
}
