//! Training plans for the three stages, plain SGD with batch size 1 in
//! corpus order, freeze verification and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artefacts::{Artefact, Modality, SpatialEmbedder};
use crate::config::{Optimizer, RunConfig};
use crate::corpus::{Corpus, CODE_VERSION};
use crate::error::{Error, Result};
use crate::intention::StoppingConfig;
use crate::losses::{
    contrastive_loss, coverage_tables, head_loss, intention_loss, predict_tables, sequence_loss, signal_loss,
    ClassifierSet, IntentionLoss, LossWeights, SignalObjective, SignalTables,
};
use crate::model::{stage1_group, stage2_group, Model, PHASE2};
use crate::numerics::Matrix;
use crate::params::{Graph, ParamStore, TrainMask};
use crate::signals::{SignalTriple, Stage};

pub const CHECKPOINT_FORMAT: &str = "wintent-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "1.1")]
    Stage1,
    #[serde(rename = "1.2")]
    Stage2,
    #[serde(rename = "2")]
    Intention,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Stage1 => "1.1",
            Phase::Stage2 => "1.2",
            Phase::Intention => "2",
        }
    }

    /// Groups the regimen lets this phase update.
    pub fn trainable_groups(self) -> Vec<String> {
        match self {
            Phase::Stage1 => Modality::ALL.iter().map(|m| stage1_group(*m)).collect(),
            Phase::Stage2 => Modality::ALL.iter().map(|m| stage2_group(*m)).collect(),
            Phase::Intention => vec![PHASE2.to_string()],
        }
    }

    fn requires(self) -> Option<Phase> {
        match self {
            Phase::Stage1 => None,
            Phase::Stage2 => Some(Phase::Stage1),
            Phase::Intention => Some(Phase::Stage2),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1.1" => Ok(Phase::Stage1),
            "1.2" => Ok(Phase::Stage2),
            "2" => Ok(Phase::Intention),
            other => Err(Error::Config(format!("unknown phase `{other}` (expected 1.1, 1.2 or 2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phase: Phase,
    pub corpus: Option<String>,
    pub epochs: usize,
    pub step_size: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub objective: SignalObjective,
    pub seed: u64,
    pub mask: TrainMask,
    pub weights: LossWeights,
    pub stopping: StoppingConfig,
}

impl TrainPlan {
    /// The regimen's plan for `phase` under `cfg`.
    pub fn for_phase(phase: Phase, cfg: &RunConfig) -> Self {
        let epochs = match phase {
            Phase::Stage1 => cfg.train.epochs_stage1,
            Phase::Stage2 => cfg.train.epochs_stage2,
            Phase::Intention => cfg.train.epochs_phase2,
        };
        TrainPlan {
            phase,
            corpus: None,
            epochs,
            step_size: cfg.train.step_size,
            optimizer: cfg.train.optimizer,
            objective: cfg.train.objective,
            seed: cfg.seed,
            mask: TrainMask::groups(phase.trainable_groups()),
            weights: cfg.losses.clone(),
            stopping: cfg.stopping.clone(),
        }
    }

    /// Same plan with every group frozen.
    pub fn frozen(mut self) -> Self {
        self.mask = TrainMask::frozen();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.phase.trainable_groups();
        if let Some(g) = self.mask.trainable_groups().iter().find(|g| !allowed.contains(g)) {
            return Err(Error::Config(format!("phase {} may not train group {g}", self.phase)));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::Config("step_size must be finite and non-negative".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.stopping.validate()
    }
}

/// Optimizer state for one training run.
struct Updater {
    rule: Optimizer,
    lr: f64,
    step: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Updater {
    fn new(plan: &TrainPlan) -> Self {
        Updater { rule: plan.optimizer, lr: plan.step_size, step: 0, moments: BTreeMap::new() }
    }

    fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        if grads.is_empty() || self.lr == 0.0 {
            return Ok(());
        }
        match self.rule {
            Optimizer::Sgd => params.sgd_step(grads, self.lr),
            Optimizer::Adam { beta1, beta2, epsilon } => {
                self.step += 1;
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let mut deltas = BTreeMap::new();
                for (name, g) in grads {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
                    *m = m.zip_map(g, "adam", |a, b| beta1 * a + (1.0 - beta1) * b)?;
                    *v = v.zip_map(g, "adam", |a, b| beta2 * a + (1.0 - beta2) * b * b)?;
                    deltas.insert(name.clone(), m.zip_map(v, "adam", |a, b| (a / c1) / ((b / c2).sqrt() + epsilon))?);
                }
                params.sgd_step(&deltas, self.lr)
            }
        }
    }
}

/// Metrics after one epoch, evaluated with the updated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub modality: Option<Modality>,
    pub epoch: usize,
    /// Mean training objective over the epoch's updates.
    pub train_loss: f64,
    /// Mean bounded signal loss at evaluation (stage 1) or mean total
    /// intention loss (phase 2).
    pub eval_loss: f64,
    /// Fraction of items whose every count class is predicted exactly.
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intention: Option<IntentionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionMetrics {
    pub loss: IntentionLoss,
    pub coverage: f64,
    pub mean_length: f64,
    /// Fraction of samples whose generation stopped right after the
    /// ground-truth number of intentions.
    pub stop_accuracy: f64,
}

/// One completed training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub plan: TrainPlan,
    pub frozen_hashes_before: BTreeMap<String, String>,
    pub frozen_hashes_after: BTreeMap<String, String>,
    pub epochs: Vec<EpochMetrics>,
}

/// How parameters were initialized; training itself draws no randomness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrngRecord {
    pub algorithm: String,
    pub seed: u64,
    pub stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub code_version: String,
    pub config: RunConfig,
    pub prng: PrngRecord,
    /// Stage tag per parameter group.
    pub stages: BTreeMap<String, String>,
    pub group_hashes: BTreeMap<String, String>,
    pub history: Vec<PhaseRecord>,
    pub model: Model,
}

fn stage_tag(group: &str) -> &'static str {
    if group.starts_with("s11.") {
        "1.1"
    } else if group.starts_with("s12.") {
        "1.2"
    } else if group == PHASE2 {
        "2"
    } else {
        "fixed"
    }
}

impl Checkpoint {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model.clone(), cfg.seed)?;
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            code_version: CODE_VERSION.into(),
            config: cfg.clone(),
            prng: PrngRecord {
                algorithm: "chacha8".into(),
                seed: cfg.seed,
                stream: "one stream per parameter, seeded with seed xor fnv1a(name)".into(),
            },
            stages: model.params.groups().iter().map(|g| (g.clone(), stage_tag(g).to_string())).collect(),
            group_hashes: model.params.group_hashes(),
            history: Vec::new(),
            model,
        })
    }

    pub fn completed(&self, phase: Phase) -> bool {
        self.history.iter().any(|r| r.plan.phase == phase)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("{}: unsupported checkpoint format", path.display())));
        }
        Ok(ck)
    }
}

/// Runs `plan` starting from `start`.
pub fn train(start: &Checkpoint, corpus: &Corpus, plan: &TrainPlan) -> Result<Checkpoint> {
    plan.validate()?;
    if let Some(req) = plan.phase.requires() {
        if !start.completed(req) {
            return Err(Error::Data(format!("phase {} needs a checkpoint that completed phase {req}", plan.phase)));
        }
    }
    corpus.validate(&start.model.config.family)?;
    let mut model = start.model.clone();
    let frozen: Vec<String> = model
        .params
        .groups()
        .into_iter()
        .filter(|g| !plan.mask.trainable_groups().contains(g))
        .collect();
    let hashes = |p: &ParamStore| -> BTreeMap<String, String> { frozen.iter().map(|g| (g.clone(), p.group_hash(g))).collect() };
    let before = hashes(&model.params);
    let epochs = match plan.phase {
        Phase::Stage1 => run_stage1(&mut model, corpus, plan)?,
        Phase::Stage2 => run_stage2(&mut model, corpus, plan)?,
        Phase::Intention => run_phase2(&mut model, corpus, plan)?,
    };
    let after = hashes(&model.params);
    if before != after {
        return Err(Error::Data("a frozen parameter group changed during training".into()));
    }
    let mut out = start.clone();
    out.model = model;
    out.group_hashes = out.model.params.group_hashes();
    out.history.push(PhaseRecord {
        plan: plan.clone(),
        frozen_hashes_before: before,
        frozen_hashes_after: after,
        epochs,
    });
    Ok(out)
}

pub fn train_phase1_stage1(start: &Checkpoint, corpus: &Corpus, plan: &TrainPlan) -> Result<Checkpoint> {
    expect_phase(plan, Phase::Stage1)?;
    train(start, corpus, plan)
}

pub fn train_phase1_stage2(start: &Checkpoint, corpus: &Corpus, plan: &TrainPlan) -> Result<Checkpoint> {
    expect_phase(plan, Phase::Stage2)?;
    train(start, corpus, plan)
}

pub fn train_phase2(start: &Checkpoint, corpus: &Corpus, plan: &TrainPlan) -> Result<Checkpoint> {
    expect_phase(plan, Phase::Intention)?;
    train(start, corpus, plan)
}

fn expect_phase(plan: &TrainPlan, phase: Phase) -> Result<()> {
    if plan.phase != phase {
        return Err(Error::Config(format!("plan is for phase {}, not {phase}", plan.phase)));
    }
    Ok(())
}

/// One update from the loss built by `f`; returns the loss value.
fn update(
    model: &mut Model,
    mask: &TrainMask,
    opt: &mut Updater,
    f: impl FnOnce(&mut Graph, &Model) -> Result<crate::numerics::Var>,
) -> Result<f64> {
    let grads = {
        let mut g = Graph::new(&model.params, mask);
        let loss = f(&mut g, model)?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        (value, g.backward(loss)?.params)
    };
    opt.apply(&mut model.params, &grads.1)?;
    Ok(grads.0)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mask restricted to one group when the plan trains it.
fn sub_mask(plan: &TrainPlan, group: &str) -> TrainMask {
    if plan.mask.is_trainable(&format!("{group}.x")) {
        TrainMask::groups([group])
    } else {
        TrainMask::frozen()
    }
}

fn classifiers(model: &Model, prefix: &str) -> Result<ClassifierSet> {
    ClassifierSet::from_store(&model.params, prefix, model.config.family.clone(), model.config.classifier_activation)
}

fn exact(pred: &SignalTriple, truth: &SignalTables, cls: &ClassifierSet) -> Result<bool> {
    Ok(&predict_tables(pred, cls)? == truth)
}

/// Loss and exact-match accuracy of stage-1 signals.
pub fn evaluate_stage1(model: &Model, items: &[(&Artefact, &SignalTables)], w: &LossWeights) -> Result<(f64, f64)> {
    let mut spatial = model.spatial_embedder();
    let mut losses = Vec::new();
    let mut hits = 0;
    let mut cache: BTreeMap<Modality, ClassifierSet> = BTreeMap::new();
    for (a, truth) in items {
        let m = a.modality();
        if !cache.contains_key(&m) {
            cache.insert(m, classifiers(model, &format!("{}.cls", stage1_group(m)))?);
        }
        let cls = &cache[&m];
        let s = model.artefact_signals(a, &mut spatial)?;
        losses.push(signal_loss(&s, truth, cls, w)?);
        hits += exact(&s, truth, cls)? as usize;
    }
    Ok((mean(&losses), hits as f64 / items.len().max(1) as f64))
}

fn run_stage1(model: &mut Model, corpus: &Corpus, plan: &TrainPlan) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        let items: Vec<(&Artefact, &SignalTables)> = corpus
            .artefacts
            .iter()
            .filter(|r| r.artefact.modality() == m)
            .map(|r| (&r.artefact, &r.truth))
            .collect();
        if items.is_empty() {
            continue;
        }
        let mask = sub_mask(plan, &stage1_group(m));
        // Box embeddings depend only on the text front end, which is fixed
        // while documents train.
        let mut spatial = model.spatial_embedder();
        let mut opt = Updater::new(plan);
        for epoch in 1..=plan.epochs {
            let mut losses = Vec::with_capacity(items.len());
            for (a, truth) in &items {
                losses.push(update(model, &mask, &mut opt, |g, model| {
                    model.g_stage1_loss(g, a, truth, &plan.weights, plan.objective, &mut spatial)
                })?);
            }
            let (eval_loss, accuracy) = evaluate_stage1(model, &items, &plan.weights)?;
            out.push(EpochMetrics {
                phase: Phase::Stage1,
                modality: Some(m),
                epoch,
                train_loss: mean(&losses),
                eval_loss,
                accuracy,
                intention: None,
            });
        }
    }
    Ok(out)
}

/// Stage-1 encodings of every artefact, keyed by id.
pub fn encode_all(model: &Model, corpus: &Corpus) -> Result<BTreeMap<String, Matrix>> {
    let mut spatial = model.spatial_embedder();
    corpus
        .artefacts
        .iter()
        .map(|r| Ok((r.artefact.id.clone(), model.encode_artefact(&r.artefact, &mut spatial)?)))
        .collect()
}

fn set_encodings<'a>(cache: &'a BTreeMap<String, Matrix>, members: &[String]) -> Result<Vec<Matrix>> {
    members
        .iter()
        .map(|id| cache.get(id).cloned().ok_or_else(|| Error::Data(format!("unknown artefact id {id}"))))
        .collect()
}

pub fn evaluate_stage2(model: &Model, corpus: &Corpus, cache: &BTreeMap<String, Matrix>, m: Modality, w: &LossWeights) -> Result<(f64, f64)> {
    let cls = classifiers(model, &format!("{}.cls", stage2_group(m)))?;
    let mut losses = Vec::new();
    let mut hits = 0;
    let sets: Vec<_> = corpus.sets.iter().filter(|s| s.modality == m).collect();
    for s in &sets {
        let (_, triple) = model.intra_signals(m, &set_encodings(cache, &s.members)?)?;
        losses.push(signal_loss(&triple, &s.truth, &cls, w)?);
        hits += exact(&triple, &s.truth, &cls)? as usize;
    }
    Ok((mean(&losses), hits as f64 / sets.len().max(1) as f64))
}

fn run_stage2(model: &mut Model, corpus: &Corpus, plan: &TrainPlan) -> Result<Vec<EpochMetrics>> {
    for m in Modality::ALL {
        let group = stage2_group(m);
        if plan.mask.is_trainable(&format!("{group}.x")) {
            model.params.copy_prefix(&format!("{}.enc", stage1_group(m)), &format!("{group}.enc"));
        }
    }
    let cache = encode_all(model, corpus)?;
    let mut out = Vec::new();
    for m in Modality::ALL {
        let sets: Vec<_> = corpus.sets.iter().filter(|s| s.modality == m).collect();
        if sets.is_empty() {
            continue;
        }
        let encoded = sets.iter().map(|s| set_encodings(&cache, &s.members)).collect::<Result<Vec<_>>>()?;
        let mask = sub_mask(plan, &stage2_group(m));
        let mut opt = Updater::new(plan);
        for epoch in 1..=plan.epochs {
            let mut losses = Vec::with_capacity(sets.len());
            for (s, enc) in sets.iter().zip(&encoded) {
                losses.push(update(model, &mask, &mut opt, |g, model| {
                    model.g_stage2_loss(g, m, enc, &s.truth, &plan.weights, plan.objective)
                })?);
            }
            let (eval_loss, accuracy) = evaluate_stage2(model, corpus, &cache, m, &plan.weights)?;
            out.push(EpochMetrics {
                phase: Phase::Stage2,
                modality: Some(m),
                epoch,
                train_loss: mean(&losses),
                eval_loss,
                accuracy,
                intention: None,
            });
        }
    }
    Ok(out)
}

/// Fusion inputs for every sample, in corpus order.
pub fn sample_contexts(model: &Model, corpus: &Corpus) -> Result<Vec<Vec<(Modality, Matrix)>>> {
    let index = corpus.index();
    let mut spatial: SpatialEmbedder = model.spatial_embedder();
    corpus
        .samples
        .iter()
        .map(|s| {
            let arts = s
                .artefacts
                .iter()
                .map(|id| index.get(id.as_str()).map(|r| &r.artefact).ok_or_else(|| Error::Data(format!("unknown artefact id {id}"))))
                .collect::<Result<Vec<_>>>()?;
            model.intra_contexts(&arts, &mut spatial)
        })
        .collect()
}

/// Per-sample evaluation of generation against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub loss: IntentionLoss,
    pub coverage: f64,
    pub length: usize,
    pub truth_length: usize,
    pub exact: bool,
}

pub fn evaluate_sample(
    model: &Model,
    contexts: &[(Modality, Matrix)],
    truth: &[SignalTables],
    stopping: &StoppingConfig,
    w: &LossWeights,
    cls: &ClassifierSet,
) -> Result<(SampleEvaluation, crate::intention::IntentionSet)> {
    let trace = model.generate(contexts, stopping)?;
    let triples: Vec<SignalTriple> = trace
        .accepted
        .iter()
        .map(|h| SignalTriple::new(h[0].clone(), h[1].clone(), h[2].clone(), Stage::Intention))
        .collect::<Result<_>>()?;
    let cov = coverage_tables(truth, &triples, cls, w)?;
    let head = head_loss(&trace.probs, truth.len(), triples.len());
    let seq = sequence_loss(cov, truth.len(), triples.len(), w)?;
    let loss = intention_loss(head, contrastive_loss(&triples), seq);
    let mut exact_all = triples.len() == truth.len();
    for (p, t) in triples.iter().zip(truth) {
        exact_all &= exact(p, t, cls)?;
    }
    Ok((
        SampleEvaluation { loss, coverage: cov, length: triples.len(), truth_length: truth.len(), exact: exact_all },
        trace.set,
    ))
}

pub fn evaluate_phase2(
    model: &Model,
    corpus: &Corpus,
    contexts: &[Vec<(Modality, Matrix)>],
    stopping: &StoppingConfig,
    w: &LossWeights,
) -> Result<(f64, f64, IntentionMetrics)> {
    let cls = classifiers(model, &format!("{PHASE2}.cls"))?;
    let mut evals = Vec::new();
    for (s, ctx) in corpus.samples.iter().zip(contexts) {
        evals.push(evaluate_sample(model, ctx, &s.intentions, stopping, w, &cls)?.0);
    }
    let n = evals.len().max(1) as f64;
    let avg = |f: &dyn Fn(&SampleEvaluation) -> f64| evals.iter().map(f).sum::<f64>() / n;
    let loss = intention_loss(avg(&|e| e.loss.head), avg(&|e| e.loss.contrastive), avg(&|e| e.loss.sequence));
    let metrics = IntentionMetrics {
        loss,
        coverage: avg(&|e| e.coverage),
        mean_length: avg(&|e| e.length as f64),
        stop_accuracy: avg(&|e| (e.length == e.truth_length) as u8 as f64),
    };
    let accuracy = avg(&|e| e.exact as u8 as f64);
    Ok((loss.total, accuracy, metrics))
}

fn run_phase2(model: &mut Model, corpus: &Corpus, plan: &TrainPlan) -> Result<Vec<EpochMetrics>> {
    let contexts = sample_contexts(model, corpus)?;
    let mut out = Vec::new();
    if corpus.samples.is_empty() {
        return Ok(out);
    }
    let mut opt = Updater::new(plan);
    for epoch in 1..=plan.epochs {
        let mut losses = Vec::with_capacity(corpus.samples.len());
        for (s, ctx) in corpus.samples.iter().zip(&contexts) {
            losses.push(update(model, &plan.mask, &mut opt, |g, model| {
                Ok(model.g_phase2_loss(g, ctx, &s.intentions, &plan.stopping, &plan.weights, plan.objective)?.0)
            })?);
        }
        let (eval_loss, accuracy, metrics) = evaluate_phase2(model, corpus, &contexts, &plan.stopping, &plan.weights)?;
        out.push(EpochMetrics {
            phase: Phase::Intention,
            modality: None,
            epoch,
            train_loss: mean(&losses),
            eval_loss,
            accuracy,
            intention: Some(metrics),
        });
    }
    Ok(out)
}
