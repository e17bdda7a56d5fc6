//! Command implementations behind the `wintent` binary. Every file written
//! here carries the run configuration and the code version; nothing depends
//! on wall-clock time or output paths, so equal inputs give equal bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algebra::{
    check_information_conservation, check_intention_variation, gram_schmidt_control, AlgebraConfig, ConservationReport,
    GenerativeFamily, VariationReport,
};
use crate::artefacts::{Artefact, Modality};
use crate::config::RunConfig;
use crate::corpus::{generate, write_jsonl_as, Corpus, CODE_VERSION};
use crate::error::{Error, Result};
use crate::intention::IntentionSet;
use crate::losses::{ClassifierSet, SignalTables};
use crate::model::{stage1_group, PHASE2};
use crate::signals::{Role, SignalTriple};
use crate::stack::{large_scale_param_report, ParamCountReport};
use crate::training::{
    encode_all, evaluate_sample, evaluate_stage1, evaluate_stage2, train, Checkpoint, EpochMetrics, IntentionMetrics,
    Phase, SampleEvaluation, TrainPlan,
};

pub const METRICS_FORMAT: &str = "wintent-metrics";
pub const INTENTIONS_FORMAT: &str = "wintent-intentions";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const INTENTIONS_FILE: &str = "intentions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PARAM_COUNT_FILE: &str = "param_count.json";

/// Loads a config file (or the defaults) and applies a `--seed` override to
/// both the model and the corpus seed.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_corpus(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let corpus = generate(&cfg.corpus, &cfg.model, echo(cfg)?)?;
    corpus.write(out)?;
    Ok(corpus)
}

/// Trains one phase. Phase 1.1 starts from a fresh initialization unless a
/// checkpoint is given; later phases require one. A config passed next to
/// a checkpoint must describe the same model.
pub fn cmd_train(
    phase: Phase,
    cfg: Option<&RunConfig>,
    corpus_dir: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Checkpoint> {
    let mut start = match (checkpoint, cfg) {
        (Some(p), _) => Checkpoint::load(p)?,
        (None, Some(c)) if phase == Phase::Stage1 => Checkpoint::init(c)?,
        (None, None) if phase == Phase::Stage1 => Checkpoint::init(&RunConfig::default())?,
        (None, _) => return Err(Error::Data(format!("phase {phase} needs --checkpoint"))),
    };
    if let Some(c) = cfg {
        if c.model != start.model.config {
            return Err(Error::Config("--config describes a different model than the checkpoint".into()));
        }
        start.config = c.clone();
    }
    let corpus = Corpus::load(corpus_dir)?;
    let mut plan = TrainPlan::for_phase(phase, &start.config);
    plan.corpus = Some(format!("sha256:{}", corpus.digest()?));
    let ck = train(&start, &corpus, &plan)?;
    create_dir(out)?;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    let epochs: &[EpochMetrics] = &ck.history.last().expect("train appends a record").epochs;
    write_jsonl_as(&out.join(METRICS_FILE), METRICS_FORMAT, "metrics", &echo(&ck.config)?, epochs)?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub sample: String,
    pub intentions: IntentionSet,
    /// Count tables read from each intention by the intention classifiers.
    pub tables: Vec<SignalTables>,
}

fn sample_artefacts<'a>(corpus: &'a Corpus, ids: &[String]) -> Result<Vec<&'a Artefact>> {
    ids.iter().map(|id| Ok(&corpus.artefact(id)?.artefact)).collect()
}

fn intention_classifiers(ck: &Checkpoint) -> Result<ClassifierSet> {
    let c = &ck.model.config;
    ClassifierSet::from_store(&ck.model.params, &format!("{PHASE2}.cls"), c.family.clone(), c.classifier_activation)
}

fn require_phase2(ck: &Checkpoint) -> Result<()> {
    if !ck.completed(Phase::Intention) {
        return Err(Error::Data("checkpoint has not completed phase 2".into()));
    }
    Ok(())
}

/// Generates an intention set per sample. `cfg` overrides the stopping
/// rules stored in the checkpoint.
pub fn cmd_infer(cfg: Option<&RunConfig>, checkpoint: &Path, corpus_dir: &Path, out: &Path) -> Result<Vec<InferRecord>> {
    let ck = Checkpoint::load(checkpoint)?;
    require_phase2(&ck)?;
    let run = cfg.unwrap_or(&ck.config);
    let corpus = Corpus::load(corpus_dir)?;
    let cls = intention_classifiers(&ck)?;
    let mut spatial = ck.model.spatial_embedder();
    let mut records = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let arts = sample_artefacts(&corpus, &s.artefacts)?;
        let contexts = ck.model.intra_contexts(&arts, &mut spatial)?;
        let trace = ck.model.generate(&contexts, &run.stopping)?;
        let tables = trace
            .set
            .triples()
            .iter()
            .map(|t| crate::losses::predict_tables(t, &cls))
            .collect::<Result<_>>()?;
        records.push(InferRecord { sample: s.id.clone(), intentions: trace.set, tables });
    }
    create_dir(out)?;
    write_jsonl_as(&out.join(INTENTIONS_FILE), INTENTIONS_FORMAT, "intentions", &echo(run)?, &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityScore {
    pub modality: Modality,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleValidation {
    pub sample: String,
    pub evaluation: SampleEvaluation,
    /// Intentions against each modality's intra-stage signals.
    pub conservation: Vec<(Modality, ConservationReport)>,
    pub variation: VariationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRank {
    pub space: Role,
    pub vectors: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Validation {
    pub metrics: IntentionMetrics,
    pub exact_accuracy: f64,
    pub samples: Vec<SampleValidation>,
    /// Span of all generated intentions per component after Gram–Schmidt.
    pub families: Vec<FamilyRank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub code_version: String,
    pub config: serde_json::Value,
    pub phases: Vec<Phase>,
    pub stage1: Vec<ModalityScore>,
    pub stage2: Vec<ModalityScore>,
    pub phase2: Option<Phase2Validation>,
}

/// Loss metrics for every completed phase, plus the algebra validators on
/// generated intentions.
pub fn cmd_validate(checkpoint: &Path, corpus_dir: &Path, out: &Path) -> Result<ValidationReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = Corpus::load(corpus_dir)?;
    corpus.validate(&ck.model.config.family)?;
    let model = &ck.model;
    let w = &ck.config.losses;
    let mut report = ValidationReport {
        code_version: CODE_VERSION.into(),
        config: echo(&ck.config)?,
        phases: ck.history.iter().map(|r| r.plan.phase).collect(),
        stage1: Vec::new(),
        stage2: Vec::new(),
        phase2: None,
    };
    if ck.completed(Phase::Stage1) {
        for m in Modality::ALL {
            let items: Vec<(&Artefact, &SignalTables)> = corpus
                .artefacts
                .iter()
                .filter(|r| r.artefact.modality() == m)
                .map(|r| (&r.artefact, &r.truth))
                .collect();
            if !items.is_empty() && model.params.groups().contains(&stage1_group(m)) {
                let (loss, accuracy) = evaluate_stage1(model, &items, w)?;
                report.stage1.push(ModalityScore { modality: m, loss, accuracy });
            }
        }
    }
    if ck.completed(Phase::Stage2) {
        let cache = encode_all(model, &corpus)?;
        for m in Modality::ALL {
            if corpus.sets.iter().any(|s| s.modality == m) {
                let (loss, accuracy) = evaluate_stage2(model, &corpus, &cache, m, w)?;
                report.stage2.push(ModalityScore { modality: m, loss, accuracy });
            }
        }
    }
    if ck.completed(Phase::Intention) {
        report.phase2 = Some(validate_phase2(&ck, &corpus)?);
    }
    create_dir(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn validate_phase2(ck: &Checkpoint, corpus: &Corpus) -> Result<Phase2Validation> {
    let model = &ck.model;
    let (stopping, w) = (&ck.config.stopping, &ck.config.losses);
    let alg = AlgebraConfig::default();
    let cls = intention_classifiers(ck)?;
    let mut spatial = model.spatial_embedder();
    let mut samples = Vec::new();
    let mut generated: Vec<SignalTriple> = Vec::new();
    for s in &corpus.samples {
        let arts = sample_artefacts(corpus, &s.artefacts)?;
        let views = model.intra_views(&arts, &mut spatial)?;
        let contexts: Vec<_> = views.iter().map(|(m, h, _)| (*m, h.clone())).collect();
        let (evaluation, set) = evaluate_sample(model, &contexts, &s.intentions, stopping, w, &cls)?;
        generated.extend(set.triples());
        samples.push(SampleValidation {
            sample: s.id.clone(),
            evaluation,
            conservation: views.iter().map(|(m, _, t)| (*m, check_information_conservation(t, &set))).collect(),
            variation: check_intention_variation(&set, alg.epsilon_sim, alg.epsilon_dist),
        });
    }
    let families = Role::ALL
        .into_iter()
        .map(|role| {
            let fam = GenerativeFamily::from_signals(role, &generated, &alg)?;
            Ok(FamilyRank { space: role, vectors: fam.len(), rank: gram_schmidt_control(&fam).len() })
        })
        .collect::<Result<_>>()?;
    let n = samples.len().max(1) as f64;
    let avg = |f: &dyn Fn(&SampleEvaluation) -> f64| samples.iter().map(|s| f(&s.evaluation)).sum::<f64>() / n;
    let loss = crate::losses::intention_loss(
        avg(&|e| e.loss.head),
        avg(&|e| e.loss.contrastive),
        avg(&|e| e.loss.sequence),
    );
    let metrics = IntentionMetrics {
        loss,
        coverage: avg(&|e| e.coverage),
        mean_length: avg(&|e| e.length as f64),
        stop_accuracy: avg(&|e| (e.length == e.truth_length) as u8 as f64),
    };
    let exact_accuracy = avg(&|e| e.exact as u8 as f64);
    Ok(Phase2Validation { metrics, exact_accuracy, samples, families })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountOutput {
    pub code_version: String,
    pub report: ParamCountReport,
}

pub fn cmd_param_count(out: Option<&Path>) -> Result<ParamCountReport> {
    let report = large_scale_param_report();
    if let Some(dir) = out {
        create_dir(dir)?;
        let doc = ParamCountOutput { code_version: CODE_VERSION.into(), report: report.clone() };
        write_json(&dir.join(PARAM_COUNT_FILE), &doc)?;
    }
    Ok(report)
}

/// Fixed-width table of the parameter report.
pub fn format_param_table(report: &ParamCountReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<20} {:>16} {:>16} {:>8}", "component", "parameters", "reference", "rel.err");
    for r in &report.rows {
        let _ = writeln!(s, "{:<20} {:>16} {:>16} {:>7.2}%", r.component, r.count, r.reference, 100.0 * r.relative_error());
    }
    let rel = (report.total as f64 - report.reference_total as f64).abs() / report.reference_total as f64;
    let _ = writeln!(s, "{:<20} {:>16} {:>16} {:>7.2}%", "total", report.total, report.reference_total, 100.0 * rel);
    s
}
