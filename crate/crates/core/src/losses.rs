//! Count classifiers and training losses: the bounded signal loss,
//! intention distance, coverage, sequence, contrastive and stopping-head
//! losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Axis, Matrix, MlpSpec, Var};
use crate::params::{Graph, ParamStore, TrainMask};
use crate::signals::{Role, SignalTriple};

/// Log clamp shared by every cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

/// Element names per role and the largest exact count `M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub input: Vec<String>,
    pub process: Vec<String>,
    pub output: Vec<String>,
    pub max_count: usize,
}

impl Default for FamilySpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        FamilySpec {
            input: s(&["invoice", "receipt", "order", "contract"]),
            process: s(&["approval", "validation", "archiving", "reconciliation"]),
            output: s(&["report", "payment", "ledger", "notice"]),
            max_count: 3,
        }
    }
}

impl FamilySpec {
    pub fn elements(&self, role: Role) -> &[String] {
        match role {
            Role::Input => &self.input,
            Role::Process => &self.process,
            Role::Output => &self.output,
        }
    }

    /// `M + 2` classes: absent, `1..=M`, plural of unknown count.
    pub fn classes(&self) -> usize {
        self.max_count + 2
    }

    pub fn unknown_class(&self) -> usize {
        self.max_count + 1
    }

    pub fn validate(&self) -> Result<()> {
        for role in Role::ALL {
            let el = self.elements(role);
            if el.is_empty() {
                return Err(Error::Config(format!("{role:?} family is empty")));
            }
            let mut sorted = el.to_vec();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != el.len() {
                return Err(Error::Config(format!("{role:?} family has duplicate names")));
            }
        }
        Ok(())
    }
}

/// Count class per family element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountTable(pub Vec<usize>);

impl CountTable {
    pub fn validate(&self, len: usize, classes: usize) -> Result<()> {
        if self.0.len() != len {
            return Err(Error::Data(format!("count table of {} rows for a family of {len}", self.0.len())));
        }
        if let Some(c) = self.0.iter().find(|c| **c >= classes) {
            return Err(Error::Data(format!("count class {c} out of range 0..{classes}")));
        }
        Ok(())
    }
}

/// Ground-truth tables for the three roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalTables {
    pub i: CountTable,
    pub p: CountTable,
    pub o: CountTable,
}

impl SignalTables {
    pub fn table(&self, role: Role) -> &CountTable {
        match role {
            Role::Input => &self.i,
            Role::Process => &self.p,
            Role::Output => &self.o,
        }
    }

    pub fn validate(&self, family: &FamilySpec) -> Result<()> {
        for role in Role::ALL {
            self.table(role).validate(family.elements(role).len(), family.classes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub alpha_c: f64,
    pub alpha_o: f64,
    pub alpha_u: f64,
    pub tau_gamma: f64,
    pub aux_signal_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            mu: 0.5,
            alpha_c: 0.6,
            alpha_o: 0.2,
            alpha_u: 0.2,
            tau_gamma: 0.6,
            aux_signal_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.mu, self.alpha_c, self.alpha_o, self.alpha_u, self.tau_gamma, self.aux_signal_weight];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.lambda <= 0.0 || !(0.0..=1.0).contains(&self.mu) || self.aux_signal_weight < 0.0 {
            return Err(Error::Config("need lambda > 0, mu in [0, 1], aux weight >= 0".into()));
        }
        let s = self.alpha_c + self.alpha_o + self.alpha_u;
        if (s - 1.0).abs() > 1e-9 || [self.alpha_c, self.alpha_o, self.alpha_u].iter().any(|a| *a < 0.0) {
            return Err(Error::Config(format!("sequence weights must be non-negative and sum to 1, got {s}")));
        }
        Ok(())
    }

    /// Infimum of the bounded signal loss, reached as the inner loss → 0.
    pub fn signal_floor(&self) -> f64 {
        bound(0.0, self.lambda, self.mu)
    }
}

/// `1 / (1 + e^{−λ(L−µ)})`, kept strictly inside `(0, 1)`: past
/// `λ(L−µ) ≈ 37` the exact value rounds to 1 in f64, so it is clamped to
/// the neighbouring representable values.
pub fn bound(l: f64, lambda: f64, mu: f64) -> f64 {
    let s = 1.0 / (1.0 + (-lambda * (l - mu)).exp());
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Count-classifier activations: `hidden` on the inner layer, then a linear
/// read-out of `|X_g|·(M+2)` logits.
pub fn classifier_activations(hidden: Activation) -> [Activation; 2] {
    [hidden, Activation::Identity]
}

/// Where a stage's three classifiers live in the store and how they read out.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierRef<'a> {
    pub prefix: &'a str,
    pub family: &'a FamilySpec,
    pub hidden: Activation,
}

pub fn g_classify(g: &mut Graph, x: Var, prefix: &str, hidden: Activation, rows: usize, classes: usize) -> Result<Var> {
    let flat = g.mlp(x, prefix, &classifier_activations(hidden))?;
    g.reshape(flat, rows, classes)
}

/// Three classifiers of one stage and the family they read out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSet {
    pub input: MlpSpec,
    pub process: MlpSpec,
    pub output: MlpSpec,
    pub family: FamilySpec,
    pub hidden: Activation,
}

impl ClassifierSet {
    pub fn head(&self, role: Role) -> &MlpSpec {
        match role {
            Role::Input => &self.input,
            Role::Process => &self.process,
            Role::Output => &self.output,
        }
    }

    pub fn store_into(&self, store: &mut ParamStore, prefix: &str) {
        for role in Role::ALL {
            store.insert_mlp(&format!("{prefix}.{}", role.key()), self.head(role));
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str, family: FamilySpec, hidden: Activation) -> Result<Self> {
        let acts = classifier_activations(hidden);
        let read = |r: Role| store.mlp(&format!("{prefix}.{}", r.key()), &acts);
        Ok(ClassifierSet {
            input: read(Role::Input)?,
            process: read(Role::Process)?,
            output: read(Role::Output)?,
            family,
            hidden,
        })
    }

    fn graph_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.store_into(&mut store, "c");
        store
    }
}

/// Logits `|X_g| × (M+2)` for one signal vector.
pub fn count_classify(x: &[f64], role: Role, classifiers: &ClassifierSet) -> Result<Matrix> {
    let rows = classifiers.family.elements(role).len();
    let spec = classifiers.head(role);
    if spec.d_out() != rows * classifiers.family.classes() {
        return Err(Error::shape("count_classify", "classifier width does not match the family"));
    }
    let store = classifiers.graph_store();
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let xv = g.constant(Matrix::column(x)?);
    let prefix = format!("c.{}", role.key());
    let out = g_classify(&mut g, xv, &prefix, classifiers.hidden, rows, classifiers.family.classes())?;
    Ok(g.value(out)?.clone())
}

/// What the optimizer differentiates for a signal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalObjective {
    /// `bound(L)`, whose slope vanishes on confidently wrong items.
    Bounded,
    /// The inner sum `L`; same minimizers since `bound` is increasing.
    #[default]
    Inner,
}

/// `Σ_heads mean_rows CE(logits, labels)` on the graph.
pub fn g_inner_ce(g: &mut Graph, logits: &[Var; 3], labels: [&[usize]; 3]) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for (z, l) in logits.iter().zip(labels) {
        terms.push(g.cross_entropy_rows(*z, l, LOG_EPS)?);
    }
    let s = g.add(terms[0], terms[1])?;
    g.add(s, terms[2])
}

/// `bound(Σ_heads mean_rows CE(logits, labels))` on the graph.
pub fn g_bounded_ce(
    g: &mut Graph,
    logits: &[Var; 3],
    labels: [&[usize]; 3],
    w: &LossWeights,
) -> Result<Var> {
    let s = g_inner_ce(g, logits, labels)?;
    let shifted = g.add_scalar(s, -w.mu)?;
    let scaled = g.scale(shifted, w.lambda)?;
    g.sigmoid(scaled)
}

/// Classifies a triple held on the graph and returns its bounded loss
/// against `truth`.
pub fn g_signal_loss(
    g: &mut Graph,
    triple: &[Var; 3],
    truth: &SignalTables,
    classifiers: ClassifierRef,
    w: &LossWeights,
) -> Result<Var> {
    let logits = g_logits(g, triple, classifiers)?;
    g_bounded_ce(g, &logits, [&truth.i.0, &truth.p.0, &truth.o.0], w)
}

/// The training form of the signal loss selected by `objective`.
pub fn g_signal_objective(
    g: &mut Graph,
    triple: &[Var; 3],
    truth: &SignalTables,
    classifiers: ClassifierRef,
    w: &LossWeights,
    objective: SignalObjective,
) -> Result<Var> {
    match objective {
        SignalObjective::Bounded => g_signal_loss(g, triple, truth, classifiers, w),
        SignalObjective::Inner => {
            let logits = g_logits(g, triple, classifiers)?;
            g_inner_ce(g, &logits, [&truth.i.0, &truth.p.0, &truth.o.0])
        }
    }
}

pub fn g_logits(g: &mut Graph, triple: &[Var; 3], c: ClassifierRef) -> Result<[Var; 3]> {
    let mut out = [triple[0]; 3];
    for (k, role) in Role::ALL.iter().enumerate() {
        out[k] = g_classify(
            g,
            triple[k],
            &format!("{}.{}", c.prefix, role.key()),
            c.hidden,
            c.family.elements(*role).len(),
            c.family.classes(),
        )?;
    }
    Ok(out)
}

/// Bounded loss from precomputed logits.
pub fn signal_loss_from_logits(logits: [&Matrix; 3], truth: &SignalTables, w: &LossWeights) -> Result<f64> {
    let mut inner = 0.0;
    for (z, role) in logits.iter().zip(Role::ALL) {
        let labels = &truth.table(role).0;
        if labels.len() != z.rows() {
            return Err(Error::shape("signal_loss", format!("{} labels for {} rows", labels.len(), z.rows())));
        }
        let mut t = crate::numerics::Tape::new();
        let zv = t.constant((*z).clone());
        let ce = t.cross_entropy_rows(zv, labels, LOG_EPS)?;
        inner += t.scalar(ce)?;
    }
    Ok(bound(inner, w.lambda, w.mu))
}

pub fn signal_loss(pred: &SignalTriple, truth: &SignalTables, classifiers: &ClassifierSet, w: &LossWeights) -> Result<f64> {
    truth.validate(&classifiers.family)?;
    let logits = classify_triple(pred, classifiers)?;
    signal_loss_from_logits([&logits[0], &logits[1], &logits[2]], truth, w)
}

pub fn classify_triple(pred: &SignalTriple, classifiers: &ClassifierSet) -> Result<[Matrix; 3]> {
    Ok([
        count_classify(&pred.i, Role::Input, classifiers)?,
        count_classify(&pred.p, Role::Process, classifiers)?,
        count_classify(&pred.o, Role::Output, classifiers)?,
    ])
}

/// Row-wise argmax (first maximum on ties).
pub fn argmax_rows(z: &Matrix) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let row = z.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Predicted count tables of a triple.
pub fn predict_tables(pred: &SignalTriple, classifiers: &ClassifierSet) -> Result<SignalTables> {
    let [zi, zp, zo] = classify_triple(pred, classifiers)?;
    Ok(SignalTables {
        i: CountTable(argmax_rows(&zi)),
        p: CountTable(argmax_rows(&zp)),
        o: CountTable(argmax_rows(&zo)),
    })
}

/// Bounded cross-entropy of `a`'s predictions against the argmax labels of
/// `b`'s predictions. Asymmetric in general.
pub fn intention_distance(a: &SignalTriple, b: &SignalTriple, classifiers: &ClassifierSet, w: &LossWeights) -> Result<f64> {
    let labels = predict_tables(b, classifiers)?;
    signal_loss(a, &labels, classifiers, w)
}

/// Fraction of truth intentions whose closest prediction is within `τ_γ`.
/// `distance(truth_index, pred_index)` supplies the pairing.
pub fn coverage_by(
    n_truth: usize,
    n_pred: usize,
    tau_gamma: f64,
    mut distance: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<f64> {
    if n_truth == 0 {
        return Err(Error::Empty("coverage: truth set"));
    }
    let mut matched = 0;
    for t in 0..n_truth {
        let mut best = f64::INFINITY;
        for p in 0..n_pred {
            best = best.min(distance(t, p)?);
        }
        if best < tau_gamma {
            matched += 1;
        }
    }
    Ok(matched as f64 / n_truth as f64)
}

/// Coverage of truth intentions by predictions, using
/// [`intention_distance`]`(prediction, truth)`.
pub fn coverage(
    truth: &[SignalTriple],
    pred: &[SignalTriple],
    classifiers: &ClassifierSet,
    w: &LossWeights,
) -> Result<f64> {
    coverage_by(truth.len(), pred.len(), w.tau_gamma, |t, p| {
        intention_distance(&pred[p], &truth[t], classifiers, w)
    })
}

/// Coverage against ground-truth count tables: a truth intention is
/// matched when some prediction's bounded loss against its tables is
/// below `τ_γ`.
pub fn coverage_tables(
    truth: &[SignalTables],
    pred: &[SignalTriple],
    classifiers: &ClassifierSet,
    w: &LossWeights,
) -> Result<f64> {
    let logits = pred.iter().map(|p| classify_triple(p, classifiers)).collect::<Result<Vec<_>>>()?;
    coverage_by(truth.len(), pred.len(), w.tau_gamma, |t, p| {
        let z = &logits[p];
        signal_loss_from_logits([&z[0], &z[1], &z[2]], &truth[t], w)
    })
}

/// `1 − [α_c·coverage + α_o/(1+Δ⁺) + α_u/(1+Δ⁻)]`.
pub fn sequence_loss(coverage: f64, truth_len: usize, pred_len: usize, w: &LossWeights) -> Result<f64> {
    let s = w.alpha_c + w.alpha_o + w.alpha_u;
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("sequence weights sum to {s}, not 1")));
    }
    let over = pred_len.saturating_sub(truth_len) as f64;
    let under = truth_len.saturating_sub(pred_len) as f64;
    Ok(1.0 - (w.alpha_c * coverage + w.alpha_o / (1.0 + over) + w.alpha_u / (1.0 + under)))
}

fn pair_distance_sq(a: &SignalTriple, b: &SignalTriple) -> f64 {
    Role::ALL
        .iter()
        .map(|r| {
            a.component(*r)
                .iter()
                .zip(b.component(*r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum()
}

/// Mean over unordered pairs of `exp(−(‖Δi‖² + ‖Δp‖² + ‖Δo‖²))`; 0 for
/// fewer than two intentions.
pub fn contrastive_loss(pred: &[SignalTriple]) -> f64 {
    if pred.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..pred.len() {
        for b in a + 1..pred.len() {
            total += (-pair_distance_sq(&pred[a], &pred[b])).exp();
            pairs += 1;
        }
    }
    total / pairs as f64
}

pub fn g_contrastive(g: &mut Graph, pred: &[[Var; 3]]) -> Result<Option<Var>> {
    if pred.len() < 2 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for a in 0..pred.len() {
        for b in a + 1..pred.len() {
            let mut dist = None;
            for k in 0..3 {
                let diff = g.sub(pred[a][k], pred[b][k])?;
                let sq = g.sum_squares(diff)?;
                dist = Some(match dist {
                    None => sq,
                    Some(acc) => g.add(acc, sq)?,
                });
            }
            let neg = g.scale(dist.expect("three components"), -1.0)?;
            terms.push(g.exp(neg)?);
        }
    }
    let cat = g.concat_rows(&terms)?;
    Ok(Some(g.mean_all(cat)?))
}

/// Accept-probability target and padding for the stopping-head loss over
/// `T = max(recorded steps, truth_len, pred_len)` steps: recorded
/// probabilities are padded with 0, and the target is 1 for `t ≤ truth_len`.
pub fn head_loss(accept_probs: &[f64], truth_len: usize, pred_len: usize) -> f64 {
    let steps = accept_probs.len().max(truth_len).max(pred_len);
    if steps == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for t in 0..steps {
        let p = accept_probs.get(t).copied().unwrap_or(0.0);
        total += if t < truth_len {
            -p.max(LOG_EPS).ln()
        } else {
            -(1.0 - p).max(LOG_EPS).ln()
        };
    }
    total / steps as f64
}

/// Stopping-head loss on the graph. `probs[t]` is either a recorded
/// `[P(stop), P(accept)]` column or a constant probability (forced first
/// step); missing steps count as `P(accept) = 0`.
pub fn g_head_loss(g: &mut Graph, probs: &[HeadProb], truth_len: usize, pred_len: usize) -> Result<Option<Var>> {
    let steps = probs.len().max(truth_len).max(pred_len);
    let mut constant = 0.0;
    let mut terms = Vec::new();
    for t in 0..steps {
        let target_accept = t < truth_len;
        match probs.get(t) {
            Some(HeadProb::Recorded(col)) => {
                let row = if target_accept { 1 } else { 0 };
                let p = g.slice_rows(*col, row, 1)?;
                let lp = g.log_clamped(p, LOG_EPS)?;
                terms.push(g.scale(lp, -1.0)?);
            }
            Some(HeadProb::Fixed(p)) => {
                let q = if target_accept { *p } else { 1.0 - p };
                constant -= q.max(LOG_EPS).ln();
            }
            None => {
                let q = if target_accept { 0.0 } else { 1.0 };
                constant -= f64::max(q, LOG_EPS).ln();
            }
        }
    }
    if steps == 0 {
        return Ok(None);
    }
    let base = g.constant(Matrix::filled(1, 1, constant));
    let mut total = base;
    for term in terms {
        total = g.add(total, term)?;
    }
    Ok(Some(g.scale(total, 1.0 / steps as f64)?))
}

/// One step's stopping-head probability as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub enum HeadProb {
    /// A `2 × 1` softmax column `[P(stop), P(accept)]`.
    Recorded(Var),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionLoss {
    pub head: f64,
    pub contrastive: f64,
    pub sequence: f64,
    pub total: f64,
}

/// Unweighted sum of the three components.
pub fn intention_loss(head: f64, contrastive: f64, sequence: f64) -> IntentionLoss {
    IntentionLoss {
        head,
        contrastive,
        sequence,
        total: head + contrastive + sequence,
    }
}

/// Convenience: stopping-head softmax for 2 logits.
pub fn accept_probability(logits: &[f64; 2]) -> f64 {
    let m = crate::numerics::softmax(
        &Matrix::from_rows(&[logits.to_vec()]).expect("two finite logits"),
        Axis::Rows,
    )
    .expect("non-empty");
    m.get(0, 1)
}
