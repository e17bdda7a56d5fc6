//! Signal-space toolkit: adaptive generative families with least-squares
//! decomposition, Gram–Schmidt dimensionality control, component-wise
//! intention arithmetic and the conservation / variation validators.
//!
//! The validators are diagnostics. They report, they never fail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intention::{Intention, IntentionSet};
use crate::numerics::{cosine, norm};
use crate::signals::{Role, SignalTriple};

/// Relative diagonal jitter used when the Gram matrix is singular.
pub const RIDGE: f64 = 1e-10;

const PIVOT_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgebraConfig {
    pub epsilon_x: f64,
    pub max_iterations: usize,
    pub epsilon_orth: f64,
    pub epsilon_sim: f64,
    pub epsilon_dist: f64,
}

impl Default for AlgebraConfig {
    fn default() -> Self {
        AlgebraConfig {
            epsilon_x: 1e-6,
            max_iterations: 16,
            epsilon_orth: 1e-8,
            epsilon_sim: 0.5,
            epsilon_dist: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisVector {
    pub name: String,
    pub values: Vec<f64>,
}

/// A finite spanning set for one of the I/P/O subspaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeFamily {
    pub space: Role,
    pub basis: Vec<BasisVector>,
    pub epsilon_x: f64,
    pub max_iterations: usize,
    pub epsilon_orth: f64,
}

impl GenerativeFamily {
    /// An empty family of the given space with thresholds from `cfg`.
    pub fn empty(space: Role, cfg: &AlgebraConfig) -> Self {
        GenerativeFamily {
            space,
            basis: Vec::new(),
            epsilon_x: cfg.epsilon_x,
            max_iterations: cfg.max_iterations,
            epsilon_orth: cfg.epsilon_orth,
        }
    }

    /// Builds a family from unnamed vectors (`e0`, `e1`, ...).
    pub fn new(space: Role, vectors: Vec<Vec<f64>>, cfg: &AlgebraConfig) -> Result<Self> {
        let mut fam = GenerativeFamily::empty(space, cfg);
        fam.basis = vectors
            .into_iter()
            .enumerate()
            .map(|(k, values)| BasisVector { name: format!("e{k}"), values })
            .collect();
        fam.validate()?;
        Ok(fam)
    }

    /// Seeds a family from the `space` component of extracted signals,
    /// skipping zero vectors and exact repeats.
    pub fn from_signals(space: Role, triples: &[SignalTriple], cfg: &AlgebraConfig) -> Result<Self> {
        let mut fam = GenerativeFamily::empty(space, cfg);
        for (k, t) in triples.iter().enumerate() {
            let v = t.component(space);
            if norm(v) > 0.0 && !fam.contains(v) {
                fam.basis.push(BasisVector { name: format!("signal{k}"), values: v.to_vec() });
            }
        }
        fam.validate()?;
        Ok(fam)
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.basis.first().map(|b| b.values.len())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.basis.iter().map(|b| b.values.as_slice())
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        self.vectors().any(|b| b == v)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (k, b) in self.basis.iter().enumerate() {
            if Some(b.values.len()) != d {
                return Err(Error::shape("GenerativeFamily", "basis vectors differ in width"));
            }
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("GenerativeFamily"));
            }
            if norm(&b.values) == 0.0 {
                return Err(Error::Data(format!("basis vector `{}` is zero", b.name)));
            }
            if self.basis[..k].iter().any(|o| o.values == b.values) {
                return Err(Error::Data(format!("basis vector `{}` is a duplicate", b.name)));
            }
        }
        if !(self.epsilon_x >= 0.0 && self.epsilon_orth >= 0.0) {
            return Err(Error::Config("family thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// `Σ α_k e_k` as a `d`-vector (`d` matters only for an empty family).
    pub fn combine(&self, alpha: &[f64], d: usize) -> Result<Vec<f64>> {
        if alpha.len() != self.len() {
            return Err(Error::shape("combine", format!("{} coefficients for {} vectors", alpha.len(), self.len())));
        }
        if self.dim().is_some_and(|w| w != d) {
            return Err(Error::shape("combine", "width does not match the family"));
        }
        let mut out = vec![0.0; d];
        for (a, e) in alpha.iter().zip(self.vectors()) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += a * v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
}

impl Decomposition {
    /// `‖x − Σ α_k e_k‖` recomputed from scratch.
    pub fn recompute_residual(&self, x: &[f64], fam: &GenerativeFamily) -> Result<f64> {
        let recon = fam.combine(&self.coefficients, x.len())?;
        Ok(residual(x, &recon))
    }
}

fn residual(x: &[f64], recon: &[f64]) -> f64 {
    x.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A y = b` for symmetric positive definite `A` (row-major, n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                // Relative pivot test: a numerically singular Gram matrix
                // must fail here rather than yield huge coefficients.
                if s <= PIVOT_FLOOR * a[i * n + i] || s <= 0.0 || !s.is_finite() {
                    return Err(Error::NonFinite("cholesky"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    for i in (0..n).rev() {
        y[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(y)
}

/// Least-squares coefficients of `x` over the family via the normal
/// equations `EᵀE α = Eᵀx`. A rank-deficient family falls back to the
/// ridged system `(EᵀE + ρI) α = Eᵀx` with `ρ` scaled by the mean diagonal.
pub fn least_squares(x: &[f64], fam: &GenerativeFamily) -> Result<Decomposition> {
    if let Some(d) = fam.dim() {
        if d != x.len() {
            return Err(Error::shape("least_squares", format!("x has width {} but the family {d}", x.len())));
        }
    }
    let n = fam.len();
    let e: Vec<&[f64]> = fam.vectors().collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(e[i], e[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let rhs: Vec<f64> = e.iter().map(|v| dot(v, x)).collect();
    let coefficients = match cholesky_solve(&gram, &rhs, n) {
        Ok(c) => c,
        Err(_) => {
            let scale = (0..n).map(|i| gram[i * n + i]).sum::<f64>() / n.max(1) as f64;
            for i in 0..n {
                gram[i * n + i] += RIDGE * scale.max(1.0);
            }
            cholesky_solve(&gram, &rhs, n)?
        }
    };
    let residual_norm = residual(x, &fam.combine(&coefficients, x.len())?);
    Ok(Decomposition { coefficients, residual_norm })
}

/// Decomposition plus the number of solves it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveDecomposition {
    pub decomposition: Decomposition,
    pub family: GenerativeFamily,
    pub iterations: usize,
    pub grew: bool,
}

/// Solves, and while the residual exceeds `ε_X` (and fewer than `M_max`
/// iterations have run) appends `x` to the family and solves again.
pub fn decompose_with_error(x: &[f64], fam: &GenerativeFamily) -> Result<AdaptiveDecomposition> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decompose_with_error"));
    }
    let mut family = fam.clone();
    let mut decomposition = least_squares(x, &family)?;
    let mut iterations = 1;
    let mut grew = false;
    while decomposition.residual_norm > family.epsilon_x && iterations < family.max_iterations.max(1) {
        // A zero x always has residual 0, and a second copy would only
        // make the Gram matrix singular.
        if family.contains(x) {
            break;
        }
        family.basis.push(BasisVector { name: format!("grown{}", family.len()), values: x.to_vec() });
        grew = true;
        decomposition = least_squares(x, &family)?;
        iterations += 1;
    }
    Ok(AdaptiveDecomposition { decomposition, family, iterations, grew })
}

/// Modified Gram–Schmidt with one re-orthogonalization pass. Vectors whose
/// residual norm falls to `ε_orth` or below are dropped; the rest are
/// normalized.
pub fn gram_schmidt_control(fam: &GenerativeFamily) -> GenerativeFamily {
    let mut out = GenerativeFamily { basis: Vec::new(), ..fam.clone() };
    for b in &fam.basis {
        let mut r = b.values.clone();
        for _ in 0..2 {
            for q in &out.basis {
                let c = dot(&q.values, &r);
                for (ri, qi) in r.iter_mut().zip(&q.values) {
                    *ri -= c * qi;
                }
            }
        }
        let n = norm(&r);
        if n > fam.epsilon_orth {
            out.basis.push(BasisVector { name: b.name.clone(), values: r.iter().map(|v| v / n).collect() });
        }
    }
    out
}

fn check_dims(a: &Intention, b: &Intention) -> Result<()> {
    let d = a.i.len();
    if [a.p.len(), a.o.len(), b.i.len(), b.p.len(), b.o.len()].iter().any(|&n| n != d) {
        return Err(Error::shape("intention algebra", "intention components differ in width"));
    }
    Ok(())
}

fn zip_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `(i₁+i₂, p₁+p₂, o₁+o₂)`, carrying the smaller step index.
pub fn intention_add(a: &Intention, b: &Intention) -> Result<Intention> {
    check_dims(a, b)?;
    Ok(Intention {
        step: a.step.min(b.step),
        i: zip_add(&a.i, &b.i),
        p: zip_add(&a.p, &b.p),
        o: zip_add(&a.o, &b.o),
    })
}

pub fn intention_scale(c: f64, a: &Intention) -> Intention {
    let s = |v: &[f64]| v.iter().map(|x| c * x).collect();
    Intention { step: a.step, i: s(&a.i), p: s(&a.p), o: s(&a.o) }
}

/// The zero intention of width `d`.
pub fn intention_zero(d: usize) -> Intention {
    Intention { step: 0, i: vec![0.0; d], p: vec![0.0; d], o: vec![0.0; d] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormCheck {
    pub intention_norm: f64,
    pub signal_norm: f64,
    /// `None` when the signal component is zero.
    pub ratio: Option<f64>,
    pub holds: bool,
}

impl NormCheck {
    fn new(gamma: &[f64], signal: &[f64]) -> Self {
        let (ng, ns) = (norm(gamma), norm(signal));
        NormCheck {
            intention_norm: ng,
            signal_norm: ns,
            ratio: (ns > 0.0).then(|| ng / ns),
            holds: ng <= ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationEntry {
    pub step: usize,
    pub i: NormCheck,
    pub p: NormCheck,
    pub o: NormCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub entries: Vec<ConservationEntry>,
    pub all_hold: bool,
}

/// Checks `‖v_γ‖ ≤ ‖v_s‖` for every intention and component.
pub fn check_information_conservation(s: &SignalTriple, gamma_set: &IntentionSet) -> ConservationReport {
    let entries: Vec<_> = gamma_set
        .intentions
        .iter()
        .map(|g| ConservationEntry {
            step: g.step,
            i: NormCheck::new(&g.i, &s.i),
            p: NormCheck::new(&g.p, &s.p),
            o: NormCheck::new(&g.o, &s.o),
        })
        .collect();
    let all_hold = entries.iter().all(|e| e.i.holds && e.p.holds && e.o.holds);
    ConservationReport { entries, all_hold }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationPair {
    pub a: usize,
    pub b: usize,
    /// Cosine similarity per component, in i, p, o order.
    pub cosines: [f64; 3],
    pub distances: [f64; 3],
    pub cosine_clause: bool,
    pub distance_clause: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub epsilon_sim: f64,
    pub epsilon_dist: f64,
    pub pairs: Vec<VariationPair>,
    pub all_satisfied: bool,
}

/// For every pair of intentions: does some component have cosine below
/// `eps_sim`, and does some component lie farther apart than `eps_dist`?
pub fn check_intention_variation(gamma_set: &IntentionSet, eps_sim: f64, eps_dist: f64) -> VariationReport {
    let xs = &gamma_set.intentions;
    let mut pairs = Vec::new();
    for a in 0..xs.len() {
        for b in a + 1..xs.len() {
            let (x, y) = (&xs[a], &xs[b]);
            let comps = [(&x.i, &y.i), (&x.p, &y.p), (&x.o, &y.o)];
            let cosines = comps.map(|(u, v)| cosine(u, v));
            let distances = comps.map(|(u, v)| residual(u, v));
            pairs.push(VariationPair {
                a,
                b,
                cosines,
                distances,
                cosine_clause: cosines.iter().any(|&c| c < eps_sim),
                distance_clause: distances.iter().any(|&d| d > eps_dist),
            });
        }
    }
    let all_satisfied = pairs.iter().all(|p| p.cosine_clause && p.distance_clause);
    VariationReport { epsilon_sim: eps_sim, epsilon_dist: eps_dist, pairs, all_satisfied }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intention::StopReason;

    fn unit(d: usize, k: usize) -> Vec<f64> {
        (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
    }

    fn set(intentions: Vec<Intention>) -> IntentionSet {
        IntentionSet { intentions, stop_reason: StopReason::Head, gate_log: vec![] }
    }

    #[test]
    fn member_decomposes_without_growth() {
        let cfg = AlgebraConfig::default();
        let fam = GenerativeFamily::new(Role::Input, vec![unit(3, 0), unit(3, 1)], &cfg).unwrap();
        let out = decompose_with_error(&unit(3, 0), &fam).unwrap();
        assert!(!out.grew);
        assert!((out.decomposition.coefficients[0] - 1.0).abs() < 1e-9);
        assert!(out.decomposition.coefficients[1].abs() < 1e-9);
        assert!(out.decomposition.residual_norm < 1e-9);
    }

    #[test]
    fn orthogonal_input_grows_the_family_once() {
        let cfg = AlgebraConfig::default();
        let fam = GenerativeFamily::new(Role::Process, vec![unit(3, 0)], &cfg).unwrap();
        let out = decompose_with_error(&unit(3, 2), &fam).unwrap();
        assert!(out.grew);
        assert_eq!(out.family.len(), 2);
        assert_eq!(out.iterations, 2);
        assert!(out.decomposition.residual_norm < 1e-6);
    }

    #[test]
    fn empty_family_and_zero_input() {
        let cfg = AlgebraConfig::default();
        let fam = GenerativeFamily::empty(Role::Output, &cfg);
        let out = decompose_with_error(&[0.0, 0.0], &fam).unwrap();
        assert_eq!(out.decomposition.residual_norm, 0.0);
        assert!(!out.grew);
        let out = decompose_with_error(&[3.0, 4.0], &fam).unwrap();
        assert_eq!(out.family.len(), 1);
    }

    #[test]
    fn duplicates_and_zeros_are_rejected() {
        let cfg = AlgebraConfig::default();
        assert!(GenerativeFamily::new(Role::Input, vec![unit(2, 0), unit(2, 0)], &cfg).is_err());
        assert!(GenerativeFamily::new(Role::Input, vec![vec![0.0, 0.0]], &cfg).is_err());
    }

    #[test]
    fn dependent_vectors_collapse() {
        let cfg = AlgebraConfig::default();
        let fam = GenerativeFamily::new(Role::Input, vec![vec![1.0, 2.0, 2.0], vec![2.0, 4.0, 4.0]], &cfg).unwrap();
        let gs = gram_schmidt_control(&fam);
        assert_eq!(gs.len(), 1);
        assert!((norm(&gs.basis[0].values) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conservation_examples() {
        let s = SignalTriple::new(vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0], crate::signals::Stage::Intra).unwrap();
        let zero = intention_zero(2);
        assert!(check_information_conservation(&s, &set(vec![zero])).all_hold);
        let doubled = intention_scale(2.0, &Intention::from_triple(1, s.clone()));
        let r = check_information_conservation(&s, &set(vec![doubled]));
        let e = &r.entries[0];
        assert!(!e.i.holds && !e.p.holds && !e.o.holds);
        assert_eq!(e.i.ratio, Some(2.0));
    }

    #[test]
    fn variation_examples() {
        let a = Intention { step: 1, i: unit(2, 0), p: unit(2, 0), o: unit(2, 0) };
        let r = check_intention_variation(&set(vec![a.clone(), a.clone()]), 0.5, 0.1);
        assert!(!r.pairs[0].cosine_clause && !r.pairs[0].distance_clause);
        let b = Intention { i: unit(2, 1), ..a.clone() };
        let r = check_intention_variation(&set(vec![a.clone(), b]), 0.5, 0.1);
        assert!(r.pairs[0].cosine_clause);
        assert_eq!(r.pairs[0].cosines, [0.0, 1.0, 1.0]);
        assert!(check_intention_variation(&set(vec![a]), 0.5, 0.1).all_satisfied);
    }

    #[test]
    fn intention_identities() {
        let g = Intention { step: 2, i: vec![1.0, -2.0], p: vec![0.5, 0.0], o: vec![3.0, 1.0] };
        let z = intention_add(&g, &intention_zero(2)).unwrap();
        assert_eq!((z.i, z.p, z.o), (g.i.clone(), g.p.clone(), g.o.clone()));
        assert_eq!(intention_scale(1.0, &g), g);
        assert!(intention_add(&g, &intention_zero(3)).is_err());
    }
}
