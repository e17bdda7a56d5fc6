//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wintent::algebra::{
    decompose_with_error, gram_schmidt_control, intention_add, intention_scale, intention_zero, least_squares,
    AlgebraConfig, GenerativeFamily,
};
use wintent::artefacts::{BoundingBox, DocumentFrontEnd, ImageArtefact, Modality, Page, PageElement, Tokenizer};
use wintent::attention::{
    g_attention, g_multi_head, init_head, init_multi_head, masked_self_attention, AttentionParams,
};
use wintent::cli;
use wintent::config::RunConfig;
use wintent::error::Result;
use wintent::intention::{generate_with, stopping_head, Intention, StopReason, Stepper, StoppingConfig, STOP_ACTIVATIONS};
use wintent::losses::{
    bound, classifier_activations, contrastive_loss, g_contrastive, g_head_loss, g_inner_ce, g_logits, g_signal_loss,
    sequence_loss, signal_loss, ClassifierRef, ClassifierSet, CountTable, FamilySpec, HeadProb, LossWeights,
    SignalTables,
};
use wintent::numerics::gradcheck::check_params;
use wintent::numerics::{softmax, Activation, Axis, LinearParams, Matrix, MlpLayer, MlpSpec, Var};
use wintent::params::{Graph, Init, ParamStore, TrainMask};
use wintent::signals::{fuse, g_heads, g_rep, FusionParams, RepLayout, Role, SignalTriple, Stage};
use wintent::stack::{
    decode_step, g_decode, g_encode, init_decoder, init_encoder, DecoderParams, EncoderParams, StackConfig,
};
use wintent::training::{Checkpoint, Phase};

const AC1_EXACT_TEXT: u64 = 301_989_888;
const AC1_EXACT_FUSION: u64 = 3_321_888_768;
const AC1_REL_TOL: f64 = 0.03;
const AC2_REL_TOL: f64 = 1e-4;
const AC2_INSTANCES: u64 = 120;
const AC2_BUDGET: Duration = Duration::from_secs(120);
const AC3_SOFTMAX_TOL: f64 = 1e-12;
const AC3_INSTANCES: u64 = 100;
const AC4_TOL: f64 = 1e-12;
const AC5_BUDGET: Duration = Duration::from_secs(600);
const AC6_SCRIPTS: u64 = 500;
const AC7_DECOMPOSITIONS: u64 = 1000;
const AC7_LS_TOL: f64 = 1e-8;
const AC7_AXIOM_TOL: f64 = 1e-12;
const AC7_SEEDS: u64 = 100;

const MICRO_CONFIG: &str = include_str!("../../../configs/micro.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(rows, cols, rand_vec(r, rows * cols, scale)).expect("shape")
}

// ---------------------------------------------------------------- AC1

fn ac1() -> Result<Outcome> {
    let t0 = Instant::now();
    let report = cli::cmd_param_count(None)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    let count = |name: &str| report.rows.iter().find(|r| r.component == name).map(|r| (r.count, r.relative_error()));
    let (text, _) = count("text encoder").unwrap_or((0, 1.0));
    let (fusion, _) = count("fusion encoder").unwrap_or((0, 1.0));
    let (image, image_err) = count("image encoder").unwrap_or((0, 1.0));
    let (decoder, decoder_err) = count("intention decoder").unwrap_or((0, 1.0));
    let total_err = (report.total as f64 - report.reference_total as f64).abs() / report.reference_total as f64;
    let pass = text == AC1_EXACT_TEXT
        && fusion == AC1_EXACT_FUSION
        && image_err <= AC1_REL_TOL
        && decoder_err <= AC1_REL_TOL
        && total_err <= AC1_REL_TOL
        && ms < 1000.0;
    Ok(outcome(
        pass,
        format!(
            "text {text}, fusion {fusion}, image {image} ({:.2}%), decoder {decoder} ({:.2}%), total {} ({:.2}%) in {ms:.2} ms",
            image_err * 100.0,
            decoder_err * 100.0,
            report.total,
            total_err * 100.0
        ),
    ))
}

// ---------------------------------------------------------------- AC2

const AC2_KINDS: [&str; 10] = [
    "attention",
    "masked attention",
    "cross attention",
    "multi-head",
    "encoder stack",
    "decoder stack",
    "rep + projection heads",
    "classifiers + signal loss",
    "contrastive",
    "stopping head loss",
];

fn toy_stack(d: usize, heads: usize, act: Activation) -> StackConfig {
    StackConfig {
        n_layers: 2,
        d_model: d,
        n_heads_self: heads,
        n_heads_cross: heads,
        d_ffn_inner: 2 * d,
        activation: act,
        layer_norm_epsilon: 1e-5,
    }
}

fn toy_family(r: &mut ChaCha8Rng) -> FamilySpec {
    let names = |p: &str, n: usize| (0..n).map(|k| format!("{p}{k}")).collect();
    FamilySpec {
        input: names("i", r.gen_range(1..=3)),
        process: names("p", r.gen_range(1..=3)),
        output: names("o", r.gen_range(1..=3)),
        max_count: r.gen_range(0..=2),
    }
}

fn random_tables(r: &mut ChaCha8Rng, fam: &FamilySpec) -> SignalTables {
    let mut t = |n: usize| CountTable((0..n).map(|_| r.gen_range(0..fam.classes())).collect());
    SignalTables { i: t(fam.input.len()), p: t(fam.process.len()), o: t(fam.output.len()) }
}

/// `Σ out ⊙ R` for a fixed random `R`: a generic scalar read-out.
fn probe(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var> {
    let r = g.constant(weights.clone());
    let m = g.mul(out, r)?;
    g.sum_all(m)
}

/// Builds one instance and returns its worst relative error.
fn ac2_instance(seed: u64) -> Result<f64> {
    let mut r = rng(0xAC2 ^ seed.wrapping_mul(0x9E37_79B9));
    let kind = (seed % AC2_KINDS.len() as u64) as usize;
    let d = if r.gen_bool(0.5) { 4 } else { 8 };
    let n = r.gen_range(1..=4);
    let init = Init::new(seed);
    let mut store = ParamStore::new();
    store.insert("x", rand_matrix(&mut r, d, n, 1.0));
    let mask = TrainMask::all();
    let check = |store: &ParamStore, f: &dyn Fn(&mut Graph) -> Result<Var>| -> Result<f64> {
        Ok(check_params(store, &mask, f)?.max_rel_error)
    };
    match kind {
        0 | 1 => {
            let d_k = r.gen_range(1..=d);
            let d_v = r.gen_range(1..=d);
            init_head(&init, &mut store, "a", d, d_k, d_v);
            let causal = kind == 1;
            let w = rand_matrix(&mut r, d_v, n, 1.0);
            check(&store, &|g| {
                let x = g.param("x")?;
                let out = g_attention(g, x, x, "a", causal)?;
                probe(g, out, &w)
            })
        }
        2 => {
            let m = r.gen_range(1..=4);
            store.insert("y", rand_matrix(&mut r, d, m, 1.0));
            init_head(&init, &mut store, "a", d, d, d);
            let w = rand_matrix(&mut r, d, n, 1.0);
            check(&store, &|g| {
                let x = g.param("x")?;
                let y = g.param("y")?;
                let out = g_attention(g, x, y, "a", false)?;
                probe(g, out, &w)
            })
        }
        3 => {
            let heads = 2;
            let causal = r.gen_bool(0.5);
            init_multi_head(&init, &mut store, "mh", d, heads);
            let w = rand_matrix(&mut r, d, n, 1.0);
            check(&store, &|g| {
                let x = g.param("x")?;
                let out = g_multi_head(g, x, x, "mh", heads, causal)?;
                probe(g, out, &w)
            })
        }
        4 => {
            let act = if r.gen_bool(0.5) { Activation::Gelu } else { Activation::Geglu };
            let cfg = toy_stack(d, 2, act);
            init_encoder(&init, &mut store, "enc", &cfg);
            let w = rand_matrix(&mut r, d, n, 1.0);
            check(&store, &|g| {
                let x = g.param("x")?;
                let out = g_encode(g, x, "enc", &cfg)?;
                probe(g, out, &w)
            })
        }
        5 => {
            let cfg = toy_stack(d, 2, Activation::Geglu);
            let m = r.gen_range(1..=4);
            store.insert("ctx", rand_matrix(&mut r, d, m, 1.0));
            init_decoder(&init, &mut store, "dec", &cfg);
            let w = rand_matrix(&mut r, d, n, 1.0);
            check(&store, &|g| {
                let x = g.param("x")?;
                let c = g.param("ctx")?;
                let out = g_decode(g, x, c, "dec", &cfg)?;
                probe(g, out, &w)
            })
        }
        6 => {
            for role in ["i", "p", "o"] {
                init.linear(&mut store, &format!("hd.{role}"), d, d);
            }
            let layout = if r.gen_bool(0.5) { RepLayout::Image } else { RepLayout::Text };
            let ws: Vec<Matrix> = (0..3).map(|_| rand_matrix(&mut r, d, 1, 1.0)).collect();
            check(&store, &|g| {
                let x = g.param("x")?;
                let rep = g_rep(g, x, &layout)?;
                let heads = g_heads(g, rep, "hd")?;
                let mut total = probe(g, heads[0], &ws[0])?;
                for k in 1..3 {
                    let t = probe(g, heads[k], &ws[k])?;
                    total = g.add(total, t)?;
                }
                Ok(total)
            })
        }
        7 => {
            let fam = toy_family(&mut r);
            let hidden = [Activation::Gelu, Activation::Relu, Activation::Softmax][r.gen_range(0..3)];
            for (k, role) in Role::ALL.iter().enumerate() {
                store.insert(format!("t{k}"), rand_matrix(&mut r, d, 1, 1.0));
                let rows = fam.elements(*role).len();
                init.mlp(
                    &mut store,
                    &format!("c.{}", role.key()),
                    &[d, 2 * d, rows * fam.classes()],
                    &classifier_activations(hidden),
                );
            }
            let truth = random_tables(&mut r, &fam);
            let w = LossWeights::default();
            let bounded = r.gen_bool(0.5);
            check(&store, &|g| {
                let triple = [g.param("t0")?, g.param("t1")?, g.param("t2")?];
                let c = ClassifierRef { prefix: "c", family: &fam, hidden };
                if bounded {
                    g_signal_loss(g, &triple, &truth, c, &w)
                } else {
                    let logits = g_logits(g, &triple, c)?;
                    g_inner_ce(g, &logits, [&truth.i.0, &truth.p.0, &truth.o.0])
                }
            })
        }
        8 => {
            let k = r.gen_range(2..=4);
            for a in 0..k {
                for c in 0..3 {
                    store.insert(format!("g{a}.{c}"), rand_matrix(&mut r, d, 1, 0.4));
                }
            }
            check(&store, &|g| {
                let mut triples = Vec::new();
                for a in 0..k {
                    triples.push([g.param(&format!("g{a}.0"))?, g.param(&format!("g{a}.1"))?, g.param(&format!("g{a}.2"))?]);
                }
                Ok(g_contrastive(g, &triples)?.expect("at least two intentions"))
            })
        }
        _ => {
            let steps = r.gen_range(1..=4);
            init.mlp(&mut store, "stop", &[d, d, 2], &STOP_ACTIVATIONS);
            let truth_len = r.gen_range(0..=4);
            let pred_len = r.gen_range(0..=steps);
            check(&store, &|g| {
                let x = g.param("x")?;
                let mut probs = vec![HeadProb::Fixed(1.0)];
                for t in 1..=steps {
                    let col = g.slice_cols(x, (t - 1) % n, 1)?;
                    let z = g.mlp(col, "stop", &STOP_ACTIVATIONS)?;
                    probs.push(HeadProb::Recorded(g.softmax(z, Axis::Cols)?));
                }
                Ok(g_head_loss(g, &probs, truth_len, pred_len)?.expect("at least one step"))
            })
        }
    }
}

fn ac2() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = 0;
    for seed in 0..AC2_INSTANCES {
        let kind = AC2_KINDS[(seed % AC2_KINDS.len() as u64) as usize];
        let err = ac2_instance(seed)?;
        if !(err < AC2_REL_TOL) {
            failures += 1;
        }
        let e = worst.entry(kind).or_insert(0.0);
        *e = e.max(err);
    }
    let elapsed = t0.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let (worst_kind, _) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    Ok(outcome(
        failures == 0 && elapsed < AC2_BUDGET,
        format!(
            "{AC2_INSTANCES} instances over {} operation kinds, {failures} above {AC2_REL_TOL:e}; worst rel err {max:.2e} ({worst_kind}) in {:.1}s",
            AC2_KINDS.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- AC3

fn ac3_softmax(seed: u64) -> Result<bool> {
    let mut r = rng(0xAC3 ^ seed);
    let (rows, cols) = (r.gen_range(1..=6), r.gen_range(1..=6));
    let x = rand_matrix(&mut r, rows, cols, [1.0, 10.0, 50.0][(seed % 3) as usize]);
    for axis in [Axis::Rows, Axis::Cols] {
        let s = softmax(&x, axis)?;
        if s.data().iter().any(|v| !(*v > 0.0)) {
            return Ok(false);
        }
        let (outer, inner) = match axis {
            Axis::Rows => (s.rows(), s.cols()),
            Axis::Cols => (s.cols(), s.rows()),
        };
        for a in 0..outer {
            let sum: f64 = (0..inner).map(|b| if axis == Axis::Rows { s.get(a, b) } else { s.get(b, a) }).sum();
            if (sum - 1.0).abs() > AC3_SOFTMAX_TOL {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn ac3_fusion(seed: u64) -> Result<bool> {
    let mut r = rng(0xF05 ^ seed);
    let d = 8;
    let segments = Modality::ALL.iter().map(|m| (*m, rand_vec(&mut r, d, 0.1))).collect();
    let encoder = EncoderParams::init(toy_stack(d, 2, Activation::Geglu), seed)?;
    let p = FusionParams { segments, encoder };
    let mut contexts = Vec::new();
    for m in Modality::ALL {
        if contexts.is_empty() || r.gen_bool(0.6) {
            let len = r.gen_range(1..=6);
            contexts.push((m, rand_matrix(&mut r, d, len, 1.0)));
        }
    }
    let expected: usize = contexts.iter().map(|(_, h)| h.cols()).sum();
    let out = fuse(&contexts, &p)?;
    let labels: Vec<Modality> = contexts.iter().flat_map(|(m, h)| std::iter::repeat(*m).take(h.cols())).collect();
    Ok(out.matrix.cols() == expected && out.matrix.rows() == d && out.segments == labels)
}

const WORDS: [&str; 8] = ["invoice", "approved", "total", "due", "payment", "ledger", "customer", "report"];

fn random_page(r: &mut ChaCha8Rng, patch: usize) -> Result<(Page, usize, usize)> {
    let side = 64u32;
    let mut elements = Vec::new();
    let (mut l_t, mut l_f) = (0, 0);
    let n_text = r.gen_range(0..=3);
    let n_image = if n_text == 0 { r.gen_range(1..=2) } else { r.gen_range(0..=2) };
    let tokenizer = Tokenizer::default();
    let bbox = |r: &mut ChaCha8Rng| -> Result<BoundingBox> {
        let x0 = r.gen_range(0..side - 16);
        let y0 = r.gen_range(0..side - 16);
        BoundingBox::new(x0, y0, x0 + r.gen_range(1..=16), y0 + r.gen_range(1..=16))
    };
    for _ in 0..n_text {
        let text: Vec<&str> = (0..r.gen_range(1..=5)).map(|_| WORDS[r.gen_range(0..WORDS.len())]).collect();
        let text = text.join(" ");
        l_t += tokenizer.tokenize(&text)?.len();
        elements.push(PageElement::Text { text, bbox: bbox(r)? });
    }
    for _ in 0..n_image {
        let (h, w) = (patch * r.gen_range(1..=3), patch * r.gen_range(1..=3));
        l_f += (h / patch) * (w / patch);
        let pixels = (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let image = ImageArtefact::new(3, h, w, pixels)?;
        elements.push(PageElement::Image { image, bbox: bbox(r)? });
    }
    Ok((Page { height: side, width: side, elements }, l_t, l_f))
}

fn document_front_end(seed: u64) -> Result<DocumentFrontEnd> {
    let mut r = rng(0xD0C ^ seed);
    let (d_t, d_f, patch) = (8, 6, 4);
    let tokenizer = Tokenizer::default();
    let lin = |r: &mut ChaCha8Rng, o: usize, i: usize| LinearParams::new(rand_matrix(r, o, i, 0.3), rand_vec(r, o, 0.1));
    Ok(DocumentFrontEnd {
        tokenizer,
        token_table: rand_matrix(&mut r, d_t, tokenizer.vocab_size(), 0.5),
        patch_size: patch,
        patch: lin(&mut r, d_f, 3 * patch * patch)?,
        patch_to_text: lin(&mut r, d_t, d_f)?,
        text_encoder: EncoderParams::init(toy_stack(d_t, 2, Activation::Gelu), seed)?,
    })
}

fn ac3_page(seed: u64, fe: &DocumentFrontEnd) -> Result<bool> {
    let mut r = rng(0xBA9E ^ seed);
    let (page, l_t, l_f) = random_page(&mut r, fe.patch_size)?;
    let (seq, comp) = fe.compose_document_page(&page)?;
    Ok(seq.matrix.cols() == 2 * (l_f + l_t) && comp.len == seq.matrix.cols())
}

fn prefix_equal(full: &Matrix, short: &Matrix) -> bool {
    short.rows() == full.rows() && (0..short.cols()).all(|c| full.col(c) == short.col(c))
}

fn ac3_causal(seed: u64) -> Result<bool> {
    let mut r = rng(0xCA5 ^ seed);
    let d = 8;
    let n = r.gen_range(2..=6);
    let t = r.gen_range(1..n);
    let x = rand_matrix(&mut r, d, n, 1.0);
    let xt = x.cols_range(0, t)?;
    let a = AttentionParams::init(seed, d, r.gen_range(1..=d), r.gen_range(1..=d));
    let attn = prefix_equal(&masked_self_attention(&x, &a)?, &masked_self_attention(&xt, &a)?);
    let dec = DecoderParams::init(toy_stack(d, 2, Activation::Geglu), seed)?;
    let m = r.gen_range(1..=4);
    let ctx = rand_matrix(&mut r, d, m, 1.0);
    let step = prefix_equal(&decode_step(&x, &ctx, &dec)?, &decode_step(&xt, &ctx, &dec)?);
    Ok(attn && step)
}

fn ac3() -> Result<Outcome> {
    let fe = document_front_end(3)?;
    let mut counts = [0u64; 4];
    for seed in 0..AC3_INSTANCES {
        counts[0] += ac3_softmax(seed)? as u64;
        counts[1] += ac3_fusion(seed)? as u64;
        counts[2] += ac3_page(seed, &fe)? as u64;
        counts[3] += ac3_causal(seed)? as u64;
    }
    let n = AC3_INSTANCES;
    Ok(outcome(
        counts.iter().all(|c| *c == n),
        format!(
            "softmax {}/{n}, fusion length {}/{n}, page law {}/{n}, causal truncation {}/{n}",
            counts[0], counts[1], counts[2], counts[3]
        ),
    ))
}

// ---------------------------------------------------------------- AC4

fn mlp_params(r: &mut ChaCha8Rng, dims: &[usize], acts: &[Activation], scale: f64) -> Result<MlpSpec> {
    let mut layers = Vec::new();
    for (k, act) in acts.iter().enumerate() {
        let params = LinearParams::new(rand_matrix(r, dims[k + 1], dims[k], scale), rand_vec(r, dims[k + 1], scale))?;
        layers.push(MlpLayer { activation: *act, params });
    }
    MlpSpec::new(layers)
}

fn ac4() -> Result<Outcome> {
    let w = LossWeights::default();
    let mut in_range = 0;
    let total = 200;
    let mut extremes = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..total {
        let mut r = rng(0xAC4 ^ seed);
        let fam = toy_family(&mut r);
        let d = 6;
        let scale = [0.5, 5.0, 50.0][(seed % 3) as usize];
        let acts = classifier_activations(Activation::Gelu);
        let head = |r: &mut ChaCha8Rng, role: Role| {
            mlp_params(r, &[d, 8, fam.elements(role).len() * fam.classes()], &acts, scale)
        };
        let cls = ClassifierSet {
            input: head(&mut r, Role::Input)?,
            process: head(&mut r, Role::Process)?,
            output: head(&mut r, Role::Output)?,
            family: fam.clone(),
            hidden: Activation::Gelu,
        };
        let pred = SignalTriple::new(rand_vec(&mut r, d, scale), rand_vec(&mut r, d, scale), rand_vec(&mut r, d, scale), Stage::Artefact)?;
        let truth = random_tables(&mut r, &fam);
        let s = signal_loss(&pred, &truth, &cls, &w)?;
        extremes = (extremes.0.min(s), extremes.1.max(s));
        if s > 0.0 && s < 1.0 {
            in_range += 1;
        }
    }
    let at_mu = bound(w.mu, w.lambda, w.mu);

    // |X_g| = 1, M = 0, uniform logits: each head costs ln 2.
    let hand_inner = 3.0 * std::f64::consts::LN_2;
    let hand = bound(hand_inner, 1.0, 0.5);
    let hand_oracle = 1.0 / (1.0 + (-(hand_inner - 0.5)).exp());
    let uniform_cls = {
        let zero_head = || -> Result<MlpSpec> {
            let layer = |o: usize, i: usize| LinearParams::new(Matrix::zeros(o, i), vec![0.0; o]);
            MlpSpec::new(vec![
                MlpLayer { activation: Activation::Gelu, params: layer(2, 2)? },
                MlpLayer { activation: Activation::Identity, params: layer(2, 2)? },
            ])
        };
        let one = |s: &str| vec![s.to_string()];
        ClassifierSet {
            input: zero_head()?,
            process: zero_head()?,
            output: zero_head()?,
            family: FamilySpec { input: one("a"), process: one("b"), output: one("c"), max_count: 0 },
            hidden: Activation::Gelu,
        }
    };
    let uniform_truth = SignalTables { i: CountTable(vec![1]), p: CountTable(vec![0]), o: CountTable(vec![1]) };
    let uniform_pred = SignalTriple::new(vec![1.0, -2.0], vec![0.5, 0.5], vec![3.0, 0.0], Stage::Artefact)?;
    let uniform = signal_loss(&uniform_pred, &uniform_truth, &uniform_cls, &w)?;

    let v = |x: &[f64]| SignalTriple::new(x.to_vec(), x.to_vec(), x.to_vec(), Stage::Intention);
    let a = v(&[0.3, -1.0])?;
    let identical = contrastive_loss(&[a.clone(), a.clone()]);
    let singleton = contrastive_loss(&[a.clone()]);
    let far = SignalTriple::new(vec![4f64.ln().sqrt(), 0.0], vec![0.0, 0.0], vec![0.0, 0.0], Stage::Intention)?;
    let origin = SignalTriple::new(vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], Stage::Intention)?;
    let quarter = contrastive_loss(&[far, origin]);
    let seq = sequence_loss(2.0 / 3.0, 3, 4, &w)?;
    let seq_oracle = 1.0 - (0.6 * (2.0 / 3.0) + 0.2 * 0.5 + 0.2 * 1.0);

    let checks = [
        in_range == total,
        at_mu == 0.5,
        (hand - hand_oracle).abs() <= AC4_TOL,
        (uniform - hand_oracle).abs() <= AC4_TOL,
        identical == 1.0,
        singleton == 0.0,
        (quarter - 0.25).abs() <= AC4_TOL,
        (seq - seq_oracle).abs() <= AC4_TOL && (seq - 0.3).abs() <= AC4_TOL,
    ];
    Ok(outcome(
        checks.iter().all(|c| *c),
        format!(
            "signal_loss in (0,1) {in_range}/{total} [min {:.3e}, max 1-{:.1e}], bound(mu) = {at_mu}, hand case {hand:.6} / classifier {uniform:.6}, contrastive identical {identical} singleton {singleton} ln4 {quarter:.15}, sequence {seq:.15}",
            extremes.0,
            1.0 - extremes.1
        ),
    ))
}

// ---------------------------------------------------------------- AC5

fn ac5() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = RunConfig::from_json(MICRO_CONFIG)?;
    let dir = tempfile::tempdir().map_err(|e| wintent::error::Error::io(std::path::Path::new("tempdir"), e))?;
    let p = |s: &str| dir.path().join(s);
    let corpus = cli::cmd_gen_corpus(&cfg, &p("corpus"))?;
    let single = corpus.samples.iter().all(|s| s.intentions.len() == 1);
    let s11 = cli::cmd_train(Phase::Stage1, Some(&cfg), &p("corpus"), None, &p("s11"))?;
    let s12 = cli::cmd_train(Phase::Stage2, None, &p("corpus"), Some(&p("s11").join(cli::CHECKPOINT_FILE)), &p("s12"))?;
    let p2 = cli::cmd_train(Phase::Intention, None, &p("corpus"), Some(&p("s12").join(cli::CHECKPOINT_FILE)), &p("p2"))?;
    let ck = p("p2").join(cli::CHECKPOINT_FILE);
    let report = cli::cmd_validate(&ck, &p("corpus"), &p("report"))?;
    let records = cli::cmd_infer(None, &ck, &p("corpus"), &p("infer"))?;

    let last_acc = |ck: &Checkpoint, m: Modality| {
        ck.history.last().and_then(|h| h.epochs.iter().filter(|e| e.modality == Some(m)).last()).map(|e| e.accuracy)
    };
    let stage1: Vec<f64> = Modality::ALL.iter().map(|m| last_acc(&s11, *m).unwrap_or(0.0)).collect();
    let stage2: Vec<f64> = Modality::ALL.iter().map(|m| last_acc(&s12, *m).unwrap_or(0.0)).collect();
    let s11_groups: Vec<String> = Phase::Stage1.trainable_groups();
    let hashes_kept = s11_groups
        .iter()
        .all(|g| s11.model.params.group_hash(g) == s12.model.params.group_hash(g))
        && s12.history.last().is_some_and(|h| h.frozen_hashes_before == h.frozen_hashes_after);
    let p2_metrics = report.phase2.as_ref().map(|p| p.metrics.clone());
    let coverage = p2_metrics.as_ref().map_or(0.0, |m| m.coverage);
    let stops = records
        .iter()
        .filter(|r| {
            r.intentions.stop_reason == StopReason::Head
                && r.intentions.len() == 1
                && r.intentions.gate_log.last().is_some_and(|g| g.step == 2 && !g.head_accept)
        })
        .count();
    let elapsed = t0.elapsed();
    let pass = single
        && corpus.samples.len() == 8
        && stage1.iter().all(|a| *a == 1.0)
        && stage2.iter().all(|a| *a == 1.0)
        && hashes_kept
        && p2.completed(Phase::Intention)
        && coverage == 1.0
        && stops == records.len()
        && elapsed < AC5_BUDGET;
    Ok(outcome(
        pass,
        format!(
            "stage 1.1 acc (text, image, document) {stage1:?}, stage 1.2 acc {stage2:?}, stage-1 hashes unchanged {hashes_kept}, phase 2 coverage {coverage} at tau_gamma {}, head stop at t=2 {stops}/{} in {:.0}s",
            cfg.losses.tau_gamma,
            records.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- AC6

/// Per-step behaviour of the scripted stub.
#[derive(Clone)]
struct ScriptStep {
    accept_prob: f64,
    triple: [Vec<f64>; 3],
}

struct ScriptedStepper {
    script: Vec<ScriptStep>,
}

impl Stepper for ScriptedStepper {
    type Handle = Vec<f64>;

    fn bos(&mut self) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn decode_last(&mut self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(vec![sequence.len() as f64])
    }

    fn project(&mut self, s_last: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(s_last.clone())
    }

    fn accept_prob(&mut self, s_last: &Vec<f64>) -> Result<f64> {
        Ok(self.script[s_last[0] as usize - 1].accept_prob)
    }

    fn heads(&mut self, gamma: &Vec<f64>) -> Result<[Vec<f64>; 3]> {
        let t = gamma[0] as usize - 1;
        let [i, p, o] = &self.script[t].triple;
        Ok([i.clone(), p.clone(), o.clone()])
    }

    fn read(&self, h: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(h.clone())
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Hand-written generation loop: returns accepted step indices, stop reason
/// and the probability consulted at each step.
fn oracle_loop(script: &[ScriptStep], tau_sim: f64, t_max: usize) -> (Vec<usize>, StopReason, Vec<f64>) {
    let mut kept: Vec<usize> = Vec::new();
    let mut probs = Vec::new();
    let mut t = 1;
    loop {
        if t > t_max {
            return (kept, StopReason::HardLimit, probs);
        }
        let p = if t == 1 { 1.0 } else { script[t - 1].accept_prob };
        probs.push(p);
        if t > 1 && p <= 0.5 {
            return (kept, StopReason::Head, probs);
        }
        if t > 1 {
            let me = &script[t - 1].triple;
            let sim = kept
                .iter()
                .map(|k| {
                    let other = &script[k - 1].triple;
                    (cos(&me[0], &other[0]) + cos(&me[1], &other[1]) + cos(&me[2], &other[2])) / 3.0
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if sim >= tau_sim {
                return (kept, StopReason::Redundancy, probs);
            }
        }
        kept.push(t);
        t += 1;
    }
}

fn random_script(r: &mut ChaCha8Rng, len: usize, d: usize) -> Vec<ScriptStep> {
    let mut steps: Vec<ScriptStep> = Vec::new();
    for t in 0..len {
        let accept_prob = [0.0, 0.2, 0.5, 0.5000001, 0.8, 1.0][r.gen_range(0..6)];
        let triple = if t > 0 && r.gen_bool(0.25) {
            // Duplicate of an earlier step up to a positive scale.
            let src = &steps[r.gen_range(0..t)].triple;
            let c = r.gen_range(0.5..2.0);
            [0, 1, 2].map(|k| src[k].iter().map(|v| v * c).collect())
        } else {
            [0, 1, 2].map(|_| rand_vec(r, d, 1.0))
        };
        steps.push(ScriptStep { accept_prob, triple });
    }
    steps
}

fn run_script(script: &[ScriptStep], tau_sim: f64, t_max: usize) -> Result<bool> {
    let cfg = StoppingConfig { tau_sim, t_max };
    let trace = generate_with(&mut ScriptedStepper { script: script.to_vec() }, &cfg)?;
    let (kept, reason, probs) = oracle_loop(script, tau_sim, t_max);
    let got: Vec<usize> = trace.set.intentions.iter().map(|i| i.step).collect();
    let triples_match = trace
        .set
        .intentions
        .iter()
        .all(|i: &Intention| [&i.i, &i.p, &i.o].iter().zip(&script[i.step - 1].triple).all(|(a, b)| *a == b));
    Ok(got == kept && trace.set.stop_reason == reason && trace.probs == probs && triples_match)
}

fn ac6() -> Result<Outcome> {
    let mut r = rng(0xAC6);
    let d = 4;
    let mut passed = 0;
    for k in 0..AC6_SCRIPTS {
        let t_max = r.gen_range(1..=6);
        let tau = if k % 2 == 0 { 0.99 } else { r.gen_range(0.3..1.0) };
        let script = random_script(&mut r, t_max, d);
        passed += run_script(&script, tau, t_max)? as u64;
    }

    // Forced first step: a zero accept probability at t = 1 is never consulted.
    let mut forced = random_script(&mut r, 3, d);
    forced[0].accept_prob = 0.0;
    forced[1].accept_prob = 0.0;
    let f = generate_with(&mut ScriptedStepper { script: forced.clone() }, &StoppingConfig { tau_sim: 0.99, t_max: 3 })?;
    let forced_ok = f.set.len() == 1 && f.set.stop_reason == StopReason::Head && f.probs == vec![1.0, 0.0];

    // Exact duplicate at step 2 stops on redundancy at tau_sim = 0.99.
    let mut dup = random_script(&mut r, 3, d);
    dup[1] = ScriptStep { accept_prob: 0.9, triple: dup[0].triple.clone() };
    let rd = generate_with(&mut ScriptedStepper { script: dup }, &StoppingConfig { tau_sim: 0.99, t_max: 3 })?;
    let dup_ok = rd.set.len() == 1 && rd.set.stop_reason == StopReason::Redundancy;

    // Hard limit: always-accepting, never-redundant script.
    let mut open = random_script(&mut r, 4, 8);
    for (t, s) in open.iter_mut().enumerate() {
        s.accept_prob = 1.0;
        s.triple = [0, 1, 2].map(|_| (0..8).map(|j| if j == t { 1.0 } else { 0.0 }).collect());
    }
    let hl = generate_with(&mut ScriptedStepper { script: open }, &StoppingConfig { tau_sim: 0.99, t_max: 4 })?;
    let limit_ok = hl.set.len() == 4 && hl.set.stop_reason == StopReason::HardLimit;

    // Stopping head with hand-set weights: logits (0,0) stop, (-2,2) accept.
    let head = |a: f64| -> Result<MlpSpec> {
        MlpSpec::new(vec![
            MlpLayer { activation: Activation::Relu, params: LinearParams::new(Matrix::identity(1), vec![0.0])? },
            MlpLayer { activation: Activation::Identity, params: LinearParams::new(Matrix::new(2, 1, vec![-a, a])?, vec![0.0, 0.0])? },
        ])
    };
    let (stop_flat, p_flat) = stopping_head(&[1.0], &head(0.0)?, 2)?;
    let (acc, p_acc) = stopping_head(&[1.0], &head(2.0)?, 2)?;
    let p_oracle = 2f64.exp() / (2f64.exp() + (-2f64).exp());
    let head_ok = !stop_flat && p_flat == 0.5 && acc && (p_acc - p_oracle).abs() < 1e-15 && (p_acc - 0.982).abs() < 5e-4;

    Ok(outcome(
        passed == AC6_SCRIPTS && forced_ok && dup_ok && limit_ok && head_ok,
        format!(
            "{passed}/{AC6_SCRIPTS} random scripts match the oracle loop; forced first step {forced_ok}, duplicate stop {dup_ok}, hard limit {limit_ok}, head logits (0,0)->{p_flat} stop / (-2,2)->{p_acc:.4} accept {head_ok}"
        ),
    ))
}

// ---------------------------------------------------------------- AC7

fn random_family(r: &mut ChaCha8Rng, n: usize, d: usize, cfg: &AlgebraConfig) -> Result<GenerativeFamily> {
    GenerativeFamily::new(Role::Input, (0..n).map(|_| rand_vec(r, d, 1.0)).collect(), cfg)
}

fn nalgebra_ls(x: &[f64], fam: &GenerativeFamily, d: usize) -> Vec<f64> {
    let cols: Vec<DVector<f64>> = fam.vectors().map(DVector::from_row_slice).collect();
    let e = DMatrix::from_columns(&cols);
    let gram = e.transpose() * &e;
    let rhs = e.transpose() * DVector::from_row_slice(x);
    let _ = d;
    gram.lu().solve(&rhs).expect("well-conditioned family").iter().cloned().collect()
}

fn ac7() -> Result<Outcome> {
    let cfg = AlgebraConfig::default();
    let mut terminated = 0;
    let mut max_iters = 0;
    for seed in 0..AC7_DECOMPOSITIONS {
        let mut r = rng(0xAC7 ^ seed);
        let d = r.gen_range(1..=8);
        let n = r.gen_range(0..=d + 2);
        let fam = random_family(&mut r, n, d, &cfg)?;
        let x = if n > 0 && r.gen_bool(0.3) {
            let alpha = rand_vec(&mut r, n, 1.0);
            fam.combine(&alpha, d)?
        } else {
            rand_vec(&mut r, d, 1.0)
        };
        match decompose_with_error(&x, &fam) {
            Ok(out) => {
                max_iters = max_iters.max(out.iterations);
                if out.iterations <= cfg.max_iterations {
                    terminated += 1;
                }
            }
            Err(e) => return Err(e),
        }
    }

    let mut ls_worst: f64 = 0.0;
    for seed in 0..200 {
        let mut r = rng(0x15 ^ seed);
        let d = r.gen_range(2..=8);
        let n = r.gen_range(1..=d);
        let fam = random_family(&mut r, n, d, &cfg)?;
        let x = rand_vec(&mut r, d, 1.0);
        let ours = least_squares(&x, &fam)?.coefficients;
        let oracle = nalgebra_ls(&x, &fam, d);
        for (a, b) in ours.iter().zip(&oracle) {
            ls_worst = ls_worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    let mut rank_ok = 0;
    let rank_trials = 200;
    for seed in 0..rank_trials {
        let mut r = rng(0x6A ^ seed);
        let d = r.gen_range(2..=8);
        let rank = r.gen_range(1..=d);
        let n = r.gen_range(rank..=rank + 4);
        let base: Vec<Vec<f64>> = (0..rank).map(|_| rand_vec(&mut r, d, 1.0)).collect();
        let mut vectors: Vec<Vec<f64>> = base.clone();
        while vectors.len() < n {
            let c = rand_vec(&mut r, rank, 1.0);
            vectors.push((0..d).map(|j| (0..rank).map(|k| c[k] * base[k][j]).sum()).collect());
        }
        // Shuffle so dependent vectors are not always last.
        for i in (1..vectors.len()).rev() {
            vectors.swap(i, r.gen_range(0..=i));
        }
        let cols: Vec<DVector<f64>> = vectors.iter().map(|v| DVector::from_row_slice(v)).collect();
        let oracle_rank = DMatrix::from_columns(&cols).rank(1e-8);
        let fam = GenerativeFamily::new(Role::Process, vectors, &cfg)?;
        let survivors = gram_schmidt_control(&fam).len();
        rank_ok += (survivors == rank && oracle_rank == rank) as u64;
    }

    let mut axioms_ok = 0;
    for seed in 0..AC7_SEEDS {
        let mut r = rng(0xA7 ^ seed);
        let d = r.gen_range(1..=8);
        let iv = |r: &mut ChaCha8Rng| Intention { step: 1, i: rand_vec(r, d, 1.0), p: rand_vec(r, d, 1.0), o: rand_vec(r, d, 1.0) };
        let (a, b, c) = (iv(&mut r), iv(&mut r), iv(&mut r));
        let (s, t) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
        let close = |x: &Intention, y: &Intention| {
            [(&x.i, &y.i), (&x.p, &y.p), (&x.o, &y.o)]
                .iter()
                .all(|(u, v)| u.iter().zip(v.iter()).all(|(p, q)| (p - q).abs() <= AC7_AXIOM_TOL))
        };
        let zero = intention_zero(d);
        let ok = close(&intention_add(&a, &b)?, &intention_add(&b, &a)?)
            && close(&intention_add(&intention_add(&a, &b)?, &c)?, &intention_add(&a, &intention_add(&b, &c)?)?)
            && close(&intention_add(&a, &zero)?, &a)
            && close(&intention_add(&a, &intention_scale(-1.0, &a))?, &zero)
            && close(&intention_scale(s, &intention_add(&a, &b)?), &intention_add(&intention_scale(s, &a), &intention_scale(s, &b))?)
            && close(&intention_scale(s + t, &a), &intention_add(&intention_scale(s, &a), &intention_scale(t, &a))?)
            && close(&intention_scale(s * t, &a), &intention_scale(s, &intention_scale(t, &a)))
            && close(&intention_scale(1.0, &a), &a);
        axioms_ok += ok as u64;
    }

    Ok(outcome(
        terminated == AC7_DECOMPOSITIONS && ls_worst <= AC7_LS_TOL && rank_ok == rank_trials && axioms_ok == AC7_SEEDS,
        format!(
            "decompositions terminated {terminated}/{AC7_DECOMPOSITIONS} (max {max_iters} iterations, M_max {}), least squares worst diff {ls_worst:.1e}, Gram-Schmidt survivors = rank {rank_ok}/{rank_trials}, vector-space axioms {axioms_ok}/{AC7_SEEDS}",
            cfg.max_iterations
        ),
    ))
}

// ---------------------------------------------------------------- AC8

fn end_to_end(root: &std::path::Path, cfg: &RunConfig) -> Result<()> {
    let p = |s: &str| root.join(s);
    cli::cmd_gen_corpus(cfg, &p("corpus"))?;
    cli::cmd_train(Phase::Stage1, Some(cfg), &p("corpus"), None, &p("s11"))?;
    cli::cmd_train(Phase::Stage2, None, &p("corpus"), Some(&p("s11").join(cli::CHECKPOINT_FILE)), &p("s12"))?;
    cli::cmd_train(Phase::Intention, None, &p("corpus"), Some(&p("s12").join(cli::CHECKPOINT_FILE)), &p("p2"))?;
    cli::cmd_infer(None, &p("p2").join(cli::CHECKPOINT_FILE), &p("corpus"), &p("infer"))?;
    Ok(())
}

fn tree(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir").flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").display().to_string();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn ac8() -> Result<Outcome> {
    let mut cfg = RunConfig::from_json(MICRO_CONFIG)?;
    cfg.corpus.samples = 4;
    cfg.corpus.max_intentions = 2;
    cfg.train.epochs_stage1 = 3;
    cfg.train.epochs_stage2 = 3;
    cfg.train.epochs_phase2 = 3;
    let io = |e| wintent::error::Error::io(std::path::Path::new("tempdir"), e);
    let (a, b) = (tempfile::tempdir().map_err(io)?, tempfile::tempdir().map_err(io)?);
    end_to_end(a.path(), &cfg)?;
    end_to_end(b.path(), &cfg)?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&String> = ta.iter().filter(|(k, v)| tb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let bytes: usize = ta.values().map(Vec::len).sum();
    Ok(outcome(
        differing.is_empty() && ta.len() == tb.len() && !ta.is_empty(),
        format!("{} files ({bytes} bytes) per run, differing: {differing:?}", ta.len()),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 8] = [
        ("AC1", ac1),
        ("AC2", ac2),
        ("AC3", ac3),
        ("AC4", ac4),
        ("AC5", ac5),
        ("AC6", ac6),
        ("AC7", ac7),
        ("AC8", ac8),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let t0 = Instant::now();
        let (status, detail) = match f() {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{name} {status} {detail} [{:.1}s]", t0.elapsed().as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
