//! The full parameter layout and graph-level forward passes for every
//! training stage and for inference.
//!
//! Parameter groups:
//! - `tok.text`: frozen token table shared by text and documents.
//! - `s11.{modality}`: per-artefact encoder, unifier, heads, classifiers
//!   (plus patch projections for images and documents).
//! - `s12.{modality}`: intra-modality encoder, unifier, heads, classifiers.
//! - `p2`: segment vectors, fusion encoder, `[BOS]`, decoder, `W_γ`,
//!   intention heads, stopping head and intention classifiers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artefacts::{
    g_compose_document, g_embed_patches, g_embed_text, patch_image, Artefact, ArtefactContent, DocumentNames, Modality,
    SpatialEmbedder, Tokenizer,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::intention::{generate_with, Stepper, StoppingConfig, Trace, STOP_ACTIVATIONS};
use crate::losses::{
    g_contrastive, g_head_loss, g_signal_objective, HeadProb, LossWeights, SignalObjective, SignalTables, classifier_activations,
};
use crate::numerics::{Axis, Matrix, Var};
use crate::params::{Graph, Init, ParamStore, TrainMask};
use crate::signals::{g_fuse, g_heads, g_intra, g_rep, segment_name, triple_value, RepLayout, SignalTriple, Stage};
use crate::stack::{g_decode, g_encode, init_decoder, init_encoder, StackConfig};

pub const TOKEN_TABLE: &str = "tok.text.table";
pub const PHASE2: &str = "p2";

pub fn stage1_group(m: Modality) -> String {
    format!("s11.{m}")
}

pub fn stage2_group(m: Modality) -> String {
    format!("s12.{m}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

/// A stage-1 encoding held on a graph.
pub struct Encoded {
    pub h: Var,
    pub layout: RepLayout,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let tokenizer = c.tokenizer();
        s.insert(TOKEN_TABLE, init.uniform(TOKEN_TABLE, c.d_text, tokenizer.vocab_size(), 1.0));
        let patch_in = c.image_channels * c.patch_size * c.patch_size;
        for m in Modality::ALL {
            let width = c.modality_width(m);
            let encoder = c.stage1_encoder(m);
            for stage in ["s11", "s12"] {
                let p = format!("{stage}.{m}");
                init_encoder(&init, &mut s, &format!("{p}.enc"), encoder);
                init.linear(&mut s, &format!("{p}.unify"), c.d, width);
                c.init_heads(&init, &mut s, &format!("{p}.heads"));
                c.init_classifiers(&init, &mut s, &format!("{p}.cls"));
            }
            let seg = segment_name(PHASE2, m);
            s.insert(&seg, init.matrix(&seg, c.d, 1));
        }
        init.linear(&mut s, "s11.image.patch", c.d_image, patch_in);
        init.linear(&mut s, "s11.document.patch", c.d_image, patch_in);
        init.linear(&mut s, "s11.document.ptt", c.d_text, c.d_image);
        init_encoder(&init, &mut s, &format!("{PHASE2}.fusion"), &c.fusion_encoder);
        s.insert(format!("{PHASE2}.bos"), init.uniform(&format!("{PHASE2}.bos"), c.d, 1, 1.0));
        init_decoder(&init, &mut s, &format!("{PHASE2}.dec"), &c.decoder);
        init.linear(&mut s, &format!("{PHASE2}.gamma"), c.d, c.d);
        c.init_heads(&init, &mut s, &format!("{PHASE2}.heads"));
        init.mlp(&mut s, &format!("{PHASE2}.stop"), &[c.d, c.stop_hidden, 2], &STOP_ACTIVATIONS);
        c.init_classifiers(&init, &mut s, &format!("{PHASE2}.cls"));
        Ok(Model { config, seed, params: s })
    }

    /// Stage-1 encoding of one artefact (before unification). Document box
    /// embeddings come from the stage-1 text encoder as constants.
    pub fn spatial_embedder(&self) -> SpatialEmbedder {
        let c = &self.config;
        SpatialEmbedder::new(TOKEN_TABLE, "s11.text.enc", c.text_encoder.clone(), c.tokenizer())
    }

    pub fn g_encode_artefact(&self, g: &mut Graph, art: &Artefact, spatial: &mut SpatialEmbedder) -> Result<Encoded> {
        let c = &self.config;
        let m = art.modality();
        let (e, layout) = match &art.content {
            ArtefactContent::Text(t) => {
                let tokens = c.tokenizer().tokenize(&t.content)?;
                (g_embed_text(g, &tokens, TOKEN_TABLE)?, RepLayout::Text)
            }
            ArtefactContent::Image(img) => {
                let patches = patch_image(img, c.patch_size)?;
                (g_embed_patches(g, &patches, "s11.image.patch")?, RepLayout::Image)
            }
            ArtefactContent::Document(doc) => {
                let names = DocumentNames {
                    table: TOKEN_TABLE.into(),
                    patch: "s11.document.patch".into(),
                    patch_to_text: "s11.document.ptt".into(),
                    patch_size: c.patch_size,
                };
                let (e, comp) = g_compose_document(g, doc, &names, &c.tokenizer(), spatial)?;
                (e, RepLayout::Document(comp))
            }
        };
        let h = g_encode(g, e, &format!("s11.{m}.enc"), c.stage1_encoder(m))?;
        Ok(Encoded { h, layout })
    }

    /// Stage-1 signal triple of one artefact on the graph.
    pub fn g_artefact_signals(&self, g: &mut Graph, art: &Artefact, spatial: &mut SpatialEmbedder) -> Result<[Var; 3]> {
        let m = art.modality();
        let enc = self.g_encode_artefact(g, art, spatial)?;
        let u = g.linear(enc.h, &format!("s11.{m}.unify"))?;
        let rep = g_rep(g, u, &enc.layout)?;
        g_heads(g, rep, &format!("s11.{m}.heads"))
    }

    pub fn g_stage1_loss(
        &self,
        g: &mut Graph,
        art: &Artefact,
        truth: &SignalTables,
        w: &LossWeights,
        objective: SignalObjective,
        spatial: &mut SpatialEmbedder,
    ) -> Result<Var> {
        truth.validate(&self.config.family)?;
        let triple = self.g_artefact_signals(g, art, spatial)?;
        let m = art.modality();
        let prefix = format!("s11.{m}.cls");
        g_signal_objective(g, &triple, truth, self.config.classifiers(&prefix), w, objective)
    }

    /// Stage-1 encoder output of one artefact, as plain values.
    pub fn encode_artefact(&self, art: &Artefact, spatial: &mut SpatialEmbedder) -> Result<Matrix> {
        self.frozen(|g, model| {
            let enc = model.g_encode_artefact(g, art, spatial)?;
            Ok(g.value(enc.h)?.clone())
        })
    }

    pub fn artefact_signals(&self, art: &Artefact, spatial: &mut SpatialEmbedder) -> Result<SignalTriple> {
        self.frozen(|g, model| {
            let t = model.g_artefact_signals(g, art, spatial)?;
            triple_value(g, &t, Stage::Artefact)
        })
    }

    /// Intra-modality signals from cached stage-1 encodings of one set.
    pub fn g_intra_signals(&self, g: &mut Graph, m: Modality, encoded: &[Matrix]) -> Result<(Var, [Var; 3])> {
        if encoded.is_empty() {
            return Err(Error::Empty("intra-modality set"));
        }
        let blocks: Vec<Var> = encoded.iter().map(|e| g.constant(e.clone())).collect();
        let cat = g.concat_cols(&blocks)?;
        g_intra(g, cat, &stage2_group(m), self.config.stage1_encoder(m))
    }

    pub fn g_stage2_loss(
        &self,
        g: &mut Graph,
        m: Modality,
        encoded: &[Matrix],
        truth: &SignalTables,
        w: &LossWeights,
        objective: SignalObjective,
    ) -> Result<Var> {
        truth.validate(&self.config.family)?;
        let (_, triple) = self.g_intra_signals(g, m, encoded)?;
        let prefix = format!("s12.{m}.cls");
        g_signal_objective(g, &triple, truth, self.config.classifiers(&prefix), w, objective)
    }

    pub fn intra_signals(&self, m: Modality, encoded: &[Matrix]) -> Result<(Matrix, SignalTriple)> {
        self.frozen(|g, model| {
            let (h, t) = model.g_intra_signals(g, m, encoded)?;
            Ok((g.value(h)?.clone(), triple_value(g, &t, Stage::Intra)?))
        })
    }

    /// `H_intra` per modality present among `artefacts`, in modality order,
    /// with artefacts kept in input order inside each block.
    pub fn intra_contexts(&self, artefacts: &[&Artefact], spatial: &mut SpatialEmbedder) -> Result<Vec<(Modality, Matrix)>> {
        Ok(self.intra_views(artefacts, spatial)?.into_iter().map(|(m, h, _)| (m, h)).collect())
    }

    /// Like [`Model::intra_contexts`], also returning each block's intra
    /// signal triple.
    pub fn intra_views(
        &self,
        artefacts: &[&Artefact],
        spatial: &mut SpatialEmbedder,
    ) -> Result<Vec<(Modality, Matrix, SignalTriple)>> {
        let mut by_modality: BTreeMap<Modality, Vec<Matrix>> = BTreeMap::new();
        for a in artefacts {
            by_modality.entry(a.modality()).or_default().push(self.encode_artefact(a, spatial)?);
        }
        by_modality
            .into_iter()
            .map(|(m, enc)| {
                let (h, t) = self.intra_signals(m, &enc)?;
                Ok((m, h, t))
            })
            .collect()
    }

    pub fn g_context(&self, g: &mut Graph, contexts: &[(Modality, Matrix)]) -> Result<Var> {
        let blocks: Vec<(Modality, Var)> = contexts.iter().map(|(m, h)| (*m, g.constant(h.clone()))).collect();
        Ok(g_fuse(g, &blocks, PHASE2, &self.config.fusion_encoder)?.0)
    }

    /// Runs generation on `g` against the fused context.
    pub fn g_generate(
        &self,
        g: &mut Graph,
        contexts: &[(Modality, Matrix)],
        stopping: &StoppingConfig,
    ) -> Result<(Trace<Var>, Vec<HeadProb>)> {
        let ctx = self.g_context(g, contexts)?;
        let mut stepper = GraphStepper {
            g,
            ctx,
            decoder: &self.config.decoder,
            recorded: Vec::new(),
        };
        let trace = generate_with(&mut stepper, stopping)?;
        let mut probs = Vec::with_capacity(trace.probs.len());
        let mut recorded = stepper.recorded.into_iter();
        for (t, p) in trace.probs.iter().enumerate() {
            probs.push(if t == 0 {
                HeadProb::Fixed(*p)
            } else {
                HeadProb::Recorded(recorded.next().ok_or(Error::Empty("recorded head probability"))?)
            });
        }
        Ok((trace, probs))
    }

    /// Differentiable phase-2 objective plus its reported components.
    pub fn g_phase2_loss(
        &self,
        g: &mut Graph,
        contexts: &[(Modality, Matrix)],
        truth: &[SignalTables],
        stopping: &StoppingConfig,
        w: &LossWeights,
        objective: SignalObjective,
    ) -> Result<(Var, Trace<Var>)> {
        if truth.is_empty() {
            return Err(Error::Data("sample without ground-truth intentions".into()));
        }
        for t in truth {
            t.validate(&self.config.family)?;
        }
        let (trace, probs) = self.g_generate(g, contexts, stopping)?;
        let pred_len = trace.accepted.len();
        let mut total = g_head_loss(g, &probs, truth.len(), pred_len)?.ok_or(Error::Empty("head loss"))?;
        if let Some(c) = g_contrastive(g, &trace.accepted)? {
            total = g.add(total, c)?;
        }
        let matched = pred_len.min(truth.len());
        if matched > 0 && w.aux_signal_weight > 0.0 {
            let mut aux = None;
            for k in 0..matched {
                let cls = format!("{PHASE2}.cls");
                let l = g_signal_objective(g, &trace.accepted[k], &truth[k], self.config.classifiers(&cls), w, objective)?;
                aux = Some(match aux {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            let aux = g.scale(aux.expect("matched > 0"), w.aux_signal_weight / matched as f64)?;
            total = g.add(total, aux)?;
        }
        Ok((total, trace))
    }

    pub fn generate(&self, contexts: &[(Modality, Matrix)], stopping: &StoppingConfig) -> Result<Trace<Vec<f64>>> {
        self.frozen(|g, model| {
            let (trace, _) = model.g_generate(g, contexts, stopping)?;
            let accepted = trace
                .accepted
                .iter()
                .map(|h| Ok([g.value(h[0])?.col(0), g.value(h[1])?.col(0), g.value(h[2])?.col(0)]))
                .collect::<Result<Vec<_>>>()?;
            Ok(Trace { set: trace.set, accepted, probs: trace.probs })
        })
    }

    fn frozen<T>(&self, f: impl FnOnce(&mut Graph, &Model) -> Result<T>) -> Result<T> {
        let mask = TrainMask::frozen();
        let mut g = Graph::new(&self.params, &mask);
        f(&mut g, self)
    }
}

/// Decoder stepping on a gradient graph. Records each stopping-head
/// softmax column so the head loss can reach it.
struct GraphStepper<'g, 'a> {
    g: &'g mut Graph<'a>,
    ctx: Var,
    decoder: &'g StackConfig,
    recorded: Vec<Var>,
}

impl Stepper for GraphStepper<'_, '_> {
    type Handle = Var;

    fn bos(&mut self) -> Result<Var> {
        self.g.param(&format!("{PHASE2}.bos"))
    }

    fn decode_last(&mut self, sequence: &[Var]) -> Result<Var> {
        let s = self.g.concat_cols(sequence)?;
        let out = g_decode(self.g, s, self.ctx, &format!("{PHASE2}.dec"), self.decoder)?;
        self.g.slice_cols(out, sequence.len() - 1, 1)
    }

    fn project(&mut self, s_last: &Var) -> Result<Var> {
        self.g.linear(*s_last, &format!("{PHASE2}.gamma"))
    }

    fn accept_prob(&mut self, s_last: &Var) -> Result<f64> {
        let logits = self.g.mlp(*s_last, &format!("{PHASE2}.stop"), &STOP_ACTIVATIONS)?;
        let probs = self.g.softmax(logits, Axis::Cols)?;
        self.recorded.push(probs);
        Ok(self.g.value(probs)?.get(1, 0))
    }

    fn heads(&mut self, gamma: &Var) -> Result<[Var; 3]> {
        g_heads(self.g, *gamma, &format!("{PHASE2}.heads"))
    }

    fn read(&self, h: &Var) -> Result<Vec<f64>> {
        Ok(self.g.value(*h)?.col(0))
    }
}

impl ModelConfig {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer { hash_buckets: self.hash_buckets }
    }

    /// Width of a modality's stage-1 encoding.
    pub fn modality_width(&self, m: Modality) -> usize {
        match m {
            Modality::Image => self.d_image,
            Modality::Text | Modality::Document => self.d_text,
        }
    }

    pub fn stage1_encoder(&self, m: Modality) -> &StackConfig {
        match m {
            Modality::Text => &self.text_encoder,
            Modality::Image => &self.image_encoder,
            Modality::Document => &self.document_encoder,
        }
    }

    fn init_heads(&self, init: &Init, store: &mut ParamStore, prefix: &str) {
        for k in ["i", "p", "o"] {
            init.linear(store, &format!("{prefix}.{k}"), self.d, self.d);
        }
    }

    fn init_classifiers(&self, init: &Init, store: &mut ParamStore, prefix: &str) {
        use crate::signals::Role;
        for role in Role::ALL {
            let out = self.family.elements(role).len() * self.family.classes();
            let dims = [self.d, self.classifier_inner, out];
            init.mlp(store, &format!("{prefix}.{}", role.key()), &dims, &classifier_activations(self.classifier_activation));
        }
    }
}
