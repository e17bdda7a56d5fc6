//! Artefact types and modality front ends: the toy text tokenizer, text
//! and patch embedders, and document page composition with spatial box
//! embeddings.

use std::collections::HashMap;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sinusoidal, LinearParams, Matrix, Var};
use crate::params::{fnv1a, Graph, ParamStore, TrainMask};
use crate::stack::{g_encode, EncoderParams, StackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Document,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Document];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Document => "document",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "document" => Ok(Modality::Document),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextArtefact {
    pub content: String,
}

/// `channels × height × width` pixels in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawImage", into = "RawImage")]
pub struct ImageArtefact {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PixelData {
    Nested(Vec<Vec<Vec<f64>>>),
    Base64 { base64: String },
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    channels: usize,
    height: usize,
    width: usize,
    data: PixelData,
}

impl TryFrom<RawImage> for ImageArtefact {
    type Error = Error;

    fn try_from(raw: RawImage) -> Result<Self> {
        let data = match raw.data {
            PixelData::Nested(planes) => planes.into_iter().flatten().flatten().collect(),
            PixelData::Base64 { base64 } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(base64)
                    .map_err(|e| Error::Data(format!("image base64: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::Data("image base64 payload is not a whole number of f64".into()));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect()
            }
        };
        ImageArtefact::new(raw.channels, raw.height, raw.width, data)
    }
}

impl From<ImageArtefact> for RawImage {
    fn from(img: ImageArtefact) -> Self {
        let planes = (0..img.channels)
            .map(|c| (0..img.height).map(|y| img.row(c, y).to_vec()).collect())
            .collect();
        RawImage {
            channels: img.channels,
            height: img.height,
            width: img.width,
            data: PixelData::Nested(planes),
        }
    }
}

impl ImageArtefact {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::Data(format!(
                "image {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageArtefact { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        ImageArtefact::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn row(&self, c: usize, y: usize) -> &[f64] {
        let start = (c * self.height + y) * self.width;
        &self.data[start..start + self.width]
    }

    /// Little-endian f64 payload, the compact alternative to nested arrays.
    pub fn to_base64(&self) -> String {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }
}

/// Pixel rectangle on a page; `x` runs along the width, `y` along the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        if x_min > x_max || y_min > y_max {
            return Err(Error::Data(format!("unordered box {b:?}")));
        }
        Ok(b)
    }

    /// `<box>(x_min, y_min), (x_max, y_max)</box>`
    pub fn render(&self) -> String {
        format!(
            "<box>({}, {}), ({}, {})</box>",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Box string attached to every `[CLS]` token on a page.
pub fn render_page_box(height: u32, width: u32) -> String {
    format!("<box>((0, 0), ({height}, {width}))</box>")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PageElement {
    Text { text: String, bbox: BoundingBox },
    Image { image: ImageArtefact, bbox: BoundingBox },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub height: u32,
    pub width: u32,
    pub elements: Vec<PageElement>,
}

impl Page {
    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::Data("page without elements".into()));
        }
        for e in &self.elements {
            let b = match e {
                PageElement::Text { bbox, .. } | PageElement::Image { bbox, .. } => bbox,
            };
            BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max)?;
            if b.x_max > self.width || b.y_max > self.height {
                return Err(Error::Data(format!("box {b:?} leaves the {}x{} page", self.height, self.width)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentArtefact {
    pub pages: Vec<Page>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum ArtefactContent {
    Text(TextArtefact),
    Image(ImageArtefact),
    Document(DocumentArtefact),
}

impl ArtefactContent {
    pub fn modality(&self) -> Modality {
        match self {
            ArtefactContent::Text(_) => Modality::Text,
            ArtefactContent::Image(_) => Modality::Image,
            ArtefactContent::Document(_) => Modality::Document,
        }
    }
}

/// One line of an artefact corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artefact {
    pub id: String,
    #[serde(flatten)]
    pub content: ArtefactContent,
}

impl Artefact {
    pub fn modality(&self) -> Modality {
        self.content.modality()
    }
}

/// A `d × L` embedding with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence {
    pub matrix: Matrix,
    pub modality: Modality,
    pub has_cls: bool,
}

pub const CLS_ID: usize = 0;

/// Frozen toy vocabulary. Index 0 is `[CLS]`.
pub const VOCAB: &[&str] = &[
    "[CLS]", "<", ">", "(", ")", ",", ".", ":", ";", "/", "-", "+", "0", "1", "2", "3", "4", "5", "6", "7",
    "8", "9", "box", "input", "inputs", "process", "processes", "output", "outputs", "none", "no", "zero",
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "several", "many",
    "some", "and", "or", "the", "a", "an", "of", "to", "for", "with", "from", "per", "total", "page",
    "document", "image", "text", "invoice", "invoices", "receipt", "receipts", "order", "orders",
    "contract", "contracts", "request", "requests", "form", "forms", "approval", "approvals",
    "validation", "validations", "archiving", "archivings", "reconciliation", "reconciliations",
    "review", "reviews", "signature", "signatures", "report", "reports", "payment", "payments",
    "ledger", "ledgers", "notice", "notices", "summary", "summaries", "record", "records",
];

/// Word-level tokenizer: lowercase, alphabetic runs are words, each digit
/// and each other non-space character is its own token. Words outside
/// [`VOCAB`] fall into hash buckets after the vocabulary ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub hash_buckets: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { hash_buckets: 64 }
    }
}

fn vocab_index() -> &'static HashMap<&'static str, usize> {
    static INDEX: std::sync::OnceLock<HashMap<&'static str, usize>> = std::sync::OnceLock::new();
    INDEX.get_or_init(|| VOCAB.iter().enumerate().map(|(i, w)| (*w, i)).collect())
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB.len() + self.hash_buckets
    }

    pub fn word_id(&self, word: &str) -> usize {
        match vocab_index().get(word) {
            Some(id) if *id != CLS_ID => *id,
            _ if self.hash_buckets == 0 => CLS_ID,
            _ => VOCAB.len() + (fnv1a(word) % self.hash_buckets as u64) as usize,
        }
    }

    /// Surface tokens without the `[CLS]` prefix.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_alphabetic() {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    /// `[CLS]`-prefixed token ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let words = Self::split(text);
        if words.is_empty() {
            return Err(Error::Empty("tokenize_text"));
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(CLS_ID);
        ids.extend(words.iter().map(|w| self.word_id(w)));
        Ok(ids)
    }
}

pub fn tokenize_text(a: &TextArtefact, tokenizer: &Tokenizer) -> Result<Vec<usize>> {
    tokenizer.tokenize(&a.content)
}

/// Sinusoidal codes for positions `0..len` as a `d × len` matrix.
pub fn positions(d: usize, len: usize) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..len).map(|p| sinusoidal(p, d)).collect();
    Matrix::from_fn(d, len, |r, c| cols[c][r])
}

pub fn g_embed_text(g: &mut Graph, tokens: &[usize], table: &str) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("embed_text"));
    }
    let t = g.param(table)?;
    let d = g.value(t)?.rows();
    let looked_up = g.gather_cols(t, tokens)?;
    let pos = g.constant(positions(d, tokens.len()));
    g.add(looked_up, pos)
}

/// Table lookup plus sinusoidal position for each token.
pub fn embed_text(tokens: &[usize], table: &Matrix) -> Result<EmbeddingSequence> {
    let mut store = ParamStore::new();
    store.insert("table", table.clone());
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let v = g_embed_text(&mut g, tokens, "table")?;
    Ok(EmbeddingSequence {
        matrix: g.value(v)?.clone(),
        modality: Modality::Text,
        has_cls: tokens.first() == Some(&CLS_ID),
    })
}

/// Non-overlapping `patch × patch` tiles in row-major order, each flattened
/// channel-major into one column of a `(c·patch²) × L` matrix.
pub fn patch_image(a: &ImageArtefact, patch: usize) -> Result<Matrix> {
    if patch == 0 || a.height % patch != 0 || a.width % patch != 0 {
        return Err(Error::Data(format!(
            "{}x{} image is not divisible into {patch}-pixel patches",
            a.height, a.width
        )));
    }
    let (gh, gw) = (a.height / patch, a.width / patch);
    let flat = a.channels * patch * patch;
    let mut m = Matrix::zeros(flat, gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let col = py * gw + px;
            let mut r = 0;
            for c in 0..a.channels {
                for y in 0..patch {
                    for x in 0..patch {
                        m.set(r, col, a.get(c, py * patch + y, px * patch + x));
                        r += 1;
                    }
                }
            }
        }
    }
    Ok(m)
}

pub fn g_embed_patches(g: &mut Graph, patches: &Matrix, prefix: &str) -> Result<Var> {
    let x = g.constant(patches.clone());
    let projected = g.linear(x, prefix)?;
    let d = g.value(projected)?.rows();
    let pos = g.constant(positions(d, patches.cols()));
    g.add(projected, pos)
}

/// Linear patch projection to `d_F` plus sinusoidal position.
pub fn embed_patches(patches: &Matrix, projection: &LinearParams) -> Result<EmbeddingSequence> {
    let mut store = ParamStore::new();
    store.insert_linear("patch", projection);
    let mask = TrainMask::frozen();
    let mut g = Graph::new(&store, &mask);
    let v = g_embed_patches(&mut g, patches, "patch")?;
    Ok(EmbeddingSequence {
        matrix: g.value(v)?.clone(),
        modality: Modality::Image,
        has_cls: false,
    })
}

/// Spatial embeddings `E_S(box)`: the column mean of the text encoder's
/// output on the tokenized box string. Results are cached per string and
/// enter document graphs as constants.
#[derive(Debug, Clone)]
pub struct SpatialEmbedder {
    table: String,
    encoder: String,
    config: StackConfig,
    tokenizer: Tokenizer,
    cache: HashMap<String, Vec<f64>>,
}

impl SpatialEmbedder {
    /// The cache is only valid while the table and encoder parameters stay
    /// unchanged.
    pub fn new(table: &str, encoder: &str, config: StackConfig, tokenizer: Tokenizer) -> Self {
        SpatialEmbedder {
            table: table.to_string(),
            encoder: encoder.to_string(),
            config,
            tokenizer,
            cache: HashMap::new(),
        }
    }

    pub fn embed(&mut self, store: &ParamStore, box_string: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.get(box_string) {
            return Ok(v.clone());
        }
        let tokens = self.tokenizer.tokenize(box_string)?;
        let mask = TrainMask::frozen();
        let mut g = Graph::new(store, &mask);
        let e = g_embed_text(&mut g, &tokens, &self.table)?;
        let enc = g_encode(&mut g, e, &self.encoder, &self.config)?;
        let mean = g.mean_cols(enc)?;
        let v = g.value(mean)?.col(0);
        self.cache.insert(box_string.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Text,
    Image,
}

/// Where one page element's token or patch columns sit in a composed
/// document sequence: `count` columns at `start, start + 2, ...` (every
/// embedding column is followed by its box column).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSpan {
    pub kind: ElementKind,
    pub start: usize,
    pub count: usize,
}

impl ElementSpan {
    pub fn columns(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count).map(move |k| self.start + 2 * k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Composition {
    pub elements: Vec<ElementSpan>,
    pub len: usize,
}

/// Parameter names used when composing documents.
#[derive(Debug, Clone)]
pub struct DocumentNames {
    /// Token table shared with the text front end.
    pub table: String,
    /// Patch projection to `d_F`.
    pub patch: String,
    /// `d_F → d_T` projection of patch embeddings.
    pub patch_to_text: String,
    pub patch_size: usize,
}

/// Composes all pages of a document into one `d_T × L` sequence.
///
/// Per page: the image block (each patch embedding followed by its box
/// embedding), then the text block (each element contributes its own
/// `[CLS]`-prefixed tokens, each followed by its box embedding). A page
/// contributes `2(L_F + L_T)` columns.
pub fn g_compose_document(
    g: &mut Graph,
    doc: &DocumentArtefact,
    names: &DocumentNames,
    tokenizer: &Tokenizer,
    spatial: &mut SpatialEmbedder,
) -> Result<(Var, Composition)> {
    if doc.pages.is_empty() {
        return Err(Error::Data("document without pages".into()));
    }
    let mut parts = Vec::new();
    let mut comp = Composition::default();
    let mut offset = 0;
    for page in &doc.pages {
        page.validate()?;
        let cls_box = spatial.embed(g.store(), &render_page_box(page.height, page.width))?;
        let mut text_parts = Vec::new();
        let mut text_spans = Vec::new();
        let mut text_len = 0;
        let mut image_len = 0;
        for el in &page.elements {
            if let PageElement::Image { image, bbox } = el {
                let patches = patch_image(image, names.patch_size)?;
                let emb = g_embed_patches(g, &patches, &names.patch)?;
                let emb = g.linear(emb, &names.patch_to_text)?;
                let boxes = patch_boxes(image, bbox, names.patch_size)
                    .iter()
                    .map(|b| spatial.embed(g.store(), &b.render()))
                    .collect::<Result<Vec<_>>>()?;
                let boxes = g.constant(Matrix::from_columns(&boxes)?);
                parts.push(interleave(g, emb, boxes)?);
                comp.elements.push(ElementSpan {
                    kind: ElementKind::Image,
                    start: offset + 2 * image_len,
                    count: patches.cols(),
                });
                image_len += patches.cols();
            }
        }
        for el in &page.elements {
            if let PageElement::Text { text, bbox } = el {
                let tokens = tokenizer.tokenize(text)?;
                let emb = g_embed_text(g, &tokens, &names.table)?;
                let own = spatial.embed(g.store(), &bbox.render())?;
                let cols: Vec<Vec<f64>> = (0..tokens.len())
                    .map(|k| if k == 0 { cls_box.clone() } else { own.clone() })
                    .collect();
                let boxes = g.constant(Matrix::from_columns(&cols)?);
                text_parts.push(interleave(g, emb, boxes)?);
                text_spans.push((text_len, tokens.len()));
                text_len += tokens.len();
            }
        }
        let text_start = offset + 2 * image_len;
        for (start, count) in text_spans {
            comp.elements.push(ElementSpan {
                kind: ElementKind::Text,
                start: text_start + 2 * start,
                count,
            });
        }
        parts.extend(text_parts);
        offset += 2 * (image_len + text_len);
    }
    comp.len = offset;
    let seq = g.concat_cols(&parts)?;
    Ok((seq, comp))
}

/// `[e_1, s_1, e_2, s_2, ...]` from two equally sized sequences.
fn interleave(g: &mut Graph, emb: Var, boxes: Var) -> Result<Var> {
    let n = g.value(emb)?.cols();
    if g.value(boxes)?.cols() != n {
        return Err(Error::shape("interleave", "one box per column"));
    }
    let mut cols = Vec::with_capacity(2 * n);
    for k in 0..n {
        cols.push(g.slice_cols(emb, k, 1)?);
        cols.push(g.slice_cols(boxes, k, 1)?);
    }
    g.concat_cols(&cols)
}

/// Sub-boxes of an image element's box, one per patch in row-major order.
pub fn patch_boxes(image: &ImageArtefact, bbox: &BoundingBox, patch: usize) -> Vec<BoundingBox> {
    let (gh, gw) = (image.height / patch, image.width / patch);
    let span_x = (bbox.x_max - bbox.x_min) as usize;
    let span_y = (bbox.y_max - bbox.y_min) as usize;
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let x0 = bbox.x_min + (span_x * px / gw) as u32;
            let x1 = bbox.x_min + (span_x * (px + 1) / gw) as u32;
            let y0 = bbox.y_min + (span_y * py / gh) as u32;
            let y1 = bbox.y_min + (span_y * (py + 1) / gh) as u32;
            out.push(BoundingBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 });
        }
    }
    out
}

/// Parameters for composing document pages outside a model.
#[derive(Debug, Clone)]
pub struct DocumentFrontEnd {
    pub tokenizer: Tokenizer,
    pub token_table: Matrix,
    pub patch_size: usize,
    pub patch: LinearParams,
    pub patch_to_text: LinearParams,
    pub text_encoder: EncoderParams,
}

impl DocumentFrontEnd {
    fn store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("table", self.token_table.clone());
        store.insert_linear("patch", &self.patch);
        store.insert_linear("ptt", &self.patch_to_text);
        self.text_encoder.store_into(&mut store, "enc");
        store
    }

    fn names(&self) -> DocumentNames {
        DocumentNames {
            table: "table".into(),
            patch: "patch".into(),
            patch_to_text: "ptt".into(),
            patch_size: self.patch_size,
        }
    }

    /// `E_S(box)` for one rendered box string.
    pub fn spatial_embedding(&self, box_string: &str) -> Result<Vec<f64>> {
        let store = self.store();
        let mut s = SpatialEmbedder::new("table", "enc", self.text_encoder.config.clone(), self.tokenizer);
        s.embed(&store, box_string)
    }

    pub fn compose_document(&self, doc: &DocumentArtefact) -> Result<(EmbeddingSequence, Composition)> {
        let store = self.store();
        let mask = TrainMask::frozen();
        let mut spatial = SpatialEmbedder::new("table", "enc", self.text_encoder.config.clone(), self.tokenizer);
        let mut g = Graph::new(&store, &mask);
        let (v, comp) = g_compose_document(&mut g, doc, &self.names(), &self.tokenizer, &mut spatial)?;
        Ok((
            EmbeddingSequence {
                matrix: g.value(v)?.clone(),
                modality: Modality::Document,
                has_cls: true,
            },
            comp,
        ))
    }

    pub fn compose_document_page(&self, page: &Page) -> Result<(EmbeddingSequence, Composition)> {
        self.compose_document(&DocumentArtefact { pages: vec![page.clone()] })
    }
}

/// `W^u e + b^u` into the shared width.
pub fn unify(e: &Matrix, projection: &LinearParams) -> Result<Matrix> {
    crate::numerics::linear(e, projection)
}
