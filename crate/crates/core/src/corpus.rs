//! Synthetic corpora with ground truth known by construction, and their
//! JSON-lines persistence.
//!
//! A corpus directory holds `artefacts.jsonl`, `sets.jsonl` and
//! `samples.jsonl`. Each file starts with a header line echoing the run
//! configuration; every following line is one record.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artefacts::{
    Artefact, ArtefactContent, BoundingBox, DocumentArtefact, ImageArtefact, Modality, Page, PageElement, TextArtefact,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{CountTable, FamilySpec, SignalTables};
use crate::signals::Role;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CORPUS_FORMAT: &str = "wintent-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    /// Artefacts rendered per ground-truth intention, by modality.
    #[serde(default = "defaults::per_intention")]
    pub artefacts_per_intention: BTreeMap<Modality, usize>,
    #[serde(default = "defaults::one")]
    pub min_intentions: usize,
    #[serde(default = "defaults::max_intentions")]
    pub max_intentions: usize,
    /// Probability that a family element appears in an intention.
    #[serde(default = "defaults::presence")]
    pub presence: f64,
    /// Probability that a present element is rendered as "several".
    #[serde(default = "defaults::unknown")]
    pub unknown_rate: f64,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::page_size")]
    pub page_size: u32,
}

mod defaults {
    use super::*;

    pub fn samples() -> usize {
        8
    }
    pub fn per_intention() -> BTreeMap<Modality, usize> {
        Modality::ALL.iter().map(|m| (*m, 1)).collect()
    }
    pub fn one() -> usize {
        1
    }
    pub fn max_intentions() -> usize {
        2
    }
    pub fn presence() -> f64 {
        0.4
    }
    pub fn unknown() -> f64 {
        0.15
    }
    pub fn image_size() -> usize {
        16
    }
    pub fn page_size() -> u32 {
        64
    }
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            samples: defaults::samples(),
            artefacts_per_intention: defaults::per_intention(),
            min_intentions: 1,
            max_intentions: defaults::max_intentions(),
            presence: defaults::presence(),
            unknown_rate: defaults::unknown(),
            image_size: defaults::image_size(),
            page_size: defaults::page_size(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.artefacts_per_intention.values().all(|n| *n == 0) {
            return bad("at least one modality needs artefacts");
        }
        if self.min_intentions == 0 || self.min_intentions > self.max_intentions {
            return bad("need 1 <= min_intentions <= max_intentions");
        }
        if !(0.0..=1.0).contains(&self.presence) || !(0.0..=1.0).contains(&self.unknown_rate) {
            return bad("presence and unknown_rate are probabilities");
        }
        let p = model.patch_size;
        if self.image_size == 0 || self.image_size % p != 0 {
            return bad("image_size must be a positive multiple of the patch size");
        }
        let grid = self.image_size / p;
        let family = &model.family;
        let widest = Role::ALL.iter().map(|r| family.elements(*r).len()).max().unwrap_or(0);
        if widest > grid || family.max_count >= grid + 1 || model.image_channels < 3 {
            return bad("images need 3 channels, a grid column per element and a grid row per count");
        }
        if (self.page_size as usize) < self.image_size || self.page_size < 32 {
            return bad("page_size must be at least 32 and hold one image");
        }
        Ok(())
    }
}

/// Ground truth per artefact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtefactRecord {
    pub artefact: Artefact,
    pub truth: SignalTables,
}

/// Same-modality artefact set for intra-modality training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub id: String,
    pub modality: Modality,
    pub members: Vec<String>,
    pub truth: SignalTables,
}

/// A multimodal sample with its ordered intentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub artefacts: Vec<String>,
    pub intentions: Vec<SignalTables>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub code_version: String,
    pub file: String,
    pub records: usize,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: serde_json::Value,
    pub artefacts: Vec<ArtefactRecord>,
    pub sets: Vec<SetRecord>,
    pub samples: Vec<SampleRecord>,
}

const FILES: [&str; 3] = ["artefacts", "sets", "samples"];

impl Corpus {
    pub fn artefact(&self, id: &str) -> Result<&ArtefactRecord> {
        self.artefacts
            .iter()
            .find(|a| a.artefact.id == id)
            .ok_or_else(|| Error::Data(format!("unknown artefact id {id}")))
    }

    pub fn index(&self) -> BTreeMap<&str, &ArtefactRecord> {
        self.artefacts.iter().map(|a| (a.artefact.id.as_str(), a)).collect()
    }

    /// Checks references and table shapes against `family`.
    pub fn validate(&self, family: &FamilySpec) -> Result<()> {
        let index = self.index();
        if index.len() != self.artefacts.len() {
            return Err(Error::Data("duplicate artefact ids".into()));
        }
        for a in &self.artefacts {
            a.truth.validate(family)?;
        }
        for s in &self.sets {
            s.truth.validate(family)?;
            if s.members.is_empty() {
                return Err(Error::Data(format!("set {} is empty", s.id)));
            }
            for m in &s.members {
                let a = index.get(m.as_str()).ok_or_else(|| Error::Data(format!("set {} names unknown {m}", s.id)))?;
                if a.artefact.modality() != s.modality {
                    return Err(Error::Data(format!("set {} mixes modalities", s.id)));
                }
            }
        }
        for s in &self.samples {
            if s.intentions.is_empty() {
                return Err(Error::Data(format!("sample {} has no intentions", s.id)));
            }
            for t in &s.intentions {
                t.validate(family)?;
            }
            for m in &s.artefacts {
                if !index.contains_key(m.as_str()) {
                    return Err(Error::Data(format!("sample {} names unknown {m}", s.id)));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the records (not the config echo), hex encoded.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.artefacts)?);
        h.update(serde_json::to_vec(&self.sets)?);
        h.update(serde_json::to_vec(&self.samples)?);
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("artefacts.jsonl"), "artefacts", &self.config, &self.artefacts)?;
        write_jsonl(&dir.join("sets.jsonl"), "sets", &self.config, &self.sets)?;
        write_jsonl(&dir.join("samples.jsonl"), "samples", &self.config, &self.samples)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (h, artefacts) = read_jsonl(&dir.join("artefacts.jsonl"), FILES[0])?;
        let (_, sets) = read_jsonl(&dir.join("sets.jsonl"), FILES[1])?;
        let (_, samples) = read_jsonl(&dir.join("samples.jsonl"), FILES[2])?;
        Ok(Corpus { config: h.config, artefacts, sets, samples })
    }
}

/// Writes a header line followed by one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, file: &str, config: &serde_json::Value, records: &[T]) -> Result<()> {
    write_jsonl_as(path, CORPUS_FORMAT, file, config, records)
}

/// [`write_jsonl`] with a caller-chosen format tag.
pub fn write_jsonl_as<T: Serialize>(
    path: &Path,
    format: &str,
    file: &str,
    config: &serde_json::Value,
    records: &[T],
) -> Result<()> {
    let header = Header {
        format: format.into(),
        version: CORPUS_VERSION,
        code_version: CODE_VERSION.into(),
        file: file.into(),
        records: records.len(),
        config: config.clone(),
    };
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    line(serde_json::to_string(&header)?)?;
    for r in records {
        line(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, file: &str) -> Result<(Header, Vec<T>)> {
    read_jsonl_as(path, CORPUS_FORMAT, file)
}

/// Reads a file written by [`write_jsonl_as`], checking its format tag.
pub fn read_jsonl_as<T: DeserializeOwned>(path: &Path, format: &str, file: &str) -> Result<(Header, Vec<T>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: missing header", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    if header.format != format || header.file != file {
        return Err(Error::Data(format!("{}: not a {format} {file} file", path.display())));
    }
    let mut records = Vec::with_capacity(header.records);
    for (n, l) in lines.enumerate() {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 2)))?,
        );
    }
    if records.len() != header.records {
        return Err(Error::Data(format!(
            "{}: header promises {} records, found {}",
            path.display(),
            header.records,
            records.len()
        )));
    }
    Ok((header, records))
}

const NUMBER_WORDS: [&str; 10] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

fn plural(word: &str) -> String {
    match word.strip_suffix('y') {
        Some(stem) => format!("{stem}ies"),
        None => format!("{word}s"),
    }
}

/// Text mention of one count class, e.g. "two invoices" or "several
/// receipts".
pub fn render_mention(element: &str, class: usize, family: &FamilySpec) -> Option<String> {
    match class {
        0 => None,
        1 => Some(format!("one {element}")),
        c if c == family.unknown_class() => Some(format!("several {}", plural(element))),
        c => Some(format!("{} {}", NUMBER_WORDS.get(c - 1).copied().unwrap_or("many"), plural(element))),
    }
}

/// `"input: two invoices and one receipt."`; an empty role reads `none`.
pub fn render_role(role: Role, table: &CountTable, family: &FamilySpec) -> String {
    let names = family.elements(role);
    let mentions: Vec<String> = table
        .0
        .iter()
        .zip(names)
        .filter_map(|(c, n)| render_mention(n, *c, family))
        .collect();
    let body = if mentions.is_empty() { "none".to_string() } else { mentions.join(" and ") };
    let label = match role {
        Role::Input => "input",
        Role::Process => "process",
        Role::Output => "output",
    };
    format!("{label}: {body}.")
}

pub fn render_text(truth: &SignalTables, family: &FamilySpec) -> String {
    Role::ALL
        .iter()
        .map(|r| render_role(*r, truth.table(*r), family))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Channel = role, grid column = element, `c` lit patches from the top
/// for count `c`, a pixel checkerboard over the column for the unknown
/// class. Roles not in `roles` stay dark.
pub fn render_image(truth: &SignalTables, family: &FamilySpec, size: usize, patch: usize, roles: &[Role]) -> Result<ImageArtefact> {
    let mut img = vec![0.0; 3 * size * size];
    let grid = size / patch;
    for (ch, role) in Role::ALL.iter().enumerate() {
        if !roles.contains(role) {
            continue;
        }
        for (col, class) in truth.table(*role).0.iter().enumerate() {
            let rows = if *class == family.unknown_class() { grid } else { *class };
            for gy in 0..rows {
                for y in gy * patch..(gy + 1) * patch {
                    for x in col * patch..(col + 1) * patch {
                        let lit = *class != family.unknown_class() || (x + y) % 2 == 0;
                        if lit {
                            img[ch * size * size + y * size + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    ImageArtefact::new(3, size, size, img)
}

/// One page: text elements for input and process, and an image element
/// showing only the output channel.
pub fn render_document(truth: &SignalTables, family: &FamilySpec, spec: &CorpusSpec, patch: usize) -> Result<DocumentArtefact> {
    let side = spec.page_size;
    let band = side / 4;
    let s = spec.image_size as u32;
    let elements = vec![
        PageElement::Text {
            text: render_role(Role::Input, &truth.i, family),
            bbox: BoundingBox::new(0, 0, side, band)?,
        },
        PageElement::Text {
            text: render_role(Role::Process, &truth.p, family),
            bbox: BoundingBox::new(0, band, side, 2 * band)?,
        },
        PageElement::Image {
            image: render_image(truth, family, spec.image_size, patch, &[Role::Output])?,
            bbox: BoundingBox::new(0, side - s, s, side)?,
        },
    ];
    let page = Page { height: side, width: side, elements };
    page.validate()?;
    Ok(DocumentArtefact { pages: vec![page] })
}

pub fn render_artefact(id: String, m: Modality, truth: &SignalTables, family: &FamilySpec, spec: &CorpusSpec, patch: usize) -> Result<Artefact> {
    let content = match m {
        Modality::Text => ArtefactContent::Text(TextArtefact { content: render_text(truth, family) }),
        Modality::Image => ArtefactContent::Image(render_image(truth, family, spec.image_size, patch, &Role::ALL)?),
        Modality::Document => ArtefactContent::Document(render_document(truth, family, spec, patch)?),
    };
    Ok(Artefact { id, content })
}

/// Element-wise sum of member counts; totals above `M` and any unknown
/// member count become the unknown class.
pub fn aggregate_tables(members: &[&SignalTables], family: &FamilySpec) -> Result<SignalTables> {
    let first = members.first().ok_or(Error::Empty("aggregate_tables"))?;
    let unknown = family.unknown_class();
    let agg = |role: Role| {
        let len = first.table(role).0.len();
        CountTable(
            (0..len)
                .map(|k| {
                    let mut total = 0;
                    for m in members {
                        let c = m.table(role).0[k];
                        if c == unknown {
                            return unknown;
                        }
                        total += c;
                    }
                    if total > family.max_count { unknown } else { total }
                })
                .collect(),
        )
    };
    Ok(SignalTables { i: agg(Role::Input), p: agg(Role::Process), o: agg(Role::Output) })
}

fn random_tables(rng: &mut ChaCha8Rng, family: &FamilySpec, spec: &CorpusSpec) -> SignalTables {
    let mut table = |role: Role| {
        CountTable(
            family
                .elements(role)
                .iter()
                .map(|_| {
                    if !rng.gen_bool(spec.presence) {
                        0
                    } else if rng.gen_bool(spec.unknown_rate) {
                        family.unknown_class()
                    } else {
                        rng.gen_range(1..=family.max_count)
                    }
                })
                .collect(),
        )
    };
    SignalTables { i: table(Role::Input), p: table(Role::Process), o: table(Role::Output) }
}

/// Generates a corpus. Each sample draws its intentions, renders the
/// configured artefacts for each, and forms one set per modality from
/// its artefacts. Identical inputs give identical corpora.
pub fn generate(spec: &CorpusSpec, model: &ModelConfig, config_echo: serde_json::Value) -> Result<Corpus> {
    spec.validate(model)?;
    let family = &model.family;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut artefacts = Vec::new();
    let mut sets = Vec::new();
    let mut samples = Vec::new();
    for s in 0..spec.samples {
        let n = rng.gen_range(spec.min_intentions..=spec.max_intentions);
        let mut intentions: Vec<SignalTables> = Vec::with_capacity(n);
        while intentions.len() < n {
            let t = random_tables(&mut rng, family, spec);
            if !intentions.contains(&t) {
                intentions.push(t);
            }
        }
        let sample_id = format!("s{s:04}");
        let mut ids = Vec::new();
        let mut by_modality: BTreeMap<Modality, Vec<(String, usize)>> = BTreeMap::new();
        for (k, t) in intentions.iter().enumerate() {
            for (m, count) in &spec.artefacts_per_intention {
                for r in 0..*count {
                    let id = format!("{sample_id}-g{k}-{m}{r}");
                    artefacts.push(ArtefactRecord {
                        artefact: render_artefact(id.clone(), *m, t, family, spec, model.patch_size)?,
                        truth: t.clone(),
                    });
                    by_modality.entry(*m).or_default().push((id.clone(), k));
                    ids.push(id);
                }
            }
        }
        for (m, members) in by_modality {
            let tables: Vec<&SignalTables> = members.iter().map(|(_, k)| &intentions[*k]).collect();
            sets.push(SetRecord {
                id: format!("{sample_id}-{m}"),
                modality: m,
                truth: aggregate_tables(&tables, family)?,
                members: members.into_iter().map(|(id, _)| id).collect(),
            });
        }
        samples.push(SampleRecord { id: sample_id, artefacts: ids, intentions });
    }
    Ok(Corpus { config: config_echo, artefacts, sets, samples })
}
