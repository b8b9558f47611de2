//! Synthetic image/report corpus: finding glyphs rendered into fixed image
//! cells, templated reports, a rule labeler and VQA items.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::seed::rng_for;
use crate::vocab::{split_words, Vocabulary};

pub const NUM_FINDINGS: usize = 14;

/// Corpus images are 32x32: a 4x4 grid of 8x8 cells.
pub const IMAGE_SIDE: usize = 32;
const CELL: usize = 8;
const CELLS_PER_ROW: usize = IMAGE_SIDE / CELL;
pub const REGION_COUNT: usize = CELLS_PER_ROW * CELLS_PER_ROW;
const GLYPH: usize = 6;

pub type Labels = [u8; NUM_FINDINGS];

/// Bitmask of the positive labels.
pub fn label_mask(labels: &Labels) -> u16 {
    labels
        .iter()
        .enumerate()
        .fold(0, |m, (i, &b)| if b != 0 { m | (1 << i) } else { m })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub index: usize,
    /// Canonical (long) name.
    pub name: &'static str,
    pub alternate: &'static str,
    pub abbreviation: &'static str,
    /// Image cell the glyph is drawn in.
    pub region: usize,
}

impl Finding {
    pub fn synonyms(&self) -> [&'static str; 3] {
        [self.name, self.alternate, self.abbreviation]
    }
}

const FINDINGS: [(&str, &str, &str); NUM_FINDINGS] = [
    ("atelectasis", "lung collapse", "atx"),
    ("cardiomegaly", "enlarged heart", "cmg"),
    ("consolidation", "airspace consolidation", "csd"),
    ("edema", "pulmonary edema", "pedm"),
    ("widened mediastinum", "enlarged cardiomediastinum", "ecm"),
    ("fracture", "rib fracture", "fx"),
    ("lung lesion", "pulmonary nodule", "lsn"),
    ("opacity", "lung opacity", "opc"),
    ("pleural effusion", "effusion", "eff"),
    ("pleural thickening", "pleural abnormality", "pth"),
    ("pneumonia", "infectious process", "pna"),
    ("pneumothorax", "collapsed lung", "ptx"),
    ("support devices", "medical device", "sd"),
    ("hernia", "hiatal hernia", "hh"),
];

/// Default label marginals, skewed from 13% down to 1%.
pub const DEFAULT_MARGINALS: [f64; NUM_FINDINGS] = [
    0.13, 0.12, 0.11, 0.10, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.015, 0.01,
];

const POSITIVE_TEMPLATES: [&str; 3] = ["there is {} .", "{} is present .", "{} is seen ."];
const NEGATIVE_TEMPLATES: [&str; 2] = ["no {} .", "there is no {} ."];
const EMPTY_SENTENCE: &str = "no acute findings .";
const NEGATION_WORDS: [&str; 2] = ["no", "without"];
const NEGATION_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FindingSpec {
    pub findings: Vec<Finding>,
    pub marginals: [f64; NUM_FINDINGS],
    /// Upper bound of uniform background noise.
    pub noise: f64,
    /// Probability that a report adds one negated mention of an absent finding.
    pub negation_rate: f64,
}

impl Default for FindingSpec {
    fn default() -> Self {
        Self::with_marginals(DEFAULT_MARGINALS)
    }
}

impl FindingSpec {
    pub fn with_marginals(marginals: [f64; NUM_FINDINGS]) -> Self {
        let findings = FINDINGS
            .iter()
            .enumerate()
            .map(|(i, &(name, alternate, abbreviation))| Finding {
                index: i,
                name,
                alternate,
                abbreviation,
                region: i,
            })
            .collect();
        Self {
            findings,
            marginals,
            noise: 0.1,
            negation_rate: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.findings.len() != NUM_FINDINGS {
            return Err(Error::Invalid(format!(
                "expected {NUM_FINDINGS} findings, got {}",
                self.findings.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut regions = BTreeSet::new();
        for (i, f) in self.findings.iter().enumerate() {
            if f.index != i || f.region >= REGION_COUNT || !regions.insert(f.region) {
                return Err(Error::Invalid(format!("finding {i}: bad index or region")));
            }
            for s in f.synonyms() {
                if !seen.insert(s) {
                    return Err(Error::Invalid(format!("synonym '{s}' used twice")));
                }
            }
        }
        // a synonym inside another finding's synonym would break the labeler
        for f in &self.findings {
            for g in &self.findings {
                if f.index == g.index {
                    continue;
                }
                for a in f.synonyms() {
                    for b in g.synonyms() {
                        if contains_run(&split_words(b), &split_words(a)) {
                            return Err(Error::Invalid(format!(
                                "synonym '{a}' occurs inside '{b}'"
                            )));
                        }
                    }
                }
            }
        }
        if self.marginals.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("marginals must lie in [0,1]".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=1.0).contains(&self.negation_rate) {
            return Err(Error::Invalid("noise must lie in [0,0.5], negation rate in [0,1]".into()));
        }
        Ok(())
    }

    /// Index of the finding whose canonical name is `name`.
    pub fn by_name(&self, name: &str) -> Option<&Finding> {
        self.findings.iter().find(|f| f.name == name)
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Glyph bitmap of finding `i` on a 6x6 canvas.
fn glyph_on(i: usize, y: usize, x: usize) -> bool {
    let (yi, xi) = (y as i64, x as i64);
    match i {
        0 => true,
        1 => y == 0 || y == 5 || x == 0 || x == 5,
        2 => (2..=3).contains(&y) || (2..=3).contains(&x),
        3 => y == x || y + x == 5,
        4 => matches!(y, 0 | 1 | 4 | 5),
        5 => matches!(x, 0 | 1 | 4 | 5),
        6 => (yi - xi).abs() <= 1,
        7 => (yi + xi - 5).abs() <= 1,
        8 => {
            let d = (y as f64 - 2.5).powi(2) + (x as f64 - 2.5).powi(2);
            (2.0..=8.5).contains(&d)
        }
        9 => (y / 2 + x / 2) % 2 == 0,
        10 => x < 2 || y > 3,
        11 => y < 2 || (2..=3).contains(&x),
        12 => x <= y,
        _ => (1..5).contains(&y) && (1..5).contains(&x),
    }
}

/// Pixel rectangle `(y0, x0)` of an image cell.
pub fn region_origin(region: usize) -> (usize, usize) {
    ((region / CELLS_PER_ROW) * CELL, (region % CELLS_PER_ROW) * CELL)
}

/// Mean intensity of a cell.
pub fn region_mean(image: &ImageGrid, region: usize) -> f64 {
    let (y0, x0) = region_origin(region);
    image.region_mean(y0, y0 + CELL, x0, x0 + CELL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split '{s}' (train, valid, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub id: String,
    pub image: ImageGrid,
    pub report: String,
    pub labels: Labels,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    pub qtype: QuestionType,
}

fn fill(template: &str, phrase: &str) -> String {
    template.replace("{}", phrase)
}

/// Draws labels, renders the image and writes the report for one study.
pub fn gen_study<R: Rng + ?Sized>(spec: &FindingSpec, id: &str, split: Split, rng: &mut R) -> Study {
    let mut labels = [0u8; NUM_FINDINGS];
    for (l, p) in labels.iter_mut().zip(spec.marginals.iter()) {
        *l = u8::from(rng.random::<f64>() < *p);
    }
    render_study(spec, id, split, labels, rng)
}

/// Renders a study for a fixed label vector.
pub fn render_study<R: Rng + ?Sized>(
    spec: &FindingSpec,
    id: &str,
    split: Split,
    labels: Labels,
    rng: &mut R,
) -> Study {
    let mut image = ImageGrid::zeros(IMAGE_SIDE, IMAGE_SIDE);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            image.set(y, x, rng.random::<f64>() * spec.noise);
        }
    }
    for f in &spec.findings {
        if labels[f.index] == 0 {
            continue;
        }
        let (y0, x0) = region_origin(f.region);
        // glyph centred in the cell with +-1 pixel jitter
        let dy = rng.random_range(0..=CELL - GLYPH);
        let dx = rng.random_range(0..=CELL - GLYPH);
        for y in 0..GLYPH {
            for x in 0..GLYPH {
                if glyph_on(f.index, y, x) {
                    let v = 0.85 + rng.random::<f64>() * 0.15;
                    image.set(y0 + dy + y, x0 + dx + x, v);
                }
            }
        }
    }
    image.quantize();

    let mut present: Vec<&Finding> =
        spec.findings.iter().filter(|f| labels[f.index] != 0).collect();
    present.shuffle(rng);
    let mut sentences: Vec<String> = Vec::new();
    if present.is_empty() {
        sentences.push(EMPTY_SENTENCE.to_string());
    }
    for f in present {
        let syn = f.synonyms()[rng.random_range(0..3)];
        let t = POSITIVE_TEMPLATES[rng.random_range(0..POSITIVE_TEMPLATES.len())];
        sentences.push(fill(t, syn));
    }
    if rng.random::<f64>() < spec.negation_rate {
        let absent: Vec<&Finding> =
            spec.findings.iter().filter(|f| labels[f.index] == 0).collect();
        if let Some(f) = absent.choose(rng) {
            let syn = f.synonyms()[rng.random_range(0..3)];
            let t = NEGATIVE_TEMPLATES[rng.random_range(0..NEGATIVE_TEMPLATES.len())];
            sentences.push(fill(t, syn));
        }
    }
    Study {
        id: id.to_string(),
        image,
        report: sentences.join(" "),
        labels,
        split,
    }
}

/// Bit `i` is set iff a synonym of finding `i` occurs outside a negation
/// scope: "no" or "without" among the two preceding words of the same sentence.
pub fn rule_labeler(report: &str, spec: &FindingSpec) -> Labels {
    let words = split_words(report);
    let synonyms: Vec<(usize, Vec<String>)> = spec
        .findings
        .iter()
        .flat_map(|f| f.synonyms().into_iter().map(move |s| (f.index, split_words(s))))
        .collect();
    let mut labels = [0u8; NUM_FINDINGS];
    for sentence in words.split(|w| w == ".") {
        for (index, syn) in &synonyms {
            if syn.len() > sentence.len() {
                continue;
            }
            for start in 0..=sentence.len() - syn.len() {
                if sentence[start..start + syn.len()] != syn[..] {
                    continue;
                }
                let lo = start.saturating_sub(NEGATION_WINDOW);
                let negated = sentence[lo..start]
                    .iter()
                    .any(|w| NEGATION_WORDS.contains(&w.as_str()));
                if !negated {
                    labels[*index] = 1;
                }
            }
        }
    }
    labels
}

/// Rewrites every finding mention: abbreviations become the canonical name,
/// any long form becomes the abbreviation.
pub fn swap_synonyms(report: &str, spec: &FindingSpec) -> String {
    let words = split_words(report);
    let mut table: Vec<(Vec<String>, &str)> = Vec::new();
    for f in &spec.findings {
        table.push((split_words(f.abbreviation), f.name));
        table.push((split_words(f.name), f.abbreviation));
        table.push((split_words(f.alternate), f.abbreviation));
    }
    table.sort_by_key(|(w, _)| std::cmp::Reverse(w.len()));
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        match table
            .iter()
            .find(|(w, _)| words[i..].starts_with(w))
        {
            Some((w, replacement)) => {
                out.push((*replacement).to_string());
                i += w.len();
            }
            None => {
                out.push(words[i].clone());
                i += 1;
            }
        }
    }
    out.join(" ")
}

/// Canonical answer for an empty region.
pub const NO_FINDING_ANSWER: &str = "none";

/// One closed ("is X present ?") or open ("which finding ...") question.
pub fn gen_vqa<R: Rng + ?Sized>(study: &Study, spec: &FindingSpec, rng: &mut R) -> VqaItem {
    let image = format!("images/{}.pgm", study.id);
    if rng.random::<bool>() {
        let f = &spec.findings[rng.random_range(0..NUM_FINDINGS)];
        let yes = study.labels[f.index] != 0;
        VqaItem {
            id: study.id.clone(),
            image,
            question: format!("is {} present ?", f.name),
            answer: if yes { "yes" } else { "no" }.to_string(),
            qtype: QuestionType::Closed,
        }
    } else {
        let positives: Vec<&Finding> =
            spec.findings.iter().filter(|f| study.labels[f.index] != 0).collect();
        // half the open questions point at a present finding when there is one
        let region = match positives.choose(rng) {
            Some(f) if rng.random::<bool>() => f.region,
            _ => rng.random_range(0..REGION_COUNT),
        };
        let answer = spec
            .findings
            .iter()
            .find(|f| f.region == region && study.labels[f.index] != 0)
            .map_or(NO_FINDING_ANSWER, |f| f.name);
        VqaItem {
            id: study.id.clone(),
            image,
            question: format!("which finding is present in region {region} ?"),
            answer: answer.to_string(),
            qtype: QuestionType::Open,
        }
    }
}

/// Number of studies per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 2000,
            valid: 200,
            test: 200,
        }
    }
}

pub const VQA_PER_STUDY: usize = 2;

/// An in-memory corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub studies: Vec<Study>,
    pub vqa: Vec<VqaItem>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Study> {
        self.studies.iter().filter(|s| s.split == split).collect()
    }

    pub fn study(&self, id: &str) -> Option<&Study> {
        self.studies.iter().find(|s| s.id == id)
    }

    pub fn vqa_split(&self, split: Split) -> Vec<&VqaItem> {
        let ids: BTreeSet<&str> = self
            .studies
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.as_str())
            .collect();
        self.vqa.iter().filter(|q| ids.contains(q.id.as_str())).collect()
    }
}

fn study_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Builds the full corpus as a pure function of `(counts, seed, spec)`.
pub fn gen_dataset(counts: SplitCounts, seed: u64, spec: &FindingSpec) -> Result<Dataset> {
    spec.validate()?;
    if counts.train < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 training studies for two distinct label sets, got {}",
            counts.train
        )));
    }
    let splits = std::iter::repeat_n(Split::Train, counts.train)
        .chain(std::iter::repeat_n(Split::Valid, counts.valid))
        .chain(std::iter::repeat_n(Split::Test, counts.test));
    let mut studies: Vec<Study> = splits
        .enumerate()
        .map(|(i, split)| gen_study(spec, &study_id(i), split, &mut rng_for(seed, "study", i as u64)))
        .collect();

    let first = label_mask(&studies[0].labels);
    if studies[..counts.train].iter().all(|s| label_mask(&s.labels) == first) {
        let last = counts.train - 1;
        let mut redrawn = None;
        for attempt in 0..10_000u64 {
            let s = gen_study(spec, &study_id(last), Split::Train, &mut rng_for(seed, "redraw", attempt));
            if label_mask(&s.labels) != first {
                redrawn = Some(s);
                break;
            }
        }
        studies[last] = redrawn.ok_or_else(|| {
            Error::Invalid("marginals admit only one label set; cannot draw a distinct study".into())
        })?;
    }

    let mut vqa = Vec::with_capacity(studies.len() * VQA_PER_STUDY);
    for (i, s) in studies.iter().enumerate() {
        let mut rng = rng_for(seed, "vqa", i as u64);
        for _ in 0..VQA_PER_STUDY {
            vqa.push(gen_vqa(s, spec, &mut rng));
        }
    }
    let vocab = Vocabulary::build(
        studies
            .iter()
            .map(|s| s.report.as_str())
            .chain(vqa.iter().map(|q| q.question.as_str())),
    );
    Ok(Dataset {
        studies,
        vqa,
        vocab,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    image: String,
    report: String,
    labels: Vec<u8>,
    split: Split,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const VQA_MANIFEST: &str = "vqa.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const IMAGE_DIR: &str = "images";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the manifest, VQA manifest, vocabulary and PGM images under `dir`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for s in &data.studies {
        let rel = format!("{IMAGE_DIR}/{}.pgm", s.id);
        s.image.write_pgm(&dir.join(&rel))?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            image: rel,
            report: s.report.clone(),
            labels: s.labels.to_vec(),
            split: s.split,
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("plain record"));
        manifest.push('\n');
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
    let mut vqa = String::new();
    for q in &data.vqa {
        vqa.push_str(&serde_json::to_string(q).expect("plain record"));
        vqa.push('\n');
    }
    write_file(&dir.join(VQA_MANIFEST), vqa.as_bytes())?;
    write_file(&dir.join(VOCAB_FILE), data.vocab.to_text().as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a corpus written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::from_text(&read_text(&dir.join(VOCAB_FILE))?)?;
    let mut studies = Vec::new();
    for (n, line) in read_text(&dir.join(MANIFEST))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{MANIFEST} line {}: {e}", n + 1)))?;
        let labels: Labels = rec.labels.as_slice().try_into().map_err(|_| {
            Error::Data(format!(
                "{MANIFEST} line {}: expected {NUM_FINDINGS} labels, got {}",
                n + 1,
                rec.labels.len()
            ))
        })?;
        if labels.iter().any(|&b| b > 1) {
            return Err(Error::Data(format!("{MANIFEST} line {}: labels must be 0/1", n + 1)));
        }
        let image = ImageGrid::read_pgm(&dir.join(&rec.image))?;
        studies.push(Study {
            id: rec.id,
            image,
            report: rec.report,
            labels,
            split: rec.split,
        });
    }
    if studies.is_empty() {
        return Err(Error::Data(format!("{MANIFEST} has no studies")));
    }
    let mut vqa = Vec::new();
    let vqa_path = dir.join(VQA_MANIFEST);
    if vqa_path.exists() {
        for (n, line) in read_text(&vqa_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            vqa.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{VQA_MANIFEST} line {}: {e}", n + 1)))?,
            );
        }
    }
    Ok(Dataset {
        studies,
        vqa,
        vocab,
    })
}

/// Studies whose report does not label back to their label vector.
pub fn round_trip_failures<'a>(studies: &'a [Study], spec: &FindingSpec) -> Vec<&'a str> {
    studies
        .iter()
        .filter(|s| rule_labeler(&s.report, spec) != s.labels)
        .map(|s| s.id.as_str())
        .collect()
}
