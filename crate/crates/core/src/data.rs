//! Multiple-choice records, their token-sequence encodings, MLM masking and
//! impostor sampling.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSequence, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::fusion::{FusionInput, ReferenceMatrix};
use crate::model::{FusionMode, Variant};
use crate::objectives::PretrainItem;
use crate::vision::{BoundingBox, Image};
use crate::vocab::{Vocab, BOX_ID, IMG_ID};

pub const NUM_CHOICES: usize = 4;
pub const MASK_RATE: f64 = 0.15;

/// A word or a deictic reference to object `ref`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Piece {
    Word(String),
    Ref {
        #[serde(rename = "ref")]
        index: usize,
    },
}

impl Piece {
    pub fn word(w: &str) -> Self {
        Piece::Word(w.to_string())
    }
}

/// Inline pixels (rows of `[r, g, b]` bytes) or a PPM path relative to the data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Inline(Vec<Vec<[u8; 3]>>),
    Path(String),
}

impl ImageSource {
    pub fn from_image(image: &Image) -> Self {
        let bytes = image.to_u8();
        let rows = bytes
            .chunks(image.width() * 3)
            .map(|row| row.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
            .collect();
        ImageSource::Inline(rows)
    }

    pub fn load(&self, base: &Path) -> Result<Image> {
        match self {
            ImageSource::Inline(rows) => {
                let h = rows.len();
                let w = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != w) {
                    return Err(Error::Data("ragged inline image".into()));
                }
                let bytes: Vec<u8> = rows.iter().flatten().flatten().copied().collect();
                Image::from_u8(h, w, &bytes)
            }
            ImageSource::Path(p) => Image::read_ppm(&base.join(p)),
        }
    }
}

/// `[x1, y1, x2, y2, label]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object(pub f64, pub f64, pub f64, pub f64, pub String);

impl Object {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.0, self.1, self.2, self.3)
    }

    pub fn label(&self) -> &str {
        &self.4
    }
}

/// One question with four answers and four rationales over an image and its objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: ImageSource,
    pub objects: Vec<Object>,
    pub question: Vec<Piece>,
    pub answers: Vec<Vec<Piece>>,
    pub rationales: Vec<Vec<Piece>>,
    pub correct_answer: usize,
    pub correct_rationale: usize,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        if self.answers.len() != NUM_CHOICES || self.rationales.len() != NUM_CHOICES {
            return Err(Error::Data(format!(
                "{} answers and {} rationales, expected {NUM_CHOICES} each",
                self.answers.len(),
                self.rationales.len()
            )));
        }
        if self.correct_answer >= NUM_CHOICES || self.correct_rationale >= NUM_CHOICES {
            return Err(Error::Data("correct index out of range".into()));
        }
        let texts = std::iter::once(&self.question)
            .chain(&self.answers)
            .chain(&self.rationales);
        for piece in texts.flatten() {
            if let Piece::Ref { index } = piece {
                if *index >= self.objects.len() {
                    return Err(Error::Data(format!(
                        "reference to object {index} of {}",
                        self.objects.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every word used in the record, labels included.
    pub fn words(&self) -> Vec<String> {
        let texts = std::iter::once(&self.question)
            .chain(&self.answers)
            .chain(&self.rationales);
        texts
            .flatten()
            .filter_map(|p| match p {
                Piece::Word(w) => Some(w.clone()),
                Piece::Ref { .. } => None,
            })
            .chain(self.objects.iter().map(|o| o.4.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Qa,
    Qar,
}

/// Which boxes get a column in the reference matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    All,
    ImageOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub appended_boxes: usize,
    pub class_labels: bool,
    pub refs: RefMode,
    pub max_positions: usize,
}

impl EncodeOptions {
    pub fn for_variant(variant: Variant, max_positions: usize) -> Self {
        let refs = match variant.mode() {
            FusionMode::TextOnly => RefMode::None,
            FusionMode::NoBoxes => RefMode::ImageOnly,
            FusionMode::Full | FusionMode::LateFusion => RefMode::All,
        };
        EncodeOptions {
            appended_boxes: variant.appended_boxes(),
            class_labels: variant.class_labels(),
            refs,
            max_positions,
        }
    }
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions::for_variant(Variant::Full, usize::MAX)
    }
}

/// A token sequence with its boxes (row 0 is the whole image) and references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedInstance {
    pub tokens: TokenSequence,
    pub boxes: Vec<BoundingBox>,
    pub refmatrix: ReferenceMatrix,
    pub label: u8,
    pub task: Task,
}

impl EncodedInstance {
    pub fn input<'a>(&'a self, image: &'a Image, features: Option<&'a [Vec<f64>]>) -> FusionInput<'a> {
        FusionInput {
            tokens: &self.tokens,
            boxes: &self.boxes,
            refs: &self.refmatrix,
            image,
            features,
        }
    }
}

/// Tokens that must stay together; `Some(row)` marks a box-referencing token.
type Unit = Vec<(usize, Option<usize>)>;

fn render(
    pieces: &[Piece],
    rec: &Record,
    vocab: &Vocab,
    opts: &EncodeOptions,
) -> Result<Vec<Unit>> {
    pieces
        .iter()
        .map(|p| match p {
            Piece::Word(w) => Ok(vec![(vocab.id(w), None)]),
            Piece::Ref { index } => {
                let obj = rec.objects.get(*index).ok_or_else(|| {
                    Error::Data(format!("reference to missing object {index}"))
                })?;
                Ok(box_unit(obj, *index + 1, vocab, opts))
            }
        })
        .collect()
}

fn box_unit(obj: &Object, row: usize, vocab: &Vocab, opts: &EncodeOptions) -> Unit {
    let mut unit = Vec::with_capacity(2);
    if opts.class_labels {
        unit.push((vocab.id(obj.label()), None));
    }
    unit.push((BOX_ID, Some(row)));
    unit
}

fn width(units: &[Unit]) -> usize {
    units.iter().map(Vec::len).sum()
}

/// Shared template: `[CLS] [IMG] first.. [SEP] second.. [SEP] tail..`.
fn assemble(
    rec: &Record,
    image_dims: (usize, usize),
    first: &[Piece],
    second: &[&[Piece]],
    vocab: &Vocab,
    opts: &EncodeOptions,
) -> Result<(TokenSequence, Vec<BoundingBox>, ReferenceMatrix)> {
    rec.validate()?;
    let mut question = render(first, rec, vocab, opts)?;
    let mut segments: Vec<Vec<Unit>> = second
        .iter()
        .map(|s| render(s, rec, vocab, opts))
        .collect::<Result<_>>()?;
    let mut tail: Vec<Unit> = rec
        .objects
        .iter()
        .take(opts.appended_boxes)
        .enumerate()
        .map(|(i, o)| box_unit(o, i + 1, vocab, opts))
        .collect();

    // [CLS] [IMG] [SEP] [SEP]
    const FRAME: usize = 4;
    let total = |q: &[Unit], s: &[Vec<Unit>], t: &[Unit]| {
        FRAME + width(q) + s.iter().map(|x| width(x)).sum::<usize>() + width(t)
    };
    if opts.max_positions < FRAME {
        return Err(Error::Config("max_positions too small for the template".into()));
    }
    while total(&question, &segments, &tail) > opts.max_positions {
        if tail.pop().is_some() {
            continue;
        }
        if let Some(seg) = segments.iter_mut().rev().find(|s| !s.is_empty()) {
            seg.pop();
            continue;
        }
        question.pop();
    }

    let mut pieces = vec![(CLS_ID, None), (IMG_ID, Some(0))];
    pieces.extend(question.into_iter().flatten());
    pieces.push((SEP_ID, None));
    let first_sep = pieces.len();
    pieces.extend(segments.into_iter().flatten().flatten());
    pieces.push((SEP_ID, None));
    pieces.extend(tail.into_iter().flatten());

    let (w, h) = image_dims;
    let mut boxes = vec![BoundingBox::new(0.0, 0.0, w as f64, h as f64)];
    boxes.extend(rec.objects.iter().map(Object::bbox));
    let mut refs = ReferenceMatrix::zeros(boxes.len(), pieces.len());
    for (j, &(_, row)) in pieces.iter().enumerate() {
        match (row, opts.refs) {
            (Some(r), RefMode::All) => refs.set(r, j),
            (Some(0), RefMode::ImageOnly) => refs.set(0, j),
            _ => {}
        }
    }
    let type_ids = (0..pieces.len()).map(|j| usize::from(j >= first_sep)).collect();
    let ids = pieces.into_iter().map(|(id, _)| id).collect();
    Ok((TokenSequence::new(ids, type_ids), boxes, refs))
}

/// Question + candidate answer; positive iff it is the correct answer.
pub fn encode_qa(
    rec: &Record,
    image_dims: (usize, usize),
    answer_idx: usize,
    vocab: &Vocab,
    opts: &EncodeOptions,
) -> Result<EncodedInstance> {
    let answer = rec
        .answers
        .get(answer_idx)
        .ok_or_else(|| Error::Data(format!("answer index {answer_idx}")))?;
    let (tokens, boxes, refmatrix) =
        assemble(rec, image_dims, &rec.question, &[answer], vocab, opts)?;
    Ok(EncodedInstance {
        tokens,
        boxes,
        refmatrix,
        label: u8::from(answer_idx == rec.correct_answer),
        task: Task::Qa,
    })
}

/// Question + correct answer + candidate rationale.
pub fn encode_qar(
    rec: &Record,
    image_dims: (usize, usize),
    rationale_idx: usize,
    vocab: &Vocab,
    opts: &EncodeOptions,
) -> Result<EncodedInstance> {
    let rationale = rec
        .rationales
        .get(rationale_idx)
        .ok_or_else(|| Error::Data(format!("rationale index {rationale_idx}")))?;
    let gold = rec
        .answers
        .get(rec.correct_answer)
        .ok_or_else(|| Error::Data("correct answer out of range".into()))?;
    let (tokens, boxes, refmatrix) =
        assemble(rec, image_dims, &rec.question, &[gold, rationale], vocab, opts)?;
    Ok(EncodedInstance {
        tokens,
        boxes,
        refmatrix,
        label: u8::from(rationale_idx == rec.correct_rationale),
        task: Task::Qar,
    })
}

/// The four candidate instances for `task`.
pub fn encode_choices(
    rec: &Record,
    image_dims: (usize, usize),
    task: Task,
    vocab: &Vocab,
    opts: &EncodeOptions,
) -> Result<Vec<EncodedInstance>> {
    (0..NUM_CHOICES)
        .map(|k| match task {
            Task::Qa => encode_qa(rec, image_dims, k, vocab, opts),
            Task::Qar => encode_qar(rec, image_dims, k, vocab, opts),
        })
        .collect()
}

/// Replaces each eligible position with `[MASK]` with probability `rate`.
/// `[CLS]`, `[SEP]`, `[PAD]`, the box placeholders and attention-masked
/// positions are never masked.
pub fn mask_tokens<R: Rng>(
    seq: &TokenSequence,
    rate: f64,
    rng: &mut R,
) -> Result<(TokenSequence, Vec<(usize, usize)>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("mask rate {rate} outside [0,1)")));
    }
    let mut out = seq.clone();
    let mut targets = Vec::new();
    for j in 0..seq.len() {
        let id = seq.piece_ids[j];
        let eligible = seq.attention_mask[j]
            && !matches!(id, CLS_ID | SEP_ID | PAD_ID | MASK_ID | IMG_ID | BOX_ID);
        // Draw for every position so the stream does not depend on eligibility.
        let draw: f64 = rng.random();
        if eligible && draw < rate {
            out.piece_ids[j] = MASK_ID;
            targets.push((j, id));
        }
    }
    Ok((out, targets))
}

/// Uniform index over `0..corpus_len` excluding `positive`.
pub fn sample_impostor<R: Rng>(corpus_len: usize, positive: usize, rng: &mut R) -> Result<usize> {
    if corpus_len < 2 {
        return Err(Error::Data(format!(
            "impostor sampling needs at least 2 captions, got {corpus_len}"
        )));
    }
    if positive >= corpus_len {
        return Err(Error::Data(format!("caption {positive} of {corpus_len}")));
    }
    let j = rng.random_range(0..corpus_len - 1);
    Ok(if j >= positive { j + 1 } else { j })
}

/// `[CLS] [IMG] caption.. [SEP]` with `[IMG]` referencing the whole image.
pub fn encode_caption(
    caption: &str,
    image_dims: (usize, usize),
    vocab: &Vocab,
    max_positions: usize,
) -> Result<(TokenSequence, Vec<BoundingBox>, ReferenceMatrix)> {
    let mut ids = vec![CLS_ID, IMG_ID];
    ids.extend(vocab.encode(caption));
    ids.truncate(max_positions.saturating_sub(1).max(2));
    ids.push(SEP_ID);
    let n = ids.len();
    let (w, h) = image_dims;
    let boxes = vec![BoundingBox::new(0.0, 0.0, w as f64, h as f64)];
    let mut refs = ReferenceMatrix::zeros(1, n);
    refs.set(0, 1);
    Ok((TokenSequence::new(ids, vec![0; n]), boxes, refs))
}

/// A pretraining pair: the true caption (masked, l=1) and an impostor (l=0).
pub fn pretrain_items<R: Rng>(
    captions: &[String],
    index: usize,
    image_dims: (usize, usize),
    vocab: &Vocab,
    max_positions: usize,
    mask_rate: f64,
    rng: &mut R,
) -> Result<[PretrainItem; 2]> {
    let (tokens, boxes, refs) = encode_caption(&captions[index], image_dims, vocab, max_positions)?;
    let (masked, targets) = mask_tokens(&tokens, mask_rate, rng)?;
    let positive = PretrainItem {
        tokens: masked,
        boxes: boxes.clone(),
        refs: refs.clone(),
        targets,
        label: 1,
    };
    let other = sample_impostor(captions.len(), index, rng)?;
    let (tokens, boxes, refs) = encode_caption(&captions[other], image_dims, vocab, max_positions)?;
    let impostor = PretrainItem {
        tokens,
        boxes,
        refs,
        targets: Vec::new(),
        label: 0,
    };
    Ok([positive, impostor])
}

/// A record with its decoded image.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: Record,
    pub image: Arc<Image>,
}

impl Example {
    pub fn dims(&self) -> (usize, usize) {
        (self.image.width(), self.image.height())
    }
}

/// Caption line of `captions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: ImageSource,
    pub caption: String,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    read_lines(path)
}

/// Reads and validates records, decoding every image.
pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    let base = base_dir(path);
    read_records(path)?
        .into_iter()
        .map(|record| {
            record.validate()?;
            let image = Arc::new(record.image.load(&base)?);
            for o in &record.objects {
                o.bbox().validate(&image)?;
            }
            Ok(Example { record, image })
        })
        .collect()
}

pub fn load_captions(path: &Path) -> Result<Vec<(Arc<Image>, String)>> {
    let base = base_dir(path);
    read_lines::<CaptionRecord>(path)?
        .into_iter()
        .map(|c| Ok((Arc::new(c.image.load(&base)?), c.caption)))
        .collect()
}

/// `vocab.txt` beside the data file, or one built from the records.
pub fn vocab_for(path: &Path, examples: &[Example]) -> Result<Vocab> {
    let beside = base_dir(path).join("vocab.txt");
    if beside.exists() {
        Vocab::read(&beside)
    } else {
        Ok(Vocab::build(examples.iter().flat_map(|e| e.record.words())))
    }
}
