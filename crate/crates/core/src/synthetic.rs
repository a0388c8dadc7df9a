//! Synthetic grounded color questions. Each image holds several glyphs of
//! distinct colors; a question points at one glyph and the four answers are
//! exactly the colors present, so neither the text nor the whole-image
//! features say which answer is right. Only the referenced box does. All
//! glyphs in one image share a shape, so class labels do not single one out.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_jsonl, CaptionRecord, ImageSource, Object, Piece, Record, NUM_CHOICES,
};
use crate::error::{Error, Result};
use crate::vision::Image;
use crate::vocab::Vocab;

pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.15]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("purple", [0.60, 0.15, 0.80]),
    ("orange", [1.00, 0.55, 0.00]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("white", [0.95, 0.95, 0.95]),
];

pub const SHAPES: [&str; 3] = ["block", "ring", "cross"];

const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.12];
const NOISE: f64 = 0.03;
/// Channel deviation from the background that marks a glyph pixel.
const FOREGROUND_THRESHOLD: f64 = 0.25;

const QUESTION_TEMPLATES: [&[&str]; 2] = [&["what", "color", "is"], &["which", "color", "has"]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub image_size: usize,
    pub colors: Vec<String>,
    /// Extra glyphs repeating colors already in the image.
    pub distractors: usize,
    pub templates: Vec<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 13,
            num_train: 2000,
            num_val: 500,
            image_size: 32,
            colors: PALETTE[..6].iter().map(|(n, _)| n.to_string()).collect(),
            distractors: 0,
            templates: vec![0],
        }
    }
}

impl SyntheticSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() < NUM_CHOICES {
            return Err(Error::Spec(format!(
                "{} colors cannot fill {NUM_CHOICES} distinct answers",
                self.colors.len()
            )));
        }
        for c in &self.colors {
            palette_rgb(c)?;
        }
        let mut sorted = self.colors.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.colors.len() {
            return Err(Error::Spec("duplicate colors".into()));
        }
        // Four quadrants hold the answer glyphs; distractors need room too.
        let glyphs = NUM_CHOICES + self.distractors;
        let cells = grid_side(glyphs);
        if self.image_size / cells < 6 {
            return Err(Error::Spec(format!(
                "image_size {} too small for {glyphs} glyphs",
                self.image_size
            )));
        }
        if self.templates.is_empty()
            || self.templates.iter().any(|&t| t >= QUESTION_TEMPLATES.len())
        {
            return Err(Error::Spec(format!(
                "question templates must be a nonempty subset of 0..{}",
                QUESTION_TEMPLATES.len()
            )));
        }
        if self.num_train == 0 {
            return Err(Error::Spec("num_train must be positive".into()));
        }
        Ok(())
    }
}

pub fn palette_rgb(name: &str) -> Result<[f64; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| Error::Spec(format!("unknown color {name:?}")))
}

fn grid_side(glyphs: usize) -> usize {
    (1..).find(|s| s * s >= glyphs).expect("some square fits")
}

/// Generated dataset: records with their images and one caption per train image.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub captions: Vec<CaptionRecord>,
    pub vocab: Vocab,
}

struct Glyph {
    color: usize,
    shape: usize,
    bounds: (usize, usize, usize, usize),
}

fn draw_glyph(image: &mut Image, glyph: &Glyph, rgb: [f64; 3]) {
    let (x0, y0, x1, y1) = glyph.bounds;
    let (w, h) = (x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x - x0, y - y0);
            let on = match SHAPES[glyph.shape] {
                "block" => true,
                "ring" => dx < 2 || dy < 2 || dx + 2 >= w || dy + 2 >= h,
                _ => {
                    let (cx, cy) = (w / 2, h / 2);
                    dx.abs_diff(cx) <= 1 || dy.abs_diff(cy) <= 1
                }
            };
            if on {
                image.set_pixel(y, x, rgb);
            }
        }
    }
}

fn make_record(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(Record, String)> {
    let n = spec.image_size;
    let mut pixels = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n {
        let jitter = rng.random_range(-NOISE..NOISE);
        pixels.extend(BACKGROUND.iter().map(|c| (c + jitter).clamp(0.0, 1.0)));
    }
    let mut image = Image::new(n, n, pixels)?;

    let mut palette: Vec<usize> = (0..spec.colors.len()).collect();
    palette.shuffle(rng);
    let present = &palette[..NUM_CHOICES];
    let total = NUM_CHOICES + spec.distractors;
    let side = grid_side(total);
    let cell = n / side;
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(rng);

    // One shape per image, so the label names no particular glyph.
    let shape = rng.random_range(0..SHAPES.len());
    let mut glyphs = Vec::with_capacity(total);
    for (g, &c) in cells[..total].iter().enumerate() {
        let color = if g < NUM_CHOICES {
            present[g]
        } else {
            present[rng.random_range(0..NUM_CHOICES)]
        };
        let (cx, cy) = ((c % side) * cell, (c / side) * cell);
        let w = rng.random_range(cell * 5 / 8..=cell - 1).max(5);
        let h = rng.random_range(cell * 5 / 8..=cell - 1).max(5);
        let x0 = cx + rng.random_range(0..=cell - w);
        let y0 = cy + rng.random_range(0..=cell - h);
        glyphs.push(Glyph {
            color,
            shape,
            bounds: (x0, y0, x0 + w, y0 + h),
        });
    }
    for glyph in &glyphs {
        draw_glyph(&mut image, glyph, palette_rgb(&spec.colors[glyph.color])?);
    }

    let objects = glyphs
        .iter()
        .map(|g| {
            let (x0, y0, x1, y1) = g.bounds;
            Object(
                x0 as f64,
                y0 as f64,
                x1 as f64,
                y1 as f64,
                SHAPES[g.shape].to_string(),
            )
        })
        .collect();

    let asked = rng.random_range(0..NUM_CHOICES);
    let template = spec.templates[rng.random_range(0..spec.templates.len())];
    let mut question: Vec<Piece> = QUESTION_TEMPLATES[template]
        .iter()
        .map(|w| Piece::word(w))
        .collect();
    question.push(Piece::Ref { index: asked });

    let mut order: Vec<usize> = (0..NUM_CHOICES).collect();
    order.shuffle(rng);
    let answers = order
        .iter()
        .map(|&k| vec![Piece::word(&spec.colors[present[k]])])
        .collect();
    let correct_answer = order
        .iter()
        .position(|&k| present[k] == glyphs[asked].color)
        .expect("asked glyph color is among the answers");

    let answer_word = spec.colors[glyphs[asked].color].as_str();
    let mut rorder: Vec<usize> = (0..NUM_CHOICES).collect();
    rorder.shuffle(rng);
    let rationales = rorder
        .iter()
        .map(|&k| {
            vec![
                Piece::word("because"),
                Piece::Ref { index: k },
                Piece::word("is"),
                Piece::word(answer_word),
            ]
        })
        .collect();
    let correct_rationale = rorder.iter().position(|&k| k == asked).expect("present");

    let caption = glyphs
        .iter()
        .map(|g| format!("a {} {}", spec.colors[g.color], SHAPES[g.shape]))
        .collect::<Vec<_>>()
        .join(" and ");

    let record = Record {
        image: ImageSource::from_image(&image),
        objects,
        question,
        answers,
        rationales,
        correct_answer,
        correct_rationale,
    };
    Ok((record, caption))
}

/// Vocabulary covering every word the generator can emit.
pub fn vocabulary(spec: &SyntheticSpec) -> Vocab {
    let words = QUESTION_TEMPLATES
        .iter()
        .flat_map(|t| t.iter().copied())
        .chain(["because", "is", "a", "and"])
        .chain(SHAPES)
        .chain(spec.colors.iter().map(String::as_str));
    Vocab::build(words)
}

/// Record `k` of a split draws from its own stream of the master seed.
fn stream_rng(seed: u64, split: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 40) | k as u64);
    rng
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.num_train);
    let mut captions = Vec::with_capacity(spec.num_train);
    for k in 0..spec.num_train {
        let (rec, caption) = make_record(spec, &mut stream_rng(spec.seed, 0, k))?;
        captions.push(CaptionRecord {
            image: rec.image.clone(),
            caption,
        });
        train.push(rec);
    }
    let val = (0..spec.num_val)
        .map(|k| make_record(spec, &mut stream_rng(spec.seed, 1, k)).map(|(r, _)| r))
        .collect::<Result<_>>()?;
    Ok(Synthetic {
        train,
        val,
        captions,
        vocab: vocabulary(spec),
    })
}

/// Writes `train.jsonl`, `val.jsonl`, `captions.jsonl` and `vocab.txt`.
pub fn write(data: &Synthetic, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("val.jsonl"), &data.val)?;
    write_jsonl(&dir.join("captions.jsonl"), &data.captions)?;
    data.vocab.write(&dir.join("vocab.txt"))
}

/// Mean color of the glyph pixels inside the box.
fn glyph_color(image: &Image, obj: &Object) -> Result<[f64; 3]> {
    let (x0, y0, x1, y1) = obj.bbox().pixel_range(image)?;
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = image.pixel(y, x);
            let dev = (0..3).map(|c| (p[c] - BACKGROUND[c]).abs()).fold(0.0, f64::max);
            if dev > FOREGROUND_THRESHOLD {
                (0..3).for_each(|c| sum[c] += p[c]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("box contains no glyph pixels".into()));
    }
    Ok(sum.map(|s| s / count as f64))
}

fn nearest_color(rgb: [f64; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| {
            let d = |c: &[f64; 3]| (0..3).map(|i| (c[i] - rgb[i]).powi(2)).sum::<f64>();
            d(&a.1).total_cmp(&d(&b.1))
        })
        .map(|(n, _)| *n)
        .expect("palette is nonempty")
}

fn asked_object(rec: &Record) -> Result<usize> {
    rec.question
        .iter()
        .find_map(|p| match p {
            Piece::Ref { index } => Some(*index),
            Piece::Word(_) => None,
        })
        .ok_or_else(|| Error::Data("question has no deictic reference".into()))
}

/// Labels a record from pixels alone: reads the color of the referenced box
/// and returns the index of the matching answer.
pub fn oracle_answer(rec: &Record, image: &Image) -> Result<usize> {
    let obj = &rec.objects[asked_object(rec)?];
    let name = nearest_color(glyph_color(image, obj)?);
    rec.answers
        .iter()
        .position(|a| matches!(a.as_slice(), [Piece::Word(w)] if w == name))
        .ok_or_else(|| Error::Data(format!("no answer reads {name}")))
}

/// The rationale whose referenced box has the gold answer color.
pub fn oracle_rationale(rec: &Record, image: &Image) -> Result<usize> {
    let gold = match rec.answers[rec.correct_answer].as_slice() {
        [Piece::Word(w)] => w.clone(),
        _ => return Err(Error::Data("gold answer is not a single color".into())),
    };
    for (k, r) in rec.rationales.iter().enumerate() {
        if let Some(Piece::Ref { index }) = r.iter().find(|p| matches!(p, Piece::Ref { .. })) {
            if nearest_color(glyph_color(image, &rec.objects[*index])?) == gold
                && *index == asked_object(rec)?
            {
                return Ok(k);
            }
        }
    }
    Err(Error::Data("no rationale matches".into()))
}
