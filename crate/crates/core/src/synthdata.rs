//! Procedural world of prompts, reference subjects, and target scenes.
//!
//! A prompt is a discrete attribute tuple (shape, subject color, background
//! color, quadrant) encoded as four text tokens. Subjects are 6x6 stencils
//! placed inside an 8x8 quadrant with a one-pixel margin; each subject
//! instance carries a deterministic speckle texture (a seeded subset of its
//! pixels darkened by a seeded factor), so faithful generation requires
//! copying the reference rather than memorizing the prompt.
//!
//! The reference image shows the same subject centered on white. The NOISY
//! tier perturbs the target with uniform pixel noise of amplitude 0.1 and a
//! +-1 pixel placement jitter; the CLEAN tier is exact. An eighth of all
//! prompt combinations is held out of training by a fixed hash split.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{hash_indices, Stream};
use crate::tokenizer::{Image, Rgb};

pub const IMAGE_SIDE: usize = 16;
pub const STENCIL_SIDE: usize = 6;
/// Text prompt length in tokens.
pub const TEXT_LEN: usize = 4;
/// Size of the text token vocabulary (4 shapes + 8 + 8 colors + 4 quadrants).
pub const TEXT_VOCAB: usize = 24;

const TAG_SPECKLE_FRAC: u64 = 0xF1;
const TAG_SPECKLE_FACTOR: u64 = 0xF2;
const TAG_SPECKLE_PIX: u64 = 0xF3;
const TAG_JITTER: u64 = 0xF4;
const TAG_NOISE: u64 = 0xF5;
const TAG_HOLDOUT: u64 = 0xF6;
const TAG_PROMPT: u64 = 0xF7;
const TAG_SPEC: u64 = 0xF8;

/// Named palette; contains no white so reference backgrounds are always
/// separable from subjects.
pub const PALETTE: [(&str, Rgb); 8] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.90, 0.10]),
    ("cyan", [0.10, 0.80, 0.80]),
    ("magenta", [0.85, 0.15, 0.80]),
    ("orange", [0.95, 0.55, 0.10]),
    ("purple", [0.50, 0.15, 0.85]),
];

pub const WHITE: Rgb = [1.0, 1.0, 1.0];

pub fn color_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|(n, _)| *n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.iter().copied().find(|s| s.name() == name)
    }

    pub fn index(&self) -> usize {
        Shape::ALL.iter().position(|s| s == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    Nw,
    Ne,
    Sw,
    Se,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Nw, Quadrant::Ne, Quadrant::Sw, Quadrant::Se];

    pub fn name(&self) -> &'static str {
        match self {
            Quadrant::Nw => "NW",
            Quadrant::Ne => "NE",
            Quadrant::Sw => "SW",
            Quadrant::Se => "SE",
        }
    }

    pub fn from_name(name: &str) -> Option<Quadrant> {
        Quadrant::ALL.iter().copied().find(|q| q.name() == name)
    }

    pub fn index(&self) -> usize {
        Quadrant::ALL.iter().position(|q| q == self).unwrap()
    }

    /// (row, col) of the quadrant's top-left pixel.
    pub fn origin(&self) -> (usize, usize) {
        match self {
            Quadrant::Nw => (0, 0),
            Quadrant::Ne => (0, IMAGE_SIDE / 2),
            Quadrant::Sw => (IMAGE_SIDE / 2, 0),
            Quadrant::Se => (IMAGE_SIDE / 2, IMAGE_SIDE / 2),
        }
    }

    /// True if (row, col) lies in this quadrant.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let h = (IMAGE_SIDE / 2) as f64;
        let (r0, c0) = self.origin();
        let (r0, c0) = (r0 as f64, c0 as f64);
        row >= r0 && row < r0 + h && col >= c0 && col < c0 + h
    }
}

/// Discrete prompt: what to draw, in which colors, and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prompt {
    pub shape: Shape,
    pub subject_color: usize,
    pub background_color: usize,
    pub quadrant: Quadrant,
}

impl Prompt {
    /// Four text tokens with disjoint id ranges per attribute slot.
    pub fn text_tokens(&self) -> [u32; TEXT_LEN] {
        [
            self.shape.index() as u32,
            (4 + self.subject_color) as u32,
            (12 + self.background_color) as u32,
            (20 + self.quadrant.index()) as u32,
        ]
    }

    pub fn from_text_tokens(tokens: &[u32]) -> Option<Prompt> {
        if tokens.len() != TEXT_LEN {
            return None;
        }
        let shape = *Shape::ALL.get(tokens[0] as usize)?;
        let subject_color = (tokens[1] as usize).checked_sub(4)?;
        let background_color = (tokens[2] as usize).checked_sub(12)?;
        let quadrant = *Quadrant::ALL.get((tokens[3] as usize).checked_sub(20)?)?;
        if subject_color >= 8 || background_color >= 8 || subject_color == background_color {
            return None;
        }
        Some(Prompt {
            shape,
            subject_color,
            background_color,
            quadrant,
        })
    }

    /// "shape,subject_color,background_color,quadrant", e.g. "square,red,blue,NE".
    pub fn describe(&self) -> String {
        format!(
            "{},{},{},{}",
            self.shape.name(),
            PALETTE[self.subject_color].0,
            PALETTE[self.background_color].0,
            self.quadrant.name()
        )
    }

    pub fn parse(text: &str) -> Option<Prompt> {
        let mut parts = text.split(',');
        let shape = Shape::from_name(parts.next()?.trim())?;
        let subject_color = color_index(parts.next()?.trim())?;
        let background_color = color_index(parts.next()?.trim())?;
        let quadrant = Quadrant::from_name(parts.next()?.trim())?;
        if parts.next().is_some() || subject_color == background_color {
            return None;
        }
        Some(Prompt {
            shape,
            subject_color,
            background_color,
            quadrant,
        })
    }
}

/// A concrete subject instance: shape, color, and its speckle texture seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub color: usize,
    pub jitter_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Noisy,
    Clean,
}

impl Tier {
    pub fn name(&self) -> &'static str {
        match self {
            Tier::Noisy => "noisy",
            Tier::Clean => "clean",
        }
    }

    pub fn from_name(name: &str) -> Option<Tier> {
        match name {
            "noisy" => Some(Tier::Noisy),
            "clean" => Some(Tier::Clean),
            _ => None,
        }
    }
}

/// A rendered training pair.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: Prompt,
    pub spec: SubjectSpec,
    pub reference: Image,
    pub target: Image,
    /// Renderer ground truth: true where the target pixel belongs to the
    /// subject.
    pub target_subject_mask: Vec<bool>,
    pub tier: Tier,
}

/// 6x6 boolean stencil of a shape, row-major.
pub fn shape_stencil(shape: Shape) -> [bool; STENCIL_SIDE * STENCIL_SIDE] {
    let mut out = [false; STENCIL_SIDE * STENCIL_SIDE];
    for i in 0..STENCIL_SIDE {
        for j in 0..STENCIL_SIDE {
            let on = match shape {
                Shape::Square => true,
                Shape::Circle => {
                    let (di, dj) = (i as f64 - 2.5, j as f64 - 2.5);
                    di * di + dj * dj <= 7.0
                }
                Shape::Triangle => {
                    let half = 0.5 + 0.5 * i as f64;
                    (j as f64 - 2.5).abs() <= half
                }
                Shape::Cross => (2..=3).contains(&i) || (2..=3).contains(&j),
            };
            out[i * STENCIL_SIDE + j] = on;
        }
    }
    out
}

/// Speckle parameters for a subject instance: (darken factor, percent of
/// pixels darkened).
fn speckle_params(seed: u64) -> (f64, u64) {
    let factors = [0.5, 0.6, 0.7];
    let f = factors[(hash_indices(seed, TAG_SPECKLE_FACTOR, &[]) % 3) as usize];
    let pct = 15 + hash_indices(seed, TAG_SPECKLE_FRAC, &[]) % 21; // 15..=35
    (f, pct)
}

/// Stencil offsets that are speckle-darkened for this instance: exactly
/// round(pct% of the shape's pixels), chosen by per-offset hash rank so the
/// texture is identical wherever the subject is placed.
fn speckled_offsets(spec: &SubjectSpec) -> Vec<bool> {
    let stencil = shape_stencil(spec.shape);
    let (_, pct) = speckle_params(spec.jitter_seed);
    let mut ranked: Vec<(u64, usize)> = stencil
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| {
            let (dy, dx) = (i / STENCIL_SIDE, i % STENCIL_SIDE);
            (
                hash_indices(spec.jitter_seed, TAG_SPECKLE_PIX, &[dy as u64, dx as u64]),
                i,
            )
        })
        .collect();
    ranked.sort_unstable();
    let k = (pct as usize * ranked.len() + 50) / 100;
    let mut out = vec![false; STENCIL_SIDE * STENCIL_SIDE];
    for &(_, i) in ranked.iter().take(k) {
        out[i] = true;
    }
    out
}

fn stamp_subject(
    image: &mut Image,
    mask: &mut [bool],
    spec: &SubjectSpec,
    box_row: i64,
    box_col: i64,
) {
    let stencil = shape_stencil(spec.shape);
    let speckled = speckled_offsets(spec);
    let (factor, _) = speckle_params(spec.jitter_seed);
    let base = PALETTE[spec.color].1;
    for dy in 0..STENCIL_SIDE {
        for dx in 0..STENCIL_SIDE {
            let i = dy * STENCIL_SIDE + dx;
            if !stencil[i] {
                continue;
            }
            let (r, c) = (box_row + dy as i64, box_col + dx as i64);
            if r < 0 || c < 0 || r >= IMAGE_SIDE as i64 || c >= IMAGE_SIDE as i64 {
                continue;
            }
            let px = if speckled[i] {
                [base[0] * factor, base[1] * factor, base[2] * factor]
            } else {
                base
            };
            *image.at_mut(r as usize, c as usize) = px;
            mask[r as usize * IMAGE_SIDE + c as usize] = true;
        }
    }
}

/// Renders the reference: the subject centered on a white background.
pub fn render_reference(spec: &SubjectSpec) -> Image {
    let mut img = Image::filled(IMAGE_SIDE, IMAGE_SIDE, WHITE);
    let mut mask = vec![false; IMAGE_SIDE * IMAGE_SIDE];
    let off = (IMAGE_SIDE - STENCIL_SIDE) as i64 / 2;
    stamp_subject(&mut img, &mut mask, spec, off, off);
    img
}

/// Renders a full example. The CLEAN tier is exact; the NOISY tier adds
/// seeded uniform pixel noise of amplitude 0.1 plus +-1 pixel placement
/// jitter to the target (the reference is always clean).
pub fn render(prompt: &Prompt, spec: &SubjectSpec, tier: Tier) -> Example {
    debug_assert_eq!(prompt.shape, spec.shape);
    debug_assert_eq!(prompt.subject_color, spec.color);
    let bg = PALETTE[prompt.background_color].1;
    let mut target = Image::filled(IMAGE_SIDE, IMAGE_SIDE, bg);
    let mut mask = vec![false; IMAGE_SIDE * IMAGE_SIDE];
    let (qr, qc) = prompt.quadrant.origin();
    let (mut box_row, mut box_col) = (qr as i64 + 1, qc as i64 + 1);
    if tier == Tier::Noisy {
        let mut s = Stream::derive(spec.jitter_seed, TAG_JITTER, &[]);
        box_row += s.next_below(3) as i64 - 1;
        box_col += s.next_below(3) as i64 - 1;
    }
    stamp_subject(&mut target, &mut mask, spec, box_row, box_col);
    if tier == Tier::Noisy {
        let mut s = Stream::derive(spec.jitter_seed, TAG_NOISE, &[]);
        for p in &mut target.pixels {
            for c in 0..3 {
                p[c] = (p[c] + s.next_range(-0.1, 0.1)).clamp(0.0, 1.0);
            }
        }
    }
    Example {
        prompt: *prompt,
        spec: *spec,
        reference: render_reference(spec),
        target,
        target_subject_mask: mask,
        tier,
    }
}

/// Uniform draw over valid prompts (subject and background colors distinct).
pub fn sample_prompt(stream: &mut Stream) -> Prompt {
    let shape = Shape::ALL[stream.next_below(4) as usize];
    let subject_color = stream.next_below(8) as usize;
    // Uniform over the 7 remaining colors.
    let mut background_color = stream.next_below(7) as usize;
    if background_color >= subject_color {
        background_color += 1;
    }
    let quadrant = Quadrant::ALL[stream.next_below(4) as usize];
    Prompt {
        shape,
        subject_color,
        background_color,
        quadrant,
    }
}

/// Canonical train/eval split: an eighth of prompt combinations is held out.
pub fn is_holdout(prompt: &Prompt) -> bool {
    let t = prompt.text_tokens();
    hash_indices(0, TAG_HOLDOUT, &[t[0] as u64, t[1] as u64, t[2] as u64, t[3] as u64]) % 8 == 0
}

/// Samples a training prompt (rejects held-out combinations).
pub fn sample_train_prompt(stream: &mut Stream) -> Prompt {
    loop {
        let p = sample_prompt(stream);
        if !is_holdout(&p) {
            return p;
        }
    }
}

/// All held-out prompts, in a fixed enumeration order.
pub fn holdout_prompts() -> Vec<Prompt> {
    let mut out = Vec::new();
    for shape in Shape::ALL {
        for sc in 0..8 {
            for bc in 0..8 {
                if bc == sc {
                    continue;
                }
                for q in Quadrant::ALL {
                    let p = Prompt {
                        shape,
                        subject_color: sc,
                        background_color: bc,
                        quadrant: q,
                    };
                    if is_holdout(&p) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// The `index`-th example of the dataset identified by (seed, tier):
/// a training prompt, a fresh subject instance, and the rendered pair.
pub fn dataset_example(seed: u64, index: u64, tier: Tier) -> Example {
    let mut s = Stream::derive(seed, TAG_PROMPT, &[index]);
    let prompt = sample_train_prompt(&mut s);
    let spec = SubjectSpec {
        shape: prompt.shape,
        color: prompt.subject_color,
        jitter_seed: hash_indices(seed, TAG_SPEC, &[index]),
    };
    render(&prompt, &spec, tier)
}

/// A deterministic evaluation set over held-out prompts with fresh subject
/// seeds, cycling through the holdout list.
pub fn eval_examples(seed: u64, n: usize) -> Vec<Example> {
    let pool = holdout_prompts();
    (0..n)
        .map(|i| {
            let prompt = pool[i % pool.len()];
            let spec = SubjectSpec {
                shape: prompt.shape,
                color: prompt.subject_color,
                jitter_seed: hash_indices(seed, TAG_SPEC, &[0xEAA1, i as u64]),
            };
            render(&prompt, &spec, Tier::Clean)
        })
        .collect()
}
