//! Deterministic reward functions for subject consistency and semantic
//! alignment.
//!
//! Subjects are segmented by color distance from the (known) background
//! before any feature extraction. Two distinct feature extractors exist on
//! purpose: extractor A drives the training reward, extractor B is held out
//! for evaluation, so a policy that games the reward-side features is
//! measurable rather than invisible.
//!
//! The semantic reward is the mean of four binary attribute checks
//! (background, subject color, shape, position), so it takes values in
//! {0, 0.25, 0.5, 0.75, 1} exactly.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::synthdata::{shape_stencil, Prompt, Shape, IMAGE_SIDE, PALETTE, STENCIL_SIDE, WHITE};
use crate::tokenizer::{Image, Rgb};

/// Reward weighting and segmentation threshold.
#[derive(Debug, Clone, Copy)]
pub struct RewardConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 1.0,
            gamma: 2.0,
            tau: 0.2,
        }
    }
}

#[inline]
fn linf(a: Rgb, b: Rgb) -> f64 {
    let mut m = 0.0;
    for c in 0..3 {
        m = math::abs(a[c] - b[c]).max(m);
    }
    m
}

/// True where the pixel's L-infinity distance from the background color
/// exceeds `tau`. An empty mask is a legal output.
pub fn segment_subject(image: &Image, background: Rgb, tau: f64) -> Vec<bool> {
    image.pixels.iter().map(|&p| linf(p, background) > tau).collect()
}

fn mask_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

fn centroid(image_w: usize, mask: &[bool]) -> (f64, f64) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            sr += (i / image_w) as f64;
            sc += (i % image_w) as f64;
            n += 1.0;
        }
    }
    (sr / n, sc / n)
}

/// Reward-side features (extractor A): 27-bin color histogram over subject
/// pixels (L1-normalized) plus area fraction and the normalized central
/// second moments. Histogram and moments enter the cosine with equal weight.
pub fn features_a(image: &Image, mask: &[bool]) -> Option<Vec<f64>> {
    let n = mask_count(mask);
    if n == 0 {
        return None;
    }
    let mut hist = vec![0.0; 27];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let p = image.pixels[i];
            let bin = |c: f64| ((c * 3.0) as usize).min(2);
            hist[(bin(p[0]) * 3 + bin(p[1])) * 3 + bin(p[2])] += 1.0;
        }
    }
    for h in &mut hist {
        *h /= n as f64;
    }
    let (cr, cc) = centroid(image.width, mask);
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let dr = (i / image.width) as f64 - cr;
            let dc = (i % image.width) as f64 - cc;
            mu20 += dr * dr;
            mu02 += dc * dc;
            mu11 += dr * dc;
        }
    }
    let norm = (n * n) as f64;
    let mut out = hist;
    out.push(n as f64 / (image.width * image.height) as f64);
    out.push(mu20 / norm);
    out.push(mu02 / norm);
    out.push(mu11 / norm);
    Some(out)
}

/// Held-out evaluation features (extractor B): 64-bin color histogram plus an
/// 8-bin orientation histogram of the subject mask boundary.
pub fn features_b(image: &Image, mask: &[bool]) -> Option<Vec<f64>> {
    let n = mask_count(mask);
    if n == 0 {
        return None;
    }
    let w = image.width;
    let h = image.height;
    let mut hist = vec![0.0; 64];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let p = image.pixels[i];
            let bin = |c: f64| ((c * 4.0) as usize).min(3);
            hist[(bin(p[0]) * 4 + bin(p[1])) * 4 + bin(p[2])] += 1.0;
        }
    }
    for v in &mut hist {
        *v /= n as f64;
    }
    // Boundary orientation from a Sobel filter over the binary mask.
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            mask[r as usize * w + c as usize] as u8 as f64
        }
    };
    let mut orient = vec![0.0; 8];
    let mut boundary = 0.0;
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(r, c) == 0.0 {
                continue;
            }
            let on_edge =
                at(r - 1, c) == 0.0 || at(r + 1, c) == 0.0 || at(r, c - 1) == 0.0 || at(r, c + 1) == 0.0;
            if !on_edge {
                continue;
            }
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            let angle = math::atan2(gy, gx); // (-pi, pi]
            let frac = (angle + core::f64::consts::PI) / (2.0 * core::f64::consts::PI);
            let bin = ((frac * 8.0) as usize).min(7);
            orient[bin] += 1.0;
            boundary += 1.0;
        }
    }
    if boundary > 0.0 {
        for v in &mut orient {
            *v /= boundary;
        }
    }
    hist.extend_from_slice(&orient);
    Some(hist)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (math::sqrt(na) * math::sqrt(nb))
}

/// Subject consistency reward: cosine similarity of extractor-A features of
/// the two segmented subjects. An empty mask on either side yields 0.
pub fn reward_subject(
    gen_image: &Image,
    gen_background: Rgb,
    ref_image: &Image,
    config: &RewardConfig,
) -> f64 {
    let gen_mask = segment_subject(gen_image, gen_background, config.tau);
    let ref_mask = segment_subject(ref_image, WHITE, config.tau);
    match (
        features_a(gen_image, &gen_mask),
        features_a(ref_image, &ref_mask),
    ) {
        (Some(fa), Some(fb)) => cosine(&fa, &fb),
        _ => 0.0,
    }
}

/// Same comparison in the held-out extractor-B feature space (evaluation
/// only, never used as a training reward).
pub fn subject_similarity_b(
    gen_image: &Image,
    gen_background: Rgb,
    ref_image: &Image,
    config: &RewardConfig,
) -> f64 {
    let gen_mask = segment_subject(gen_image, gen_background, config.tau);
    let ref_mask = segment_subject(ref_image, WHITE, config.tau);
    match (
        features_b(gen_image, &gen_mask),
        features_b(ref_image, &ref_mask),
    ) {
        (Some(fa), Some(fb)) => cosine(&fa, &fb),
        _ => 0.0,
    }
}

/// Places `shape`'s stencil so its centroid matches (cr, cc) and returns the
/// IoU with `mask`.
fn template_iou(mask: &[bool], w: usize, h: usize, shape: Shape, cr: f64, cc: f64) -> f64 {
    let stencil = shape_stencil(shape);
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for i in 0..STENCIL_SIDE {
        for j in 0..STENCIL_SIDE {
            if stencil[i * STENCIL_SIDE + j] {
                sr += i as f64;
                sc += j as f64;
                n += 1.0;
            }
        }
    }
    let off_r = math::round_half_up(cr - sr / n) as i64;
    let off_c = math::round_half_up(cc - sc / n) as i64;
    let mut inter = 0usize;
    let mut union = mask_count(mask);
    for i in 0..STENCIL_SIDE as i64 {
        for j in 0..STENCIL_SIDE as i64 {
            if !stencil[(i * STENCIL_SIDE as i64 + j) as usize] {
                continue;
            }
            let (r, c) = (off_r + i, off_c + j);
            let inside = r >= 0 && c >= 0 && r < h as i64 && c < w as i64;
            if inside && mask[r as usize * w + c as usize] {
                inter += 1;
            } else {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Breakdown of the four semantic checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemanticChecks {
    pub background: bool,
    pub subject_color: bool,
    pub shape: bool,
    pub position: bool,
}

impl SemanticChecks {
    pub fn score(&self) -> f64 {
        (self.background as u8 + self.subject_color as u8 + self.shape as u8 + self.position as u8)
            as f64
            / 4.0
    }
}

/// Evaluates the four binary attribute checks against a prompt.
pub fn semantic_checks(image: &Image, prompt: &Prompt, config: &RewardConfig) -> SemanticChecks {
    let bg = PALETTE[prompt.background_color].1;
    let w = image.width;
    let h = image.height;
    // Background: every border pixel close to the prompted color.
    let mut background = true;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                if linf(image.at(r, c), bg) > config.tau {
                    background = false;
                }
            }
        }
    }
    let mask = segment_subject(image, bg, config.tau);
    let n = mask_count(&mask);
    let (mut subject_color, mut shape, mut position) = (false, false, false);
    if n > 0 {
        let mut mean = [0.0; 3];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..3 {
                    mean[c] += image.pixels[i][c];
                }
            }
        }
        for c in &mut mean {
            *c /= n as f64;
        }
        subject_color = linf(mean, PALETTE[prompt.subject_color].1) <= config.tau;
        let (cr, cc) = centroid(w, &mask);
        let mut best = Shape::ALL[0];
        let mut best_iou = -1.0;
        for s in Shape::ALL {
            let iou = template_iou(&mask, w, h, s, cr, cc);
            if iou > best_iou {
                best_iou = iou;
                best = s;
            }
        }
        shape = best == prompt.shape;
        position = prompt.quadrant.contains(cr, cc);
    }
    SemanticChecks {
        background,
        subject_color,
        shape,
        position,
    }
}

/// Semantic alignment reward: mean of the four binary checks.
pub fn reward_semantic(image: &Image, prompt: &Prompt, config: &RewardConfig) -> f64 {
    semantic_checks(image, prompt, config).score()
}

/// Final reward: alpha * R_subject + gamma * R_semantic.
pub fn combine(r_subject: f64, r_semantic: f64, config: &RewardConfig) -> f64 {
    config.alpha * r_subject + config.gamma * r_semantic
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render, SubjectSpec, Tier, IMAGE_SIDE};

    fn clean_example(desc: &str, seed: u64) -> crate::synthdata::Example {
        let prompt = Prompt::parse(desc).unwrap();
        let spec = SubjectSpec {
            shape: prompt.shape,
            color: prompt.subject_color,
            jitter_seed: seed,
        };
        render(&prompt, &spec, Tier::Clean)
    }

    fn iou(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
        let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
        inter as f64 / union as f64
    }

    #[test]
    fn segmentation_recovers_renderer_mask() {
        let cfg = RewardConfig::default();
        for seed in 0..20 {
            let ex = clean_example("circle,red,blue,NE", seed);
            let bg = PALETTE[ex.prompt.background_color].1;
            let mask = segment_subject(&ex.target, bg, cfg.tau);
            assert!(iou(&mask, &ex.target_subject_mask) >= 0.95);
        }
    }

    #[test]
    fn solid_background_gives_empty_mask() {
        let cfg = RewardConfig::default();
        let img = Image::filled(16, 16, PALETTE[2].1);
        let mask = segment_subject(&img, PALETTE[2].1, cfg.tau);
        assert_eq!(mask_count(&mask), 0);
    }

    #[test]
    fn extreme_threshold_gives_empty_mask() {
        let ex = clean_example("square,yellow,purple,SW", 3);
        let bg = PALETTE[ex.prompt.background_color].1;
        let mask = segment_subject(&ex.target, bg, 0.999);
        assert_eq!(mask_count(&mask), 0);
    }

    #[test]
    fn clean_examples_score_full_semantic_reward() {
        let cfg = RewardConfig::default();
        for desc in [
            "circle,red,blue,NE",
            "square,green,magenta,NW",
            "triangle,orange,cyan,SW",
            "cross,purple,yellow,SE",
        ] {
            for seed in 0..10 {
                let ex = clean_example(desc, seed);
                let checks = semantic_checks(&ex.target, &ex.prompt, &cfg);
                assert_eq!(checks.score(), 1.0, "{desc} seed {seed}: {checks:?}");
            }
        }
    }

    #[test]
    fn clean_examples_score_near_perfect_subject_reward() {
        let cfg = RewardConfig::default();
        for seed in 0..10 {
            let ex = clean_example("triangle,magenta,green,SE", seed);
            let bg = PALETTE[ex.prompt.background_color].1;
            let ri = reward_subject(&ex.target, bg, &ex.reference, &cfg);
            assert!(ri >= 0.99, "seed {seed}: {ri}");
            let rb = subject_similarity_b(&ex.target, bg, &ex.reference, &cfg);
            assert!(rb >= 0.99, "seed {seed}: B {rb}");
        }
    }

    #[test]
    fn empty_generated_subject_scores_zero() {
        let cfg = RewardConfig::default();
        let ex = clean_example("circle,red,blue,NE", 1);
        let bg = PALETTE[ex.prompt.background_color].1;
        let solid = Image::filled(16, 16, bg);
        assert_eq!(reward_subject(&solid, bg, &ex.reference, &cfg), 0.0);
    }

    #[test]
    fn wrong_subject_color_scores_strictly_less() {
        let cfg = RewardConfig::default();
        let matched = clean_example("circle,red,blue,NE", 5);
        let wrong = clean_example("circle,green,blue,NE", 5);
        let bg = PALETTE[matched.prompt.background_color].1;
        let r_match = reward_subject(&matched.target, bg, &matched.reference, &cfg);
        let r_wrong = reward_subject(&wrong.target, bg, &matched.reference, &cfg);
        assert!(r_wrong < r_match, "{r_wrong} !< {r_match}");
    }

    #[test]
    fn background_only_image_scores_quarter() {
        let cfg = RewardConfig::default();
        let prompt = Prompt::parse("circle,red,blue,NE").unwrap();
        let solid = Image::filled(16, 16, PALETTE[prompt.background_color].1);
        assert_eq!(reward_semantic(&solid, &prompt, &cfg), 0.25);
    }

    #[test]
    fn wrong_quadrant_fails_exactly_one_check() {
        let cfg = RewardConfig::default();
        let ex = clean_example("cross,cyan,red,NE", 2);
        let mut moved = ex.prompt;
        moved.quadrant = crate::synthdata::Quadrant::Sw;
        assert_eq!(reward_semantic(&ex.target, &moved, &cfg), 0.75);
    }

    #[test]
    fn semantic_reward_takes_only_quarter_values() {
        let cfg = RewardConfig::default();
        let prompt = Prompt::parse("triangle,blue,orange,NW").unwrap();
        let mut s = crate::rng::Stream::new(31);
        for _ in 0..50 {
            let img = Image::new(
                IMAGE_SIDE,
                IMAGE_SIDE,
                (0..IMAGE_SIDE * IMAGE_SIDE)
                    .map(|_| [s.next_f64(), s.next_f64(), s.next_f64()])
                    .collect(),
            );
            let r = reward_semantic(&img, &prompt, &cfg);
            assert!([0.0, 0.25, 0.5, 0.75, 1.0].contains(&r), "{r}");
        }
    }

    #[test]
    fn subject_reward_is_symmetric_on_stripped_backgrounds() {
        let cfg = RewardConfig::default();
        let a = clean_example("circle,red,blue,NE", 7).reference;
        let b = clean_example("square,green,blue,NE", 8).reference;
        let ab = reward_subject(&a, WHITE, &b, &cfg);
        let ba = reward_subject(&b, WHITE, &a, &cfg);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn subject_reward_is_translation_invariant() {
        let cfg = RewardConfig::default();
        // Same subject instance placed in different quadrants.
        let prompt_ne = Prompt::parse("triangle,yellow,purple,NE").unwrap();
        let prompt_sw = Prompt::parse("triangle,yellow,purple,SW").unwrap();
        let spec = SubjectSpec {
            shape: prompt_ne.shape,
            color: prompt_ne.subject_color,
            jitter_seed: 12,
        };
        let ne = render(&prompt_ne, &spec, Tier::Clean);
        let sw = render(&prompt_sw, &spec, Tier::Clean);
        let bg = PALETTE[prompt_ne.background_color].1;
        let r1 = reward_subject(&ne.target, bg, &ne.reference, &cfg);
        let r2 = reward_subject(&sw.target, bg, &ne.reference, &cfg);
        assert!((r1 - r2).abs() < 1e-12, "{r1} vs {r2}");
    }

    #[test]
    fn combine_matches_weighted_sum_and_is_monotone() {
        let cfg = RewardConfig::default();
        assert!((combine(0.5, 0.3, &cfg) - 1.1).abs() < 1e-15);
        let ri_only = RewardConfig { gamma: 0.0, ..cfg };
        assert_eq!(combine(0.4, 0.9, &ri_only), 0.4);
        assert_eq!(combine(0.0, 0.0, &cfg), 0.0);
        let mut s = crate::rng::Stream::new(41);
        for _ in 0..100 {
            let (a, b) = (s.next_f64(), s.next_f64());
            let (da, db) = (s.next_f64() * 0.1, s.next_f64() * 0.1);
            assert!(combine(a + da, b, &cfg) >= combine(a, b, &cfg));
            assert!(combine(a, b + db, &cfg) >= combine(a, b, &cfg));
        }
    }

    #[test]
    fn shape_check_distinguishes_all_stencils() {
        let cfg = RewardConfig::default();
        for shape in Shape::ALL {
            for other in Shape::ALL {
                let mut prompt = Prompt::parse("circle,red,blue,NE").unwrap();
                prompt.shape = other;
                let spec = SubjectSpec {
                    shape,
                    color: prompt.subject_color,
                    jitter_seed: 3,
                };
                let rendered = render(
                    &Prompt { shape, ..prompt },
                    &spec,
                    Tier::Clean,
                );
                let checks = semantic_checks(&rendered.target, &prompt, &cfg);
                assert_eq!(checks.shape, shape == other, "{shape:?} vs {other:?}");
            }
        }
    }
}
