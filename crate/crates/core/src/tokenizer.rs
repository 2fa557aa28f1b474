//! Deterministic multi-scale residual quantizer.
//!
//! An image is encoded coarse-to-fine: at each scale the image is pooled by
//! cell averaging, the residual against the nearest-neighbor-upsampled running
//! reconstruction is quantized to a fixed RGB lattice, and the chosen code is
//! added back into the reconstruction. The decoder replays the same recursion
//! from codes alone, so encode/decode agree bit for bit.
//!
//! The lattice spans [-1, 1] per channel with an odd number of levels, so the
//! zero residual is always representable and the per-cell reconstruction
//! error is bounded by half a lattice step at every scale.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// One RGB triple.
pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    /// Codebook levels must be an odd integer >= 3.
    InvalidLevels(u32),
    /// Image dimensions do not match the schedule's final side.
    ShapeMismatch { expected: usize, got: (usize, usize) },
    /// Schedule must be strictly increasing with a divisibility chain.
    InvalidSchedule,
    /// A token index is outside the codebook, or a grid has the wrong shape.
    CorruptTokens { scale: usize },
}

impl fmt::Display for TokenizerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerError::InvalidLevels(l) => {
                write!(f, "codebook levels must be odd and >= 3, got {l}")
            }
            TokenizerError::ShapeMismatch { expected, got } => write!(
                f,
                "image is {}x{} but the schedule ends at side {expected}",
                got.0, got.1
            ),
            TokenizerError::InvalidSchedule => write!(f, "scale schedule is invalid"),
            TokenizerError::CorruptTokens { scale } => {
                write!(f, "token grid at scale {scale} is corrupt")
            }
        }
    }
}

/// RGB raster with channels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Image {
            width,
            height,
            pixels,
        }
    }

    /// Solid-color image.
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Image {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Rgb {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut Rgb {
        &mut self.pixels[row * self.width + col]
    }

    /// True if every channel lies in [0, 1].
    pub fn in_gamut(&self) -> bool {
        self.pixels
            .iter()
            .all(|p| p.iter().all(|&c| (0.0..=1.0).contains(&c)))
    }
}

/// Ordered side lengths s_1 < s_2 < ... < s_K where each side divides the
/// next and the last equals the image side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    sides: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(sides: &[usize]) -> Result<Self, TokenizerError> {
        if sides.is_empty() || sides[0] == 0 {
            return Err(TokenizerError::InvalidSchedule);
        }
        for w in sides.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return Err(TokenizerError::InvalidSchedule);
            }
        }
        Ok(ScaleSchedule {
            sides: sides.to_vec(),
        })
    }

    /// The default five-scale schedule for 16x16 images.
    pub fn default_16() -> Self {
        ScaleSchedule::new(&[1, 2, 4, 8, 16]).unwrap()
    }

    #[inline]
    pub fn num_scales(&self) -> usize {
        self.sides.len()
    }

    #[inline]
    pub fn side(&self, k: usize) -> usize {
        self.sides[k]
    }

    #[inline]
    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    #[inline]
    pub fn final_side(&self) -> usize {
        *self.sides.last().unwrap()
    }

    /// Total token count over all scales (sum of squared sides).
    pub fn total_tokens(&self) -> usize {
        self.sides.iter().map(|&s| s * s).sum()
    }
}

/// Full lattice codebook over {-1, -1+step, ..., 1}^3.
#[derive(Debug, Clone)]
pub struct Codebook {
    levels_per_channel: u32,
    step: f64,
}

impl Codebook {
    #[inline]
    pub fn levels(&self) -> u32 {
        self.levels_per_channel
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    #[inline]
    pub fn size(&self) -> usize {
        let l = self.levels_per_channel as usize;
        l * l * l
    }

    /// Index of the all-zero residual code.
    pub fn zero_index(&self) -> u32 {
        let l = self.levels_per_channel;
        let mid = (l - 1) / 2;
        (mid * l + mid) * l + mid
    }

    /// Residual triple for a code index.
    pub fn code(&self, index: u32) -> Option<Rgb> {
        if index as usize >= self.size() {
            return None;
        }
        let l = self.levels_per_channel;
        let ib = index % l;
        let ig = (index / l) % l;
        let ir = index / (l * l);
        Some([
            -1.0 + self.step * ir as f64,
            -1.0 + self.step * ig as f64,
            -1.0 + self.step * ib as f64,
        ])
    }

    /// Nearest code to `residual`, ties broken toward the lower index.
    /// Returns (index, code value).
    pub fn quantize(&self, residual: Rgb) -> (u32, Rgb) {
        let l = self.levels_per_channel;
        let mut idx = 0u32;
        let mut code = [0.0; 3];
        for c in 0..3 {
            // Channel level nearest to the residual; half-way ties go to the
            // lower level, which is also the lower packed index.
            let raw = math::round_half_down((residual[c] + 1.0) / self.step);
            let level = if raw < 0.0 {
                0
            } else if raw > (l - 1) as f64 {
                l - 1
            } else {
                raw as u32
            };
            idx = idx * l + level;
            code[c] = -1.0 + self.step * level as f64;
        }
        (idx, code)
    }
}

/// Builds the lattice codebook. `levels_per_channel` must be odd and >= 3 so
/// the zero residual is representable.
pub fn build_codebook(levels_per_channel: u32) -> Result<Codebook, TokenizerError> {
    if levels_per_channel < 3 || levels_per_channel % 2 == 0 {
        return Err(TokenizerError::InvalidLevels(levels_per_channel));
    }
    Ok(Codebook {
        levels_per_channel,
        step: 2.0 / (levels_per_channel - 1) as f64,
    })
}

/// Per-scale integer token grids; grid k has s_k * s_k entries, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiScaleTokens {
    pub maps: Vec<Vec<u32>>,
}

impl MultiScaleTokens {
    /// All tokens in scale-major, row-major order.
    pub fn flatten(&self) -> Vec<u32> {
        self.maps.iter().flatten().copied().collect()
    }

    pub fn validate(
        &self,
        schedule: &ScaleSchedule,
        cb: &Codebook,
    ) -> Result<(), TokenizerError> {
        if self.maps.len() != schedule.num_scales() {
            return Err(TokenizerError::CorruptTokens { scale: 0 });
        }
        for (k, map) in self.maps.iter().enumerate() {
            let s = schedule.side(k);
            if map.len() != s * s {
                return Err(TokenizerError::CorruptTokens { scale: k });
            }
            if map.iter().any(|&t| t as usize >= cb.size()) {
                return Err(TokenizerError::CorruptTokens { scale: k });
            }
        }
        Ok(())
    }
}

/// Baseline reconstruction value before the first scale.
pub const BASELINE: f64 = 0.5;

/// Cell-average pool of a full-resolution plane to side `s`.
fn pool(pixels: &[Rgb], full: usize, s: usize) -> Vec<Rgb> {
    let f = full / s;
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![[0.0; 3]; s * s];
    for r in 0..s {
        for c in 0..s {
            let mut acc = [0.0; 3];
            for dr in 0..f {
                let row = r * f + dr;
                for dc in 0..f {
                    let p = pixels[row * full + c * f + dc];
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                }
            }
            out[r * s + c] = [acc[0] * inv, acc[1] * inv, acc[2] * inv];
        }
    }
    out
}

/// Nearest-neighbor upsample from side `s` to side `s2` (s divides s2).
fn upsample(plane: &[Rgb], s: usize, s2: usize) -> Vec<Rgb> {
    if s == s2 {
        return plane.to_vec();
    }
    let f = s2 / s;
    let mut out = vec![[0.0; 3]; s2 * s2];
    for r in 0..s2 {
        for c in 0..s2 {
            out[r * s2 + c] = plane[(r / f) * s + (c / f)];
        }
    }
    out
}

fn tokenize_full(
    image: &Image,
    schedule: &ScaleSchedule,
    cb: &Codebook,
) -> (MultiScaleTokens, Vec<Rgb>) {
    let full = schedule.final_side();
    let mut rec: Vec<Rgb> = vec![[BASELINE; 3]; 1];
    let mut rec_side = 1usize;
    let mut maps = Vec::with_capacity(schedule.num_scales());
    for k in 0..schedule.num_scales() {
        let s = schedule.side(k);
        let target = pool(&image.pixels, full, s);
        let mut up = upsample(&rec, rec_side, s);
        let mut map = vec![0u32; s * s];
        for i in 0..s * s {
            let residual = [
                target[i][0] - up[i][0],
                target[i][1] - up[i][1],
                target[i][2] - up[i][2],
            ];
            let (idx, code) = cb.quantize(residual);
            map[i] = idx;
            up[i][0] += code[0];
            up[i][1] += code[1];
            up[i][2] += code[2];
        }
        maps.push(map);
        rec = up;
        rec_side = s;
    }
    (MultiScaleTokens { maps }, rec)
}

/// Encodes an image to per-scale token grids. The image side must equal the
/// schedule's final side.
pub fn tokenize(
    image: &Image,
    schedule: &ScaleSchedule,
    cb: &Codebook,
) -> Result<MultiScaleTokens, TokenizerError> {
    let full = schedule.final_side();
    if image.width != full || image.height != full {
        return Err(TokenizerError::ShapeMismatch {
            expected: full,
            got: (image.width, image.height),
        });
    }
    Ok(tokenize_full(image, schedule, cb).0)
}

/// Replays the decode recursion through scale `upto` (1-based, <= K) and
/// returns the unclamped reconstruction at side s_upto.
pub fn reconstruction(
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
    cb: &Codebook,
    upto_scale: usize,
) -> Result<Vec<Rgb>, TokenizerError> {
    tokens.validate(schedule, cb)?;
    assert!(upto_scale >= 1 && upto_scale <= schedule.num_scales());
    let mut rec: Vec<Rgb> = vec![[BASELINE; 3]; 1];
    let mut rec_side = 1usize;
    for k in 0..upto_scale {
        let s = schedule.side(k);
        let mut up = upsample(&rec, rec_side, s);
        for i in 0..s * s {
            let code = cb
                .code(tokens.maps[k][i])
                .ok_or(TokenizerError::CorruptTokens { scale: k })?;
            up[i][0] += code[0];
            up[i][1] += code[1];
            up[i][2] += code[2];
        }
        rec = up;
        rec_side = s;
    }
    Ok(rec)
}

/// Decodes tokens back to a full-resolution image, clamped to [0, 1] at the
/// output only.
pub fn detokenize(
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
    cb: &Codebook,
    upto_scale: usize,
) -> Result<Image, TokenizerError> {
    let rec = reconstruction(tokens, schedule, cb, upto_scale)?;
    let side = schedule.side(upto_scale - 1);
    let full = schedule.final_side();
    let up = upsample(&rec, side, full);
    let pixels = up
        .iter()
        .map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)])
        .collect();
    Ok(Image::new(full, full, pixels))
}

/// Channel value to byte, round half up (documented PPM mapping).
#[inline]
pub fn channel_to_byte(v: f64) -> u8 {
    let x = math::round_half_up(v.clamp(0.0, 1.0) * 255.0);
    x as u8
}

/// Byte to channel value.
#[inline]
pub fn byte_to_channel(b: u8) -> f64 {
    b as f64 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn default_cb() -> Codebook {
        build_codebook(9).unwrap()
    }

    pub(crate) fn random_image(side: usize, seed: u64) -> Image {
        let mut s = Stream::derive(seed, 0xA11CE, &[]);
        let pixels = (0..side * side)
            .map(|_| [s.next_f64(), s.next_f64(), s.next_f64()])
            .collect();
        Image::new(side, side, pixels)
    }

    #[test]
    fn codebook_default_shape() {
        let cb = default_cb();
        assert_eq!(cb.size(), 729);
        assert_eq!(cb.step(), 0.25);
        assert_eq!(cb.zero_index(), 364);
        assert_eq!(cb.code(364), Some([0.0, 0.0, 0.0]));
    }

    #[test]
    fn codebook_l3() {
        let cb = build_codebook(3).unwrap();
        assert_eq!(cb.size(), 27);
        assert_eq!(cb.step(), 1.0);
    }

    #[test]
    fn codebook_rejects_even_or_small_levels() {
        assert!(matches!(
            build_codebook(4),
            Err(TokenizerError::InvalidLevels(4))
        ));
        assert!(build_codebook(1).is_err());
        assert!(build_codebook(2).is_err());
    }

    #[test]
    fn quantize_ties_go_to_lower_index() {
        let cb = default_cb();
        // 0.125 is exactly half way between levels 0.0 and 0.25.
        let (idx, code) = cb.quantize([0.125, 0.0, 0.0]);
        assert_eq!(code, [0.0, 0.0, 0.0]);
        assert_eq!(idx, 364);
    }

    #[test]
    fn constant_half_image_is_all_zero_codes() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        let img = Image::filled(16, 16, [0.5, 0.5, 0.5]);
        let toks = tokenize(&img, &sched, &cb).unwrap();
        for map in &toks.maps {
            assert!(map.iter().all(|&t| t == 364));
        }
    }

    #[test]
    fn single_step_residual_lands_on_scale_one() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        let img = Image::filled(16, 16, [0.75, 0.5, 0.5]);
        let toks = tokenize(&img, &sched, &cb).unwrap();
        // (0.25, 0, 0) code: (5*9 + 4)*9 + 4 = 445.
        assert_eq!(toks.maps[0], vec![445]);
        for map in &toks.maps[1..] {
            assert!(map.iter().all(|&t| t == 364));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        let img = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(
            tokenize(&img, &sched, &cb),
            Err(TokenizerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn schedule_invariants() {
        assert!(ScaleSchedule::new(&[1, 2, 4]).is_ok());
        assert!(ScaleSchedule::new(&[1, 3, 9]).is_ok());
        assert!(ScaleSchedule::new(&[2, 2]).is_err());
        assert!(ScaleSchedule::new(&[2, 3]).is_err());
        assert!(ScaleSchedule::new(&[]).is_err());
        assert_eq!(ScaleSchedule::default_16().total_tokens(), 341);
    }

    #[test]
    fn quantization_bound_holds_per_scale() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        for seed in 0..50 {
            let img = random_image(16, seed);
            let toks = tokenize(&img, &sched, &cb).unwrap();
            for k in 1..=sched.num_scales() {
                let rec = reconstruction(&toks, &sched, &cb, k).unwrap();
                let target = pool(&img.pixels, 16, sched.side(k - 1));
                for (r, t) in rec.iter().zip(&target) {
                    for c in 0..3 {
                        assert!(
                            math::abs(r[c] - t[c]) <= 0.125 + 1e-12,
                            "seed {seed} scale {k} err {}",
                            math::abs(r[c] - t[c])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn detokenize_replays_encoder_reconstruction_bitwise() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        let img = random_image(16, 99);
        let (toks, rec_enc) = tokenize_full(&img, &sched, &cb);
        let rec_dec = reconstruction(&toks, &sched, &cb, sched.num_scales()).unwrap();
        assert_eq!(rec_enc.len(), rec_dec.len());
        for (a, b) in rec_enc.iter().zip(&rec_dec) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits());
            }
        }
    }

    #[test]
    fn all_zero_tokens_decode_to_half_gray() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        let maps = sched
            .sides()
            .iter()
            .map(|&s| vec![364u32; s * s])
            .collect();
        let img = detokenize(&MultiScaleTokens { maps }, &sched, &cb, 5).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.5, 0.5, 0.5]));
    }

    #[test]
    fn corrupt_tokens_are_rejected() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        let mut maps: Vec<Vec<u32>> =
            sched.sides().iter().map(|&s| vec![364u32; s * s]).collect();
        maps[2][1] = 729;
        assert!(matches!(
            detokenize(&MultiScaleTokens { maps }, &sched, &cb, 5),
            Err(TokenizerError::CorruptTokens { scale: 2 })
        ));
    }

    #[test]
    fn round_trip_error_within_half_step() {
        let cb = default_cb();
        let sched = ScaleSchedule::default_16();
        for seed in 0..50 {
            let img = random_image(16, 1000 + seed);
            let toks = tokenize(&img, &sched, &cb).unwrap();
            let out = detokenize(&toks, &sched, &cb, 5).unwrap();
            for (a, b) in img.pixels.iter().zip(&out.pixels) {
                for c in 0..3 {
                    assert!(math::abs(a[c] - b[c]) <= 0.125 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn byte_mapping_rounds_half_up() {
        assert_eq!(channel_to_byte(0.5), 128); // 127.5 rounds up
        assert_eq!(channel_to_byte(0.0), 0);
        assert_eq!(channel_to_byte(1.0), 255);
        assert_eq!(channel_to_byte(-0.3), 0);
        assert!((byte_to_channel(128) - 128.0 / 255.0).abs() < 1e-15);
    }
}
