//! Synthetic moving-digit sequences, IDX ingestion and the VSEQ / PGM formats.
//!
//! Sprites move with constant velocity and bounce off the frame edges,
//! rotate at a constant angular velocity and scale by a constant per-frame
//! factor whose direction flips at the scale bounds. Frames composite the
//! sprites by per-pixel max.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, checked_product, read_file, Reader};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Row-major grayscale image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Bitmap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Bitmap { height, width, data: vec![0.0; height * width] }
    }

    fn at(&self, y: isize, x: isize) -> f32 {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample with zero outside the bitmap.
    pub fn sample(&self, y: f64, x: f64) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bottom = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub frame_size: usize,
    /// Side of the square sprite bitmap at unit scale.
    pub sprite_size: usize,
    pub digits: usize,
    pub length: usize,
    /// Number of context frames.
    pub split: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub scale_rate_min: f64,
    pub scale_rate_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Degrees per frame; sampled uniformly in `±angular_max`.
    pub angular_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            frame_size: 64,
            sprite_size: 28,
            digits: 2,
            length: 20,
            split: 10,
            speed_min: 1.0,
            speed_max: 3.6,
            scale_rate_min: 0.95,
            scale_rate_max: 1.05,
            scale_min: 0.6,
            scale_max: 1.6,
            angular_max: 12.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, lo: f64, hi: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                Err(Error::config(key, format!("invalid range [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        if self.frame_size < 2 {
            return Err(Error::config("frame_size", "must be at least 2"));
        }
        if self.sprite_size == 0 || self.sprite_size > self.frame_size {
            return Err(Error::config("sprite_size", "must be in 1..=frame_size"));
        }
        if self.digits == 0 {
            return Err(Error::config("digits", "must be positive"));
        }
        if self.length < 2 {
            return Err(Error::config("length", "must be at least 2"));
        }
        if self.split == 0 || self.split >= self.length {
            return Err(Error::config("split", format!("must be in 1..{}", self.length)));
        }
        range("speed", self.speed_min, self.speed_max)?;
        if self.speed_min < 0.0 {
            return Err(Error::config("speed", "must be non-negative"));
        }
        range("scale_rate", self.scale_rate_min, self.scale_rate_max)?;
        if self.scale_rate_min <= 0.0 {
            return Err(Error::config("scale_rate", "must be positive"));
        }
        range("scale", self.scale_min, self.scale_max)?;
        if self.scale_min <= 0.0 || !(self.scale_min..=self.scale_max).contains(&1.0) {
            return Err(Error::config("scale", "bounds must be positive and contain 1"));
        }
        if !(self.angular_max.is_finite() && self.angular_max >= 0.0) {
            return Err(Error::config("angular_max", "must be non-negative"));
        }
        Ok(())
    }
}

/// One sprite's state; `position` is the sprite centre as `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSpec {
    pub bitmap: Bitmap,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    /// Degrees per frame.
    pub angular_velocity: f64,
    /// Degrees.
    pub angle: f64,
    pub scale: f64,
    pub scale_rate: f64,
}

impl SpriteSpec {
    fn margin(&self, frame: usize) -> f64 {
        let half = 0.5 * self.bitmap.height.max(self.bitmap.width) as f64 * self.scale;
        half.min(0.5 * (frame - 1) as f64)
    }

    /// Advances one frame, bouncing off the edges and the scale bounds.
    pub fn step(&mut self, frame: usize, scale_min: f64, scale_max: f64) {
        self.angle += self.angular_velocity;
        let next = self.scale * self.scale_rate;
        if next > scale_max || next < scale_min {
            self.scale_rate = 1.0 / self.scale_rate;
            self.scale = next.clamp(scale_min, scale_max);
        } else {
            self.scale = next;
        }
        let m = self.margin(frame);
        let hi = (frame - 1) as f64 - m;
        for axis in 0..2 {
            let mut p = self.position[axis] + self.velocity[axis];
            if p < m {
                p = 2.0 * m - p;
                self.velocity[axis] = -self.velocity[axis];
            } else if p > hi {
                p = 2.0 * hi - p;
                self.velocity[axis] = -self.velocity[axis];
            }
            self.position[axis] = p.clamp(m, hi);
        }
    }

    /// Max-composites the transformed sprite into `frame` (`size×size`).
    pub fn render_into(&self, frame: &mut [f32], size: usize) {
        let (sin, cos) = self.angle.to_radians().sin_cos();
        let cy = 0.5 * (self.bitmap.height - 1) as f64;
        let cx = 0.5 * (self.bitmap.width - 1) as f64;
        let reach = self.bitmap.height.max(self.bitmap.width) as f64 * self.scale * 0.75 + 1.0;
        let y_lo = (self.position[0] - reach).floor().max(0.0) as usize;
        let y_hi = ((self.position[0] + reach).ceil() as usize).min(size - 1);
        let x_lo = (self.position[1] - reach).floor().max(0.0) as usize;
        let x_hi = ((self.position[1] + reach).ceil() as usize).min(size - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                // inverse rotation and scale into bitmap coordinates
                let dy = (y as f64 - self.position[0]) / self.scale;
                let dx = (x as f64 - self.position[1]) / self.scale;
                let v = self.bitmap.sample(cos * dy - sin * dx + cy, sin * dy + cos * dx + cx);
                let out = &mut frame[y * size + x];
                *out = out.max(v);
            }
        }
    }
}

// Stroke paths for the ten digits on a unit square, (x, y) with y down.
const DIGIT_STROKES: [&[&[(f32, f32)]]; 10] = [
    &[&[(0.5, 0.05), (0.8, 0.2), (0.85, 0.5), (0.8, 0.8), (0.5, 0.95), (0.2, 0.8), (0.15, 0.5), (0.2, 0.2), (0.5, 0.05)]],
    &[&[(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)], &[(0.35, 0.95), (0.75, 0.95)]],
    &[&[(0.2, 0.25), (0.45, 0.05), (0.75, 0.15), (0.75, 0.4), (0.2, 0.95), (0.85, 0.95)]],
    &[&[(0.2, 0.1), (0.75, 0.1), (0.45, 0.45), (0.8, 0.65), (0.65, 0.92), (0.2, 0.9)]],
    &[&[(0.65, 0.95), (0.65, 0.05), (0.15, 0.65), (0.85, 0.65)]],
    &[&[(0.8, 0.05), (0.25, 0.05), (0.2, 0.45), (0.7, 0.45), (0.8, 0.7), (0.6, 0.95), (0.2, 0.9)]],
    &[&[(0.75, 0.1), (0.4, 0.2), (0.2, 0.6), (0.3, 0.92), (0.7, 0.9), (0.75, 0.6), (0.25, 0.55)]],
    &[&[(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)], &[(0.35, 0.5), (0.7, 0.5)]],
    &[
        &[(0.5, 0.05), (0.75, 0.15), (0.75, 0.38), (0.5, 0.48), (0.25, 0.38), (0.25, 0.15), (0.5, 0.05)],
        &[(0.5, 0.48), (0.8, 0.62), (0.8, 0.85), (0.5, 0.95), (0.2, 0.85), (0.2, 0.62), (0.5, 0.48)],
    ],
    &[&[(0.75, 0.45), (0.3, 0.45), (0.2, 0.2), (0.5, 0.05), (0.8, 0.25), (0.75, 0.6), (0.35, 0.95)]],
];

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Rasterises digit `d` (0–9) as thick anti-aliased strokes.
pub fn glyph(d: usize, size: usize) -> Bitmap {
    let strokes = DIGIT_STROKES[d % 10];
    let mut bm = Bitmap::zeros(size, size);
    // glyph occupies the central 70% of the bitmap, like MNIST's padding
    let inset = 0.15 * size as f32;
    let span = size as f32 - 2.0 * inset;
    let half_width = (0.07 * size as f32).max(0.8);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut dist = f32::INFINITY;
            for path in strokes {
                for w in path.windows(2) {
                    let a = (inset + w[0].0 * span, inset + w[0].1 * span);
                    let b = (inset + w[1].0 * span, inset + w[1].1 * span);
                    dist = dist.min(segment_distance(p, a, b));
                }
            }
            bm.data[y * size + x] = (half_width + 0.5 - dist).clamp(0.0, 1.0);
        }
    }
    bm
}

/// Samples the initial sprites of a sequence.
pub fn sample_sprites(seed: u64, cfg: &GeneratorConfig, digits: Option<&[Bitmap]>) -> Result<Vec<SpriteSpec>> {
    cfg.validate()?;
    if digits.is_some_and(|d| d.is_empty()) {
        return Err(Error::config("digits", "raster digit list is empty"));
    }
    let mut rng = rng_for(seed, "sprites");
    let mut used = Vec::new();
    let mut sprites = Vec::with_capacity(cfg.digits);
    for _ in 0..cfg.digits {
        let bitmap = match digits {
            Some(list) => list[rng.random_range(0..list.len())].clone(),
            None => {
                // distinct classes while they last
                let mut d = rng.random_range(0..10);
                while used.len() < 10 && used.contains(&d) {
                    d = rng.random_range(0..10);
                }
                used.push(d);
                glyph(d, cfg.sprite_size)
            }
        };
        let mut sprite = SpriteSpec {
            bitmap,
            position: [0.0; 2],
            velocity: [0.0; 2],
            angular_velocity: uniform(&mut rng, -cfg.angular_max, cfg.angular_max),
            angle: 0.0,
            scale: 1.0,
            scale_rate: uniform(&mut rng, cfg.scale_rate_min, cfg.scale_rate_max),
        };
        let m = sprite.margin(cfg.frame_size);
        let hi = (cfg.frame_size - 1) as f64 - m;
        sprite.position = [uniform(&mut rng, m, hi), uniform(&mut rng, m, hi)];
        let speed = uniform(&mut rng, cfg.speed_min, cfg.speed_max);
        let heading = uniform(&mut rng, 0.0, std::f64::consts::TAU);
        sprite.velocity = [speed * heading.sin(), speed * heading.cos()];
        sprites.push(sprite);
    }
    Ok(sprites)
}

fn uniform(rng: &mut crate::rng::Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Renders the sprites over `cfg.length` frames into a `T×1×H×W` tensor.
pub fn render_sequence(mut sprites: Vec<SpriteSpec>, cfg: &GeneratorConfig) -> Tensor<f32> {
    let size = cfg.frame_size;
    let plane = size * size;
    let mut data = vec![0.0f32; cfg.length * plane];
    for t in 0..cfg.length {
        if t > 0 {
            for s in &mut sprites {
                s.step(size, cfg.scale_min, cfg.scale_max);
            }
        }
        let frame = &mut data[t * plane..(t + 1) * plane];
        for s in &sprites {
            s.render_into(frame, size);
        }
    }
    Tensor::new([cfg.length, 1, size, size], data).expect("sized buffer")
}

/// One `T×1×H×W` sequence, a pure function of `(seed, cfg, digits)`.
pub fn generate_sequence(seed: u64, cfg: &GeneratorConfig, digits: Option<&[Bitmap]>) -> Result<Tensor<f32>> {
    Ok(render_sequence(sample_sprites(seed, cfg, digits)?, cfg))
}

/// Seed of sequence `index` in the named split.
pub fn sequence_seed(seed: u64, split: &str, index: usize) -> u64 {
    derive_seed(seed, &format!("{split}/{index}"))
}

/// `count` sequences of a split stacked into a batch.
pub fn generate_batch(
    seed: u64,
    split: &str,
    count: usize,
    cfg: &GeneratorConfig,
    digits: Option<&[Bitmap]>,
) -> Result<SequenceBatch> {
    let seqs = (0..count)
        .map(|i| generate_sequence(sequence_seed(seed, split, i), cfg, digits))
        .collect::<Result<Vec<_>>>()?;
    SequenceBatch::from_sequences(&seqs, cfg.split)
}

/// `B×T×C×H×W` frames in `[0, 1]` plus the context length.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub frames: Tensor<f32>,
    pub split_index: usize,
}

impl SequenceBatch {
    pub fn new(frames: Tensor<f32>, split_index: usize) -> Result<Self> {
        if frames.rank() != 5 {
            return Err(Error::shape("SequenceBatch", format!("expected B×T×C×H×W, got {:?}", frames.shape())));
        }
        let t = frames.shape()[1];
        if split_index == 0 || split_index >= t {
            return Err(Error::config("split", format!("split index {split_index} must be in 1..{t}")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format { what: "SequenceBatch", msg: "values must lie in [0, 1]".into() });
        }
        Ok(SequenceBatch { frames, split_index })
    }

    /// Stacks `T×C×H×W` sequences.
    pub fn from_sequences(seqs: &[Tensor<f32>], split_index: usize) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::config("count", "need at least one sequence"))?;
        let mut data = Vec::with_capacity(first.numel() * seqs.len());
        for s in seqs {
            if s.shape() != first.shape() {
                return Err(Error::ShapeMismatch { op: "from_sequences", lhs: first.shape().to_vec(), rhs: s.shape().to_vec() });
            }
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![seqs.len()];
        shape.extend_from_slice(first.shape());
        SequenceBatch::new(Tensor::new(shape, data)?, split_index)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[1]
    }

    /// `C×H×W`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[2], s[3], s[4]]
    }

    /// Frame `t` of each listed sequence, stacked as `N×C×H×W`.
    pub fn frames_at(&self, indices: &[usize], t: usize) -> Tensor<f32> {
        let [c, h, w] = self.frame_shape();
        let plane = c * h * w;
        let steps = self.steps();
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &b in indices {
            let start = (b * steps + t) * plane;
            data.extend_from_slice(&self.frames.data()[start..start + plane]);
        }
        Tensor::new([indices.len(), c, h, w], data).expect("sized buffer")
    }

    /// Sequence `b` as `T×C×H×W`.
    pub fn sequence(&self, b: usize) -> Tensor<f32> {
        self.frames.select(0, b).expect("index in range")
    }
}

const IDX_MAGIC: u32 = 0x0000_0803;

/// Parses an IDX3 unsigned-byte image file into `[0, 1]` bitmaps.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Bitmap>> {
    let mut r = Reader::new("IDX file", bytes);
    let magic = r.u32_be()?;
    if magic != IDX_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX file",
            expected: format!("{IDX_MAGIC:#010x}"),
            actual: format!("{magic:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let plane = checked_product("IDX file", &[rows, cols])?;
    checked_product("IDX file", &[count, plane])?;
    (0..count)
        .map(|_| {
            let px = r.take(plane)?;
            Ok(Bitmap { height: rows, width: cols, data: px.iter().map(|&b| b as f32 / 255.0).collect() })
        })
        .collect()
}

pub fn load_idx_images(path: &Path) -> Result<Vec<Bitmap>> {
    parse_idx_images(&read_file(path)?)
}

const VSEQ_MAGIC: &[u8; 4] = b"VSEQ";
const VSEQ_VERSION: u32 = 1;

pub fn encode_vseq(batch: &SequenceBatch) -> Result<Vec<u8>> {
    let s = batch.frames.shape();
    let mut out = Vec::with_capacity(32 + 4 * batch.frames.numel());
    out.extend_from_slice(VSEQ_MAGIC);
    out.extend_from_slice(&VSEQ_VERSION.to_le_bytes());
    for &d in s.iter().chain(std::iter::once(&batch.split_index)) {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format { what: "VSEQ file", msg: format!("dimension {d} exceeds u32") })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in batch.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vseq(bytes: &[u8]) -> Result<SequenceBatch> {
    let mut r = Reader::new("VSEQ file", bytes);
    let magic = r.take(4)?;
    if magic != VSEQ_MAGIC {
        return Err(Error::BadMagic {
            what: "VSEQ file",
            expected: "VSEQ".into(),
            actual: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32_le()?;
    if version != VSEQ_VERSION {
        return Err(Error::BadVersion { what: "VSEQ file", version });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32_le()? as usize;
    }
    let split = r.u32_le()? as usize;
    let n = checked_product("VSEQ file", &dims)?;
    let payload = r.take(checked_product("VSEQ file", &[n, 4])?)?;
    if r.remaining() != 0 {
        return Err(Error::Format { what: "VSEQ file", msg: format!("{} trailing bytes", r.remaining()) });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    SequenceBatch::new(Tensor::new(dims.to_vec(), data)?, split)
}

pub fn write_vseq(path: &Path, batch: &SequenceBatch) -> Result<()> {
    atomic_write(path, &encode_vseq(batch)?)
}

pub fn read_vseq(path: &Path) -> Result<SequenceBatch> {
    decode_vseq(&read_file(path)?)
}

/// Binary P5 PGM of a `1×H×W` (or `H×W`) frame, values clamped to `[0, 1]`
/// and rounded half-up to 8 bits.
pub fn encode_pgm(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match frame.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape("export_pgm", format!("expected a single-channel frame, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn export_pgm(frame: &Tensor<f32>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_pgm(frame)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_bounded() {
        let gs: Vec<_> = (0..10).map(|d| glyph(d, 28)).collect();
        for (i, g) in gs.iter().enumerate() {
            assert!(g.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(g.data.iter().sum::<f32>() > 20.0, "digit {i} too faint");
            for h in &gs[i + 1..] {
                assert_ne!(g.data, h.data);
            }
        }
    }

    #[test]
    fn sprite_sampling_respects_ranges() {
        let cfg = GeneratorConfig::default();
        for seed in 0..50 {
            for s in sample_sprites(seed, &cfg, None).unwrap() {
                let speed = s.velocity[0].hypot(s.velocity[1]);
                assert!((1.0 - 1e-9..=3.6 + 1e-9).contains(&speed));
                assert!((0.95..=1.05).contains(&s.scale_rate));
                assert!(s.angular_velocity.abs() <= 12.0);
            }
        }
    }

    #[test]
    fn validation_names_key() {
        let cfg = GeneratorConfig { split: 20, ..GeneratorConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "split"));
        let cfg = GeneratorConfig { speed_min: 4.0, ..GeneratorConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "speed"));
    }
}
