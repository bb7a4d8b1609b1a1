//! Deterministic synthetic videos: one moving shape over a panning
//! value-noise background, with per-frame gain and pixel noise, plus a
//! ground-truth box manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{LabelRecord, LabeledCropSet, Split};
use crate::ingest::Frame;
use crate::jsonl;
use crate::miner::crop_patch;
use crate::proposals::BBox;
use crate::seed::{hash_str, mix_seed};

pub const TRUTH_FILE: &str = "truth.jsonl";
pub const GAIN_MIN: f64 = 0.7;
pub const GAIN_MAX: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar];

    pub fn class_id(self) -> u32 {
        self as u32
    }

    /// Width and height of the shape's extent for a nominal `size`.
    fn extent(self, size: f64) -> (f64, f64) {
        match self {
            ShapeKind::Bar => (size * 1.4, size),
            _ => (size, size),
        }
    }

    /// Whether the point `(u, v)`, relative to the extent's top-left corner,
    /// lies inside a shape of extent `w` x `h`.
    fn contains(self, u: f64, v: f64, w: f64, h: f64) -> bool {
        if u < 0.0 || v < 0.0 || u >= w || v >= h {
            return false;
        }
        match self {
            ShapeKind::Circle => {
                let (dx, dy) = (u - w / 2.0, v - h / 2.0);
                dx * dx + dy * dy <= (w / 2.0) * (w / 2.0)
            }
            ShapeKind::Square | ShapeKind::Bar => true,
            // Apex at the top centre, base along the bottom edge.
            ShapeKind::Triangle => (u - w / 2.0).abs() <= 0.5 * w * v / h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [u8; 3],
    /// Nominal size in pixels at frame 0 (bars are 1.4 times wider).
    pub size: f64,
    /// Top-left corner at frame 0.
    pub start: [f64; 2],
    /// Pixels per frame; zero for a shape at rest.
    pub velocity: [f64; 2],
    /// Relative size change per frame.
    pub scale_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub shapes: Vec<ShapeSpec>,
    /// Background texture offset per frame (camera pan).
    pub pan: [f64; 2],
    /// Lattice spacing of the coarsest noise octave.
    pub background_cell: f64,
    pub background_colors: [[u8; 3]; 2],
    pub background_seed: u64,
    /// Per-frame illumination gain is drawn uniformly from this range.
    pub gain: [f64; 2],
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub shape_id: usize,
    pub class: u32,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl TruthRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

fn luma_of(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

/// Position along a line that reflects off `0` and `span`.
fn bounce(p: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = p.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

impl ShapeSpec {
    fn size_at(&self, t: usize) -> f64 {
        self.size * (1.0 + self.scale_drift * t as f64).clamp(0.85, 1.15)
    }

    /// Top-left corner and extent at frame `t`, kept inside the canvas.
    fn placement(&self, t: usize, width: u32, height: u32) -> (f64, f64, f64, f64) {
        let (w, h) = self.kind.extent(self.size_at(t));
        let x = bounce(self.start[0] + self.velocity[0] * t as f64, width as f64 - w);
        let y = bounce(self.start[1] + self.velocity[1] * t as f64, height as f64 - h);
        (x, y, w, h)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("{}: {m}", self.video_id)));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("canvas and frame count must be non-zero".into());
        }
        if !(GAIN_MIN..=GAIN_MAX).contains(&self.gain[0])
            || !(GAIN_MIN..=GAIN_MAX).contains(&self.gain[1])
            || self.gain[0] > self.gain[1]
        {
            return bad(format!("gain range {:?} outside [{GAIN_MIN}, {GAIN_MAX}]", self.gain));
        }
        if !(self.noise_std >= 0.0) || !(self.background_cell > 0.0) {
            return bad("noise_std must be >= 0 and background_cell > 0".into());
        }
        let [c0, c1] = self.background_colors;
        let mid = (luma_of(c0) + luma_of(c1)) / 2.0;
        if mid * self.gain[0] < 50.0 || mid * self.gain[1] > 200.0 {
            return bad(format!("background mean luma {mid:.1} leaves [50, 200] under the gain range"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let (w, h) = s.kind.extent(s.size * 1.15);
            if w + 1.0 > self.width as f64 || h + 1.0 > self.height as f64 || s.size < 1.0 {
                return bad(format!("shape {i} does not fit the canvas"));
            }
        }
        Ok(())
    }

    fn gain_at(&self, t: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[1, t as u64]));
        if self.gain[0] == self.gain[1] {
            self.gain[0]
        } else {
            rng.random_range(self.gain[0]..=self.gain[1])
        }
    }

    /// Renders frame `t` and the true box of every shape on it.
    pub fn render(&self, t: usize) -> (RgbImage, Vec<BBox>) {
        let noise = ValueNoise {
            seed: self.background_seed,
            cell: self.background_cell,
        };
        let (ox, oy) = (self.pan[0] * t as f64, self.pan[1] * t as f64);
        let [c0, c1] = self.background_colors;
        let mut img = RgbImage::from_fn(self.width, self.height, |x, y| {
            let n = noise.sample(x as f64 + ox, y as f64 + oy);
            Rgb(std::array::from_fn(|c| {
                (c0[c] as f64 + (c1[c] as f64 - c0[c] as f64) * n).round() as u8
            }))
        });
        let mut boxes = Vec::with_capacity(self.shapes.len());
        for s in &self.shapes {
            let (sx, sy, w, h) = s.placement(t, self.width, self.height);
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            let ys = sy.floor() as u32..((sy + h).ceil() as u32).min(self.height);
            for py in ys {
                for px in sx.floor() as u32..((sx + w).ceil() as u32).min(self.width) {
                    let (u, v) = (px as f64 + 0.5 - sx, py as f64 + 0.5 - sy);
                    if s.kind.contains(u, v, w, h) {
                        img.put_pixel(px, py, Rgb(s.color));
                        x0 = x0.min(px);
                        y0 = y0.min(py);
                        x1 = x1.max(px);
                        y1 = y1.max(py);
                    }
                }
            }
            boxes.push(BBox::new(x0, y0, x1 + 1 - x0, y1 + 1 - y0));
        }
        let gain = self.gain_at(t);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[2, t as u64]));
        let normal = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        for p in img.pixels_mut() {
            for c in p.0.iter_mut() {
                let n = if self.noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                *c = (*c as f64 * gain + n).round().clamp(0.0, 255.0) as u8;
            }
        }
        (img, boxes)
    }

    pub fn truth(&self, t: usize, boxes: &[BBox]) -> Vec<TruthRecord> {
        self.shapes
            .iter()
            .zip(boxes)
            .enumerate()
            .map(|(shape_id, (s, b))| TruthRecord {
                video_id: self.video_id.clone(),
                frame_index: t,
                shape_id,
                class: s.kind.class_id(),
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            })
            .collect()
    }
}

/// Two-octave smooth value noise in [0, 1].
struct ValueNoise {
    seed: u64,
    cell: f64,
}

impl ValueNoise {
    fn lattice(&self, octave: u64, ix: i64, iy: i64) -> f64 {
        let h = mix_seed(self.seed, &[octave, ix as u64, iy as u64]);
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn octave(&self, octave: u64, x: f64, y: f64, cell: f64) -> f64 {
        let (fx, fy) = (x / cell, y / cell);
        let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let v00 = self.lattice(octave, ix, iy);
        let v10 = self.lattice(octave, ix + 1, iy);
        let v01 = self.lattice(octave, ix, iy + 1);
        let v11 = self.lattice(octave, ix + 1, iy + 1);
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        (0.65 * self.octave(0, x, y, self.cell) + 0.35 * self.octave(1, x, y, self.cell / 2.0)).clamp(0.0, 1.0)
    }
}

/// Parameters from which a whole corpus of scenes is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub videos: usize,
    pub frames_per_video: usize,
    pub width: u32,
    pub height: u32,
    /// Nominal shape size range.
    pub shape_size: [f64; 2],
    /// Shape speed range, pixels per frame.
    pub speed: [f64; 2],
    /// Camera pan speed range, pixels per frame.
    pub pan_speed: [f64; 2],
    pub scale_drift: f64,
    pub gain: [f64; 2],
    pub noise_std: f64,
    pub background_cell: f64,
    /// Shape fill colours, assigned independently of the class.
    pub palette: Vec<[u8; 3]>,
    /// Background colour pairs.
    pub backgrounds: Vec<[[u8; 3]; 2]>,
    /// Number of extra videos with a static shape, no pan, unit gain and no
    /// noise (they never pass the correlation filter).
    pub static_videos: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 2015,
            videos: 64,
            frames_per_video: 16,
            width: 224,
            height: 160,
            shape_size: [68.0, 76.0],
            speed: [6.0, 10.0],
            pan_speed: [4.0, 7.0],
            scale_drift: 0.01,
            gain: [GAIN_MIN, GAIN_MAX],
            noise_std: 16.0,
            background_cell: 24.0,
            palette: vec![[220, 40, 40], [40, 170, 60], [40, 70, 220]],
            backgrounds: vec![
                [[60, 80, 100], [190, 180, 160]],
                [[80, 100, 60], [180, 190, 170]],
                [[100, 70, 80], [200, 180, 170]],
            ],
            static_videos: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.palette.is_empty() || self.backgrounds.is_empty() {
            return bad("palette and backgrounds must be non-empty");
        }
        for r in [self.shape_size, self.speed, self.pan_speed, self.gain] {
            if !(r[0] <= r[1]) {
                return bad("ranges must be ordered [low, high]");
            }
        }
        Ok(())
    }

    fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    }

    /// One scene per video. Classes cycle through the four kinds so the
    /// inventory is balanced.
    pub fn scenes(&self) -> Result<Vec<SceneSpec>> {
        self.validate()?;
        let total = self.videos + self.static_videos;
        (0..total)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[i as u64]));
                let kind = ShapeKind::ALL[i % 4];
                let is_static = i >= self.videos;
                let size = Self::uniform(&mut rng, self.shape_size);
                let (w, h) = kind.extent(size);
                let start = [
                    rng.random_range(0.0..(self.width as f64 - w).max(1.0)),
                    rng.random_range(0.0..(self.height as f64 - h).max(1.0)),
                ];
                let mut direction = |r: [f64; 2]| {
                    let speed = Self::uniform(&mut rng, r);
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    [speed * angle.cos(), speed * angle.sin()]
                };
                let velocity = direction(self.speed);
                let pan = direction(self.pan_speed);
                let color = self.palette[rng.random_range(0..self.palette.len())];
                let background_colors = self.backgrounds[rng.random_range(0..self.backgrounds.len())];
                let drift = rng.random_range(-self.scale_drift..=self.scale_drift);
                let background_seed = rng.random();
                let scene = SceneSpec {
                    video_id: format!("vid{i:03}"),
                    width: self.width,
                    height: self.height,
                    frames: self.frames_per_video,
                    shapes: vec![ShapeSpec {
                        kind,
                        color,
                        size,
                        start,
                        velocity: if is_static { [0.0, 0.0] } else { velocity },
                        scale_drift: if is_static { 0.0 } else { drift },
                    }],
                    pan: if is_static { [0.0, 0.0] } else { pan },
                    background_cell: self.background_cell,
                    background_colors,
                    background_seed,
                    gain: if is_static { [1.0, 1.0] } else { self.gain },
                    noise_std: if is_static { 0.0 } else { self.noise_std },
                    seed: mix_seed(self.seed, &[i as u64, 0x7363]),
                };
                scene.validate()?;
                Ok(scene)
            })
            .collect()
    }
}

fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes `out_dir/<video_id>/f0000.ppm ...` for every scene plus
/// `out_dir/truth.jsonl`, and returns the truth records.
pub fn generate_corpus(scenes: &[SceneSpec], out_dir: &Path) -> Result<Vec<TruthRecord>> {
    for s in scenes {
        s.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_video: Vec<Vec<TruthRecord>> = scenes
        .par_iter()
        .map(|scene| {
            let dir = out_dir.join(&scene.video_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut truth = Vec::new();
            for t in 0..scene.frames {
                let (img, boxes) = scene.render(t);
                write_ppm(&dir.join(format!("f{t:04}.ppm")), &img)?;
                truth.extend(scene.truth(t, &boxes));
            }
            Ok(truth)
        })
        .collect::<Result<_>>()?;
    let truth: Vec<TruthRecord> = per_video.into_iter().flatten().collect();
    jsonl::write_records(&out_dir.join(TRUTH_FILE), &truth)?;
    Ok(truth)
}

pub fn read_truth(corpus: &Path) -> Result<Vec<TruthRecord>> {
    jsonl::read_records(&corpus.join(TRUTH_FILE))
}

/// Fraction of labeled crops used as queries.
pub const QUERY_FRACTION: f64 = 0.2;

/// Crops every `frame_stride`-th frame's true shape boxes into a labeled set.
/// The `QUERY_FRACTION` of crops with the smallest id hashes become queries.
pub fn labeled_crops_from_truth(
    corpus: &Path,
    truth: &[TruthRecord],
    crop_size: u32,
    frame_stride: usize,
) -> Result<LabeledCropSet> {
    let stride = frame_stride.max(1);
    let picked: Vec<&TruthRecord> = truth.iter().filter(|r| r.frame_index % stride == 0).collect();
    let crops = picked
        .par_iter()
        .map(|r| {
            let path = corpus.join(&r.video_id).join(format!("f{:04}.ppm", r.frame_index));
            let img = image::open(&path).map_err(|e| Error::UndecodableImage {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let frame = Frame::new(r.video_id.clone(), r.frame_index, img.to_rgb8());
            crop_patch(&frame, &r.bbox(), crop_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = picked
        .iter()
        .map(|r| format!("{}/{:04}/{}", r.video_id, r.frame_index, r.shape_id))
        .collect();
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (hash_str(&ids[i]), i));
    let queries = (ids.len() as f64 * QUERY_FRACTION).round() as usize;
    let mut split = vec![Split::Database; ids.len()];
    for &i in &order[..queries] {
        split[i] = Split::Query;
    }
    let records = picked
        .iter()
        .zip(ids)
        .zip(split)
        .map(|((r, crop_id), split)| LabelRecord {
            crop_id,
            label: r.class,
            split,
        })
        .collect();
    Ok(LabeledCropSet {
        crop_size,
        records,
        crops,
    })
}
