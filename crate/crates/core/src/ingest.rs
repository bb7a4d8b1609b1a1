//! Frame loading and whole-frame pair selection.
//!
//! A video is a directory of frames already extracted at one frame per second.
//! Adjacent frames form candidate pairs; a pair survives only if its pixel
//! correlation lies strictly inside the configured band and neither frame is
//! too dark or too bright.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miner::MiningConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub video_id: String,
    pub frame_index: usize,
    pub pixels: RgbImage,
}

impl Frame {
    pub fn new(video_id: impl Into<String>, frame_index: usize, pixels: RgbImage) -> Self {
        Frame {
            video_id: video_id.into(),
            frame_index,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// BT.601 luma per pixel, row-major.
    pub fn luma(&self) -> Vec<f64> {
        luma(&self.pixels)
    }
}

/// Colour representation used when correlating two frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationSpace {
    #[default]
    Gray,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub video_id: String,
    pub index_a: usize,
    pub index_b: usize,
    pub correlation: f64,
    #[serde(rename = "mean_a")]
    pub mean_intensity_a: f64,
    #[serde(rename = "mean_b")]
    pub mean_intensity_b: f64,
}

pub(crate) fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn is_frame_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        .unwrap_or(false)
}

/// Loads every PNG / PPM file in `dir`, ordered by file name.
pub fn load_video_frames(dir: &Path) -> Result<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::UnreadableDirectory {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| Error::UnreadableDirectory {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.is_file() && is_frame_file(&path) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::EmptyVideo(dir.to_path_buf()));
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let video_id = video_id_of(dir);
    paths
        .iter()
        .enumerate()
        .map(|(index, path)| {
            let img = image::open(path).map_err(|e| Error::UndecodableImage {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(Frame::new(video_id.clone(), index, img.to_rgb8()))
        })
        .collect()
}

pub(crate) fn video_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.to_string_lossy().into_owned())
}

/// Sub-directories of a corpus directory, one per video, sorted by name.
pub fn list_videos(corpus: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(corpus).map_err(|source| Error::UnreadableDirectory {
        path: corpus.to_path_buf(),
        source,
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| Error::UnreadableDirectory {
            path: corpus.to_path_buf(),
            source,
        })?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Pearson correlation with the zero-variance convention: two constant
/// vectors correlate at 1 when equal and 0 otherwise; one constant vector
/// correlates at 0 with anything else.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0)
}

fn channel_planes(img: &RgbImage) -> Vec<f64> {
    let n = (img.width() * img.height()) as usize;
    let mut out = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = p[c] as f64;
        }
    }
    out
}

/// Grayscale pixel correlation of two frames. `b` is resized to `a`'s
/// dimensions when they differ.
pub fn pixel_correlation(a: &Frame, b: &Frame) -> f64 {
    pixel_correlation_in(a, b, CorrelationSpace::Gray)
}

pub fn pixel_correlation_in(a: &Frame, b: &Frame, space: CorrelationSpace) -> f64 {
    let resized;
    let b_pixels = if a.pixels.dimensions() == b.pixels.dimensions() {
        &b.pixels
    } else {
        resized = imageops::resize(&b.pixels, a.width(), a.height(), FilterType::Triangle);
        &resized
    };
    match space {
        CorrelationSpace::Gray => pearson(&luma(&a.pixels), &luma(b_pixels)),
        CorrelationSpace::Rgb => pearson(&channel_planes(&a.pixels), &channel_planes(b_pixels)),
    }
}

pub fn mean_intensity(frame: &Frame) -> f64 {
    let l = frame.luma();
    l.iter().sum::<f64>() / l.len() as f64
}

pub fn intensity_passes(mean: f64, cfg: &MiningConfig) -> bool {
    mean >= cfg.intensity_min && mean <= cfg.intensity_max
}

pub fn correlation_passes(correlation: f64, cfg: &MiningConfig) -> bool {
    correlation > cfg.corr_lo && correlation < cfg.corr_hi
}

/// Adjacent pairs `(i, i+1)` passing both the correlation band (strict) and
/// the intensity window (inclusive).
pub fn select_frame_pairs(frames: &[Frame], cfg: &MiningConfig) -> Vec<FramePair> {
    let means: Vec<f64> = frames.par_iter().map(mean_intensity).collect();
    frames
        .par_windows(2)
        .zip(means.par_windows(2))
        .filter_map(|(w, m)| {
            let (a, b) = (&w[0], &w[1]);
            if !intensity_passes(m[0], cfg) || !intensity_passes(m[1], cfg) {
                return None;
            }
            let correlation = pixel_correlation_in(a, b, cfg.correlation_space);
            if !correlation_passes(correlation, cfg) {
                return None;
            }
            Some(FramePair {
                video_id: a.video_id.clone(),
                index_a: a.frame_index,
                index_b: b.frame_index,
                correlation,
                mean_intensity_a: m[0],
                mean_intensity_b: m[1],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_frame(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> Frame {
        let img = RgbImage::from_fn(w, h, |x, y| {
            let v = f(x, y);
            Rgb([v, v, v])
        });
        Frame::new("v", 0, img)
    }

    fn noise_frame(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Frame {
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        Frame::new("v", 0, img)
    }

    #[test]
    fn self_and_inverted_correlation() {
        let a = gray_frame(16, 12, |x, y| ((x * 13 + y * 7) % 256) as u8);
        let inv = gray_frame(16, 12, |x, y| 255 - ((x * 13 + y * 7) % 256) as u8);
        assert!((pixel_correlation(&a, &a) - 1.0).abs() < 1e-12);
        assert!((pixel_correlation(&a, &inv) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = noise_frame(&mut rng, 64, 64);
        let b = noise_frame(&mut rng, 64, 64);
        // Independent statistics: sample correlation of n = 4096 independent
        // draws has standard deviation 1/sqrt(n) ~ 0.016.
        let la = a.luma();
        let lb = b.luma();
        let n = la.len() as f64;
        let (ma, mb) = (la.iter().sum::<f64>() / n, lb.iter().sum::<f64>() / n);
        let cov: f64 = la.iter().zip(&lb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let sa = (la.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (lb.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
        let oracle = cov / (sa * sb);
        let measured = pixel_correlation(&a, &b);
        assert!(oracle.abs() < 0.1);
        assert!((measured - oracle).abs() < 1e-9);
    }

    #[test]
    fn constant_frames() {
        let black = gray_frame(4, 4, |_, _| 0);
        let black2 = gray_frame(4, 4, |_, _| 0);
        let grey = gray_frame(4, 4, |_, _| 128);
        let tex = gray_frame(4, 4, |x, _| (x * 40) as u8);
        assert_eq!(pixel_correlation(&black, &black2), 1.0);
        assert_eq!(pixel_correlation(&black, &grey), 0.0);
        assert_eq!(pixel_correlation(&black, &tex), 0.0);
    }

    #[test]
    fn unequal_sizes_are_resized() {
        let a = gray_frame(32, 32, |x, _| (x * 8) as u8);
        let b = gray_frame(16, 16, |x, _| (x * 16) as u8);
        let c = pixel_correlation(&a, &b);
        assert!(c > 0.95, "{c}");
    }

    #[test]
    fn mean_intensity_examples() {
        assert_eq!(mean_intensity(&gray_frame(8, 8, |_, _| 0)), 0.0);
        assert!((mean_intensity(&gray_frame(8, 8, |_, _| 128)) - 128.0).abs() < 1e-9);
        let half = gray_frame(8, 8, |x, _| if x < 4 { 0 } else { 200 });
        assert!((mean_intensity(&half) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_predicates() {
        let cfg = MiningConfig::paper();
        let keep = |c: f64, ma: f64, mb: f64| {
            correlation_passes(c, &cfg) && intensity_passes(ma, &cfg) && intensity_passes(mb, &cfg)
        };
        assert!(keep(0.5, 100.0, 120.0));
        assert!(!keep(0.95, 100.0, 120.0));
        assert!(!keep(0.5, 30.0, 120.0));
        assert!(!keep(0.3, 100.0, 120.0));
        assert!(!keep(0.8, 100.0, 120.0));
        assert!(keep(0.5, 50.0, 200.0));
        assert!(!keep(0.5, 49.9, 120.0));
        assert!(!keep(0.5, 100.0, 200.1));
    }

    #[test]
    fn select_keeps_only_passing_adjacent_pairs() {
        let cfg = MiningConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<u8> = (0..32 * 32).map(|_| rng.random_range(60..190)).collect();
        let noise: Vec<u8> = (0..32 * 32).map(|_| rng.random_range(60..190)).collect();
        // frame 1 = base, frame 2 = base blended 50/50 with fresh noise
        // (correlation ~0.7), frame 3 = inverted base, frame 4 = black.
        let mk = |i: usize, f: &dyn Fn(usize) -> u8| {
            let img = RgbImage::from_fn(32, 32, |x, y| {
                let v = f((y * 32 + x) as usize);
                Rgb([v, v, v])
            });
            Frame::new("v", i, img)
        };
        let frames = vec![
            mk(0, &|i| base[i]),
            mk(1, &|i| base[i]),
            mk(2, &|i| ((base[i] as u16 + noise[i] as u16) / 2) as u8),
            mk(3, &|i| 250 - base[i]),
            mk(4, &|_| 0),
        ];
        let pairs = select_frame_pairs(&frames, &cfg);
        assert_eq!(pairs.len(), 1, "{pairs:?}");
        let p = &pairs[0];
        assert_eq!((p.index_a, p.index_b), (1, 2));
        assert!(p.correlation > 0.3 && p.correlation < 0.8);
        assert!((p.correlation - pixel_correlation(&frames[1], &frames[2])).abs() < 1e-12);
        assert!((p.mean_intensity_b - mean_intensity(&frames[2])).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = noise_frame(&mut rng, 20, 10);
            let b = noise_frame(&mut rng, 20, 10);
            assert!((pixel_correlation(&a, &b) - pixel_correlation(&b, &a)).abs() < 1e-9);
        }
    }

    #[test]
    fn load_orders_by_name_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let video = dir.path().join("clip7");
        fs::create_dir(&video).unwrap();
        for i in (0..5).rev() {
            let img = RgbImage::from_pixel(4 + i, 3, Rgb([i as u8 * 10, 0, 0]));
            img.save(video.join(format!("f{i:03}.ppm"))).unwrap();
        }
        fs::write(video.join("notes.txt"), "ignored").unwrap();
        let frames = load_video_frames(&video).unwrap();
        assert_eq!(frames.len(), 5);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.frame_index, i);
            assert_eq!(f.video_id, "clip7");
            assert_eq!(f.width(), 4 + i as u32);
            assert_eq!(f.pixels.get_pixel(0, 0)[0], i as u8 * 10);
        }

        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        assert!(matches!(load_video_frames(&empty), Err(Error::EmptyVideo(_))));
        assert!(matches!(
            load_video_frames(&dir.path().join("missing")),
            Err(Error::UnreadableDirectory { .. })
        ));
        fs::write(empty.join("bad.png"), b"not a png").unwrap();
        assert!(matches!(
            load_video_frames(&empty),
            Err(Error::UndecodableImage { .. })
        ));
    }
}
