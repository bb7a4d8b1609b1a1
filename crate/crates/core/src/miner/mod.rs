//! Region-pair mining.
//!
//! For every selected frame pair, each quality-filtered proposal in the first
//! frame is matched to its best-overlapping proposal in the second. Matches
//! above the IoU threshold are cropped and passed through a per-video
//! diversity filter that drops near-duplicates of the last kept pair.

mod crop;
pub mod dataset;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crop::{crop_correlation, crop_patch, resize_frame, Crop};
pub use dataset::{PairDataset, PairRecord};

use crate::error::{Error, Result};
use crate::ingest::{self, CorrelationSpace, Frame, FramePair};
use crate::proposals::{self, iou, BBox, ProposalDumpRecord, RegionProposal, SegmentationParams};
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    /// Matched region proposals (the main method).
    #[default]
    Proposal,
    /// Random squares at the same position in both frames.
    Square,
    /// Whole frames.
    Frame,
}

/// Which pair members the diversity filter compares against the last kept pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiversityMember {
    /// `crop_a` only.
    #[default]
    First,
    /// Both members; the larger of the two correlations decides.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub corr_lo: f64,
    pub corr_hi: f64,
    pub correlation_space: CorrelationSpace,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub top_n: usize,
    pub min_size: u32,
    pub max_aspect: f64,
    pub iou_min: f64,
    pub diversity_corr_max: f64,
    pub diversity_downsample: u32,
    pub diversity_member: DiversityMember,
    pub crop_size: u32,
    pub mode: MiningMode,
    /// Square-mode pairs drawn per frame pair.
    pub squares_per_pair: usize,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub segmentation: SegmentationParams,
}

impl MiningConfig {
    pub fn paper() -> Self {
        MiningConfig {
            corr_lo: 0.3,
            corr_hi: 0.8,
            correlation_space: CorrelationSpace::Gray,
            intensity_min: 50.0,
            intensity_max: 200.0,
            top_n: 100,
            min_size: 227,
            max_aspect: 1.5,
            iou_min: 0.5,
            diversity_corr_max: 0.7,
            diversity_downsample: 33,
            diversity_member: DiversityMember::First,
            crop_size: 227,
            mode: MiningMode::Proposal,
            squares_per_pair: 10,
            seed: 0,
            segmentation: SegmentationParams::default(),
        }
    }

    /// Scaled-down geometry for CPU experiments on small frames.
    pub fn desk() -> Self {
        MiningConfig {
            top_n: 20,
            min_size: 64,
            crop_size: 64,
            segmentation: SegmentationParams {
                k: 150.0,
                min_segment: 60,
                sigma: 0.8,
                grouping_seed: 0,
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.corr_lo < self.corr_hi) {
            return bad(format!("corr_lo {} must be below corr_hi {}", self.corr_lo, self.corr_hi));
        }
        if !(self.iou_min > 0.0 && self.iou_min < 1.0) {
            return bad(format!("iou_min {} must lie in (0, 1)", self.iou_min));
        }
        if !(self.diversity_corr_max > 0.0 && self.diversity_corr_max < 1.0) {
            return bad(format!("diversity_corr_max {} must lie in (0, 1)", self.diversity_corr_max));
        }
        if self.intensity_min > self.intensity_max {
            return bad("intensity_min exceeds intensity_max".into());
        }
        if self.crop_size == 0 || self.diversity_downsample == 0 || self.top_n == 0 {
            return bad("crop_size, diversity_downsample and top_n must be positive".into());
        }
        if !(self.max_aspect >= 1.0) {
            return bad(format!("max_aspect {} must be at least 1", self.max_aspect));
        }
        self.segmentation.validate()
    }

    pub fn passes_geometry(&self, bbox: &BBox) -> bool {
        proposals::passes_geometry(bbox, self.min_size, self.min_size, self.max_aspect)
    }
}

/// Two crops of (presumably) the same object in adjacent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPair {
    pub video_id: String,
    pub index_a: usize,
    pub index_b: usize,
    pub bbox_a: BBox,
    pub bbox_b: BBox,
    pub iou: f64,
    pub crop_a: Crop,
    pub crop_b: Crop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalMatch {
    pub bbox_a: BBox,
    pub bbox_b: BBox,
    pub iou: f64,
}

/// Best-overlap partner in `props_b` for each proposal of `props_a`, kept when
/// the overlap exceeds `iou_min`. IoU ties go to the higher-scored partner.
pub fn match_pairs(
    props_a: &[RegionProposal],
    props_b: &[RegionProposal],
    iou_min: f64,
) -> Vec<ProposalMatch> {
    props_a
        .iter()
        .filter_map(|a| {
            let mut best: Option<(f64, &RegionProposal)> = None;
            for b in props_b {
                let v = iou(&a.bbox, &b.bbox);
                let better = match best {
                    None => true,
                    Some((bv, bp)) => v > bv || (v == bv && b.score > bp.score),
                };
                if better {
                    best = Some((v, b));
                }
            }
            let (v, b) = best?;
            (v > iou_min).then_some(ProposalMatch {
                bbox_a: a.bbox,
                bbox_b: b.bbox,
                iou: v,
            })
        })
        .collect()
}

fn diversity_correlation(candidate: &RegionPair, last: &RegionPair, cfg: &MiningConfig) -> f64 {
    let n = cfg.diversity_downsample;
    let first = crop_correlation(&candidate.crop_a, &last.crop_a, n);
    match cfg.diversity_member {
        DiversityMember::First => first,
        DiversityMember::Both => first.max(crop_correlation(&candidate.crop_b, &last.crop_b, n)),
    }
}

/// Keep decision for `candidate` given the last pair kept from the same video.
pub fn diversity_filter(
    candidate: &RegionPair,
    last_kept: Option<&RegionPair>,
    cfg: &MiningConfig,
) -> bool {
    match last_kept {
        None => true,
        Some(last) => diversity_correlation(candidate, last, cfg) < cfg.diversity_corr_max,
    }
}

/// Sequential diversity state for one video.
pub struct DiversityFilter<'a> {
    cfg: &'a MiningConfig,
    last: Option<RegionPair>,
}

impl<'a> DiversityFilter<'a> {
    pub fn new(cfg: &'a MiningConfig) -> Self {
        DiversityFilter { cfg, last: None }
    }

    /// Returns whether `candidate` is kept; a kept candidate becomes the new
    /// reference.
    pub fn admit(&mut self, candidate: &RegionPair) -> bool {
        let keep = diversity_filter(candidate, self.last.as_ref(), self.cfg);
        if keep {
            self.last = Some(candidate.clone());
        }
        keep
    }
}

#[derive(Debug, Clone, Default)]
pub struct VideoMining {
    pub video_id: String,
    pub frame_pairs: Vec<FramePair>,
    pub pairs: Vec<RegionPair>,
    pub proposal_dump: Vec<ProposalDumpRecord>,
}

fn frame_proposals(frame: &Frame, cfg: &MiningConfig) -> Vec<RegionProposal> {
    let all = proposals::propose(frame, &cfg.segmentation);
    proposals::top_proposals(&all, cfg.top_n, cfg.min_size, cfg.min_size, cfg.max_aspect)
}

fn mine_proposal_pairs(
    frames: &[Frame],
    frame_pairs: &[FramePair],
    cfg: &MiningConfig,
    dump: &mut Vec<ProposalDumpRecord>,
) -> Result<Vec<RegionPair>> {
    let needed: BTreeSet<usize> = frame_pairs
        .iter()
        .flat_map(|p| [p.index_a, p.index_b])
        .collect();
    let computed: Vec<(usize, Vec<RegionProposal>)> = needed
        .into_par_iter()
        .map(|i| (i, frame_proposals(&frames[i], cfg)))
        .collect();
    for (i, props) in &computed {
        let frame = &frames[*i];
        dump.extend(props.iter().map(|p| ProposalDumpRecord {
            frame: format!("{}/{}", frame.video_id, frame.frame_index),
            x: p.bbox.x,
            y: p.bbox.y,
            w: p.bbox.w,
            h: p.bbox.h,
            score: p.score,
        }));
    }
    let by_frame: BTreeMap<usize, Vec<RegionProposal>> = computed.into_iter().collect();

    let mut diversity = DiversityFilter::new(cfg);
    let mut pairs = Vec::new();
    for fp in frame_pairs {
        let (fa, fb) = (&frames[fp.index_a], &frames[fp.index_b]);
        for m in match_pairs(&by_frame[&fp.index_a], &by_frame[&fp.index_b], cfg.iou_min) {
            let candidate = RegionPair {
                video_id: fa.video_id.clone(),
                index_a: fa.frame_index,
                index_b: fb.frame_index,
                bbox_a: m.bbox_a,
                bbox_b: m.bbox_b,
                iou: m.iou,
                crop_a: crop_patch(fa, &m.bbox_a, cfg.crop_size)?,
                crop_b: crop_patch(fb, &m.bbox_b, cfg.crop_size)?,
            };
            if diversity.admit(&candidate) {
                pairs.push(candidate);
            }
        }
    }
    Ok(pairs)
}

fn mine_square_pairs(
    frames: &[Frame],
    frame_pairs: &[FramePair],
    cfg: &MiningConfig,
) -> Result<Vec<RegionPair>> {
    let s = cfg.crop_size;
    let mut pairs = Vec::new();
    for fp in frame_pairs {
        let (fa, fb) = (&frames[fp.index_a], &frames[fp.index_b]);
        let (w, h) = (fa.width().min(fb.width()), fa.height().min(fb.height()));
        if w < s || h < s {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &[crate::seed::hash_str(&fa.video_id), fp.index_a as u64],
        ));
        for _ in 0..cfg.squares_per_pair {
            let bbox = BBox::new(rng.random_range(0..=w - s), rng.random_range(0..=h - s), s, s);
            pairs.push(RegionPair {
                video_id: fa.video_id.clone(),
                index_a: fa.frame_index,
                index_b: fb.frame_index,
                bbox_a: bbox,
                bbox_b: bbox,
                iou: 1.0,
                crop_a: crop_patch(fa, &bbox, s)?,
                crop_b: crop_patch(fb, &bbox, s)?,
            });
        }
    }
    Ok(pairs)
}

fn mine_frame_pairs(frames: &[Frame], frame_pairs: &[FramePair], cfg: &MiningConfig) -> Vec<RegionPair> {
    frame_pairs
        .iter()
        .map(|fp| {
            let (fa, fb) = (&frames[fp.index_a], &frames[fp.index_b]);
            RegionPair {
                video_id: fa.video_id.clone(),
                index_a: fa.frame_index,
                index_b: fb.frame_index,
                bbox_a: BBox::new(0, 0, fa.width(), fa.height()),
                bbox_b: BBox::new(0, 0, fb.width(), fb.height()),
                iou: 1.0,
                crop_a: resize_frame(fa, cfg.crop_size),
                crop_b: resize_frame(fb, cfg.crop_size),
            }
        })
        .collect()
}

/// Mines one video directory: load, select frame pairs, then produce region
/// pairs in temporal order according to `cfg.mode`.
pub fn mine_video(video_dir: &Path, cfg: &MiningConfig) -> Result<VideoMining> {
    let frames = ingest::load_video_frames(video_dir)?;
    mine_frames(&frames, cfg)
}

pub fn mine_frames(frames: &[Frame], cfg: &MiningConfig) -> Result<VideoMining> {
    let video_id = frames.first().map(|f| f.video_id.clone()).unwrap_or_default();
    let frame_pairs = ingest::select_frame_pairs(frames, cfg);
    let mut proposal_dump = Vec::new();
    let pairs = match cfg.mode {
        MiningMode::Proposal => mine_proposal_pairs(frames, &frame_pairs, cfg, &mut proposal_dump)?,
        MiningMode::Square => mine_square_pairs(frames, &frame_pairs, cfg)?,
        MiningMode::Frame => mine_frame_pairs(frames, &frame_pairs, cfg),
    };
    debug!(
        "{video_id}: {} frames, {} frame pairs, {} region pairs",
        frames.len(),
        frame_pairs.len(),
        pairs.len()
    );
    Ok(VideoMining {
        video_id,
        frame_pairs,
        pairs,
        proposal_dump,
    })
}

#[derive(Debug, Clone)]
pub struct CorpusMining {
    pub dataset: PairDataset,
    pub frame_pairs: Vec<FramePair>,
    pub proposal_dump: Vec<ProposalDumpRecord>,
    /// Videos that could not be mined, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Mines every video directory under `corpus`. Videos are processed in
/// parallel; failures are reported per video and do not stop the run. Pair
/// ids follow sorted video order, so output is independent of scheduling.
pub fn mine_corpus(corpus: &Path, cfg: &MiningConfig) -> Result<CorpusMining> {
    cfg.validate()?;
    let videos = ingest::list_videos(corpus)?;
    let results: Vec<(String, Result<VideoMining>)> = videos
        .par_iter()
        .map(|dir| (ingest::video_id_of(dir), mine_video(dir, cfg)))
        .collect();

    let mut records = Vec::new();
    let mut crops = Vec::new();
    let mut frame_pairs = Vec::new();
    let mut proposal_dump = Vec::new();
    let mut failures = Vec::new();
    for (video_id, result) in results {
        match result {
            Ok(mined) => {
                frame_pairs.extend(mined.frame_pairs);
                proposal_dump.extend(mined.proposal_dump);
                for p in mined.pairs {
                    records.push(PairRecord {
                        pair_id: records.len() as u64,
                        video_id: p.video_id,
                        index_a: p.index_a,
                        index_b: p.index_b,
                        bbox_a: p.bbox_a,
                        bbox_b: p.bbox_b,
                        iou: p.iou,
                    });
                    crops.push((p.crop_a, p.crop_b));
                }
            }
            Err(e) => {
                warn!("skipping video {video_id}: {e}");
                failures.push((video_id, e.to_string()));
            }
        }
    }
    info!(
        "mined {} pairs from {} videos ({} failed)",
        records.len(),
        videos.len() - failures.len(),
        failures.len()
    );
    Ok(CorpusMining {
        dataset: PairDataset {
            crop_size: cfg.crop_size,
            records,
            crops,
        },
        frame_pairs,
        proposal_dump,
        failures,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub pairs: usize,
    pub iou_violations: Vec<u64>,
    pub geometry_violations: Vec<u64>,
    pub diversity_violations: Vec<u64>,
    /// Largest consecutive-pair diversity correlation seen.
    pub max_diversity_correlation: f64,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.iou_violations.is_empty()
            && self.geometry_violations.is_empty()
            && self.diversity_violations.is_empty()
    }
}

/// Re-validates a persisted proposal-mode dataset: every pair's recomputed
/// IoU exceeds `iou_min`, both boxes pass the size and aspect predicates, and
/// consecutive pairs within a video are diverse.
pub fn audit_dataset(ds: &PairDataset, cfg: &MiningConfig) -> AuditReport {
    let mut report = AuditReport {
        pairs: ds.len(),
        max_diversity_correlation: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut last_by_video: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if !(iou(&r.bbox_a, &r.bbox_b) > cfg.iou_min) {
            report.iou_violations.push(r.pair_id);
        }
        if !cfg.passes_geometry(&r.bbox_a) || !cfg.passes_geometry(&r.bbox_b) {
            report.geometry_violations.push(r.pair_id);
        }
        if let Some(&prev) = last_by_video.get(r.video_id.as_str()) {
            let n = cfg.diversity_downsample;
            let mut c = crop_correlation(&ds.crops[i].0, &ds.crops[prev].0, n);
            if cfg.diversity_member == DiversityMember::Both {
                c = c.max(crop_correlation(&ds.crops[i].1, &ds.crops[prev].1, n));
            }
            report.max_diversity_correlation = report.max_diversity_correlation.max(c);
            if !(c < cfg.diversity_corr_max) {
                report.diversity_violations.push(r.pair_id);
            }
        }
        last_by_video.insert(&r.video_id, i);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn prop(x: u32, y: u32, w: u32, h: u32, score: f64) -> RegionProposal {
        RegionProposal {
            bbox: BBox::new(x, y, w, h),
            score,
            segment_size: (w * h) as u64,
        }
    }

    fn pair_with(crop: Crop) -> RegionPair {
        RegionPair {
            video_id: "v".into(),
            index_a: 0,
            index_b: 1,
            bbox_a: BBox::new(0, 0, 64, 64),
            bbox_b: BBox::new(0, 0, 64, 64),
            iou: 1.0,
            crop_b: crop.clone(),
            crop_a: crop,
        }
    }

    fn noise_crop(seed: u64) -> Crop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Crop::from_image(&RgbImage::from_fn(64, 64, |_, _| {
            let v: u8 = rng.random();
            Rgb([v, v, v])
        }))
    }

    #[test]
    fn static_frame_matches_itself() {
        let props = vec![prop(0, 0, 80, 80, 0.9), prop(40, 10, 90, 70, 0.5)];
        let m = match_pairs(&props, &props, 0.5);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|m| m.iou == 1.0 && m.bbox_a == m.bbox_b));
    }

    #[test]
    fn low_overlap_is_dropped() {
        // 10x10 boxes shifted so that IoU = 60 / 140 < 0.5.
        let a = vec![prop(0, 0, 10, 10, 1.0)];
        let b = vec![prop(4, 0, 10, 10, 1.0)];
        assert!((iou(&a[0].bbox, &b[0].bbox) - 60.0 / 140.0).abs() < 1e-12);
        assert!(match_pairs(&a, &b, 0.5).is_empty());
    }

    #[test]
    fn best_partner_wins() {
        let a = vec![prop(0, 0, 100, 100, 1.0)];
        // IoU 0.6 and 0.8 respectively.
        let b = vec![prop(0, 0, 100, 60, 0.9), prop(0, 0, 100, 80, 0.1)];
        let m = match_pairs(&a, &b, 0.5);
        assert_eq!(m.len(), 1);
        assert!((m[0].iou - 0.8).abs() < 1e-12);
        assert_eq!(m[0].bbox_b, BBox::new(0, 0, 100, 80));
    }

    #[test]
    fn iou_ties_prefer_higher_score() {
        let a = vec![prop(10, 0, 10, 10, 1.0)];
        let b = vec![prop(5, 0, 10, 10, 0.2), prop(15, 0, 10, 10, 0.7)];
        let m = match_pairs(&a, &b, 0.2);
        assert_eq!(m[0].bbox_b.x, 15);
    }

    #[test]
    fn shared_partner_is_allowed() {
        let a = vec![prop(0, 0, 10, 10, 1.0), prop(1, 0, 10, 10, 0.9)];
        let b = vec![prop(0, 0, 10, 10, 1.0)];
        assert_eq!(match_pairs(&a, &b, 0.5).len(), 2);
    }

    #[test]
    fn diversity_decisions() {
        let cfg = MiningConfig::desk();
        let first = pair_with(noise_crop(1));
        assert!(diversity_filter(&first, None, &cfg));
        assert!(!diversity_filter(&first.clone(), Some(&first), &cfg));
        let other = pair_with(noise_crop(2));
        // Oracle: independent noise patches correlate near zero after downsampling.
        let c = crop_correlation(&other.crop_a, &first.crop_a, 33);
        assert!(c.abs() < 0.7, "{c}");
        assert!(diversity_filter(&other, Some(&first), &cfg));

        let mut filter = DiversityFilter::new(&cfg);
        assert!(filter.admit(&first));
        assert!(!filter.admit(&first));
        assert!(filter.admit(&other));
        assert!(!filter.admit(&other));
    }

    #[test]
    fn audit_flags_each_violation() {
        let cfg = MiningConfig::desk();
        let record = |id: u64, video: &str, b: BBox, iou: f64| PairRecord {
            pair_id: id,
            video_id: video.into(),
            index_a: 0,
            index_b: 1,
            bbox_a: BBox::new(0, 0, 80, 80),
            bbox_b: b,
            iou,
        };
        let good = BBox::new(0, 0, 80, 80);
        let ds = PairDataset {
            crop_size: 64,
            records: vec![
                record(0, "a", good, 1.0),
                record(1, "b", good, 1.0),
                // Same crop as pair 0, in the same video.
                record(2, "a", good, 1.0),
                record(3, "c", BBox::new(40, 0, 80, 80), 1.0 / 3.0),
                record(4, "d", BBox::new(0, 0, 80, 70), 0.875),
                record(5, "e", BBox::new(0, 0, 80, 40), 0.5),
            ],
            crops: [1, 2, 1, 3, 4, 5].map(|s| (noise_crop(s), noise_crop(s + 10))).to_vec(),
        };
        let r = audit_dataset(&ds, &cfg);
        assert_eq!(r.pairs, 6);
        assert_eq!(r.diversity_violations, [2]);
        assert_eq!(r.iou_violations, [3, 5]);
        // 80x40 is both too thin and below the minimum size.
        assert_eq!(r.geometry_violations, [5]);
        assert!(!r.is_clean());
        assert!(audit_dataset(&ds.split_videos(|v| v != "b").0, &cfg).is_clean());
    }

    #[test]
    fn desk_and_paper_validate() {
        MiningConfig::paper().validate().unwrap();
        MiningConfig::desk().validate().unwrap();
        let mut bad = MiningConfig::desk();
        bad.corr_lo = 0.9;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        bad = MiningConfig::desk();
        bad.iou_min = 1.0;
        assert!(bad.validate().is_err());
    }
}
