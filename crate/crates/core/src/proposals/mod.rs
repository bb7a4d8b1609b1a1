//! Object-like region proposals: graph-based over-segmentation followed by
//! hierarchical grouping of adjacent segments.

mod grouping;
mod segment;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use grouping::{group_regions, COLOR_BINS};
pub use segment::{segment_graph, LabelMap};

use crate::error::Result;
use crate::ingest::Frame;
use crate::jsonl;

/// Axis-aligned pixel box, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        w as u64 * h as u64
    }

    /// Orientation-neutral aspect ratio, always >= 1.
    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (self.w as f64, self.h as f64);
        (w / h).max(h / w)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BBox::new(x, y, self.right().max(other.right()) - x, self.bottom().max(other.bottom()) - y)
    }
}

/// Intersection over union with pixel-area semantics.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub bbox: BBox,
    pub score: f64,
    pub segment_size: u64,
}

/// Total order used for proposal lists: score descending, then larger
/// segment, then smaller x, then smaller y.
pub(crate) fn proposal_order(a: &RegionProposal, b: &RegionProposal) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.segment_size.cmp(&a.segment_size))
        .then(a.bbox.x.cmp(&b.bbox.x))
        .then(a.bbox.y.cmp(&b.bbox.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationParams {
    /// Scale of the merge threshold; larger values give larger segments.
    pub k: f64,
    pub min_segment: usize,
    /// Gaussian pre-smoothing std in pixels; 0 disables smoothing.
    pub sigma: f64,
    pub grouping_seed: u64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            k: 300.0,
            min_segment: 300,
            sigma: 0.8,
            grouping_seed: 0,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !(self.sigma >= 0.0) || self.min_segment == 0 {
            return Err(crate::Error::Config(format!(
                "segmentation needs k > 0, sigma >= 0 and min_segment >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Segments `frame` and groups the segments into scored proposals.
pub fn propose(frame: &Frame, params: &SegmentationParams) -> Vec<RegionProposal> {
    let labels = segment_graph(frame, params);
    group_regions(&labels, frame, params)
}

/// Keeps proposals larger than `min_w` x `min_h` (strict) with aspect ratio
/// strictly below `max_aspect`, then truncates to `n`.
pub fn top_proposals(
    proposals: &[RegionProposal],
    n: usize,
    min_w: u32,
    min_h: u32,
    max_aspect: f64,
) -> Vec<RegionProposal> {
    proposals
        .iter()
        .filter(|p| passes_geometry(&p.bbox, min_w, min_h, max_aspect))
        .take(n)
        .copied()
        .collect()
}

pub fn passes_geometry(bbox: &BBox, min_w: u32, min_h: u32, max_aspect: f64) -> bool {
    bbox.w > min_w && bbox.h > min_h && bbox.aspect_ratio() < max_aspect
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalDumpRecord {
    pub frame: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub score: f64,
}

pub fn write_proposal_dump(path: &Path, records: &[ProposalDumpRecord]) -> Result<()> {
    jsonl::write_records(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(w: u32, h: u32, score: f64) -> RegionProposal {
        RegionProposal {
            bbox: BBox::new(0, 0, w, h),
            score,
            segment_size: (w * h) as u64,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20, 20, 10, 10)), 0.0);
        assert!((iou(&a, &BBox::new(5, 0, 10, 10)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(10, 0, 10, 10)), 0.0);
    }

    #[test]
    fn geometric_filter_boundaries() {
        let props = vec![
            prop(300, 210, 0.9),
            prop(300, 200, 0.8),
            prop(227, 227, 0.7),
            prop(228, 228, 0.6),
        ];
        let dims = |kept: Vec<RegionProposal>| -> Vec<(u32, u32)> {
            kept.iter().map(|p| (p.bbox.w, p.bbox.h)).collect()
        };
        // Aspect alone: 300x210 (about 1.43) passes, 300x200 (exactly 1.5) does not.
        assert_eq!(
            dims(top_proposals(&props, 100, 0, 0, 1.5)),
            vec![(300, 210), (227, 227), (228, 228)]
        );
        // Size is strict too: 227x227 is not larger than 227.
        assert_eq!(dims(top_proposals(&props, 100, 227, 227, 1.5)), vec![(228, 228)]);
        assert_eq!(top_proposals(&props, 1, 227, 227, 1.5).len(), 1);
    }

    #[test]
    fn ordering_ties() {
        let mut v = vec![
            RegionProposal { bbox: BBox::new(5, 0, 2, 2), score: 1.0, segment_size: 4 },
            RegionProposal { bbox: BBox::new(1, 3, 2, 2), score: 1.0, segment_size: 4 },
            RegionProposal { bbox: BBox::new(1, 1, 2, 2), score: 1.0, segment_size: 4 },
            RegionProposal { bbox: BBox::new(9, 9, 2, 2), score: 1.0, segment_size: 9 },
            RegionProposal { bbox: BBox::new(0, 0, 2, 2), score: 2.0, segment_size: 1 },
        ];
        v.sort_by(proposal_order);
        let xy: Vec<_> = v.iter().map(|p| (p.bbox.x, p.bbox.y)).collect();
        assert_eq!(xy, vec![(0, 0), (9, 9), (1, 1), (1, 3), (5, 0)]);
    }
}
