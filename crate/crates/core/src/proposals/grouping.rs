//! Hierarchical grouping of segments into proposals.
//!
//! Starting from the segmentation, the most similar pair of adjacent regions
//! is merged repeatedly until one region remains. Every region ever formed
//! (initial segments and merges) yields a candidate box. Similarity mixes a
//! colour-histogram intersection with size and fill cues; the mixing weights
//! and the per-region score jitter both come from `grouping_seed`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{proposal_order, BBox, LabelMap, RegionProposal, SegmentationParams};
use crate::ingest::Frame;

/// Histogram bins per colour channel.
pub const COLOR_BINS: usize = 25;

struct Region {
    size: u64,
    bbox: BBox,
    /// L1-normalised concatenation of the three channel histograms.
    hist: Vec<f64>,
}

struct Weights {
    color: f64,
    size: f64,
    fill: f64,
}

impl Weights {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let color = rng.random_range(0.5..=1.0);
        let size = rng.random_range(0.5..=1.0);
        let fill = rng.random_range(0.5..=1.0);
        let total = color + size + fill;
        Weights {
            color: color / total,
            size: size / total,
            fill: fill / total,
        }
    }
}

fn initial_regions(labels: &LabelMap, frame: &Frame) -> Vec<Region> {
    let bins = COLOR_BINS;
    let mut bounds = vec![(u32::MAX, u32::MAX, 0u32, 0u32); labels.count];
    let mut sizes = vec![0u64; labels.count];
    let mut hists = vec![vec![0.0; 3 * bins]; labels.count];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.label(x, y) as usize;
            let b = &mut bounds[l];
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
            sizes[l] += 1;
            let p = frame.pixels.get_pixel(x, y);
            for c in 0..3 {
                let bin = (p[c] as usize * bins / 256).min(bins - 1);
                hists[l][c * bins + bin] += 1.0;
            }
        }
    }
    bounds
        .into_iter()
        .zip(sizes)
        .zip(hists)
        .map(|(((x0, y0, x1, y1), size), mut hist)| {
            let total = 3.0 * size as f64;
            hist.iter_mut().for_each(|v| *v /= total);
            Region {
                size,
                bbox: BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                hist,
            }
        })
        .collect()
}

fn adjacency(labels: &LabelMap) -> BTreeSet<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.label(x, y) as usize;
            let mut add = |m: u32| {
                let m = m as usize;
                if m != l {
                    pairs.insert((l.min(m), l.max(m)));
                }
            };
            if x + 1 < labels.width {
                add(labels.label(x + 1, y));
            }
            if y + 1 < labels.height {
                add(labels.label(x, y + 1));
            }
        }
    }
    pairs
}

fn similarity(a: &Region, b: &Region, image_size: f64, w: &Weights) -> f64 {
    let color: f64 = a.hist.iter().zip(&b.hist).map(|(p, q)| p.min(*q)).sum();
    let size = 1.0 - (a.size + b.size) as f64 / image_size;
    let fill = 1.0 - (a.bbox.union(&b.bbox).area() as f64 - (a.size + b.size) as f64) / image_size;
    w.color * color + w.size * size + w.fill * fill
}

fn merge(a: &Region, b: &Region) -> Region {
    let size = a.size + b.size;
    let hist = a
        .hist
        .iter()
        .zip(&b.hist)
        .map(|(p, q)| (p * a.size as f64 + q * b.size as f64) / size as f64)
        .collect();
    Region {
        size,
        bbox: a.bbox.union(&b.bbox),
        hist,
    }
}

/// Groups the segments of `labels` into proposals sorted by descending score,
/// deduplicated by exact box equality (highest-scoring copy kept).
pub fn group_regions(
    labels: &LabelMap,
    frame: &Frame,
    params: &SegmentationParams,
) -> Vec<RegionProposal> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.grouping_seed);
    let weights = Weights::draw(&mut rng);
    let image_size = (labels.width as f64) * (labels.height as f64);

    let mut regions = initial_regions(labels, frame);
    let mut neighbours: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut sims: HashMap<(usize, usize), f64> = HashMap::new();
    for (a, b) in adjacency(labels) {
        neighbours.entry(a).or_default().insert(b);
        neighbours.entry(b).or_default().insert(a);
        sims.insert((a, b), similarity(&regions[a], &regions[b], image_size, &weights));
    }

    while !sims.is_empty() {
        // Most similar pair; ties go to the lexicographically smallest ids.
        let (&(a, b), _) = sims
            .iter()
            .max_by(|(ka, va), (kb, vb)| va.total_cmp(vb).then(kb.cmp(ka)))
            .expect("non-empty");
        let merged = merge(&regions[a], &regions[b]);
        let id = regions.len();
        regions.push(merged);

        let mut adjacent: BTreeSet<usize> = BTreeSet::new();
        for old in [a, b] {
            for n in neighbours.remove(&old).unwrap_or_default() {
                sims.remove(&(old.min(n), old.max(n)));
                if let Some(set) = neighbours.get_mut(&n) {
                    set.remove(&old);
                }
                if n != a && n != b {
                    adjacent.insert(n);
                }
            }
        }
        for &n in &adjacent {
            neighbours.get_mut(&n).expect("live region").insert(id);
            sims.insert((n, id), similarity(&regions[n], &regions[id], image_size, &weights));
        }
        neighbours.insert(id, adjacent);
    }

    // Rank 1 is the last region formed; jitter in [0.5, 1] per region.
    let total = regions.len();
    let mut proposals: Vec<RegionProposal> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let jitter: f64 = rng.random_range(0.5..=1.0);
            RegionProposal {
                bbox: r.bbox,
                score: jitter / (total - i) as f64,
                segment_size: r.size,
            }
        })
        .collect();
    proposals.sort_by(proposal_order);
    let mut seen = BTreeSet::new();
    proposals.retain(|p| seen.insert(p.bbox));
    proposals
}
