//! Frozen-feature evaluation: cosine nearest-neighbour retrieval, k-NN
//! classification and first-layer filter visualisation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::miner::Crop;
use crate::miner::dataset::{read_crops, write_crops, PairDataset, CROPS_FILE};
use crate::model::{Network, Tap};
use crate::seed::mix_seed;
use crate::tensor::Real;
use crate::trainer::cosine_distance;

pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Database,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub crop_id: String,
    pub label: u32,
    pub split: Split,
}

/// Crops with class labels and a query/database split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCropSet {
    pub crop_size: u32,
    pub records: Vec<LabelRecord>,
    pub crops: Vec<Crop>,
}

impl LabeledCropSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_crops(&dir.join(CROPS_FILE), self.crop_size, self.len(), &self.crops)?;
        jsonl::write_records(&dir.join(LABELS_FILE), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let crops_path = dir.join(CROPS_FILE);
        let (crop_size, crops) = read_crops(&crops_path, 1)?;
        let records: Vec<LabelRecord> = jsonl::read_records(&dir.join(LABELS_FILE))?;
        if records.len() != crops.len() {
            return Err(Error::format(
                &crops_path,
                format!("{} crops for {} label records", crops.len(), records.len()),
            ));
        }
        Ok(LabeledCropSet {
            crop_size,
            records,
            crops,
        })
    }
}

/// One feature row per crop, read at `tap`.
pub fn extract_features<T: Real>(net: &Network<T>, crops: &[Crop], tap: Tap) -> Result<Vec<Vec<f64>>> {
    crops
        .par_iter()
        .map(|c| net.features(&c.to_tensor().cast::<T>(), tap))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Correct retrievals over `queries * k`; `None` until labels are applied.
    pub retrieval_rate: Option<f64>,
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

/// Exact top-`k` database rows by cosine distance for every query; ties go to
/// the lower database index.
pub fn retrieve(queries: &[Vec<f64>], database: &[Vec<f64>], k: usize) -> Result<RetrievalReport> {
    if k > database.len() {
        return Err(Error::KExceedsDatabase {
            k,
            size: database.len(),
        });
    }
    let dim = database.first().map(Vec::len);
    if let Some(d) = dim {
        if let Some(bad) = queries.iter().chain(database).find(|r| r.len() != d) {
            return Err(Error::ShapeMismatch(format!(
                "feature rows of length {} and {d}",
                bad.len()
            )));
        }
    }
    let neighbors = queries
        .par_iter()
        .map(|q| {
            let mut all: Vec<Neighbor> = database
                .iter()
                .enumerate()
                .map(|(index, row)| Neighbor {
                    index,
                    distance: cosine_distance(q, row),
                })
                .collect();
            if k == 0 {
                return Vec::new();
            }
            if k < all.len() {
                all.select_nth_unstable_by(k - 1, neighbor_order);
                all.truncate(k);
            }
            all.sort_by(neighbor_order);
            all
        })
        .collect();
    Ok(RetrievalReport {
        k,
        neighbors,
        retrieval_rate: None,
    })
}

impl RetrievalReport {
    /// Fills in the fraction of retrieved rows whose label matches the query.
    pub fn with_labels(mut self, query_labels: &[u32], db_labels: &[u32]) -> Self {
        let total = self.neighbors.len() * self.k;
        let correct: usize = self
            .neighbors
            .iter()
            .zip(query_labels)
            .map(|(ns, &q)| ns.iter().filter(|n| db_labels[n.index] == q).count())
            .sum();
        self.retrieval_rate = Some(if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        });
        self
    }
}

/// Retrieval over a labeled set: queries against the database split.
pub fn retrieval_report<T: Real>(
    net: &Network<T>,
    set: &LabeledCropSet,
    k: usize,
    tap: Tap,
) -> Result<RetrievalReport> {
    let q_idx = set.indices(Split::Query);
    let d_idx = set.indices(Split::Database);
    let pick = |idx: &[usize]| idx.iter().map(|&i| set.crops[i].clone()).collect::<Vec<_>>();
    let labels = |idx: &[usize]| idx.iter().map(|&i| set.records[i].label).collect::<Vec<_>>();
    let qf = extract_features(net, &pick(&q_idx), tap)?;
    let df = extract_features(net, &pick(&d_idx), tap)?;
    Ok(retrieve(&qf, &df, k)?.with_labels(&labels(&q_idx), &labels(&d_idx)))
}

/// Accuracy of majority-vote k-NN over cosine distance. Vote ties go to the
/// label with the smallest summed distance, then the smaller label.
pub fn knn_classify(
    train_feats: &[Vec<f64>],
    train_labels: &[u32],
    test_feats: &[Vec<f64>],
    test_labels: &[u32],
    k: usize,
) -> Result<f64> {
    if train_feats.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let k = k.max(1).min(train_feats.len());
    let report = retrieve(test_feats, train_feats, k)?;
    let correct = report
        .neighbors
        .iter()
        .zip(test_labels)
        .filter(|(ns, &truth)| {
            let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
            for n in ns.iter() {
                let e = votes.entry(train_labels[n.index]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += n.distance;
            }
            let best = votes
                .into_iter()
                .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(&b.0)))
                .map(|(label, _)| label);
            best == Some(truth)
        })
        .count();
    Ok(if test_feats.is_empty() {
        0.0
    } else {
        correct as f64 / test_feats.len() as f64
    })
}

/// Tiles the first convolution's kernels into an RGB grid: `ceil(sqrt(O))`
/// columns, 1 px black separators between tiles, each kernel min-max
/// normalised on its own (a constant kernel renders mid-gray).
pub fn filter_grid<T: Real>(net: &Network<T>) -> Result<RgbImage> {
    let w = net
        .first_conv()
        .ok_or_else(|| Error::ShapeMismatch("network has no convolution".into()))?;
    let &[o, c, k, _] = w.shape() else {
        return Err(Error::ShapeMismatch(format!("kernel shape {:?}", w.shape())));
    };
    let cols = (o as f64).sqrt().ceil() as usize;
    let rows = o.div_ceil(cols);
    let side = |n: usize| (n * k + n.saturating_sub(1)) as u32;
    let mut img = RgbImage::new(side(cols), side(rows));
    let per = c * k * k;
    for f in 0..o {
        let vals: Vec<f64> = w.data()[f * per..(f + 1) * per].iter().map(|v| v.to_f64()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (ox, oy) = ((f % cols) * (k + 1), (f / cols) * (k + 1));
        for y in 0..k {
            for x in 0..k {
                let mut px = [128u8; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    // Single-channel kernels repeat their one plane.
                    let v = vals[(ch.min(c - 1) * k + y) * k + x];
                    if hi > lo {
                        *p = ((v - lo) / (hi - lo) * 255.0).round() as u8;
                    }
                }
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(px));
            }
        }
    }
    Ok(img)
}

pub fn export_filter_grid<T: Real>(net: &Network<T>, out_path: &Path) -> Result<()> {
    filter_grid(net)?
        .save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(out_path, io),
            other => Error::io(out_path, std::io::Error::other(other)),
        })
}

/// Fraction of pairs with `D(a, p) < D(a, n)`, the negative being the first
/// crop of a random pair from another video.
pub fn triplet_satisfaction<T: Real>(net: &Network<T>, ds: &PairDataset, seed: u64) -> Result<f64> {
    if ds.video_count() < 2 {
        return Err(Error::NegativeSourceExhausted(
            "satisfaction needs pairs from at least two videos".into(),
        ));
    }
    let anchors = extract_features(net, &ds.crops.iter().map(|c| c.0.clone()).collect::<Vec<_>>(), Tap::Fc)?;
    let positives = extract_features(net, &ds.crops.iter().map(|c| c.1.clone()).collect::<Vec<_>>(), Tap::Fc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x7361_7469_7366]));
    let mut satisfied = 0;
    for i in 0..ds.len() {
        let others: Vec<usize> = (0..ds.len())
            .filter(|&j| ds.records[j].video_id != ds.records[i].video_id)
            .collect();
        let &j = others.choose(&mut rng).expect("two videos present");
        if cosine_distance(&anchors[i], &positives[i]) < cosine_distance(&anchors[i], &anchors[j]) {
            satisfied += 1;
        }
    }
    Ok(satisfied as f64 / ds.len() as f64)
}
