//! On-disk pair dataset: a binary crops file plus a JSON-lines manifest.
//!
//! Crops file layout (little-endian):
//!
//! ```text
//! magic     4 bytes  "SRPC"
//! version   u32      1
//! count     u64      number of records
//! crop_size u32      S
//! channels  u32      C (3)
//! payload            count x arity crops of C*S*S bytes, channel-first
//! ```
//!
//! Pair datasets store two crops per record; labeled crop sets reuse the
//! layout with one crop per record.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::crop::Crop;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::proposals::BBox;

pub const CROPS_MAGIC: &[u8; 4] = b"SRPC";
pub const CROPS_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

pub const CROPS_FILE: &str = "crops.bin";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAME_PAIRS_FILE: &str = "frame_pairs.jsonl";

pub fn write_crops<'a>(
    path: &Path,
    crop_size: u32,
    records: usize,
    crops: impl IntoIterator<Item = &'a Crop>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(CROPS_MAGIC);
    header.extend_from_slice(&CROPS_VERSION.to_le_bytes());
    header.extend_from_slice(&(records as u64).to_le_bytes());
    header.extend_from_slice(&crop_size.to_le_bytes());
    header.extend_from_slice(&Crop::CHANNELS.to_le_bytes());
    out.write_all(&header).map_err(|e| Error::io(path, e))?;
    for crop in crops {
        if crop.size() != crop_size {
            return Err(Error::ShapeMismatch(format!(
                "crop of size {} in a file of size {crop_size}",
                crop.size()
            )));
        }
        out.write_all(crop.bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a crops file whose records hold `arity` crops each. Returns the crop
/// size and the crops in file order.
pub fn read_crops(path: &Path, arity: usize) -> Result<(u32, Vec<Crop>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != CROPS_MAGIC {
        return Err(Error::format(path, "missing SRPC header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CROPS_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let crop_size = u32_at(16);
    let channels = u32_at(20);
    if channels != Crop::CHANNELS {
        return Err(Error::format(path, format!("expected 3 channels, found {channels}")));
    }
    let crop_len = (channels * crop_size * crop_size) as usize;
    let expected = HEADER_LEN + count * arity * crop_len;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "{count} records of {arity} crop(s) need {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let crops = bytes[HEADER_LEN..]
        .chunks_exact(crop_len.max(1))
        .take(count * arity)
        .map(|chunk| Crop::from_chw(crop_size, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((crop_size, crops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: u64,
    pub video_id: String,
    pub index_a: usize,
    pub index_b: usize,
    pub bbox_a: BBox,
    pub bbox_b: BBox,
    pub iou: f64,
}

/// Mined region pairs held in memory: manifest records plus both crops.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub crop_size: u32,
    pub records: Vec<PairRecord>,
    pub crops: Vec<(Crop, Crop)>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn video_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.video_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Splits by video: pairs whose video satisfies `held_out` go to the
    /// second set. Record order is kept in both.
    pub fn split_videos(&self, held_out: impl Fn(&str) -> bool) -> (PairDataset, PairDataset) {
        let empty = || PairDataset {
            crop_size: self.crop_size,
            records: Vec::new(),
            crops: Vec::new(),
        };
        let (mut keep, mut out) = (empty(), empty());
        for (r, c) in self.records.iter().zip(&self.crops) {
            let side = if held_out(&r.video_id) { &mut out } else { &mut keep };
            side.records.push(r.clone());
            side.crops.push(c.clone());
        }
        (keep, out)
    }

    pub fn crops_path(dir: &Path) -> PathBuf {
        dir.join(CROPS_FILE)
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_crops(
            &Self::crops_path(dir),
            self.crop_size,
            self.len(),
            self.crops.iter().flat_map(|(a, b)| [a, b]),
        )?;
        jsonl::write_records(&Self::manifest_path(dir), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let crops_path = Self::crops_path(dir);
        let (crop_size, crops) = read_crops(&crops_path, 2)?;
        let records: Vec<PairRecord> = jsonl::read_records(&Self::manifest_path(dir))?;
        if records.len() * 2 != crops.len() {
            return Err(Error::format(
                &crops_path,
                format!("{} crops for {} manifest records", crops.len(), records.len()),
            ));
        }
        let mut it = crops.into_iter();
        let crops = std::iter::from_fn(|| Some((it.next()?, it.next()?))).collect();
        Ok(PairDataset {
            crop_size,
            records,
            crops,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn crop(size: u32, seed: u8) -> Crop {
        let data = (0..3 * size * size).map(|i| (i as u8).wrapping_mul(seed)).collect();
        Crop::from_chw(size, data).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_crops(&path, 2, 1, [&crop(2, 3), &crop(2, 5)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SRPC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + 2 * 12);
        // Wrong arity is detected from the length.
        assert!(read_crops(&path, 1).is_err());
        assert_eq!(read_crops(&path, 2).unwrap().1.len(), 2);
    }

    #[test]
    fn split_keeps_whole_videos() {
        let record = |id: u64, video: &str| PairRecord {
            pair_id: id,
            video_id: video.into(),
            index_a: 0,
            index_b: 1,
            bbox_a: BBox::new(0, 0, 2, 2),
            bbox_b: BBox::new(0, 0, 2, 2),
            iou: 1.0,
        };
        let ds = PairDataset {
            crop_size: 2,
            records: vec![record(0, "a"), record(1, "b"), record(2, "a")],
            crops: (0..3).map(|i| (crop(2, i), crop(2, i + 7))).collect(),
        };
        let (train, held) = ds.split_videos(|v| v == "a");
        assert_eq!(train.records.iter().map(|r| r.pair_id).collect::<Vec<_>>(), [1]);
        assert_eq!(held.records.iter().map(|r| r.pair_id).collect::<Vec<_>>(), [0, 2]);
        assert_eq!(held.crops[1], ds.crops[2]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        fs::write(&path, b"XXXX0000000000000000000000").unwrap();
        assert!(matches!(read_crops(&path, 2), Err(Error::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dataset_round_trips(n in 0usize..6, size in 1u32..6, seed in any::<u8>()) {
            let dir = tempfile::tempdir().unwrap();
            let ds = PairDataset {
                crop_size: size,
                records: (0..n).map(|i| PairRecord {
                    pair_id: i as u64,
                    video_id: format!("v{}", i % 2),
                    index_a: i,
                    index_b: i + 1,
                    bbox_a: BBox::new(i as u32, 0, 5, 5),
                    bbox_b: BBox::new(0, i as u32, 5, 6),
                    iou: 0.5 + i as f64 / 100.0,
                }).collect(),
                crops: (0..n).map(|i| (crop(size, seed ^ i as u8), crop(size, seed.wrapping_add(i as u8)))).collect(),
            };
            ds.save(dir.path()).unwrap();
            prop_assert_eq!(PairDataset::load(dir.path()).unwrap(), ds);
        }
    }
}
