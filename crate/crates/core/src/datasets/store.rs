//! On-disk corpus layout.
//!
//! A data directory holds `manifest.json` and the HR/LR pairs, either as
//! PNG files `pairs/NNNNN_hr.png` and `pairs/NNNNN_lr.png` or as one packed
//! little-endian file `pairs.bin`:
//!
//! ```text
//! b"CSRP"  u32 pair_count
//! per pair: u32 channels, u32 hr_h, u32 hr_w, u32 lr_h, u32 lr_w,
//!           hr bytes (planar u8), lr bytes (planar u8)
//! ```
//!
//! Tiles are not stored; the manifest records each tile's pair and origin.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Pair, Population, TileSample};
use crate::error::{Error, Result};
use crate::imaging::Image;

const PACKED_MAGIC: &[u8; 4] = b"CSRP";
const PACKED_FILE: &str = "pairs.bin";
const PNG_DIR: &str = "pairs";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageKind {
    #[default]
    Packed,
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub name: String,
    pub population: Option<Population>,
    pub validation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<SourceRecord>,
    pub hr_scales: Vec<f64>,
    pub stride: usize,
    pub seed: u64,
    pub scorer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: usize,
    pub hr_scale: f64,
    pub hr_dims: (usize, usize),
    pub lr_dims: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub pair: usize,
    pub origin: (usize, usize),
    pub difficulty_psnr: f64,
    pub class_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tile: usize,
    pub scale: usize,
    pub channels: usize,
    pub classes: usize,
    pub class_counts: Vec<usize>,
    pub provenance: Provenance,
    pub storage: StorageKind,
    pub pairs: Vec<PairRecord>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Scored, partitioned tiles plus the pairs they were cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<Pair>,
    pub samples: Vec<TileSample>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pairs(dir, &self.pairs, self.manifest.storage)?;
        self.manifest.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(dir)?;
        let stored = read_pairs(dir, manifest.storage)?;
        if stored.len() != manifest.pairs.len() {
            return Err(Error::InvalidArgument(format!(
                "manifest lists {} pairs, store holds {}",
                manifest.pairs.len(),
                stored.len()
            )));
        }
        let pairs: Vec<Pair> = stored
            .into_iter()
            .zip(&manifest.pairs)
            .map(|((hr, lr), rec)| Pair {
                hr,
                lr,
                source: rec.source,
                hr_scale: rec.hr_scale,
            })
            .collect();
        let (t, s) = (manifest.tile, manifest.scale);
        let samples = manifest
            .samples
            .iter()
            .map(|r| {
                let p = pairs.get(r.pair).ok_or(Error::IndexOutOfRange {
                    index: r.pair,
                    len: pairs.len(),
                })?;
                Ok(TileSample {
                    lr: p.lr.crop(r.origin.0, r.origin.1, t, t)?,
                    hr: p.hr.crop(r.origin.0 * s, r.origin.1 * s, t * s, t * s)?,
                    pair: r.pair,
                    origin: r.origin,
                    difficulty_psnr: Some(r.difficulty_psnr),
                    class_label: Some(r.class_label),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest,
            pairs,
            samples,
        })
    }

    pub fn is_validation(&self, pair: &Pair) -> bool {
        self.manifest.provenance.sources[pair.source].validation
    }

    pub fn population(&self, pair: &Pair) -> Option<Population> {
        self.manifest.provenance.sources[pair.source].population
    }

    pub fn validation_pairs(&self) -> Vec<&Pair> {
        self.pairs.iter().filter(|p| self.is_validation(p)).collect()
    }

    /// Training tiles carrying class label `k`.
    pub fn class_samples(&self, k: usize) -> Vec<&TileSample> {
        self.samples.iter().filter(|s| s.class_label == Some(k)).collect()
    }
}

pub fn write_pairs(dir: &Path, pairs: &[Pair], kind: StorageKind) -> Result<()> {
    match kind {
        StorageKind::Packed => {
            let mut buf = Vec::new();
            buf.extend_from_slice(PACKED_MAGIC);
            buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
            for p in pairs {
                let header = [p.hr.channels(), p.hr.height(), p.hr.width(), p.lr.height(), p.lr.width()];
                for v in header {
                    buf.extend_from_slice(&(v as u32).to_le_bytes());
                }
                buf.extend_from_slice(&p.hr.to_u8());
                buf.extend_from_slice(&p.lr.to_u8());
            }
            let path = dir.join(PACKED_FILE);
            fs::write(&path, buf).map_err(|e| Error::io(&path, e))
        }
        StorageKind::Png => {
            let sub = dir.join(PNG_DIR);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (k, p) in pairs.iter().enumerate() {
                p.hr.save_png(&sub.join(format!("{k:05}_hr.png")))?;
                p.lr.save_png(&sub.join(format!("{k:05}_lr.png")))?;
            }
            Ok(())
        }
    }
}

pub fn read_pairs(dir: &Path, kind: StorageKind) -> Result<Vec<(Image, Image)>> {
    match kind {
        StorageKind::Packed => {
            let path = dir.join(PACKED_FILE);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let corrupt = || Error::InvalidArgument(format!("corrupt pair store {}", path.display()));
            if bytes.len() < 8 || &bytes[..4] != PACKED_MAGIC {
                return Err(corrupt());
            }
            let mut pos = 4;
            let u32_at = |pos: &mut usize| -> Result<usize> {
                let b = bytes.get(*pos..*pos + 4).ok_or_else(corrupt)?;
                *pos += 4;
                Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            };
            let count = u32_at(&mut pos)?;
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let [c, hh, hw, lh, lw] = [(); 5].map(|_| u32_at(&mut pos));
                let (c, hh, hw, lh, lw) = (c?, hh?, hw?, lh?, lw?);
                let mut image = |h: usize, w: usize| -> Result<Image> {
                    let n = h * w * c;
                    let b = bytes.get(pos..pos + n).ok_or_else(corrupt)?;
                    pos += n;
                    Image::new(h, w, c, b.iter().map(|&v| v as f32 / 255.0).collect())
                };
                let hr = image(hh, hw)?;
                let lr = image(lh, lw)?;
                out.push((hr, lr));
            }
            if pos != bytes.len() {
                return Err(corrupt());
            }
            Ok(out)
        }
        StorageKind::Png => {
            let sub = dir.join(PNG_DIR);
            let mut out = Vec::new();
            for k in 0.. {
                let hr = sub.join(format!("{k:05}_hr.png"));
                if !hr.exists() {
                    break;
                }
                out.push((Image::load_png(&hr)?, Image::load_png(&sub.join(format!("{k:05}_lr.png")))?));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs() -> Vec<Pair> {
        (0..3)
            .map(|k| Pair {
                hr: Image::from_fn(8, 12, 1, |_, y, x| ((y * 12 + x + k) % 256) as f32 / 255.0).unwrap(),
                lr: Image::from_fn(2, 3, 1, |_, y, x| ((y + x * k) % 256) as f32 / 255.0).unwrap(),
                source: k,
                hr_scale: 1.0,
            })
            .collect()
    }

    #[test]
    fn both_layouts_round_trip() {
        for kind in [StorageKind::Packed, StorageKind::Png] {
            let dir = tempfile::tempdir().unwrap();
            let ps = pairs();
            write_pairs(dir.path(), &ps, kind).unwrap();
            let back = read_pairs(dir.path(), kind).unwrap();
            assert_eq!(back.len(), 3);
            for (p, (hr, lr)) in ps.iter().zip(&back) {
                assert_eq!(&p.hr, hr);
                assert_eq!(&p.lr, lr);
            }
        }
    }

    #[test]
    fn truncated_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pairs(dir.path(), &pairs(), StorageKind::Packed).unwrap();
        let path = dir.path().join(PACKED_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_pairs(dir.path(), StorageKind::Packed).is_err());
    }
}
