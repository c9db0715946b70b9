//! Training corpus construction: HR/LR pairs, tile extraction, difficulty
//! scoring and the equal-size class partition.

mod store;
mod synth;

pub use store::{read_pairs, write_pairs, Dataset, Manifest, PairRecord, Provenance, SampleRecord, SourceRecord, StorageKind};
pub use synth::{synth_corpus, Population, SynthImage, SynthSpec};

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, psnr_with, Image, PsnrChannels, TileGrid};
use crate::models::Branch;

/// An aligned HR/LR image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub hr: Image,
    pub lr: Image,
    /// Index of the source image.
    pub source: usize,
    pub hr_scale: f64,
}

/// For every image and every HR scale: resize by the scale, trim to a
/// multiple of `sr_scale`, then downsample by `sr_scale`.
pub fn prepare_pairs(images: &[Image], hr_scales: &[f64], sr_scale: usize) -> Result<Vec<Pair>> {
    if sr_scale == 0 {
        return Err(Error::InvalidArgument("SR scale must be at least 1".into()));
    }
    if let Some(s) = hr_scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Error::InvalidArgument(format!("HR scale {s} outside (0, 1]")));
    }
    let mut pairs = Vec::with_capacity(images.len() * hr_scales.len());
    for (source, img) in images.iter().enumerate() {
        for &s in hr_scales {
            let scaled = |d: usize| ((d as f64 * s).round() as usize) / sr_scale * sr_scale;
            let (hh, hw) = (scaled(img.height()), scaled(img.width()));
            if hh == 0 || hw == 0 {
                return Err(Error::ImageTooSmall {
                    height: img.height(),
                    width: img.width(),
                    tile: sr_scale,
                });
            }
            let resized = bicubic_resize(img, (img.height() as f64 * s).round() as usize, (img.width() as f64 * s).round() as usize)?;
            let hr = resized.crop(0, 0, hh, hw)?;
            let lr = bicubic_resize(&hr, hh / sr_scale, hw / sr_scale)?;
            pairs.push(Pair {
                hr,
                lr,
                source,
                hr_scale: s,
            });
        }
    }
    Ok(pairs)
}

/// One LR tile with its HR counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    pub lr: Image,
    pub hr: Image,
    pub pair: usize,
    /// LR-pixel origin inside the pair.
    pub origin: (usize, usize),
    pub difficulty_psnr: Option<f64>,
    pub class_label: Option<usize>,
}

pub fn extract_tiles(pairs: &[Pair], tile: usize, stride: usize) -> Result<Vec<TileSample>> {
    let mut samples = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        let scale = p.hr.height() / p.lr.height();
        if p.hr.dims() != (p.lr.height() * scale, p.lr.width() * scale) {
            return Err(Error::shape("extract_tiles", format!("pair {k} is not an integer rescale")));
        }
        let grid = TileGrid::new(p.lr.height(), p.lr.width(), tile, stride)?;
        for &(r, c) in &grid.origins {
            samples.push(TileSample {
                lr: p.lr.crop(r, c, tile, tile)?,
                hr: p.hr.crop(r * scale, c * scale, tile * scale, tile * scale)?,
                pair: k,
                origin: (r, c),
                difficulty_psnr: None,
                class_label: None,
            });
        }
    }
    Ok(samples)
}

/// A reference restorer whose PSNR on a tile measures its difficulty.
pub trait DifficultyScorer {
    fn name(&self) -> String;
    fn restore(&self, lr: &[&Image]) -> Result<Vec<Image>>;
}

/// Plain bicubic upsampling.
#[derive(Clone, Copy, Debug)]
pub struct BicubicScorer {
    pub scale: usize,
}

impl DifficultyScorer for BicubicScorer {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn restore(&self, lr: &[&Image]) -> Result<Vec<Image>> {
        lr.iter()
            .map(|t| bicubic_resize(t, t.height() * self.scale, t.width() * self.scale))
            .collect()
    }
}

/// A trained SR branch used as the reference.
#[derive(Clone, Debug)]
pub struct BranchScorer {
    pub branch: Branch,
    pub label: String,
}

impl DifficultyScorer for BranchScorer {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn restore(&self, lr: &[&Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(lr.len());
        for chunk in lr.chunks(64) {
            let y = self.branch.network.infer(&self.branch.params, &Image::batch(chunk)?)?;
            for n in 0..chunk.len() {
                out.push(Image::from_batch(&y, n)?);
            }
        }
        Ok(out)
    }
}

pub fn score_difficulty(samples: &mut [TileSample], scorer: &dyn DifficultyScorer, channels: PsnrChannels) -> Result<()> {
    for chunk in samples.chunks_mut(64) {
        let lr: Vec<&Image> = chunk.iter().map(|s| &s.lr).collect();
        let restored = scorer.restore(&lr)?;
        if restored.len() != chunk.len() {
            return Err(Error::shape("score_difficulty", "scorer returned a different tile count".to_string()));
        }
        for (s, r) in chunk.iter_mut().zip(&restored) {
            s.difficulty_psnr = Some(psnr_with(r, &s.hr, channels)?);
        }
    }
    Ok(())
}

/// Sorts by PSNR (descending, ties by index) and cuts into `m` consecutive
/// groups whose sizes differ by at most one, extra samples going to the
/// easiest classes. Label 0 is the easiest. Returns the class sizes.
pub fn partition_classes(samples: &mut [TileSample], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    let scores = samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.difficulty_psnr.ok_or(Error::Unscored(i)))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (base, rem) = (samples.len() / m, samples.len() % m);
    let sizes: Vec<usize> = (0..m).map(|k| base + usize::from(k < rem)).collect();
    let mut it = order.into_iter();
    for (k, &size) in sizes.iter().enumerate() {
        for i in it.by_ref().take(size) {
            samples[i].class_label = Some(k);
        }
    }
    Ok(sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_trimmed_and_downsampled() {
        let img = Image::filled(128, 128, 1, 0.5).unwrap();
        let p = prepare_pairs(&[img.clone()], &[1.0], 4).unwrap();
        assert_eq!(p[0].hr.dims(), (128, 128));
        assert_eq!(p[0].lr.dims(), (32, 32));
        let odd = Image::filled(101, 90, 1, 0.5).unwrap();
        let ps = prepare_pairs(&[odd], &[0.6, 0.7, 0.8, 0.9], 4).unwrap();
        assert_eq!(ps.len(), 4);
        for p in &ps {
            assert_eq!(p.hr.height() % 4, 0);
            assert_eq!(p.hr.width() % 4, 0);
            assert_eq!(p.lr.dims(), (p.hr.height() / 4, p.hr.width() / 4));
        }
        assert!(prepare_pairs(&[img], &[1.5], 4).is_err());
    }

    #[test]
    fn tile_counts_and_alignment() {
        let img = Image::filled(256, 256, 1, 0.3).unwrap();
        let pairs = prepare_pairs(&[img], &[1.0], 4).unwrap();
        let s32 = extract_tiles(&pairs, 32, 32).unwrap();
        assert_eq!(s32.len(), 4);
        let s16 = extract_tiles(&pairs, 32, 16).unwrap();
        assert!(s16.len() >= s32.len());
        for s in &s32 {
            assert_eq!(s.hr.dims(), (128, 128));
            assert!(s.hr.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn partition_remainder_goes_to_easy_classes() {
        let mk = |psnrs: &[f64]| -> Vec<TileSample> {
            let t = Image::filled(1, 1, 1, 0.0).unwrap();
            psnrs
                .iter()
                .map(|&p| TileSample {
                    lr: t.clone(),
                    hr: t.clone(),
                    pair: 0,
                    origin: (0, 0),
                    difficulty_psnr: Some(p),
                    class_label: None,
                })
                .collect()
        };
        let mut nine = mk(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(partition_classes(&mut nine, 3).unwrap(), vec![3, 3, 3]);
        assert_eq!(nine[8].class_label, Some(0));
        assert_eq!(nine[0].class_label, Some(2));
        let mut ten = mk(&[5.0; 10]);
        assert_eq!(partition_classes(&mut ten, 3).unwrap(), vec![4, 3, 3]);
        // ties keep index order
        assert_eq!(ten[0].class_label, Some(0));
        assert_eq!(ten[9].class_label, Some(2));
        let mut unscored = mk(&[1.0, 2.0]);
        unscored[1].difficulty_psnr = None;
        assert!(matches!(partition_classes(&mut unscored, 2), Err(Error::Unscored(1))));
    }

    #[test]
    fn identical_pairs_score_at_the_cap() {
        let img = Image::filled(128, 128, 1, 0.5).unwrap();
        let pairs = prepare_pairs(&[img], &[1.0], 4).unwrap();
        let mut s = extract_tiles(&pairs, 32, 32).unwrap();
        score_difficulty(&mut s, &BicubicScorer { scale: 4 }, PsnrChannels::All).unwrap();
        assert!(s.iter().all(|t| t.difficulty_psnr == Some(crate::imaging::PSNR_CAP)));
    }

    #[test]
    fn flat_tiles_are_easier_than_texture() {
        let corpus = synth_corpus(&SynthSpec {
            n_flat: 4,
            n_texture: 4,
            n_edge: 0,
            size: 128,
            seed: 3,
            channels: 1,
            grain: 0.0,
        })
        .unwrap();
        let images: Vec<Image> = corpus.iter().map(|s| s.image.clone()).collect();
        let pairs = prepare_pairs(&images, &[1.0], 4).unwrap();
        let mut s = extract_tiles(&pairs, 32, 32).unwrap();
        score_difficulty(&mut s, &BicubicScorer { scale: 4 }, PsnrChannels::All).unwrap();
        let mean = |flat: bool| {
            let v: Vec<f64> = s
                .iter()
                .filter(|t| (corpus[t.pair].population == Population::Flat) == flat)
                .map(|t| t.difficulty_psnr.unwrap())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false) + 3.0);
    }
}
