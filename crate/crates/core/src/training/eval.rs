use serde::{Deserialize, Serialize};

use crate::datasets::Population;
use crate::error::{Error, Result};
use crate::imaging::{psnr_with, Image, PsnrChannels};
use crate::models::{ClassModule, SrContainer};
use crate::router::{super_resolve, RouteOptions};

/// A full-size validation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ValImage {
    pub lr: Image,
    pub hr: Image,
    pub population: Option<Population>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub psnr: f64,
    pub avg_flops: f64,
    pub histogram: Vec<f64>,
    pub tiles: usize,
    pub population: Option<Population>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean of the per-image PSNRs.
    pub psnr: f64,
    /// Mean over all tiles, classifier cost included.
    pub avg_flops: f64,
    pub histogram: Vec<f64>,
    /// Mean of each tile's largest class probability; absent under forced routing.
    pub mean_max_prob: Option<f64>,
    pub tiles: usize,
    pub per_image: Vec<ImageEval>,
}

impl Evaluation {
    /// Fraction of the tiles of `population` images routed to branch `k`.
    pub fn population_share(&self, population: Population, k: usize) -> Option<f64> {
        let (mut hit, mut total) = (0.0, 0usize);
        for im in self.per_image.iter().filter(|im| im.population == Some(population)) {
            hit += im.histogram[k] * im.tiles as f64;
            total += im.tiles;
        }
        (total > 0).then(|| hit / total as f64)
    }
}

/// Hard-routed super-resolution of every validation image.
pub fn evaluate(
    class_module: &ClassModule,
    container: &SrContainer,
    images: &[ValImage],
    opts: &RouteOptions,
    channels: PsnrChannels,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let m = container.len();
    let mut per_image = Vec::with_capacity(images.len());
    let mut counts = vec![0usize; m];
    let (mut flops_sum, mut prob_sum, mut tiles) = (0.0, 0.0, 0usize);
    let mut have_probs = true;
    for v in images {
        let (sr, report) = super_resolve(&v.lr, class_module, container, opts)?;
        for t in &report.per_tile {
            counts[t.class_index] += 1;
            match t.probs.iter().copied().reduce(f32::max) {
                Some(p) => prob_sum += p as f64,
                None => have_probs = false,
            }
        }
        tiles += report.tiles_total;
        flops_sum += report.avg_flops * report.tiles_total as f64;
        per_image.push(ImageEval {
            psnr: psnr_with(&sr, &v.hr, channels)?,
            avg_flops: report.avg_flops,
            histogram: report.histogram,
            tiles: report.tiles_total,
            population: v.population,
        });
    }
    Ok(Evaluation {
        psnr: per_image.iter().map(|e| e.psnr).sum::<f64>() / per_image.len() as f64,
        avg_flops: flops_sum / tiles as f64,
        histogram: counts.iter().map(|&c| c as f64 / tiles as f64).collect(),
        mean_max_prob: have_probs.then(|| prob_sum / tiles as f64),
        tiles,
        per_image,
    })
}
