//! Test-time pipeline: decompose, classify, route each tile through one
//! branch, recombine, and account FLOPs.

mod overlay;

pub use overlay::class_map_overlay;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{decompose, recombine, Image};
use crate::losses::validate_probs;
use crate::models::{ClassModule, SrContainer};
use crate::tensor::Tensor;

/// Argmax with ties resolved toward the lower (cheaper) index.
pub fn route(probs: &[f32]) -> Result<usize> {
    let t = Tensor::new(vec![1, probs.len()], probs.to_vec())?;
    validate_probs(&t)?;
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// How tiles pick their branch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    #[default]
    Argmax,
    /// Every tile through branch `k` (0-based). The classifier is skipped.
    Force(usize),
    /// One label per tile in grid order. The classifier is skipped.
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteOptions {
    pub tile: usize,
    pub stride: usize,
    /// Tiles per forward pass.
    pub batch: usize,
    pub routing: Routing,
}

impl Default for RouteOptions {
    fn default() -> Self {
        RouteOptions {
            tile: 32,
            stride: 28,
            batch: 64,
            routing: Routing::Argmax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRoute {
    pub origin: (usize, usize),
    pub class_index: usize,
    pub branch_flops: u64,
    /// Empty when routing was forced.
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub per_tile: Vec<TileRoute>,
    pub histogram: Vec<f64>,
    /// Mean branch cost per tile plus the classifier cost.
    pub avg_flops: f64,
    pub class_module_flops: u64,
    pub psnr: Option<f64>,
    pub tiles_total: usize,
}

impl RoutingReport {
    fn new(per_tile: Vec<TileRoute>, classes: usize, class_module_flops: u64) -> Self {
        let n = per_tile.len();
        let mut counts = vec![0usize; classes];
        for t in &per_tile {
            counts[t.class_index] += 1;
        }
        let histogram = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let branch_mean = per_tile.iter().map(|t| t.branch_flops as f64).sum::<f64>() / n as f64;
        RoutingReport {
            tiles_total: n,
            histogram,
            avg_flops: branch_mean + class_module_flops as f64,
            class_module_flops,
            psnr: None,
            per_tile,
        }
    }

    /// Histogram as percentages with one decimal that add up to exactly 100.0.
    pub fn percentages(&self) -> Vec<f64> {
        let counts: Vec<usize> = {
            let mut c = vec![0; self.histogram.len()];
            self.per_tile.iter().for_each(|t| c[t.class_index] += 1);
            c
        };
        round_to_total(&counts, 1000).into_iter().map(|t| t as f64 / 10.0).collect()
    }
}

/// Largest-remainder apportionment of `total` units proportional to `counts`.
fn round_to_total(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let mut units: Vec<usize> = counts.iter().map(|c| c * total / n).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((counts[i] * total) % n));
    let missing = total - units.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        units[i] += 1;
    }
    units
}

/// Splits `img` into tiles, routes each through exactly one branch and
/// averages the overlapping outputs back together.
pub fn super_resolve(
    img: &Image,
    class_module: &ClassModule,
    container: &SrContainer,
    opts: &RouteOptions,
) -> Result<(Image, RoutingReport)> {
    if opts.batch == 0 {
        return Err(Error::InvalidArgument("routing batch must be positive".into()));
    }
    if class_module.classes() != container.len() {
        return Err(Error::InvalidArgument(format!(
            "class module has {} classes for {} branches",
            class_module.classes(),
            container.len()
        )));
    }
    let (tiles, grid) = decompose(img, opts.tile, opts.stride)?;
    let tile_shape = [img.channels(), opts.tile, opts.tile];
    let branch_flops = container.branch_flops(&tile_shape)?;
    let m = container.len();

    let (labels, probs, class_flops) = match &opts.routing {
        Routing::Argmax => {
            let mut labels = Vec::with_capacity(tiles.len());
            let mut probs = Vec::with_capacity(tiles.len());
            for chunk in tiles.chunks(opts.batch) {
                let refs: Vec<&Image> = chunk.iter().collect();
                let p = class_module.probabilities(&Image::batch(&refs)?)?;
                for row in p.data().chunks(m) {
                    labels.push(route(row)?);
                    probs.push(row.to_vec());
                }
            }
            (labels, probs, class_module.flops(&tile_shape)?)
        }
        Routing::Force(k) => {
            container.branch(*k)?;
            (vec![*k; tiles.len()], vec![Vec::new(); tiles.len()], 0)
        }
        Routing::Labels(ls) => {
            if ls.len() != tiles.len() {
                return Err(Error::shape(
                    "super_resolve",
                    format!("{} labels for {} tiles", ls.len(), tiles.len()),
                ));
            }
            if let Some(&bad) = ls.iter().find(|&&l| l >= m) {
                return Err(Error::IndexOutOfRange { index: bad, len: m });
            }
            (ls.clone(), vec![Vec::new(); tiles.len()], 0)
        }
    };

    let mut outputs: Vec<Option<Image>> = vec![None; tiles.len()];
    for j in 0..m {
        let members: Vec<usize> = (0..tiles.len()).filter(|&i| labels[i] == j).collect();
        for chunk in members.chunks(opts.batch) {
            let refs: Vec<&Image> = chunk.iter().map(|&i| &tiles[i]).collect();
            let out = container.forward_branch(j, &Image::batch(&refs)?)?;
            for (n, &i) in chunk.iter().enumerate() {
                outputs[i] = Some(Image::from_batch(&out, n)?);
            }
        }
    }
    let outputs: Vec<Image> = outputs.into_iter().map(|o| o.expect("every tile routed")).collect();
    let sr = recombine(&outputs, &grid, container.scale())?;

    let per_tile = grid
        .origins
        .iter()
        .zip(labels.iter().zip(probs))
        .map(|(&origin, (&class_index, probs))| TileRoute {
            origin,
            class_index,
            branch_flops: branch_flops[class_index],
            probs,
        })
        .collect();
    Ok((sr, RoutingReport::new(per_tile, m, class_flops)))
}

/// Per-tile costs used to turn a histogram into average FLOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub branches: Vec<f64>,
    pub class_module: f64,
}

impl CostTable {
    pub fn from_models(class_module: &ClassModule, container: &SrContainer, tile: usize) -> Result<Self> {
        let shape = [container.channels(), tile, tile];
        Ok(CostTable {
            branches: container
                .branch_flops(&shape)?
                .into_iter()
                .map(|f| f as f64)
                .collect(),
            class_module: class_module.flops(&shape)? as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub avg_flops: f64,
    pub ratio_vs_base: f64,
}

/// `avg = sum_j hist_j * cost_j + class cost`, `ratio = avg / cost_M`.
pub fn flops_summary(histogram: &[f64], costs: &CostTable) -> Result<FlopsSummary> {
    if histogram.len() != costs.branches.len() || histogram.is_empty() {
        return Err(Error::shape(
            "flops_summary",
            format!("{} histogram bins for {} branch costs", histogram.len(), costs.branches.len()),
        ));
    }
    let avg_flops = histogram
        .iter()
        .zip(&costs.branches)
        .map(|(h, c)| h * c)
        .sum::<f64>()
        + costs.class_module;
    let base = *costs.branches.last().expect("nonempty");
    Ok(FlopsSummary {
        avg_flops,
        ratio_vs_base: avg_flops / base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassConfig, FsrcnnConfig};

    fn model(ws: &[usize]) -> (ClassModule, SrContainer) {
        let cfgs: Vec<FsrcnnConfig> = ws.iter().map(|&d| FsrcnnConfig::with_width(d)).collect();
        (
            ClassModule::new(ClassConfig::with_classes(ws.len()), 3).unwrap(),
            SrContainer::new(&cfgs, 4).unwrap(),
        )
    }

    #[test]
    fn route_examples() {
        assert_eq!(route(&[0.9, 0.05, 0.05]).unwrap(), 0);
        assert_eq!(route(&[0.5, 0.5, 0.0]).unwrap(), 0);
        assert_eq!(route(&[0.0, 0.0, 1.0]).unwrap(), 2);
        assert!(route(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn sixty_pixel_input_gives_four_tiles() {
        let (cm, c) = model(&[16, 36, 56]);
        let img = Image::from_fn(60, 60, 1, |_, y, x| ((y + 2 * x) % 13) as f32 / 12.0).unwrap();
        let (sr, report) = super_resolve(&img, &cm, &c, &RouteOptions::default()).unwrap();
        assert_eq!(sr.dims(), (240, 240));
        assert_eq!(report.tiles_total, 4);
        assert!((report.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // exactly one branch pass per tile
        assert_eq!(c.passes().snapshot().iter().sum::<u64>(), 4);
    }

    #[test]
    fn forced_routing_uses_one_branch() {
        let (cm, c) = model(&[16, 36, 56]);
        let img = Image::filled(64, 64, 1, 0.4).unwrap();
        let opts = RouteOptions {
            routing: Routing::Force(2),
            ..RouteOptions::default()
        };
        let (_, report) = super_resolve(&img, &cm, &c, &opts).unwrap();
        assert_eq!(report.histogram, vec![0.0, 0.0, 1.0]);
        assert_eq!(report.class_module_flops, 0);
        assert_eq!(c.passes().snapshot(), vec![0, 0, 9]);
    }

    #[test]
    fn identical_branches_make_routing_irrelevant() {
        let cfgs = vec![FsrcnnConfig::with_width(16); 3];
        let base = SrContainer::new(&cfgs, 0).unwrap();
        let shared = base.branch(0).unwrap().clone();
        let c = SrContainer::from_branches(vec![shared.clone(), shared.clone(), shared]).unwrap();
        let cm = ClassModule::new(ClassConfig::default(), 1).unwrap();
        let img = Image::from_fn(64, 60, 1, |_, y, x| ((y * x) % 7) as f32 / 6.0).unwrap();
        let (routed, _) = super_resolve(&img, &cm, &c, &RouteOptions::default()).unwrap();
        let forced = RouteOptions {
            routing: Routing::Force(0),
            ..RouteOptions::default()
        };
        let (single, _) = super_resolve(&img, &cm, &c, &forced).unwrap();
        assert_eq!(routed, single);
    }

    #[test]
    fn label_override_is_validated() {
        let (cm, c) = model(&[16, 56]);
        let img = Image::filled(32, 32, 1, 0.4).unwrap();
        let opts = |ls: Vec<usize>| RouteOptions {
            routing: Routing::Labels(ls),
            ..RouteOptions::default()
        };
        assert!(super_resolve(&img, &cm, &c, &opts(vec![1])).is_ok());
        assert!(super_resolve(&img, &cm, &c, &opts(vec![2])).is_err());
        assert!(super_resolve(&img, &cm, &c, &opts(vec![0, 1])).is_err());
    }

    #[test]
    fn paper_cost_table_ratio() {
        let costs = CostTable {
            branches: vec![141e6, 304e6, 468e6],
            class_module: 8e6,
        };
        let s = flops_summary(&[0.61, 0.23, 0.16], &costs).unwrap();
        assert!((s.avg_flops - 238.81e6).abs() < 1e3);
        assert!((s.ratio_vs_base - 0.510).abs() < 0.005);
        let worst = flops_summary(&[0.0, 0.0, 1.0], &costs).unwrap();
        assert!((worst.ratio_vs_base - (1.0 + 8.0 / 468.0)).abs() < 1e-12);
        let best = flops_summary(&[1.0, 0.0, 0.0], &costs).unwrap();
        assert!((best.ratio_vs_base - 149.0 / 468.0).abs() < 1e-12);
    }

    #[test]
    fn percentages_sum_to_one_hundred() {
        assert_eq!(round_to_total(&[1, 1, 1], 1000), vec![334, 333, 333]);
        assert_eq!(round_to_total(&[2, 0, 5], 1000).iter().sum::<usize>(), 1000);
    }
}
