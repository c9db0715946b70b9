use super::RoutingReport;
use crate::error::{Error, Result};
use crate::imaging::Image;

const SIMPLE: [f32; 3] = [0.56, 0.93, 0.56];
const HARD: [f32; 3] = [1.0, 0.0, 0.0];
const ALPHA: f32 = 0.45;

/// Tint for class `k` of `m`: light green for the simplest, red for the
/// hardest, linear in between.
pub fn class_color(k: usize, m: usize) -> [f32; 3] {
    let t = if m > 1 { k as f32 / (m - 1) as f32 } else { 0.0 };
    [0, 1, 2].map(|c| SIMPLE[c] + t * (HARD[c] - SIMPLE[c]))
}

/// RGB copy of `sr` with each tile's SR region tinted by its class. Where
/// tiles overlap, the earlier tile in grid order wins.
pub fn class_map_overlay(report: &RoutingReport, sr: &Image, scale: usize) -> Result<Image> {
    let m = report.histogram.len();
    let (h, w) = sr.dims();
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let tile = match report.per_tile.first() {
        Some(_) => infer_tile(report, h, w, scale)?,
        None => return Err(Error::InvalidArgument("empty routing report".into())),
    };
    for (i, t) in report.per_tile.iter().enumerate().rev() {
        let (r, c) = (t.origin.0 * scale, t.origin.1 * scale);
        if r + tile > h || c + tile > w {
            return Err(Error::shape("overlay", format!("tile at {:?} outside {h}x{w}", t.origin)));
        }
        for y in r..r + tile {
            owner[y * w + c..y * w + c + tile].fill(Some(i));
        }
    }
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        let base: [f32; 3] = if sr.channels() == 1 {
            [sr.data()[p]; 3]
        } else {
            [0, 1, 2].map(|c| sr.data()[c * plane + p])
        };
        let tint = owner[p].map(|i| class_color(report.per_tile[i].class_index, m));
        for c in 0..3 {
            data[c * plane + p] = match tint {
                Some(col) => (1.0 - ALPHA) * base[c] + ALPHA * col[c],
                None => base[c],
            };
        }
    }
    Image::clamped(h, w, 3, data)
}

/// SR tile size implied by the report: the grid's tiles are square and the
/// last tile on each axis touches the image edge.
fn infer_tile(report: &RoutingReport, h: usize, w: usize, scale: usize) -> Result<usize> {
    let max_r = report.per_tile.iter().map(|t| t.origin.0).max().unwrap_or(0) * scale;
    let max_c = report.per_tile.iter().map(|t| t.origin.1).max().unwrap_or(0) * scale;
    if max_r >= h || max_c >= w || h - max_r != w - max_c {
        return Err(Error::shape("overlay", format!("report grid does not match a {h}x{w} image")));
    }
    Ok(h - max_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::TileRoute;

    fn report(origins: &[(usize, usize)], classes: &[usize], m: usize) -> RoutingReport {
        let per_tile = origins
            .iter()
            .zip(classes)
            .map(|(&origin, &class_index)| TileRoute {
                origin,
                class_index,
                branch_flops: 1,
                probs: Vec::new(),
            })
            .collect();
        RoutingReport::new(per_tile, m, 0)
    }

    #[test]
    fn class_zero_everywhere_is_uniformly_green() {
        let sr = Image::filled(128, 128, 1, 0.5).unwrap();
        let r = report(&[(0, 0)], &[0], 3);
        let o = class_map_overlay(&r, &sr, 4).unwrap();
        assert_eq!(o.dims(), (128, 128));
        assert_eq!(o.channels(), 3);
        let g = o.get(1, 0, 0);
        assert!(o.plane(1).iter().all(|v| *v == g));
        assert!(g > o.get(0, 0, 0));
    }

    #[test]
    fn hard_tile_at_origin_is_red_over_its_region() {
        let sr = Image::filled(240, 240, 1, 0.5).unwrap();
        let origins = [(0, 0), (0, 28), (28, 0), (28, 28)];
        let r = report(&origins, &[2, 0, 0, 0], 3);
        let o = class_map_overlay(&r, &sr, 4).unwrap();
        let red = |y, x| o.get(0, y, x) > 0.6 && o.get(1, y, x) < 0.4;
        assert!(red(0, 0) && red(127, 127));
        assert!(!red(128, 128) && !red(0, 239));
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let sr = Image::filled(100, 128, 1, 0.5).unwrap();
        assert!(class_map_overlay(&report(&[(0, 0)], &[0], 2), &sr, 4).is_err());
    }
}
