use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Placement of square tiles over an image, in LR pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub origins: Vec<(usize, usize)>,
    pub tile: usize,
    pub stride: usize,
    pub image_dims: (usize, usize),
}

impl TileGrid {
    pub fn new(height: usize, width: usize, tile: usize, stride: usize) -> Result<Self> {
        if stride == 0 || stride > tile {
            return Err(Error::InvalidArgument(format!(
                "stride must be in 1..={tile}, got {stride}"
            )));
        }
        if height < tile || width < tile {
            return Err(Error::ImageTooSmall { height, width, tile });
        }
        let rows = axis_origins(height, tile, stride);
        let cols = axis_origins(width, tile, stride);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(TileGrid {
            origins,
            tile,
            stride,
            image_dims: (height, width),
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of tiles covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = self.image_dims;
        let mut count = vec![0; h * w];
        for &(r, c) in &self.origins {
            for y in r..r + self.tile {
                for x in c..c + self.tile {
                    count[y * w + x] += 1;
                }
            }
        }
        count
    }
}

/// `0, stride, 2*stride, ...` plus `dim - tile` when the regular origins
/// leave the trailing edge uncovered.
pub fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + tile <= dim).collect();
    if let Some(&last) = origins.last() {
        if last + tile < dim {
            origins.push(dim - tile);
        }
    }
    origins
}

pub fn decompose(img: &Image, tile: usize, stride: usize) -> Result<(Vec<Image>, TileGrid)> {
    let grid = TileGrid::new(img.height(), img.width(), tile, stride)?;
    let tiles = grid
        .origins
        .iter()
        .map(|&(r, c)| img.crop(r, c, tile, tile))
        .collect::<Result<_>>()?;
    Ok((tiles, grid))
}

/// Averages overlapping SR tiles back into a `(H*scale, W*scale)` image.
pub fn recombine(sr_tiles: &[Image], grid: &TileGrid, scale: usize) -> Result<Image> {
    if sr_tiles.len() != grid.len() {
        return Err(Error::shape(
            "recombine",
            format!("{} tiles for a grid of {}", sr_tiles.len(), grid.len()),
        ));
    }
    let channels = sr_tiles.first().map_or(1, Image::channels);
    let t = grid.tile * scale;
    let (h, w) = (grid.image_dims.0 * scale, grid.image_dims.1 * scale);
    let mut sum = vec![0.0f64; channels * h * w];
    let mut count = vec![0u32; h * w];
    for (tile, &(r, c)) in sr_tiles.iter().zip(&grid.origins) {
        if tile.dims() != (t, t) || tile.channels() != channels {
            return Err(Error::shape(
                "recombine",
                format!("tile {}x{}x{}, expected {t}x{t}x{channels}", tile.height(), tile.width(), tile.channels()),
            ));
        }
        let (r, c) = (r * scale, c * scale);
        for y in 0..t {
            for x in 0..t {
                count[(r + y) * w + c + x] += 1;
            }
        }
        for ch in 0..channels {
            let src = tile.plane(ch);
            let dst = &mut sum[ch * h * w..(ch + 1) * h * w];
            for y in 0..t {
                let row = &mut dst[(r + y) * w + c..(r + y) * w + c + t];
                for (d, s) in row.iter_mut().zip(&src[y * t..(y + 1) * t]) {
                    *d += *s as f64;
                }
            }
        }
    }
    if count.contains(&0) {
        return Err(Error::InvalidArgument("grid leaves pixels uncovered".into()));
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, s)| (s / count[i % (h * w)] as f64) as f32)
        .collect();
    Image::clamped(h, w, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_examples() {
        assert_eq!(axis_origins(32, 32, 28), vec![0]);
        assert_eq!(axis_origins(60, 32, 28), vec![0, 28]);
        assert_eq!(axis_origins(64, 32, 28), vec![0, 28, 32]);
        let img = Image::filled(64, 64, 1, 0.5).unwrap();
        let (tiles, grid) = decompose(&img, 32, 28).unwrap();
        assert_eq!(tiles.len(), 9);
        assert_eq!(grid.origins[..3], [(0, 0), (0, 28), (0, 32)]);
    }

    #[test]
    fn rejects_small_images_and_bad_strides() {
        let img = Image::filled(20, 40, 1, 0.5).unwrap();
        assert!(matches!(decompose(&img, 32, 28), Err(Error::ImageTooSmall { .. })));
        assert!(decompose(&img, 16, 0).is_err());
        assert!(decompose(&img, 16, 17).is_err());
    }

    #[test]
    fn overlap_is_averaged() {
        let grid = TileGrid::new(2, 3, 2, 1).unwrap();
        assert_eq!(grid.origins, vec![(0, 0), (0, 1)]);
        let a = Image::filled(2, 2, 1, 0.2).unwrap();
        let b = Image::filled(2, 2, 1, 0.6).unwrap();
        let out = recombine(&[a, b], &grid, 1).unwrap();
        for y in 0..2 {
            assert!((out.get(0, y, 0) - 0.2).abs() < 1e-7);
            assert!((out.get(0, y, 1) - 0.4).abs() < 1e-7);
            assert!((out.get(0, y, 2) - 0.6).abs() < 1e-7);
        }
    }

    #[test]
    fn recombine_checks_counts_and_sizes() {
        let grid = TileGrid::new(4, 4, 2, 2).unwrap();
        let t = Image::filled(2, 2, 1, 0.1).unwrap();
        assert!(recombine(&[t.clone()], &grid, 1).is_err());
        assert!(recombine(&vec![t; 4], &grid, 2).is_err());
    }

    #[test]
    fn grid_json_round_trip() {
        let grid = TileGrid::new(64, 60, 32, 28).unwrap();
        let back: TileGrid = serde_json::from_str(&serde_json::to_string(&grid).unwrap()).unwrap();
        assert_eq!(back, grid);
    }
}
