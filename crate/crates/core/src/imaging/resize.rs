use super::Image;
use crate::error::{Error, Result};

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four clamped source indices and weights per output coordinate.
fn taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let i = base as i64 - 1 + k as i64;
                idx[k] = i.clamp(0, input as i64 - 1) as usize;
                w[k] = cubic(t + 1.0 - k as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Catmull-Rom bicubic resampling with clamped edges and no antialiasing.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("zero-size resize target {out_h}x{out_w}")));
    }
    let (h, w) = img.dims();
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * img.channels());
    let mut tmp = vec![0.0f64; out_h * w];
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for (oy, (idx, wt)) in rows.iter().enumerate() {
            for x in 0..w {
                tmp[oy * w + x] = (0..4).map(|k| wt[k] * plane[idx[k] * w + x] as f64).sum();
            }
        }
        for oy in 0..out_h {
            let row = &tmp[oy * w..(oy + 1) * w];
            for (idx, wt) in &cols {
                let v: f64 = (0..4).map(|k| wt[k] * row[idx[k]]).sum();
                out.push(v as f32);
            }
        }
    }
    Image::clamped(out_h, out_w, img.channels(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..50 {
            let t = i as f64 / 50.0;
            let s: f64 = (0..4).map(|k| cubic(t + 1.0 - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(13, 17, 3, 0.3).unwrap();
        for (h, w) in [(4, 5), (13, 17), (40, 9)] {
            let r = bicubic_resize(&img, h, w).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn identity_at_scale_one() {
        let img = Image::from_fn(9, 11, 1, |_, y, x| ((y * 37 + x * 11) % 19) as f32 / 18.0).unwrap();
        assert_eq!(bicubic_resize(&img, 9, 11).unwrap(), img);
    }

    #[test]
    fn ramp_is_exact_in_interior() {
        let w = 64;
        let img = Image::from_fn(8, w, 1, |_, _, x| x as f32 / (w - 1) as f32).unwrap();
        let r = bicubic_resize(&img, 2, w / 4).unwrap();
        // output x samples input coordinate 4x + 1.5
        for x in 1..w / 4 - 1 {
            let expected = (4.0 * x as f64 + 1.5) / (w - 1) as f64;
            assert!((r.get(0, 0, x) as f64 - expected).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn rejects_zero_size() {
        let img = Image::filled(4, 4, 1, 0.0).unwrap();
        assert!(bicubic_resize(&img, 0, 4).is_err());
    }
}
