use classsr::imaging::{decompose, psnr, recombine, Image, TileGrid};
use classsr::losses::{average_loss, class_loss, BalanceMode};
use classsr::router::route;
use classsr::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn image_strategy(max: usize) -> impl Strategy<Value = Image> {
    (32..=max, 32..=max, any::<u64>()).prop_map(|(h, w, seed)| {
        Image::from_fn(h, w, 1, |_, y, x| {
            let v = (y as u64 * 7919 + x as u64 * 104_729 + seed) % 1009;
            v as f32 / 1008.0
        })
        .unwrap()
    })
}

fn distribution(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, m).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_pixel_is_covered(h in 32usize..=257, w in 32usize..=257) {
        let grid = TileGrid::new(h, w, 32, 28).unwrap();
        let cov = grid.coverage();
        prop_assert_eq!(cov.len(), h * w);
        prop_assert!(cov.iter().all(|&c| c >= 1));
        for &(y, x) in &grid.origins {
            prop_assert!(y + 32 <= h && x + 32 <= w);
        }
    }

    #[test]
    fn identity_tiles_recombine_to_input(img in image_strategy(257)) {
        let (tiles, grid) = decompose(&img, 32, 28).unwrap();
        let back = recombine(&tiles, &grid, 1).unwrap();
        prop_assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn psnr_is_symmetric(a in image_strategy(48), shift in 0.0f32..0.2) {
        let b = Image::from_fn(a.height(), a.width(), 1, |c, y, x| a.get(c, y, x) + shift).unwrap();
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn class_loss_stays_in_range(m in 2usize..=5, rows in 1usize..=6, seed in any::<u64>()) {
        let probs = rows_of(m, rows, seed);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![rows, m], probs).unwrap()).unwrap();
        let lc = class_loss(&mut tape, p).unwrap();
        let v = tape.value(lc).item().unwrap();
        prop_assert!(v <= 1e-12 && v >= -(m as f64 - 1.0) - 1e-9, "{}", v);
    }

    #[test]
    fn average_loss_stays_in_range(m in 2usize..=5, k in 1usize..=4, seed in any::<u64>()) {
        let b = m * k;
        let probs = rows_of(m, b, seed);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![b, m], probs).unwrap()).unwrap();
        let la = average_loss(&mut tape, p, BalanceMode::Strict).unwrap();
        let v = tape.value(la).item().unwrap();
        let bound = 2.0 * b as f64 * (m as f64 - 1.0) / m as f64;
        prop_assert!(v >= -1e-12 && v <= bound + 1e-9, "{} > {}", v, bound);
    }

    #[test]
    fn routing_ignores_softmax_temperature(p in distribution(4), t in 0.2f64..5.0) {
        let logits: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let z: f64 = logits.iter().map(|l| (l / t).exp()).sum();
        let sharpened: Vec<f32> = logits.iter().map(|l| ((l / t).exp() / z) as f32).collect();
        let plain: Vec<f32> = p.iter().map(|v| *v as f32).collect();
        let (a, b) = (route(&plain).unwrap(), route(&sharpened).unwrap());
        // f32 rounding can only flip near-ties
        let top: Vec<f64> = {
            let mut s = p.clone();
            s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            s
        };
        prop_assume!(top[0] - top[1] > 1e-5);
        prop_assert_eq!(a, b);
    }
}

fn rows_of(m: usize, rows: usize, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let raw: Vec<f64> = (0..m)
            .map(|i| ((seed.wrapping_mul(31).wrapping_add((r * m + i) as u64 * 2_654_435_761)) % 997) as f64 + 1.0)
            .collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}
