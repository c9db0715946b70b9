use serde::{Deserialize, Serialize};

use super::Image;

/// Lossless flips and rotations. Rotations are counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    Identity,
    Hflip,
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 5] = [
        Augment::Identity,
        Augment::Hflip,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
    ];
}

pub fn augment(img: &Image, op: Augment) -> Image {
    let (h, w) = img.dims();
    let (oh, ow) = match op {
        Augment::Rot90 | Augment::Rot270 => (w, h),
        _ => (h, w),
    };
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match op {
                    Augment::Identity => (y, x),
                    Augment::Hflip => (y, w - 1 - x),
                    Augment::Rot90 => (x, w - 1 - y),
                    Augment::Rot180 => (h - 1 - y, w - 1 - x),
                    Augment::Rot270 => (h - 1 - x, y),
                };
                data.push(img.get(c, sy, sx));
            }
        }
    }
    Image::new(oh, ow, img.channels(), data).expect("a permutation of valid pixels")
}
