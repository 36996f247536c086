use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::patch::ImageF32;

/// Shift-crop padding in pixels.
pub const PAD: usize = 4;

pub fn flip_horizontal(img: &ImageF32) -> ImageF32 {
    let mut out = img.clone();
    for c in 0..img.c {
        for y in 0..img.h {
            for x in 0..img.w {
                out.set(c, y, x, img.at(c, y, img.w - 1 - x));
            }
        }
    }
    out
}

/// Crop an HxW window out of the zero-padded image with the given top-left
/// offset in [0, 2*PAD]. Offset (PAD, PAD) is the identity.
pub fn shift_crop(img: &ImageF32, dy: usize, dx: usize) -> ImageF32 {
    debug_assert!(dy <= 2 * PAD && dx <= 2 * PAD);
    let mut out = ImageF32::zeros(img.c, img.h, img.w);
    for c in 0..img.c {
        for y in 0..img.h {
            let sy = y as isize + dy as isize - PAD as isize;
            if sy < 0 || sy >= img.h as isize {
                continue;
            }
            for x in 0..img.w {
                let sx = x as isize + dx as isize - PAD as isize;
                if sx < 0 || sx >= img.w as isize {
                    continue;
                }
                out.set(c, y, x, img.at(c, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Deterministic augmentation core, exposed for tests.
pub fn augment_with(img: &ImageF32, flip: bool, dy: usize, dx: usize) -> ImageF32 {
    let flipped = if flip { flip_horizontal(img) } else { img.clone() };
    shift_crop(&flipped, dy, dx)
}

/// Train-time augmentation: horizontal flip with p = 0.5, then a random
/// shift-crop with `PAD`-pixel zero padding.
pub fn augment(img: &ImageF32, rng: &mut ChaCha8Rng) -> ImageF32 {
    let flip = rng.gen_bool(0.5);
    let dy = rng.gen_range(0..=2 * PAD);
    let dx = rng.gen_range(0..=2 * PAD);
    augment_with(img, flip, dy, dx)
}
