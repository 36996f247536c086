use serde::{Deserialize, Serialize};

use crate::error::{GfError, Result};

/// Square patch geometry; glance and patch share this size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub h: usize,
    pub w: usize,
}

impl PatchSpec {
    pub fn square(size: usize) -> Self {
        PatchSpec { h: size, w: size }
    }

    pub fn validate(&self, img_h: usize, img_w: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(GfError::config("patch size must be positive".to_string()));
        }
        if self.h != self.w {
            return Err(GfError::config(format!(
                "patch must be square, got {}x{}",
                self.h, self.w
            )));
        }
        if self.h > img_h || self.w > img_w {
            return Err(GfError::config(format!(
                "patch {}x{} exceeds image {}x{}",
                self.h, self.w, img_h, img_w
            )));
        }
        Ok(())
    }
}

/// Normalized center of the next patch, both coordinates in [0,1].
/// `y` runs down rows, `x` across columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub y: f64,
    pub x: f64,
}

impl Location {
    pub fn new(y: f64, x: f64) -> Self {
        Location {
            y: y.clamp(0.0, 1.0),
            x: x.clamp(0.0, 1.0),
        }
    }
}

/// A C x H x W float image, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageF32 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }
}

/// Area-averaging downsample to `spec`-sized output. Exact block mean for
/// integer ratios; fractional source boxes are overlap-weighted otherwise.
pub fn resize_glance(img: &ImageF32, spec: PatchSpec) -> Result<ImageF32> {
    if spec.h > img.h || spec.w > img.w {
        return Err(GfError::config(format!(
            "resize_glance cannot upsample: {}x{} -> {}x{}",
            img.h, img.w, spec.h, spec.w
        )));
    }
    let (oh, ow) = (spec.h, spec.w);
    let ry = img.h as f64 / oh as f64;
    let rx = img.w as f64 / ow as f64;
    let mut out = ImageF32::zeros(img.c, oh, ow);
    for c in 0..img.c {
        for oy in 0..oh {
            let y0 = oy as f64 * ry;
            let y1 = (oy + 1) as f64 * ry;
            for ox in 0..ow {
                let x0 = ox as f64 * rx;
                let x1 = (ox + 1) as f64 * rx;
                let mut acc = 0.0f64;
                let mut area = 0.0f64;
                let mut sy = y0.floor() as usize;
                while (sy as f64) < y1 && sy < img.h {
                    let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                    if wy > 0.0 {
                        let mut sx = x0.floor() as usize;
                        while (sx as f64) < x1 && sx < img.w {
                            let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                            if wx > 0.0 {
                                acc += img.at(c, sy, sx) as f64 * wy * wx;
                                area += wy * wx;
                            }
                            sx += 1;
                        }
                    }
                    sy += 1;
                }
                out.set(c, oy, ox, (acc / area) as f32);
            }
        }
    }
    Ok(out)
}

/// Top-left corner (row, col) of the patch window for a center location.
/// The center is clamped so the window always lies fully inside the image:
/// row0 = round(cy*H) - H'/2, then clamped to [0, H - H'].
pub fn patch_window(center: Location, spec: PatchSpec, img_h: usize, img_w: usize) -> (usize, usize) {
    let clamp_center = |c: f64, full: usize, patch: usize| -> f64 {
        let half = patch as f64 / (2.0 * full as f64);
        c.clamp(half, 1.0 - half)
    };
    let cy = clamp_center(center.y, img_h, spec.h);
    let cx = clamp_center(center.x, img_w, spec.w);
    let top = ((cy * img_h as f64).round() as isize - (spec.h / 2) as isize)
        .clamp(0, (img_h - spec.h) as isize) as usize;
    let left = ((cx * img_w as f64).round() as isize - (spec.w / 2) as isize)
        .clamp(0, (img_w - spec.w) as isize) as usize;
    (top, left)
}

/// Pure pixel copy of the H'xW' window centred (after clamping) at `center`.
pub fn crop_patch(img: &ImageF32, center: Location, spec: PatchSpec) -> ImageF32 {
    let (top, left) = patch_window(center, spec, img.h, img.w);
    let mut out = ImageF32::zeros(img.c, spec.h, spec.w);
    for c in 0..img.c {
        for y in 0..spec.h {
            for x in 0..spec.w {
                out.set(c, y, x, img.at(c, top + y, left + x));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageF32 {
        let mut rng = stream(seed, "img", 0);
        let data = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageF32 { c, h, w, data }
    }

    #[test]
    fn resize_two_by_two_to_scalar_is_mean() {
        let img = ImageF32 {
            c: 1,
            h: 2,
            w: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let out = resize_glance(&img, PatchSpec::square(1)).unwrap();
        assert_eq!(out.data, vec![2.5]);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = ImageF32 {
            c: 2,
            h: 9,
            w: 9,
            data: vec![0.37; 2 * 81],
        };
        let out = resize_glance(&img, PatchSpec::square(4)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn resize_matches_block_mean_oracle() {
        let img = random_image(3, 32, 32, 5);
        let out = resize_glance(&img, PatchSpec::square(16)).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let want = (img.at(c, 2 * y, 2 * x)
                        + img.at(c, 2 * y, 2 * x + 1)
                        + img.at(c, 2 * y + 1, 2 * x)
                        + img.at(c, 2 * y + 1, 2 * x + 1))
                        / 4.0;
                    assert!((out.at(c, y, x) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resize_upsample_is_config_error() {
        let img = random_image(1, 8, 8, 6);
        assert!(resize_glance(&img, PatchSpec::square(16)).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = random_image(2, 12, 12, 7);
        let out = resize_glance(&img, PatchSpec::square(12)).unwrap();
        for (a, b) in out.data.iter().zip(img.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn centered_window_at_half() {
        let (top, left) = patch_window(Location::new(0.5, 0.5), PatchSpec::square(16), 32, 32);
        assert_eq!((top, left), (8, 8));
    }

    #[test]
    fn corner_center_clamps_to_origin_window() {
        let (top, left) = patch_window(Location::new(0.0, 0.0), PatchSpec::square(16), 32, 32);
        assert_eq!((top, left), (0, 0));
        let (top, left) = patch_window(Location::new(1.0, 1.0), PatchSpec::square(16), 32, 32);
        assert_eq!((top, left), (16, 16));
    }

    #[test]
    fn crop_is_pure_index_copy() {
        let img = random_image(3, 32, 32, 8);
        let spec = PatchSpec::square(16);
        let center = Location::new(0.63, 0.21);
        let patch = crop_patch(&img, center, spec);
        let (top, left) = patch_window(center, spec, 32, 32);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(patch.at(c, y, x), img.at(c, top + y, left + x));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn crop_never_reads_out_of_bounds(cy in 0.0f64..=1.0, cx in 0.0f64..=1.0,
                                          size in 1usize..=32) {
            let img = random_image(1, 32, 32, 9);
            let spec = PatchSpec::square(size);
            let (top, left) = patch_window(Location::new(cy, cx), spec, 32, 32);
            prop_assert!(top + size <= 32);
            prop_assert!(left + size <= 32);
            // and the copy itself must not panic
            let patch = crop_patch(&img, Location::new(cy, cx), spec);
            prop_assert_eq!(patch.data.len(), size * size);
        }

        #[test]
        fn integer_ratio_resize_is_idempotent(side_pow in 1u32..=3) {
            let small = 4usize;
            let big = small * 2usize.pow(side_pow);
            let img = random_image(1, big, big, 10);
            let once = resize_glance(&img, PatchSpec::square(small)).unwrap();
            let twice = resize_glance(&once, PatchSpec::square(small)).unwrap();
            for (a, b) in once.data.iter().zip(twice.data.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
