//! Dataset loading, the glance resize, patch cropping at policy-chosen
//! coordinates, and train-time augmentation.

mod augment;
mod patch;
pub mod synth;

pub use augment::{augment, augment_with, flip_horizontal, shift_crop, PAD};
pub use patch::{crop_patch, patch_window, resize_glance, ImageF32, Location, PatchSpec};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, GfError, Result};

const MAGIC: [u8; 4] = *b"GFDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Provenance and normalization record kept beside each dataset file.
/// The normalization statistics are always the train-split statistics,
/// whichever split the file holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub split: Split,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An immutable image-classification corpus: N images of identical
/// C x H x W geometry with one label each.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u16>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn from_parts(
        (c, h, w): (usize, usize, usize),
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u16>,
        manifest: Manifest,
    ) -> Result<Self> {
        let per_image = c * h * w;
        if per_image == 0 || images.len() % per_image != 0 {
            return Err(GfError::input(format!(
                "pixel payload of {} bytes is not a multiple of {}x{}x{}",
                images.len(),
                c,
                h,
                w
            )));
        }
        let n = images.len() / per_image;
        if labels.len() != n {
            return Err(GfError::input(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(GfError::Format {
                path: "<memory>".to_string(),
                kind: FormatError::LabelOutOfRange {
                    label: l as u32,
                    num_classes: num_classes as u32,
                    index: i,
                },
            });
        }
        Ok(Dataset {
            n,
            c,
            h,
            w,
            num_classes,
            images,
            labels,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let per = self.c * self.h * self.w;
        &self.images[i * per..(i + 1) * per]
    }

    /// Image i as floats in [0,1].
    pub fn image_f32(&self, i: usize) -> ImageF32 {
        let data = self
            .raw_image(i)
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        ImageF32 {
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Per-channel mean and standard deviation over every pixel, in [0,1]
    /// units. Computed on whichever split this is; callers record the train
    /// split's numbers into manifests.
    pub fn pixel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let per = self.h * self.w;
        let mut mean = vec![0.0f64; self.c];
        let mut sq = vec![0.0f64; self.c];
        for i in 0..self.n {
            let img = self.raw_image(i);
            for c in 0..self.c {
                for &b in &img[c * per..(c + 1) * per] {
                    let v = b as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.n * per) as f64;
        let mut std = vec![0.0f64; self.c];
        for c in 0..self.c {
            mean[c] /= count;
            std[c] = (sq[c] / count - mean[c] * mean[c]).max(1e-12).sqrt();
        }
        (mean, std)
    }
}

/// Subtract the train-split channel mean and divide by its std.
pub fn normalize(img: &ImageF32, mean: &[f64], std: &[f64]) -> ImageF32 {
    let mut out = img.clone();
    let per = img.h * img.w;
    for c in 0..img.c {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        for v in &mut out.data[c * per..(c + 1) * per] {
            *v = (*v - m) / s;
        }
    }
    out
}

// ── binary format ───────────────────────────────────────────────────────
//
// magic "GFDS" | version u32 | N u32 | C u32 | H u32 | W u32 | classes u32
// | N*C*H*W pixel bytes | labels (u8 each, or u16 LE each when classes > 256)
// all integers little-endian

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + ds.images.len() + ds.labels.len() * 2);
    buf.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        ds.n as u32,
        ds.c as u32,
        ds.h as u32,
        ds.w as u32,
        ds.num_classes as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ds.images);
    if ds.num_classes > 256 {
        for &l in &ds.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    } else {
        buf.extend(ds.labels.iter().map(|&l| l as u8));
    }
    fs::write(path, &buf)?;
    save_manifest(&ds.manifest, &manifest_path(path))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let pstr = path.display().to_string();
    let fail = |kind| GfError::Format {
        path: pstr.clone(),
        kind,
    };

    let need = |offset: usize, len: usize| -> Result<()> {
        if offset + len > bytes.len() {
            Err(GfError::Format {
                path: pstr.clone(),
                kind: FormatError::Truncated {
                    offset: bytes.len() as u64,
                    needed: (offset + len - bytes.len()) as u64,
                },
            })
        } else {
            Ok(())
        }
    };

    need(0, 28)?;
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != MAGIC {
        return Err(fail(FormatError::BadMagic {
            expected: MAGIC,
            found,
        }));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(fail(FormatError::Version(version)));
    }
    let (n, c, h, w, classes) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5) as usize,
    );
    let mut offset = 28usize;
    let pixels = n * c * h * w;
    need(offset, pixels)?;
    let images = bytes[offset..offset + pixels].to_vec();
    offset += pixels;

    let labels: Vec<u16> = if classes > 256 {
        need(offset, n * 2)?;
        (0..n)
            .map(|i| u16::from_le_bytes(bytes[offset + 2 * i..offset + 2 * i + 2].try_into().unwrap()))
            .collect()
    } else {
        need(offset, n)?;
        bytes[offset..offset + n].iter().map(|&b| b as u16).collect()
    };

    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= classes)
    {
        return Err(fail(FormatError::LabelOutOfRange {
            label: l as u32,
            num_classes: classes as u32,
            index: i,
        }));
    }

    let manifest = load_manifest(&manifest_path(path))?;
    Dataset::from_parts((c, h, w), classes, images, labels, manifest)
}

pub fn manifest_path(dataset_path: &Path) -> std::path::PathBuf {
    dataset_path.with_extension("manifest.txt")
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "format = gfds-manifest-v1");
    let _ = writeln!(s, "source = {}", m.source);
    let _ = writeln!(s, "split = {}", m.split.as_str());
    let _ = writeln!(s, "normalization = train-split");
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let _ = writeln!(s, "mean = {}", join(&m.mean));
    let _ = writeln!(s, "std = {}", join(&m.std));
    fs::write(path, s)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut source = None;
    let mut split = None;
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let parse_vec = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| GfError::Format {
                        path: pstr.clone(),
                        kind: FormatError::Field(format!("bad float in {key}: {t}")),
                    })
                })
                .collect()
        };
        match key {
            "source" => source = Some(value.to_string()),
            "split" => {
                split = Some(match value {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    other => {
                        return Err(GfError::Format {
                            path: pstr.clone(),
                            kind: FormatError::Field(format!("unknown split {other}")),
                        })
                    }
                })
            }
            "mean" => mean = Some(parse_vec(value)?),
            "std" => std = Some(parse_vec(value)?),
            _ => {}
        }
    }
    let missing = |what: &str| GfError::Format {
        path: pstr.clone(),
        kind: FormatError::Field(format!("missing {what}")),
    };
    Ok(Manifest {
        source: source.ok_or_else(|| missing("source"))?,
        split: split.ok_or_else(|| missing("split"))?,
        mean: mean.ok_or_else(|| missing("mean"))?,
        std: std.ok_or_else(|| missing("std"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset(n: usize) -> Dataset {
        let (c, h, w) = (2, 4, 4);
        let images: Vec<u8> = (0..n * c * h * w).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u16> = (0..n as u16).map(|i| i % 3).collect();
        Dataset::from_parts(
            (c, h, w),
            3,
            images,
            labels,
            Manifest {
                source: "unit-test".to_string(),
                split: Split::Train,
                mean: vec![0.5, 0.4],
                std: vec![0.2, 0.3],
            },
        )
        .unwrap()
    }

    #[test]
    fn well_formed_file_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.gfds");
        let ds = tiny_dataset(10);
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.n, 10);
        assert_eq!(back.raw_image(3), ds.raw_image(3));
        assert_eq!(back.label(7), ds.label(7));
        assert_eq!(back.manifest, ds.manifest);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.gfds");
        let ds = tiny_dataset(4);
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(40);
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path) {
            Err(GfError::Format {
                kind: FormatError::Truncated { offset, .. },
                ..
            }) => assert_eq!(offset, 40),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.gfds");
        let ds = tiny_dataset(2);
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(GfError::Format {
                kind: FormatError::BadMagic { .. },
                ..
            })
        ));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("label.gfds");
        let ds = tiny_dataset(4);
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 9; // labels live at the tail; 9 >= 3 classes
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(GfError::Format {
                kind: FormatError::LabelOutOfRange { label: 9, .. },
                ..
            })
        ));
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.gfds");
        let p2 = dir.path().join("b.gfds");
        let ds = tiny_dataset(6);
        save_dataset(&ds, &p1).unwrap();
        let back = load_dataset(&p1).unwrap();
        save_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            std::fs::read(manifest_path(&p1)).unwrap(),
            std::fs::read(manifest_path(&p2)).unwrap()
        );
    }

    #[test]
    fn normalization_uses_given_stats() {
        let ds = tiny_dataset(2);
        let img = ds.image_f32(0);
        let norm = normalize(&img, &ds.manifest.mean, &ds.manifest.std);
        let want = (img.at(0, 0, 0) - 0.5) / 0.2;
        assert!((norm.at(0, 0, 0) - want).abs() < 1e-6);
        let want1 = (img.at(1, 2, 3) - 0.4) / 0.3;
        assert!((norm.at(1, 2, 3) - want1).abs() < 1e-6);
    }

    #[test]
    fn pixel_stats_match_direct_computation() {
        let ds = tiny_dataset(5);
        let (mean, std) = ds.pixel_stats();
        // channel 0 oracle
        let mut vals = Vec::new();
        for i in 0..5 {
            let img = ds.raw_image(i);
            for &b in &img[0..16] {
                vals.push(b as f64 / 255.0);
            }
        }
        let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!((mean[0] - m).abs() < 1e-12);
        assert!((std[0] - v.sqrt()).abs() < 1e-9);
    }
}
