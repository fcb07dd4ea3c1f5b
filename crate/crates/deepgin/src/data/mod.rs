//! Training batch formation and the sub-sampling decomposition used both
//! for training crops and for tiled inference on large images.
//!
//! The decomposition is the strided phase-offset selection: a (s*T) x (s*T)
//! image splits into s^2 sub-images of size T x T, where sub-image (i, j)
//! takes pixels (s*y + i, s*x + j). It is exactly invertible.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ImageTensor, MaskTensor};
use crate::mask::{self, MaskKind, MaskSpec};
use crate::rng::Rng;

/// One training triple. The input carries zeros in the holes.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub i_in: ImageTensor,
    pub mask: MaskTensor,
    pub i_gt: ImageTensor,
}

/// Geometry of a tile decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub stride: usize,
    /// Row-major (row-offset, col-offset) pairs covering [0, stride)^2.
    pub phases: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
    pub tile: usize,
}

/// Select one phase of the 2x sub-sampling: out[y, x] = img[2y + row, 2x + col].
pub fn subsample_select(img: &ImageTensor, phase: (usize, usize)) -> Result<ImageTensor> {
    if img.height() % 2 != 0 || img.width() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "subsample needs even dims, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    if phase.0 > 1 || phase.1 > 1 {
        return Err(Error::InvalidArgument(format!(
            "phase {:?} out of range (each component must be 0 or 1)",
            phase
        )));
    }
    let (oh, ow) = (img.height() / 2, img.width() / 2);
    Ok(ImageTensor::from_fn(oh, ow, img.channels(), |y, x, c| {
        img.get(2 * y + phase.0, 2 * x + phase.1, c)
    }))
}

fn layout_for(h: usize, w: usize, tile: usize) -> Result<TileLayout> {
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::InvalidArgument(format!(
            "dims {h}x{w} not divisible by tile {tile}"
        )));
    }
    let (sh, sw) = (h / tile, w / tile);
    if sh != sw {
        return Err(Error::InvalidArgument(format!(
            "non-square stride: {h}x{w} with tile {tile} gives {sh}x{sw}"
        )));
    }
    let stride = sh;
    let phases = (0..stride)
        .flat_map(|r| (0..stride).map(move |c| (r, c)))
        .collect();
    Ok(TileLayout {
        stride,
        phases,
        height: h,
        width: w,
        tile,
    })
}

/// Split an image into stride^2 phase-offset sub-images of size tile x tile.
pub fn tile_decompose(img: &ImageTensor, tile: usize) -> Result<(Vec<ImageTensor>, TileLayout)> {
    let layout = layout_for(img.height(), img.width(), tile)?;
    let s = layout.stride;
    let subs = layout
        .phases
        .iter()
        .map(|&(pr, pc)| {
            ImageTensor::from_fn(tile, tile, img.channels(), |y, x, c| {
                img.get(s * y + pr, s * x + pc, c)
            })
        })
        .collect();
    Ok((subs, layout))
}

/// Exact inverse of [`tile_decompose`].
pub fn tile_regroup(subs: &[ImageTensor], layout: &TileLayout) -> Result<ImageTensor> {
    if subs.len() != layout.phases.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} sub-images, got {}",
            layout.phases.len(),
            subs.len()
        )));
    }
    let channels = subs.first().map(|s| s.channels()).unwrap_or(3);
    for sub in subs {
        if sub.height() != layout.tile || sub.width() != layout.tile || sub.channels() != channels {
            return Err(Error::InvalidArgument(format!(
                "sub-image size {}x{}x{} does not match tile {}",
                sub.height(),
                sub.width(),
                sub.channels(),
                layout.tile
            )));
        }
    }
    let s = layout.stride;
    let mut out = ImageTensor::new(layout.height, layout.width, channels);
    for (sub, &(pr, pc)) in subs.iter().zip(&layout.phases) {
        for c in 0..channels {
            for y in 0..layout.tile {
                for x in 0..layout.tile {
                    out.set(s * y + pr, s * x + pc, c, sub.get(y, x, c));
                }
            }
        }
    }
    Ok(out)
}

/// Mask variant of [`tile_decompose`] (same phase geometry).
pub fn tile_decompose_mask(m: &MaskTensor, tile: usize) -> Result<(Vec<MaskTensor>, TileLayout)> {
    let layout = layout_for(m.height(), m.width(), tile)?;
    let s = layout.stride;
    let subs = layout
        .phases
        .iter()
        .map(|&(pr, pc)| {
            let mut sub = MaskTensor::new(tile, tile);
            for y in 0..tile {
                for x in 0..tile {
                    sub.set(y, x, m.get(s * y + pr, s * x + pc));
                }
            }
            sub
        })
        .collect();
    Ok((subs, layout))
}

/// Zero-fill the holes of a ground-truth image: i_in = (1 - m) . i_gt.
pub fn masked_input(i_gt: &ImageTensor, m: &MaskTensor) -> ImageTensor {
    ImageTensor::from_fn(i_gt.height(), i_gt.width(), i_gt.channels(), |y, x, c| {
        if m.get(y, x) == 1 {
            0.0
        } else {
            i_gt.get(y, x, c)
        }
    })
}

/// Batch formation settings. `crop` is the training crop side; source
/// images are resized to `2 * crop` and one of the four sub-sampling phases
/// is selected per image.
#[derive(Debug, Clone)]
pub struct BatchSettings {
    pub crop: usize,
}

impl BatchSettings {
    pub fn new(crop: usize) -> Self {
        BatchSettings { crop }
    }
}

const KINDS: [&str; 3] = ["rect", "freeform", "cellular"];

/// Derive the mask seed for (epoch, image index, kind index).
fn mask_seed(epoch_seed: u64, image_index: usize, kind_index: usize) -> u64 {
    crate::rng::derive_key(&[epoch_seed, image_index as u64, kind_index as u64 + 1])
}

/// Build one batch: per image, resize to 2*crop, select a random phase,
/// then emit one sample per mask kind (rect, freeform, cellular), so each
/// source image becomes three training samples. Order is image-major,
/// kind-minor.
pub fn make_batch(
    images: &[ImageTensor],
    epoch_seed: u64,
    settings: &BatchSettings,
) -> Result<Vec<TrainingSample>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "make_batch needs at least one image".into(),
        ));
    }
    let crop = settings.crop;
    let mut out = Vec::with_capacity(images.len() * KINDS.len());
    for (idx, img) in images.iter().enumerate() {
        let resized = resize_bilinear(img, 2 * crop, 2 * crop)?;
        let mut phase_rng = Rng::from_key(&[epoch_seed, idx as u64, 0x9a5e]);
        let phase = (phase_rng.range_usize(0, 1), phase_rng.range_usize(0, 1));
        let i_gt = subsample_select(&resized, phase)?;
        for (kind_idx, kind_name) in KINDS.iter().enumerate() {
            let kind = MaskKind::default_for(kind_name, crop, crop)?;
            let spec = MaskSpec::new(kind, crop, crop, mask_seed(epoch_seed, idx, kind_idx));
            let m = mask::generate(&spec)?;
            out.push(TrainingSample {
                i_in: masked_input(&i_gt, &m),
                mask: m,
                i_gt: i_gt.clone(),
            });
        }
    }
    Ok(out)
}

/// PNG files of a dataset directory in lexicographic order.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Deterministic epoch shuffle of `[0, n)` keyed by (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = Rng::from_key(&[seed, epoch as u64, 0x5f1e]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.range_usize(0, i);
        idx.swap(i, j);
    }
    idx
}
