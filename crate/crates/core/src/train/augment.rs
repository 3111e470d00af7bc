//! Random flip, scale and crop.

use rand::Rng;

use super::data::{IGNORE_INDEX, LabelMap, SegSample};
use crate::tensor::{Shape, Tensor, bilinear_resize, flip_horizontal};

pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);

/// One concrete draw of the augmentation randomness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    pub flip: bool,
    pub scale: f64,
    /// Top-left corner of the crop inside the scaled image.
    pub offset: (usize, usize),
}

pub fn scaled_size(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

/// Draws flip (p = 0.5), scale in [0.5, 2] and a crop position.
pub fn sample_params(rng: &mut impl Rng, h: usize, w: usize, crop: usize) -> AugParams {
    let flip = rng.random_bool(0.5);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let (sh, sw) = (scaled_size(h, scale), scaled_size(w, scale));
    let oy = if sh > crop { rng.random_range(0..=sh - crop) } else { 0 };
    let ox = if sw > crop { rng.random_range(0..=sw - crop) } else { 0 };
    AugParams { flip, scale, offset: (oy, ox) }
}

/// Applies `p`: flip, rescale (bilinear image, nearest labels), then a
/// `crop x crop` window; regions past the scaled image are zero in the image
/// and ignored in the labels.
pub fn apply_augment(s: &SegSample, p: &AugParams, crop: usize) -> SegSample {
    let (h, w) = (s.label.h, s.label.w);
    let (mut image, mut label) = if p.flip {
        (flip_horizontal(&s.image), s.label.flip_horizontal())
    } else {
        (s.image.clone(), s.label.clone())
    };
    let (sh, sw) = (scaled_size(h, p.scale), scaled_size(w, p.scale));
    if (sh, sw) != (h, w) {
        image = bilinear_resize(&image, sh, sw, false).expect("non-empty image");
        label = label.resize_nearest(sh, sw);
    }
    if (sh, sw) == (crop, crop) && p.offset == (0, 0) {
        return SegSample { image, label };
    }
    let mut out_img = Tensor::zeros(Shape::new(1, 3, crop, crop));
    let mut out_lab = LabelMap::new(crop, crop, IGNORE_INDEX);
    let (oy, ox) = p.offset;
    for y in 0..crop.min(sh.saturating_sub(oy)) {
        for x in 0..crop.min(sw.saturating_sub(ox)) {
            out_lab.data[y * crop + x] = label.get(oy + y, ox + x);
            for c in 0..3 {
                out_img.set([0, c, y, x], image.at([0, c, oy + y, ox + x]));
            }
        }
    }
    SegSample { image: out_img, label: out_lab }
}

pub fn augment(s: &SegSample, rng: &mut impl Rng, crop: usize) -> SegSample {
    let p = sample_params(rng, s.label.h, s.label.w, crop);
    apply_augment(s, &p, crop)
}
