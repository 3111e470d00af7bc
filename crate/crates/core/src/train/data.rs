//! Synthetic segmentation data: background plus thin strips and blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::tensor::{Shape, Tensor};

/// Label value excluded from loss and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Fraction of pixels the generator aims to leave as background (class 0).
pub const BACKGROUND_SHARE: f64 = 0.5;

pub const MIN_SYNTH_SIZE: usize = 64;

const PIXEL_NOISE: f64 = 0.04;
const COLOR_JITTER: f32 = 0.08;
const MAX_SHAPES: usize = 2000;

/// Dense per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, fill: u8) -> Self {
        LabelMap { h, w, data: vec![fill; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self, Error> {
        if data.len() != h * w {
            return Err(Error::Invalid(format!("label map {h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        let iy: Vec<usize> = (0..oh).map(|o| crate::tensor::nearest_index(o, self.h, oh)).collect();
        let ix: Vec<usize> = (0..ow).map(|o| crate::tensor::nearest_index(o, self.w, ow)).collect();
        let mut data = Vec::with_capacity(oh * ow);
        for &y in &iy {
            data.extend(ix.iter().map(|&x| self.get(y, x)));
        }
        LabelMap { h: oh, w: ow, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        out.data.chunks_mut(self.w).for_each(|row| row.reverse());
        out
    }

    /// Pixel count per class; ignored pixels are not counted.
    pub fn class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &v in &self.data {
            if v != IGNORE_INDEX && (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
        counts
    }
}

/// One training or validation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `1 x 3 x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Strip,
    Blob,
}

/// Odd classes are drawn as strips, even non-background classes as blobs.
pub fn class_shape(class: usize) -> ShapeKind {
    if class % 2 == 1 { ShapeKind::Strip } else { ShapeKind::Blob }
}

/// Fraction of pixels the generator targets for each class.
pub fn target_mix(num_classes: usize) -> Vec<f64> {
    let rest = (1.0 - BACKGROUND_SHARE) / (num_classes - 1) as f64;
    (0..num_classes).map(|c| if c == 0 { BACKGROUND_SHARE } else { rest }).collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let rgb = match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| c as f32)
}

/// Mean color per class: mid gray for background, evenly spaced hues otherwise.
pub fn palette(num_classes: usize) -> Vec<[f32; 3]> {
    (0..num_classes)
        .map(|c| if c == 0 { [0.5; 3] } else { hsv((c - 1) as f64 / (num_classes - 1) as f64, 0.75, 0.85) })
        .collect()
}

/// Pixels of a strip `width` wide and `len` long through `(cy, cx)`, in one of
/// four orientations (horizontal, vertical, two diagonals).
fn strip_pixels(size: usize, cy: f64, cx: f64, len: f64, width: f64, orientation: usize) -> Vec<usize> {
    let (dy, dx) = match orientation {
        0 => (0.0, 1.0),
        1 => (1.0, 0.0),
        2 => (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
        _ => (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    };
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let along = py * dy + px * dx;
            let perp = px * dy - py * dx;
            if along.abs() <= len / 2.0 && perp.abs() < width / 2.0 {
                out.push(y * size + x);
            }
        }
    }
    out
}

fn blob_pixels(size: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (py, px) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
            if py * py + px * px <= 1.0 {
                out.push(y * size + x);
            }
        }
    }
    out
}

fn random_shape(rng: &mut impl Rng, size: usize, kind: ShapeKind) -> Vec<usize> {
    let s = size as f64;
    let cy = rng.random_range(0.0..s);
    let cx = rng.random_range(0.0..s);
    match kind {
        ShapeKind::Strip => {
            // Integer widths 2..=4, snapped so axis-aligned strips cover exactly that many rows/columns.
            let width = rng.random_range(2..=4) as f64;
            let len = rng.random_range(s / 2.0..=s);
            let orientation = rng.random_range(0..4);
            let (cy, cx) = if width as usize % 2 == 0 { (cy.round(), cx.round()) } else { (cy.floor() + 0.5, cx.floor() + 0.5) };
            strip_pixels(size, cy, cx, len, width, orientation)
        }
        ShapeKind::Blob => {
            let ry = rng.random_range(s / 16.0..s / 6.0);
            let rx = rng.random_range(s / 16.0..s / 6.0);
            blob_pixels(size, cy, cx, ry, rx)
        }
    }
}

/// One sample drawn from `rng`.
pub fn synth_sample(rng: &mut impl Rng, size: usize, num_classes: usize) -> SegSample {
    let mix = target_mix(num_classes);
    let area = (size * size) as f64;
    let targets: Vec<usize> = mix.iter().map(|m| (m * area).round() as usize).collect();
    let mut label = LabelMap::new(size, size, 0);
    let mut counts = vec![0usize; num_classes];
    let mut class = 1;
    for _ in 0..MAX_SHAPES {
        if (1..num_classes).all(|c| counts[c] >= targets[c]) {
            break;
        }
        while counts[class] >= targets[class] {
            class = class % (num_classes - 1) + 1;
        }
        for idx in random_shape(rng, size, class_shape(class)) {
            if counts[class] >= targets[class] {
                break;
            }
            if label.data[idx] == 0 {
                label.data[idx] = class as u8;
                counts[class] += 1;
            }
        }
        class = class % (num_classes - 1) + 1;
    }

    let colors = palette(num_classes);
    let jittered: Vec<[f32; 3]> = colors
        .iter()
        .map(|c| c.map(|v| v + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)))
        .collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, &l) in label.data.iter().enumerate() {
        for ch in 0..3 {
            let v = jittered[l as usize][ch] + noise.sample(rng) as f32;
            data[ch * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    let image = Tensor::from_vec(Shape::new(1, 3, size, size), data).expect("image length");
    SegSample { image, label }
}

/// `n` samples; sample `i` depends only on `seed` and `i`.
pub fn synth_dataset(seed: u64, n: usize, size: usize, num_classes: usize) -> Result<Vec<SegSample>, Error> {
    if n == 0 {
        return Err(Error::Invalid("dataset needs at least one sample".into()));
    }
    if size < MIN_SYNTH_SIZE {
        return Err(Error::Invalid(format!("synthetic image size must be at least {MIN_SYNTH_SIZE}, got {size}")));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::Invalid(format!("synthetic data needs 2..=255 classes, got {num_classes}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_sample(&mut rng, size, num_classes)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_dataset(5, 3, 64, 3).unwrap();
        let b = synth_dataset(5, 3, 64, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for s in &a {
            assert!(s.label.data.iter().all(|&v| v < 3));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_dataset(0, 0, 64, 3).is_err());
        assert!(synth_dataset(0, 1, 32, 3).is_err());
        assert!(synth_dataset(0, 1, 64, 1).is_err());
    }

    #[test]
    fn axis_aligned_strip_has_requested_width() {
        let px = strip_pixels(64, 32.0, 32.0, 40.0, 2.0, 0);
        let rows: std::collections::BTreeSet<usize> = px.iter().map(|i| i / 64).collect();
        assert_eq!(rows.len(), 2);
        let px = strip_pixels(64, 32.5, 32.5, 40.0, 3.0, 1);
        let cols: std::collections::BTreeSet<usize> = px.iter().map(|i| i % 64).collect();
        assert_eq!(cols.len(), 3);
    }

    #[test]
    fn nearest_resize_and_flip_of_labels() {
        let l = LabelMap::from_vec(2, 2, vec![0, 1, 2, 255]).unwrap();
        let up = l.resize_nearest(4, 4);
        assert_eq!(up.data, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 255, 255, 2, 2, 255, 255]);
        assert_eq!(l.flip_horizontal().data, vec![1, 0, 255, 2]);
        assert_eq!(l.class_counts(3), vec![1, 1, 1]);
    }
}
