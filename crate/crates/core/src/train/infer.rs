//! Single-scale and multi-scale/flip inference, and dataset evaluation.

use rayon::prelude::*;

use super::data::{IGNORE_INDEX, LabelMap, SegSample};
use super::metrics::{Confusion, MiouResult};
use crate::error::Error;
use crate::model::SegModel;
use crate::tensor::{Real, Tensor, bilinear_resize, flip_horizontal};

/// Averages logits over every scale (and its mirror when `flip` is set).
/// Each pass resizes the image, runs the model in eval mode, un-flips and
/// resizes the logits back to the input size.
pub fn ms_flip_inference<T: Real>(model: &SegModel<T>, image: &Tensor<T>, scales: &[f64], flip: bool) -> Result<Tensor<T>, Error> {
    if scales.is_empty() {
        return Err(Error::Invalid("at least one inference scale is required".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Invalid(format!("inference scales must be positive, got {s}")));
    }
    let sh = image.shape();
    let mut acc: Option<Tensor<T>> = None;
    let mut count = 0usize;
    for &scale in scales {
        let (h, w) = ((sh.h as f64 * scale).round() as usize, (sh.w as f64 * scale).round() as usize);
        let scaled = if (h, w) == (sh.h, sh.w) { image.clone() } else { bilinear_resize(image, h.max(1), w.max(1), false)? };
        let flips: &[bool] = if flip { &[false, true] } else { &[false] };
        for &mirrored in flips {
            let input = if mirrored { flip_horizontal(&scaled) } else { scaled.clone() };
            let mut logits = model.predict(&input)?;
            if mirrored {
                logits = flip_horizontal(&logits);
            }
            let logits = bilinear_resize(&logits, sh.h, sh.w, false)?;
            match acc.as_mut() {
                None => acc = Some(logits),
                Some(a) => a.add_assign(&logits)?,
            }
            count += 1;
        }
    }
    let acc = acc.expect("at least one pass");
    Ok(if count == 1 { acc } else { acc.scale(T::from_f64_lossy(1.0 / count as f64)) })
}

/// Per-pixel argmax of `1 x K x H x W` logits.
pub fn logits_to_labels<T: Real>(logits: &Tensor<T>) -> LabelMap {
    let s = logits.shape();
    let data = logits.argmax_channels().swap_remove(0).into_iter().map(|c| c as u8).collect();
    LabelMap { h: s.h, w: s.w, data }
}

/// Predicted label map for one image.
pub fn predict_labels<T: Real>(model: &SegModel<T>, image: &Tensor<T>, scales: &[f64], flip: bool) -> Result<LabelMap, Error> {
    Ok(logits_to_labels(&ms_flip_inference(model, image, scales, flip)?))
}

/// mIoU of `model` over `samples`.
pub fn evaluate(model: &SegModel<f32>, samples: &[SegSample], scales: &[f64], flip: bool) -> Result<MiouResult, Error> {
    let k = model.cfg.num_classes;
    let preds = samples
        .par_iter()
        .map(|s| predict_labels(model, &s.image, scales, flip))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cm = Confusion::new(k);
    for (p, s) in preds.iter().zip(samples) {
        cm.add(p, &s.label, IGNORE_INDEX)?;
    }
    Ok(MiouResult { per_class: cm.ious(), mean: cm.mean_iou() })
}
