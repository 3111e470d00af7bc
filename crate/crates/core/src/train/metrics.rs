//! Confusion-matrix based intersection over union.

use super::data::LabelMap;
use crate::error::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    /// Row = ground truth, column = prediction.
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<(), Error> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Invalid(format!("prediction {}x{} vs label {}x{}", pred.h, pred.w, gt.h, gt.w)));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Invalid(format!("label {} out of range for {k} classes", g.max(p))));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// IoU per class, `None` for classes absent from both prediction and truth.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
                let pred: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Accumulates one confusion matrix over all pairs, then averages the IoU of
/// every class that appears in either predictions or labels.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize, ignore: u8) -> Result<MiouResult, Error> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    let mut cm = Confusion::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g, ignore)?;
    }
    Ok(MiouResult { per_class: cm.ious(), mean: cm.mean_iou() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::from_vec(2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_binary_case() {
        let r = miou(&[map(&[0, 0, 1, 1])], &[map(&[0, 1, 1, 1])], 2, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let g = map(&[0, 1, 2, 255]);
        assert_eq!(miou(&[g.clone()], &[g.clone()], 3, 255).unwrap().mean, 1.0);
        assert_eq!(miou(&[map(&[1, 0, 0, 0])], &[map(&[0, 1, 1, 1])], 2, 255).unwrap().mean, 0.0);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        assert!(miou(&[map(&[0, 0, 0, 0])], &[map(&[0, 3, 0, 0])], 3, 255).is_err());
        assert!(miou(&[map(&[0, 0, 5, 0])], &[map(&[0, 0, 255, 0])], 3, 255).is_ok());
    }
}
