//! IoU-based evaluation split by seen and unseen classes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegMetrics {
    pub miou_seen: f64,
    pub miou_unseen: f64,
    pub hiou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Harmonic mean of seen and unseen mIoU; zero when both are zero.
pub fn hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    let s = miou_seen + miou_unseen;
    if s == 0.0 {
        0.0
    } else {
        2.0 * miou_seen * miou_unseen / s
    }
}

/// Per-pixel argmax over channels (lowest index wins ties).
pub fn argmax_labels(pred: &Mat) -> Vec<usize> {
    (0..pred.rows())
        .map(|r| {
            let row = pred.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// IoU per class from label maps.
pub fn class_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::shape("class_iou", format!("{} predictions", truth.len()), format!("{}", pred.len())));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Input(format!("class id {} out of range", p.max(t))));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    Ok((0..classes).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect())
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Seen/unseen mIoU and their harmonic mean for a `P x K` prediction.
pub fn metrics(pred: &Mat, truth: &[usize], seen: &[bool]) -> Result<SegMetrics> {
    if pred.cols() != seen.len() {
        return Err(Error::shape("metrics", format!("{} channels", seen.len()), format!("{}", pred.cols())));
    }
    let per_class = class_iou(&argmax_labels(pred), truth, seen.len())?;
    let miou_seen = mean_defined(per_class.iter().zip(seen).filter(|(_, &s)| s).map(|(v, _)| *v));
    let miou_unseen = mean_defined(per_class.iter().zip(seen).filter(|(_, &s)| !s).map(|(v, _)| *v));
    Ok(SegMetrics {
        miou_seen,
        miou_unseen,
        hiou: hiou(miou_seen, miou_unseen),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reported_pairs() {
        assert!((hiou(91.9, 77.8) - 84.3).abs() <= 0.05);
        assert!((hiou(94.2, 94.3) - 94.25).abs() <= 0.01);
        assert!((hiou(94.3, 94.2) - 94.2).abs() <= 0.05);
    }

    #[test]
    fn perfect_prediction() {
        let truth = vec![0, 1, 2, 2, 1, 0];
        let pred = Mat::from_fn(6, 3, |r, c| f64::from(u8::from(truth[r] == c)));
        let m = metrics(&pred, &truth, &[true, true, false]).unwrap();
        assert_eq!((m.miou_seen, m.miou_unseen, m.hiou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let truth = vec![0, 0, 1, 1];
        let pred = Mat::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let m = metrics(&pred, &truth, &[true, false, true]).unwrap();
        assert_eq!(m.per_class[2], None);
        // class 0: 2 / 3, class 2 excluded
        assert!((m.miou_seen - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.miou_unseen - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bounds(pred in proptest::collection::vec(0usize..4, 30), truth in proptest::collection::vec(0usize..4, 30)) {
            let p = Mat::from_fn(30, 4, |r, c| f64::from(u8::from(pred[r] == c)));
            let m = metrics(&p, &truth, &[true, true, false, false]).unwrap();
            for v in m.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            prop_assert!(m.hiou <= (m.miou_seen + m.miou_unseen) / 2.0 + 1e-12);
            prop_assert!(m.hiou <= 2.0 * m.miou_seen.min(m.miou_unseen) + 1e-12);
        }
    }
}
