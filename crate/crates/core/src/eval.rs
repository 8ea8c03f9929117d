//! Mask-level average precision.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synthdata::{InstanceGT, Mask};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
    pub mask: Mask,
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AprReport {
    pub thresholds: Vec<f64>,
    /// `ap[class - 1][threshold]`; `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub mean: Vec<f64>,
}

impl AprReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.mean[i])
    }

    /// `class<TAB>threshold<TAB>ap` lines followed by `mean<TAB>threshold<TAB>map`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (c, row) in self.ap.iter().enumerate() {
            for (t, ap) in self.thresholds.iter().zip(row) {
                if let Some(ap) = ap {
                    let _ = writeln!(s, "{}\t{t:.2}\t{ap:.6}", c + 1);
                }
            }
        }
        for (t, m) in self.thresholds.iter().zip(&self.mean) {
            let _ = writeln!(s, "mean\t{t:.2}\t{m:.6}");
        }
        s
    }

    pub fn to_table(&self, class_names: &[&str]) -> String {
        let mut s = String::from("class       ");
        for t in &self.thresholds {
            let _ = write!(s, "  AP@{t:.1}");
        }
        s.push('\n');
        for (c, row) in self.ap.iter().enumerate() {
            let name = class_names.get(c).map_or_else(|| format!("{}", c + 1), |n| n.to_string());
            let _ = write!(s, "{name:<12}");
            for ap in row {
                match ap {
                    Some(ap) => {
                        let _ = write!(s, "  {:>6.1}", 100.0 * ap);
                    }
                    None => s.push_str("       -"),
                }
            }
            s.push('\n');
        }
        s.push_str("mean        ");
        for m in &self.mean {
            let _ = write!(s, "  {:>6.1}", 100.0 * m);
        }
        s.push('\n');
        s
    }
}

/// All-point interpolated AP from a ranked list of hit flags.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        mrec.push(tp as f64 / num_gt as f64);
        mpre.push(tp as f64 / (i + 1) as f64);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (1..mpre.len()).rev() {
        mpre[i - 1] = mpre[i - 1].max(mpre[i]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// Ranks predictions of `class` and flags each as hit or miss at `threshold`.
fn match_class(
    predictions: &[Vec<Prediction>],
    gts: &[Vec<InstanceGT>],
    class: usize,
    threshold: f64,
) -> Result<(Vec<bool>, usize)> {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, preds) in predictions.iter().enumerate() {
        ranked.extend(preds.iter().enumerate().filter(|(_, p)| p.class == class).map(|(j, _)| (img, j)));
    }
    ranked.sort_by(|a, b| {
        predictions[b.0][b.1]
            .confidence
            .total_cmp(&predictions[a.0][a.1].confidence)
            .then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    let mut hits = Vec::with_capacity(ranked.len());
    for (img, j) in ranked {
        let pred = &predictions[img][j];
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts[img].iter().enumerate() {
            if g.class != class || used[img][k] {
                continue;
            }
            let o = mask_iou(&pred.mask, &g.mask)?;
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, o)) if o >= threshold => {
                used[img][k] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    Ok((hits, num_gt))
}

pub fn evaluate_apr(
    predictions: &[Vec<Prediction>],
    gts: &[Vec<InstanceGT>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<AprReport> {
    if predictions.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            gts.len()
        )));
    }
    for (img, preds) in predictions.iter().enumerate() {
        for p in preds {
            if p.class == 0 || p.class > num_classes {
                return Err(Error::invalid(format!(
                    "image {img}: prediction class {} outside 1..={num_classes}",
                    p.class
                )));
            }
        }
    }
    let mut ap = vec![vec![None; thresholds.len()]; num_classes];
    for (c, row) in ap.iter_mut().enumerate() {
        for (ti, &thr) in thresholds.iter().enumerate() {
            let (hits, num_gt) = match_class(predictions, gts, c + 1, thr)?;
            if num_gt > 0 {
                row[ti] = Some(average_precision(&hits, num_gt));
            }
        }
    }
    let mean = (0..thresholds.len())
        .map(|ti| {
            let present: Vec<f64> = ap.iter().filter_map(|row| row[ti]).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    Ok(AprReport {
        thresholds: thresholds.to_vec(),
        ap,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip(w: usize, from: usize, to: usize) -> Mask {
        let mut m = Mask::new(w, 1);
        for x in from..to {
            m.set(x, 0, true);
        }
        m
    }

    fn gt(class: usize, mask: Mask) -> InstanceGT {
        let bbox = mask.tight_box().unwrap();
        InstanceGT { id: 0, class, mask, bbox }
    }

    fn pred(class: usize, confidence: f64, mask: Mask) -> Prediction {
        Prediction { class, confidence, mask }
    }

    #[test]
    fn iou_examples() {
        let a = strip(40, 0, 10);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &strip(40, 20, 30)).unwrap(), 0.0);
        // 10 and 20 pixels sharing 5
        assert!((mask_iou(&a, &strip(40, 5, 25)).unwrap() - 0.2).abs() < 1e-15);
        assert!(mask_iou(&a, &strip(30, 0, 10)).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = vec![vec![gt(1, strip(10, 0, 10))]];
        // IoU 0.8
        let p = vec![vec![pred(1, 0.9, strip(10, 0, 8))]];
        assert_eq!(evaluate_apr(&p, &g, 1, &[0.5]).unwrap().mean[0], 1.0);
        // IoU 0.4
        let p = vec![vec![pred(1, 0.9, strip(10, 0, 4))]];
        assert_eq!(evaluate_apr(&p, &g, 1, &[0.5]).unwrap().mean[0], 0.0);
        // correct one second
        let p = vec![vec![pred(1, 0.9, strip(10, 0, 2)), pred(1, 0.5, strip(10, 0, 10))]];
        assert!((evaluate_apr(&p, &g, 1, &[0.5]).unwrap().mean[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_excluded_and_bad_class_rejected() {
        let g = vec![vec![gt(2, strip(10, 0, 10))]];
        let p = vec![vec![pred(2, 0.9, strip(10, 0, 10))]];
        let r = evaluate_apr(&p, &g, 3, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.ap[0][0], None);
        assert_eq!(r.mean, vec![1.0; 3]);
        assert_eq!(r.map_at(0.6), Some(1.0));
        assert!(r.to_tsv().contains("mean\t0.50\t1.000000"));
        let bad = vec![vec![pred(4, 0.9, strip(10, 0, 10))]];
        assert!(evaluate_apr(&bad, &g, 3, &[0.5]).is_err());
        let r = evaluate_apr(&[vec![]], &g, 3, &[0.5]).unwrap();
        assert_eq!(r.mean[0], 0.0);
    }

    #[test]
    fn unmatched_gt_stays_available() {
        // the first prediction overlaps only weakly and must not consume the gt
        let g = vec![vec![gt(1, strip(10, 0, 10))]];
        let p = vec![vec![pred(1, 0.9, strip(10, 0, 3)), pred(1, 0.8, strip(10, 0, 9))]];
        let r = evaluate_apr(&p, &g, 1, &[0.5]).unwrap();
        assert!((r.mean[0] - 0.5).abs() < 1e-15);
    }
}
