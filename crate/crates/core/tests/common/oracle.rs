//! Brute-force AP^r reference shared by integration tests and the acceptance harness.

use r2ios::eval::Prediction;
use r2ios::synthdata::{InstanceGT, Mask};

pub fn iou_by_pixels(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for y in 0..a.height {
        for x in 0..a.width {
            let (p, q) = (a.get(x, y), b.get(x, y));
            if p && q {
                inter += 1.0;
            }
            if p || q {
                union += 1.0;
            }
        }
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Area under the interpolated precision envelope, integrated as a step
/// function over every recall breakpoint.
pub fn integrate_pr(hits: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut breaks: Vec<f64> = points.iter().map(|p| p.0).collect();
    breaks.insert(0, 0.0);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut area = 0.0;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        // precision envelope is constant on (lo, hi]
        let env = points
            .iter()
            .filter(|p| p.0 >= hi)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (hi - lo) * env;
    }
    area
}

/// Greedy matching replayed from scratch for every prediction: each one is
/// compared against all still-unclaimed gts of its class and image.
pub fn reference_ap(preds: &[Vec<Prediction>], gts: &[Vec<InstanceGT>], class: usize, thr: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.class == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut order = Vec::new();
    for (i, ps) in preds.iter().enumerate() {
        for (j, p) in ps.iter().enumerate() {
            if p.class == class {
                order.push((p.confidence, i, j));
            }
        }
    }
    // insertion sort: higher confidence first, then (image, emission)
    for a in 1..order.len() {
        let mut b = a;
        while b > 0 {
            let (x, y) = (order[b - 1], order[b]);
            let swap = y.0 > x.0 || (y.0 == x.0 && (y.1, y.2) < (x.1, x.2));
            if !swap {
                break;
            }
            order.swap(b - 1, b);
            b -= 1;
        }
    }
    let mut claimed: Vec<(usize, usize)> = Vec::new();
    let mut hits = Vec::new();
    for &(_, i, j) in &order {
        let mut cand: Vec<(f64, usize)> = gts[i]
            .iter()
            .enumerate()
            .filter(|(k, g)| g.class == class && !claimed.contains(&(i, *k)))
            .map(|(k, g)| (iou_by_pixels(&preds[i][j].mask, &g.mask), k))
            .collect();
        // highest IoU; the lowest gt index wins ties
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        match cand.first() {
            Some(&(o, k)) if o >= thr => {
                claimed.push((i, k));
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    Some(integrate_pr(&hits, num_gt))
}
