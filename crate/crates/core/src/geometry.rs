//! Box algebra: overlap, the offset transform and its inverse, proposal
//! labeling and greedy non-maximum suppression.

use crate::synthdata::InstanceGT;

/// Axis-aligned box in center form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Mirror about the vertical axis of an image `img_w` pixels wide.
    pub fn flip_h(&self, img_w: f64) -> Self {
        BBox {
            cx: img_w - self.cx,
            ..*self
        }
    }
}

/// Regression target relative to a proposal: scale-invariant translation and
/// log-space size change.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Offsets {
    pub ox: f64,
    pub oy: f64,
    pub ow: f64,
    pub oh: f64,
}

impl Offsets {
    pub fn to_array(self) -> [f64; 4] {
        [self.ox, self.oy, self.ow, self.oh]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Offsets {
            ox: s[0],
            oy: s[1],
            ow: s[2],
            oh: s[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledProposal {
    pub bbox: BBox,
    /// 0 is background.
    pub class: usize,
    pub dominant_instance: Option<usize>,
    pub target_offsets: Option<Offsets>,
}

impl LabeledProposal {
    pub fn background(bbox: BBox) -> Self {
        LabeledProposal {
            bbox,
            class: 0,
            dominant_instance: None,
            target_offsets: None,
        }
    }

    pub fn is_foreground(&self) -> bool {
        self.class >= 1
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x1().min(b.x1()) - a.x0().max(b.x0());
    let ih = a.y1().min(b.y1()) - a.y0().max(b.y0());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    // areas from the same corner differences so that iou(a, a) is exactly 1
    let area = |r: &BBox| (r.x1() - r.x0()) * (r.y1() - r.y0());
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode_offsets(proposal: &BBox, gt: &BBox) -> Offsets {
    Offsets {
        ox: (gt.cx - proposal.cx) / proposal.w,
        oy: (gt.cy - proposal.cy) / proposal.h,
        ow: (gt.w / proposal.w).ln(),
        oh: (gt.h / proposal.h).ln(),
    }
}

pub fn decode_offsets(proposal: &BBox, o: &Offsets) -> BBox {
    BBox {
        cx: proposal.cx + o.ox * proposal.w,
        cy: proposal.cy + o.oy * proposal.h,
        w: proposal.w * o.ow.exp(),
        h: proposal.h * o.oh.exp(),
    }
}

/// Clamps corners to the image; a side collapsed below one pixel is widened
/// to a one-pixel sliver that stays inside the image.
pub fn clip_box(b: &BBox, img_w: usize, img_h: usize) -> BBox {
    let (w, h) = (img_w as f64, img_h as f64);
    if b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= w && b.y1() <= h && b.w >= 1.0 && b.h >= 1.0 {
        return *b;
    }
    fn clamp_span(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
        let (lo, hi) = (lo.clamp(0.0, limit), hi.clamp(0.0, limit));
        if hi - lo >= 1.0 {
            (lo, hi)
        } else if lo + 1.0 <= limit {
            (lo, lo + 1.0)
        } else {
            (limit - 1.0, limit)
        }
    }
    let (x0, x1) = clamp_span(b.x0(), b.x1(), img_w as f64);
    let (y0, y1) = clamp_span(b.y0(), b.y1(), img_h as f64);
    BBox::from_corners(x0, y0, x1, y1)
}

/// Index and IoU of the best-overlapping box; ties go to the earliest.
fn best_match<'a, I>(proposal: &BBox, boxes: I) -> Option<(usize, f64)>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.into_iter().enumerate() {
        let o = iou(proposal, b);
        if best.is_none_or(|(_, bo)| o > bo) {
            best = Some((i, o));
        }
    }
    best
}

/// Foreground iff the best ground-truth IoU is at least 0.5.
pub fn label_proposals(proposals: &[BBox], gts: &[InstanceGT]) -> Vec<LabeledProposal> {
    proposals
        .iter()
        .map(|p| match best_match(p, gts.iter().map(|g| &g.bbox)) {
            Some((i, o)) if o >= 0.5 => LabeledProposal {
                bbox: *p,
                class: gts[i].class,
                dominant_instance: Some(gts[i].id),
                target_offsets: Some(encode_offsets(p, &gts[i].bbox)),
            },
            _ => LabeledProposal::background(*p),
        })
        .collect()
}

/// Instance with the largest box overlap, if any overlap at all; ties break
/// to the smallest instance id.
pub fn dominant_instance(proposal: &BBox, gts: &[InstanceGT]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for g in gts {
        let o = iou(proposal, &g.bbox);
        if o <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((id, bo)) => o > bo || (o == bo && g.id < id),
        };
        if better {
            best = Some((g.id, o));
        }
    }
    best.map(|(id, _)| id)
}

/// Greedy suppression in descending score order (ties to lower index).
/// Returns kept indices in that order.
pub fn nms(boxes: &[(BBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i].0, &boxes[j].0) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}
