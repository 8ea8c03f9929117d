//! Segmentation branch: shared backbone, per-box confidence maps `C` and the
//! dominant-instance mask `v`.

use crate::diffcore::{softmax_row, ParamStore, Tensor, Trace, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{MaskHead, ModelConfig, ModelVars};
use crate::synthdata::Mask;

/// Trace handles for a batch of boxes.
#[derive(Clone, Copy, Debug)]
pub struct SegVars {
    /// `[N, 2, M, M]`.
    pub c: Var,
    /// `[N, 2, M, M]`.
    pub v: Var,
    /// `[N, hidden]`; absent for the bypass head.
    pub hidden: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DominantMask {
    /// `2·M·M` logits, background channel first.
    pub v: Vec<f64>,
    /// `M·M` foreground probabilities.
    pub fg_prob: Vec<f64>,
}

impl DominantMask {
    pub fn from_logits(v: Vec<f64>) -> Self {
        let hw = v.len() / 2;
        let fg_prob = (0..hw).map(|i| softmax_row(&[v[i], v[hw + i]]).1[1]).collect();
        DominantMask { v, fg_prob }
    }
}

/// conv→relu(→max-pool) blocks; the first `log2(feat_stride)` blocks pool.
pub fn backbone_forward(tr: &mut Trace, image: Var, vars: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    let s = tr.shape(image);
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::invalid(format!("backbone expects [1,3,H,W], got {s:?}")));
    }
    if s[2] % cfg.feat_stride != 0 || s[3] % cfg.feat_stride != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by feat_stride {}",
            s[3], s[2], cfg.feat_stride
        )));
    }
    let pools = cfg.num_pools();
    let mut x = image;
    for (i, l) in vars.backbone.iter().enumerate() {
        x = tr.conv2d(x, l.w, l.b, 1, 1)?;
        x = tr.relu(x);
        if i < pools {
            x = tr.max_pool2d(x, 2, 2)?;
        }
    }
    Ok(x)
}

/// Batched segmentation branch over `boxes`.
pub fn seg_forward(
    tr: &mut Trace,
    featmap: Var,
    boxes: &[BBox],
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<SegVars> {
    let (n, m) = (boxes.len(), cfg.mask_size);
    let (pooled, _) = tr.roi_pool(featmap, boxes, cfg.feat_stride, m, m)?;
    let s1 = tr.conv2d(pooled, vars.seg1.w, vars.seg1.b, 1, 0)?;
    let s1 = tr.relu(s1);
    let c = tr.conv2d(s1, vars.seg2.w, vars.seg2.b, 1, 0)?;
    let (v, hidden) = match (cfg.mask_head, vars.mask1, vars.mask2) {
        (MaskHead::Bypass, _, _) => (c, None),
        (_, Some(l1), Some(l2)) => {
            let flat = tr.reshape(c, &[n, cfg.mask_len()])?;
            let h = tr.linear(flat, l1.w, l1.b)?;
            let h = tr.relu(h);
            let out = tr.linear(h, l2.w, l2.b)?;
            (tr.reshape(out, &[n, 2, m, m])?, Some(h))
        }
        _ => return Err(Error::State("mask head parameters not registered".into())),
    };
    Ok(SegVars { c, v, hidden })
}

/// Single-box segmentation branch on a precomputed feature map: `C`, the
/// dominant mask and the hidden code (absent for the bypass head).
pub fn seg_forward_single(
    featmap: &Tensor,
    bbox: &BBox,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(Tensor, DominantMask, Option<Tensor>)> {
    let mut tr = Trace::new();
    let vars = ModelVars::register(&mut tr, params, cfg)?;
    let f = tr.constant(featmap);
    let out = seg_forward(&mut tr, f, std::slice::from_ref(bbox), &vars, cfg)?;
    let m = cfg.mask_size;
    let c = Tensor::new(vec![2, m, m], tr.value(out.c).to_vec())?;
    let mask = DominantMask::from_logits(tr.value(out.v).to_vec());
    let hidden = out.hidden.map(|h| Tensor::from_vec(tr.value(h).to_vec()));
    Ok((c, mask, hidden))
}

/// Nearest-neighbour resampling of `gt_mask` at the `M×M` bin centres of `bbox`.
pub fn seg_target(gt_mask: &Mask, bbox: &BBox, m: usize) -> Vec<f64> {
    let (w, h) = (gt_mask.width, gt_mask.height);
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        let y = bbox.y0() + (i as f64 + 0.5) * bbox.h / m as f64;
        let yi = (y.floor().max(0.0) as usize).min(h - 1);
        for j in 0..m {
            let x = bbox.x0() + (j as f64 + 0.5) * bbox.w / m as f64;
            let xi = (x.floor().max(0.0) as usize).min(w - 1);
            if gt_mask.get(xi, yi) {
                out[i * m + j] = 1.0;
            }
        }
    }
    out
}
