//! Refinement branch: R×R ROI features, two FC layers, segmentation-aware
//! concatenation and the classification/regression heads.

use crate::diffcore::{softmax_row, ParamStore, Tensor, Trace, Var};
use crate::error::Result;
use crate::geometry::{BBox, Offsets};
use crate::model::{ModelConfig, ModelVars};

#[derive(Clone, Copy, Debug)]
pub struct RefineVars {
    /// `[N, K+1]` class logits.
    pub logits: Var,
    /// `[N, 4K]` offsets, class-major.
    pub offsets: Var,
}

/// Batched refinement heads. `v` is the `[N, 2, M, M]` mask from the
/// segmentation branch; it is ignored when `seg_aware` is off.
pub fn refine_forward(
    tr: &mut Trace,
    featmap: Var,
    boxes: &[BBox],
    v: Var,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<RefineVars> {
    let (n, r) = (boxes.len(), cfg.roi_size);
    let (pooled, _) = tr.roi_pool(featmap, boxes, cfg.feat_stride, r, r)?;
    let flat = tr.reshape(pooled, &[n, cfg.feat_channels() * r * r])?;
    let f1 = tr.linear(flat, vars.fc1.w, vars.fc1.b)?;
    let f1 = tr.relu(f1);
    let f2 = tr.linear(f1, vars.fc2.w, vars.fc2.b)?;
    let f2 = tr.relu(f2);
    let seg = if cfg.seg_aware {
        let flat_v = tr.reshape(v, &[n, cfg.mask_len()])?;
        if cfg.seg_aware_grad {
            flat_v
        } else {
            tr.detach(flat_v)
        }
    } else {
        tr.constant(&Tensor::zeros(&[n, cfg.mask_len()]))
    };
    let feat = tr.concat_cols(f2, seg)?;
    Ok(RefineVars {
        logits: tr.linear(feat, vars.cls.w, vars.cls.b)?,
        offsets: tr.linear(feat, vars.reg.w, vars.reg.b)?,
    })
}

/// Single-box refinement on a precomputed feature map and mask logits:
/// class probabilities and per-class offsets.
pub fn refine_forward_single(
    featmap: &Tensor,
    bbox: &BBox,
    v: &[f64],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Vec<Offsets>)> {
    let mut tr = Trace::new();
    let vars = ModelVars::register(&mut tr, params, cfg)?;
    let f = tr.constant(featmap);
    let m = cfg.mask_size;
    let vv = tr.constant_values(&[1, 2, m, m], v.to_vec())?;
    let out = refine_forward(&mut tr, f, std::slice::from_ref(bbox), vv, &vars, cfg)?;
    let (_, p) = softmax_row(tr.value(out.logits));
    let o = tr.value(out.offsets).chunks(4).map(Offsets::from_slice).collect();
    Ok((p, o))
}

/// Argmax over all `K+1` entries, ties to the lowest index.
pub fn predict_class(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}
