//! Unrolled refinement with shared parameters, reversible gates, masked loss
//! assembly and the test-time reversal.

use crate::diffcore::{smooth_l1, softmax_row, ParamStore, Trace, Var};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_offsets, encode_offsets, nms, BBox, LabeledProposal, Offsets};
use crate::model::{ModelConfig, ModelVars};
use crate::refinenet::{predict_class, refine_forward, RefineVars};
use crate::segnet::{backbone_forward, seg_forward, seg_target, DominantMask, SegVars};
use crate::synthdata::{Image, InstanceGT, Mask};

/// Suppression threshold applied per class at test time.
pub const TEST_NMS_IOU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecursionConfig {
    /// T
    pub iterations: usize,
    pub gates_enabled: bool,
    /// When false, training unrolls a single iteration and only testing recurses.
    pub train_recursive: bool,
}

impl Default for RecursionConfig {
    fn default() -> Self {
        RecursionConfig {
            iterations: 4,
            gates_enabled: true,
            train_recursive: true,
        }
    }
}

impl RecursionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_iterations(&self) -> usize {
        if self.train_recursive {
            self.iterations
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Boxes move along the labeled class.
    Train,
    /// Boxes move along the predicted class.
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub t: usize,
    /// l_{t-1}, the box both branches read.
    pub input_box: BBox,
    pub logits: Vec<f64>,
    /// p_t
    pub scores: Vec<f64>,
    /// O_t, one row per foreground class.
    pub offsets: Vec<Offsets>,
    /// v_t
    pub mask: DominantMask,
    /// l_t
    pub bbox: BBox,
    pub predicted_class: usize,
    /// J_t, train mode only.
    pub loss: Option<f64>,
}

impl IterationRecord {
    pub fn confidence(&self) -> f64 {
        self.scores[self.predicted_class]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateState {
    pub gates: Vec<bool>,
    /// 1-based.
    pub t_prime: Option<usize>,
}

impl GateState {
    pub fn new(iterations: usize) -> Self {
        GateState {
            gates: vec![false; iterations],
            t_prime: None,
        }
    }

    pub fn open(&mut self, t: usize) {
        self.gates.iter_mut().for_each(|g| *g = false);
        self.gates[t - 1] = true;
        self.t_prime = Some(t);
    }

    /// Gate at the last iteration, as when gates are disabled.
    pub fn last(iterations: usize) -> Self {
        let mut g = GateState::new(iterations);
        g.open(iterations);
        g
    }
}

/// Gate over per-iteration confidences: argmax, ties to the earliest.
pub fn select_gate_confidences(conf: &[f64]) -> GateState {
    let mut g = GateState::new(conf.len());
    if conf.is_empty() {
        return g;
    }
    let mut best = 0;
    for (i, &c) in conf.iter().enumerate() {
        if c > conf[best] {
            best = i;
        }
    }
    g.open(best + 1);
    g
}

pub fn select_gate(records: &[IterationRecord]) -> GateState {
    let conf: Vec<f64> = records.iter().map(IterationRecord::confidence).collect();
    select_gate_confidences(&conf)
}

/// `Σ_{t ≤ t'} J_t`; all iterations when no gate is open.
pub fn assemble_loss(records: &[IterationRecord], gate: &GateState) -> Result<f64> {
    let upto = gate.t_prime.unwrap_or(records.len());
    records[..upto.min(records.len())]
        .iter()
        .map(|r| {
            r.loss
                .ok_or_else(|| Error::State(format!("iteration {} has no loss recorded", r.t)))
        })
        .sum()
}

/// Supervision for one proposal: the labeled class and, for foreground, the
/// matched instance (box and mask).
#[derive(Clone, Copy, Debug)]
pub struct ProposalTarget<'a> {
    pub class: usize,
    pub instance: Option<&'a InstanceGT>,
}

impl<'a> ProposalTarget<'a> {
    /// Resolves the proposal's dominant instance among `gts`.
    pub fn resolve(p: &LabeledProposal, gts: &'a [InstanceGT]) -> Result<Self> {
        let instance = match (p.is_foreground(), p.dominant_instance) {
            (false, _) => None,
            (true, Some(id)) => Some(
                gts.iter()
                    .find(|g| g.id == id)
                    .ok_or_else(|| Error::State(format!("proposal references missing instance {id}")))?,
            ),
            (true, None) => return Err(Error::State("foreground proposal without a dominant instance".into())),
        };
        Ok(ProposalTarget { class: p.class, instance })
    }
}

/// Value-level J_t for one iteration: classification term, plus box and mask
/// terms for foreground.
pub fn compute_jt(record: &IterationRecord, g: usize, target_offsets: Option<&Offsets>, target_mask: Option<&[f64]>) -> Result<f64> {
    if g >= record.logits.len() {
        return Err(Error::invalid(format!("class {g} out of range")));
    }
    let (lse, _) = softmax_row(&record.logits);
    let mut j = lse - record.logits[g];
    if g >= 1 {
        let (o, m) = match (target_offsets, target_mask) {
            (Some(o), Some(m)) => (o, m),
            _ => return Err(Error::State("foreground proposal lacks regression or mask targets".into())),
        };
        let pred = record.offsets[g - 1].to_array();
        j += pred.iter().zip(o.to_array()).map(|(p, t)| smooth_l1(p - t)).sum::<f64>();
        let hw = record.mask.fg_prob.len();
        if m.len() != hw {
            return Err(Error::invalid(format!("mask target has {} pixels, expected {hw}", m.len())));
        }
        let v = &record.mask.v;
        let mut ce = 0.0;
        for i in 0..hw {
            let (lse, _) = softmax_row(&[v[i], v[hw + i]]);
            ce += lse - if m[i] == 1.0 { v[hw + i] } else { v[i] };
        }
        j += ce / hw as f64;
    }
    Ok(j)
}

/// Trace handles for one unrolled iteration over the batch.
#[derive(Clone, Debug)]
pub struct IterationVars {
    pub seg: SegVars,
    pub refine: RefineVars,
    /// l_{t-1} per proposal.
    pub input_boxes: Vec<BBox>,
    /// l_t per proposal.
    pub boxes: Vec<BBox>,
}

/// Runs `iterations` shared-parameter iterations for a batch of boxes. In
/// train mode `labels` steer the box updates, in test mode the predictions do.
#[allow(clippy::too_many_arguments)]
pub fn unroll(
    tr: &mut Trace,
    featmap: Var,
    vars: &ModelVars,
    cfg: &ModelConfig,
    initial: &[BBox],
    labels: Option<&[usize]>,
    iterations: usize,
    img_size: (usize, usize),
) -> Result<Vec<IterationVars>> {
    if let Some(l) = labels {
        if l.len() != initial.len() {
            return Err(Error::invalid("one label per proposal required"));
        }
    }
    let k = cfg.num_classes;
    let mut current = initial.to_vec();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let seg = seg_forward(tr, featmap, &current, vars, cfg)?;
        let refine = refine_forward(tr, featmap, &current, seg.v, vars, cfg)?;
        let logits = tr.value(refine.logits);
        let offsets = tr.value(refine.offsets);
        let next: Vec<BBox> = current
            .iter()
            .enumerate()
            .map(|(p, b)| {
                let class = match labels {
                    Some(l) => l[p],
                    None => predict_class(&logits[p * (k + 1)..(p + 1) * (k + 1)]),
                };
                if class == 0 {
                    *b
                } else {
                    let o = Offsets::from_slice(&offsets[p * 4 * k + 4 * (class - 1)..]);
                    clip_box(&decode_offsets(b, &o), img_size.0, img_size.1)
                }
            })
            .collect();
        out.push(IterationVars {
            seg,
            refine,
            input_boxes: std::mem::replace(&mut current, next.clone()),
            boxes: next,
        });
    }
    Ok(out)
}

/// Per-iteration records of proposal `p`.
pub fn records_for(tr: &Trace, iters: &[IterationVars], p: usize, cfg: &ModelConfig) -> Vec<IterationRecord> {
    let (k, ml) = (cfg.num_classes, cfg.mask_len());
    iters
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let logits = tr.value(it.refine.logits)[p * (k + 1)..(p + 1) * (k + 1)].to_vec();
            let (_, scores) = softmax_row(&logits);
            let offsets = tr.value(it.refine.offsets)[p * 4 * k..(p + 1) * 4 * k]
                .chunks(4)
                .map(Offsets::from_slice)
                .collect();
            let mask = DominantMask::from_logits(tr.value(it.seg.v)[p * ml..(p + 1) * ml].to_vec());
            IterationRecord {
                t: i + 1,
                input_box: it.input_boxes[p],
                predicted_class: predict_class(&scores),
                logits,
                scores,
                offsets,
                mask,
                bbox: it.boxes[p],
                loss: None,
            }
        })
        .collect()
}

/// Box and mask targets of iteration `t` for every proposal, against l_{t-1}.
fn iteration_targets(it: &IterationVars, targets: &[ProposalTarget], m: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = targets.len();
    let mut starts = vec![0; n];
    let mut offs = vec![0.0; 4 * n];
    let mut masks = vec![0.0; n * m * m];
    for (p, t) in targets.iter().enumerate() {
        if let Some(gt) = t.instance {
            let b = it.input_boxes[p];
            starts[p] = 4 * (t.class - 1);
            offs[4 * p..4 * p + 4].copy_from_slice(&encode_offsets(&b, &gt.bbox).to_array());
            masks[p * m * m..(p + 1) * m * m].copy_from_slice(&seg_target(&gt.mask, &b, m));
        }
    }
    (starts, offs, masks)
}

/// Batch objective `(1/N) Σ_p Σ_{t ≤ t'_p} J_t` as a trace node, plus the
/// per-proposal J_t values of every iteration up to the largest `t'`.
pub fn batch_loss(
    tr: &mut Trace,
    iters: &[IterationVars],
    targets: &[ProposalTarget],
    t_primes: &[usize],
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Vec<f64>>)> {
    let n = targets.len();
    if t_primes.len() != n || n == 0 {
        return Err(Error::invalid("one gate per proposal required"));
    }
    let horizon = *t_primes.iter().max().expect("non-empty");
    if horizon == 0 || horizon > iters.len() {
        return Err(Error::invalid(format!("gate {horizon} outside 1..={}", iters.len())));
    }
    let classes: Vec<usize> = targets.iter().map(|t| t.class).collect();
    let mut total: Option<Var> = None;
    let mut per_prop = vec![Vec::new(); n];
    for (i, it) in iters[..horizon].iter().enumerate() {
        let t = i + 1;
        let w: Vec<f64> = t_primes.iter().map(|&tp| if t <= tp { 1.0 / n as f64 } else { 0.0 }).collect();
        let wf: Vec<f64> = w.iter().zip(&classes).map(|(&w, &c)| if c >= 1 { w } else { 0.0 }).collect();
        let cls = tr.softmax_nll_weighted(it.refine.logits, &classes, &w)?;
        let mut rows = tr.row_losses(cls).expect("loss node").to_vec();
        let mut term = cls;
        if classes.iter().any(|&c| c >= 1) {
            let (starts, offs, masks) = iteration_targets(it, targets, cfg.mask_size);
            let o = tr.gather_cols(it.refine.offsets, &starts, 4)?;
            let loc = tr.smooth_l1_weighted(o, &offs, &wf)?;
            let seg = tr.pixel_ce_weighted(it.seg.v, &masks, &wf)?;
            let (lr, sr) = (tr.row_losses(loc).expect("loss node"), tr.row_losses(seg).expect("loss node"));
            for p in 0..n {
                if classes[p] >= 1 {
                    rows[p] += lr[p] + sr[p];
                }
            }
            term = tr.add(term, loc)?;
            term = tr.add(term, seg)?;
        }
        for (p, r) in rows.into_iter().enumerate() {
            per_prop[p].push(r);
        }
        total = Some(match total {
            None => term,
            Some(acc) => tr.add(acc, term)?,
        });
    }
    Ok((total.expect("horizon >= 1"), per_prop))
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss: f64,
    /// t' per proposal.
    pub t_primes: Vec<usize>,
}

/// Forward and backward for one image and mini-batch; gradients are added
/// to `store`.
pub fn train_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rc: &RecursionConfig,
    image: &Image,
    gts: &[InstanceGT],
    batch: &[LabeledProposal],
    gates: bool,
) -> Result<StepStats> {
    let targets = batch
        .iter()
        .map(|p| ProposalTarget::resolve(p, gts))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|p| p.class).collect();
    let boxes: Vec<BBox> = batch.iter().map(|p| p.bbox).collect();
    let iterations = rc.train_iterations();
    let mut tr = Trace::new();
    let vars = ModelVars::register(&mut tr, store, cfg)?;
    let img = tr.constant(&image.to_tensor());
    let featmap = backbone_forward(&mut tr, img, &vars, cfg)?;
    let iters = unroll(&mut tr, featmap, &vars, cfg, &boxes, Some(&labels), iterations, (image.width, image.height))?;
    let t_primes: Vec<usize> = if gates {
        let k1 = cfg.num_classes + 1;
        (0..batch.len())
            .map(|p| {
                let conf: Vec<f64> = iters
                    .iter()
                    .map(|it| {
                        let (_, s) = softmax_row(&tr.value(it.refine.logits)[p * k1..(p + 1) * k1]);
                        s[predict_class(&s)]
                    })
                    .collect();
                select_gate_confidences(&conf).t_prime.expect("non-empty")
            })
            .collect()
    } else {
        vec![iterations; batch.len()]
    };
    let (loss, _) = batch_loss(&mut tr, &iters, &targets, &t_primes, cfg)?;
    let value = tr.item(loss);
    tr.backward(loss)?;
    tr.accumulate_into(store);
    Ok(StepStats { loss: value, t_primes })
}

/// Train-mode records for a batch with J_t filled in for every iteration.
pub fn run_recursion_batch(
    image: &Image,
    gts: &[InstanceGT],
    proposals: &[LabeledProposal],
    params: &ParamStore,
    cfg: &ModelConfig,
    iterations: usize,
    mode: Mode,
) -> Result<Vec<Vec<IterationRecord>>> {
    let mut tr = Trace::new();
    let vars = ModelVars::register(&mut tr, params, cfg)?;
    let img = tr.constant(&image.to_tensor());
    let featmap = backbone_forward(&mut tr, img, &vars, cfg)?;
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let labels: Vec<usize> = proposals.iter().map(|p| p.class).collect();
    let steer = (mode == Mode::Train).then_some(&labels[..]);
    let iters = unroll(&mut tr, featmap, &vars, cfg, &boxes, steer, iterations, (image.width, image.height))?;
    let m = cfg.mask_size;
    proposals
        .iter()
        .enumerate()
        .map(|(p, prop)| {
            let mut recs = records_for(&tr, &iters, p, cfg);
            if mode == Mode::Train {
                let target = ProposalTarget::resolve(prop, gts)?;
                for r in &mut recs {
                    let (o, mask) = match target.instance {
                        Some(gt) => (
                            Some(encode_offsets(&r.input_box, &gt.bbox)),
                            Some(seg_target(&gt.mask, &r.input_box, m)),
                        ),
                        None => (None, None),
                    };
                    r.loss = Some(compute_jt(r, target.class, o.as_ref(), mask.as_deref())?);
                }
            }
            Ok(recs)
        })
        .collect()
}

/// Records for a single proposal.
pub fn run_recursion(
    image: &Image,
    gts: &[InstanceGT],
    proposal: &LabeledProposal,
    params: &ParamStore,
    cfg: &ModelConfig,
    iterations: usize,
    mode: Mode,
) -> Result<Vec<IterationRecord>> {
    let mut all = run_recursion_batch(image, gts, std::slice::from_ref(proposal), params, cfg, iterations, mode)?;
    Ok(all.pop().expect("one proposal"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    /// Index of the originating proposal.
    pub proposal: usize,
    pub class: usize,
    pub confidence: f64,
    /// l_{t'}
    pub bbox: BBox,
    /// l_{t'-1}, the box `fg_prob` was computed on.
    pub mask_box: BBox,
    pub t_prime: usize,
    pub fg_prob: Vec<f64>,
    /// Full-image mask after pasting.
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct ImageInference {
    /// Descending confidence.
    pub predictions: Vec<InstancePrediction>,
    pub records: Vec<Vec<IterationRecord>>,
    pub gates: Vec<GateState>,
    /// Proposals dropped because the gated iteration predicted background
    /// while another iteration predicted a foreground class.
    pub gate_discards: usize,
}

/// Bilinear resampling of an `M×M` probability map into `bbox`, thresholded
/// at 0.5. Only pixels whose centres fall inside the box are considered.
pub fn paste_mask(fg_prob: &[f64], m: usize, bbox: &BBox, width: usize, height: usize) -> Mask {
    let mut out = Mask::new(width, height);
    let (x0, y0) = (bbox.x0(), bbox.y0());
    let xs = x0.floor().max(0.0) as usize;
    let xe = (bbox.x1().ceil().max(0.0) as usize).min(width);
    let ys = y0.floor().max(0.0) as usize;
    let ye = (bbox.y1().ceil().max(0.0) as usize).min(height);
    let coord = |c: f64, lo: f64, len: f64| {
        let u = ((c - lo) / len * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let i0 = u.floor() as usize;
        (i0, (i0 + 1).min(m - 1), u - i0 as f64)
    };
    for y in ys..ye {
        let cy = y as f64 + 0.5;
        if cy < y0 || cy >= bbox.y1() {
            continue;
        }
        let (r0, r1, fy) = coord(cy, y0, bbox.h);
        for x in xs..xe {
            let cx = x as f64 + 0.5;
            if cx < x0 || cx >= bbox.x1() {
                continue;
            }
            let (c0, c1, fx) = coord(cx, x0, bbox.w);
            let top = fg_prob[r0 * m + c0] * (1.0 - fx) + fg_prob[r0 * m + c1] * fx;
            let bot = fg_prob[r1 * m + c0] * (1.0 - fx) + fg_prob[r1 * m + c1] * fx;
            if top * (1.0 - fy) + bot * fy >= 0.5 {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Test-time procedure for one image: unroll, gate, drop background,
/// per-class NMS, paste masks with higher confidence winning contested pixels.
pub fn predict_final(
    image: &Image,
    proposals: &[BBox],
    params: &ParamStore,
    cfg: &ModelConfig,
    rc: &RecursionConfig,
) -> Result<ImageInference> {
    if proposals.is_empty() {
        return Ok(ImageInference {
            predictions: Vec::new(),
            records: Vec::new(),
            gates: Vec::new(),
            gate_discards: 0,
        });
    }
    let mut tr = Trace::new();
    let vars = ModelVars::register(&mut tr, params, cfg)?;
    let img = tr.constant(&image.to_tensor());
    let featmap = backbone_forward(&mut tr, img, &vars, cfg)?;
    let t = rc.iterations;
    let iters = unroll(&mut tr, featmap, &vars, cfg, proposals, None, t, (image.width, image.height))?;
    let records: Vec<Vec<IterationRecord>> = (0..proposals.len()).map(|p| records_for(&tr, &iters, p, cfg)).collect();
    let gates: Vec<GateState> = records
        .iter()
        .map(|r| if rc.gates_enabled { select_gate(r) } else { GateState::last(t) })
        .collect();

    let mut gate_discards = 0;
    let mut candidates: Vec<InstancePrediction> = Vec::new();
    for (p, (recs, gate)) in records.iter().zip(&gates).enumerate() {
        let tp = gate.t_prime.expect("gate selected");
        let r = &recs[tp - 1];
        if r.predicted_class == 0 {
            if recs.iter().any(|x| x.predicted_class != 0) {
                gate_discards += 1;
            }
            continue;
        }
        candidates.push(InstancePrediction {
            proposal: p,
            class: r.predicted_class,
            confidence: r.confidence(),
            bbox: r.bbox,
            mask_box: r.input_box,
            t_prime: tp,
            fg_prob: r.mask.fg_prob.clone(),
            mask: Mask::new(image.width, image.height),
        });
    }

    let mut kept = Vec::new();
    for class in 1..=cfg.num_classes {
        let idx: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].class == class).collect();
        let boxes: Vec<(BBox, f64)> = idx.iter().map(|&i| (candidates[i].bbox, candidates[i].confidence)).collect();
        kept.extend(nms(&boxes, TEST_NMS_IOU).into_iter().map(|j| idx[j]));
    }
    // Paint low to high confidence; among equals the earlier proposal paints last.
    kept.sort_by(|&a, &b| {
        candidates[a]
            .confidence
            .total_cmp(&candidates[b].confidence)
            .then(candidates[b].proposal.cmp(&candidates[a].proposal))
    });
    let (w, h) = (image.width, image.height);
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for &i in &kept {
        let c = &candidates[i];
        let m = paste_mask(&c.fg_prob, cfg.mask_size, &c.mask_box, w, h);
        for (o, &on) in owner.iter_mut().zip(&m.data) {
            if on != 0 {
                *o = Some(i);
            }
        }
    }
    for (px, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            candidates[*i].mask.data[px] = 1;
        }
    }
    let mut predictions: Vec<InstancePrediction> = kept
        .into_iter()
        .rev()
        .map(|i| candidates[i].clone())
        .filter(|c| !c.mask.is_empty())
        .collect();
    predictions.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.proposal.cmp(&b.proposal)));
    Ok(ImageInference {
        predictions,
        records,
        gates,
        gate_discards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamStore;
    use crate::geometry::label_proposals;
    use crate::model::{init_params, InitConfig};
    use crate::synthdata::{generate_proposals, generate_scene, Scene, SceneConfig};

    fn tiny() -> (ModelConfig, SceneConfig) {
        let mc = ModelConfig {
            mask_size: 4,
            roi_size: 2,
            backbone_channels: vec![4, 6],
            seg_channels: 3,
            ae_hidden: 8,
            fc1: 8,
            fc2: 8,
            ..Default::default()
        };
        let sc = SceneConfig {
            img_w: 32,
            img_h: 32,
            ..Default::default()
        };
        (mc, sc)
    }

    fn params(mc: &ModelConfig) -> ParamStore {
        init_params(
            mc,
            &InitConfig {
                cls_std: 0.3,
                reg_std: 0.1,
            },
            11,
        )
        .unwrap()
    }

    fn scene_with_labels(sc: &SceneConfig) -> (Scene, Vec<LabeledProposal>) {
        let scene = generate_scene(sc, 3);
        let props = generate_proposals(&scene.instances, sc, 3);
        let labeled = label_proposals(&props, &scene.instances);
        (scene, labeled)
    }

    fn record(conf: f64) -> IterationRecord {
        let logits = vec![0.0, conf.ln() - (1.0 - conf).ln()];
        let (_, scores) = softmax_row(&logits);
        IterationRecord {
            t: 1,
            input_box: BBox::new(5.0, 5.0, 4.0, 4.0),
            predicted_class: predict_class(&scores),
            logits,
            scores,
            offsets: vec![Offsets::default()],
            mask: DominantMask::from_logits(vec![0.0; 2]),
            bbox: BBox::new(5.0, 5.0, 4.0, 4.0),
            loss: None,
        }
    }

    #[test]
    fn gate_examples() {
        let g = select_gate_confidences(&[0.6, 0.8, 0.75, 0.7]);
        assert_eq!(g.t_prime, Some(2));
        assert_eq!(g.gates, vec![false, true, false, false]);
        assert_eq!(select_gate_confidences(&[0.1, 0.2, 0.3, 0.4]).t_prime, Some(4));
        assert_eq!(select_gate_confidences(&[0.8, 0.8, 0.5, 0.5]).t_prime, Some(1));
        let g = GateState::new(4);
        assert!(g.gates.iter().all(|&x| !x) && g.t_prime.is_none());
        // confidence is p_{t, ĝ_t}, here via records
        let recs: Vec<_> = [0.6, 0.9, 0.7].iter().map(|&c| record(c)).collect();
        assert_eq!(select_gate(&recs).t_prime, Some(2));
    }

    #[test]
    fn assemble_examples() {
        let mut recs: Vec<_> = (0..4).map(|_| record(0.7)).collect();
        for (r, l) in recs.iter_mut().zip([1.0, 0.5, 0.7, 0.9]) {
            r.loss = Some(l);
        }
        let mut g = GateState::new(4);
        g.open(2);
        assert_eq!(assemble_loss(&recs, &g).unwrap(), 1.5);
        assert!((assemble_loss(&recs, &GateState::last(4)).unwrap() - 3.1).abs() < 1e-15);
        recs[0].loss = None;
        assert!(assemble_loss(&recs, &g).is_err());
    }

    #[test]
    fn jt_oracles() {
        // two-pixel mask, K = 1
        let logits = vec![0.3, -0.4];
        let (_, scores) = softmax_row(&logits);
        let v = vec![0.2, -1.0, 0.5, 0.7];
        let r = IterationRecord {
            t: 1,
            input_box: BBox::new(5.0, 5.0, 4.0, 4.0),
            predicted_class: 0,
            logits: logits.clone(),
            scores,
            offsets: vec![Offsets {
                ox: 0.5,
                oy: -2.0,
                ow: 0.1,
                oh: 0.0,
            }],
            mask: DominantMask::from_logits(v.clone()),
            bbox: BBox::new(5.0, 5.0, 4.0, 4.0),
            loss: None,
        };
        let nll = |g: usize| -((logits[g].exp()) / (logits[0].exp() + logits[1].exp())).ln();
        assert!((compute_jt(&r, 0, None, None).unwrap() - nll(0)).abs() < 1e-14);
        let target = Offsets::default();
        // |0.5| -> 0.125, |-2| -> 1.5, |0.1| -> 0.005
        let loc = 0.125 + 1.5 + 0.005;
        let ce0 = -(v[2].exp() / (v[0].exp() + v[2].exp())).ln();
        let ce1 = -(v[1].exp() / (v[1].exp() + v[3].exp())).ln();
        let want = nll(1) + loc + (ce0 + ce1) / 2.0;
        let got = compute_jt(&r, 1, Some(&target), Some(&[1.0, 0.0])).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(compute_jt(&r, 1, None, Some(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn perfect_predictions_vanish() {
        let logits = vec![-40.0, 40.0];
        let (_, scores) = softmax_row(&logits);
        let r = IterationRecord {
            t: 1,
            input_box: BBox::new(5.0, 5.0, 4.0, 4.0),
            predicted_class: 1,
            logits,
            scores,
            offsets: vec![Offsets {
                ox: 0.1,
                oy: 0.2,
                ow: 0.3,
                oh: 0.4,
            }],
            mask: DominantMask::from_logits(vec![-40.0, 40.0, 40.0, -40.0]),
            bbox: BBox::new(5.0, 5.0, 4.0, 4.0),
            loss: None,
        };
        let o = r.offsets[0];
        assert!(compute_jt(&r, 1, Some(&o), Some(&[1.0, 0.0])).unwrap() < 1e-15);
    }

    #[test]
    fn single_iteration_is_prefix() {
        let (mc, sc) = tiny();
        let p = params(&mc);
        let (scene, labeled) = scene_with_labels(&sc);
        for mode in [Mode::Train, Mode::Test] {
            let four = run_recursion_batch(&scene.image, &scene.instances, &labeled, &p, &mc, 4, mode).unwrap();
            let one = run_recursion_batch(&scene.image, &scene.instances, &labeled, &p, &mc, 1, mode).unwrap();
            for (a, b) in four.iter().zip(&one) {
                assert_eq!(b.len(), 1);
                assert_eq!(a[0], b[0]);
            }
        }
    }

    #[test]
    fn zero_offsets_keep_boxes() {
        let (mc, sc) = tiny();
        let mut p = params(&mc);
        p.get_mut("ref.reg.w").unwrap().values_mut().fill(0.0);
        let (scene, labeled) = scene_with_labels(&sc);
        for mode in [Mode::Train, Mode::Test] {
            let recs = run_recursion_batch(&scene.image, &scene.instances, &labeled, &p, &mc, 4, mode).unwrap();
            for (prop, r) in labeled.iter().zip(&recs) {
                for it in r {
                    assert_eq!(it.bbox, prop.bbox);
                }
            }
        }
    }

    #[test]
    fn background_freezes_boxes() {
        let (mc, sc) = tiny();
        let mut p = params(&mc);
        p.get_mut("ref.cls.b").unwrap().values_mut()[0] = 50.0;
        let (scene, labeled) = scene_with_labels(&sc);
        let recs = run_recursion_batch(&scene.image, &scene.instances, &labeled, &p, &mc, 4, Mode::Test).unwrap();
        for (prop, r) in labeled.iter().zip(&recs) {
            assert!(r.iter().all(|it| it.predicted_class == 0));
            assert_eq!(r[3].bbox, prop.bbox);
        }
        // labeled background never moves in training, whatever is predicted
        let p = params(&mc);
        let recs = run_recursion_batch(&scene.image, &scene.instances, &labeled, &p, &mc, 4, Mode::Train).unwrap();
        for (prop, r) in labeled.iter().zip(&recs) {
            if !prop.is_foreground() {
                assert!(r.iter().all(|it| it.bbox == prop.bbox));
            }
        }
        let inf = predict_final(&scene.image, &labeled.iter().map(|l| l.bbox).collect::<Vec<_>>(), &{
            let mut q = params(&mc);
            q.get_mut("ref.cls.b").unwrap().values_mut()[0] = 50.0;
            q
        }, &mc, &RecursionConfig::default())
        .unwrap();
        assert!(inf.predictions.is_empty());
    }

    /// Gradients of the masked batch objective for fixed gates.
    fn grads(
        p: &ParamStore,
        mc: &ModelConfig,
        scene: &Scene,
        batch: &[LabeledProposal],
        t_primes: &[usize],
        unroll_to: usize,
    ) -> (ParamStore, Vec<Vec<f64>>) {
        let targets: Vec<_> = batch.iter().map(|b| ProposalTarget::resolve(b, &scene.instances).unwrap()).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.class).collect();
        let boxes: Vec<BBox> = batch.iter().map(|b| b.bbox).collect();
        let mut store = p.clone();
        store.zero_grad();
        let mut tr = Trace::new();
        let vars = ModelVars::register(&mut tr, &store, mc).unwrap();
        let img = tr.constant(&scene.image.to_tensor());
        let f = backbone_forward(&mut tr, img, &vars, mc).unwrap();
        let iters = unroll(&mut tr, f, &vars, mc, &boxes, Some(&labels), unroll_to, (32, 32)).unwrap();
        let (loss, rows) = batch_loss(&mut tr, &iters, &targets, t_primes, mc).unwrap();
        tr.backward(loss).unwrap();
        tr.accumulate_into(&mut store);
        (store, rows)
    }

    fn grad_vec(s: &ParamStore) -> Vec<f64> {
        s.iter().flat_map(|(_, t)| t.grad().to_vec()).collect()
    }

    #[test]
    fn later_iterations_do_not_touch_gradients() {
        let (mc, sc) = tiny();
        let p = params(&mc);
        let (scene, labeled) = scene_with_labels(&sc);
        let batch = &labeled[..10];
        let (a, _) = grads(&p, &mc, &scene, batch, &[1; 10], 4);
        let (b, _) = grads(&p, &mc, &scene, batch, &[1; 10], 1);
        assert_eq!(grad_vec(&a), grad_vec(&b));
        assert!(grad_vec(&a).iter().any(|&g| g != 0.0));
    }

    /// Gradients of J_t alone, unrolled to exactly `t` iterations.
    fn isolated_grads(p: &ParamStore, mc: &ModelConfig, scene: &Scene, batch: &[LabeledProposal], t: usize) -> Vec<f64> {
        let targets: Vec<_> = batch.iter().map(|b| ProposalTarget::resolve(b, &scene.instances).unwrap()).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.class).collect();
        let boxes: Vec<BBox> = batch.iter().map(|b| b.bbox).collect();
        let n = batch.len() as f64;
        let mut store = p.clone();
        store.zero_grad();
        let mut tr = Trace::new();
        let vars = ModelVars::register(&mut tr, &store, mc).unwrap();
        let img = tr.constant(&scene.image.to_tensor());
        let f = backbone_forward(&mut tr, img, &vars, mc).unwrap();
        let iters = unroll(&mut tr, f, &vars, mc, &boxes, Some(&labels), t, (32, 32)).unwrap();
        let it = &iters[t - 1];
        let w = vec![1.0 / n; batch.len()];
        let wf: Vec<f64> = labels.iter().map(|&c| if c >= 1 { 1.0 / n } else { 0.0 }).collect();
        let (starts, offs, masks) = iteration_targets(it, &targets, mc.mask_size);
        let cls = tr.softmax_nll_weighted(it.refine.logits, &labels, &w).unwrap();
        let o = tr.gather_cols(it.refine.offsets, &starts, 4).unwrap();
        let loc = tr.smooth_l1_weighted(o, &offs, &wf).unwrap();
        let seg = tr.pixel_ce_weighted(it.seg.v, &masks, &wf).unwrap();
        let l = tr.add(cls, loc).unwrap();
        let l = tr.add(l, seg).unwrap();
        tr.backward(l).unwrap();
        tr.accumulate_into(&mut store);
        grad_vec(&store)
    }

    #[test]
    fn masked_loss_equals_isolated_sum() {
        let (mc, sc) = tiny();
        let p = params(&mc);
        let (scene, labeled) = scene_with_labels(&sc);
        let batch = &labeled[..8];
        for k in 1..=4 {
            let (masked, rows) = grads(&p, &mc, &scene, batch, &[k; 8], 4);
            let mut sum = vec![0.0; grad_vec(&masked).len()];
            for t in 1..=k {
                for (s, g) in sum.iter_mut().zip(isolated_grads(&p, &mc, &scene, batch, t)) {
                    *s += g;
                }
            }
            let m = grad_vec(&masked);
            let err = m.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "k={k} err={err}");
            assert!(rows.iter().all(|r| r.len() == k));
        }
    }

    #[test]
    fn batch_rows_match_record_losses() {
        let (mc, sc) = tiny();
        let p = params(&mc);
        let (scene, labeled) = scene_with_labels(&sc);
        let batch = &labeled[..12];
        let (_, rows) = grads(&p, &mc, &scene, batch, &[4; 12], 4);
        let recs = run_recursion_batch(&scene.image, &scene.instances, batch, &p, &mc, 4, Mode::Train).unwrap();
        for (r, rec) in rows.iter().zip(&recs) {
            for (j, it) in r.iter().zip(rec) {
                assert!((j - it.loss.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_step_leaves_parameters_alone() {
        let (mc, sc) = tiny();
        let mut p = params(&mc);
        let before = p.checksum();
        let (scene, labeled) = scene_with_labels(&sc);
        let stats = train_step(&mut p, &mc, &RecursionConfig::default(), &scene.image, &scene.instances, &labeled[..6], true).unwrap();
        assert_eq!(p.checksum(), before);
        assert!(stats.loss.is_finite() && stats.t_primes.iter().all(|&t| (1..=4).contains(&t)));
    }

    #[test]
    fn replay_equivalence() {
        let (mc, sc) = tiny();
        let mut p = params(&mc);
        // bias toward foreground so some predictions survive
        p.get_mut("ref.cls.b").unwrap().values_mut()[1] = 2.0;
        let (scene, labeled) = scene_with_labels(&sc);
        let boxes: Vec<BBox> = labeled.iter().map(|l| l.bbox).collect();
        let inf = predict_final(&scene.image, &boxes, &p, &mc, &RecursionConfig::default()).unwrap();
        assert!(!inf.predictions.is_empty());
        for pred in &inf.predictions {
            let tp = inf.gates[pred.proposal].t_prime.unwrap();
            assert_eq!(tp, pred.t_prime);
            let r = &inf.records[pred.proposal][tp - 1];
            assert_eq!(r.predicted_class, pred.class);
            assert_eq!(r.confidence().to_bits(), pred.confidence.to_bits());
            assert_eq!(r.bbox, pred.bbox);
            assert_eq!(r.mask.fg_prob, pred.fg_prob);
        }
        // batched and per-proposal unrolls agree
        for (i, prop) in labeled.iter().enumerate().step_by(7) {
            let single = run_recursion(&scene.image, &scene.instances, prop, &p, &mc, 4, Mode::Test).unwrap();
            for (a, b) in single.iter().zip(&inf.records[i]) {
                assert_eq!(a.predicted_class, b.predicted_class);
                assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-9 && (a.bbox.w - b.bbox.w).abs() < 1e-9);
            }
        }
        let no_gates = RecursionConfig {
            gates_enabled: false,
            ..Default::default()
        };
        let inf = predict_final(&scene.image, &boxes, &p, &mc, &no_gates).unwrap();
        assert!(inf.predictions.iter().all(|p| p.t_prime == 4));
    }

    #[test]
    fn duplicates_suppressed() {
        let (mc, sc) = tiny();
        let mut p = params(&mc);
        p.get_mut("ref.cls.b").unwrap().values_mut()[1] = 30.0;
        let (scene, labeled) = scene_with_labels(&sc);
        let b = labeled[0].bbox;
        let inf = predict_final(&scene.image, &[b, b], &p, &mc, &RecursionConfig::default()).unwrap();
        assert!(inf.predictions.len() <= 1);
        assert_eq!(inf.gates.len(), 2);
    }

    #[test]
    fn paste_rules() {
        let b = BBox::from_corners(2.0, 3.0, 6.0, 9.0);
        let on = paste_mask(&[1.0; 16], 4, &b, 10, 12);
        assert_eq!(on.count(), 24);
        assert_eq!(on.tight_box(), Some(b));
        assert!(paste_mask(&[0.0; 16], 4, &b, 10, 12).is_empty());
        // left half of the map on
        let half: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
        let m = paste_mask(&half, 4, &b, 10, 12);
        assert_eq!(m.tight_box(), Some(BBox::from_corners(2.0, 3.0, 4.0, 9.0)));
    }

    #[test]
    fn params_constant_during_forward() {
        let (mc, sc) = tiny();
        let p = params(&mc);
        let before = p.checksum();
        let (scene, labeled) = scene_with_labels(&sc);
        let _ = predict_final(&scene.image, &labeled.iter().map(|l| l.bbox).collect::<Vec<_>>(), &p, &mc, &RecursionConfig::default()).unwrap();
        assert_eq!(p.checksum(), before);
    }
}
