//! Recording trace for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, appends a node holding its output and
//! whatever forward state its backward rule needs, and returns a [`Var`]
//! handle. [`Trace::backward`] walks the nodes in reverse order exactly once.
//! Nodes that never receive an upstream gradient are skipped, so parts of the
//! trace that do not feed the loss cost nothing in the backward pass.

use super::gemm::gemm;
use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Handle to a node in a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<String>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        /// im2col buffers per batch item; absent for 1x1 stride-1 convolutions.
        cols: Option<Vec<f64>>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    RoiPool {
        input: Var,
        argmax: Vec<Option<usize>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    GatherCols {
        input: Var,
        starts: Vec<usize>,
        width: usize,
    },
    SoftmaxNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        rows: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        rows: Vec<f64>,
    },
    PixelCe {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        fg_prob: Vec<f64>,
        rows: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Trace {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn check_rank(what: &str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::invalid(format!(
            "{what}: expected rank {rank}, got shape {shape:?}"
        )));
    }
    Ok(())
}

fn check_weights(what: &str, weights: &[f64], rows: usize) -> Result<()> {
    if weights.len() != rows {
        return Err(Error::invalid(format!(
            "{what}: {} weights for {rows} rows",
            weights.len()
        )));
    }
    Ok(())
}

/// Integer cell range covered by one pooling bin, before clipping.
fn bin_range(start: i64, extent: i64, bins: usize, j: usize) -> (i64, i64) {
    let (j, bins) = (j as i64, bins as i64);
    let lo = start + (j * extent).div_euclid(bins);
    let hi = start + ((j + 1) * extent + bins - 1).div_euclid(bins);
    (lo, hi)
}

/// Feature-cell span `[start, end)` of a box edge pair under a feature stride.
fn cell_span(lo: f64, hi: f64, stride: f64) -> (i64, i64) {
    let start = (lo / stride).floor() as i64;
    let end = ((hi / stride).ceil() as i64).max(start + 1);
    (start, end)
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    /// Gradient accumulated at `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Per-row loss values recorded by a weighted loss node (before weighting).
    pub fn row_losses(&self, v: Var) -> Option<&[f64]> {
        match &self.node(v).op {
            Op::SoftmaxNll { rows, .. } | Op::SmoothL1 { rows, .. } | Op::PixelCe { rows, .. } => {
                Some(rows)
            }
            _ => None,
        }
    }

    /// Untracked leaf: no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf { param: None },
            false,
        )
    }

    pub fn constant_values(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.constant(&t))
    }

    /// Leaf that is tracked iff the tensor requires a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    /// Tracked leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        Ok(self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf {
                param: Some(name.to_string()),
            },
            true,
        ))
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf { param: None }, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        check_rank("conv2d input", xs, 4)?;
        check_rank("conv2d weight", ws, 4)?;
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if bs != [cout] {
            return Err(Error::invalid(format!(
                "conv2d: bias shape {bs:?}, expected [{cout}]"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let ckk = cin * kh * kw;
        let hw = ho * wo;
        let mut out = vec![0.0; n * cout * hw];
        let cols = if geom.is_pointwise() {
            for i in 0..n {
                let xi = &x[i * cin * hw..(i + 1) * cin * hw];
                gemm(cout, cin, hw, wt, false, xi, false, 0.0, &mut out[i * cout * hw..(i + 1) * cout * hw]);
            }
            None
        } else {
            let mut cols = vec![0.0; n * ckk * hw];
            for i in 0..n {
                let ci = &mut cols[i * ckk * hw..(i + 1) * ckk * hw];
                im2col(&geom, &x[i * cin * h * w..(i + 1) * cin * h * w], ci);
                gemm(cout, ckk, hw, wt, false, ci, false, 0.0, &mut out[i * cout * hw..(i + 1) * cout * hw]);
            }
            Some(cols)
        };
        for i in 0..n {
            for c in 0..cout {
                let o = &mut out[(i * cout + c) * hw..(i * cout + c + 1) * hw];
                o.iter_mut().for_each(|v| *v += b[c]);
            }
        }
        let tracked = self.node(input).tracked || self.node(weight).tracked || self.node(bias).tracked;
        Ok(self.push(
            vec![n, cout, ho, wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            tracked,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input);
        check_rank("max_pool2d input", xs, 4)?;
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d: k and stride must be >= 1"));
        }
        if k > h || k > w {
            return Err(Error::invalid(format!(
                "max_pool2d: window {k} exceeds input {h}x{w}"
            )));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let tracked = self.node(input).tracked;
        Ok(self.push(vec![n, c, ho, wo], out, Op::MaxPool2d { input, argmax }, tracked))
    }

    /// Max-pools each box region of a `[1, C, Hf, Wf]` feature map to
    /// `[boxes.len(), C, out_h, out_w]`.
    ///
    /// Box edges map to cells with `floor(start / stride)` and
    /// `ceil(end / stride)`. Bins partition that span with outward rounding
    /// and are clipped to the map afterwards; a bin left empty by clipping
    /// outputs 0. Returns the node and the number of empty bins.
    pub fn roi_pool(
        &mut self,
        featmap: Var,
        boxes: &[BBox],
        feat_stride: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<(Var, usize)> {
        let fs = self.shape(featmap);
        check_rank("roi_pool featmap", fs, 4)?;
        if fs[0] != 1 {
            return Err(Error::invalid("roi_pool: feature map batch must be 1"));
        }
        if boxes.is_empty() || out_h == 0 || out_w == 0 || feat_stride == 0 {
            return Err(Error::invalid("roi_pool: need boxes and positive output/stride"));
        }
        let (c, hf, wf) = (fs[1], fs[2], fs[3]);
        let x = &self.nodes[featmap.0].value;
        let per_box = c * out_h * out_w;
        let mut out = vec![0.0; boxes.len() * per_box];
        let mut argmax = vec![None; boxes.len() * per_box];
        let mut empty = 0;
        let stride = feat_stride as f64;
        for (bi, b) in boxes.iter().enumerate() {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::invalid(format!("roi_pool: degenerate box {b:?}")));
            }
            let (xs, xe) = cell_span(b.x0(), b.x1(), stride);
            let (ys, ye) = cell_span(b.y0(), b.y1(), stride);
            for py in 0..out_h {
                let (y0, y1) = bin_range(ys, ye - ys, out_h, py);
                let (y0, y1) = (y0.clamp(0, hf as i64) as usize, y1.clamp(0, hf as i64) as usize);
                for px in 0..out_w {
                    let (x0, x1) = bin_range(xs, xe - xs, out_w, px);
                    let (x0, x1) = (x0.clamp(0, wf as i64) as usize, x1.clamp(0, wf as i64) as usize);
                    if y1 <= y0 || x1 <= x0 {
                        empty += 1;
                        continue;
                    }
                    for ch in 0..c {
                        let base = ch * hf * wf;
                        let mut best = base + y0 * wf + x0;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let idx = base + yy * wf + xx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        let o = bi * per_box + (ch * out_h + py) * out_w + px;
                        out[o] = x[best];
                        argmax[o] = Some(best);
                    }
                }
            }
        }
        let tracked = self.node(featmap).tracked;
        let var = self.push(
            vec![boxes.len(), c, out_h, out_w],
            out,
            Op::RoiPool {
                input: featmap,
                argmax,
            },
            tracked,
        );
        Ok((var, empty))
    }

    /// `out[n, j] = bias[j] + Σ_i input[n, i] · weight[j, i]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        check_rank("linear input", xs, 2)?;
        check_rank("linear weight", ws, 2)?;
        let (n, din) = (xs[0], xs[1]);
        let (dout, wdin) = (ws[0], ws[1]);
        if din != wdin {
            return Err(Error::invalid(format!(
                "linear: input width {din}, weight expects {wdin}"
            )));
        }
        if bs != [dout] {
            return Err(Error::invalid(format!(
                "linear: bias shape {bs:?}, expected [{dout}]"
            )));
        }
        let mut out = vec![0.0; n * dout];
        {
            let x = &self.nodes[input.0].value;
            let wt = &self.nodes[weight.0].value;
            gemm(n, din, dout, x, false, wt, true, 0.0, &mut out);
            let b = &self.nodes[bias.0].value;
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(b).for_each(|(o, bj)| *o += bj);
            }
        }
        let tracked = self.node(input).tracked || self.node(weight).tracked || self.node(bias).tracked;
        Ok(self.push(vec![n, dout], out, Op::Linear { input, weight, bias }, tracked))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let n = self.node(input);
        let out = n.value.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push(shape, out, Op::Relu { input }, tracked)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(input);
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                n.shape
            )));
        }
        let (value, tracked) = (n.value.clone(), n.tracked);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { input }, tracked))
    }

    /// Concatenates two `[N, *]` matrices along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_rank("concat lhs", sa, 2)?;
        check_rank("concat rhs", sb, 2)?;
        if sa[0] != sb[0] {
            return Err(Error::invalid(format!("concat: row mismatch {sa:?} vs {sb:?}")));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&va[r * da..(r + 1) * da]);
            out.extend_from_slice(&vb[r * db..(r + 1) * db]);
        }
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(vec![n, da + db], out, Op::Concat { a, b }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, tracked))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let n = self.node(input);
        let s = n.value.iter().sum();
        let tracked = n.tracked;
        self.push(vec![1], vec![s], Op::Sum { input }, tracked)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let n = self.node(input);
        let out = n.value.iter().map(|v| v * factor).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push(shape, out, Op::Scale { input, factor }, tracked)
    }

    /// Selects `width` consecutive columns starting at `starts[n]` from row `n`.
    pub fn gather_cols(&mut self, input: Var, starts: &[usize], width: usize) -> Result<Var> {
        let s = self.shape(input);
        check_rank("gather_cols input", s, 2)?;
        let (n, d) = (s[0], s[1]);
        if starts.len() != n || width == 0 || starts.iter().any(|&st| st + width > d) {
            return Err(Error::invalid("gather_cols: column window out of range"));
        }
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(n * width);
        for (r, &st) in starts.iter().enumerate() {
            out.extend_from_slice(&x[r * d + st..r * d + st + width]);
        }
        let tracked = self.node(input).tracked;
        Ok(self.push(
            vec![n, width],
            out,
            Op::GatherCols {
                input,
                starts: starts.to_vec(),
                width,
            },
            tracked,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_nll_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = self.shape(logits).first().copied().unwrap_or(0);
        let w = vec![1.0 / n.max(1) as f64; n];
        self.softmax_nll_weighted(logits, targets, &w)
    }

    /// `Σ_n weights[n] · (−log softmax(logits[n])[targets[n]])`.
    pub fn softmax_nll_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        check_rank("softmax_nll logits", s, 2)?;
        let (n, k) = (s[0], s[1]);
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "softmax_nll: {} targets for {n} rows",
                targets.len()
            )));
        }
        check_weights("softmax_nll", weights, n)?;
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!(
                "softmax_nll: target {bad} outside [0, {k})"
            )));
        }
        let x = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * k];
        let mut rows = vec![0.0; n];
        let mut total = 0.0;
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let (lse, p) = softmax_row(row);
            probs[r * k..(r + 1) * k].copy_from_slice(&p);
            rows[r] = lse - row[targets[r]];
            total += weights[r] * rows[r];
        }
        let tracked = self.node(logits).tracked;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::SoftmaxNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                rows,
            },
            tracked,
        ))
    }

    /// Sum over coordinates of the smooth L1 penalty; `pred` and `target` share a shape.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::invalid(format!(
                "smooth_l1: pred {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let pred = if self.shape(pred).len() == 1 {
            let len = self.shape(pred)[0];
            self.reshape(pred, &[1, len])?
        } else {
            pred
        };
        let rows = self.shape(pred)[0];
        self.smooth_l1_weighted(pred, target.values(), &vec![1.0; rows])
    }

    /// `Σ_n weights[n] · Σ_d s(pred[n, d] − target[n, d])` for a `[N, D]` prediction.
    pub fn smooth_l1_weighted(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let s = self.shape(pred);
        check_rank("smooth_l1 pred", s, 2)?;
        let (n, d) = (s[0], s[1]);
        if target.len() != n * d {
            return Err(Error::invalid(format!(
                "smooth_l1: target length {} for pred {s:?}",
                target.len()
            )));
        }
        check_weights("smooth_l1", weights, n)?;
        let x = &self.nodes[pred.0].value;
        let mut rows = vec![0.0; n];
        let mut total = 0.0;
        for r in 0..n {
            rows[r] = (0..d).map(|j| smooth_l1(x[r * d + j] - target[r * d + j])).sum();
            total += weights[r] * rows[r];
        }
        let tracked = self.node(pred).tracked;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                rows,
            },
            tracked,
        ))
    }

    /// Mean per-pixel two-way cross-entropy of a `[2, M, M]` logit map.
    pub fn pixel_ce_loss(&mut self, v: Var, target_mask: &Tensor) -> Result<Var> {
        let s = self.shape(v).to_vec();
        check_rank("pixel_ce logits", &s, 3)?;
        let batched = self.reshape(v, &[1, s[0], s[1], s[2]])?;
        self.pixel_ce_weighted(batched, target_mask.values(), &[1.0])
    }

    /// `Σ_n weights[n] · mean_px CE(v[n], target[n])` for `[N, 2, M, M]` logits
    /// (channel 1 is foreground) and `N·M·M` binary targets.
    pub fn pixel_ce_weighted(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        check_rank("pixel_ce logits", s, 4)?;
        if s[1] != 2 {
            return Err(Error::invalid(format!("pixel_ce: expected 2 channels, got {s:?}")));
        }
        let (n, hw) = (s[0], s[2] * s[3]);
        if targets.len() != n * hw {
            return Err(Error::invalid(format!(
                "pixel_ce: target length {} for logits {s:?}",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::invalid(format!("pixel_ce: non-binary target value {bad}")));
        }
        check_weights("pixel_ce", weights, n)?;
        let x = &self.nodes[logits.0].value;
        let mut fg_prob = vec![0.0; n * hw];
        let mut rows = vec![0.0; n];
        let mut total = 0.0;
        for r in 0..n {
            let bg = &x[r * 2 * hw..r * 2 * hw + hw];
            let fg = &x[r * 2 * hw + hw..(r + 1) * 2 * hw];
            let mut acc = 0.0;
            for i in 0..hw {
                let (lse, p) = softmax_row(&[bg[i], fg[i]]);
                fg_prob[r * hw + i] = p[1];
                let chosen = if targets[r * hw + i] == 1.0 { fg[i] } else { bg[i] };
                acc += lse - chosen;
            }
            rows[r] = acc / hw as f64;
            total += weights[r] * rows[r];
        }
        let tracked = self.node(logits).tracked;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::PixelCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                fg_prob,
                rows,
            },
            tracked,
        ))
    }

    /// Accumulates `d loss / d node` into every tracked node reached from `loss`.
    ///
    /// A trace can be consumed once; a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("trace already consumed by backward".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.consumed = true;
        if !self.node(loss).tracked {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    /// Adds gradients of all parameter leaves into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(name) }, Some(g)) = (&node.op, grad) {
                if let Some(t) = store.get_mut(name) {
                    t.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        // Shape, not value: callers may have temporarily moved the value out.
        let len = self.nodes[v.0].shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // The op is moved out while its inputs are updated and put back after,
        // so forward state can be read without cloning.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf { param: None });
        match &op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv2d_backward(*input, *weight, *bias, geom, cols.as_deref(), g),
            Op::MaxPool2d { input, argmax } => {
                if let Some(dx) = self.acc(*input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::RoiPool { input, argmax } => {
                if let Some(dx) = self.acc(*input) {
                    for (o, src) in argmax.iter().enumerate() {
                        if let Some(src) = src {
                            dx[*src] += g[o];
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, din) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let dout = self.nodes[weight.0].shape[0];
                if self.nodes[input.0].tracked {
                    let wt = std::mem::take(&mut self.nodes[weight.0].value);
                    if let Some(dx) = self.acc(*input) {
                        gemm(n, dout, din, g, false, &wt, false, 1.0, dx);
                    }
                    self.nodes[weight.0].value = wt;
                }
                if self.nodes[weight.0].tracked {
                    let x = std::mem::take(&mut self.nodes[input.0].value);
                    if let Some(dw) = self.acc(*weight) {
                        gemm(dout, n, din, g, true, &x, false, 1.0, dw);
                    }
                    self.nodes[input.0].value = x;
                }
                if let Some(db) = self.acc(*bias) {
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Relu { input } => {
                let x = std::mem::take(&mut self.nodes[input.0].value);
                if let Some(dx) = self.acc(*input) {
                    for ((d, &xv), gv) in dx.iter_mut().zip(&x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                self.nodes[input.0].value = x;
            }
            Op::Reshape { input } => {
                if let Some(dx) = self.acc(*input) {
                    dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { a, b } => {
                let n = self.nodes[a.0].shape[0];
                let (da, db) = (self.nodes[a.0].shape[1], self.nodes[b.0].shape[1]);
                if let Some(ga) = self.acc(*a) {
                    for r in 0..n {
                        let src = &g[r * (da + db)..r * (da + db) + da];
                        ga[r * da..(r + 1) * da].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for r in 0..n {
                        let src = &g[r * (da + db) + da..(r + 1) * (da + db)];
                        gb[r * db..(r + 1) * db].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(d) = self.acc(*input) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Scale { input, factor } => {
                if let Some(d) = self.acc(*input) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
                }
            }
            Op::GatherCols { input, starts, width } => {
                let d = self.nodes[input.0].shape[1];
                if let Some(dx) = self.acc(*input) {
                    for (r, &st) in starts.iter().enumerate() {
                        for j in 0..*width {
                            dx[r * d + st + j] += g[r * width + j];
                        }
                    }
                }
            }
            Op::SoftmaxNll {
                logits,
                targets,
                weights,
                probs,
                ..
            } => {
                let k = self.nodes[logits.0].shape[1];
                if let Some(dx) = self.acc(*logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = w * g[0];
                        if scale == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dx[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                ..
            } => {
                let d = self.nodes[pred.0].shape[1];
                let x = std::mem::take(&mut self.nodes[pred.0].value);
                if let Some(dx) = self.acc(*pred) {
                    for (r, &w) in weights.iter().enumerate() {
                        let scale = w * g[0];
                        if scale == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let diff = x[r * d + j] - target[r * d + j];
                            dx[r * d + j] += scale * diff.clamp(-1.0, 1.0);
                        }
                    }
                }
                self.nodes[pred.0].value = x;
            }
            Op::PixelCe {
                logits,
                targets,
                weights,
                fg_prob,
                ..
            } => {
                let s = &self.nodes[logits.0].shape;
                let hw = s[2] * s[3];
                if let Some(dx) = self.acc(*logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        let scale = w * g[0] / hw as f64;
                        if scale == 0.0 {
                            continue;
                        }
                        for i in 0..hw {
                            let p1 = fg_prob[r * hw + i];
                            let t = targets[r * hw + i];
                            // d/d bg = p0 − [t = 0] = (1 − p1) − (1 − t) = t − p1
                            dx[r * 2 * hw + i] += scale * (t - p1);
                            dx[r * 2 * hw + hw + i] += scale * (p1 - t);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn conv2d_backward(&mut self, input: Var, weight: Var, bias: Var, geom: &ConvGeom, cols: Option<&[f64]>, g: &[f64]) {
        let ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ..
        } = *geom;
        let hw = geom.ho * geom.wo;
        let ckk = cin * kh * kw;
        if let Some(db) = self.acc(bias) {
            for i in 0..n {
                for c in 0..cout {
                    db[c] += g[(i * cout + c) * hw..(i * cout + c + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        if self.nodes[weight.0].tracked {
            let x = std::mem::take(&mut self.nodes[input.0].value);
            if let Some(dw) = self.acc(weight) {
                for i in 0..n {
                    let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                    let ci = match cols {
                        Some(c) => &c[i * ckk * hw..(i + 1) * ckk * hw],
                        None => &x[i * cin * hw..(i + 1) * cin * hw],
                    };
                    gemm(cout, hw, ckk, gi, false, ci, true, 1.0, dw);
                }
            }
            self.nodes[input.0].value = x;
        }
        if self.nodes[input.0].tracked {
            let wt = std::mem::take(&mut self.nodes[weight.0].value);
            if let Some(dx) = self.acc(input) {
                let mut dcols = vec![0.0; ckk * hw];
                for i in 0..n {
                    let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                    if geom.is_pointwise() {
                        gemm(cin, cout, hw, &wt, true, gi, false, 1.0, &mut dx[i * cin * hw..(i + 1) * cin * hw]);
                    } else {
                        gemm(ckk, cout, hw, &wt, true, gi, false, 0.0, &mut dcols);
                        col2im(geom, &dcols, &mut dx[i * cin * h * w..(i + 1) * cin * h * w]);
                    }
                }
            }
            self.nodes[weight.0].value = wt;
        }
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable log-sum-exp and softmax of one row.
pub fn softmax_row(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let lse = max + z.ln();
    (lse, exps.into_iter().map(|e| e / z).collect())
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}
