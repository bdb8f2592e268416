//! The toy two-stage detector.
//!
//! A three-block convolutional trunk feeds a proposal stage over a fixed
//! anchor grid (stride 8, three scales) and a RoI head that pools 7x7
//! crops from the stride-4 feature map. The head produces class scores,
//! class-agnostic regression deltas and, when enabled, the IoU-classification
//! branch output `q`, computed from a masked concatenation of the shared
//! feature, the scores and the deltas.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointManifest};
pub use gradcheck::{gradient_check, GradCheckReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{BilinearTap, ParamGrads, Tape, Tensor, Var};
use crate::geometry::{decode_deltas, nms_indices, BBox, DeltaVec, ScoredBox};
use crate::synthdata::Image;

/// Regression outputs are these multiples of the raw box deltas.
pub const BOX_DELTA_SCALE: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Upper bound on predicted log-size ratios before decoding.
const MAX_LOG_RATIO: f64 = 4.135;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("image is {got_h}x{got_w}, model expects {expected}x{expected}")]
    ImageSize { expected: usize, got_h: usize, got_w: usize },
    #[error("IoU branch is disabled in this architecture")]
    NoBranch,
    #[error("state shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
}

/// Which components feed the IoU branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchInputMask {
    pub use_shared: bool,
    pub use_scores: bool,
    pub use_deltas: bool,
}

impl BranchInputMask {
    pub const FULL: BranchInputMask = BranchInputMask { use_shared: true, use_scores: true, use_deltas: true };
    pub const SHARED_SCORES: BranchInputMask =
        BranchInputMask { use_shared: true, use_scores: true, use_deltas: false };

    pub fn is_valid(&self) -> bool {
        self.use_shared || self.use_scores || self.use_deltas
    }

    pub fn input_dim(&self, shared_dim: usize, num_classes: usize) -> usize {
        let mut d = 0;
        if self.use_shared {
            d += shared_dim;
        }
        if self.use_scores {
            d += num_classes + 1;
        }
        if self.use_deltas {
            d += 4;
        }
        d
    }

    /// Parses `shared+scores+deltas` style names (any non-empty subset).
    pub fn parse(s: &str) -> Option<Self> {
        let mut m = BranchInputMask { use_shared: false, use_scores: false, use_deltas: false };
        for part in s.split('+').map(str::trim) {
            match part {
                "shared" => m.use_shared = true,
                "scores" => m.use_scores = true,
                "deltas" => m.use_deltas = true,
                _ => return None,
            }
        }
        m.is_valid().then_some(m)
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.use_shared {
            parts.push("shared");
        }
        if self.use_scores {
            parts.push("scores");
        }
        if self.use_deltas {
            parts.push("deltas");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub trunk_channels: [usize; 3],
    pub rpn_channels: usize,
    pub anchor_stride: usize,
    pub anchor_sizes: Vec<f64>,
    pub pool_size: usize,
    pub shared_dim: usize,
    pub branch_enabled: bool,
    pub branch_mask: BranchInputMask,
    /// Hidden width of the branch; `None` means equal to its input width.
    pub branch_hidden: Option<usize>,
    pub post_nms_top_n: usize,
    pub rpn_nms_threshold: f64,
    pub min_box_size: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            num_classes: 3,
            trunk_channels: [12, 16, 32],
            rpn_channels: 32,
            anchor_stride: 8,
            anchor_sizes: vec![12.0, 20.0, 32.0],
            pool_size: 7,
            shared_dim: 128,
            branch_enabled: true,
            branch_mask: BranchInputMask::SHARED_SCORES,
            branch_hidden: None,
            post_nms_top_n: 64,
            rpn_nms_threshold: 0.7,
            min_box_size: 2.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidArch(m.into()));
        if !self.image_size.is_multiple_of(self.anchor_stride) || self.anchor_stride != 8 {
            return bad("anchor_stride must be 8 and divide image_size");
        }
        if !self.image_size.is_multiple_of(8) {
            return bad("image_size must be a multiple of 8");
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return bad("anchor_sizes must be positive and non-empty");
        }
        if self.num_classes < 1 || self.pool_size == 0 || self.shared_dim == 0 {
            return bad("num_classes, pool_size and shared_dim must be positive");
        }
        if !self.branch_mask.is_valid() {
            return bad("branch mask must select at least one input");
        }
        Ok(())
    }

    pub fn num_anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Side of the stride-8 feature map.
    pub fn rpn_grid(&self) -> usize {
        self.image_size / self.anchor_stride
    }

    /// Side of the stride-4 map the RoI head pools from.
    pub fn pool_grid(&self) -> usize {
        self.image_size / 4
    }

    pub fn branch_input_dim(&self) -> usize {
        self.branch_mask.input_dim(self.shared_dim, self.num_classes)
    }

    pub fn branch_hidden_dim(&self) -> usize {
        self.branch_hidden.unwrap_or_else(|| self.branch_input_dim())
    }

    /// `(name, shape, init gain)` in parameter order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, f64)> {
        let [c1, c2, c3] = self.trunk_channels;
        let r = self.rpn_channels;
        let a = self.num_anchors_per_cell();
        let f = self.shared_dim;
        let k1 = self.num_classes + 1;
        let pooled = c2 * self.pool_size * self.pool_size;
        let relu = std::f64::consts::SQRT_2;
        let head = 0.1;
        let mut v = vec![
            ("trunk.conv1.weight", vec![c1, 3, 3, 3], relu),
            ("trunk.conv1.bias", vec![c1], 0.0),
            ("trunk.conv2.weight", vec![c2, c1, 3, 3], relu),
            ("trunk.conv2.bias", vec![c2], 0.0),
            ("trunk.conv3.weight", vec![c3, c2, 3, 3], relu),
            ("trunk.conv3.bias", vec![c3], 0.0),
            ("rpn.conv.weight", vec![r, c3, 3, 3], relu),
            ("rpn.conv.bias", vec![r], 0.0),
            ("rpn.cls.weight", vec![a, r, 1, 1], head),
            ("rpn.cls.bias", vec![a], 0.0),
            ("rpn.reg.weight", vec![4 * a, r, 1, 1], head),
            ("rpn.reg.bias", vec![4 * a], 0.0),
            ("roi.fc1.weight", vec![f, pooled], relu),
            ("roi.fc1.bias", vec![f], 0.0),
            ("roi.fc2.weight", vec![f, f], relu),
            ("roi.fc2.bias", vec![f], 0.0),
            ("roi.cls.weight", vec![k1, f], head),
            ("roi.cls.bias", vec![k1], 0.0),
            ("roi.reg.weight", vec![4, f], head),
            ("roi.reg.bias", vec![4], 0.0),
        ];
        if self.branch_enabled {
            let din = self.branch_input_dim();
            let h = self.branch_hidden_dim();
            v.extend([
                ("iou.fc1.weight", vec![h, din], 1.0),
                ("iou.fc1.bias", vec![h], 0.0),
                ("iou.fc2.weight", vec![k1, h], head),
                ("iou.fc2.bias", vec![k1], 0.0),
            ]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered parameter collection of one detector. Student and teacher are
/// two instances with identical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub params: Vec<ParamTensor>,
}

/// Per-parameter gradients aligned with [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Gradients(state.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn from_tape(state: &ModelState, grads: ParamGrads) -> Self {
        let mut g = Gradients::zeros_like(state);
        for (slot, v) in grads.grads {
            for (a, x) in g.0[slot].iter_mut().zip(v) {
                *a += x;
            }
        }
        g
    }
}

// Parameter slots.
const CONV1: usize = 0;
const CONV2: usize = 2;
const CONV3: usize = 4;
const RPN_CONV: usize = 6;
const RPN_CLS: usize = 8;
const RPN_REG: usize = 10;
const FC1: usize = 12;
const FC2: usize = 14;
const ROI_CLS: usize = 16;
const ROI_REG: usize = 18;
const IOU_FC1: usize = 20;
const IOU_FC2: usize = 22;

impl ModelState {
    /// Scaled-uniform fan-in initialization with zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layout()
            .into_iter()
            .map(|(name, shape, gain)| {
                let n: usize = shape.iter().product();
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                let data = if shape.len() == 1 || gain == 0.0 {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                };
                ParamTensor { name: name.to_string(), shape, data }
            })
            .collect();
        Ok(ModelState { arch, params })
    }

    pub fn zeros(arch: ArchConfig) -> Result<Self, ModelError> {
        arch.validate()?;
        let params = arch
            .layout()
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                ParamTensor { name: name.to_string(), shape, data: vec![0.0; n] }
            })
            .collect();
        Ok(ModelState { arch, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Errors unless `other` has the same parameter names and shapes.
    pub fn check_same_shape(&self, other: &ModelState) -> Result<(), ModelError> {
        if self.params.len() != other.params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} vs {} tensors",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn branch_params(&self) -> Option<BranchParams<'_>> {
        if !self.arch.branch_enabled {
            return None;
        }
        Some(BranchParams {
            w1: &self.params[IOU_FC1].data,
            b1: &self.params[IOU_FC1 + 1].data,
            w2: &self.params[IOU_FC2].data,
            b2: &self.params[IOU_FC2 + 1].data,
            input_dim: self.arch.branch_input_dim(),
            hidden: self.arch.branch_hidden_dim(),
            outputs: self.arch.num_classes + 1,
        })
    }
}

/// Borrowed weights of the IoU branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchParams<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub input_dim: usize,
    pub hidden: usize,
    pub outputs: usize,
}

/// IoU-branch forward for one RoI: two fully-connected layers with an ELU
/// between them and a sigmoid on the output. Inputs excluded by `mask` are
/// left out of the concatenation; the others must have matching lengths.
/// `d` is the regression head output (scaled deltas).
pub fn iou_branch_forward(
    x_sh: &[f64],
    s: &[f64],
    d: &[f64],
    mask: BranchInputMask,
    params: &BranchParams<'_>,
) -> Result<Vec<f64>, ModelError> {
    let mut input = Vec::with_capacity(params.input_dim);
    if mask.use_shared {
        input.extend_from_slice(x_sh);
    }
    if mask.use_scores {
        input.extend_from_slice(s);
    }
    if mask.use_deltas {
        input.extend_from_slice(d);
    }
    if input.len() != params.input_dim {
        return Err(ModelError::Dimension { expected: params.input_dim, got: input.len() });
    }
    let hidden: Vec<f64> = (0..params.hidden)
        .map(|h| {
            let row = &params.w1[h * params.input_dim..(h + 1) * params.input_dim];
            crate::autograd::elu(params.b1[h] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>())
        })
        .collect();
    Ok((0..params.outputs)
        .map(|o| {
            let row = &params.w2[o * params.hidden..(o + 1) * params.hidden];
            crate::autograd::sigmoid(params.b2[o] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub deltas: DeltaVec,
}

/// One RoI-head output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// The proposal this detection refines.
    pub bbox: BBox,
    /// Softmax over `K` classes plus background (last).
    pub scores: Vec<f64>,
    pub deltas: DeltaVec,
    pub shared_feature: Vec<f64>,
    /// Branch output, one per class plus background; `None` without a branch.
    pub iou_scores: Option<Vec<f64>>,
}

impl Detection {
    /// Most likely foreground class and its score.
    pub fn predicted_class(&self) -> (usize, f64) {
        let k = self.scores.len() - 1;
        let mut best = (0, self.scores[0]);
        for (c, &s) in self.scores[..k].iter().enumerate() {
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    }

    pub fn refined_box(&self, image_size: usize) -> Option<BBox> {
        let b = decode_deltas(&self.bbox, &self.deltas, Some((image_size as f64, image_size as f64))).ok()?;
        b.validate().ok().map(|_| b)
    }
}

/// A final detection together with its IoU score at the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scored: ScoredBox,
    pub iou_score: Option<f64>,
}

/// Anchors in `(scale, y, x)` order, matching the proposal head's channel
/// layout.
pub fn anchor_grid(arch: &ArchConfig) -> Vec<BBox> {
    let g = arch.rpn_grid();
    let s = arch.anchor_stride as f64;
    let mut out = Vec::with_capacity(g * g * arch.anchor_sizes.len());
    for &size in &arch.anchor_sizes {
        for y in 0..g {
            for x in 0..g {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                out.push(BBox { x1: cx - size / 2.0, y1: cy - size / 2.0, x2: cx + size / 2.0, y2: cy + size / 2.0 });
            }
        }
    }
    out
}

/// Undoes [`BOX_DELTA_SCALE`] and bounds the log-size ratios.
pub fn unscale_deltas(raw: [f64; 4]) -> DeltaVec {
    DeltaVec {
        tx: raw[0] / BOX_DELTA_SCALE[0],
        ty: raw[1] / BOX_DELTA_SCALE[1],
        tw: (raw[2] / BOX_DELTA_SCALE[2]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO),
        th: (raw[3] / BOX_DELTA_SCALE[3]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO),
    }
}

/// Tape handles for one image's trunk and proposal-stage outputs.
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub pool_feat: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Var,
}

/// Tape handles for everything the losses consume.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    /// `H * W` of the proposal map.
    pub rpn_plane: usize,
    pub shared: Var,
    pub roi_logits: Var,
    pub roi_scores: Var,
    pub roi_deltas: Var,
    pub roi_q: Option<Var>,
    pub num_classes: usize,
}

/// A model bound to a tape: every parameter is a leaf on that tape.
pub struct Net<'s> {
    pub state: &'s ModelState,
    vars: Vec<Var>,
}

impl<'s> Net<'s> {
    pub fn load(tape: &mut Tape, state: &'s ModelState) -> Self {
        let vars = state
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, Tensor::new(p.shape.clone(), p.data.clone())))
            .collect();
        Net { state, vars }
    }

    fn conv(&self, tape: &mut Tape, x: Var, slot: usize, stride: usize, pad: usize) -> Var {
        tape.conv2d(x, self.vars[slot], self.vars[slot + 1], stride, pad)
    }

    fn fc(&self, tape: &mut Tape, x: Var, slot: usize) -> Var {
        tape.linear(x, self.vars[slot], self.vars[slot + 1])
    }

    pub fn backbone(&self, tape: &mut Tape, image: &Image) -> Result<Backbone, ModelError> {
        let n = self.state.arch.image_size;
        if image.height != n || image.width != n {
            return Err(ModelError::ImageSize { expected: n, got_h: image.height, got_w: image.width });
        }
        let x = tape.leaf(Tensor::new(vec![3, n, n], image.to_chw()));
        let c1 = self.conv(tape, x, CONV1, 2, 1);
        let c1 = tape.relu(c1);
        let c2 = self.conv(tape, c1, CONV2, 2, 1);
        let c2 = tape.relu(c2);
        let c3 = self.conv(tape, c2, CONV3, 2, 1);
        let c3 = tape.relu(c3);
        let r = self.conv(tape, c3, RPN_CONV, 1, 1);
        let r = tape.relu(r);
        let rpn_cls = self.conv(tape, r, RPN_CLS, 1, 0);
        let rpn_reg = self.conv(tape, r, RPN_REG, 1, 0);
        Ok(Backbone { pool_feat: c2, rpn_cls, rpn_reg })
    }

    /// Decodes every anchor, drops tiny boxes, applies class-agnostic NMS and
    /// keeps the top `post_nms_top_n`. Proposals carry no gradient.
    pub fn proposals(&self, tape: &Tape, bb: &Backbone) -> Vec<Proposal> {
        let arch = &self.state.arch;
        let anchors = anchor_grid(arch);
        let cls = tape.value(bb.rpn_cls);
        let reg = tape.value(bb.rpn_reg);
        let hw = arch.rpn_grid() * arch.rpn_grid();
        let size = arch.image_size as f64;
        let mut cands = Vec::with_capacity(anchors.len());
        for (i, anchor) in anchors.iter().enumerate() {
            let (a, pos) = (i / hw, i % hw);
            let raw: [f64; 4] = std::array::from_fn(|k| reg.data[(a * 4 + k) * hw + pos]);
            let deltas = unscale_deltas(raw);
            let Ok(bbox) = decode_deltas(anchor, &deltas, Some((size, size))) else { continue };
            if bbox.width() < arch.min_box_size || bbox.height() < arch.min_box_size {
                continue;
            }
            cands.push(Proposal { bbox, objectness: crate::autograd::sigmoid(cls.data[i]), deltas });
        }
        let scored: Vec<ScoredBox> =
            cands.iter().map(|p| ScoredBox { bbox: p.bbox, score: p.objectness, class_id: 0 }).collect();
        nms_indices(&scored, arch.rpn_nms_threshold)
            .into_iter()
            .take(arch.post_nms_top_n)
            .map(|i| cands[i])
            .collect()
    }

    /// Crop-and-resize taps: one bilinear sample at each bin center of a
    /// `pool x pool` grid, in stride-4 feature coordinates.
    fn roi_taps(&self, rois: &[BBox]) -> Vec<BilinearTap> {
        let arch = &self.state.arch;
        let p = arch.pool_size;
        let g = arch.pool_grid();
        let scale = 1.0 / 4.0;
        let mut taps = Vec::with_capacity(rois.len() * p * p);
        let coord = |v: f64| -> (usize, usize, f64) {
            let f = (v * scale - 0.5).clamp(0.0, (g - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, f - i0 as f64)
        };
        for r in rois {
            let (bw, bh) = (r.width() / p as f64, r.height() / p as f64);
            for py in 0..p {
                let (y0, y1, ly) = coord(r.y1 + (py as f64 + 0.5) * bh);
                for px in 0..p {
                    let (x0, x1, lx) = coord(r.x1 + (px as f64 + 0.5) * bw);
                    taps.push(BilinearTap {
                        idx: [y0 * g + x0, y0 * g + x1, y1 * g + x0, y1 * g + x1],
                        w: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
                    });
                }
            }
        }
        taps
    }

    pub fn roi_head(&self, tape: &mut Tape, bb: &Backbone, rois: &[BBox]) -> HeadOutputs {
        let arch = &self.state.arch;
        let per_roi = arch.pool_size * arch.pool_size;
        let pooled = tape.roi_sample(bb.pool_feat, self.roi_taps(rois), per_roi);
        let h = self.fc(tape, pooled, FC1);
        let h = tape.relu(h);
        let h = self.fc(tape, h, FC2);
        let shared = tape.relu(h);
        let roi_logits = self.fc(tape, shared, ROI_CLS);
        let roi_scores = tape.softmax_rows(roi_logits);
        let roi_deltas = self.fc(tape, shared, ROI_REG);
        let roi_q = arch.branch_enabled.then(|| {
            let m = arch.branch_mask;
            let mut parts = Vec::new();
            if m.use_shared {
                parts.push(shared);
            }
            if m.use_scores {
                parts.push(roi_scores);
            }
            if m.use_deltas {
                parts.push(roi_deltas);
            }
            let x = tape.concat_cols(&parts);
            let z = self.fc(tape, x, IOU_FC1);
            let z = tape.elu(z);
            let z = self.fc(tape, z, IOU_FC2);
            tape.sigmoid(z)
        });
        HeadOutputs {
            rpn_cls: bb.rpn_cls,
            rpn_reg: bb.rpn_reg,
            rpn_plane: arch.rpn_grid() * arch.rpn_grid(),
            shared,
            roi_logits,
            roi_scores,
            roi_deltas,
            roi_q,
            num_classes: arch.num_classes,
        }
    }

    /// Reads head values back into per-RoI detections.
    pub fn detections(&self, tape: &Tape, out: &HeadOutputs, rois: &[BBox]) -> Vec<Detection> {
        let scores = tape.value(out.roi_scores);
        let deltas = tape.value(out.roi_deltas);
        let shared = tape.value(out.shared);
        let q = out.roi_q.map(|v| tape.value(v));
        rois.iter()
            .enumerate()
            .map(|(i, &bbox)| {
                let d = deltas.row(i);
                Detection {
                    bbox,
                    scores: scores.row(i).to_vec(),
                    deltas: unscale_deltas([d[0], d[1], d[2], d[3]]),
                    shared_feature: shared.row(i).to_vec(),
                    iou_scores: q.map(|t| t.row(i).to_vec()),
                }
            })
            .collect()
    }
}

pub fn forward_proposals(state: &ModelState, image: &Image) -> Result<Vec<Proposal>, ModelError> {
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, state);
    let bb = net.backbone(&mut tape, image)?;
    Ok(net.proposals(&tape, &bb))
}

pub fn forward_roi(state: &ModelState, image: &Image, proposals: &[BBox]) -> Result<Vec<Detection>, ModelError> {
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, state);
    let bb = net.backbone(&mut tape, image)?;
    let out = net.roi_head(&mut tape, &bb, proposals);
    Ok(net.detections(&tape, &out, proposals))
}

/// Proposals, RoI head, box decoding, background removal, score threshold
/// (strict) and class-wise NMS. Output is sorted by score, descending.
pub fn predict(
    state: &ModelState,
    image: &Image,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Prediction>, ModelError> {
    let mut tape = Tape::new();
    let net = Net::load(&mut tape, state);
    let bb = net.backbone(&mut tape, image)?;
    let proposals: Vec<BBox> = net.proposals(&tape, &bb).into_iter().map(|p| p.bbox).collect();
    let out = net.roi_head(&mut tape, &bb, &proposals);
    let dets = net.detections(&tape, &out, &proposals);
    Ok(postprocess(&dets, state.arch.image_size, score_threshold, nms_threshold))
}

pub fn postprocess(
    dets: &[Detection],
    image_size: usize,
    score_threshold: f64,
    nms_threshold: f64,
) -> Vec<Prediction> {
    let mut cands = Vec::new();
    for d in dets {
        let (class_id, score) = d.predicted_class();
        if score <= score_threshold {
            continue;
        }
        let Some(bbox) = d.refined_box(image_size) else { continue };
        cands.push(Prediction {
            scored: ScoredBox { bbox, score, class_id },
            iou_score: d.iou_scores.as_ref().map(|q| q[class_id]),
        });
    }
    let scored: Vec<ScoredBox> = cands.iter().map(|p| p.scored).collect();
    nms_indices(&scored, nms_threshold).into_iter().map(|i| cands[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, DataConfig};

    fn scene_image() -> Image {
        generate_scene(5, &DataConfig::default()).image
    }

    #[test]
    fn anchor_count() {
        assert_eq!(anchor_grid(&ArchConfig::default()).len(), 8 * 8 * 3);
    }

    #[test]
    fn zero_params_give_half_objectness() {
        let state = ModelState::zeros(ArchConfig::default()).unwrap();
        let props = forward_proposals(&state, &scene_image()).unwrap();
        assert!(!props.is_empty());
        assert!(props.iter().all(|p| p.objectness == 0.5));
    }

    #[test]
    fn proposal_count_bounded() {
        let state = ModelState::init(ArchConfig::default(), 1).unwrap();
        let props = forward_proposals(&state, &scene_image()).unwrap();
        assert!(props.len() <= 64);
        for p in &props {
            assert!(p.bbox.x1 >= 0.0 && p.bbox.x2 <= 64.0 && p.bbox.y1 >= 0.0 && p.bbox.y2 <= 64.0);
        }
    }

    #[test]
    fn roi_outputs_shape_and_normalization() {
        let state = ModelState::init(ArchConfig::default(), 2).unwrap();
        let img = scene_image();
        let props: Vec<BBox> = forward_proposals(&state, &img).unwrap().into_iter().map(|p| p.bbox).collect();
        let dets = forward_roi(&state, &img, &props).unwrap();
        assert_eq!(dets.len(), props.len());
        for d in &dets {
            assert!((d.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let q = d.iou_scores.as_ref().unwrap();
            assert_eq!(q.len(), 4);
            assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(d.shared_feature.len(), 128);
        }
    }

    #[test]
    fn standalone_branch_matches_tape() {
        for mask in [BranchInputMask::FULL, BranchInputMask::SHARED_SCORES, BranchInputMask::parse("deltas").unwrap()] {
            let arch = ArchConfig { branch_mask: mask, ..ArchConfig::default() };
            let state = ModelState::init(arch, 3).unwrap();
            let img = scene_image();
            let rois = vec![BBox::new(3.0, 4.0, 20.0, 30.0).unwrap(), BBox::new(30.0, 30.0, 60.0, 50.0).unwrap()];
            let mut tape = Tape::new();
            let net = Net::load(&mut tape, &state);
            let bb = net.backbone(&mut tape, &img).unwrap();
            let out = net.roi_head(&mut tape, &bb, &rois);
            let bp = state.branch_params().unwrap();
            for i in 0..rois.len() {
                let q = iou_branch_forward(
                    tape.value(out.shared).row(i),
                    tape.value(out.roi_scores).row(i),
                    tape.value(out.roi_deltas).row(i),
                    mask,
                    &bp,
                )
                .unwrap();
                for (a, b) in q.iter().zip(tape.value(out.roi_q.unwrap()).row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn branch_dims_and_zero_params() {
        let arch = ArchConfig::default();
        assert_eq!(BranchInputMask::SHARED_SCORES.input_dim(128, 3), 132);
        assert_eq!(BranchInputMask::FULL.input_dim(128, 3), 136);
        let state = ModelState::zeros(arch).unwrap();
        let bp = state.branch_params().unwrap();
        let q = iou_branch_forward(&[0.3; 128], &[0.25; 4], &[0.0; 4], BranchInputMask::SHARED_SCORES, &bp).unwrap();
        assert_eq!(q, vec![0.5; 4]);
        let err = iou_branch_forward(&[0.3; 100], &[0.25; 4], &[0.0; 4], BranchInputMask::SHARED_SCORES, &bp);
        assert_eq!(err, Err(ModelError::Dimension { expected: 132, got: 104 }));
    }

    #[test]
    fn mask_parsing() {
        assert_eq!(BranchInputMask::parse("shared+scores"), Some(BranchInputMask::SHARED_SCORES));
        assert_eq!(BranchInputMask::parse("shared+scores+deltas"), Some(BranchInputMask::FULL));
        assert_eq!(BranchInputMask::parse(""), None);
        assert_eq!(BranchInputMask::parse("shared+bogus"), None);
        assert_eq!(BranchInputMask::FULL.name(), "shared+scores+deltas");
    }

    #[test]
    fn predict_threshold_behaviour() {
        let state = ModelState::init(ArchConfig::default(), 4).unwrap();
        let img = scene_image();
        assert!(predict(&state, &img, 1.0, 0.5).unwrap().is_empty());
        let hi = predict(&state, &img, 0.3, 0.5).unwrap();
        let lo = predict(&state, &img, 0.0, 0.5).unwrap();
        for p in &hi {
            assert!(lo.contains(p));
        }
        for p in &lo {
            let b = p.scored.bbox;
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            assert!(p.iou_score.is_some());
        }
        assert!(lo.windows(2).all(|w| w[0].scored.score >= w[1].scored.score));
    }

    #[test]
    fn forward_is_deterministic() {
        let state = ModelState::init(ArchConfig::default(), 9).unwrap();
        let img = scene_image();
        assert_eq!(predict(&state, &img, 0.0, 0.5).unwrap(), predict(&state, &img, 0.0, 0.5).unwrap());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let state = ModelState::zeros(ArchConfig::default()).unwrap();
        let img = Image::filled(32, 32, 0.0);
        assert!(matches!(forward_proposals(&state, &img), Err(ModelError::ImageSize { .. })));
    }
}
