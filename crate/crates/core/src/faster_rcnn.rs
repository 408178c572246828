//! Faster R-CNN: a region proposal network over shared convolutional
//! features, an RoI-pooled detection head, and the 4-step alternating
//! training schedule that leaves both heads on one backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Eq2Multiplier, RunConfig};
use crate::data_io::{decode_image, DatasetTable};
use crate::error::{Error, Result};
use crate::evalkit::{Detection, Detector};
use crate::geometry::{
    decode_box, encode_box, generate_anchors, iou, nms, AnchorGrid, BBox, BoxDelta, ScoredBox,
};
use crate::nnet::{
    backbone_stride, conv_backbone, roi_maxpool, roi_maxpool_backward, smooth_l1, softmax_ce_loss,
    Conv2d, Fc, Sequential, SgdmState, Tensor,
};
use crate::util::{derive_seed, TrainLog};

const SALT_STEP1: u64 = 0x11;
const SALT_STEP2: u64 = 0x12;
const SALT_STEP3: u64 = 0x13;
const SALT_STEP4: u64 = 0x14;

// ---------------------------------------------------------------------------
// RPN head
// ---------------------------------------------------------------------------

/// The mini-network slid over the shared feature map: an n x n conv with
/// relu, then two sibling 1x1 convs for 2-way objectness and 4-way box
/// deltas per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub mid: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

/// Activations cached by [`RpnHead::forward`].
pub struct RpnTrace {
    featmap: Tensor,
    mid_z: Tensor,
    mid_a: Tensor,
}

impl RpnHead {
    /// `channels`: feature-map channels; `k`: anchors per location;
    /// `window`: the sliding window size n (odd).
    pub fn new(channels: usize, k: usize, window: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(window % 2 == 1, "rpn window must be odd");
        // Output convs start at zero: objectness is flat and deltas are the
        // identity until training says otherwise, so untrained anchors can
        // never outrank learned ones.
        let mut cls = Conv2d::new(channels, 2 * k, 1, 1, 0, rng);
        cls.weight = cls.weight.zeros_like();
        let mut reg = Conv2d::new(channels, 4 * k, 1, 1, 0, rng);
        reg.weight = reg.weight.zeros_like();
        RpnHead {
            mid: Conv2d::new(channels, channels, window, 1, (window - 1) / 2, rng),
            cls,
            reg,
        }
    }

    pub fn k(&self) -> usize {
        self.cls.out_channels() / 2
    }

    /// Objectness logits `[2k, h, w]` and deltas `[4k, h, w]`.
    pub fn forward(&self, featmap: &Tensor) -> Result<(Tensor, Tensor, RpnTrace)> {
        let mid_z = self.mid.forward(featmap)?;
        let mid_a = Tensor::from_vec(
            mid_z.shape(),
            mid_z.data().iter().map(|&v| v.max(0.0)).collect(),
        );
        let cls = self.cls.forward(&mid_a)?;
        let reg = self.reg.forward(&mid_a)?;
        Ok((
            cls,
            reg,
            RpnTrace {
                featmap: featmap.clone(),
                mid_z,
                mid_a,
            },
        ))
    }

    /// Backprop both sibling outputs; returns the feature-map gradient and
    /// parameter grads aligned with [`RpnHead::params`].
    pub fn backward(&self, trace: &RpnTrace, g_cls: &Tensor, g_reg: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (ga_cls, cls_g) = self.cls.backward(&trace.mid_a, g_cls);
        let (ga_reg, reg_g) = self.reg.backward(&trace.mid_a, g_reg);
        let mut ga = ga_cls;
        ga.add_scaled(&ga_reg, 1.0);
        let gz = Tensor::from_vec(
            trace.mid_z.shape(),
            trace
                .mid_z
                .data()
                .iter()
                .zip(ga.data())
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
        );
        let (g_feat, mid_g) = self.mid.backward(&trace.featmap, &gz);
        let mut grads = mid_g;
        grads.extend(cls_g);
        grads.extend(reg_g);
        (g_feat, grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.mid.weight,
            &self.mid.bias,
            &self.cls.weight,
            &self.cls.bias,
            &self.reg.weight,
            &self.reg.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.mid.weight,
            &mut self.mid.bias,
            &mut self.cls.weight,
            &mut self.cls.bias,
            &mut self.reg.weight,
            &mut self.reg.bias,
        ]
    }
}

// ---------------------------------------------------------------------------
// anchor labeling and sampling
// ---------------------------------------------------------------------------

/// Training state of one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct AnchorLabels {
    pub states: Vec<AnchorState>,
}

impl AnchorLabels {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, AnchorState::Positive(_)))
            .map(|(i, _)| i)
    }
}

/// Label every anchor: positive above `pos_iou` with any ground truth or as
/// a ground truth's best in-bounds anchor (even below the threshold),
/// negative below `neg_iou`, otherwise ignored. Anchors crossing the image
/// boundary are ignored outright.
pub fn label_anchors(
    grid: &AnchorGrid,
    gts: &[BBox],
    img_w: f64,
    img_h: f64,
    pos_iou: f64,
    neg_iou: f64,
) -> AnchorLabels {
    let n = grid.anchors.len();
    let mut states = vec![AnchorState::Ignore; n];
    let in_bounds: Vec<bool> = grid.anchors.iter().map(|a| a.inside(img_w, img_h)).collect();

    let mut best_gt = vec![(usize::MAX, 0.0f64); n];
    for (ai, anchor) in grid.anchors.iter().enumerate() {
        if !in_bounds[ai] {
            continue;
        }
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if best_gt[ai].0 == usize::MAX || v > best_gt[ai].1 {
                best_gt[ai] = (gi, v);
            }
        }
        states[ai] = if gts.is_empty() || best_gt[ai].1 < neg_iou {
            AnchorState::Negative
        } else if best_gt[ai].1 > pos_iou {
            AnchorState::Positive(best_gt[ai].0)
        } else {
            AnchorState::Ignore
        };
    }

    // Argmax fallback: each ground truth claims its single best in-bounds
    // anchor, however small the overlap (as long as it is positive).
    for (gi, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ai, anchor) in grid.anchors.iter().enumerate() {
            if !in_bounds[ai] {
                continue;
            }
            let v = iou(anchor, gt);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((ai, v));
            }
        }
        if let Some((ai, _)) = best {
            states[ai] = AnchorState::Positive(gi);
        }
    }

    AnchorLabels { states }
}

/// Draw the training mini-batch: up to `max_positive` positives uniformly,
/// the remainder filled with negatives; the batch shrinks when there are
/// not enough non-ignored anchors. Errors when every anchor is ignored.
pub fn sample_rpn_batch(
    labels: &AnchorLabels,
    batch: usize,
    max_positive: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, s) in labels.states.iter().enumerate() {
        match s {
            AnchorState::Positive(_) => pos.push(i),
            AnchorState::Negative => neg.push(i),
            AnchorState::Ignore => {}
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::Training("no usable anchors to sample".into()));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min(max_positive);
    let n_neg = neg.len().min(batch - n_pos);
    let mut out = pos[..n_pos].to_vec();
    out.extend_from_slice(&neg[..n_neg]);
    Ok(out)
}

/// Regression target per anchor: `encode(gt, anchor)` for positives.
pub fn regression_targets(grid: &AnchorGrid, labels: &AnchorLabels, gts: &[BBox]) -> Vec<Option<BoxDelta>> {
    labels
        .states
        .iter()
        .enumerate()
        .map(|(ai, s)| match s {
            AnchorState::Positive(gi) => Some(encode_box(&gts[*gi], &grid.anchors[ai])),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// the multi-task RPN loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RpnLossCfg {
    /// Weight on the regression term.
    pub lambda: f64,
    /// Regression normalizer: the number of anchor grid locations.
    pub n_reg: usize,
    pub multiplier: Eq2Multiplier,
}

/// Split a flat anchor index into (cell row, cell col, per-cell anchor).
fn split_anchor_index(grid: &AnchorGrid, ai: usize) -> (usize, usize, usize) {
    let k = grid.k();
    let cell = ai / k;
    (cell / grid.feat_w, cell % grid.feat_w, ai % k)
}

/// Two-term objectness + box-regression loss over a sampled anchor batch.
///
/// Classification: 2-way cross-entropy per sampled anchor, averaged over
/// the batch. Regression: smooth L1 between predicted and target deltas,
/// summed over anchors whose multiplier is non-zero, normalized by `n_reg`
/// and weighted by `lambda`. With the `Label` multiplier only positives
/// contribute; with `Prediction` the literal objectness probability scales
/// each anchor's regression term (and receives gradient through it).
///
/// Returns the loss and gradients wrt the two head outputs (zero at
/// unsampled anchors).
pub fn rpn_loss(
    cls_logits: &Tensor,
    reg: &Tensor,
    grid: &AnchorGrid,
    labels: &AnchorLabels,
    targets: &[Option<BoxDelta>],
    sampled: &[usize],
    cfg: &RpnLossCfg,
) -> Result<(f64, Tensor, Tensor)> {
    assert!(!sampled.is_empty(), "rpn_loss needs a sampled batch");
    let (h, w) = (cls_logits.shape()[1], cls_logits.shape()[2]);
    let hw = h * w;
    let n_cls = sampled.len() as f64;
    let reg_norm = cfg.lambda / cfg.n_reg as f64;

    let mut g_cls = cls_logits.zeros_like();
    let mut g_reg = reg.zeros_like();
    let mut loss = 0.0;

    for &ai in sampled {
        let (i, j, a) = split_anchor_index(grid, ai);
        let ij = i * w + j;
        let idx_bg = (2 * a) * hw + ij;
        let idx_fg = (2 * a + 1) * hw + ij;
        let logits = Tensor::from_vec(&[2], vec![cls_logits.data()[idx_bg], cls_logits.data()[idx_fg]]);
        let is_pos = matches!(labels.states[ai], AnchorState::Positive(_));
        let (ce, ce_grad) = softmax_ce_loss(&logits, if is_pos { 1 } else { 0 })?;
        loss += ce / n_cls;
        g_cls.data_mut()[idx_bg] += ce_grad.data()[0] / n_cls;
        g_cls.data_mut()[idx_fg] += ce_grad.data()[1] / n_cls;

        if let Some(target) = targets[ai] {
            let pred: Vec<f64> = (0..4).map(|c| reg.data()[(4 * a + c) * hw + ij]).collect();
            let (l1, l1_grad) = smooth_l1(&pred, &target.to_array());
            let multiplier = match cfg.multiplier {
                Eq2Multiplier::Label => {
                    if is_pos {
                        1.0
                    } else {
                        0.0
                    }
                }
                Eq2Multiplier::Prediction => {
                    // p_fg from the 2-way softmax.
                    let m = logits.data()[0].max(logits.data()[1]);
                    let e0 = (logits.data()[0] - m).exp();
                    let e1 = (logits.data()[1] - m).exp();
                    e1 / (e0 + e1)
                }
            };
            if multiplier != 0.0 {
                loss += reg_norm * multiplier * l1;
                for (c, g) in l1_grad.iter().enumerate() {
                    g_reg.data_mut()[(4 * a + c) * hw + ij] += reg_norm * multiplier * g;
                }
                if cfg.multiplier == Eq2Multiplier::Prediction {
                    // d(p_fg)/d(logit_fg) = p(1-p); d/d(logit_bg) = -p(1-p).
                    let dp = multiplier * (1.0 - multiplier);
                    g_cls.data_mut()[idx_fg] += reg_norm * l1 * dp;
                    g_cls.data_mut()[idx_bg] -= reg_norm * l1 * dp;
                }
            }
        }
    }
    Ok((loss, g_cls, g_reg))
}

// ---------------------------------------------------------------------------
// proposals from the RPN
// ---------------------------------------------------------------------------

/// Decode, clip, score, and prune RPN outputs into at most `post_nms_top`
/// scored proposals for one image.
///
/// Anchors crossing the image boundary are skipped outright: they are
/// excluded from every training batch, so their scores carry no signal.
/// Decoded boxes are still clipped (regression may push them outside).
pub fn rpn_propose_on_featmap(
    rpn: &RpnHead,
    featmap: &Tensor,
    grid: &AnchorGrid,
    img_w: f64,
    img_h: f64,
    pre_nms_top: usize,
    post_nms_top: usize,
    nms_thresh: f64,
) -> Result<Vec<ScoredBox>> {
    let (cls, reg, _) = rpn.forward(featmap)?;
    let (h, w) = (cls.shape()[1], cls.shape()[2]);
    let hw = h * w;

    let mut cands: Vec<ScoredBox> = Vec::new();
    for ai in 0..grid.anchors.len() {
        if !grid.anchors[ai].inside(img_w, img_h) {
            continue;
        }
        let (i, j, a) = split_anchor_index(grid, ai);
        let ij = i * w + j;
        let l_bg = cls.data()[(2 * a) * hw + ij];
        let l_fg = cls.data()[(2 * a + 1) * hw + ij];
        let m = l_bg.max(l_fg);
        let p_fg = ((l_fg - m).exp()) / ((l_bg - m).exp() + (l_fg - m).exp());
        let delta = BoxDelta::new(
            reg.data()[(4 * a) * hw + ij],
            reg.data()[(4 * a + 1) * hw + ij],
            reg.data()[(4 * a + 2) * hw + ij],
            reg.data()[(4 * a + 3) * hw + ij],
        );
        match decode_box(&delta, &grid.anchors[ai], Some((img_w, img_h))) {
            Ok(bbox) => cands.push(ScoredBox::new(bbox, p_fg)),
            Err(_) => continue, // degenerate decode: drop
        }
    }

    // Stable score ordering, then NMS, then the budget cap.
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&x, &y| cands[y].score.partial_cmp(&cands[x].score).unwrap().then(x.cmp(&y)));
    let top: Vec<ScoredBox> = order.iter().take(pre_nms_top).map(|&i| cands[i]).collect();
    let keep = nms(&top, nms_thresh);
    Ok(keep.iter().take(post_nms_top).map(|&i| top[i]).collect())
}

/// Build the anchor grid matching a feature map under the run config.
pub fn grid_for_featmap(featmap: &Tensor, cfg: &RunConfig) -> AnchorGrid {
    let stride = backbone_stride(cfg.conv_blocks) as f64;
    generate_anchors(
        featmap.shape()[2],
        featmap.shape()[1],
        stride,
        &cfg.anchor_scales,
        &cfg.anchor_ratios,
    )
}

/// Full proposal pass from an image (one backbone forward inside).
pub fn rpn_propose(image: &Tensor, model: &FasterModel) -> Result<Vec<ScoredBox>> {
    let cfg = &model.config;
    let featmap = model.backbone.forward(image)?.output;
    let grid = grid_for_featmap(&featmap, cfg);
    rpn_propose_on_featmap(
        &model.rpn,
        &featmap,
        &grid,
        image.shape()[2] as f64,
        image.shape()[1] as f64,
        cfg.pre_nms_top,
        cfg.post_nms_top,
        cfg.proposal_nms_thresh,
    )
}

// ---------------------------------------------------------------------------
// detection head
// ---------------------------------------------------------------------------

/// RoI-pooled detection head: fc + relu trunk, then sibling (N+1)-way
/// classification and per-class box-delta layers. Class `classes[i]` owns
/// logit `i + 1` and delta slice `4i..4i+4`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetHead {
    pub fc1: Fc,
    pub cls: Fc,
    pub reg: Fc,
}

pub struct DetTrace {
    pooled: Tensor,
    z: Tensor,
    a: Tensor,
}

impl DetHead {
    pub fn new(pooled_len: usize, fc_dim: usize, n_real_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        // Zero-initialized deltas: refinement starts as the identity.
        let mut reg = Fc::new(fc_dim, 4 * n_real_classes, rng);
        reg.weight = reg.weight.zeros_like();
        DetHead {
            fc1: Fc::new(pooled_len, fc_dim, rng),
            cls: Fc::new(fc_dim, n_real_classes + 1, rng),
            reg,
        }
    }

    pub fn n_real_classes(&self) -> usize {
        self.cls.out_dim() - 1
    }

    pub fn forward(&self, pooled: &Tensor) -> Result<(Tensor, Tensor, DetTrace)> {
        let z = self.fc1.forward(pooled)?;
        let a = Tensor::from_vec(z.shape(), z.data().iter().map(|&v| v.max(0.0)).collect());
        let cls = self.cls.forward(&a)?;
        let reg = self.reg.forward(&a)?;
        Ok((
            cls,
            reg,
            DetTrace {
                pooled: pooled.clone(),
                z,
                a,
            },
        ))
    }

    pub fn backward(&self, trace: &DetTrace, g_cls: &Tensor, g_reg: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (ga_cls, cls_g) = self.cls.backward(&trace.a, g_cls);
        let (ga_reg, reg_g) = self.reg.backward(&trace.a, g_reg);
        let mut ga = ga_cls;
        ga.add_scaled(&ga_reg, 1.0);
        let gz = Tensor::from_vec(
            trace.z.shape(),
            trace
                .z
                .data()
                .iter()
                .zip(ga.data())
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
        );
        let (g_pooled, fc1_g) = self.fc1.backward(&trace.pooled, &gz);
        let mut grads = fc1_g;
        grads.extend(cls_g);
        grads.extend(reg_g);
        (g_pooled, grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.fc1.weight,
            &self.fc1.bias,
            &self.cls.weight,
            &self.cls.bias,
            &self.reg.weight,
            &self.reg.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.cls.weight,
            &mut self.cls.bias,
            &mut self.reg.weight,
            &mut self.reg.bias,
        ]
    }
}

/// Training label for a detection-head RoI under the patch rule: positive
/// inside `[pos_low, 1]`, negative inside `[0, neg_high]`, the gap between
/// is excluded from training.
pub fn det_train_label(best_class: usize, best_iou: f64, pos_low: f64, neg_high: f64) -> Option<usize> {
    if best_iou >= pos_low {
        Some(best_class)
    } else if best_iou <= neg_high {
        Some(0)
    } else {
        None
    }
}

/// Per-RoI detection-head loss: softmax cross-entropy over classes plus
/// `lambda` times smooth L1 on the labeled class's delta slice (positives
/// only). Returns gradients wrt both head outputs.
fn det_loss(
    cls_logits: &Tensor,
    reg: &Tensor,
    label: usize,
    target: Option<BoxDelta>,
    lambda: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let (ce, g_cls) = softmax_ce_loss(cls_logits, label)?;
    let mut g_reg = reg.zeros_like();
    let mut loss = ce;
    if label > 0 {
        let target = target.expect("positive roi must carry a regression target");
        let base = 4 * (label - 1);
        let pred: Vec<f64> = reg.data()[base..base + 4].to_vec();
        let (l1, l1_grad) = smooth_l1(&pred, &target.to_array());
        loss += lambda * l1;
        for (c, g) in l1_grad.iter().enumerate() {
            g_reg.data_mut()[base + c] = lambda * g;
        }
    }
    Ok((loss, g_cls, g_reg))
}

// ---------------------------------------------------------------------------
// the trained model
// ---------------------------------------------------------------------------

/// A trained Faster R-CNN detector. Both heads read the single `backbone`;
/// perturbing it changes both heads' outputs.
#[derive(Debug, Clone)]
pub struct FasterModel {
    pub config: RunConfig,
    pub backbone: Sequential,
    pub rpn: RpnHead,
    pub det: DetHead,
    /// Real class ids; `classes[i]` owns detection-head logit `i + 1`.
    pub classes: Vec<usize>,
}

/// Instrumentation counters from one detection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectStats {
    pub backbone_passes: usize,
    pub proposals_scored: usize,
}

/// One-pass detection: a single backbone forward feeds both the RPN
/// proposals and the RoI head.
pub fn frcnn_detect_with_stats(image: &Tensor, model: &FasterModel) -> Result<(Vec<Detection>, DetectStats)> {
    let cfg = &model.config;
    let (img_h, img_w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let mut stats = DetectStats::default();

    let featmap = model.backbone.forward(image)?.output;
    stats.backbone_passes += 1;

    let grid = grid_for_featmap(&featmap, cfg);
    let proposals = rpn_propose_on_featmap(
        &model.rpn,
        &featmap,
        &grid,
        img_w,
        img_h,
        cfg.pre_nms_top,
        cfg.post_nms_top,
        cfg.proposal_nms_thresh,
    )?;

    let scale = 1.0 / backbone_stride(cfg.conv_blocks) as f64;
    let mut per_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); model.classes.len()];
    for prop in &proposals {
        let Ok((pooled, _)) = roi_maxpool(&featmap, &prop.bbox, scale, cfg.roi_pool_size, cfg.roi_pool_size)
        else {
            continue;
        };
        let (cls_logits, reg, _) = model.det.forward(&pooled)?;
        stats.proposals_scored += 1;
        let probs = crate::nnet::softmax(cls_logits.data());
        for (i, _) in model.classes.iter().enumerate() {
            let p = probs[i + 1];
            if p < cfg.det_score_thresh {
                continue;
            }
            let delta = BoxDelta::new(
                reg.data()[4 * i],
                reg.data()[4 * i + 1],
                reg.data()[4 * i + 2],
                reg.data()[4 * i + 3],
            );
            let refined = match decode_box(&delta, &prop.bbox, Some((img_w, img_h))) {
                Ok(b) => b,
                Err(_) => match prop.bbox.clip(img_w, img_h) {
                    Some(b) => b,
                    None => continue,
                },
            };
            per_class[i].push((refined, p));
        }
    }

    let mut detections = Vec::new();
    for (i, cands) in per_class.iter().enumerate() {
        let scored: Vec<ScoredBox> = cands.iter().map(|&(b, s)| ScoredBox::new(b, s)).collect();
        for idx in nms(&scored, cfg.nms_iou_thresh) {
            detections.push(Detection::new(model.classes[i], scored[idx].bbox, scored[idx].score));
        }
    }
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok((detections, stats))
}

pub fn frcnn_detect(image: &Tensor, model: &FasterModel) -> Result<Vec<Detection>> {
    frcnn_detect_with_stats(image, model).map(|(d, _)| d)
}

impl Detector for FasterModel {
    fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        frcnn_detect(image, self)
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Train (or fine-tune) backbone + RPN head, image-centric, one sampled
/// anchor batch per image per epoch. When `train_backbone` is false the
/// shared conv layers are frozen and only the head moves.
/// Returns the per-epoch mean losses.
fn train_rpn_stage(
    backbone: &mut Sequential,
    rpn: &mut RpnHead,
    images: &[Tensor],
    gts_per_image: &[Vec<BBox>],
    cfg: &RunConfig,
    epochs: usize,
    train_backbone: bool,
    seed: u64,
    log: &mut TrainLog,
    stage_name: &str,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = if train_backbone {
        let mut params = backbone.params();
        params.extend(rpn.params());
        SgdmState::new(cfg.learning_rate, cfg.momentum, &params)
    } else {
        SgdmState::new(cfg.learning_rate, cfg.momentum, &rpn.params())
    };

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let image = &images[i];
            let trace = backbone.forward(image)?;
            let featmap = &trace.output;
            let grid = grid_for_featmap(featmap, cfg);
            let labels = label_anchors(
                &grid,
                &gts_per_image[i],
                image.shape()[2] as f64,
                image.shape()[1] as f64,
                cfg.rpn_pos_iou,
                cfg.rpn_neg_iou,
            );
            let Ok(sampled) = sample_rpn_batch(&labels, cfg.rpn_batch_anchors, cfg.rpn_max_positive, &mut rng)
            else {
                continue;
            };
            let targets = regression_targets(&grid, &labels, &gts_per_image[i]);
            let (cls, reg, rpn_trace) = rpn.forward(featmap)?;
            let loss_cfg = RpnLossCfg {
                lambda: cfg.rpn_lambda,
                n_reg: grid.feat_w * grid.feat_h,
                multiplier: cfg.eq2_multiplier,
            };
            let (loss, g_cls, g_reg) = rpn_loss(&cls, &reg, &grid, &labels, &targets, &sampled, &loss_cfg)?;
            total += loss;
            steps += 1;

            let (g_feat, head_grads) = rpn.backward(&rpn_trace, &g_cls, &g_reg);
            if train_backbone {
                let (_, bb_grads) = backbone.backward(&trace, &g_feat);
                let mut grads = Sequential::flatten_grads(bb_grads);
                grads.extend(head_grads);
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                let mut params = backbone.params_mut();
                params.extend(rpn.params_mut());
                opt.step(&mut params, &grad_refs);
            } else {
                let grad_refs: Vec<&Tensor> = head_grads.iter().collect();
                opt.step(&mut rpn.params_mut(), &grad_refs);
            }
        }
        if steps == 0 {
            return Err(Error::Training(format!("{stage_name}: no trainable images")));
        }
        let mean = total / steps as f64;
        epoch_losses.push(mean);
        log.log(format!("{stage_name} epoch {}/{} rpn loss {:.6}", epoch + 1, epochs, mean));
    }
    Ok(epoch_losses)
}

/// Labeled RoIs for one image under the patch rule, with regression targets.
fn label_rois(
    proposals: &[BBox],
    gts: &[(usize, BBox)],
    cfg: &RunConfig,
) -> (Vec<usize>, Vec<Option<BoxDelta>>, Vec<usize>) {
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    let mut kept = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let mut best: Option<(usize, BBox, f64)> = None;
        for &(class, g) in gts {
            let v = iou(p, &g);
            if best.as_ref().is_none_or(|&(_, _, bv)| v > bv) {
                best = Some((class, g, v));
            }
        }
        let (bclass, bbox, biou) = best.map(|(c, g, v)| (c, g, v)).unwrap_or((0, *p, 0.0));
        match det_train_label(bclass, biou, cfg.det_pos_iou_low, cfg.det_neg_iou_high) {
            Some(0) => {
                labels.push(0);
                targets.push(None);
                kept.push(pi);
            }
            Some(class) => {
                labels.push(class);
                targets.push(Some(encode_box(&bbox, p)));
                kept.push(pi);
            }
            None => {}
        }
    }
    (labels, targets, kept)
}

/// Train (or fine-tune) backbone + detection head on fixed proposals.
fn train_det_stage(
    backbone: &mut Sequential,
    det: &mut DetHead,
    images: &[Tensor],
    rows: &DatasetTable,
    proposals: &[Vec<BBox>],
    class_index: &std::collections::BTreeMap<usize, usize>,
    cfg: &RunConfig,
    epochs: usize,
    train_backbone: bool,
    seed: u64,
    log: &mut TrainLog,
    stage_name: &str,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = if train_backbone {
        let mut params = backbone.params();
        params.extend(det.params());
        SgdmState::new(cfg.learning_rate, cfg.momentum, &params)
    } else {
        SgdmState::new(cfg.learning_rate, cfg.momentum, &det.params())
    };
    let scale = 1.0 / backbone_stride(cfg.conv_blocks) as f64;

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut saw_positive = false;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for &i in &order {
            let (labels, targets, kept) = label_rois(&proposals[i], &rows.rows[i].gts, cfg);
            if kept.is_empty() {
                continue;
            }
            // Remap labels to contiguous head indices (0 stays background).
            let head_labels: Vec<usize> = labels
                .iter()
                .map(|&l| if l == 0 { 0 } else { class_index[&l] + 1 })
                .collect();
            let batch = match crate::rcnn::sample_finetune_batch(&head_labels, &mut rng) {
                Ok(_) => {
                    // Use the detection-head batch shape, not the 32/96 rule.
                    sample_det_batch(&head_labels, cfg.det_batch, cfg.det_max_pos, &mut rng)
                }
                Err(_) => continue,
            };

            let trace = backbone.forward(&images[i])?;
            let featmap = &trace.output;
            let mut g_feat = featmap.zeros_like();
            let mut head_grads: Option<Vec<Tensor>> = None;
            let inv_b = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &bi in &batch {
                let roi = proposals[i][kept[bi]];
                let Ok((pooled, pool_trace)) =
                    roi_maxpool(featmap, &roi, scale, cfg.roi_pool_size, cfg.roi_pool_size)
                else {
                    continue;
                };
                let (cls_logits, reg, det_trace) = det.forward(&pooled)?;
                let (loss, g_cls, g_reg) =
                    det_loss(&cls_logits, &reg, head_labels[bi], targets[bi], cfg.det_lambda)?;
                batch_loss += loss * inv_b;
                if head_labels[bi] > 0 {
                    saw_positive = true;
                }
                let (g_pooled, hg) = det.backward(&det_trace, &g_cls, &g_reg);
                match head_grads.as_mut() {
                    None => {
                        let mut hg = hg;
                        for t in hg.iter_mut() {
                            t.scale(inv_b);
                        }
                        head_grads = Some(hg);
                    }
                    Some(acc) => {
                        for (a, t) in acc.iter_mut().zip(hg.iter()) {
                            a.add_scaled(t, inv_b);
                        }
                    }
                }
                if train_backbone {
                    let mut g_pooled_scaled = g_pooled;
                    g_pooled_scaled.scale(inv_b);
                    roi_maxpool_backward(&pool_trace, &g_pooled_scaled, &mut g_feat);
                }
            }
            let Some(hg) = head_grads else { continue };
            total += batch_loss;
            steps += 1;
            if train_backbone {
                let (_, bb_grads) = backbone.backward(&trace, &g_feat);
                let mut grads = Sequential::flatten_grads(bb_grads);
                grads.extend(hg);
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                let mut params = backbone.params_mut();
                params.extend(det.params_mut());
                opt.step(&mut params, &grad_refs);
            } else {
                let grad_refs: Vec<&Tensor> = hg.iter().collect();
                opt.step(&mut det.params_mut(), &grad_refs);
            }
        }
        if steps == 0 {
            return Err(Error::Training(format!("{stage_name}: no trainable images")));
        }
        let mean = total / steps as f64;
        epoch_losses.push(mean);
        log.log(format!("{stage_name} epoch {}/{} det loss {:.6}", epoch + 1, epochs, mean));
    }
    if !saw_positive {
        return Err(Error::Training(format!(
            "{stage_name}: no positive proposals in any epoch"
        )));
    }
    Ok(epoch_losses)
}

fn sample_det_batch(labels: &[usize], batch: usize, max_pos: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(batch - n_pos);
    let mut out = pos[..n_pos].to_vec();
    out.extend_from_slice(&neg[..n_neg]);
    out
}

/// Proposals for detection-head training: the RPN's top boxes augmented
/// with the ground-truth boxes (guaranteeing positives at toy scale) and a
/// few jittered copies per ground truth (giving the box regressor non-zero
/// targets to learn from).
fn training_proposals(
    backbone: &Sequential,
    rpn: &RpnHead,
    images: &[Tensor],
    rows: &DatasetTable,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<Vec<BBox>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len());
    for (image, row) in images.iter().zip(&rows.rows) {
        let (img_h, img_w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        let featmap = backbone.forward(image)?.output;
        let grid = grid_for_featmap(&featmap, cfg);
        let scored = rpn_propose_on_featmap(
            rpn,
            &featmap,
            &grid,
            img_w,
            img_h,
            cfg.pre_nms_top,
            cfg.det_train_proposals,
            cfg.proposal_nms_thresh,
        )?;
        let mut boxes: Vec<BBox> = scored.iter().map(|s| s.bbox).collect();
        for &(_, g) in &row.gts {
            boxes.push(g);
            for _ in 0..cfg.regressor_jitter_per_gt {
                boxes.push(crate::rcnn::jitter_box(&g, cfg.det_pos_iou_low, img_w, img_h, &mut rng));
            }
        }
        out.push(boxes);
    }
    Ok(out)
}

/// The 4-step alternating schedule: (1) train RPN with its own backbone,
/// (2) train a fresh backbone + detection head on step-1 proposals,
/// (3) freeze that shared backbone and fine-tune the RPN head on it,
/// (4) keep it frozen and fine-tune the detection head on step-3 proposals.
/// The result is a single shared backbone serving both heads.
pub fn alternating_train(train: &DatasetTable, cfg: &RunConfig, log: &mut TrainLog) -> Result<FasterModel> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let classes = train.class_ids();
    if classes.is_empty() {
        return Err(Error::Config("training set has no ground-truth boxes".into()));
    }
    let class_index: std::collections::BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let images: Vec<Tensor> = train
        .rows
        .iter()
        .map(|r| decode_image(&r.image_path))
        .collect::<Result<_>>()?;
    let gts_boxes: Vec<Vec<BBox>> = train
        .rows
        .iter()
        .map(|r| r.gts.iter().map(|&(_, g)| g).collect())
        .collect();

    let k = cfg.anchor_scales.len() * cfg.anchor_ratios.len();
    let pooled_len = cfg.conv_channels * cfg.roi_pool_size * cfg.roi_pool_size;

    // Step 1: RPN with its own backbone.
    log.log("faster-rcnn step 1/4: train RPN with its own backbone");
    let mut rng1 = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_STEP1));
    let mut backbone_a = conv_backbone(3, cfg.conv_channels, cfg.conv_blocks, &mut rng1);
    let mut rpn = RpnHead::new(cfg.conv_channels, k, cfg.rpn_window, &mut rng1);
    train_rpn_stage(
        &mut backbone_a,
        &mut rpn,
        &images,
        &gts_boxes,
        cfg,
        cfg.rpn_epochs,
        true,
        derive_seed(cfg.seed, SALT_STEP1 ^ 0xAA),
        log,
        "step1",
    )?;

    // Step 2: fresh backbone + detection head on step-1 proposals.
    log.log("faster-rcnn step 2/4: train detection network on RPN proposals");
    let proposals1 = training_proposals(&backbone_a, &rpn, &images, train, cfg, derive_seed(cfg.seed, SALT_STEP2 ^ 0x77))?;
    let mut rng2 = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_STEP2));
    let mut backbone_b = conv_backbone(3, cfg.conv_channels, cfg.conv_blocks, &mut rng2);
    let mut det = DetHead::new(pooled_len, cfg.fc_dim, classes.len(), &mut rng2);
    train_det_stage(
        &mut backbone_b,
        &mut det,
        &images,
        train,
        &proposals1,
        &class_index,
        cfg,
        cfg.det_epochs,
        true,
        derive_seed(cfg.seed, SALT_STEP2 ^ 0xAA),
        log,
        "step2",
    )?;

    // Step 3: freeze the shared backbone, fine-tune the RPN head only.
    log.log("faster-rcnn step 3/4: fine-tune RPN head on the shared backbone");
    train_rpn_stage(
        &mut backbone_b,
        &mut rpn,
        &images,
        &gts_boxes,
        cfg,
        cfg.rpn_finetune_epochs,
        false,
        derive_seed(cfg.seed, SALT_STEP3),
        log,
        "step3",
    )?;

    // Step 4: frozen backbone, fine-tune the detection head on fresh proposals.
    log.log("faster-rcnn step 4/4: fine-tune detection head (shared backbone frozen)");
    let proposals3 = training_proposals(&backbone_b, &rpn, &images, train, cfg, derive_seed(cfg.seed, SALT_STEP4 ^ 0x77))?;
    train_det_stage(
        &mut backbone_b,
        &mut det,
        &images,
        train,
        &proposals3,
        &class_index,
        cfg,
        cfg.det_finetune_epochs,
        false,
        derive_seed(cfg.seed, SALT_STEP4),
        log,
        "step4",
    )?;

    Ok(FasterModel {
        config: cfg.clone(),
        backbone: backbone_b,
        rpn,
        det,
        classes,
    })
}
