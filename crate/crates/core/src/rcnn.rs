//! The R-CNN pipeline: warp-with-context feature extraction, backbone
//! pre-training on synthetic patches, fine-tuning with the 32+96 batch rule,
//! per-class linear SVM scoring, closed-form ridge box regression, and
//! greedy-NMS inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data_io::{decode_image, DatasetTable};
use crate::error::{Error, Result};
use crate::evalkit::{Detection, Detector};
use crate::geometry::{decode_box, encode_box, iou, nms, BBox, BoxDelta, ScoredBox};
use crate::nnet::{conv_backbone, softmax_ce_loss, Fc, Sequential, SgdmState, Tensor, Trace};
use crate::proposals::propose;
use crate::util::{derive_seed, TrainLog};

// Salts for deriving independent RNG streams from the run seed.
const SALT_NET_INIT: u64 = 0x01;
const SALT_PRETRAIN: u64 = 0x02;
const SALT_FINETUNE: u64 = 0x03;
const SALT_SVM: u64 = 0x04;
const SALT_HEAD_SWAP: u64 = 0x05;
const SALT_JITTER: u64 = 0x06;

// ---------------------------------------------------------------------------
// warp with context
// ---------------------------------------------------------------------------

/// Parameters for proposal warping. Out-of-image samples replicate the edge
/// pixels (the only supported padding mode).
#[derive(Debug, Clone, Copy)]
pub struct WarpConfig {
    /// Context measured in output pixels, back-projected into image space.
    pub context_pixels: f64,
    /// Side length of the square warped output.
    pub output_size: usize,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            context_pixels: 16.0,
            output_size: 32,
        }
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let clamp_x = |v: isize| v.clamp(0, w as isize - 1) as usize;
    let clamp_y = |v: isize| v.clamp(0, h as isize - 1) as usize;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let p = |yy: isize, xx: isize| plane[clamp_y(yy) * w + clamp_x(xx)];
    (1.0 - fy) * ((1.0 - fx) * p(y0i, x0i) + fx * p(y0i, x0i + 1))
        + fy * ((1.0 - fx) * p(y0i + 1, x0i) + fx * p(y0i + 1, x0i + 1))
}

/// Resample `bbox` (grown by context on every side) to a fixed square.
///
/// The expansion is `context_pixels * (box_extent / output_size)` per side
/// in image space, so the context occupies a fixed share of the output no
/// matter the box size. Errors when the box misses the image entirely.
pub fn warp_with_context(image: &Tensor, bbox: &BBox, cfg: &WarpConfig) -> Result<Tensor> {
    assert!(cfg.output_size >= 1, "warp output must be non-empty");
    if image.shape().len() != 3 {
        return Err(Error::Shape(format!("warp expects [c, h, w], got {:?}", image.shape())));
    }
    let (c_n, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if bbox.clip(w as f64, h as f64).is_none() {
        return Err(Error::DegenerateBox(format!(
            "box {bbox:?} does not intersect {w}x{h} image"
        )));
    }
    let s = cfg.output_size;
    let pad_x = cfg.context_pixels * bbox.w / s as f64;
    let pad_y = cfg.context_pixels * bbox.h / s as f64;
    let x0 = bbox.x - pad_x;
    let y0 = bbox.y - pad_y;
    let we = bbox.w + 2.0 * pad_x;
    let he = bbox.h + 2.0 * pad_y;

    let mut out = Tensor::zeros(&[c_n, s, s]);
    for c in 0..c_n {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut out.data_mut()[c * s * s..(c + 1) * s * s];
        for v in 0..s {
            let sy = y0 + (v as f64 + 0.5) * he / s as f64 - 0.5;
            for u in 0..s {
                let sx = x0 + (u as f64 + 0.5) * we / s as f64 - 0.5;
                dst[v * s + u] = bilinear(plane, h, w, sx, sy);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// classification network (backbone convs + fc trunk + class head)
// ---------------------------------------------------------------------------

/// Backbone + feature trunk + classification head. The feature vector fed to
/// the SVMs and the ridge regressors is `relu(trunk(convs(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsNet {
    pub convs: Sequential,
    pub trunk: Fc,
    pub head: Fc,
}

/// Activations cached by [`ClsNet::forward`] for the backward pass.
pub struct ClsTrace {
    conv: Trace,
    z: Tensor,
    pub feat: Tensor,
}

/// Gradients for every ClsNet parameter, aligned with [`ClsNet::params`].
pub type ClsGrads = Vec<Tensor>;

impl ClsNet {
    /// Fresh network for `input_size`-pixel square RGB inputs.
    pub fn new(cfg: &RunConfig, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<ClsNet> {
        let convs = conv_backbone(3, cfg.conv_channels, cfg.conv_blocks, rng);
        let out_shape = convs.output_shape(&[3, cfg.warp_output_size, cfg.warp_output_size])?;
        let flat: usize = out_shape.iter().product();
        Ok(ClsNet {
            convs,
            trunk: Fc::new(flat, cfg.fc_dim, rng),
            head: Fc::new(cfg.fc_dim, n_classes, rng),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    /// Replace the classification head with a fresh `n_classes`-way layer;
    /// every other parameter is untouched.
    pub fn replace_head(&mut self, n_classes: usize, rng: &mut ChaCha8Rng) {
        self.head = Fc::new(self.trunk.out_dim(), n_classes, rng);
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ClsTrace)> {
        let conv = self.convs.forward(x)?;
        let z = self.trunk.forward(&conv.output)?;
        let feat = Tensor::from_vec(z.shape(), z.data().iter().map(|&v| v.max(0.0)).collect());
        let logits = self.head.forward(&feat)?;
        Ok((
            logits,
            ClsTrace {
                conv,
                z,
                feat,
            },
        ))
    }

    /// The feature vector only (no head, no trace).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let conv = self.convs.forward(x)?;
        let z = self.trunk.forward(&conv.output)?;
        Ok(Tensor::from_vec(z.shape(), z.data().iter().map(|&v| v.max(0.0)).collect()))
    }

    pub fn backward(&self, trace: &ClsTrace, glogits: &Tensor) -> ClsGrads {
        let (gfeat, head_g) = self.head.backward(&trace.feat, glogits);
        let gz = Tensor::from_vec(
            trace.z.shape(),
            trace
                .z
                .data()
                .iter()
                .zip(gfeat.data())
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
        );
        let (gconv_out, trunk_g) = self.trunk.backward(&trace.conv.output, &gz);
        let (_, conv_g) = self.convs.backward(&trace.conv, &gconv_out);
        let mut grads = Sequential::flatten_grads(conv_g);
        grads.extend(trunk_g);
        grads.extend(head_g);
        grads
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.convs.params();
        p.push(&self.trunk.weight);
        p.push(&self.trunk.bias);
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.convs.params_mut();
        p.push(&mut self.trunk.weight);
        p.push(&mut self.trunk.bias);
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }
}

// ---------------------------------------------------------------------------
// labeling and batch sampling
// ---------------------------------------------------------------------------

/// Fine-tuning label per proposal: the class of its best-IoU ground truth
/// when that IoU reaches `pos_iou` (0.5 in the standard recipe), else 0.
pub fn label_for_finetune(proposals: &[BBox], gts: &[(usize, BBox)], pos_iou: f64) -> Vec<usize> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (0usize, 0.0f64);
            for (class, g) in gts {
                let v = iou(p, g);
                if v > best.1 {
                    best = (*class, v);
                }
            }
            if best.1 >= pos_iou {
                best.0
            } else {
                0
            }
        })
        .collect()
}

/// Sample the 32-positive / 96-background mini-batch of 128 from a labeled
/// pool, uniformly without replacement. A positive shortfall is filled with
/// backgrounds (and vice versa); the batch only shrinks when the whole pool
/// is smaller than 128. Errors on an empty pool.
pub fn sample_finetune_batch(labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    sample_two_way(labels, 32, 128, rng)
}

fn sample_two_way(labels: &[usize], want_pos: usize, total: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::Training("cannot sample a batch from an empty pool".into()));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min(want_pos);
    let n_neg = neg.len().min(total - n_pos);
    let mut batch: Vec<usize> = pos[..n_pos].to_vec();
    batch.extend_from_slice(&neg[..n_neg]);
    // Background shortfall: top up with extra positives.
    if batch.len() < total && pos.len() > n_pos {
        let extra = (pos.len() - n_pos).min(total - batch.len());
        batch.extend_from_slice(&pos[n_pos..n_pos + extra]);
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// patch sampling and backbone training
// ---------------------------------------------------------------------------

/// A random box near `g` with IoU at least `min_iou` (falls back to `g`
/// itself when rejection sampling runs out of tries).
pub(crate) fn jitter_box(
    g: &BBox,
    min_iou: f64,
    img_w: f64,
    img_h: f64,
    rng: &mut ChaCha8Rng,
) -> BBox {
    for _ in 0..20 {
        let dx = rng.random_range(-0.15..0.15) * g.w;
        let dy = rng.random_range(-0.15..0.15) * g.h;
        let sw = rng.random_range(0.85..1.18);
        let sh = rng.random_range(0.85..1.18);
        let cand = BBox::new(g.x + dx, g.y + dy, g.w * sw, g.h * sh);
        if iou(&cand, g) >= min_iou && cand.clip(img_w, img_h).is_some() {
            return cand;
        }
    }
    *g
}

/// A labeled training patch: a box in some image plus its class (0 = bg).
struct Patch {
    image: usize,
    bbox: BBox,
    label: usize,
}

/// Jittered copies of ground-truth boxes with IoU >= `min_iou`, plus random
/// background boxes with max IoU < `max_neg_iou`.
fn sample_patches(
    images: &[Tensor],
    rows: &DatasetTable,
    n_pos: usize,
    n_neg: usize,
    min_iou: f64,
    max_neg_iou: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Patch> {
    let mut patches = Vec::new();
    for (idx, row) in rows.rows.iter().enumerate() {
        let (h, w) = (images[idx].shape()[1] as f64, images[idx].shape()[2] as f64);
        if !row.gts.is_empty() {
            for _ in 0..n_pos {
                let (class, g) = row.gts[rng.random_range(0..row.gts.len())];
                patches.push(Patch {
                    image: idx,
                    bbox: jitter_box(&g, min_iou, w, h, rng),
                    label: class,
                });
            }
        }
        for _ in 0..n_neg {
            for _try in 0..50 {
                let bw = rng.random_range(8.0..(w / 2.0).max(9.0));
                let bh = rng.random_range(8.0..(h / 2.0).max(9.0));
                let bx = rng.random_range(0.0..(w - bw));
                let by = rng.random_range(0.0..(h - bh));
                let cand = BBox::new(bx, by, bw, bh);
                if row.gts.iter().all(|(_, g)| iou(&cand, g) < max_neg_iou) {
                    patches.push(Patch {
                        image: idx,
                        bbox: cand,
                        label: 0,
                    });
                    break;
                }
            }
        }
    }
    patches
}

/// One SGDM step over a batch of (input, label) pairs; returns the mean loss.
fn cls_batch_step(
    net: &mut ClsNet,
    opt: &mut SgdmState,
    batch: &[(&Tensor, usize)],
) -> Result<f64> {
    let mut grads: Option<ClsGrads> = None;
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (input, label) in batch {
        let (logits, trace) = net.forward(input)?;
        let (loss, gy) = softmax_ce_loss(&logits, *label)?;
        total += loss;
        let g = net.backward(&trace, &gy);
        match grads.as_mut() {
            None => {
                let mut g = g;
                for t in g.iter_mut() {
                    t.scale(scale);
                }
                grads = Some(g);
            }
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(g.iter()) {
                    a.add_scaled(t, scale);
                }
            }
        }
    }
    let grads = grads.expect("non-empty batch");
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut net.params_mut(), &grad_refs);
    Ok(total * scale)
}

/// Stand-in for large-corpus supervised pre-training: teach the fresh
/// backbone to separate vehicle patches from background patches sampled off
/// the training images.
pub fn pretrain_backbone(
    images: &[Tensor],
    train: &DatasetTable,
    cfg: &RunConfig,
    log: &mut TrainLog,
) -> Result<ClsNet> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_NET_INIT));
    let n_classes = train.class_ids().len() + 1;
    let mut net = ClsNet::new(cfg, n_classes.max(2), &mut init_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_PRETRAIN));
    let patches = sample_patches(
        images,
        train,
        cfg.pretrain_pos_per_image,
        cfg.pretrain_neg_per_image,
        cfg.det_pos_iou_low,
        cfg.det_neg_iou_high,
        &mut rng,
    );
    if patches.is_empty() {
        return Err(Error::Training("no pretraining patches could be sampled".into()));
    }
    let warp = WarpConfig {
        context_pixels: cfg.warp_context_pixels,
        output_size: cfg.warp_output_size,
    };
    let warped: Vec<Tensor> = patches
        .iter()
        .map(|p| warp_with_context(&images[p.image], &p.bbox, &warp))
        .collect::<Result<_>>()?;

    let mut opt = SgdmState::new(cfg.learning_rate, cfg.momentum, &net.params());
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.pretrain_batch.max(1)) {
            let batch: Vec<(&Tensor, usize)> =
                chunk.iter().map(|&i| (&warped[i], patches[i].label)).collect();
            epoch_loss += cls_batch_step(&mut net, &mut opt, &batch)?;
            n_batches += 1;
        }
        log.log(format!(
            "pretrain epoch {}/{} loss {:.6}",
            epoch + 1,
            cfg.pretrain_epochs,
            epoch_loss / n_batches as f64
        ));
    }
    Ok(net)
}

/// Swap in a fresh (N+1)-way head and fine-tune on labeled proposals with
/// the 32+96 sampling rule. `proposals[i]` must align with `train.rows[i]`
/// and should already include the ground-truth boxes.
pub fn finetune_backbone(
    net: &mut ClsNet,
    images: &[Tensor],
    train: &DatasetTable,
    proposals: &[Vec<BBox>],
    cfg: &RunConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let n_real_classes = train.class_ids().len();
    if n_real_classes < 1 {
        return Err(Error::Config("fine-tuning needs at least one object class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_HEAD_SWAP));
    net.replace_head(n_real_classes + 1, &mut rng);

    let warp = WarpConfig {
        context_pixels: cfg.warp_context_pixels,
        output_size: cfg.warp_output_size,
    };
    let labels: Vec<Vec<usize>> = proposals
        .iter()
        .zip(&train.rows)
        .map(|(props, row)| label_for_finetune(props, &row.gts, 0.5))
        .collect();

    let mut opt = SgdmState::new(cfg.learning_rate, cfg.momentum, &net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_FINETUNE));
    let mut image_order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.finetune_epochs {
        image_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_steps = 0;
        for &i in &image_order {
            if labels[i].is_empty() {
                continue;
            }
            let batch_idx = sample_finetune_batch(&labels[i], &mut rng)?;
            let warped: Vec<Tensor> = batch_idx
                .iter()
                .map(|&j| warp_with_context(&images[i], &proposals[i][j], &warp))
                .collect::<Result<_>>()?;
            let batch: Vec<(&Tensor, usize)> = warped
                .iter()
                .zip(batch_idx.iter())
                .map(|(t, &j)| (t, labels[i][j]))
                .collect();
            epoch_loss += cls_batch_step(net, &mut opt, &batch)?;
            n_steps += 1;
        }
        if n_steps == 0 {
            return Err(Error::Training("fine-tuning saw no usable images".into()));
        }
        log.log(format!(
            "finetune epoch {}/{} loss {:.6}",
            epoch + 1,
            cfg.finetune_epochs,
            epoch_loss / n_steps as f64
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// linear SVM
// ---------------------------------------------------------------------------

/// One-vs-rest linear classifier for a single class. Decision value is
/// `w . x + b`; higher means more confidently that class.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmClassifier {
    pub class: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SvmClassifier {
    pub fn decision(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.weights.len());
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SvmTrainConfig {
    pub reg: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

/// SVM training label for a region given its best IoU against the class's
/// ground truths: below `neg_thresh` it is a usable negative; anything else
/// (partial overlap) is excluded from training entirely. Positives come
/// from the ground-truth boxes themselves, not from this rule.
pub fn svm_region_label(max_iou: f64, neg_thresh: f64) -> Option<bool> {
    if max_iou < neg_thresh {
        Some(false)
    } else {
        None
    }
}

/// Full-batch subgradient descent on the regularized hinge objective
/// `mean(max(0, 1 - y f(x))) + reg/2 ||w||^2`, with backtracking so the
/// objective never increases. Returns the classifier and the per-epoch
/// objective trace.
pub fn train_svm_binary(
    features: &[Vec<f64>],
    positive: &[bool],
    cfg: &SvmTrainConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Training("svm: empty training set".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Training(
            "svm: need both positive and negative examples".into(),
        ));
    }
    let dim = features[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    let mut b = 0.0f64;

    let objective = |w: &[f64], b: f64| -> f64 {
        let mut total = 0.0;
        for (x, &pos) in features.iter().zip(positive) {
            let y = if pos { 1.0 } else { -1.0 };
            let f = w.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>() + b;
            total += (1.0 - y * f).max(0.0);
        }
        total / n as f64 + 0.5 * cfg.reg * w.iter().map(|v| v * v).sum::<f64>()
    };

    let mut lr = 1.0f64;
    let mut prev = objective(&w, b);
    let mut trace = vec![prev];
    for _ in 0..cfg.max_epochs {
        // Subgradient at the current point.
        let mut gw: Vec<f64> = w.iter().map(|&v| cfg.reg * v).collect();
        let mut gb = 0.0;
        for (x, &pos) in features.iter().zip(positive) {
            let y = if pos { 1.0 } else { -1.0 };
            let f = w.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>() + b;
            if 1.0 - y * f > 0.0 {
                for (g, xv) in gw.iter_mut().zip(x) {
                    *g -= y * xv / n as f64;
                }
                gb -= y / n as f64;
            }
        }

        // Backtrack until the step does not increase the objective.
        let mut accepted = prev;
        loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - lr * g).collect();
            let bt = b - lr * gb;
            let obj = objective(&wt, bt);
            if obj <= prev {
                w = wt;
                b = bt;
                accepted = obj;
                break;
            }
            lr *= 0.5;
            if lr < 1e-14 {
                break; // no improving step in this direction; keep position
            }
        }
        trace.push(accepted);
        if prev - accepted < cfg.tolerance {
            break;
        }
        prev = accepted;
        lr *= 1.2;
    }
    Ok((w, b, trace))
}

/// Train one classifier per object class from class-labeled feature vectors
/// (label 0 = background/negative).
pub fn train_svm(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: &[usize],
    cfg: &SvmTrainConfig,
    seed: u64,
) -> Result<Vec<SvmClassifier>> {
    let mut out = Vec::with_capacity(classes.len());
    for (k, &class) in classes.iter().enumerate() {
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let (weights, bias, _) = train_svm_binary(features, &positive, cfg, derive_seed(seed, k as u64))?;
        out.push(SvmClassifier {
            class,
            weights,
            bias,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ridge bounding-box regression
// ---------------------------------------------------------------------------

/// Closed-form ridge weights: one vector per delta coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeWeights {
    /// `[dx, dy, dw, dh]` weight vectors, each feature-length.
    pub weights: [Vec<f64>; 4],
    pub lambda: f64,
}

impl RidgeWeights {
    pub fn predict(&self, x: &[f64]) -> BoxDelta {
        let dot = |w: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        BoxDelta::new(
            dot(&self.weights[0]),
            dot(&self.weights[1]),
            dot(&self.weights[2]),
            dot(&self.weights[3]),
        )
    }
}

/// Solve `A x = rhs` for symmetric positive-definite `A` via Cholesky.
/// `a` is row-major `n x n` and is destroyed.
fn cholesky_solve(a: &mut [f64], n: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    // A = L L^T, stored in the lower triangle.
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 1e-12 {
            return Err(Error::Singular(format!(
                "matrix not positive definite at pivot {j} ({d:e})"
            )));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    // L y = rhs
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    // L^T x = y
    let mut x = y;
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    Ok(x)
}

/// Fit the box regressor: for each delta coordinate solve the regularized
/// normal equations `(X^T X + lambda I) w = X^T t` exactly.
pub fn fit_bbox_ridge(features: &[Vec<f64>], targets: &[BoxDelta], lambda: f64) -> Result<RidgeWeights> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::Config(format!(
            "ridge fit needs matching non-empty features/targets, got {}/{}",
            features.len(),
            targets.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Config("ridge lambda must be >= 0".into()));
    }
    let d = features[0].len();
    // Gram matrix X^T X + lambda I.
    let mut gram = vec![0.0f64; d * d];
    for x in features {
        for i in 0..d {
            let xi = x[i];
            if xi != 0.0 {
                for j in 0..d {
                    gram[i * d + j] += xi * x[j];
                }
            }
        }
    }
    for i in 0..d {
        gram[i * d + i] += lambda;
    }

    let mut weights: [Vec<f64>; 4] = Default::default();
    for c in 0..4 {
        let mut rhs = vec![0.0f64; d];
        for (x, t) in features.iter().zip(targets) {
            let tv = t.to_array()[c];
            for (r, &xv) in rhs.iter_mut().zip(x) {
                *r += xv * tv;
            }
        }
        let mut a = gram.clone();
        weights[c] = cholesky_solve(&mut a, d, &rhs)?;
    }
    Ok(RidgeWeights { weights, lambda })
}

/// First-order optimality residual `max_c || X^T (X w_c - t_c) + lambda w_c ||_inf`.
pub fn ridge_optimality_residual(features: &[Vec<f64>], targets: &[BoxDelta], fit: &RidgeWeights) -> f64 {
    let d = features[0].len();
    let mut worst = 0.0f64;
    for c in 0..4 {
        let w = &fit.weights[c];
        let mut grad = vec![0.0f64; d];
        for (x, t) in features.iter().zip(targets) {
            let pred: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let r = pred - t.to_array()[c];
            for (g, &xv) in grad.iter_mut().zip(x) {
                *g += xv * r;
            }
        }
        for (g, &wv) in grad.iter_mut().zip(w) {
            *g += fit.lambda * wv;
        }
        worst = worst.max(grad.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    worst
}

// ---------------------------------------------------------------------------
// the trained model and the full pipeline
// ---------------------------------------------------------------------------

/// A trained R-CNN detector; immutable during detection.
#[derive(Debug, Clone)]
pub struct RcnnModel {
    pub config: RunConfig,
    pub net: ClsNet,
    pub svms: Vec<SvmClassifier>,
    /// Per-class ridge regressors, aligned with `svms`.
    pub ridge: Vec<RidgeWeights>,
}

impl RcnnModel {
    fn warp_config(&self) -> WarpConfig {
        WarpConfig {
            context_pixels: self.config.warp_context_pixels,
            output_size: self.config.warp_output_size,
        }
    }
}

/// Run the R-CNN detection cascade on one image: proposals, warp, features,
/// SVM scores, score threshold, ridge refinement, per-class NMS.
pub fn rcnn_detect(image: &Tensor, model: &RcnnModel) -> Result<Vec<Detection>> {
    let cfg = &model.config;
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let boxes = propose(image, &cfg.proposal_config())?;
    let warp = model.warp_config();

    // Scored candidates per class.
    let mut per_class: Vec<Vec<(BBox, f64)>> = vec![Vec::new(); model.svms.len()];
    for bbox in &boxes {
        let feat = model.net.features(&warp_with_context(image, bbox, &warp)?)?;
        for (k, svm) in model.svms.iter().enumerate() {
            let score = svm.decision(feat.data());
            if score > cfg.score_thresh {
                let delta = model.ridge[k].predict(feat.data());
                let refined = match decode_box(&delta, bbox, Some((w, h))) {
                    Ok(refined) => refined,
                    Err(_) => match bbox.clip(w, h) {
                        Some(clipped) => clipped,
                        None => continue,
                    },
                };
                per_class[k].push((refined, score));
            }
        }
    }

    let mut detections = Vec::new();
    for (k, cands) in per_class.iter().enumerate() {
        let scored: Vec<ScoredBox> = cands.iter().map(|&(b, s)| ScoredBox::new(b, s)).collect();
        for idx in nms(&scored, cfg.nms_iou_thresh) {
            detections.push(Detection::new(model.svms[k].class, scored[idx].bbox, scored[idx].score));
        }
    }
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(detections)
}

impl Detector for RcnnModel {
    fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        rcnn_detect(image, self)
    }
}

/// End-to-end R-CNN training on the given (already split) training rows:
/// pretrain, fine-tune, per-class SVMs, per-class ridge regressors.
pub fn train_rcnn(train: &DatasetTable, cfg: &RunConfig, log: &mut TrainLog) -> Result<RcnnModel> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let classes = train.class_ids();
    if classes.is_empty() {
        return Err(Error::Config("training set has no ground-truth boxes".into()));
    }

    log.log("rcnn stage 1/4: supervised pre-training on synthetic patches");
    let images: Vec<Tensor> = train
        .rows
        .iter()
        .map(|r| decode_image(&r.image_path))
        .collect::<Result<_>>()?;
    let mut net = pretrain_backbone(&images, train, cfg, log)?;

    log.log("rcnn stage 2/4: fine-tuning on region proposals");
    let proposal_cfg = cfg.proposal_config();
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_JITTER));
    let proposals: Vec<Vec<BBox>> = images
        .iter()
        .zip(&train.rows)
        .map(|(img, row)| {
            let (h, w) = (img.shape()[1] as f64, img.shape()[2] as f64);
            let mut p = propose(img, &proposal_cfg)?;
            for &(_, g) in &row.gts {
                p.push(g);
                for _ in 0..cfg.regressor_jitter_per_gt {
                    p.push(jitter_box(&g, cfg.ridge_pos_iou, w, h, &mut jitter_rng));
                }
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    finetune_backbone(&mut net, &images, train, &proposals, cfg, log)?;

    log.log("rcnn stage 3/4: per-class SVM training");
    let warp = WarpConfig {
        context_pixels: cfg.warp_context_pixels,
        output_size: cfg.warp_output_size,
    };
    let mut svm_features: Vec<Vec<f64>> = Vec::new();
    let mut svm_labels: Vec<usize> = Vec::new();
    let mut ridge_data: Vec<(usize, Vec<f64>, BoxDelta)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_SVM));
    for (i, row) in train.rows.iter().enumerate() {
        // Positives: the ground-truth boxes themselves.
        for &(class, g) in &row.gts {
            let feat = net.features(&warp_with_context(&images[i], &g, &warp)?)?;
            svm_features.push(feat.data().to_vec());
            svm_labels.push(class);
            ridge_data.push((class, svm_features.last().unwrap().clone(), BoxDelta::default()));
        }
        // Negatives: proposals clearly off every ground truth; ridge pairs:
        // proposals overlapping well enough to regress from.
        let mut neg_taken = 0;
        for p in &proposals[i] {
            let mut best: Option<(usize, f64)> = None;
            for (class, g) in &row.gts {
                let v = iou(p, g);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((*class, v));
                }
            }
            let (best_class, best_iou) = best.unwrap_or((0, 0.0));
            if svm_region_label(best_iou, cfg.det_neg_iou_high) == Some(false) {
                if neg_taken < cfg.svm_neg_per_image && rng.random_range(0..2) < 2 {
                    let feat = net.features(&warp_with_context(&images[i], p, &warp)?)?;
                    svm_features.push(feat.data().to_vec());
                    svm_labels.push(0);
                    neg_taken += 1;
                }
            } else if best_iou >= cfg.ridge_pos_iou && best_iou < 1.0 {
                let (_, g) = row.gts.iter().find(|(c, _)| *c == best_class).unwrap();
                let feat = net.features(&warp_with_context(&images[i], p, &warp)?)?;
                ridge_data.push((best_class, feat.data().to_vec(), encode_box(g, p)));
            }
        }
    }
    let svm_cfg = SvmTrainConfig {
        reg: cfg.svm_reg,
        max_epochs: cfg.svm_max_epochs,
        tolerance: cfg.svm_tolerance,
    };
    let svms = train_svm(&svm_features, &svm_labels, &classes, &svm_cfg, derive_seed(cfg.seed, SALT_SVM))?;
    log.log(format!(
        "svm trained on {} features ({} classes)",
        svm_features.len(),
        classes.len()
    ));

    log.log("rcnn stage 4/4: ridge bounding-box regression");
    let mut ridge = Vec::with_capacity(classes.len());
    for &class in &classes {
        let feats: Vec<Vec<f64>> = ridge_data
            .iter()
            .filter(|(c, _, _)| *c == class)
            .map(|(_, f, _)| f.clone())
            .collect();
        let targets: Vec<BoxDelta> = ridge_data
            .iter()
            .filter(|(c, _, _)| *c == class)
            .map(|(_, _, t)| *t)
            .collect();
        if feats.is_empty() {
            return Err(Error::Training(format!("no ridge training pairs for class {class}")));
        }
        let fit = fit_bbox_ridge(&feats, &targets, cfg.ridge_lambda)?;
        log.log(format!(
            "ridge class {class}: {} pairs, optimality residual {:.3e}",
            feats.len(),
            ridge_optimality_residual(&feats, &targets, &fit)
        ));
        ridge.push(fit);
    }

    Ok(RcnnModel {
        config: cfg.clone(),
        net,
        svms,
        ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(w: usize, h: usize, v: f64) -> Tensor {
        Tensor::filled(&[3, h, w], v)
    }

    #[test]
    fn warp_full_image_identity() {
        let mut img = Tensor::zeros(&[3, 8, 8]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let cfg = WarpConfig {
            context_pixels: 0.0,
            output_size: 8,
        };
        let out = warp_with_context(&img, &BBox::new(0.0, 0.0, 8.0, 8.0), &cfg).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_constant_image_constant_output() {
        let img = gray_image(20, 14, 0.37);
        let cfg = WarpConfig::default();
        let out = warp_with_context(&img, &BBox::new(3.0, 2.0, 9.0, 6.5), &cfg).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn warp_checkerboard_bilinear_hand_values() {
        // 2x2 single pattern replicated across channels: [[1,0],[0,1]].
        let mut img = Tensor::zeros(&[3, 2, 2]);
        for c in 0..3 {
            img.data_mut()[c * 4] = 1.0;
            img.data_mut()[c * 4 + 3] = 1.0;
        }
        let cfg = WarpConfig {
            context_pixels: 0.0,
            output_size: 4,
        };
        let out = warp_with_context(&img, &BBox::new(0.0, 0.0, 2.0, 2.0), &cfg).unwrap();
        // Sample points fall at -0.25, 0.25, 0.75, 1.25 in source coords.
        // With replicate clamping the first channel's rows are:
        //   y=-0.25 -> same as row~0 pattern; hand values below.
        let expect_row = |y: f64| -> [f64; 4] {
            let xs: [f64; 4] = [-0.25, 0.25, 0.75, 1.25];
            let p = |yy: isize, xx: isize| {
                let yc = yy.clamp(0, 1) as usize;
                let xc = xx.clamp(0, 1) as usize;
                img.data()[yc * 2 + xc]
            };
            let mut row = [0.0; 4];
            for (i, &x) in xs.iter().enumerate() {
                let x0 = x.floor();
                let fx = x - x0;
                let y0 = y.floor();
                let fy = y - y0;
                row[i] = (1.0 - fy) * ((1.0 - fx) * p(y0 as isize, x0 as isize) + fx * p(y0 as isize, x0 as isize + 1))
                    + fy * ((1.0 - fx) * p(y0 as isize + 1, x0 as isize) + fx * p(y0 as isize + 1, x0 as isize + 1));
            }
            row
        };
        let ys = [-0.25, 0.25, 0.75, 1.25];
        for (v, &y) in ys.iter().enumerate() {
            let want = expect_row(y);
            for u in 0..4 {
                assert!(
                    (out.data()[v * 4 + u] - want[u]).abs() < 1e-12,
                    "({u},{v}): {} vs {}",
                    out.data()[v * 4 + u],
                    want[u]
                );
            }
        }
        // Spot-check one interior value computed fully by hand:
        // (0.25, 0.25): 0.75*0.75*1 + 0.25*0.25*1 = 0.625.
        assert!((out.data()[5] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn warp_disjoint_box_errors() {
        let img = gray_image(8, 8, 0.5);
        let cfg = WarpConfig::default();
        assert!(warp_with_context(&img, &BBox::new(100.0, 100.0, 4.0, 4.0), &cfg).is_err());
    }

    #[test]
    fn finetune_labels_threshold() {
        let gts = vec![(1usize, BBox::new(0.0, 0.0, 100.0, 100.0))];
        // Identical box: positive.
        assert_eq!(label_for_finetune(&[gts[0].1], &gts, 0.5), vec![1]);
        // IoU exactly 0.49: background.
        let p = BBox::new(0.0, 0.0, 100.0, 49.0);
        assert!((iou(&p, &gts[0].1) - 0.49).abs() < 1e-12);
        assert_eq!(label_for_finetune(&[p], &gts, 0.5), vec![0]);
        // IoU exactly 0.5: positive.
        let p = BBox::new(0.0, 0.0, 100.0, 50.0);
        assert_eq!(label_for_finetune(&[p], &gts, 0.5), vec![1]);
        // No ground truth: everything background.
        assert_eq!(label_for_finetune(&[p], &[], 0.5), vec![0]);
    }

    #[test]
    fn batch_sampling_split_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Plenty of both: exactly 32 + 96.
        let mut labels = vec![1usize; 50];
        labels.extend(vec![0usize; 200]);
        let batch = sample_finetune_batch(&labels, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.iter().filter(|&&i| labels[i] > 0).count(), 32);

        // 10 positives: 10 + 118.
        let mut labels = vec![1usize; 10];
        labels.extend(vec![0usize; 300]);
        let batch = sample_finetune_batch(&labels, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        assert_eq!(batch.iter().filter(|&&i| labels[i] > 0).count(), 10);

        // No positives: 128 backgrounds.
        let labels = vec![0usize; 200];
        let batch = sample_finetune_batch(&labels, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);

        // Empty pool: error.
        assert!(sample_finetune_batch(&[], &mut rng).is_err());

        // Sampling is without replacement.
        let mut labels = vec![1usize; 40];
        labels.extend(vec![0usize; 100]);
        let batch = sample_finetune_batch(&labels, &mut rng).unwrap();
        let mut uniq = batch.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), batch.len());
    }

    #[test]
    fn svm_separable_1d() {
        let features = vec![vec![-1.0], vec![1.0]];
        let labels = vec![false, true];
        let cfg = SvmTrainConfig {
            reg: 1e-4,
            max_epochs: 200,
            tolerance: 1e-9,
        };
        let (w, b, trace) = train_svm_binary(&features, &labels, &cfg, 3).unwrap();
        assert!(w[0] * 1.0 + b > 0.0);
        assert!(w[0] * -1.0 + b < 0.0);
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "objective increased: {pair:?}");
        }
    }

    #[test]
    fn svm_duplicate_point_with_both_labels() {
        let features = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![-1.0, 0.0]];
        let labels = vec![true, false, false];
        let cfg = SvmTrainConfig {
            reg: 1e-3,
            max_epochs: 100,
            tolerance: 1e-8,
        };
        let (w, b, _) = train_svm_binary(&features, &labels, &cfg, 4).unwrap();
        assert!(w.iter().all(|v| v.is_finite()) && b.is_finite());
    }

    #[test]
    fn svm_single_class_errors() {
        let features = vec![vec![1.0], vec![2.0]];
        let cfg = SvmTrainConfig {
            reg: 1e-4,
            max_epochs: 10,
            tolerance: 1e-6,
        };
        assert!(train_svm_binary(&features, &[true, true], &cfg, 0).is_err());
    }

    #[test]
    fn svm_region_labeling_rule() {
        // IoU 0.2 against every ground truth: usable negative.
        assert_eq!(svm_region_label(0.2, 0.3), Some(false));
        // Partial overlap at or above the threshold: excluded entirely.
        assert_eq!(svm_region_label(0.3, 0.3), None);
        assert_eq!(svm_region_label(0.6, 0.3), None);
    }

    /// Independent dense solver: Gauss-Jordan with partial pivoting.
    pub(crate) fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let (pivot, pv) = (col..n)
                .map(|r| (r, m[r][col].abs()))
                .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())?;
            if pv < 1e-12 {
                return None;
            }
            m.swap(col, pivot);
            rhs.swap(col, pivot);
            let d = m[col][col];
            for v in m[col].iter_mut() {
                *v /= d;
            }
            rhs[col] /= d;
            for r in 0..n {
                if r != col && m[r][col] != 0.0 {
                    let f = m[r][col];
                    for c2 in 0..n {
                        m[r][c2] -= f * m[col][c2];
                    }
                    rhs[r] -= f * rhs[col];
                }
            }
        }
        Some(rhs)
    }

    #[test]
    fn ridge_lambda_zero_interpolates_square_system() {
        // 3 samples in 3-D with independent directions: exact interpolation.
        let features = vec![
            vec![1.0, 0.2, -0.3],
            vec![0.1, 1.4, 0.5],
            vec![-0.7, 0.3, 1.1],
        ];
        let targets = vec![
            BoxDelta::new(0.3, -0.1, 0.2, 0.05),
            BoxDelta::new(-0.2, 0.4, 0.0, 0.1),
            BoxDelta::new(0.1, 0.1, -0.3, 0.2),
        ];
        let fit = fit_bbox_ridge(&features, &targets, 0.0).unwrap();
        for (x, t) in features.iter().zip(&targets) {
            let p = fit.predict(x);
            for (a, b) in p.to_array().iter().zip(t.to_array()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ridge_zero_targets_zero_weights() {
        let features = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let targets = vec![BoxDelta::default(); 3];
        let fit = fit_bbox_ridge(&features, &targets, 5.0).unwrap();
        for w in &fit.weights {
            assert!(w.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn ridge_rank_deficient_lambda_zero_is_singular() {
        // Duplicate feature dimension: X^T X singular without regularization.
        let features = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let targets = vec![BoxDelta::default(); 3];
        assert!(matches!(
            fit_bbox_ridge(&features, &targets, 0.0),
            Err(Error::Singular(_))
        ));
        // The same system is fine with lambda > 0.
        assert!(fit_bbox_ridge(&features, &targets, 1.0).is_ok());
    }

    #[test]
    fn ridge_matches_dense_solver_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..100 {
            let (n, d) = (50, 16);
            let lambda = if trial % 3 == 0 { 0.0 } else { rng.random_range(0.1..100.0) };
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let targets: Vec<BoxDelta> = (0..n)
                .map(|_| {
                    BoxDelta::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let fit = fit_bbox_ridge(&features, &targets, lambda).unwrap();

            // Oracle: Gauss-Jordan on the same normal equations.
            let mut gram = vec![vec![0.0f64; d]; d];
            for x in &features {
                for i in 0..d {
                    for j in 0..d {
                        gram[i][j] += x[i] * x[j];
                    }
                }
            }
            for (i, row) in gram.iter_mut().enumerate() {
                row[i] += lambda;
            }
            for c in 0..4 {
                let mut rhs = vec![0.0f64; d];
                for (x, t) in features.iter().zip(&targets) {
                    for (r, &xv) in rhs.iter_mut().zip(x) {
                        *r += xv * t.to_array()[c];
                    }
                }
                let oracle = gauss_solve(&gram, &rhs).expect("oracle solvable");
                for (a, b) in fit.weights[c].iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-8, "coordinate {c}: {a} vs {b}");
                }
            }

            assert!(
                ridge_optimality_residual(&features, &targets, &fit) < 1e-7,
                "optimality residual too large"
            );
        }
    }
}
