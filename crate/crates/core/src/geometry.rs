//! Box arithmetic, IoU, greedy NMS, box-delta encoding, and anchor grids.
//!
//! Everything here is a pure function over immutable inputs; coordinates are
//! continuous pixels (fractional values allowed) and are never quantized.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates: `(x, y)` is the top-left corner.
///
/// Invariant: `w > 0` and `h > 0`, so the area is always positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        assert!(w > 0.0 && h > 0.0, "BBox requires positive extent, got {w}x{h}");
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Intersection area with `other` (0 when disjoint).
    pub fn intersection(&self, other: &BBox) -> f64 {
        let ix = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let iy = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        ix * iy
    }

    /// Clip to the image rectangle `[0, img_w] x [0, img_h]`.
    /// Returns `None` when nothing with positive area remains.
    pub fn clip(&self, img_w: f64, img_h: f64) -> Option<BBox> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.right().min(img_w);
        let y2 = self.bottom().min(img_h);
        if x2 > x1 && y2 > y1 {
            Some(BBox::new(x1, y1, x2 - x1, y2 - y1))
        } else {
            None
        }
    }

    /// True if the box lies fully inside `[0, img_w] x [0, img_h]`.
    pub fn inside(&self, img_w: f64, img_h: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= img_w && self.bottom() <= img_h
    }
}

/// A box with a confidence score (higher = more confident).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        assert!(score.is_finite(), "score must be finite");
        ScoredBox { bbox, score }
    }
}

/// Box offsets relative to a reference box: dimensionless center shifts and
/// log-scale size factors. The regression target of both pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDelta { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union, in `[0, 1]`. Symmetric; 0 when disjoint,
/// 1 exactly when the boxes are identical.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the highest-scored unsuppressed box (ties broken by lower
/// input index) and suppresses every remaining box with IoU strictly greater
/// than `iou_thresh` against it. Returns kept indices in descending-score
/// order.
pub fn nms(dets: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Encode `target` relative to `reference` as center/log-size offsets:
/// `dx = (cx_t - cx_r) / w_r`, `dy = (cy_t - cy_r) / h_r`,
/// `dw = ln(w_t / w_r)`, `dh = ln(h_t / h_r)`.
pub fn encode_box(target: &BBox, reference: &BBox) -> BoxDelta {
    let (tcx, tcy) = target.center();
    let (rcx, rcy) = reference.center();
    BoxDelta {
        dx: (tcx - rcx) / reference.w,
        dy: (tcy - rcy) / reference.h,
        dw: (target.w / reference.w).ln(),
        dh: (target.h / reference.h).ln(),
    }
}

/// Exact inverse of [`encode_box`]. When `clip` is `Some((img_w, img_h))` the
/// result is clipped to the image rectangle.
///
/// Errors with [`Error::DegenerateBox`] when `exp(dw)`/`exp(dh)` overflow or
/// the (possibly clipped) box has no positive area.
pub fn decode_box(delta: &BoxDelta, reference: &BBox, clip: Option<(f64, f64)>) -> Result<BBox> {
    let (rcx, rcy) = reference.center();
    let w = reference.w * delta.dw.exp();
    let h = reference.h * delta.dh.exp();
    if !w.is_finite() || !h.is_finite() || w <= 0.0 || h <= 0.0 {
        return Err(Error::DegenerateBox(format!(
            "decoded extent {w}x{h} from dw={} dh={}",
            delta.dw, delta.dh
        )));
    }
    let cx = rcx + delta.dx * reference.w;
    let cy = rcy + delta.dy * reference.h;
    if !cx.is_finite() || !cy.is_finite() {
        return Err(Error::DegenerateBox("non-finite decoded center".into()));
    }
    let full = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h);
    match clip {
        None => Ok(full),
        Some((img_w, img_h)) => full
            .clip(img_w, img_h)
            .ok_or_else(|| Error::DegenerateBox("box entirely outside clip bounds".into())),
    }
}

/// A fixed lattice of reference boxes over a feature map.
///
/// Anchor `a = si * |ratios| + ri` of cell `(i, j)` (row `i`, column `j`) has
/// width `scales[si]`, height `scales[si] * ratios[ri]`, and is centered at
/// `((j + 0.5) * stride, (i + 0.5) * stride)`. `anchors` is laid out cell
/// row-major, then anchor index, so `|anchors| = feat_w * feat_h * k`.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub feat_w: usize,
    pub feat_h: usize,
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    /// Anchors per cell.
    pub fn k(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// Flat anchor index for cell `(row, col)` and per-cell anchor `a`.
    pub fn index(&self, row: usize, col: usize, a: usize) -> usize {
        (row * self.feat_w + col) * self.k() + a
    }
}

/// Build the anchor grid for a `feat_w x feat_h` feature map.
pub fn generate_anchors(
    feat_w: usize,
    feat_h: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> AnchorGrid {
    assert!(feat_w >= 1 && feat_h >= 1, "feature map must be non-empty");
    assert!(!scales.is_empty() && !ratios.is_empty(), "scales and ratios must be non-empty");
    assert!(
        scales.iter().chain(ratios.iter()).all(|&v| v > 0.0),
        "scales and ratios must be positive"
    );

    let mut anchors = Vec::with_capacity(feat_w * feat_h * scales.len() * ratios.len());
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    let w = s;
                    let h = s * r;
                    anchors.push(BBox::new(cx - w / 2.0, cy - h / 2.0, w, h));
                }
            }
        }
    }
    AnchorGrid {
        feat_w,
        feat_h,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
        anchors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h)
    }

    #[test]
    fn iou_identity_is_one() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(20.0, 20.0, 5.0, 5.0)), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // Intersection 50, union 150.
        let v = iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 10.0, 10.0));
        assert!((v - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn nms_empty_and_single() {
        assert_eq!(nms(&[], 0.5), Vec::<usize>::new());
        let one = [ScoredBox::new(b(0.0, 0.0, 4.0, 4.0), 0.7)];
        assert_eq!(nms(&one, 0.5), vec![0]);
    }

    #[test]
    fn nms_suppresses_overlapping_lower_score() {
        // Pairwise IoU 0.5 > thresh 0.3, so only the 0.9 box survives.
        let dets = [
            ScoredBox::new(b(0.0, 0.0, 10.0, 20.0), 0.8),
            ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        assert!((iou(&dets[0].bbox, &dets[1].bbox) - 0.5).abs() < 1e-12);
        assert_eq!(nms(&dets, 0.3), vec![1]);
    }

    #[test]
    fn nms_threshold_one_keeps_everything() {
        let dets = [
            ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.9),
            ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.8),
            ScoredBox::new(b(1.0, 1.0, 10.0, 10.0), 0.7),
        ];
        assert_eq!(nms(&dets, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn nms_tie_break_by_lower_index() {
        let dets = [
            ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.5),
            ScoredBox::new(b(100.0, 100.0, 10.0, 10.0), 0.5),
        ];
        assert_eq!(nms(&dets, 0.5), vec![0, 1]);
    }

    /// Brute-force greedy reference: repeatedly scan the whole list for the
    /// best unsuppressed box instead of pre-sorting.
    pub(crate) fn nms_oracle(dets: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; dets.len()];
        let mut keep = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.is_none_or(|bi| dets[i].score > dets[bi].score) {
                    best = Some(i);
                }
            }
            let Some(i) = best else { break };
            alive[i] = false;
            keep.push(i);
            for j in 0..dets.len() {
                if alive[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                    alive[j] = false;
                }
            }
        }
        keep
    }

    pub(crate) fn random_dets(rng: &mut ChaCha8Rng, max_n: usize) -> Vec<ScoredBox> {
        let n = rng.random_range(0..=max_n);
        (0..n)
            .map(|_| {
                ScoredBox::new(
                    b(
                        rng.random_range(0.0..80.0),
                        rng.random_range(0.0..80.0),
                        rng.random_range(1.0..40.0),
                        rng.random_range(1.0..40.0),
                    ),
                    // Coarse scores make ties common, exercising the tie-break.
                    (rng.random_range(0..20) as f64) / 20.0,
                )
            })
            .collect()
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let dets = random_dets(&mut rng, 50);
            let thresh = rng.random_range(0.0..=1.0);
            assert_eq!(nms(&dets, thresh), nms_oracle(&dets, thresh));
        }
    }

    #[test]
    fn nms_threshold_zero_keeps_non_overlapping_greedy_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let dets = random_dets(&mut rng, 20);
            let kept = nms(&dets, 0.0);
            // Every kept pair is strictly disjoint.
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    assert_eq!(iou(&dets[a].bbox, &dets[b].bbox), 0.0);
                }
            }
            assert_eq!(kept, nms_oracle(&dets, 0.0));
        }
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = b(3.0, 4.0, 10.0, 12.0);
        assert_eq!(encode_box(&a, &a), BoxDelta::default());
    }

    #[test]
    fn encode_hand_case() {
        let d = encode_box(&b(0.0, 0.0, 20.0, 10.0), &b(0.0, 0.0, 10.0, 10.0));
        assert!((d.dx - 0.5).abs() < 1e-12);
        assert_eq!(d.dy, 0.0);
        assert!((d.dw - 2.0_f64.ln()).abs() < 1e-12);
        assert_eq!(d.dh, 0.0);
    }

    #[test]
    fn decode_zero_delta_returns_reference() {
        let r = b(2.0, 3.0, 7.0, 9.0);
        let out = decode_box(&BoxDelta::default(), &r, None).unwrap();
        assert!((out.x - r.x).abs() < 1e-12 && (out.y - r.y).abs() < 1e-12);
        assert!((out.w - r.w).abs() < 1e-12 && (out.h - r.h).abs() < 1e-12);
    }

    #[test]
    fn decode_inverts_encode_hand_case() {
        let d = BoxDelta::new(0.5, 0.0, 2.0_f64.ln(), 0.0);
        let out = decode_box(&d, &b(0.0, 0.0, 10.0, 10.0), None).unwrap();
        assert!((out.x - 0.0).abs() < 1e-9);
        assert!((out.y - 0.0).abs() < 1e-9);
        assert!((out.w - 20.0).abs() < 1e-9);
        assert!((out.h - 10.0).abs() < 1e-9);
    }

    #[test]
    fn decode_overflow_is_degenerate_error() {
        let d = BoxDelta::new(0.0, 0.0, 800.0, 0.0);
        assert!(matches!(
            decode_box(&d, &b(0.0, 0.0, 10.0, 10.0), None),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn decode_encode_roundtrip_1000_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let random_box = |rng: &mut ChaCha8Rng| {
            b(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(0.5..60.0),
                rng.random_range(0.5..60.0),
            )
        };
        for _ in 0..1000 {
            let g = random_box(&mut rng);
            let r = random_box(&mut rng);
            let back = decode_box(&encode_box(&g, &r), &r, None).unwrap();
            assert!((back.x - g.x).abs() < 1e-9);
            assert!((back.y - g.y).abs() < 1e-9);
            assert!((back.w - g.w).abs() < 1e-9);
            assert!((back.h - g.h).abs() < 1e-9);
        }
    }

    #[test]
    fn anchors_single_cell() {
        let grid = generate_anchors(1, 1, 16.0, &[8.0], &[1.0]);
        assert_eq!(grid.anchors.len(), 1);
        let a = grid.anchors[0];
        assert_eq!((a.x, a.y, a.w, a.h), (4.0, 4.0, 8.0, 8.0));
        assert_eq!(a.center(), (8.0, 8.0));
    }

    #[test]
    fn anchors_count_formula() {
        let grid = generate_anchors(4, 4, 8.0, &[8.0, 16.0, 32.0], &[0.5, 1.0, 2.0]);
        assert_eq!(grid.anchors.len(), 144);
        assert_eq!(grid.k(), 9);
    }

    #[test]
    fn anchors_same_cell_share_center() {
        let grid = generate_anchors(3, 2, 4.0, &[6.0, 10.0], &[0.5, 1.0]);
        let c = grid.anchors[grid.index(0, 0, 0)].center();
        for a in 1..grid.k() {
            assert_eq!(grid.anchors[grid.index(0, 0, a)].center(), c);
        }
        assert_eq!(c, (2.0, 2.0));
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in -50.0..50.0f64, ay in -50.0..50.0f64, aw in 0.1..40.0f64, ah in 0.1..40.0f64,
            bx in -50.0..50.0f64, by in -50.0..50.0f64, bw in 0.1..40.0f64, bh in 0.1..40.0f64,
        ) {
            let a = BBox::new(ax, ay, aw, ah);
            let bb = BBox::new(bx, by, bw, bh);
            let v = iou(&a, &bb);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&bb, &a));
            // 1 only for identical boxes.
            if v == 1.0 {
                prop_assert_eq!(a, bb);
            }
        }

        #[test]
        fn anchor_count_identity(
            fw in 1usize..6, fh in 1usize..6,
            ns in 1usize..4, nr in 1usize..4,
        ) {
            let scales: Vec<f64> = (0..ns).map(|i| 4.0 + i as f64 * 3.0).collect();
            let ratios: Vec<f64> = (0..nr).map(|i| 0.5 + i as f64 * 0.5).collect();
            let grid = generate_anchors(fw, fh, 4.0, &scales, &ratios);
            prop_assert_eq!(grid.anchors.len(), fw * fh * ns * nr);
        }
    }
}
