//! Category-independent region proposals.
//!
//! Two generators: a deterministic multi-scale sliding window, and a
//! lightweight selective search that merges grid superpixels by mean-color
//! similarity and emits the bounding box of every region ever formed.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nnet::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    SelectiveLite,
    Sliding,
}

#[derive(Debug, Clone)]
pub struct ProposalConfig {
    /// Hard cap on emitted proposals.
    pub max_proposals: usize,
    pub mode: ProposalMode,
    /// Sliding-window side lengths in pixels.
    pub sliding_scales: Vec<f64>,
    /// Sliding-window h/w aspect ratios.
    pub sliding_ratios: Vec<f64>,
    pub sliding_stride: f64,
    /// Superpixel cell side in pixels for selective search.
    pub superpixel_cell: usize,
    /// Stop merging once the closest region pair's mean-color distance
    /// exceeds this (effectively infinite by default: merge to one region).
    pub merge_threshold: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            max_proposals: 2000,
            mode: ProposalMode::SelectiveLite,
            sliding_scales: vec![12.0, 18.0, 24.0],
            sliding_ratios: vec![0.5, 0.75, 1.0],
            sliding_stride: 4.0,
            superpixel_cell: 4,
            merge_threshold: 1e30,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_proposals < 1 {
            return Err(Error::Config("max_proposals must be >= 1".into()));
        }
        if self.superpixel_cell < 1 {
            return Err(Error::Config("superpixel_cell must be >= 1".into()));
        }
        if self.sliding_scales.is_empty() || self.sliding_ratios.is_empty() {
            return Err(Error::Config("sliding scales/ratios must be non-empty".into()));
        }
        if self.sliding_stride <= 0.0 {
            return Err(Error::Config("sliding_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Dense multi-scale sliding-window boxes, scale-major then row-major, all
/// fully inside the image. Returns an empty list when no scale fits.
pub fn sliding_window_proposals(img_w: usize, img_h: usize, cfg: &ProposalConfig) -> Vec<BBox> {
    let (iw, ih) = (img_w as f64, img_h as f64);
    let mut out = Vec::new();
    for &scale in &cfg.sliding_scales {
        for &ratio in &cfg.sliding_ratios {
            let w = scale;
            let h = scale * ratio;
            if w > iw || h > ih {
                continue;
            }
            let mut y = 0.0;
            while y + h <= ih {
                let mut x = 0.0;
                while x + w <= iw {
                    out.push(BBox::new(x, y, w, h));
                    x += cfg.sliding_stride;
                }
                y += cfg.sliding_stride;
            }
        }
    }
    out
}

/// Superpixel regions with per-region color statistics; merged regions keep
/// the lower id as root.
struct Regions {
    /// Pixel bounds per live root: (x0, y0, x1, y1), exclusive right/bottom.
    bounds: Vec<(usize, usize, usize, usize)>,
    color_sum: Vec<[f64; 3]>,
    area: Vec<f64>,
}

impl Regions {
    fn mean(&self, root: usize) -> [f64; 3] {
        let a = self.area[root];
        let s = self.color_sum[root];
        [s[0] / a, s[1] / a, s[2] / a]
    }
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Simplified selective search.
///
/// Seeds a grid of superpixels (`cfg.superpixel_cell` pixels per side),
/// then greedily merges the most similar adjacent pair (similarity =
/// negative mean-color distance, ties broken lexicographically on region
/// ids) until one region remains or the best distance exceeds
/// `merge_threshold`. Emits each region's bounding box in formation order,
/// deduplicated; the cap keeps the largest-area boxes (stable order).
///
/// Images smaller than one grid cell yield the whole-image box.
pub fn selective_search_lite(image: &Tensor, cfg: &ProposalConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "selective search expects [3, h, w] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let cell = cfg.superpixel_cell;
    let (gw, gh) = (w / cell, h / cell);
    if gw == 0 || gh == 0 {
        return Ok(vec![BBox::new(0.0, 0.0, w as f64, h as f64)]);
    }

    // Seed superpixels: cell (gx, gy) covers x in [gx*cell, x1), where the
    // last cell in a row/column absorbs the remainder pixels.
    let n0 = gw * gh;
    let mut regions = Regions {
        bounds: Vec::with_capacity(n0),
        color_sum: vec![[0.0; 3]; n0],
        area: vec![0.0; n0],
    };
    let data = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let x0 = gx * cell;
            let y0 = gy * cell;
            let x1 = if gx == gw - 1 { w } else { x0 + cell };
            let y1 = if gy == gh - 1 { h } else { y0 + cell };
            let id = gy * gw + gx;
            regions.bounds.push((x0, y0, x1, y1));
            let mut sum = [0.0; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    for (c, s) in sum.iter_mut().enumerate() {
                        *s += data[(c * h + y) * w + x];
                    }
                }
            }
            regions.color_sum[id] = sum;
            regions.area[id] = ((x1 - x0) * (y1 - y0)) as f64;
        }
    }

    // Adjacency between live roots.
    let mut adjacent: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n0];
    for gy in 0..gh {
        for gx in 0..gw {
            let id = gy * gw + gx;
            if gx + 1 < gw {
                adjacent[id].insert(id + 1);
                adjacent[id + 1].insert(id);
            }
            if gy + 1 < gh {
                adjacent[id].insert(id + gw);
                adjacent[id + gw].insert(id);
            }
        }
    }

    // Every region ever formed, in formation order: the seeds first.
    let mut formed: Vec<BBox> = regions
        .bounds
        .iter()
        .map(|&(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64))
        .collect();
    let mut formed_area: Vec<f64> = regions.area.clone();

    let mut live: std::collections::BTreeSet<usize> = (0..n0).collect();
    while live.len() > 1 {
        // Best adjacent pair: smallest color distance, ties by (id_a, id_b).
        let mut best: Option<(f64, usize, usize)> = None;
        for &a in &live {
            for &b in &adjacent[a] {
                if b <= a {
                    continue;
                }
                let d = color_distance(regions.mean(a), regions.mean(b));
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => d < bd || (d == bd && (a, b) < (ba, bb)),
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > cfg.merge_threshold {
            break;
        }

        // Merge b into a; a's id becomes the merged region's root.
        let (ax0, ay0, ax1, ay1) = regions.bounds[a];
        let (bx0, by0, bx1, by1) = regions.bounds[b];
        let nb = (ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1));
        regions.bounds[a] = nb;
        for c in 0..3 {
            regions.color_sum[a][c] += regions.color_sum[b][c];
        }
        regions.area[a] += regions.area[b];
        live.remove(&b);

        let b_adj = std::mem::take(&mut adjacent[b]);
        for n in b_adj {
            if n != a {
                adjacent[n].remove(&b);
                adjacent[n].insert(a);
                adjacent[a].insert(n);
            } else {
                adjacent[a].remove(&b);
            }
        }

        formed.push(BBox::new(
            nb.0 as f64,
            nb.1 as f64,
            (nb.2 - nb.0) as f64,
            (nb.3 - nb.1) as f64,
        ));
        formed_area.push(regions.area[a]);
    }

    // Dedupe exact duplicates, keeping the first occurrence.
    let mut seen = std::collections::BTreeSet::new();
    let mut boxes = Vec::with_capacity(formed.len());
    let mut areas = Vec::with_capacity(formed.len());
    for (bbox, area) in formed.into_iter().zip(formed_area) {
        let key = (
            bbox.x.to_bits(),
            bbox.y.to_bits(),
            bbox.w.to_bits(),
            bbox.h.to_bits(),
        );
        if seen.insert(key) {
            boxes.push(bbox);
            areas.push(area);
        }
    }

    Ok(cap_by_key(boxes, &areas, cfg.max_proposals))
}

/// Keep the `cap` highest-ranked boxes (rank keys descending, ties by input
/// position), preserving the input order among survivors.
fn cap_by_key(boxes: Vec<BBox>, keys: &[f64], cap: usize) -> Vec<BBox> {
    if boxes.len() <= cap {
        return boxes;
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![false; boxes.len()];
    for &i in order.iter().take(cap) {
        keep[i] = true;
    }
    boxes
        .into_iter()
        .zip(keep)
        .filter_map(|(b, k)| k.then_some(b))
        .collect()
}

/// Stable truncation to the configured budget. Selective mode ranks by
/// region area (descending); sliding mode keeps the deterministic prefix.
pub fn cap_proposals(boxes: Vec<BBox>, mode: ProposalMode, max_proposals: usize) -> Vec<BBox> {
    match mode {
        ProposalMode::Sliding => {
            let mut boxes = boxes;
            boxes.truncate(max_proposals);
            boxes
        }
        ProposalMode::SelectiveLite => {
            let areas: Vec<f64> = boxes.iter().map(|b| b.area()).collect();
            cap_by_key(boxes, &areas, max_proposals)
        }
    }
}

/// Generate proposals for one image per the configured mode, capped.
pub fn propose(image: &Tensor, cfg: &ProposalConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    match cfg.mode {
        ProposalMode::SelectiveLite => selective_search_lite(image, cfg),
        ProposalMode::Sliding => {
            let (h, w) = (image.shape()[1], image.shape()[2]);
            Ok(cap_proposals(
                sliding_window_proposals(w, h, cfg),
                ProposalMode::Sliding,
                cfg.max_proposals,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_sliding(scales: &[f64], ratios: &[f64], stride: f64) -> ProposalConfig {
        ProposalConfig {
            mode: ProposalMode::Sliding,
            sliding_scales: scales.to_vec(),
            sliding_ratios: ratios.to_vec(),
            sliding_stride: stride,
            ..Default::default()
        }
    }

    #[test]
    fn sliding_single_full_image_box() {
        let cfg = cfg_sliding(&[32.0], &[1.0], 32.0);
        let boxes = sliding_window_proposals(32, 32, &cfg);
        assert_eq!(boxes, vec![BBox::new(0.0, 0.0, 32.0, 32.0)]);
    }

    #[test]
    fn sliding_grid_count() {
        // ((64-32)/16 + 1)^2 = 9 positions.
        let cfg = cfg_sliding(&[32.0], &[1.0], 16.0);
        let boxes = sliding_window_proposals(64, 64, &cfg);
        assert_eq!(boxes.len(), 9);
    }

    #[test]
    fn sliding_no_scale_fits_returns_empty() {
        let cfg = cfg_sliding(&[100.0], &[1.0], 8.0);
        assert!(sliding_window_proposals(32, 32, &cfg).is_empty());
    }

    #[test]
    fn sliding_boxes_stay_inside_500_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let w = rng.random_range(8..80);
            let h = rng.random_range(8..80);
            let cfg = cfg_sliding(
                &[rng.random_range(4.0..40.0), rng.random_range(4.0..40.0)],
                &[rng.random_range(0.3..2.0)],
                rng.random_range(1.0..12.0),
            );
            for b in sliding_window_proposals(w, h, &cfg) {
                assert!(b.inside(w as f64, h as f64), "{b:?} outside {w}x{h}");
            }
        }
    }

    fn solid_image(w: usize, h: usize, color: [f64; 3]) -> Tensor {
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for i in 0..w * h {
                t.data_mut()[c * w * h + i] = color[c];
            }
        }
        t
    }

    #[test]
    fn uniform_image_emits_whole_image_box() {
        let img = solid_image(16, 16, [0.5, 0.5, 0.5]);
        let cfg = ProposalConfig::default();
        let boxes = selective_search_lite(&img, &cfg).unwrap();
        assert!(boxes.contains(&BBox::new(0.0, 0.0, 16.0, 16.0)));
    }

    #[test]
    fn two_halves_form_before_any_cross_color_region() {
        // Left half black, right half white; 16x8 image, 4px cells.
        let mut img = solid_image(16, 8, [0.0, 0.0, 0.0]);
        let (h, w) = (8, 16);
        for c in 0..3 {
            for y in 0..h {
                for x in 8..w {
                    img.data_mut()[(c * h + y) * w + x] = 1.0;
                }
            }
        }
        let boxes = selective_search_lite(&img, &ProposalConfig::default()).unwrap();
        let left = BBox::new(0.0, 0.0, 8.0, 8.0);
        let right = BBox::new(8.0, 0.0, 8.0, 8.0);
        let pos = |target: &BBox| boxes.iter().position(|b| b == target);
        let (li, ri) = (pos(&left).expect("left half missing"), pos(&right).expect("right half missing"));
        // First box spanning both color halves.
        let cross = boxes
            .iter()
            .position(|b| b.x < 8.0 && b.right() > 8.0)
            .expect("final merge must span the image");
        assert!(li < cross && ri < cross, "halves at {li},{ri}, cross at {cross}");
    }

    #[test]
    fn one_pixel_image_single_box() {
        let img = solid_image(1, 1, [0.2, 0.4, 0.6]);
        let boxes = selective_search_lite(&img, &ProposalConfig::default()).unwrap();
        assert_eq!(boxes, vec![BBox::new(0.0, 0.0, 1.0, 1.0)]);
    }

    #[test]
    fn selective_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut img = solid_image(24, 24, [0.5, 0.5, 0.5]);
        for v in img.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let cfg = ProposalConfig::default();
        let a = selective_search_lite(&img, &cfg).unwrap();
        let b = selective_search_lite(&img, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cap_unchanged_when_under_budget() {
        let boxes = vec![BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(1.0, 1.0, 2.0, 2.0)];
        let capped = cap_proposals(boxes.clone(), ProposalMode::SelectiveLite, 10);
        assert_eq!(capped, boxes);
    }

    #[test]
    fn cap_zero_rejected_by_config() {
        let cfg = ProposalConfig {
            max_proposals: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cap_keeps_top_ranked() {
        // 30 boxes with distinct areas, cap 20: the kept set is exactly the
        // 20 largest, in original order.
        let boxes: Vec<BBox> = (1..=30)
            .map(|i| BBox::new(0.0, 0.0, i as f64, 1.0))
            .collect();
        let capped = cap_proposals(boxes, ProposalMode::SelectiveLite, 20);
        assert_eq!(capped.len(), 20);
        assert!(capped.iter().all(|b| b.w >= 11.0));
        for pair in capped.windows(2) {
            assert!(pair[0].w < pair[1].w, "input order not preserved");
        }
    }

    #[test]
    fn output_never_exceeds_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = solid_image(32, 32, [0.4, 0.4, 0.4]);
        for v in img.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let cfg = ProposalConfig {
            max_proposals: 17,
            ..Default::default()
        };
        let boxes = selective_search_lite(&img, &cfg).unwrap();
        assert!(boxes.len() <= 17);
    }
}
