//! Detection evaluation: greedy detection-to-truth matching, precision /
//! recall curves, average precision, timing, and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::data_io::DatasetTable;
use crate::data_io::decode_image;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nnet::Tensor;

/// One detection on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(class: usize, bbox: BBox, score: f64) -> Self {
        assert!(score.is_finite(), "detection score must be finite");
        Detection { class, bbox, score }
    }
}

/// Anything that can detect objects in an image. Implementations must be
/// immutable during detection so evaluation can fan out across threads.
pub trait Detector {
    fn detect(&self, image: &Tensor) -> Result<Vec<Detection>>;
}

/// A detection annotated with its match outcome, in global score order.
#[derive(Debug, Clone)]
pub struct MatchedDetection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub tp: bool,
}

/// Greedy matching: process detections in descending score order (ties by
/// image then input position); a detection is a true positive iff its
/// highest-IoU unconsumed same-class ground truth in its image reaches
/// `iou_thresh`, and that ground truth is then consumed.
pub fn match_detections(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[&[(usize, BBox)]],
    iou_thresh: f64,
) -> Vec<MatchedDetection> {
    assert_eq!(dets_per_image.len(), gts_per_image.len());
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for di in 0..dets.len() {
            order.push((img, di));
        }
    }
    order.sort_by(|&(ia, da), &(ib, db)| {
        let sa = dets_per_image[ia][da].score;
        let sb = dets_per_image[ib][db].score;
        sb.partial_cmp(&sa).unwrap().then(ia.cmp(&ib)).then(da.cmp(&db))
    });

    let mut consumed: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (img, di) in order {
        let det = &dets_per_image[img][di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gclass, gbox)) in gts_per_image[img].iter().enumerate() {
            if consumed[img][gi] || *gclass != det.class {
                continue;
            }
            let v = iou(&det.bbox, gbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        let tp = match best {
            Some((gi, v)) if v >= iou_thresh => {
                consumed[img][gi] = true;
                true
            }
            _ => false,
        };
        out.push(MatchedDetection {
            image: img,
            class: det.class,
            score: det.score,
            tp,
        });
    }
    out
}

/// Precision/recall points after each successive detection.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// (recall, precision) pairs; recall is non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub n_gt: usize,
}

/// Build the curve from TP/FP flags already in descending-score order.
/// Point `k` is `(tp_k / n_gt, tp_k / k)` after the k-th detection.
pub fn precision_recall_curve(flags: &[bool], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::Config("recall undefined with zero ground truths".into()));
    }
    let mut tp = 0usize;
    let points = flags
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            if f {
                tp += 1;
            }
            (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    Ok(PrCurve { points, n_gt })
}

/// How AP integrates the curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMethod {
    /// Area under the precision envelope over all recall change points.
    AllPoints,
    /// Mean of the envelope sampled at recalls 0.0, 0.1, ..., 1.0.
    ElevenPoint,
}

/// Average precision of a curve: area under `max_{r' >= r} p(r')`.
pub fn average_precision(curve: &PrCurve) -> f64 {
    average_precision_with(curve, ApMethod::AllPoints)
}

pub fn average_precision_with(curve: &PrCurve, method: ApMethod) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    // Right-to-left precision envelope.
    let n = curve.points.len();
    let mut env = vec![0.0; n];
    let mut running = 0.0f64;
    for k in (0..n).rev() {
        running = running.max(curve.points[k].1);
        env[k] = running;
    }
    match method {
        ApMethod::AllPoints => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (k, &(r, _)) in curve.points.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * env[k];
                    prev_recall = r;
                }
            }
            ap
        }
        ApMethod::ElevenPoint => {
            let mut total = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p = curve
                    .points
                    .iter()
                    .zip(env.iter())
                    .filter(|((rk, _), _)| *rk >= r - 1e-12)
                    .map(|(_, &e)| e)
                    .next()
                    .unwrap_or(0.0);
                total += p;
            }
            total / 11.0
        }
    }
}

/// Evaluation summary: per-class AP, their mean, match counts, and
/// detection-only wall-clock statistics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub total_detections: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub n_images: usize,
    pub mean_seconds: f64,
    pub median_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub curves: BTreeMap<usize, PrCurve>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            ap_method: ApMethod::AllPoints,
        }
    }
}

/// Run the detector over every split row, match against ground truth, and
/// aggregate per-class APs and timing. The clock runs around the detect
/// call only, never image decode.
pub fn evaluate(detector: &dyn Detector, split: &DatasetTable, cfg: &EvalConfig) -> Result<EvalOutcome> {
    if split.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut dets_per_image = Vec::with_capacity(split.len());
    let mut times = Vec::with_capacity(split.len());
    for row in &split.rows {
        let image = decode_image(&row.image_path)?;
        let start = Instant::now();
        let dets = detector.detect(&image)?;
        times.push(start.elapsed().as_secs_f64());
        dets_per_image.push(dets);
    }
    let gts: Vec<&[(usize, BBox)]> = split.rows.iter().map(|r| r.gts.as_slice()).collect();
    let outcome = score_detections(&dets_per_image, &gts, cfg)?;

    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let mut report = outcome.report;
    report.mean_seconds = times.iter().sum::<f64>() / times.len() as f64;
    report.median_seconds = median;
    Ok(EvalOutcome {
        report,
        curves: outcome.curves,
    })
}

/// Metric computation over pre-collected detections (no I/O, no timing).
pub fn score_detections(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[&[(usize, BBox)]],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let matched = match_detections(dets_per_image, gts_per_image, cfg.iou_thresh);

    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for gts in gts_per_image {
        for (class, _) in gts.iter() {
            *gt_counts.entry(*class).or_insert(0) += 1;
        }
    }

    let mut curves = BTreeMap::new();
    let mut per_class_ap = BTreeMap::new();
    for (&class, &n_gt) in &gt_counts {
        let flags: Vec<bool> = matched.iter().filter(|m| m.class == class).map(|m| m.tp).collect();
        let curve = precision_recall_curve(&flags, n_gt)?;
        per_class_ap.insert(class, average_precision_with(&curve, cfg.ap_method));
        curves.insert(class, curve);
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };

    let tp = matched.iter().filter(|m| m.tp).count();
    Ok(EvalOutcome {
        report: EvalReport {
            per_class_ap,
            map,
            total_detections: matched.len(),
            true_positives: tp,
            false_positives: matched.len() - tp,
            n_images: dets_per_image.len(),
            mean_seconds: 0.0,
            median_seconds: 0.0,
        },
        curves,
    })
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

/// Render a PR curve as a self-contained SVG plot.
pub fn pr_curve_svg(curve: &PrCurve, title: &str) -> String {
    let (w, h) = (480.0, 360.0);
    let (ml, mr, mt, mb) = (50.0, 15.0, 30.0, 40.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let px = |r: f64| ml + r * pw;
    let py = |p: f64| mt + (1.0 - p) * ph;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        title
    ));
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            px(f), py(0.0), px(f), py(1.0)
        ));
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
            px(0.0), py(f), px(1.0), py(f)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{:.1}</text>\n",
            px(f), py(0.0) + 16.0, f
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.1}</text>\n",
            px(0.0) - 6.0, py(f) + 3.0, f
        ));
    }
    s.push_str(&format!(
        "  <rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">recall</text>\n",
        px(0.5), h - 8.0
    ));
    s.push_str(&format!(
        "  <text x=\"14\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">precision</text>\n",
        py(0.5), py(0.5)
    ));
    if !curve.points.is_empty() {
        let pts: Vec<String> = std::iter::once((0.0, curve.points[0].1))
            .chain(curve.points.iter().cloned())
            .map(|(r, p)| format!("{:.2},{:.2}", px(r), py(p)))
            .collect();
        s.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#c22\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Self-contained SVG of an image (rendered as run-length pixel rects) with
/// detection boxes drawn on top.
pub fn detection_overlay_svg(image: &Tensor, detections: &[Detection]) -> String {
    assert_eq!(image.shape().len(), 3);
    let (c_n, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    assert_eq!(c_n, 3, "overlay expects an RGB image");
    let scale = 6usize;
    let data = image.data();
    let byte = |c: usize, y: usize, x: usize| -> u8 {
        (data[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
    };

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" shape-rendering=\"crispEdges\">\n",
        w * scale,
        h * scale,
        w * scale,
        h * scale
    ));
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let rgb = (byte(0, y, x), byte(1, y, x), byte(2, y, x));
            let mut run = 1;
            while x + run < w && (byte(0, y, x + run), byte(1, y, x + run), byte(2, y, x + run)) == rgb {
                run += 1;
            }
            s.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#{:02x}{:02x}{:02x}\"/>\n",
                x * scale,
                y * scale,
                run * scale,
                scale,
                rgb.0,
                rgb.1,
                rgb.2
            ));
            x += run;
        }
    }
    for det in detections {
        s.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#00ff00\" stroke-width=\"2\"/>\n",
            det.bbox.x * scale as f64,
            det.bbox.y * scale as f64,
            det.bbox.w * scale as f64,
            det.bbox.h * scale as f64
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#00ff00\">{} {:.2}</text>\n",
            det.bbox.x * scale as f64,
            (det.bbox.y * scale as f64 - 3.0).max(10.0),
            det.class,
            det.score
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Serialize a curve as `recall,precision` CSV with 6 decimal places.
pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut s = String::from("recall,precision\n");
    for &(r, p) in &curve.points {
        s.push_str(&format!("{r:.6},{p:.6}\n"));
    }
    s
}

/// Parse the CSV produced by [`pr_curve_csv`] (n_gt is not stored).
pub fn parse_pr_curve_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("recall,precision") => {}
        other => {
            return Err(Error::Config(format!("bad PR CSV header: {other:?}")));
        }
    }
    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (r, p) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("bad PR CSV line `{line}`")))?;
        points.push((
            r.parse().map_err(|_| Error::Config(format!("bad recall `{r}`")))?,
            p.parse().map_err(|_| Error::Config(format!("bad precision `{p}`")))?,
        ));
    }
    Ok(points)
}

/// Flat `key = value` rendering of the deterministic report fields.
/// Timing is deliberately left out so report bytes are reproducible; it is
/// written separately by [`emit_report`].
pub fn report_text(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("map = {:.6}\n", report.map));
    for (class, ap) in &report.per_class_ap {
        s.push_str(&format!("ap_class_{class} = {ap:.6}\n"));
    }
    s.push_str(&format!("n_images = {}\n", report.n_images));
    s.push_str(&format!("total_detections = {}\n", report.total_detections));
    s.push_str(&format!("true_positives = {}\n", report.true_positives));
    s.push_str(&format!("false_positives = {}\n", report.false_positives));
    s
}

/// Write `report.txt`, `timing.txt`, and per-class `pr_<class>.csv` /
/// `pr_<class>.svg` under `out_dir`.
pub fn emit_report(outcome: &EvalOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, content).map_err(|e| Error::io(&p, e))
    };
    write("report.txt", report_text(&outcome.report))?;
    write(
        "timing.txt",
        format!(
            "mean_seconds = {:.6}\nmedian_seconds = {:.6}\n",
            outcome.report.mean_seconds, outcome.report.median_seconds
        ),
    )?;
    for (class, curve) in &outcome.curves {
        write(&format!("pr_{class}.csv"), pr_curve_csv(curve))?;
        write(&format!("pr_{class}.svg"), pr_curve_svg(curve, &format!("PR curve, class {class}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::VEHICLE_CLASS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class: usize, x: f64, score: f64) -> Detection {
        Detection::new(class, BBox::new(x, 0.0, 10.0, 10.0), score)
    }

    #[test]
    fn exact_match_is_tp() {
        let gts: Vec<(usize, BBox)> = vec![(1, BBox::new(0.0, 0.0, 10.0, 10.0))];
        let m = match_detections(&[vec![det(1, 0.0, 0.9)]], &[&gts], 0.5);
        assert!(m[0].tp);
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let gts: Vec<(usize, BBox)> = vec![(1, BBox::new(0.0, 0.0, 10.0, 10.0))];
        let m = match_detections(&[vec![det(1, 0.0, 0.5), det(1, 1.0, 0.9)]], &[&gts], 0.5);
        // Higher score processed first: index 1 wins the GT.
        assert_eq!(m[0].score, 0.9);
        assert!(m[0].tp);
        assert!(!m[1].tp);
    }

    #[test]
    fn detection_on_empty_image_is_fp() {
        let gts: Vec<(usize, BBox)> = vec![];
        let m = match_detections(&[vec![det(1, 0.0, 0.8)]], &[&gts], 0.5);
        assert!(!m[0].tp);
    }

    #[test]
    fn gts_consumed_at_most_once() {
        let gts: Vec<(usize, BBox)> = vec![
            (1, BBox::new(0.0, 0.0, 10.0, 10.0)),
            (1, BBox::new(30.0, 0.0, 10.0, 10.0)),
        ];
        let dets = vec![det(1, 0.0, 0.9), det(1, 0.5, 0.8), det(1, 30.0, 0.7), det(1, 29.5, 0.6)];
        let m = match_detections(&[dets], &[&gts], 0.5);
        assert_eq!(m.iter().filter(|d| d.tp).count(), 2);
    }

    #[test]
    fn curve_single_tp() {
        let c = precision_recall_curve(&[true], 1).unwrap();
        assert_eq!(c.points, vec![(1.0, 1.0)]);
    }

    #[test]
    fn curve_hand_case() {
        let c = precision_recall_curve(&[true, false, true], 2).unwrap();
        assert_eq!(c.points.len(), 3);
        assert_eq!(c.points[0], (0.5, 1.0));
        assert_eq!(c.points[1], (0.5, 0.5));
        assert!((c.points[2].0 - 1.0).abs() < 1e-12);
        assert!((c.points[2].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn curve_all_fp() {
        let c = precision_recall_curve(&[false, false], 3).unwrap();
        for (r, p) in c.points {
            assert_eq!((r, p), (0.0, 0.0));
        }
    }

    #[test]
    fn curve_zero_gt_errors() {
        assert!(precision_recall_curve(&[true], 0).is_err());
    }

    #[test]
    fn ap_single_full_recall_tp_is_one() {
        let c = precision_recall_curve(&[true], 1).unwrap();
        assert_eq!(average_precision(&c), 1.0);
    }

    #[test]
    fn ap_hand_case() {
        let c = precision_recall_curve(&[true, false, true], 2).unwrap();
        let ap = average_precision(&c);
        assert!((ap - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-9, "ap = {ap}");
    }

    /// Independent oracle: for each true positive (the j-th of n_gt), take
    /// the best precision at any point with recall >= j/n_gt.
    pub(crate) fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
        let mut points = Vec::new();
        let mut tp = 0;
        for (k, &f) in flags.iter().enumerate() {
            if f {
                tp += 1;
            }
            points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let total_tp = tp;
        let mut ap = 0.0;
        for j in 1..=total_tp {
            let r = j as f64 / n_gt as f64;
            let best = points
                .iter()
                .filter(|(rk, _)| *rk >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
            ap += best;
        }
        ap / n_gt as f64
    }

    #[test]
    fn ap_matches_oracle_on_1000_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..1000 {
            let n = rng.random_range(0..=10usize);
            let flags: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            let tp_count = flags.iter().filter(|&&f| f).count();
            let n_gt = rng.random_range(tp_count.max(1)..=tp_count.max(1) + 5);
            let c = precision_recall_curve(&flags, n_gt).unwrap();
            let ap = average_precision(&c);
            let oracle = ap_oracle(&flags, n_gt);
            assert!((ap - oracle).abs() < 1e-9, "flags {flags:?} n_gt {n_gt}: {ap} vs {oracle}");
            assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn ap_invariant_under_monotone_score_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let gts: Vec<(usize, BBox)> = vec![
            (1, BBox::new(0.0, 0.0, 10.0, 10.0)),
            (1, BBox::new(30.0, 0.0, 10.0, 10.0)),
        ];
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..6)
                .map(|_| det(1, rng.random_range(0.0..40.0), rng.random_range(0.1..0.9)))
                .collect();
            let rescaled: Vec<Detection> = dets
                .iter()
                .map(|d| Detection::new(d.class, d.bbox, d.score.exp() * 3.0 + 1.0))
                .collect();
            let cfg = EvalConfig::default();
            let a = score_detections(&[dets], &[&gts], &cfg).unwrap().report.map;
            let b = score_detections(&[rescaled], &[&gts], &cfg).unwrap().report.map;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eleven_point_on_perfect_curve() {
        let c = precision_recall_curve(&[true, true], 2).unwrap();
        let ap = average_precision_with(&c, ApMethod::ElevenPoint);
        assert!((ap - 1.0).abs() < 1e-12);
    }

    struct FixedDetector {
        per_image: Vec<Vec<Detection>>,
        counter: std::sync::atomic::AtomicUsize,
    }

    impl Detector for FixedDetector {
        fn detect(&self, _image: &Tensor) -> crate::error::Result<Vec<Detection>> {
            let i = self.counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(self.per_image[i].clone())
        }
    }

    fn tiny_split(dir: &Path, n: usize) -> DatasetTable {
        crate::data_io::synth_dataset(n, 5, dir, &crate::data_io::SynthConfig::default()).unwrap()
    }

    #[test]
    fn perfect_detector_scores_map_one() {
        let dir = std::env::temp_dir().join("twostage_eval_perfect");
        let _ = std::fs::remove_dir_all(&dir);
        let split = tiny_split(&dir, 4);
        let per_image: Vec<Vec<Detection>> = split
            .rows
            .iter()
            .map(|r| {
                r.gts
                    .iter()
                    .map(|&(c, b)| Detection::new(c, b, 0.9))
                    .collect()
            })
            .collect();
        let d = FixedDetector {
            per_image,
            counter: Default::default(),
        };
        let out = evaluate(&d, &split, &EvalConfig::default()).unwrap();
        assert_eq!(out.report.map, 1.0);
        assert_eq!(out.report.false_positives, 0);
        assert!(out.report.mean_seconds >= 0.0 && out.report.median_seconds >= 0.0);
    }

    #[test]
    fn empty_detector_scores_map_zero() {
        let dir = std::env::temp_dir().join("twostage_eval_empty");
        let _ = std::fs::remove_dir_all(&dir);
        let split = tiny_split(&dir, 3);
        let d = FixedDetector {
            per_image: vec![vec![]; 3],
            counter: Default::default(),
        };
        let out = evaluate(&d, &split, &EvalConfig::default()).unwrap();
        assert_eq!(out.report.map, 0.0);
        assert_eq!(out.report.per_class_ap[&VEHICLE_CLASS], 0.0);
    }

    #[test]
    fn csv_empty_curve_is_header_only() {
        let c = PrCurve {
            points: vec![],
            n_gt: 1,
        };
        assert_eq!(pr_curve_csv(&c), "recall,precision\n");
    }

    #[test]
    fn csv_roundtrip_within_1e6() {
        let c = precision_recall_curve(&[true, false, true, true], 7).unwrap();
        let parsed = parse_pr_curve_csv(&pr_curve_csv(&c)).unwrap();
        assert_eq!(parsed.len(), c.points.len());
        for ((r1, p1), (r2, p2)) in parsed.iter().zip(c.points.iter()) {
            assert!((r1 - r2).abs() < 1e-6 && (p1 - p2).abs() < 1e-6);
        }
    }

    /// Minimal XML well-formedness check: tag balance and quoting.
    fn assert_well_formed_xml(text: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find('<') {
            let close = rest[open..].find('>').expect("unclosed tag") + open;
            let tag = &rest[open + 1..close];
            assert!(!tag.is_empty());
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| panic!("closing {name} with empty stack"));
                assert_eq!(top, name, "mismatched closing tag");
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name: String = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
            assert_eq!(
                rest[open + 1..close].matches('"').count() % 2,
                0,
                "unbalanced quotes in tag"
            );
            rest = &rest[close + 1..];
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn svg_is_well_formed() {
        let c = precision_recall_curve(&[true, false, true], 2).unwrap();
        let svg = pr_curve_svg(&c, "PR curve, class 1");
        assert_well_formed_xml(&svg);
        let empty = PrCurve {
            points: vec![],
            n_gt: 1,
        };
        assert_well_formed_xml(&pr_curve_svg(&empty, "empty"));
    }

    #[test]
    fn emit_report_writes_all_files() {
        let dir = std::env::temp_dir().join("twostage_emit_report");
        let _ = std::fs::remove_dir_all(&dir);
        let flags = [true, true, false];
        let curve = precision_recall_curve(&flags, 2).unwrap();
        let mut curves = BTreeMap::new();
        curves.insert(1usize, curve.clone());
        let mut per_class_ap = BTreeMap::new();
        per_class_ap.insert(1usize, average_precision(&curve));
        let outcome = EvalOutcome {
            report: EvalReport {
                per_class_ap,
                map: average_precision(&curve),
                total_detections: 3,
                true_positives: 2,
                false_positives: 1,
                n_images: 2,
                mean_seconds: 0.01,
                median_seconds: 0.01,
            },
            curves,
        };
        emit_report(&outcome, &dir).unwrap();
        let report = fs::read_to_string(dir.join("report.txt")).unwrap();
        assert!(report.contains("map = 1.000000"));
        assert!(dir.join("pr_1.csv").exists());
        assert!(dir.join("pr_1.svg").exists());
        assert!(dir.join("timing.txt").exists());
    }
}
