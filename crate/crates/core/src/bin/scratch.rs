// Temporary debugging harness; not part of the deliverable.
use twostage::config::RunConfig;
use twostage::data_io::{decode_image, load_dataset, split_dataset};
use twostage::geometry::iou;
use twostage::model::load_model;
use twostage::proposals::propose;
use twostage::rcnn::{warp_with_context, WarpConfig};


fn faster_diag() {
    use twostage::faster_rcnn::rpn_propose;
    let cfg = RunConfig::default();
    let table = load_dataset(std::path::Path::new(&*std::env::var("DS").unwrap_or("/tmp/ds30/dataset.csv".into()))).unwrap();
    let (_, test) = split_dataset(&table, &cfg.split_spec()).unwrap();
    let model = load_model(std::path::Path::new(&*std::env::var("FM").unwrap_or("/tmp/faster30.tsd".into()))).unwrap();
    let m = model.as_faster().unwrap();

    let mut total = 0;
    let mut hit = 0;
    for row in &test.rows {
        let img = decode_image(&row.image_path).unwrap();
        let props = rpn_propose(&img, m).unwrap();
        for (_, g) in &row.gts {
            total += 1;
            let best = props.iter().map(|p| iou(&p.bbox, g)).fold(0.0, f64::max);
            if best >= 0.5 { hit += 1; }
        }
    }
    println!("rpn proposal recall@0.5: {hit}/{total}");
    // geometry of the misses
    for row in &test.rows {
        let img = decode_image(&row.image_path).unwrap();
        let props = rpn_propose(&img, m).unwrap();
        for (_, g) in &row.gts {
            let best = props.iter().map(|p| iou(&p.bbox, g)).fold(0.0, f64::max);
            if best < 0.5 {
                println!("  miss: gt ({:.0},{:.0},{:.0},{:.0}) best-prop iou {:.3} edge-dist {:.0}",
                         g.x, g.y, g.w, g.h, best,
                         g.x.min(g.y).min(64.0 - g.x - g.w).min(64.0 - g.y - g.h));
            }
        }
    }

    let row = &test.rows[0];
    let img = decode_image(&row.image_path).unwrap();
    let props = rpn_propose(&img, m).unwrap();
    println!("{} proposals; top-8 objectness vs iou:", props.len());
    for p in props.iter().take(8) {
        let best = row.gts.iter().map(|(_, g)| iou(&p.bbox, g)).fold(0.0, f64::max);
        println!("  obj {:.4} iou {:.3}", p.score, best);
    }
    // anchor-level objectness at the best anchors for each GT (train + test image)
    use twostage::geometry::{generate_anchors, decode_box, BoxDelta};
    use twostage::nnet::backbone_stride as bbs;
    let (tr, _) = split_dataset(&table, &cfg.split_spec()).unwrap();
    for (tag, r) in [("train", &tr.rows[0]), ("test", &test.rows[0])] {
        let img = decode_image(&r.image_path).unwrap();
        let fm = m.backbone.forward(&img).unwrap().output;
        let grid = generate_anchors(fm.shape()[2], fm.shape()[1], bbs(m.config.conv_blocks) as f64, &m.config.anchor_scales, &m.config.anchor_ratios);
        let (cls, reg, _) = m.rpn.forward(&fm).unwrap();
        let hw = fm.shape()[1] * fm.shape()[2];
        let w = fm.shape()[2];
        let k = grid.k();
        let obj = |ai: usize| {
            let cell = ai / k; let a = ai % k;
            let (i, j) = (cell / w, cell % w);
            let ij = i * w + j;
            let lb = cls.data()[(2*a)*hw + ij];
            let lf = cls.data()[(2*a+1)*hw + ij];
            let mx = lb.max(lf);
            ((lf-mx).exp()) / ((lb-mx).exp() + (lf-mx).exp())
        };
        let dec = |ai: usize| {
            let cell = ai / k; let a = ai % k;
            let (i, j) = (cell / w, cell % w);
            let ij = i * w + j;
            let d = BoxDelta::new(reg.data()[(4*a)*hw+ij], reg.data()[(4*a+1)*hw+ij], reg.data()[(4*a+2)*hw+ij], reg.data()[(4*a+3)*hw+ij]);
            decode_box(&d, &grid.anchors[ai], Some((64.0, 64.0))).ok()
        };
        // global max objectness
        let amax = (0..grid.anchors.len()).max_by(|&x, &y| obj(x).partial_cmp(&obj(y)).unwrap()).unwrap();
        println!("[{tag}] max objectness {:.3} at anchor {} (iou-to-gt {:.3})", obj(amax), amax,
                 r.gts.iter().map(|(_, g)| iou(&grid.anchors[amax], g)).fold(0.0, f64::max));
        for (_, g) in &r.gts {
            let best = (0..grid.anchors.len()).max_by(|&x, &y| iou(&grid.anchors[x], g).partial_cmp(&iou(&grid.anchors[y], g)).unwrap()).unwrap();
            let dbox = dec(best);
            let diou = dbox.map(|b| iou(&b, g)).unwrap_or(-1.0);
            println!("[{tag}] gt {:?}: best anchor iou {:.3} objectness {:.3} decoded-iou {:.3}",
                     (g.x, g.y, g.w, g.h), iou(&grid.anchors[best], g), obj(best), diou);
        }
    }
    {
        use twostage::faster_rcnn::{label_anchors, AnchorState};
        let r = &tr.rows[0];
        let img = decode_image(&r.image_path).unwrap();
        let fm = m.backbone.forward(&img).unwrap().output;
        let grid = generate_anchors(fm.shape()[2], fm.shape()[1], bbs(m.config.conv_blocks) as f64, &m.config.anchor_scales, &m.config.anchor_ratios);
        let (cls, _reg, _) = m.rpn.forward(&fm).unwrap();
        let hw = fm.shape()[1] * fm.shape()[2];
        let w = fm.shape()[2];
        let k = grid.k();
        let obj = |ai: usize| {
            let cell = ai / k; let a = ai % k;
            let (i, j) = (cell / w, cell % w);
            let ij = i * w + j;
            let lb = cls.data()[(2*a)*hw + ij];
            let lf = cls.data()[(2*a+1)*hw + ij];
            let mx = lb.max(lf);
            ((lf-mx).exp()) / ((lb-mx).exp() + (lf-mx).exp())
        };
        let labels = label_anchors(&grid, &r.gts.iter().map(|&(_, g)| g).collect::<Vec<_>>(), 64.0, 64.0, m.config.rpn_pos_iou, m.config.rpn_neg_iou);
        let mut npos = 0;
        for (ai, st) in labels.states.iter().enumerate() {
            if matches!(st, AnchorState::Positive(_)) {
                npos += 1;
                println!("[train-labels] positive anchor {ai} (a={}) obj {:.3}", ai % k, obj(ai));
            }
        }
        println!("[train-labels] {} positives of {} anchors", npos, grid.anchors.len());
        let mut negs: Vec<(f64, usize)> = labels.states.iter().enumerate().filter(|(_, s)| matches!(s, AnchorState::Negative)).map(|(ai, _)| (obj(ai), ai)).collect();
        negs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        println!("[train-labels] top negative objectness: {:.3} {:.3} {:.3}", negs[0].0, negs[1].0, negs[2].0);
        let igns: Vec<f64> = labels.states.iter().enumerate().filter(|(_, s)| matches!(s, AnchorState::Ignore)).map(|(ai, _)| obj(ai)).collect();
        let igmax = igns.iter().cloned().fold(0.0, f64::max);
        println!("[train-labels] max ignored objectness: {igmax:.3} over {} ignored", igns.len());
    }
    // det head probabilities on proposals nearest the GTs
    use twostage::nnet::{roi_maxpool, softmax, backbone_stride};
    let featmap = m.backbone.forward(&img).unwrap().output;
    let scale = 1.0 / backbone_stride(m.config.conv_blocks) as f64;
    for (_, g) in &row.gts {
        let (pooled, _) = roi_maxpool(&featmap, g, scale, m.config.roi_pool_size, m.config.roi_pool_size).unwrap();
        let (cls, _, _) = m.det.forward(&pooled).unwrap();
        let p = softmax(cls.data());
        println!("det prob on GT box: bg {:.3} vehicle {:.3}", p[0], p[1]);
    }
    // final detections vs ground truth on a few test images
    use twostage::evalkit::Detector;
    for row in test.rows.iter().take(4) {
        let img = decode_image(&row.image_path).unwrap();
        let dets = m.detect(&img).unwrap();
        println!("image {:?} gts {:?}", row.image_path.file_name().unwrap(), row.gts.iter().map(|(_, g)| (g.x, g.y, g.w, g.h)).collect::<Vec<_>>());
        for d in dets.iter().take(5) {
            let best = row.gts.iter().map(|(_, g)| iou(&d.bbox, g)).fold(0.0, f64::max);
            println!("  det score {:.3} box ({:.1},{:.1},{:.1},{:.1}) iou {:.3}", d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, best);
        }
    }
}

fn main() {
    faster_diag();
    if std::env::args().count() > 1 { return; }
    let cfg = RunConfig::default();
    let table = load_dataset(std::path::Path::new(&*std::env::var("DS").unwrap_or("/tmp/ds30/dataset.csv".into()))).unwrap();
    let (train, test) = split_dataset(&table, &cfg.split_spec()).unwrap();
    let _ = train;

    // Proposal recall on test rows.
    let pcfg = cfg.proposal_config();
    let mut total_gts = 0;
    let mut hit = 0;
    let mut n_props = 0;
    for row in &test.rows {
        let img = decode_image(&row.image_path).unwrap();
        let props = propose(&img, &pcfg).unwrap();
        n_props += props.len();
        for (_, g) in &row.gts {
            total_gts += 1;
            let best = props.iter().map(|p| iou(p, g)).fold(0.0, f64::max);
            if best >= 0.5 {
                hit += 1;
            }
        }
    }
    println!(
        "proposal recall@0.5: {hit}/{total_gts}, avg {} props/img",
        n_props / test.rows.len()
    );

    // SVM decision distribution on test proposals.
    let model = load_model(std::path::Path::new(&*std::env::var("RM").unwrap_or("/tmp/rcnn30.tsd".into()))).unwrap();
    let m = model.as_rcnn().unwrap();
    let warp = WarpConfig {
        context_pixels: cfg.warp_context_pixels,
        output_size: cfg.warp_output_size,
    };
    let row = &test.rows[0];
    let img = decode_image(&row.image_path).unwrap();
    let props = propose(&img, &pcfg).unwrap();
    let mut scores: Vec<(f64, f64)> = Vec::new(); // (score, best iou)
    for p in &props {
        let feat = m.net.features(&warp_with_context(&img, p, &warp).unwrap()).unwrap();
        let s = m.svms[0].decision(feat.data());
        let best = row.gts.iter().map(|(_, g)| iou(p, g)).fold(0.0, f64::max);
        scores.push((s, best));
    }
    scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("top 10 svm scores (score, iou):");
    for (s, i) in scores.iter().take(10) {
        println!("  {s:.4}  iou {i:.3}");
    }
    let n_pos_score = scores.iter().filter(|(s, _)| *s > 0.0).count();
    println!("{} of {} proposals score > 0", n_pos_score, scores.len());

    // GT box feature score (should be strongly positive).
    for (_, g) in &row.gts {
        let feat = m.net.features(&warp_with_context(&img, g, &warp).unwrap()).unwrap();
        println!("gt box score: {:.4}", m.svms[0].decision(feat.data()));
    }
}
