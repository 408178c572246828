//! Dataset table I/O, PPM image codec, train/test splitting, and the
//! synthetic vehicle-scene generator.
//!
//! The dataset lives in a two-column CSV (`image,boxes`): the image path,
//! relative to the CSV's directory, and a quoted, semicolon-separated list
//! of `x,y,w,h` ground-truth boxes. Images are binary PPM (P6, maxval 255),
//! decoded bit-exactly to `[0, 1]` reals.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nnet::Tensor;

/// The single object class in the synthetic task. Background is class 0
/// everywhere, so real classes start at 1.
pub const VEHICLE_CLASS: usize = 1;

/// One dataset row: an image and its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub image_path: PathBuf,
    /// (class id, box); class ids start at 1 (0 is background).
    pub gts: Vec<(usize, BBox)>,
}

/// All rows of a dataset table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetTable {
    pub rows: Vec<DatasetRow>,
}

impl DatasetTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Class ids present in the ground truth, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.gts.iter().map(|&(c, _)| c))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

// ---------------------------------------------------------------------------
// dataset CSV
// ---------------------------------------------------------------------------

fn parse_box_quad(field: &str) -> std::result::Result<BBox, String> {
    let parts: Vec<&str> = field.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected x,y,w,h quadruple, got `{field}`"));
    }
    let mut vals = [0.0f64; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number `{p}` in box `{field}`"))?;
    }
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(format!("non-finite box `{field}`"));
    }
    if vals[2] <= 0.0 || vals[3] <= 0.0 {
        return Err(format!("box `{field}` has non-positive extent"));
    }
    Ok(BBox::new(vals[0], vals[1], vals[2], vals[3]))
}

/// Split one CSV record into (image, boxes) fields. Only the narrow grammar
/// this format needs: an unquoted first field, a comma, and an optionally
/// double-quoted second field.
fn split_record(line: &str) -> std::result::Result<(String, String), String> {
    let comma = line
        .find(',')
        .ok_or_else(|| "expected two comma-separated fields".to_string())?;
    let image = line[..comma].trim().to_string();
    let rest = line[comma + 1..].trim();
    let boxes = if let Some(stripped) = rest.strip_prefix('"') {
        let inner = stripped
            .strip_suffix('"')
            .ok_or_else(|| "unterminated quote in boxes field".to_string())?;
        inner.to_string()
    } else {
        rest.to_string()
    };
    if image.is_empty() {
        return Err("empty image path".to_string());
    }
    Ok((image, boxes))
}

/// Load a dataset table. Image paths are resolved against the CSV's
/// directory; missing image files are only detected at decode time.
pub fn load_dataset(path: &Path) -> Result<DatasetTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Dataset {
            path: path.into(),
            line: 1,
            msg: "empty file".into(),
        })?;
    if header.trim() != "image,boxes" {
        return Err(Error::Dataset {
            path: path.into(),
            line: 1,
            msg: format!("expected header `image,boxes`, got `{header}`"),
        });
    }

    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (image, boxes_field) = split_record(line).map_err(|msg| Error::Dataset {
            path: path.into(),
            line: line_no,
            msg,
        })?;
        let mut gts = Vec::new();
        for quad in boxes_field.split(';') {
            if quad.trim().is_empty() {
                continue;
            }
            let bbox = parse_box_quad(quad).map_err(|msg| Error::Dataset {
                path: path.into(),
                line: line_no,
                msg,
            })?;
            gts.push((VEHICLE_CLASS, bbox));
        }
        rows.push(DatasetRow {
            image_path: base.join(image),
            gts,
        });
    }
    Ok(DatasetTable { rows })
}

/// Write a dataset table; image paths are stored relative to `base`.
pub fn save_dataset(table: &DatasetTable, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::from("image,boxes\n");
    for row in &table.rows {
        let rel = row
            .image_path
            .strip_prefix(base)
            .unwrap_or(&row.image_path);
        let boxes: Vec<String> = row
            .gts
            .iter()
            .map(|(_, b)| format!("{},{},{},{}", b.x, b.y, b.w, b.h))
            .collect();
        out.push_str(&format!("{},\"{}\"\n", rel.display(), boxes.join(";")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// splitting
// ---------------------------------------------------------------------------

/// Train/test split parameters.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.6,
            seed: 1,
        }
    }
}

/// Seeded shuffle, then the first `floor(fraction * n)` rows train and the
/// rest test: a disjoint, exhaustive partition.
pub fn split_dataset(table: &DatasetTable, spec: &SplitSpec) -> Result<(DatasetTable, DatasetTable)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {}",
            spec.train_fraction
        )));
    }
    if table.len() < 2 {
        return Err(Error::Config("split needs at least 2 rows".into()));
    }
    let mut order: Vec<usize> = (0..table.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let n_train = ((table.len() as f64) * spec.train_fraction).floor() as usize;
    let pick = |ids: &[usize]| DatasetTable {
        rows: ids.iter().map(|&i| table.rows[i].clone()).collect(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

// ---------------------------------------------------------------------------
// PPM P6 codec
// ---------------------------------------------------------------------------

struct PpmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> PpmParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::ImageFormat {
            path: self.path.into(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected ASCII decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| self.err("number out of range"))
    }
}

/// Decode a binary PPM (P6, maxval 255) into a `[3, h, w]` tensor with
/// values `v / 255` in `[0, 1]`. Truncated or malformed files error with
/// the offending byte offset; no partial tensors are produced.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm_bytes(&bytes, path)
}

pub(crate) fn decode_ppm_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut p = PpmParser { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(p.err("unsupported magic (want P6)"));
    }
    p.pos = 2;
    let w = p.read_number()?;
    let h = p.read_number()?;
    let maxval = p.read_number()?;
    if maxval != 255 {
        return Err(p.err(format!("unsupported maxval {maxval} (want 255)")));
    }
    if w == 0 || h == 0 {
        return Err(p.err("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("missing separator before pixel data"));
    }
    p.pos += 1;

    let need = w * h * 3;
    let have = bytes.len() - p.pos;
    if have < need {
        p.pos = bytes.len();
        return Err(p.err(format!("truncated pixel data: have {have}, need {need}")));
    }
    let payload = &bytes[p.pos..p.pos + need];
    let mut t = Tensor::zeros(&[3, h, w]);
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * 3;
            for c in 0..3 {
                data[(c * h + y) * w + x] = payload[src + c] as f64 / 255.0;
            }
        }
    }
    Ok(t)
}

/// Encode a `[3, h, w]` tensor (values clamped to `[0, 1]`) as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    assert_eq!(image.shape().len(), 3);
    assert_eq!(image.shape()[0], 3, "encode_ppm expects an RGB tensor");
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

/// Knobs for the synthetic vehicle-scene generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Inclusive body width range, pixels.
    pub width_range: (usize, usize),
    /// Inclusive body height range, pixels.
    pub height_range: (usize, usize),
    /// Uniform noise amplitude around the background gray.
    pub noise: f64,
    /// Minimum per-channel-mean color distance between body and background.
    pub min_color_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            width_range: (14, 28),
            height_range: (12, 20),
            noise: 0.04,
            min_color_gap: 0.25,
        }
    }
}

fn boxes_touch(a: &BBox, b: &BBox, gap: f64) -> bool {
    let grown = BBox::new(a.x - gap, a.y - gap, a.w + 2.0 * gap, a.h + 2.0 * gap);
    grown.intersection(b) > 0.0
}

/// Draw one scene: noise background plus 1-2 solid "vehicle" rectangles with
/// darker 2x2 wheel blocks at the bottom corners. Returns the image and its
/// ground-truth boxes. Fully deterministic for a given RNG state.
fn synth_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Tensor, Vec<(usize, BBox)>) {
    let s = cfg.image_size;
    'regen: loop {
        let base = rng.random_range(0.35..0.65);
        let mut img = Tensor::zeros(&[3, s, s]);
        for v in img.data_mut() {
            *v = (base + rng.random_range(-cfg.noise..cfg.noise)).clamp(0.0, 1.0);
        }

        let n_vehicles = if rng.random_range(0..2) == 0 { 1 } else { 2 };
        let mut gts: Vec<(usize, BBox)> = Vec::new();
        for _ in 0..n_vehicles {
            let mut placed = false;
            for _try in 0..100 {
                let w = rng.random_range(cfg.width_range.0..=cfg.width_range.1);
                // Vehicle-like: never taller than wide.
                let h = rng.random_range(cfg.height_range.0..=cfg.height_range.1.min(w));
                let x = rng.random_range(1..s - w - 1);
                let y = rng.random_range(1..s - h - 1);
                let bbox = BBox::new(x as f64, y as f64, w as f64, h as f64);
                if gts.iter().any(|(_, g)| boxes_touch(g, &bbox, 2.0)) {
                    continue;
                }

                // Body color far enough from the background gray.
                let mut body = [0.0f64; 3];
                let mut ok = false;
                for _ in 0..50 {
                    for b in body.iter_mut() {
                        *b = rng.random_range(0.0..1.0);
                    }
                    let dist = body.iter().map(|c| (c - base).abs()).sum::<f64>() / 3.0;
                    if dist >= cfg.min_color_gap {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    continue;
                }

                let wheel = [body[0] * 0.35, body[1] * 0.35, body[2] * 0.35];
                let data = img.data_mut();
                for yy in y..y + h {
                    for xx in x..x + w {
                        for c in 0..3 {
                            data[(c * s + yy) * s + xx] = body[c];
                        }
                    }
                }
                // 2x2 wheel blocks at the bottom corners of the body.
                for (wx0, wy0) in [(x, y + h - 2), (x + w - 2, y + h - 2)] {
                    for yy in wy0..wy0 + 2 {
                        for xx in wx0..wx0 + 2 {
                            for c in 0..3 {
                                data[(c * s + yy) * s + xx] = wheel[c];
                            }
                        }
                    }
                }
                gts.push((VEHICLE_CLASS, bbox));
                placed = true;
                break;
            }
            if !placed {
                continue 'regen; // start over with fresh noise
            }
        }
        return (img, gts);
    }
}

/// Generate `n_images` synthetic scenes under `out_dir` (created if needed):
/// `img_NNNN.ppm` files plus `dataset.csv`. Byte-identical across runs with
/// the same seed and config. Returns the table with resolved paths.
pub fn synth_dataset(n_images: usize, seed: u64, out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetTable> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = DatasetTable::default();
    for i in 0..n_images {
        let (img, gts) = synth_scene(&mut rng, cfg);
        let name = format!("img_{i:04}.ppm");
        let path = out_dir.join(&name);
        save_image(&img, &path)?;
        table.rows.push(DatasetRow {
            image_path: path,
            gts,
        });
    }
    save_dataset(&table, &out_dir.join("dataset.csv"))?;
    Ok(table)
}

pub use crate::model::{load_model, save_model};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use proptest::prelude::*;

    fn write_temp(content: &[u8], name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("twostage_data_io_tests");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn csv_single_box_row() {
        let p = write_temp(b"image,boxes\nimg/a.ppm,\"10,10,30,20\"\n", "single.csv");
        let t = load_dataset(&p).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.rows[0].gts, vec![(VEHICLE_CLASS, BBox::new(10.0, 10.0, 30.0, 20.0))]);
        assert!(t.rows[0].image_path.ends_with("img/a.ppm"));
    }

    #[test]
    fn csv_two_semicolon_boxes() {
        let p = write_temp(b"image,boxes\na.ppm,\"1,2,3,4;5,6,7,8\"\n", "two.csv");
        let t = load_dataset(&p).unwrap();
        assert_eq!(t.rows[0].gts.len(), 2);
        assert_eq!(t.rows[0].gts[1].1, BBox::new(5.0, 6.0, 7.0, 8.0));
    }

    #[test]
    fn csv_zero_width_box_rejected_with_line() {
        let p = write_temp(b"image,boxes\na.ppm,\"1,1,4,4\"\nb.ppm,\"0,0,0,10\"\n", "badbox.csv");
        match load_dataset(&p) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_preserves_table() {
        let dir = std::env::temp_dir().join("twostage_data_io_tests/rt");
        fs::create_dir_all(&dir).unwrap();
        let table = DatasetTable {
            rows: vec![
                DatasetRow {
                    image_path: dir.join("x.ppm"),
                    gts: vec![(VEHICLE_CLASS, BBox::new(1.0, 2.0, 3.5, 4.25))],
                },
                DatasetRow {
                    image_path: dir.join("y.ppm"),
                    gts: vec![],
                },
            ],
        };
        let csv = dir.join("t.csv");
        save_dataset(&table, &csv).unwrap();
        let back = load_dataset(&csv).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn split_60_40() {
        let rows: Vec<DatasetRow> = (0..10)
            .map(|i| DatasetRow {
                image_path: PathBuf::from(format!("{i}.ppm")),
                gts: vec![],
            })
            .collect();
        let table = DatasetTable { rows };
        let (train, test) = split_dataset(&table, &SplitSpec::default()).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn split_is_seed_stable_partition() {
        let rows: Vec<DatasetRow> = (0..17)
            .map(|i| DatasetRow {
                image_path: PathBuf::from(format!("{i}.ppm")),
                gts: vec![],
            })
            .collect();
        let table = DatasetTable { rows };
        let spec = SplitSpec {
            train_fraction: 0.6,
            seed: 99,
        };
        let (tr1, te1) = split_dataset(&table, &spec).unwrap();
        let (tr2, te2) = split_dataset(&table, &spec).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);

        let mut all: Vec<&PathBuf> = tr1.rows.iter().chain(te1.rows.iter()).map(|r| &r.image_path).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 17, "split must be a partition");
    }

    #[test]
    fn ppm_single_red_pixel() {
        let p = write_temp(b"P6\n1 1\n255\n\xff\x00\x00", "red.ppm");
        let t = decode_image(&p).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_comments_in_header() {
        let with = write_temp(b"P6\n# made by hand\n2 1\n# another\n255\n\x01\x02\x03\x04\x05\x06", "c.ppm");
        let without = write_temp(b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06", "nc.ppm");
        assert_eq!(decode_image(&with).unwrap(), decode_image(&without).unwrap());
    }

    #[test]
    fn ppm_truncated_is_error_not_partial() {
        let p = write_temp(b"P6\n2 2\n255\n\x01\x02\x03", "trunc.ppm");
        assert!(matches!(decode_image(&p), Err(Error::ImageFormat { .. })));
    }

    #[test]
    fn ppm_bad_magic_reports_offset() {
        let p = write_temp(b"P5\n1 1\n255\n\x00", "p5.ppm");
        match decode_image(&p) {
            Err(Error::ImageFormat { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn ppm_encode_decode_roundtrip_bits() {
        let mut img = Tensor::zeros(&[3, 4, 5]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let bytes = encode_ppm(&img);
        let back = decode_ppm_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn synth_is_byte_deterministic() {
        let dir1 = std::env::temp_dir().join("twostage_synth_det1");
        let dir2 = std::env::temp_dir().join("twostage_synth_det2");
        let _ = fs::remove_dir_all(&dir1);
        let _ = fs::remove_dir_all(&dir2);
        let cfg = SynthConfig::default();
        synth_dataset(5, 7, &dir1, &cfg).unwrap();
        synth_dataset(5, 7, &dir2, &cfg).unwrap();
        for i in 0..5 {
            let name = format!("img_{i:04}.ppm");
            assert_eq!(
                fs::read(dir1.join(&name)).unwrap(),
                fs::read(dir2.join(&name)).unwrap(),
                "{name} differs between runs"
            );
        }
        assert_eq!(
            fs::read(dir1.join("dataset.csv")).unwrap(),
            fs::read(dir2.join("dataset.csv")).unwrap()
        );
    }

    #[test]
    fn synth_gts_in_bounds_disjoint_single_class() {
        let dir = std::env::temp_dir().join("twostage_synth_props");
        let _ = fs::remove_dir_all(&dir);
        let cfg = SynthConfig::default();
        let table = synth_dataset(30, 3, &dir, &cfg).unwrap();
        assert_eq!(table.len(), 30);
        for row in &table.rows {
            assert!(!row.gts.is_empty() && row.gts.len() <= 2);
            for (class, g) in &row.gts {
                assert_eq!(*class, VEHICLE_CLASS);
                assert!(g.inside(cfg.image_size as f64, cfg.image_size as f64));
            }
            if row.gts.len() == 2 {
                assert_eq!(iou(&row.gts[0].1, &row.gts[1].1), 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn decoded_pixels_in_unit_interval(w in 1usize..6, h in 1usize..6, seed in 0u8..255) {
            let mut payload = vec![b'P', b'6', b'\n'];
            payload.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
            let mut v = seed;
            for _ in 0..w * h * 3 {
                v = v.wrapping_mul(31).wrapping_add(7);
                payload.push(v);
            }
            let t = decode_ppm_bytes(&payload, Path::new("mem")).unwrap();
            prop_assert!(t.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
