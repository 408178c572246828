//! Trained-detector persistence: the versioned `TSD1` binary container.
//!
//! Layout (all integers little-endian `u32` unless noted, parameters
//! little-endian IEEE-754 `f64`):
//!
//! ```text
//! magic   "TSD1" (4 bytes)
//! version u8 (currently 1)
//! method  u8 (1 = r-cnn, 2 = faster r-cnn)
//! config  u32 length + that many bytes of `key = value` text
//! body    method-specific, see below
//! crc     u32 CRC-32 (IEEE) over every byte after the magic
//! ```
//!
//! Tensors are a u32 rank, u32 extents, then raw f64 data; a `Sequential`
//! is a u32 layer count then tagged layers (see [`crate::nnet::serial`]).
//!
//! R-CNN body: backbone `Sequential`, trunk `Fc`, head `Fc`, then
//! `u32 n` SVM blocks (u32 class, f64 bias, tensor-free f64 weight list)
//! and `u32 n` ridge blocks (u32 class, f64 lambda, 4 weight lists).
//!
//! Faster R-CNN body: backbone `Sequential`, the three RPN convs, the
//! three detection-head fcs, then `u32 n` class ids.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{Detection, Detector};
use crate::faster_rcnn::{DetHead, FasterModel, RpnHead};
use crate::nnet::serial::{
    crc32, read_conv, read_fc, read_sequential, write_conv, write_fc, write_sequential,
    ByteReader, ByteWriter,
};
use crate::nnet::Tensor;
use crate::rcnn::{ClsNet, RcnnModel, RidgeWeights, SvmClassifier};

const MAGIC: &[u8; 4] = b"TSD1";
const VERSION: u8 = 1;
const METHOD_RCNN: u8 = 1;
const METHOD_FASTER: u8 = 2;

/// Either trained detector, as stored on disk.
#[derive(Debug, Clone)]
pub enum DetectorModel {
    Rcnn(RcnnModel),
    Faster(FasterModel),
}

impl DetectorModel {
    pub fn method_name(&self) -> &'static str {
        match self {
            DetectorModel::Rcnn(_) => "rcnn",
            DetectorModel::Faster(_) => "faster-rcnn",
        }
    }

    pub fn config(&self) -> &RunConfig {
        match self {
            DetectorModel::Rcnn(m) => &m.config,
            DetectorModel::Faster(m) => &m.config,
        }
    }

    /// The R-CNN pipeline's view of the model; loading a Faster R-CNN
    /// file through this accessor is a method-tag mismatch.
    pub fn as_rcnn(&self) -> Result<&RcnnModel> {
        match self {
            DetectorModel::Rcnn(m) => Ok(m),
            DetectorModel::Faster(_) => Err(Error::MethodTag {
                expected: "rcnn",
                found: "faster-rcnn".into(),
            }),
        }
    }

    pub fn as_faster(&self) -> Result<&FasterModel> {
        match self {
            DetectorModel::Faster(m) => Ok(m),
            DetectorModel::Rcnn(_) => Err(Error::MethodTag {
                expected: "faster-rcnn",
                found: "rcnn".into(),
            }),
        }
    }
}

impl Detector for DetectorModel {
    fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        match self {
            DetectorModel::Rcnn(m) => m.detect(image),
            DetectorModel::Faster(m) => m.detect(image),
        }
    }
}

fn write_f64_list(w: &mut ByteWriter, v: &[f64]) {
    w.put_u32(v.len() as u32);
    for &x in v {
        w.put_f64(x);
    }
}

fn read_f64_list(r: &mut ByteReader) -> Result<Vec<f64>> {
    let n = r.get_u32()? as usize;
    if n > 16 << 20 {
        return Err(Error::ModelFormat(format!("implausible vector length {n}")));
    }
    (0..n).map(|_| r.get_f64()).collect()
}

/// Serialize a model to bytes (the exact on-disk representation).
pub fn model_to_bytes(model: &DetectorModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.put_u8(VERSION);
    match model {
        DetectorModel::Rcnn(m) => {
            w.put_u8(METHOD_RCNN);
            let cfg = m.config.to_text();
            w.put_u32(cfg.len() as u32);
            w.put_bytes(cfg.as_bytes());

            write_sequential(&mut w, &m.net.convs);
            write_fc(&mut w, &m.net.trunk);
            write_fc(&mut w, &m.net.head);

            w.put_u32(m.svms.len() as u32);
            for svm in &m.svms {
                w.put_u32(svm.class as u32);
                w.put_f64(svm.bias);
                write_f64_list(&mut w, &svm.weights);
            }
            w.put_u32(m.ridge.len() as u32);
            for (svm, ridge) in m.svms.iter().zip(&m.ridge) {
                w.put_u32(svm.class as u32);
                w.put_f64(ridge.lambda);
                for coord in &ridge.weights {
                    write_f64_list(&mut w, coord);
                }
            }
        }
        DetectorModel::Faster(m) => {
            w.put_u8(METHOD_FASTER);
            let cfg = m.config.to_text();
            w.put_u32(cfg.len() as u32);
            w.put_bytes(cfg.as_bytes());

            write_sequential(&mut w, &m.backbone);
            write_conv(&mut w, &m.rpn.mid);
            write_conv(&mut w, &m.rpn.cls);
            write_conv(&mut w, &m.rpn.reg);
            write_fc(&mut w, &m.det.fc1);
            write_fc(&mut w, &m.det.cls);
            write_fc(&mut w, &m.det.reg);
            w.put_u32(m.classes.len() as u32);
            for &c in &m.classes {
                w.put_u32(c as u32);
            }
        }
    }
    let body = w.into_inner();
    let mut out = Vec::with_capacity(4 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_le_bytes());
    out
}

/// Parse a model from bytes, verifying magic, version, and checksum.
pub fn model_from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
    if bytes.len() < 4 + 2 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::ModelFormat("not a TSD1 model file".into()));
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::Checksum);
    }

    let mut r = ByteReader::new(body);
    let version = r.get_u8()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let method = r.get_u8()?;
    let cfg_len = r.get_u32()? as usize;
    let cfg_text = std::str::from_utf8(r.get_bytes(cfg_len)?)
        .map_err(|_| Error::ModelFormat("config text is not UTF-8".into()))?;
    let config = RunConfig::parse(cfg_text)?;

    match method {
        METHOD_RCNN => {
            let convs = read_sequential(&mut r)?;
            let trunk = read_fc(&mut r)?;
            let head = read_fc(&mut r)?;

            let n_svm = r.get_u32()? as usize;
            let mut svms = Vec::with_capacity(n_svm);
            for _ in 0..n_svm {
                let class = r.get_u32()? as usize;
                let bias = r.get_f64()?;
                let weights = read_f64_list(&mut r)?;
                svms.push(SvmClassifier {
                    class,
                    weights,
                    bias,
                });
            }
            let n_ridge = r.get_u32()? as usize;
            if n_ridge != n_svm {
                return Err(Error::ModelFormat("svm/ridge block count mismatch".into()));
            }
            let mut ridge = Vec::with_capacity(n_ridge);
            for svm in &svms {
                let class = r.get_u32()? as usize;
                if class != svm.class {
                    return Err(Error::ModelFormat("ridge class order mismatch".into()));
                }
                let lambda = r.get_f64()?;
                let mut weights: [Vec<f64>; 4] = Default::default();
                for coord in weights.iter_mut() {
                    *coord = read_f64_list(&mut r)?;
                }
                ridge.push(RidgeWeights { weights, lambda });
            }
            Ok(DetectorModel::Rcnn(RcnnModel {
                config,
                net: ClsNet { convs, trunk, head },
                svms,
                ridge,
            }))
        }
        METHOD_FASTER => {
            let backbone = read_sequential(&mut r)?;
            let mid = read_conv(&mut r)?;
            let cls = read_conv(&mut r)?;
            let reg = read_conv(&mut r)?;
            let fc1 = read_fc(&mut r)?;
            let det_cls = read_fc(&mut r)?;
            let det_reg = read_fc(&mut r)?;
            let n_classes = r.get_u32()? as usize;
            if n_classes > 4096 {
                return Err(Error::ModelFormat("implausible class count".into()));
            }
            let mut classes = Vec::with_capacity(n_classes);
            for _ in 0..n_classes {
                classes.push(r.get_u32()? as usize);
            }
            Ok(DetectorModel::Faster(FasterModel {
                config,
                backbone,
                rpn: RpnHead { mid, cls, reg },
                det: DetHead {
                    fc1,
                    cls: det_cls,
                    reg: det_reg,
                },
                classes,
            }))
        }
        other => Err(Error::ModelFormat(format!("unknown method tag {other}"))),
    }
}

pub fn save_model(model: &DetectorModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
