//! Byte-level codecs for network components.
//!
//! All integers are little-endian `u32`, all parameters little-endian
//! IEEE-754 `f64`. These primitives are composed by the model container in
//! [`crate::model`], which documents the full file layout.

use super::layers::{Conv2d, Fc, Layer, MaxPool2d, Sequential};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::ModelFormat(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
}

pub fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.put_u32(t.shape().len() as u32);
    for &e in t.shape() {
        w.put_u32(e as u32);
    }
    for &v in t.data() {
        w.put_f64(v);
    }
}

pub fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let ndim = r.get_u32()? as usize;
    if ndim > 8 {
        return Err(Error::ModelFormat(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.get_u32()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 64 << 20 {
        return Err(Error::ModelFormat(format!("implausible tensor size {n}")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.get_f64()?);
    }
    Ok(Tensor::from_vec(&shape, data))
}

pub fn write_conv(w: &mut ByteWriter, c: &Conv2d) {
    w.put_u32(c.stride as u32);
    w.put_u32(c.pad as u32);
    write_tensor(w, &c.weight);
    write_tensor(w, &c.bias);
}

pub fn read_conv(r: &mut ByteReader) -> Result<Conv2d> {
    let stride = r.get_u32()? as usize;
    let pad = r.get_u32()? as usize;
    let weight = read_tensor(r)?;
    let bias = read_tensor(r)?;
    if weight.shape().len() != 4 || bias.shape().len() != 1 || weight.shape()[0] != bias.shape()[0] {
        return Err(Error::ModelFormat("inconsistent conv parameter shapes".into()));
    }
    Ok(Conv2d {
        weight,
        bias,
        stride,
        pad,
    })
}

pub fn write_fc(w: &mut ByteWriter, f: &Fc) {
    write_tensor(w, &f.weight);
    write_tensor(w, &f.bias);
}

pub fn read_fc(r: &mut ByteReader) -> Result<Fc> {
    let weight = read_tensor(r)?;
    let bias = read_tensor(r)?;
    if weight.shape().len() != 2 || bias.shape().len() != 1 || weight.shape()[0] != bias.shape()[0] {
        return Err(Error::ModelFormat("inconsistent fc parameter shapes".into()));
    }
    Ok(Fc { weight, bias })
}

const LAYER_CONV: u8 = 1;
const LAYER_RELU: u8 = 2;
const LAYER_MAXPOOL: u8 = 3;
const LAYER_FC: u8 = 4;
const LAYER_INPUT_NORM: u8 = 5;

pub fn write_sequential(w: &mut ByteWriter, net: &Sequential) {
    w.put_u32(net.layers.len() as u32);
    for layer in &net.layers {
        match layer {
            Layer::Conv2d(c) => {
                w.put_u8(LAYER_CONV);
                write_conv(w, c);
            }
            Layer::Relu => w.put_u8(LAYER_RELU),
            Layer::MaxPool2d(p) => {
                w.put_u8(LAYER_MAXPOOL);
                w.put_u32(p.window as u32);
                w.put_u32(p.stride as u32);
            }
            Layer::Fc(f) => {
                w.put_u8(LAYER_FC);
                write_fc(w, f);
            }
            Layer::InputNorm { mean, std } => {
                w.put_u8(LAYER_INPUT_NORM);
                w.put_f64(*mean);
                w.put_f64(*std);
            }
        }
    }
}

pub fn read_sequential(r: &mut ByteReader) -> Result<Sequential> {
    let n = r.get_u32()? as usize;
    if n > 1024 {
        return Err(Error::ModelFormat(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = r.get_u8()?;
        layers.push(match kind {
            LAYER_CONV => Layer::Conv2d(read_conv(r)?),
            LAYER_RELU => Layer::Relu,
            LAYER_MAXPOOL => {
                let window = r.get_u32()? as usize;
                let stride = r.get_u32()? as usize;
                Layer::MaxPool2d(MaxPool2d { window, stride })
            }
            LAYER_FC => Layer::Fc(read_fc(r)?),
            LAYER_INPUT_NORM => {
                let mean = r.get_f64()?;
                let std = r.get_f64()?;
                Layer::InputNorm { mean, std }
            }
            other => {
                return Err(Error::ModelFormat(format!(
                    "unknown layer tag {other} at byte {}",
                    r.pos() - 1
                )))
            }
        });
    }
    Ok(Sequential::new(layers))
}

/// CRC-32 (IEEE 802.3 polynomial, reflected), used as the model checksum.
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc: u32 = !0;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB88320 & mask);
        }
    }
    !crc
}
