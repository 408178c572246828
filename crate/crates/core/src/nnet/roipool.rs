//! RoI max pooling: a fixed-size summary of an arbitrary box on a feature map.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Argmax bookkeeping from one pooling pass, for gradient routing.
/// `argmax[(c*out_h + oy)*out_w + ox]` is the flat feature-map index the
/// output cell copied from, or `None` for an empty bin (which pooled to 0).
#[derive(Clone, Debug)]
pub struct RoiPoolTrace {
    pub argmax: Vec<Option<usize>>,
    pub out_shape: [usize; 3],
}

/// Max-pool `roi` (in image coordinates) down to `out_h x out_w` per channel.
///
/// The roi is mapped to feature coordinates by `spatial_scale`, intersected
/// with the map, and split into proportional bins (floor/ceil boundaries).
/// Each output cell is the max over its bin; empty bins yield 0.
///
/// Errors when the scaled roi misses the feature map entirely.
pub fn roi_maxpool(
    feat: &Tensor,
    roi: &BBox,
    spatial_scale: f64,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, RoiPoolTrace)> {
    assert!(out_h >= 1 && out_w >= 1);
    if feat.shape().len() != 3 {
        return Err(Error::Shape(format!("roi_maxpool expects [c, h, w], got {:?}", feat.shape())));
    }
    let (c_n, fh, fw) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);

    let x1 = (roi.x * spatial_scale).max(0.0);
    let y1 = (roi.y * spatial_scale).max(0.0);
    let x2 = (roi.right() * spatial_scale).min(fw as f64);
    let y2 = (roi.bottom() * spatial_scale).min(fh as f64);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::DegenerateBox(format!(
            "roi {roi:?} does not intersect {fw}x{fh} feature map at scale {spatial_scale}"
        )));
    }

    let bin_h = (y2 - y1) / out_h as f64;
    let bin_w = (x2 - x1) / out_w as f64;
    let fd = feat.data();
    let mut out = Tensor::zeros(&[c_n, out_h, out_w]);
    let mut argmax = vec![None; c_n * out_h * out_w];

    for oy in 0..out_h {
        let r0 = ((y1 + oy as f64 * bin_h).floor().max(0.0)) as usize;
        let r1 = (((y1 + (oy + 1) as f64 * bin_h).ceil()) as usize).min(fh);
        for ox in 0..out_w {
            let c0 = ((x1 + ox as f64 * bin_w).floor().max(0.0)) as usize;
            let c1 = (((x1 + (ox + 1) as f64 * bin_w).ceil()) as usize).min(fw);
            if r1 <= r0 || c1 <= c0 {
                continue; // empty bin: stays 0, no argmax
            }
            for c in 0..c_n {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for fy in r0..r1 {
                    let row = (c * fh + fy) * fw;
                    for fx in c0..c1 {
                        if fd[row + fx] > best {
                            best = fd[row + fx];
                            best_idx = row + fx;
                        }
                    }
                }
                let out_idx = (c * out_h + oy) * out_w + ox;
                out.data_mut()[out_idx] = best;
                argmax[out_idx] = Some(best_idx);
            }
        }
    }

    Ok((
        out,
        RoiPoolTrace {
            argmax,
            out_shape: [c_n, out_h, out_w],
        },
    ))
}

/// Route `gy` back to the argmax positions, accumulating into `gfeat`.
pub fn roi_maxpool_backward(trace: &RoiPoolTrace, gy: &Tensor, gfeat: &mut Tensor) {
    assert_eq!(gy.shape(), &trace.out_shape, "gradient shape mismatch");
    for (out_idx, arg) in trace.argmax.iter().enumerate() {
        if let Some(in_idx) = arg {
            gfeat.data_mut()[*in_idx] += gy.data()[out_idx];
        }
    }
}
