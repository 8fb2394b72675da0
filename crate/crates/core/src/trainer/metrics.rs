//! End-point error and outlier-rate metrics.

use std::fmt::Write as _;

use super::config::F1Rule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absolute outlier threshold in pixels.
pub const OUTLIER_PIXELS: f64 = 3.0;
/// Relative outlier threshold as a fraction of the ground-truth length.
pub const OUTLIER_FRACTION: f64 = 0.05;

pub fn is_outlier(error: f64, gt_length: f64, rule: F1Rule) -> bool {
    let absolute = error > OUTLIER_PIXELS;
    let relative = error > OUTLIER_FRACTION * gt_length;
    match rule {
        F1Rule::Or => absolute || relative,
        F1Rule::And => absolute && relative,
    }
}

/// Running sums over any number of flow fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub error_sum: f64,
    pub outliers: usize,
    pub pixels: usize,
}

impl MetricsAccumulator {
    /// Adds `[2, H, W]` prediction / ground-truth fields in image pixels.
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, rule: F1Rule) -> Result<()> {
        if pred.shape() != gt.shape() || pred.rank() != 3 || pred.shape()[0] != 2 {
            return Err(Error::shape(format!(
                "flow metrics need equal [2,H,W] fields, got {:?} and {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let n = pred.shape()[1] * pred.shape()[2];
        let (p, g) = (pred.data(), gt.data());
        for i in 0..n {
            let (gu, gv) = (f64::from(g[i]), f64::from(g[n + i]));
            let du = f64::from(p[i]) - gu;
            let dv = f64::from(p[n + i]) - gv;
            let err = du.hypot(dv);
            self.error_sum += err;
            self.outliers += usize::from(is_outlier(err, gu.hypot(gv), rule));
        }
        self.pixels += n;
        Ok(())
    }

    pub fn finish(&self, rule: F1Rule) -> FlowMetrics {
        let n = self.pixels.max(1) as f64;
        FlowMetrics {
            aepe: self.error_sum / n,
            f1_all: 100.0 * self.outliers as f64 / n,
            pixels: self.pixels,
            rule,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowMetrics {
    /// Mean end-point error in pixels.
    pub aepe: f64,
    /// Outlier percentage in `[0, 100]`.
    pub f1_all: f64,
    pub pixels: usize,
    pub rule: F1Rule,
}

impl FlowMetrics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "aepe={}", self.aepe).expect("string write");
        writeln!(s, "f1_all={}", self.f1_all).expect("string write");
        writeln!(s, "f1_rule={}", self.rule).expect("string write");
        writeln!(s, "pixels={}", self.pixels).expect("string write");
        s
    }
}

/// Metrics of a single prediction.
pub fn flow_metrics(pred: &Tensor, gt: &Tensor, rule: F1Rule) -> Result<FlowMetrics> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, rule)?;
    Ok(acc.finish(rule))
}

/// Bilinear upsampling of a `[2, h, w]` flow by an integer factor, sampling at
/// pixel centers (edge values are held).
pub fn upsample_flow(flow: &Tensor, factor: usize) -> Result<Tensor> {
    let [2, h, w] = flow.shape()[..] else {
        return Err(Error::shape(format!("flow must be [2,h,w], got {:?}", flow.shape())));
    };
    let (hh, ww) = (h * factor, w * factor);
    let mut out = vec![0.0f32; 2 * hh * ww];
    let coord = |x: usize, n: usize| {
        let c = ((x as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (c.floor() as usize).min(n.saturating_sub(2));
        (i, c - i as f64)
    };
    for y in 0..hh {
        let (y0, ty) = coord(y, h);
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ww {
            let (x0, tx) = coord(x, w);
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..2 {
                let at = |yy: usize, xx: usize| f64::from(flow.data()[(c * h + yy) * w + xx]);
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(c * hh + y) * ww + x] = (top * (1.0 - ty) + bottom * ty) as f32;
            }
        }
    }
    Tensor::new(&[2, hh, ww], out)
}
