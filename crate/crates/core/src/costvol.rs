//! All-pairs correlation volumes and bilinear cost-patch cropping.

use crate::autodiff::kernels;
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 4-D cost volume `[Hs, Ws, Hc, Wc]`: entry `[x1, x2, ·, ·]` is the cost map of
/// source pixel `(x1, x2)` over the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<S: Real = f32> {
    values: Tensor<S>,
    /// Divisor applied to raw dot products (`√D`).
    pub scale: f64,
}

impl<S: Real> CostVolume<S> {
    /// Wraps precomputed costs. Source and target grids may differ in size.
    pub fn from_tensor(values: Tensor<S>, scale: f64) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::shape(format!(
                "cost volume must be [Hs,Ws,Hc,Wc], got {:?}",
                values.shape()
            )));
        }
        Ok(CostVolume { values, scale })
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    /// `(Hs, Ws)`: the source grid.
    pub fn source_dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// `(Hc, Wc)`: the cost-map (target) grid.
    pub fn map_dims(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    pub fn num_sources(&self) -> usize {
        let (h, w) = self.source_dims();
        h * w
    }

    /// Cost map of one source pixel as a flat row-major slice.
    pub fn map(&self, row: usize, col: usize) -> &[S] {
        let (hc, wc) = self.map_dims();
        let i = row * self.source_dims().1 + col;
        &self.values.data()[i * hc * wc..(i + 1) * hc * wc]
    }

    /// All cost maps stacked as `[Hs·Ws, Hc, Wc]`.
    pub fn maps(&self) -> Tensor<S> {
        let (hc, wc) = self.map_dims();
        self.values
            .reshape(&[self.num_sources(), hc, wc])
            .expect("same element count")
    }
}

/// `values[x, y] = ⟨f1(x), f2(y)⟩ / √D`.
pub fn build_cost_volume<S: Real>(f1: &FeatureMap<S>, f2: &FeatureMap<S>) -> Result<CostVolume<S>> {
    if f1.values.shape() != f2.values.shape() {
        return Err(Error::shape(format!(
            "cost volume needs matching feature maps, got {:?} and {:?}",
            f1.values.shape(),
            f2.values.shape()
        )));
    }
    let (d, h, w) = (f1.channels(), f1.height(), f1.width());
    let n = h * w;
    let a = kernels::transpose(f1.values.data(), d, n);
    let mut out = vec![S::zero(); n * n];
    kernels::matmul_acc(&a, f2.values.data(), &mut out, n, d, n);
    let scale = (d as f64).sqrt();
    let s = S::c(scale);
    for v in out.iter_mut() {
        *v = *v / s;
    }
    let values = Tensor::new(&[h, w, h, w], out)?;
    crate::tensor::check_finite(&values, "cost volume")?;
    Ok(CostVolume { values, scale })
}

/// A `size×size` bilinear crop of one cost map.
#[derive(Clone, Debug, PartialEq)]
pub struct CostPatch<S: Real = f32> {
    /// `(y, x)` in cost-map grid units.
    pub center: (f64, f64),
    pub size: usize,
    pub values: Tensor<S>,
}

/// Samples the unit lattice of offsets `−size/2..=size/2` around `center` in
/// the cost map of `source`; samples outside the map are zero.
pub fn crop_patch<S: Real>(
    cv: &CostVolume<S>,
    source: (usize, usize),
    center: (f64, f64),
    size: usize,
) -> Result<CostPatch<S>> {
    if size % 2 == 0 {
        return Err(Error::config(format!("patch size must be odd, got {size}")));
    }
    let (hs, ws) = cv.source_dims();
    if source.0 >= hs || source.1 >= ws {
        return Err(Error::shape(format!(
            "source pixel {source:?} outside the {hs}×{ws} grid"
        )));
    }
    let (hc, wc) = cv.map_dims();
    let data = kernels::crop_patches(cv.map(source.0, source.1), hc, wc, &[center], size);
    Ok(CostPatch {
        center,
        size,
        values: Tensor::new(&[size, size], data)?,
    })
}
