//! Frozen convolutional feature encoders for the image and context paths.

use rand::Rng;

use crate::autodiff::{Init, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::tensor::{Real, Tensor};

/// Image pixels per feature cell for the three-layer stack (strides 2, 2, 1).
pub const STRIDE_TO_IMAGE: usize = 4;

const LAYER_STRIDES: [usize; 3] = [2, 2, 1];

/// Dense per-image feature grid `[D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S: Real = f32> {
    pub values: Tensor<S>,
    pub stride_to_image: usize,
}

impl<S: Real> FeatureMap<S> {
    pub fn new(values: Tensor<S>, stride_to_image: usize) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!(
                "feature map must be [D,H,W], got {:?}",
                values.shape()
            )));
        }
        if !stride_to_image.is_power_of_two() {
            return Err(Error::shape(format!(
                "stride_to_image {stride_to_image} is not a power of two"
            )));
        }
        Ok(FeatureMap {
            values,
            stride_to_image,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Parameters of one three-layer convolutional encoder, registered in a
/// [`ParamStore`] under `prefix`. Widths are `[D/2, D, D]`, ReLU between layers.
/// Pixel values in `[0, 1]` are mapped to `[−1, 1]` before the first layer.
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub prefix: String,
    pub layers: Vec<Conv>,
    pub out_dim: usize,
    pub init_seed: u64,
}

impl EncoderWeights {
    pub fn new<S: Real, R: Rng>(init: &mut Init<'_, S, R>, prefix: &str, out_dim: usize, init_seed: u64) -> Self {
        assert!(out_dim >= 2, "encoder output dim must be ≥ 2");
        let mut sub = init.sub(prefix);
        let widths = [out_dim / 2, out_dim, out_dim];
        let mut c_in = 3;
        let layers = widths
            .iter()
            .zip(LAYER_STRIDES)
            .enumerate()
            .map(|(i, (&c_out, stride))| {
                let conv = Conv::new(&mut sub, &format!("conv{i}"), c_in, c_out, stride);
                c_in = c_out;
                conv
            })
            .collect();
        EncoderWeights {
            prefix: format!("{prefix}."),
            layers,
            out_dim,
            init_seed,
        }
    }

    /// Whether every parameter of this encoder is frozen in `store`.
    pub fn is_frozen<S: Real>(&self, store: &ParamStore<S>) -> bool {
        self.layers
            .iter()
            .all(|l| store.is_frozen(l.weight) && store.is_frozen(l.bias))
    }

    /// Half-width of the receptive field of output cell `(0, 0)` in image
    /// pixels: the cell sees pixels `0..=radius` along each axis.
    pub fn receptive_radius(&self) -> usize {
        let mut radius = 0;
        let mut jump = 1;
        for l in &self.layers {
            radius += (Conv::KERNEL / 2) * jump;
            jump *= l.stride;
        }
        radius
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if shape[shape.len() - 3] != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {shape:?}")));
        }
        if h % STRIDE_TO_IMAGE != 0 || w % STRIDE_TO_IMAGE != 0 {
            return Err(Error::shape(format!(
                "image size {h}×{w} must be a multiple of {STRIDE_TO_IMAGE}"
            )));
        }
        Ok(())
    }

    /// Encodes images `[3,H,W]` or `[N,3,H,W]` without recording gradients.
    pub fn encode_plain<S: Real>(&self, store: &ParamStore<S>, img: &Tensor<S>) -> Result<Tensor<S>> {
        if img.rank() < 3 {
            return Err(Error::shape(format!("image must be [3,H,W], got {:?}", img.shape())));
        }
        self.check_input(img.shape())?;
        let mut x = img.map(|v| v + v - S::one());
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.map(|v| if v > S::zero() { v } else { S::zero() });
            }
            x = l.forward_plain(store, &x)?;
        }
        Ok(x)
    }

    /// Differentiable encoding of `[N,3,H,W]` images.
    pub fn forward<S: Real>(&self, s: &mut Session<'_, S>, img: Var) -> Result<Var> {
        self.check_input(s.shape(img))?;
        let ones = Tensor::ones(s.shape(img));
        let ones = s.constant(ones);
        let doubled = s.scale(img, 2.0)?;
        let mut x = s.sub(doubled, ones)?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = s.relu(x)?;
            }
            x = l.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Guards the per-cell normalization of all-zero feature vectors.
pub const FEATURE_NORM_EPS: f64 = 1e-6;

/// Rescales every cell's feature vector of `[D, H, W]` to unit root mean square.
///
/// Untrained convolutions respond mostly to local brightness, so raw dot
/// products favor bright target cells over matching ones; normalizing the
/// vectors makes correlation compare directions instead.
pub fn normalize_cells<S: Real>(values: &Tensor<S>) -> Tensor<S> {
    let [d, h, w] = values.shape()[..] else {
        panic!("normalize_cells expects [D,H,W], got {:?}", values.shape());
    };
    let n = h * w;
    let src = values.data();
    let mut out = src.to_vec();
    for i in 0..n {
        let sq = (0..d).fold(0.0f64, |acc, c| acc + src[c * n + i].f64().powi(2));
        let inv = 1.0 / ((sq / d as f64).sqrt() + FEATURE_NORM_EPS);
        for c in 0..d {
            out[c * n + i] = S::c(src[c * n + i].f64() * inv);
        }
    }
    Tensor::new(values.shape(), out).expect("same shape")
}

fn check_single<S: Real>(img: &Tensor<S>) -> Result<()> {
    if img.rank() != 3 {
        return Err(Error::shape(format!("image must be [3,H,W], got {:?}", img.shape())));
    }
    Ok(())
}

/// Visual features for cost-volume construction, normalized per cell.
pub fn encode_image<S: Real>(img: &Tensor<S>, w: &EncoderWeights, store: &ParamStore<S>) -> Result<FeatureMap<S>> {
    check_single(img)?;
    FeatureMap::new(normalize_cells(&w.encode_plain(store, img)?), STRIDE_TO_IMAGE)
}

/// Context features for flow decoding; same stack, separate weights, raw outputs.
pub fn encode_context<S: Real>(img: &Tensor<S>, w: &EncoderWeights, store: &ParamStore<S>) -> Result<FeatureMap<S>> {
    check_single(img)?;
    FeatureMap::new(w.encode_plain(store, img)?, STRIDE_TO_IMAGE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn encoder(dim: usize) -> (ParamStore, EncoderWeights) {
        let mut store = ParamStore::new();
        let mut rng = rng_for(7, &[]);
        let mut init = Init::new(&mut store, &mut rng, "");
        let w = EncoderWeights::new(&mut init, "image_encoder", dim, 7);
        (store, w)
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = rng_for(seed, &[]);
        Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let (store, w) = encoder(8);
        let img = random_image(1, 128, 128);
        let a = encode_image(&img, &w, &store).unwrap();
        let b = encode_image(&img, &w, &store).unwrap();
        assert_eq!(a.values.shape(), &[8, 32, 32]);
        assert_eq!(a.stride_to_image, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_size_names_multiple() {
        let (store, w) = encoder(8);
        let err = encode_image(&random_image(1, 30, 32), &w, &store).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("multiple of 4")), "{err}");
    }

    #[test]
    fn receptive_field_bounds_cell_zero() {
        let (store, w) = encoder(8);
        let r = w.receptive_radius();
        assert_eq!(r, 7);
        let a = random_image(2, 32, 32);
        let mut data = a.to_vec();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if y > r || x > r {
                        data[(c * 32 + y) * 32 + x] += 0.5;
                    }
                }
            }
        }
        let b = Tensor::new(&[3, 32, 32], data).unwrap();
        let fa = encode_image(&a, &w, &store).unwrap();
        let fb = encode_image(&b, &w, &store).unwrap();
        for c in 0..8 {
            assert_eq!(fa.values.at(&[c, 0, 0]), fb.values.at(&[c, 0, 0]));
        }
        // a pixel just inside the field does matter
        let mut data = a.to_vec();
        data[r * 32 + r] += 0.5;
        let fc = encode_image(&Tensor::new(&[3, 32, 32], data).unwrap(), &w, &store).unwrap();
        assert!((0..8).any(|c| fa.values.at(&[c, 0, 0]) != fc.values.at(&[c, 0, 0])));
    }

    #[test]
    fn plain_and_taped_paths_agree() {
        let (store, w) = encoder(4);
        let img = random_image(3, 16, 16);
        let plain = w.encode_plain(&store, &img).unwrap();
        let mut s = Session::new(&store);
        let x = s.constant(img.reshape(&[1, 3, 16, 16]).unwrap());
        let y = w.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), plain.data());
    }

    #[test]
    fn image_features_have_unit_rms_per_cell() {
        let (store, w) = encoder(8);
        let img = random_image(4, 32, 32);
        let f = encode_image(&img, &w, &store).unwrap();
        let raw = w.encode_plain(&store, &img).unwrap();
        let n = 8 * 8;
        for i in 0..n {
            let ms: f64 = (0..8).map(|c| f.values.data()[c * n + i].f64().powi(2)).sum::<f64>() / 8.0;
            assert!((ms - 1.0).abs() < 1e-4, "cell {i}: {ms}");
            let rms = ((0..8).map(|c| raw.data()[c * n + i].f64().powi(2)).sum::<f64>() / 8.0).sqrt();
            for c in 0..8 {
                let want = raw.data()[c * n + i].f64() / (rms + FEATURE_NORM_EPS);
                assert!((f.values.data()[c * n + i].f64() - want).abs() < 1e-5 * want.abs().max(1.0));
            }
        }
        assert_eq!(encode_context(&img, &w, &store).unwrap().values, raw);
        let zero = normalize_cells(&Tensor::<f32>::zeros(&[3, 2, 2]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }
}
