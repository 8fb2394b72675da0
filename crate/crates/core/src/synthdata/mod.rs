//! Reproducible synthetic frame pairs with known flow, plus PPM and `.flo` I/O.

mod dataset;
mod formats;

use rand::Rng;

use crate::rng::rng_for;
use crate::tensor::Tensor;

pub use dataset::{generate_dataset, load_dataset, regenerate, Dataset, Manifest};
pub use formats::{read_flo, read_ppm, write_flo, write_ppm, FLO_MAGIC};

/// One synthetic sample. `flow` maps frame-1 pixels into frame 2 in image
/// pixels (channel 0 horizontal, channel 1 vertical): `frame1(x) ≈ frame2(x + flow(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub frame1: Tensor,
    pub frame2: Tensor,
    pub flow: Option<Tensor>,
    pub seed: u64,
}

/// Motion model of [`sample_flow_field`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionParams {
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Scale is drawn from `[1 − max_scale_change, 1 + max_scale_change]`.
    pub max_scale_change: f64,
    /// Amplitude of the smooth non-rigid perturbation.
    pub perturbation: f64,
    /// Vectors longer than this are shortened to it.
    pub magnitude_cap: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            max_translation: 8.0,
            max_rotation_deg: 10.0,
            max_scale_change: 0.1,
            perturbation: 2.0,
            magnitude_cap: 12.0,
        }
    }
}

impl MotionParams {
    pub fn still() -> Self {
        MotionParams {
            max_translation: 0.0,
            max_rotation_deg: 0.0,
            max_scale_change: 0.0,
            perturbation: 0.0,
            magnitude_cap: 12.0,
        }
    }
}

/// Smooth random field in `[0, 1]` with lattice spacing `cell` pixels.
fn value_noise<R: Rng>(rng: &mut R, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Multi-octave colored value noise with random filled polygons, in `[0, 1]`.
pub fn make_texture(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = rng_for(seed, &[0x7e47]);
    let mut img = vec![0.0f64; 3 * h * w];
    let base = (h.max(w) as f64 / 2.0).max(2.0);
    for c in 0..3 {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        let mut amp = 0.5;
        let mut cell = base;
        let mut norm = 0.0;
        while cell >= 2.0 {
            for (p, v) in plane.iter_mut().zip(value_noise(&mut rng, h, w, cell)) {
                *p += amp * v;
            }
            norm += amp;
            amp *= 0.7;
            cell /= 2.0;
        }
        for p in plane.iter_mut() {
            *p /= norm;
        }
    }
    let polygons = rng.random_range(4..=8);
    for _ in 0..polygons {
        let (cy, cx) = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
        let radius = rng.random_range(0.06..0.25) * h.min(w) as f64;
        let sides = rng.random_range(3..=6);
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let poly: Vec<(f64, f64)> = (0..sides)
            .map(|k| {
                let a = phase + k as f64 * std::f64::consts::TAU / sides as f64;
                let r = radius * rng.random_range(0.6..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for y in 0..h {
            for x in 0..w {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                    for (c, &col) in color.iter().enumerate() {
                        let p = &mut img[(c * h + y) * w + x];
                        *p = 0.35 * *p + 0.65 * col;
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("sizes agree")
}

/// Affine motion about the image center:
/// `f(p) = t + (s·R(θ) − I)(p − c)` with `p = (x, y)`.
pub fn affine_flow(h: usize, w: usize, translation: (f64, f64), rotation_deg: f64, scale: f64) -> Tensor {
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = translation.0 + scale * (cos * dx - sin * dy) - dx;
            let v = translation.1 + scale * (sin * dx + cos * dy) - dy;
            out[y * w + x] = u as f32;
            out[h * w + y * w + x] = v as f32;
        }
    }
    Tensor::new(&[2, h, w], out).expect("sizes agree")
}

/// Random affine field plus a smooth perturbation, capped in magnitude.
pub fn sample_flow_field(seed: u64, h: usize, w: usize, params: &MotionParams) -> Tensor {
    let mut rng = rng_for(seed, &[0xf10]);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let t = (sym(params.max_translation), sym(params.max_translation));
    let rot = sym(params.max_rotation_deg);
    let scale = 1.0 + sym(params.max_scale_change);
    let base = affine_flow(h, w, t, rot, scale);
    let mut data: Vec<f64> = base.data().iter().map(|&v| f64::from(v)).collect();
    if params.perturbation > 0.0 {
        let cell = (h.max(w) as f64 / 2.0).max(2.0);
        for c in 0..2 {
            let noise = value_noise(&mut rng, h, w, cell);
            for (d, n) in data[c * h * w..(c + 1) * h * w].iter_mut().zip(noise) {
                *d += params.perturbation * (2.0 * n - 1.0);
            }
        }
    }
    for i in 0..h * w {
        let (u, v) = (data[i], data[h * w + i]);
        let len = (u * u + v * v).sqrt();
        if len > params.magnitude_cap {
            let k = params.magnitude_cap / len;
            data[i] = u * k;
            data[h * w + i] = v * k;
        }
    }
    Tensor::new(&[2, h, w], data.into_iter().map(|v| v as f32).collect()).expect("sizes agree")
}

/// Inverse bilinear warp `out(x) = img(x + flow(x))` with edge clamping.
pub fn warp_image(img: &Tensor, flow: &Tensor) -> crate::Result<Tensor> {
    let [c, h, w] = img.shape()[..] else {
        return Err(crate::Error::Shape(format!("image must be [C,H,W], got {:?}", img.shape())));
    };
    if flow.shape() != [2, h, w] {
        return Err(crate::Error::Shape(format!(
            "flow {:?} does not match image {:?}",
            flow.shape(),
            img.shape()
        )));
    }
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + f64::from(flow.data()[y * w + x])).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + f64::from(flow.data()[h * w + y * w + x])).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| f64::from(img.data()[(ch * h + yy) * w + xx]);
                let v = if tx == 0.0 && ty == 0.0 {
                    at(y0, x0)
                } else {
                    (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty)
                        + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty
                };
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Builds the pair for `seed`: frame 2 is the texture with Gaussian noise of
/// standard deviation `noise`, frame 1 samples the clean texture along the flow.
pub fn make_scene(seed: u64, h: usize, w: usize, noise: f64, motion: &MotionParams) -> ScenePair {
    let texture = make_texture(seed, h, w);
    let flow = sample_flow_field(seed, h, w, motion);
    let frame1 = warp_image(&texture, &flow).expect("shapes agree");
    let frame2 = if noise > 0.0 {
        let mut rng = rng_for(seed, &[0x9015e]);
        let normal = rand_distr::Normal::new(0.0, noise).expect("finite noise");
        let noisy = texture
            .data()
            .iter()
            .map(|&v| (f64::from(v) + rng.sample(normal)).clamp(0.0, 1.0) as f32)
            .collect();
        Tensor::new(texture.shape(), noisy).expect("same shape")
    } else {
        texture
    };
    ScenePair {
        frame1,
        frame2,
        flow: Some(flow),
        seed,
    }
}
