//! Brute-force oracles and invariant checks shared by the integration tests
//! and the acceptance runner. Each check returns `Ok(detail)` when it holds
//! and `Err(detail)` describing the first violation otherwise.

#![allow(dead_code)]

use std::sync::Arc;

use mcva_core::autodiff::gradcheck::{check_gradients, check_param_gradients, GradCheckReport};
use mcva_core::autodiff::{conv2d_plain, scaled_dot_attention, Init, Tape, Var};
use mcva_core::costvol::{build_cost_volume, CostVolume};
use mcva_core::decoder::{CostDecoder, NormalizeSide, QueryMode, QUERY_PATCH};
use mcva_core::encoders::FeatureMap;
use mcva_core::masking::{default_side_range, masked_cells, MaskPyramidSet, MaskStrategy, BASE_CELL, LEVELS};
use mcva_core::model::{pretext_forward, Model, ModelConfig, PretextOptions};
use mcva_core::rng::rng_for;
use mcva_core::{ParamStore, Result, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = std::result::Result<String, String>;

/// Largest distance in units of least precision tolerated against an oracle in
/// double precision.
pub const MAX_ULPS: u64 = 4;
/// Largest normwise relative error tolerated against an oracle in single
/// precision.
pub const MAX_REL_F32: f64 = 1e-5;
/// Largest relative error of a gradient against central differences.
pub const MAX_GRAD_REL: f64 = 1e-4;

// ---------------------------------------------------------------- numerics

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Rounds every entry to single precision and back, so that the f32 and f64
/// paths see the same inputs.
pub fn f32_exact(t: &Tensor<f64>) -> Tensor<f64> {
    t.cast::<f32>().cast::<f64>()
}

/// Distance in units of least precision between two doubles.
pub fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let to_ordered = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    to_ordered(a).abs_diff(to_ordered(b))
}

pub fn max_ulps(got: &[f64], want: &[f64]) -> u64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(&a, &b)| ulps(a, b)).max().unwrap_or(0)
}

/// `max |got − want| / max |want|`.
pub fn normwise_rel(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got
        .iter()
        .zip(want)
        .fold(0.0f64, |m, (&a, &b)| m.max((f64::from(a) - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ----------------------------------------------------------------- oracles

pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k as isize - 1) / 2;
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride) as isize + ky as isize - pad;
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += x.at(&[ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = s + b.data()[co];
            }
        }
    }
    out
}

/// `softmax(q kᵀ / √d) v` for one group, `q [m, d]`, `k [n, d]`, `v [n, dv]`.
pub fn attention_rows(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q.first().map_or(1, Vec::len);
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| {
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += qi[t] * kj[t];
                    }
                    dot / (d as f64).sqrt()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (j, vj) in v.iter().enumerate() {
                let p = e[j] / total;
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
            out
        })
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    attention_rows(&rows(q), &rows(k), &rows(v)).concat()
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `C[y1, x1, y2, x2] = Σ_c f1[c, y1, x1] · f2[c, y2, x2] / √D`.
pub fn cost_volume_oracle(f1: &Tensor<f64>, f2: &Tensor<f64>) -> Vec<f64> {
    let (d, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let mut out = Vec::with_capacity(h * w * h * w);
    for y1 in 0..h {
        for x1 in 0..w {
            for y2 in 0..h {
                for x2 in 0..w {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += f1.at(&[c, y1, x1]) * f2.at(&[c, y2, x2]);
                    }
                    out.push(s / (d as f64).sqrt());
                }
            }
        }
    }
    out
}

fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).clone()
}

/// `x · W + b` for one row.
fn linear_oracle(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), din);
    (0..dout)
        .map(|j| {
            let mut s = 0.0;
            for (p, xv) in x.iter().enumerate() {
                s += xv * w.at(&[p, j]);
            }
            s + b.data()[j]
        })
        .collect()
}

fn ffn_oracle(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear_oracle(store, &format!("{name}.fc1"), x)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    linear_oracle(store, &format!("{name}.fc2"), &h)
}

/// Sine/cosine encoding of `(y, x)`: for each coordinate, `dim/4` frequencies
/// `100^(−i/(dim/4))`, each contributing `sin` then `cos`.
pub fn position_oracle(y: f64, x: f64, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [y, x] {
        for i in 0..quarter {
            let freq = 100f64.powf(-(i as f64) / quarter as f64);
            out.push((coord * freq).sin());
            out.push((coord * freq).cos());
        }
    }
    out
}

/// One cost feature per source pixel: a single query built from the location
/// encoding (plus the encoded query patch) cross-attends over the pixel's K
/// memory tokens through key/value feed-forward maps.
pub fn decode_oracle(
    store: &ParamStore<f64>,
    prefix: &str,
    memory: &Tensor<f64>,
    patches: &Tensor<f64>,
    locations: &[(f64, f64)],
    mode: QueryMode,
) -> Vec<f64> {
    let (k, d) = (memory.shape()[1], memory.shape()[2]);
    let patch_len = patches.shape()[1];
    let mut out = Vec::with_capacity(locations.len() * d);
    for (i, &(y, x)) in locations.iter().enumerate() {
        let pe = position_oracle(y, x, d);
        let query_in = match mode {
            QueryMode::PeOnly => pe,
            QueryMode::PePlusPatch => {
                let patch = &patches.data()[i * patch_len..(i + 1) * patch_len];
                let enc = ffn_oracle(store, &format!("{prefix}.patch_ffn"), patch);
                enc.iter().zip(&pe).map(|(a, b)| a + b).collect()
            }
        };
        let q = ffn_oracle(store, &format!("{prefix}.query_ffn"), &query_in);
        let tokens: Vec<&[f64]> = (0..k).map(|j| &memory.data()[(i * k + j) * d..(i * k + j + 1) * d]).collect();
        let keys: Vec<Vec<f64>> = tokens.iter().map(|t| ffn_oracle(store, &format!("{prefix}.key_ffn"), t)).collect();
        let values: Vec<Vec<f64>> = tokens.iter().map(|t| ffn_oracle(store, &format!("{prefix}.value_ffn"), t)).collect();
        out.extend(attention_rows(&[q], &keys, &values).remove(0));
    }
    out
}

// ---------------------------------------------------- oracle equivalence

/// Compares the f64 path to the oracle in ulps and the f32 path (fed the same
/// f32-representable inputs) in normwise relative error.
fn compare(label: &str, instances: usize, mut case: impl FnMut(u64) -> (Vec<f64>, Vec<f64>, Vec<f32>)) -> Outcome {
    let (mut worst_ulps, mut worst_rel) = (0u64, 0.0f64);
    for i in 0..instances as u64 {
        let (got64, want, got32) = case(i);
        let u = max_ulps(&got64, &want);
        let r = normwise_rel(&got32, &want);
        if u > MAX_ULPS || r > MAX_REL_F32 {
            return Err(format!("{label} instance {i}: {u} ulps (f64), relative {r:.3e} (f32)"));
        }
        worst_ulps = worst_ulps.max(u);
        worst_rel = worst_rel.max(r);
    }
    Ok(format!("{label}: {instances} instances, worst {worst_ulps} ulps f64, {worst_rel:.2e} rel f32"))
}

pub fn conv_equivalence(instances: usize) -> Outcome {
    compare("conv2d", instances, |i| {
        let mut rng = rng_for(41, &[i]);
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let x = f32_exact(&rand_tensor(&mut rng, &[cin, h, w]));
        let wt = f32_exact(&rand_tensor(&mut rng, &[cout, cin, k, k]));
        let b = f32_exact(&rand_tensor(&mut rng, &[cout]));
        let got64 = conv2d_plain(&x, &wt, &b, stride).unwrap().to_vec();
        let got32 = conv2d_plain(&x.cast::<f32>(), &wt.cast(), &b.cast(), stride).unwrap().to_vec();
        (got64, conv_oracle(&x, &wt, &b, stride), got32)
    })
}

pub fn attention_equivalence(instances: usize) -> Outcome {
    compare("scaled_dot_attention", instances, |i| {
        let mut rng = rng_for(42, &[i]);
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (d, dv) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let q = f32_exact(&rand_tensor(&mut rng, &[m, d]).map(|v| 3.0 * v));
        let k = f32_exact(&rand_tensor(&mut rng, &[n, d]));
        let v = f32_exact(&rand_tensor(&mut rng, &[n, dv]));
        let got64 = scaled_dot_attention(&q, &k, &v).unwrap().to_vec();
        let got32 = scaled_dot_attention(&q.cast::<f32>(), &k.cast(), &v.cast()).unwrap().to_vec();
        (got64, attention_oracle(&q, &k, &v), got32)
    })
}

pub fn cost_volume_equivalence(instances: usize) -> Outcome {
    compare("build_cost_volume", instances, |i| {
        let mut rng = rng_for(43, &[i]);
        let d = rng.random_range(1..=12);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let f1 = f32_exact(&rand_tensor(&mut rng, &[d, h, w]));
        let f2 = f32_exact(&rand_tensor(&mut rng, &[d, h, w]));
        let fm = |t: &Tensor<f64>| FeatureMap::new(t.clone(), 4).unwrap();
        let fm32 = |t: &Tensor<f64>| FeatureMap::new(t.cast::<f32>(), 4).unwrap();
        let got64 = build_cost_volume(&fm(&f1), &fm(&f2)).unwrap().values().to_vec();
        let got32 = build_cost_volume(&fm32(&f1), &fm32(&f2)).unwrap().values().to_vec();
        (got64, cost_volume_oracle(&f1, &f2), got32)
    })
}

/// A decoder whose every parameter (biases included) is random, so the oracle
/// exercises all of them.
pub fn random_decoder(seed: u64, token_dim: usize, hidden: usize) -> (CostDecoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, &[]);
    let decoder = CostDecoder::new(&mut Init::new(&mut store, &mut rng, ""), "decoder", token_dim, hidden);
    for id in store.ids().collect::<Vec<_>>() {
        let t = f32_exact(&rand_tensor(&mut rng, store.get(id).shape()).map(|v| 0.5 * v));
        store.set(id, t).unwrap();
    }
    (decoder, store)
}

pub fn decoder_equivalence(instances: usize) -> Outcome {
    compare("decode_cost_feature", instances, |i| {
        let mut rng = rng_for(44, &[i]);
        let d = 4 * rng.random_range(1..=3);
        let hidden = rng.random_range(1..=10);
        let (k, p) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let mode = if i % 2 == 0 { QueryMode::PePlusPatch } else { QueryMode::PeOnly };
        let (decoder, store) = random_decoder(1000 + i, d, hidden);
        let memory = f32_exact(&rand_tensor(&mut rng, &[p, k, d]));
        let patches = f32_exact(&rand_tensor(&mut rng, &[p, QUERY_PATCH * QUERY_PATCH]));
        let locations: Vec<(f64, f64)> = (0..p)
            .map(|_| (rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)))
            .collect();
        let run = |store: &ParamStore<f64>| -> Vec<f64> {
            let mut s = Session::new(store);
            let m = s.constant(memory.clone());
            let q = s.constant(patches.clone());
            let c = decoder.decode_cost_feature(&mut s, m, Some(q), &locations, mode).unwrap();
            s.value(c).to_vec()
        };
        let got32 = {
            let store32 = store.cast::<f32>();
            let mut s = Session::new(&store32);
            let m = s.constant(memory.cast());
            let q = s.constant(patches.cast());
            let c = decoder.decode_cost_feature(&mut s, m, Some(q), &locations, mode).unwrap();
            s.value(c).to_vec()
        };
        (run(&store), decode_oracle(&store, "decoder", &memory, &patches, &locations, mode), got32)
    })
}

// ---------------------------------------------------------- gradient checks

/// Projects an op output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

type OpCase = (&'static str, Vec<(String, Tensor<f64>)>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn named(inputs: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// One composite case per group of tape operations; together they cover every
/// differentiable op.
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut cases: Vec<OpCase> = Vec::new();

    let (a, b) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]));
    cases.push((
        "add/sub/mul/scale/sigmoid/tanh",
        named(vec![("a", a), ("b", b)]),
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let m = t.scale(m, 1.7)?;
            let sg = t.sigmoid(m)?;
            let th = t.tanh(v[0])?;
            let o = t.add(sg, th)?;
            weighted_sum(t, o, 1)
        }),
    ));

    let a = Tensor::from_f64(&[6], &[-0.9, -0.4, 0.3, 0.7, 1.2, -1.5]).unwrap();
    cases.push((
        "relu/mean_abs",
        named(vec![("a", a)]),
        Box::new(|t, v| {
            let r = t.relu(v[0])?;
            let m = t.mean_abs(v[0])?;
            let s = weighted_sum(t, r, 2)?;
            t.add(s, m)
        }),
    ));

    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5]);
    let m = rand_tensor(&mut rng, &[5, 2]);
    cases.push((
        "linear/matmul",
        named(vec![("x", x), ("w", w), ("b", b), ("m", m)]),
        Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let y = t.reshape(y, &[6, 5])?;
            let z = t.matmul(y, v[3])?;
            weighted_sum(t, z, 3)
        }),
    ));

    let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
    let w1 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b1 = rand_tensor(&mut rng, &[3]);
    let w2 = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let b2 = rand_tensor(&mut rng, &[2]);
    cases.push((
        "conv2d (strides 1, 2)",
        named(vec![("x", x), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]),
        Box::new(|t, v| {
            let h = t.conv2d(v[0], v[1], v[2], 2)?;
            let h = t.tanh(h)?;
            let y = t.conv2d(h, v[3], v[4], 1)?;
            weighted_sum(t, y, 4)
        }),
    ));

    let q = rand_tensor(&mut rng, &[2, 3, 4]);
    let k = rand_tensor(&mut rng, &[2, 5, 4]);
    let v = rand_tensor(&mut rng, &[2, 5, 3]);
    cases.push((
        "attention",
        named(vec![("q", q), ("k", k), ("v", v)]),
        Box::new(|t, v| {
            let y = t.attention(v[0], v[1], v[2])?;
            weighted_sum(t, y, 5)
        }),
    ));

    let x = rand_tensor(&mut rng, &[3, 6]);
    let g = rand_tensor(&mut rng, &[6]);
    let b = rand_tensor(&mut rng, &[6]);
    cases.push((
        "layer_norm/affine_last",
        named(vec![("x", x.clone()), ("g", g), ("b", b)]),
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 6)
        }),
    ));
    cases.push((
        "standardize",
        named(vec![("x", x)]),
        Box::new(|t, v| {
            let y = t.standardize(v[0], 1e-6)?;
            weighted_sum(t, y, 7)
        }),
    ));

    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[3, 4]);
    let z = rand_tensor(&mut rng, &[2, 3, 2]);
    let idx = Arc::new(vec![vec![2, 0], vec![1, 1]]);
    cases.push((
        "permute/add_bcast/concat/slice/gather/repeat",
        named(vec![("x", x), ("y", y), ("z", z)]),
        Box::new(move |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let p = t.permute(p, &[1, 2, 0])?;
            let a = t.add_bcast(p, v[1])?;
            let c = t.concat_last(&[a, v[2]])?;
            let s = t.slice_last(c, 1, 4)?;
            let g = t.gather_rows(s, idx.clone())?;
            let r = t.repeat_leading(v[1], 2)?;
            let o1 = weighted_sum(t, g, 8)?;
            let o2 = weighted_sum(t, r, 9)?;
            t.add(o1, o2)
        }),
    ));

    let maps = rand_tensor(&mut rng, &[2, 6, 7]);
    let centers = Arc::new(vec![(2.3, 4.6), (0.4, -0.7)]);
    cases.push((
        "crop_patches",
        named(vec![("maps", maps)]),
        Box::new(move |t, v| {
            let p = t.crop_patches(v[0], centers.clone(), 5)?;
            weighted_sum(t, p, 10)
        }),
    ));

    let (a, b) = (rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 3]));
    cases.push((
        "mse/mean_all/sum_all",
        named(vec![("a", a), ("b", b)]),
        Box::new(|t, v| {
            let m = t.mse(v[0], v[1])?;
            let s = t.mean_all(v[0])?;
            let total = t.sum_all(v[1])?;
            let o = t.add(m, s)?;
            t.add(o, total)
        }),
    ));
    cases
}

/// Worst relative error per op case.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_gradients(&inputs, |t, v| f(t, v), 1e-3, 64, 1).unwrap();
            (name, report.worst())
        })
        .collect()
}

/// Small pre-text model: grid 4×4 sources, 16×16 cost maps, K = 2.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        context_dim: 4,
        cost_dim: 4,
        num_latents: 2,
        token_dim: 8,
        agt_pairs: 1,
        ffn_hidden: 6,
        head_hidden: 6,
        gru_hidden: 4,
        encoder_seed: 5,
    }
}

/// Central differences of the whole masked pre-text objective with respect to
/// every trainable parameter, in double precision.
pub fn pipeline_gradcheck(side: NormalizeSide, seed: u64) -> GradCheckReport {
    let (model, mut store) = Model::build::<f64>(&gradcheck_model_config(), seed).unwrap();
    let mut rng = rng_for(seed, &[7]);
    // Zero-initialized biases put ReLUs exactly at their kinks and can make a
    // prediction row constant; small random offsets keep the objective smooth
    // at the probe point.
    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_frozen(id) && store.get(id).data().iter().all(|&v| v == 0.0) {
            let t = rand_tensor(&mut rng, store.get(id).shape()).map(|v| 0.1 * v);
            store.set(id, t).unwrap();
        }
    }
    let cv = CostVolume::from_tensor(rand_tensor(&mut rng, &[4, 4, 16, 16]), 1.0).unwrap();
    let masks = MaskStrategy::Block
        .generate((4, 4), (16, 16), 0.5, default_side_range(4, 4), &mut rng)
        .unwrap()
        .unwrap();
    let options = PretextOptions {
        normalize_side: side,
        ..PretextOptions::default()
    };
    check_param_gradients(
        &store,
        |s| pretext_forward(s, &model, &[&cv], Some(&[&masks]), &options, seed),
        1e-5,
        12,
        1e-7,
        seed,
    )
    .unwrap()
}

// ------------------------------------------------------------------ masking

/// Model used by the encoder invariants: small enough for 32×32 grids.
pub fn invariant_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        context_dim: 4,
        cost_dim: 4,
        num_latents: 2,
        token_dim: 8,
        agt_pairs: 1,
        ffn_hidden: 8,
        head_hidden: 8,
        gru_hidden: 4,
        encoder_seed: 9,
    }
}

fn memory_bits(model: &Model, store: &ParamStore, cv: &CostVolume, masks: Option<&MaskPyramidSet>) -> Result<Vec<u32>> {
    let mut s = Session::new(store);
    let sets: Vec<&MaskPyramidSet> = masks.into_iter().collect();
    let m = model.encode_costs(&mut s, &[cv], masks.map(|_| sets.as_slice()))?;
    Ok(s.value(m).data().iter().map(|v| v.to_bits()).collect())
}

/// Perturbing cost values under masked full-resolution cells must leave the
/// cost memory bitwise unchanged.
pub fn information_blocking(cases: u64, grid: usize) -> Outcome {
    let (model, store) = Model::build::<f32>(&invariant_model_config(), 3).map_err(|e| e.to_string())?;
    let mut perturbed_total = 0usize;
    for case in 0..cases {
        let mut rng = rng_for(77, &[case]);
        let values = rand_tensor(&mut rng, &[grid, grid, grid, grid]).cast::<f32>();
        let strategy = if case % 2 == 0 { MaskStrategy::Block } else { MaskStrategy::Random };
        let ratio = [0.25, 0.5, 0.75][rng.random_range(0..3)];
        let side = (rng.random_range(1..=grid / 2), grid);
        let masks = strategy
            .generate((grid, grid), (grid, grid), ratio, side, &mut rng)
            .map_err(|e| e.to_string())?
            .expect("masked strategy");
        let mut data = values.to_vec();
        let map_len = grid * grid;
        let mut perturbed = 0;
        for p in 0..grid * grid {
            let full = masks.for_pixel(p).full();
            for (i, &visible) in full.visible.iter().enumerate() {
                if !visible {
                    data[p * map_len + i] += rng.random_range(-50.0f32..50.0);
                    perturbed += 1;
                }
            }
        }
        perturbed_total += perturbed;
        let original = CostVolume::from_tensor(values, 1.0).map_err(|e| e.to_string())?;
        let changed = CostVolume::from_tensor(Tensor::new(original.values().shape(), data).unwrap(), 1.0)
            .map_err(|e| e.to_string())?;
        let a = memory_bits(&model, &store, &original, Some(&masks)).map_err(|e| e.to_string())?;
        let b = memory_bits(&model, &store, &changed, Some(&masks)).map_err(|e| e.to_string())?;
        if perturbed == 0 {
            return Err(format!("case {case}: nothing was masked"));
        }
        if a != b {
            let n = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            return Err(format!("case {case} ({strategy}, ratio {ratio}): {n} memory entries changed"));
        }
    }
    Ok(format!("{cases} cases at grid {grid}×{grid}, {perturbed_total} masked costs perturbed, memory bitwise equal"))
}

/// With masking disabled the encoder must behave exactly like all-ones masks.
pub fn unmasked_equals_all_ones(seed: u64) -> Outcome {
    let (model, store) = Model::build::<f32>(&invariant_model_config(), seed).map_err(|e| e.to_string())?;
    let mut rng = rng_for(seed, &[]);
    let cv = CostVolume::from_tensor(rand_tensor(&mut rng, &[4, 5, 16, 16]).cast(), 1.0).unwrap();
    let masks = MaskStrategy::Random
        .generate((4, 5), (16, 16), 0.0, (1, 1), &mut rng)
        .unwrap()
        .unwrap();
    let a = memory_bits(&model, &store, &cv, None).map_err(|e| e.to_string())?;
    let b = memory_bits(&model, &store, &cv, Some(&masks)).map_err(|e| e.to_string())?;
    if a == b {
        Ok("no-mask path equals all-ones masks bitwise".into())
    } else {
        Err("no-mask path differs from all-ones masks".into())
    }
}

/// Partition validity, block sharing, nearest-neighbor pyramids and exact
/// masked counts for one random configuration.
pub fn mask_invariants(seed: u64) -> Outcome {
    let mut rng = rng_for(99, &[seed]);
    let (h, w) = (rng.random_range(1..=40), rng.random_range(1..=40));
    let (hc, wc) = (BASE_CELL * rng.random_range(1..=4), BASE_CELL * rng.random_range(1..=4));
    let ratio = if rng.random_bool(0.1) { [0.0, 1.0][rng.random_range(0..2)] } else { rng.random_range(0.0..=1.0) };
    let strategy = if seed % 2 == 0 { MaskStrategy::Block } else { MaskStrategy::Random };
    let range = default_side_range(h, w);
    let fail = |msg: String| Err(format!("seed {seed} ({strategy}, {h}×{w} sources, {hc}×{wc} maps, ratio {ratio}): {msg}"));
    let set = strategy
        .generate((h, w), (hc, wc), ratio, range, &mut rng)
        .map_err(|e| e.to_string())?
        .expect("masked strategy");
    let part = &set.partition;

    // partition validity: in-bounds rectangles that tile the grid exactly once
    if part.block_id.len() != h * w || set.pyramids.len() != part.num_blocks() {
        return fail("partition does not match the source grid".into());
    }
    let mut area = 0;
    for (id, r) in part.blocks.iter().enumerate() {
        if r.height == 0 || r.width == 0 || r.row + r.height > h || r.col + r.width > w {
            return fail(format!("block {id} {r:?} is empty or out of bounds"));
        }
        let (lo, hi) = part.side_range;
        for (side, start, extent) in [(r.height, r.row, h), (r.width, r.col, w)] {
            if side > hi || (side < lo && start + side != extent) {
                return fail(format!("block {id} {r:?} violates side range {:?}", part.side_range));
            }
        }
        if strategy == MaskStrategy::Random && (r.height, r.width) != (1, 1) {
            return fail(format!("random masking block {id} is not a single pixel"));
        }
        for y in r.row..r.row + r.height {
            for x in r.col..r.col + r.width {
                if part.id_at(y, x) != id {
                    return fail(format!("pixel ({y},{x}) of block {id} is labeled {}", part.id_at(y, x)));
                }
            }
        }
        area += r.height * r.width;
    }
    if area != h * w {
        return fail(format!("blocks cover {area} pixels, grid has {}", h * w));
    }

    // block sharing: every pixel carries its block's pyramid bit for bit
    for (id, r) in part.blocks.iter().enumerate() {
        let anchor = set.for_pixel(r.row * w + r.col);
        for y in r.row..r.row + r.height {
            for x in r.col..r.col + r.width {
                if set.for_pixel(y * w + x) != anchor {
                    return fail(format!("pixel ({y},{x}) does not share block {id}'s masks"));
                }
            }
        }
    }

    // pyramid identity and exact counts
    let base_cells = (hc / BASE_CELL) * (wc / BASE_CELL);
    let expected = (ratio * base_cells as f64).round() as usize;
    if masked_cells(base_cells, ratio) != expected {
        return fail("masked_cells disagrees with round(ratio·cells)".into());
    }
    for (id, pyr) in set.pyramids.iter().enumerate() {
        if pyr.levels.len() != LEVELS {
            return fail(format!("block {id} has {} levels", pyr.levels.len()));
        }
        let base = pyr.base();
        if base.masked_count() != expected {
            return fail(format!("block {id} masks {} base cells, expected {expected}", base.masked_count()));
        }
        for (i, level) in pyr.levels.iter().enumerate() {
            let f = 1 << (LEVELS - 1 - i);
            if (level.height, level.width) != (hc >> i, wc >> i) {
                return fail(format!("level {i} is {}×{}", level.height, level.width));
            }
            for y in 0..level.height {
                for x in 0..level.width {
                    if level.get(y, x) != base.get(y / f, x / f) {
                        return fail(format!("level {i} cell ({y},{x}) differs from its base cell"));
                    }
                }
            }
            if level.masked_count() != expected * f * f {
                return fail(format!("level {i} masks {} cells, expected {}", level.masked_count(), expected * f * f));
            }
        }
    }
    Ok(format!("{} blocks", part.num_blocks()))
}

pub fn mask_suite(seeds: u64) -> Outcome {
    let mut blocks = 0usize;
    for seed in 0..seeds {
        let detail = mask_invariants(seed)?;
        blocks += detail.split_whitespace().next().and_then(|n| n.parse::<usize>().ok()).unwrap_or(0);
    }
    Ok(format!("{seeds} seeds, {blocks} blocks checked"))
}

/// Both sides of the pre-text normalization are exercised by the pipeline check.
pub const NORMALIZE_SIDES: [NormalizeSide; 2] = [NormalizeSide::Target, NormalizeSide::Prediction];
