//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamStore, Session};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.relative_error)
            .fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `eps`. Inputs with more than `max_entries` elements
/// are checked on a seeded random subset.
pub fn check_gradients<F>(
    inputs: &[(String, Tensor<f64>)],
    f: F,
    eps: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (name, base)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let entries: Vec<usize> = if base.len() <= max_entries {
            (0..base.len()).collect()
        } else {
            let mut e = sample(&mut rng, base.len(), max_entries).into_vec();
            e.sort_unstable();
            e
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let mut plus = base.to_vec();
            plus[e] += eps;
            values[i] = Tensor::new(base.shape(), plus)?;
            let fp = eval(&values)?;
            let mut minus = base.to_vec();
            minus[e] -= eps;
            values[i] = Tensor::new(base.shape(), minus)?;
            let fm = eval(&values)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[e];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        values[i] = base.clone();
        let denom = a2.sqrt().max(n2.sqrt());
        let relative_error = if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom };
        reports.push(InputReport {
            name: name.clone(),
            checked: entries.len(),
            relative_error,
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(GradCheckReport { inputs: reports })
}

/// Parameter-level variant of [`check_gradients`]: differentiates the scalar
/// built by `f` with respect to every trainable parameter it touches. Inputs
/// whose analytic and numeric gradient norms both stay below `negligible` are
/// reported with zero error, since at step `eps` they are indistinguishable
/// from round-off.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    max_entries: usize,
    negligible: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store);
        let out = f(&mut s)?;
        Ok(s.value(out).item())
    };
    let mut s = Session::new(store);
    let loss = f(&mut s)?;
    let grads = s.param_grads(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut reports = Vec::with_capacity(grads.len());
    for (id, analytic) in grads {
        let base = store.get(id).clone();
        let entries: Vec<usize> = if base.len() <= max_entries {
            (0..base.len()).collect()
        } else {
            let mut e = sample(&mut rng, base.len(), max_entries).into_vec();
            e.sort_unstable();
            e
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let mut plus = base.to_vec();
            plus[e] += eps;
            probe.set(id, Tensor::new(base.shape(), plus)?)?;
            let fp = eval(&probe)?;
            let mut minus = base.to_vec();
            minus[e] -= eps;
            probe.set(id, Tensor::new(base.shape(), minus)?)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[e];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        probe.set(id, base)?;
        let denom = a2.sqrt().max(n2.sqrt());
        let relative_error = if denom < negligible { 0.0 } else { diff2.sqrt() / denom };
        reports.push(InputReport {
            name: store.name(id).to_string(),
            checked: entries.len(),
            relative_error,
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(GradCheckReport { inputs: reports })
}
