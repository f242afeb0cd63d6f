//! Central finite-difference gradient checks for tape programs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of one check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst per-tensor `max |analytic − numeric| / max(|analytic|∞, |numeric|∞)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because `f` is not smooth within the step
    /// (a ReLU or max-pool switch), even after retrying with `h / 100`.
    pub skipped: usize,
}

/// One-sided slopes disagreeing by more than this fraction of the tensor's
/// gradient scale mark a kink inside `[x - h, x + h]`.
const KINK_FRACTION: f64 = 1e-3;

/// Scalar probe `Σ c ⊙ f(x)` with a fixed random cotangent `c`.
fn probe<F>(f: &F, inputs: &[Tensor<f64>], cot: &mut Option<Tensor<f64>>, seed: u64, grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let c = cot.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_7A_4E);
        Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
    });
    if c.shape() != shape.as_slice() {
        return Err(Error::shape("gradcheck", c.shape(), &shape));
    }
    let cv = tape.leaf(c.clone(), false);
    let prod = tape.binary(super::ops::BinaryOp::Mul, out, cv)?;
    let loss = tape.reduce_sum(prod);
    Ok((tape, vars, loss))
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `h`. `wrt` selects which inputs to check (all when empty); `stride`
/// checks every `stride`-th coordinate of each.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], wrt: &[usize], seed: u64, h: f64, stride: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut cot = None;
    let (mut tape, vars, loss) = probe(&f, inputs, &mut cot, seed, true)?;
    tape.backward(loss)?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    let wrt = if wrt.is_empty() { &all[..] } else { wrt };
    let eval = |xs: &[Tensor<f64>], cot: &mut Option<Tensor<f64>>| -> Result<f64> {
        let (t, _, l) = probe(&f, xs, cot, seed, false)?;
        Ok(t.value(l).data()[0])
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in wrt {
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let gscale = analytic.data().iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let mut numeric = vec![None; inputs[i].len()];
        let mut xs = inputs.to_vec();
        let f0 = eval(&xs, &mut cot)?;
        for e in (0..inputs[i].len()).step_by(stride.max(1)) {
            let orig = inputs[i].data()[e];
            for step in [h, h * 1e-2] {
                xs[i].data_mut()[e] = orig + step;
                let up = eval(&xs, &mut cot)?;
                xs[i].data_mut()[e] = orig - step;
                let down = eval(&xs, &mut cot)?;
                xs[i].data_mut()[e] = orig;
                let (fwd, bwd) = ((up - f0) / step, (f0 - down) / step);
                if (fwd - bwd).abs() <= KINK_FRACTION * gscale {
                    numeric[e] = Some((up - down) / (2.0 * step));
                    break;
                }
            }
            match numeric[e] {
                Some(_) => report.checked += 1,
                None => report.skipped += 1,
            }
        }
        let mut abs = 0.0f64;
        let mut scale = 0.0f64;
        for (e, n) in numeric.iter().enumerate() {
            if let Some(n) = *n {
                let a = analytic.data()[e];
                abs = abs.max((a - n).abs());
                scale = scale.max(a.abs()).max(n.abs());
            }
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        if scale > 0.0 {
            report.max_rel_err = report.max_rel_err.max(abs / scale);
        }
    }
    Ok(report)
}
