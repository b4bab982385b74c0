//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) − f(x−h)) / 2h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Magnitude below which the error is measured absolutely (relative to this floor).
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    /// Entries above tolerance are re-measured with the step divided by 4, up
    /// to this many times, keeping the smallest error. Re-measurements also
    /// accept a one-sided difference, which stays clean when a ReLU kink lies
    /// between `x − h` and `x + h`.
    pub refinements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_entries: None,
            refinements: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry with its analytic and numeric derivative.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

fn scalar_of<E: From<TensorError>>(tape: &Tape<f64>, out: Var) -> Result<f64, E> {
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()).into());
    }
    Ok(t.data()[0])
}

/// Compare reverse-mode gradients of the scalar function `f` against
/// central differences at each input.
///
/// `f` records its computation onto the supplied tape from the given input
/// variables and returns the scalar output.
pub fn grad_check<F, E>(mut f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of::<E>(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of::<E>(&tape, out)
    };

    let base = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        inputs: Vec::with_capacity(inputs.len()),
        tolerance: opts.tolerance,
    };
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut check = InputCheck {
            checked: indices.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for &j in &indices {
            let orig = input.data()[j];
            let a = analytic[k].data()[j];
            let mut step = opts.step;
            let mut best: Option<(f64, f64)> = None;
            for round in 0..=opts.refinements {
                work[k].data_mut()[j] = orig + step;
                let plus = eval(&work)?;
                work[k].data_mut()[j] = orig - step;
                let minus = eval(&work)?;
                work[k].data_mut()[j] = orig;
                let mut estimates = vec![(plus - minus) / (2.0 * step)];
                if round > 0 {
                    estimates.push((plus - base) / step);
                    estimates.push((base - minus) / step);
                }
                for numeric in estimates {
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
                    if best.is_none_or(|(e, _)| err < e) {
                        best = Some((err, numeric));
                    }
                }
                if best.is_some_and(|(e, _)| e <= opts.tolerance) {
                    break;
                }
                step /= 4.0;
            }
            let (err, numeric) = best.expect("at least one measurement");
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((j, a, numeric));
            }
        }
        report.inputs.push(check);
    }
    Ok(report)
}
