use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function of tensors, written once for any scalar type.
///
/// The analytic gradient and the finite-difference probes both run through
/// `eval`, the latter in `f64` so cancellation does not swamp the difference.
pub trait TapeFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Probes skipped because `x ± epsilon` switched the branch of a relu or
    /// smooth-L1 somewhere on the tape.
    pub kinks_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check this many coordinates per input, drawn without replacement;
    /// coordinates landing on a kink are replaced by further draws (up to
    /// four times the budget).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Below this magnitude a derivative counts as zero; central differences of an
/// O(100) loss carry roundoff near 1e-11.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

fn eval_f64(f: &impl TapeFn, inputs: &[Vec<f64>], shapes: &[Vec<usize>], with_grad: &[bool]) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .zip(shapes)
        .zip(with_grad)
        .map(|((v, s), &g)| tape.leaf_values(s, v.clone(), g))
        .collect::<Result<Vec<_>>>()?;
    let out = f.eval(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Max relative error between backprop and central differences over every
/// coordinate of every input that requires grad.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`. Both sides are computed
/// in `f64`.
pub fn grad_check(f: &impl TapeFn, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport> {
    grad_check_with(
        f,
        inputs,
        &GradCheckOptions {
            epsilon,
            ..Default::default()
        },
    )
}

pub fn grad_check_with(f: &impl TapeFn, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let with_grad: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
    let no_grad = vec![false; inputs.len()];

    let (mut tape, vars, out) = eval_f64(f, &base, &shapes, &with_grad)?;
    let first = tape.item(out);
    let (again, _, out2) = eval_f64(f, &base, &shapes, &no_grad)?;
    let second = again.item(out2);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks_skipped: 0,
    };
    let pattern = tape.branch_pattern();
    let mut probe = base.clone();
    for (i, &var) in vars.iter().enumerate() {
        if !with_grad[i] {
            continue;
        }
        let n = base[i].len();
        let analytic = tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let (coords, budget): (Vec<usize>, usize) = match opts.max_coords_per_input {
            Some(m) if m < n => (sample(&mut rng, n, (4 * m).min(n)).into_vec(), m),
            _ => ((0..n).collect(), n),
        };
        let mut done = 0;
        for j in coords {
            if done == budget {
                break;
            }
            let x0 = base[i][j];
            probe[i][j] = x0 + opts.epsilon;
            let (tp, _, op) = eval_f64(f, &probe, &shapes, &no_grad)?;
            let plus = tp.item(op);
            probe[i][j] = x0 - opts.epsilon;
            let (tm, _, om) = eval_f64(f, &probe, &shapes, &no_grad)?;
            let minus = tm.item(om);
            probe[i][j] = x0;
            if tp.branch_pattern() != pattern || tm.branch_pattern() != pattern {
                report.kinks_skipped += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            report.checked += 1;
            done += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
