//! Central finite-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on checked coordinates, spread evenly over every tensor.
    pub min_coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_coordinates: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(tensor index, flat coordinate)` of the worst agreement.
    pub worst: Option<(usize, usize)>,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh tape with one leaf per parameter (in order) and must
/// return a scalar node. The error at a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(NumericsError::Validation(format!(
                "gradient check needs a scalar function, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take_or_zeros(v)).collect();
    drop(tape);

    let per_tensor = opts.min_coordinates.div_ceil(params.len().max(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for ti in 0..params.len() {
        let len = params[ti].len();
        let picks = sample(&mut rng, len, per_tensor.min(len));
        for coord in picks.iter() {
            let orig = params[ti].data()[coord];
            work[ti].data_mut()[coord] = orig + opts.step;
            let plus = scalar_value(&eval(&work)?)?;
            work[ti].data_mut()[coord] = orig - opts.step;
            let minus = scalar_value(&eval(&work)?)?;
            work[ti].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[coord];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, coord));
            }
        }
    }
    Ok(report)
}

fn scalar_value(run: &(Tape<f64>, Vec<Var>, Var)) -> Result<f64, NumericsError> {
    run.0.value(run.2).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = vec![
            Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap(),
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, -4.0]).unwrap(),
        ];
        let r = grad_check(
            |t, v| {
                let a = t.sum_squares(v[0]);
                let b = t.sum_squares(v[1]);
                t.add(a, b)
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.coordinates, 7);
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn cross_entropy_of_linear_on_random_input() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let p = vec![rand_t(&[4, 3]), rand_t(&[3, 3]), rand_t(&[3])];
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                t.cross_entropy(y, &[2, 0, 1, 1])
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let p = vec![Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()];
        let err = grad_check(|_, v| Ok(v[0]), &p, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, NumericsError::Validation(_)));
    }
}
