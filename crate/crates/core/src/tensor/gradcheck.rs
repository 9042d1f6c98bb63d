//! Gradient verification against central finite differences.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Precision, Tape, Tensor};

/// Relative error for one checked parameter block.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of a gradient check. Passes iff every entry's relative error is
/// at or below the tolerance.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            let status = if e.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "{:<40} rel_err {:>12.3e}  {}", e.name, e.max_rel_err, status)?;
        }
        write!(
            f,
            "max rel_err {:.3e} (tol {:.1e}) -> {}",
            self.max_rel_err(),
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `params`.
///
/// `f` receives a fresh tape and the already-watched parameter tensors in
/// the order given; it must build and return the scalar loss. The numeric
/// side perturbs one element at a time by `eps` and never touches the tape
/// gradients, so it stays an independent oracle for the backward pass.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }

    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let tracked: Vec<Tensor> = points.iter().map(|t| tape.watch(t)).collect();
        let loss = f(&mut tape, &tracked)?;
        loss.item()
    };

    // analytic gradients
    let mut tape = Tape::new(Precision::F64);
    let tracked: Vec<Tensor> = params.iter().map(|(_, t)| tape.watch(t)).collect();
    let loss = f(&mut tape, &tracked)?;
    if !loss.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = tracked
        .iter()
        .map(|t| grads.for_tensor(t))
        .collect::<Result<_>>()?;

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..tensor.numel() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut dp = tensor.data().to_vec();
            dp[k] += eps;
            plus[pi] = tensor.with_data(dp)?;
            let mut dm = tensor.data().to_vec();
            dm[k] -= eps;
            minus[pi] = tensor.with_data(dm)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[pi].data()[k], numeric));
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Mixes an output tensor into a scalar through a fixed random weighting so
/// every element contributes to the checked loss.
fn weighted_sum(tape: &mut Tape, x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let w = tape.mul(x, weights)?;
    tape.sum_all(&w)
}

/// Run a finite-difference check over every registered tape operation.
///
/// One entry per (op, parameter) pair; shapes are small but non-square to
/// catch transposition mistakes.
pub fn op_gradcheck_suite(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        entries: Vec::new(),
        tol,
    };

    let mut check = |name: &str,
                     params: Vec<(String, Tensor)>,
                     f: Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>>|
     -> Result<()> {
        let sub = grad_check(|tape, ps| f(tape, ps), &params, eps, tol)?;
        for mut e in sub.entries {
            e.name = format!("{name}/{}", e.name);
            report.entries.push(e);
        }
        Ok(())
    };

    // matmul: random 4x5 . 5x3
    {
        let a = rand_tensor(&mut rng, vec![4, 5]);
        let b = rand_tensor(&mut rng, vec![5, 3]);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        check(
            "matmul",
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, ps| {
                let c = tape.matmul(&ps[0], &ps[1])?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    for (op_name, which) in [("add", 0usize), ("sub", 1), ("mul", 2)] {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        check(
            op_name,
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, ps| {
                let c = match which {
                    0 => tape.add(&ps[0], &ps[1])?,
                    1 => tape.sub(&ps[0], &ps[1])?,
                    _ => tape.mul(&ps[0], &ps[1])?,
                };
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let v = rand_tensor(&mut rng, vec![3]);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        check(
            "add_row_vec",
            vec![("a".into(), a), ("v".into(), v)],
            Box::new(move |tape, ps| {
                let c = tape.add_row_vec(&ps[0], &ps[1])?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![3, 3]);
        let w = rand_tensor(&mut rng, vec![3, 3]);
        check(
            "scale",
            vec![("a".into(), a)],
            Box::new(move |tape, ps| {
                let c = tape.scale(&ps[0], -1.7)?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    for (op_name, which) in [("tanh", 0usize), ("sigmoid", 1), ("softmax_rows", 2)] {
        let a = rand_tensor(&mut rng, vec![3, 3]);
        let w = rand_tensor(&mut rng, vec![3, 3]);
        check(
            op_name,
            vec![("a".into(), a)],
            Box::new(move |tape, ps| {
                let c = match which {
                    0 => tape.tanh(&ps[0])?,
                    1 => tape.sigmoid(&ps[0])?,
                    _ => tape.softmax_rows(&ps[0])?,
                };
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    for axis in [0usize, 1] {
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 3]);
        let shape = if axis == 0 { vec![4, 3] } else { vec![2, 6] };
        let w = rand_tensor(&mut rng, shape);
        check(
            &format!("concat_axis{axis}"),
            vec![("a".into(), a), ("b".into(), b)],
            Box::new(move |tape, ps| {
                let c = tape.concat(&[&ps[0], &ps[1]], axis)?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![2, 4]);
        let w = rand_tensor(&mut rng, vec![4, 2]);
        check(
            "transpose",
            vec![("a".into(), a)],
            Box::new(move |tape, ps| {
                let c = tape.transpose(&ps[0])?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![2, 6]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        check(
            "reshape",
            vec![("a".into(), a)],
            Box::new(move |tape, ps| {
                let c = tape.reshape(&ps[0], vec![3, 4])?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![3, 2]);
        check(
            "sum_all",
            vec![("a".into(), a)],
            Box::new(|tape, ps| tape.sum_all(&ps[0])),
        )?;
    }

    {
        let table = rand_tensor(&mut rng, vec![5, 3]);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        check(
            "rows",
            vec![("table".into(), table)],
            Box::new(move |tape, ps| {
                // repeated index exercises the scatter-add accumulation
                let c = tape.rows(&ps[0], &[0, 2, 1, 2])?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![5, 2]);
        let w = rand_tensor(&mut rng, vec![3, 6]);
        check(
            "unfold",
            vec![("a".into(), a)],
            Box::new(move |tape, ps| {
                let c = tape.unfold(&ps[0], 3)?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let w = rand_tensor(&mut rng, vec![1, 3]);
        check(
            "max_rows",
            vec![("a".into(), a)],
            Box::new(move |tape, ps| {
                let c = tape.max_rows(&ps[0])?;
                weighted_sum(tape, &c, &w)
            }),
        )?;
    }

    {
        let em = rand_tensor(&mut rng, vec![4, 3]);
        let tr = rand_tensor(&mut rng, vec![3, 3]);
        let st = rand_tensor(&mut rng, vec![3]);
        let en = rand_tensor(&mut rng, vec![3]);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        check(
            "crf_nll",
            vec![
                ("emissions".into(), em),
                ("transitions".into(), tr),
                ("start".into(), st),
                ("end".into(), en),
            ],
            Box::new(move |tape, ps| {
                tape.crf_nll(&ps[0], &ps[1], &ps[2], &ps[3], &labels)
            }),
        )?;
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, vec![3, 3]);
        let x = rand_tensor(&mut rng, vec![1, 3]);
        let report = grad_check(
            move |tape, ps| {
                let xq = tape.matmul(&ps[0], &q)?;
                let xt = tape.transpose(&ps[0])?;
                let s = tape.matmul(&xq, &xt)?;
                tape.reshape(&s, vec![1])
            },
            &[("x".into(), x)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn tanh_of_linear_map_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![4, 1]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let report = grad_check(
            |tape, ps| {
                let wx = tape.matmul(&ps[0], &ps[1])?;
                let t = tape.tanh(&wx)?;
                tape.sum_all(&t)
            },
            &[("w".into(), w), ("x".into(), x)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_rule_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![2, 2]);
        let report = grad_check(
            |tape, ps| {
                let t = tape.bad_tanh(&ps[0])?;
                tape.sum_all(&t)
            },
            &[("x".into(), x)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err() > 1e-6);
    }

    #[test]
    fn op_suite_passes_on_ten_seeds() {
        for seed in 0..10 {
            let report = op_gradcheck_suite(seed, 1e-5, 1e-6).unwrap();
            assert!(report.passed(), "seed {seed}:\n{report}");
        }
    }
}
