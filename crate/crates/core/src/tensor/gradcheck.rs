//! Central finite-difference oracle for the tape's analytic gradients.
//!
//! Error metric: `|analytic − numeric| / max(1, |numeric|)`, maximised over
//! the checked coordinates.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Scalar-valued function of several tensors, expressed on a graph.
pub trait GraphFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> GraphFn for F {}

fn relative(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn evaluate(f: &impl GraphFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Graph(format!("checked function must be scalar, got {}", v.shape())));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok(y)
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_grads(f: &impl GraphFn, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Checks every coordinate of a single input.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let wrapped = |g: &mut Graph<f64>, v: &[Var]| f(g, v[0]);
    Ok(check_coordinates(&wrapped, std::slice::from_ref(x), h, None, &mut rand::rng())?[0])
}

/// Per-input maximum relative error. With `sample = Some(k)`, at most `k`
/// random coordinates of each input are perturbed; otherwise all of them.
pub fn check_coordinates<R: Rng + ?Sized>(
    f: &impl GraphFn,
    inputs: &[Tensor<f64>],
    h: f64,
    sample: Option<usize>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let analytic = analytic_grads(f, inputs)?;
    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match sample {
            Some(k) if k < t.numel() => (0..k).map(|_| rng.random_range(0..t.numel())).collect(),
            _ => (0..t.numel()).collect(),
        };
        let mut worst = 0.0f64;
        for j in coords {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let down = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig;
            worst = worst.max(relative(analytic[i][j], (up - down) / (2.0 * h)));
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Directional check along a random unit-scale direction spanning all
/// inputs at once: compares `∇f · v` against `(f(x + hv) − f(x − hv)) / 2h`.
/// Two extra evaluations regardless of input size.
pub fn check_direction<R: Rng + ?Sized>(
    f: &impl GraphFn,
    inputs: &[Tensor<f64>],
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let analytic = analytic_grads(f, inputs)?;
    let dirs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let projected: f64 = analytic
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |sign: f64| -> Result<f64> {
        let moved: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let mut m = t.clone();
                m.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += sign * h * dv);
                m
            })
            .collect();
        evaluate(f, &moved)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
    Ok(relative(projected, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    #[test]
    fn sum_of_squares_is_tight() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(2, 3, 2, 2), -2.0, 2.0, &mut rng);
        let err = finite_diff_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn plain_sum_is_exact() {
        let x = Tensor::from_f64s(Shape::new(1, 1, 1, 3), &[0.25, -1.5, 3.0]).unwrap();
        let err = finite_diff_check(|g, x| g.sum(x), &x, 1e-3).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_f64s(Shape::scalar(), &[0.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let p = g.powf(x, -1.0)?;
                g.sum(p)
            },
            &x,
            1e-3,
        );
        assert!(r.is_err());
    }
}
