use alloc::vec::Vec;

use super::{Tape, Var};
use crate::{Error, Result, Scalar, Tensor};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    /// `max |autodiff − fd| / max(|autodiff|, |fd|, 1e-8)` over all entries.
    pub max_rel_error: T,
    /// (parameter, flat element) where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Finite-difference scheme used by [`gradient_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Difference {
    /// `(f(θ+h) − f(θ−h)) / 2h`.
    #[default]
    Central,
    /// Richardson extrapolation of two central differences,
    /// `(4·D(h/2) − D(h)) / 3`; truncation error `O(h⁴)`, which permits a
    /// larger `h` and therefore less cancellation in deep compositions.
    Richardson,
    /// Two levels of Richardson extrapolation over steps `h`, `h/2`, `h/4`;
    /// truncation error `O(h⁶)`.
    Romberg,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences with step `h`.
///
/// `f` records its computation on the given tape using the leaves bound to
/// `theta` and returns a single-element node.
pub fn gradient_check<T, F>(f: F, theta: &[Tensor<T>], h: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    gradient_check_with(f, theta, h, Difference::Central)
}

/// [`gradient_check`] with an explicit difference scheme.
pub fn gradient_check_with<T, F>(f: F, theta: &[Tensor<T>], h: T, scheme: Difference) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "gradient_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = theta.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "gradient_check" });
    }
    let grads = tape.backward(out)?;

    let floor = T::of(1e-8);
    let mut work: Vec<Tensor<T>> = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: (0, 0),
        checked: 0,
    };
    for (pi, p) in theta.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p);
        for ei in 0..p.len() {
            let orig = p.data()[ei];
            let mut central = |step: T| -> Result<T> {
                work[pi].data_mut()[ei] = orig + step;
                let plus = eval(&work)?;
                work[pi].data_mut()[ei] = orig - step;
                let minus = eval(&work)?;
                work[pi].data_mut()[ei] = orig;
                Ok((plus - minus) / (step + step))
            };
            let numeric = match scheme {
                Difference::Central => central(h)?,
                Difference::Richardson => {
                    let coarse = central(h)?;
                    let fine = central(h * T::of(0.5))?;
                    (T::of(4.0) * fine - coarse) / T::of(3.0)
                }
                Difference::Romberg => {
                    let d1 = central(h)?;
                    let d2 = central(h * T::of(0.5))?;
                    let d4 = central(h * T::of(0.25))?;
                    let r1 = (T::of(4.0) * d2 - d1) / T::of(3.0);
                    let r2 = (T::of(4.0) * d4 - d2) / T::of(3.0);
                    (T::of(16.0) * r2 - r1) / T::of(15.0)
                }
            };
            let a = analytic.data()[ei];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, theta: &[Tensor<f64>]) -> f64 {
        gradient_check(f, theta, 1e-6).unwrap().max_rel_error
    }

    /// Random projection to a scalar so every output element matters.
    fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_t(t.value(y).shape(), &mut rng);
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    #[test]
    fn square_and_constant() {
        let sq = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        };
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = sq(&mut tape, &[x]).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 6.0);
        assert!(check(sq, &[Tensor::scalar(3.0)]) < 1e-8);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let z = tape.scale(x, 0.0).unwrap();
        let z = tape.sum(z).unwrap();
        let out = tape.add(z, c).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn richardson_removes_truncation_error() {
        let cube = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[0])?;
            let y = t.mul(y, v[0])?;
            t.sum(y)
        };
        let x = [Tensor::scalar(2.0)];
        let central = gradient_check(cube, &x, 1e-2).unwrap().max_rel_error;
        let rich = gradient_check_with(cube, &x, 1e-2, Difference::Richardson).unwrap().max_rel_error;
        // central error of x³ is exactly h²
        assert!((central - 1e-4 / 12.0).abs() < 1e-9);
        assert!(rich < 1e-12);

        // x⁵ leaves an h⁴ term after one level; two levels remove it.
        let quintic = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[0])?;
            let y = t.mul(y, y)?;
            let y = t.mul(y, v[0])?;
            t.sum(y)
        };
        let x = [Tensor::scalar(1.5)];
        let rich = gradient_check_with(quintic, &x, 0.3, Difference::Richardson).unwrap().max_rel_error;
        let romberg = gradient_check_with(quintic, &x, 0.3, Difference::Romberg).unwrap().max_rel_error;
        assert!(rich > 1e-6);
        assert!(romberg < 1e-12, "{romberg}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let z = t.constant(Tensor::scalar(0.0));
            let r = t.div(v[0], z)?;
            t.sum(r)
        };
        assert!(gradient_check(f, &[Tensor::scalar(1.0)], 1e-6).is_err());
    }

    #[test]
    fn every_differentiable_op_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100u64 {
            let a = rand_t(&[3, 4], &mut rng);
            let b = rand_t(&[4, 2], &mut rng);
            let c = rand_t(&[3, 4], &mut rng);
            let w = rand_t(&[5, 4], &mut rng);
            let bias = rand_t(&[5], &mut rng);
            let gamma = rand_t(&[4], &mut rng);
            let beta = rand_t(&[4], &mut rng);
            let s = rand_t(&[3], &mut rng);
            let pos = Tensor::from_fn([3, 4], |_| rng.random_range(0.5..2.0));

            let cases: [(&str, f64); 16] = [
                ("matmul", check(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, trial) }, &[a.clone(), b.clone()])),
                ("matmul_nt", check(|t, v| { let y = t.matmul_nt(v[0], v[1])?; project(t, y, trial) }, &[a.clone(), c.clone()])),
                ("linear", check(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; project(t, y, trial) }, &[a.clone(), w.clone(), bias.clone()])),
                ("add_sub_mul", check(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    let y = t.sub(y, v[1])?;
                    let y = t.mul(y, v[1])?;
                    project(t, y, trial)
                }, &[a.clone(), c.clone()])),
                ("div", check(|t, v| { let y = t.div(v[0], v[1])?; project(t, y, trial) }, &[a.clone(), pos.clone()])),
                ("relu", check(|t, v| { let y = t.relu(v[0])?; project(t, y, trial) }, &[a.clone()])),
                ("gelu", check(|t, v| { let y = t.activation(v[0], Activation::Gelu)?; project(t, y, trial) }, &[a.clone()])),
                ("softmax", check(|t, v| { let y = t.softmax(v[0], 1)?; project(t, y, trial) }, &[a.clone()])),
                ("layer_norm", check(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?; project(t, y, trial) }, &[a.clone(), gamma.clone(), beta.clone()])),
                ("l2_norm", check(|t, v| t.l2_norm(v[0]), &[a.clone()])),
                ("normalize_rows", check(|t, v| { let (y, _) = t.normalize_rows(v[0], 1e-12)?; project(t, y, trial) }, &[a.clone()])),
                ("reshape_transpose", check(|t, v| {
                    let y = t.transpose(v[0])?;
                    let y = t.reshape(y, &[2, 6])?;
                    project(t, y, trial)
                }, &[a.clone()])),
                ("slices_and_concat", check(|t, v| {
                    let l = t.slice(v[0], 0, 3, 0, 2)?;
                    let r = t.slice(v[0], 1, 2, 2, 2)?;
                    let top = t.slice(l, 0, 2, 0, 2)?;
                    let cc = t.concat_cols(&[top, r])?;
                    let cr = t.concat_rows(&[top, l])?;
                    let a = project(t, cr, trial)?;
                    let b = project(t, cc, trial + 1)?;
                    t.add(a, b)
                }, &[a.clone()])),
                ("gather_scatter", check(|t, v| {
                    let g = t.gather_rows(v[0], &[2, 0, 2])?;
                    let e = t.gather_elems(v[0], &[1, 5, 5, 11])?;
                    let sc = t.scatter_rows(g, &[1, 1, 3], 4)?;
                    let sr = t.sum_rows(sc)?;
                    let a = project(t, sr, trial)?;
                    let b = project(t, e, trial + 1)?;
                    t.add(a, b)
                }, &[a.clone()])),
                ("scale_rows_mean_groups", check(|t, v| {
                    let y = t.scale_rows(v[0], v[1])?;
                    let y = t.concat_rows(&[y, v[0]])?;
                    let y = t.mean_groups(y, 2)?;
                    let m = t.mean(y)?;
                    let p = project(t, y, trial)?;
                    t.add(m, p)
                }, &[a.clone(), s.clone()])),
                ("normal_cdf_cross_entropy", check(|t, v| {
                    let y = t.normal_cdf(v[0])?;
                    let l = t.cross_entropy(v[0], &[1, 3, 0])?;
                    let p = project(t, y, trial)?;
                    t.add(l, p)
                }, &[a.clone()])),
            ];
            for (name, err) in cases {
                assert!(err < 1e-4, "{name}: relative error {err} on trial {trial}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&[3, 3], &mut rng);
        let build = |t: &mut Tape<f64>, x: Var, which: u8| -> Var {
            let s = t.softmax(x, 1).unwrap();
            let l1 = project(t, s, 1).unwrap();
            let g = t.gelu(x).unwrap();
            let l2 = project(t, g, 2).unwrap();
            match which {
                1 => l1,
                2 => l2,
                _ => t.add(l1, l2).unwrap(),
            }
        };
        let grad = |which| {
            let mut t = Tape::new();
            let x = t.param(a.clone());
            let l = build(&mut t, x, which);
            t.backward(l).unwrap().get(x).unwrap().clone()
        };
        let (g1, g2, g12) = (grad(1), grad(2), grad(3));
        let sum = crate::tensor::add(&g1, &g2).unwrap();
        assert!(sum.max_abs_diff(&g12) < 1e-14);
    }
}
