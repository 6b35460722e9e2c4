use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function expressed on the autodiff graph, evaluable at
/// any precision.
///
/// [`grad_check`] differentiates it with reverse mode in `f32` and compares
/// against central differences evaluated in `f64`.
pub trait ScalarFn {
    fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Agreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Below this magnitude both gradients are treated as zero.
const ZERO_GRAD: f64 = 1e-9;

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ZERO_GRAD {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn scalar_out<T: Element>(g: &Graph<T>, out: Var) -> Result<T> {
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences `(f(x+h) − f(x−h)) / 2h` on every coordinate.
pub fn grad_check<F: ScalarFn>(f: &F, x: &Tensor, h: f32) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates. Returns the
/// worst relative error `|a − n| / max(|a|, |n|)`.
pub fn grad_check_coords<F: ScalarFn>(
    f: &F,
    x: &Tensor,
    h: f32,
    coords: &[usize],
) -> Result<GradCheckReport> {
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Contract(format!(
            "finite-difference step must lie in [1e-4, 1e-2], got {h}"
        )));
    }
    let mut g = Graph::<f32>::with_precision();
    let xv = g.param(Tensor::from_parts(x.shape().to_vec(), x.data().to_vec()));
    let out = f.eval(&mut g, xv)?;
    scalar_out(&g, out)?;
    g.backward(out)?;
    let grad = g
        .grad(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let base: Tensor<f64> = x.cast();
    let eval64 = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::with_precision();
        let v = g.constant(t);
        let out = f.eval(&mut g, v)?;
        scalar_out(&g, out)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: Vec::with_capacity(coords.len()),
    };
    let h = h as f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Index {
                what: "grad_check coordinate",
                index: i,
                bound: x.numel(),
            });
        }
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (eval64(plus)? - eval64(minus)?) / (2.0 * h);
        let analytic = grad[i] as f64;
        let rel = rel_error(analytic, numeric);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.coords.push(CoordCheck {
            index: i,
            analytic,
            numeric,
            rel_error: rel,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Sum;
    impl ScalarFn for Sum {
        fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            Ok(g.sum(x))
        }
    }

    struct Dot;
    impl ScalarFn for Dot {
        fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        }
    }

    struct Doubled;
    impl ScalarFn for Doubled {
        fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            Ok(g.scale(x, 2.0))
        }
    }

    #[test]
    fn sum_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[10], 0.0, 1.0, &mut rng);
        let r = grad_check(&Sum, &x, 1e-2).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
        assert!(r.coords.iter().all(|c| c.analytic == 1.0));
    }

    #[test]
    fn dot_product_gradient_is_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[16], 0.0, 1.0, &mut rng);
        let r = grad_check(&Dot, &x, 1e-2).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
        for c in &r.coords {
            assert_eq!(c.analytic, 2.0 * x.data()[c.index] as f64);
        }
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::ones(&[3]);
        assert!(matches!(grad_check(&Doubled, &x, 1e-3), Err(Error::Contract(_))));
        assert!(matches!(grad_check(&Sum, &x, 1e-1), Err(Error::Contract(_))));
        assert!(matches!(grad_check(&Sum, &x, 1e-5), Err(Error::Contract(_))));
        assert!(matches!(
            grad_check_coords(&Sum, &x, 1e-3, &[3]),
            Err(Error::Index { .. })
        ));
    }
}
