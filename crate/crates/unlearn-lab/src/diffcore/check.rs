//! Gradient verification by central finite differences.

use super::{DiffError, Graph, NodeId, Tensor};

/// Compare an analytic gradient against central finite differences of `f`
/// at `point`, returning the largest relative error over coordinates:
/// `|analytic − (f(x+εe) − f(x−εe)) / 2ε| / max(1, |analytic|)`.
///
/// `f` must be a deterministic scalar function of its argument; any frozen
/// randomness has to be captured by the closure, not redrawn per call.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64, DiffError>
where
    F: FnMut(&[f64]) -> Result<f64, DiffError>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(DiffError::BadStep { eps });
    }
    if analytic.len() != point.len() {
        return Err(DiffError::LengthMismatch { grad: analytic.len(), point: point.len() });
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let hi = f(&probe)?;
        probe[i] = point[i] - eps;
        let lo = f(&probe)?;
        probe[i] = point[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(DiffError::NonFiniteProbe { index: i });
        }
        let numeric = (hi - lo) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Convenience wrapper for graph-built losses: treat `point` as one parameter
/// tensor of the given shape, build the scalar output with `build`, take the
/// analytic gradient from [`Graph::backward`], and report the worst relative
/// error against central differences.
pub fn check_scalar_graph<B>(
    shape: &[usize],
    point: &[f64],
    eps: f64,
    build: B,
) -> Result<f64, DiffError>
where
    B: Fn(&mut Graph, NodeId) -> Result<NodeId, DiffError>,
{
    let eval = |x: &[f64]| -> Result<(f64, Option<Vec<f64>>), DiffError> {
        let mut g = Graph::new();
        let p = g.parameter(Tensor::new(shape, x.to_vec())?);
        let out = build(&mut g, p)?;
        let value = g.value(out).item();
        Ok((value, None))
    };

    // Analytic gradient at the point itself.
    let mut g = Graph::new();
    let p = g.parameter(Tensor::new(shape, point.to_vec())?);
    let out = build(&mut g, p)?;
    let grads = g.backward(out)?;
    let analytic = match grads.get(p) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()], // output does not depend on the input
    };

    finite_difference_check(|x| eval(x).map(|(v, _)| v), point, &analytic, eps)
}

#[cfg(test)]
mod tests {
    use super::super::CeTarget;
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-5;

    #[test]
    fn quadratic_matches_exactly_at_machine_scale() {
        // f(x) = Σ x², analytic 2x; central differences are exact for
        // quadratics up to roundoff.
        let point = [0.5, -1.25, 2.0];
        let worst = check_scalar_graph(&[3], &point, 1e-4, |g, x| {
            let sq = g.square(x)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(worst < 1e-9, "relative error {worst}");
    }

    #[test]
    fn mismatched_gradient_is_reported() {
        let worst = finite_difference_check(
            |x| Ok(x[0] * x[0]),
            &[3.0],
            &[0.0], // wrong on purpose: true gradient is 6
            1e-5,
        )
        .unwrap();
        assert!(worst > 1.0);
    }

    #[test]
    fn bad_step_and_length_are_errors() {
        assert!(finite_difference_check(|_| Ok(0.0), &[1.0], &[0.0], 0.0).is_err());
        assert!(finite_difference_check(|_| Ok(0.0), &[1.0, 2.0], &[0.0], 1e-5).is_err());
    }

    /// Every differentiable op, checked on random small instances. Values are
    /// drawn from [−2, 2]; inputs are nudged away from the relu kink and the
    /// row-norm origin, where finite differences are meaningless.
    #[test]
    fn every_op_passes_random_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0d1f);
        for round in 0..100 {
            let rows = rng.gen_range(1..4usize);
            let cols = rng.gen_range(2..5usize);
            let n = rows * cols;
            let draw = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };
            let point = draw(&mut rng, n);
            let other = Tensor::matrix(rows, cols, draw(&mut rng, n)).unwrap();
            let rhs = Tensor::matrix(cols, rows, draw(&mut rng, cols * rows)).unwrap();
            let bias = Tensor::vector(draw(&mut rng, cols)).unwrap();

            let check = |name: &str,
                         pt: &[f64],
                         build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId, DiffError>| {
                let worst = check_scalar_graph(&[rows, cols], pt, EPS, build).unwrap();
                assert!(worst < TOL, "round {round}: {name} rel error {worst}");
            };

            check("matmul_lhs", &point, &{
                let rhs = rhs.clone();
                move |g: &mut Graph, x: NodeId| {
                    let r = g.constant(rhs.clone());
                    let mm = g.matmul(x, r)?;
                    g.sum(mm)
                }
            });
            // Right matmul factor has shape [cols × rows], so it skips the
            // fixed-shape helper.
            {
                let lhs = other.clone();
                let rhs_point = draw(&mut rng, cols * rows);
                let worst = check_scalar_graph(&[cols, rows], &rhs_point, EPS, move |g, x| {
                    let l = g.constant(lhs.clone());
                    let mm = g.matmul(l, x)?;
                    let sq = g.square(mm)?;
                    g.sum(sq)
                })
                .unwrap();
                assert!(worst < TOL, "round {round}: matmul_rhs rel error {worst}");
            }
            check("add_mul_sub", &point, &{
                let other = other.clone();
                move |g: &mut Graph, x: NodeId| {
                    let o = g.constant(other.clone());
                    let a = g.add(x, o)?;
                    let m = g.mul_elementwise(a, x)?;
                    let s = g.sub(m, x)?;
                    g.sum(s)
                }
            });
            check("bias_broadcast", &point, &{
                let bias = bias.clone();
                move |g: &mut Graph, x: NodeId| {
                    let b = g.constant(bias.clone());
                    let a = g.add(x, b)?;
                    let sq = g.square(a)?;
                    g.mean(sq)
                }
            });
            check("scalar_mul_tanh", &point, &|g: &mut Graph, x: NodeId| {
                let s = g.scalar_mul(x, -1.7)?;
                let t = g.tanh(s)?;
                g.sum(t)
            });
            check("exp_mean", &point, &|g: &mut Graph, x: NodeId| {
                let e = g.exp(x)?;
                g.mean(e)
            });

            // log needs positive inputs.
            let positive: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.5)).collect();
            check("log_sum", &positive, &|g: &mut Graph, x: NodeId| {
                let l = g.log(x)?;
                g.sum(l)
            });

            // relu: keep inputs off the kink at 0.
            let off_kink: Vec<f64> = point
                .iter()
                .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
                .collect();
            check("relu_sum", &off_kink, &|g: &mut Graph, x: NodeId| {
                let r = g.relu(x)?;
                g.sum(r)
            });

            // l2_norm: keep every row away from the origin.
            let spread: Vec<f64> = point
                .iter()
                .map(|v| if v.abs() < 0.2 { v + 0.5 } else { *v })
                .collect();
            check("l2_norm_mean", &spread, &|g: &mut Graph, x: NodeId| {
                let norms = g.l2_norm(x)?;
                g.mean(norms)
            });

            check("concat_square", &point, &{
                let other = other.clone();
                move |g: &mut Graph, x: NodeId| {
                    let o = g.constant(other.clone());
                    let cat = g.concat(x, o)?;
                    let sq = g.square(cat)?;
                    g.sum(sq)
                }
            });

            let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
            check("softmax_ce_hard", &point, &{
                let labels = labels.clone();
                move |g: &mut Graph, x: NodeId| {
                    g.softmax_logsumexp_ce(x, CeTarget::Labels(labels.clone()))
                }
            });

            // Soft targets: random normalized rows.
            let mut qdata = vec![0.0; n];
            for r in 0..rows {
                let mut s = 0.0;
                for j in 0..cols {
                    let v: f64 = rng.gen_range(0.05..1.0);
                    qdata[r * cols + j] = v;
                    s += v;
                }
                for j in 0..cols {
                    qdata[r * cols + j] /= s;
                }
            }
            let q = Tensor::matrix(rows, cols, qdata).unwrap();
            check("softmax_ce_soft", &point, &{
                move |g: &mut Graph, x: NodeId| {
                    g.softmax_logsumexp_ce(x, CeTarget::Soft(q.clone()))
                }
            });
        }
    }
}
