//! Central-difference gradient checks for the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gaussian_nll, reparam_sample, soft_clamp_log_var, Graph, MlpSpec, NnError, ParamOwner, ParamStore, Tensor, Var};

/// Largest elementwise relative error between the tape gradient and a central
/// difference of `f` with step `eps`, over every input element.
///
/// The relative error is `|a − n| / max(|a|, |n|, floor)`; `floor` keeps
/// vanishing gradients from dividing by zero.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F, eps: f64, floor: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NnError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + eps;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - eps;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    Ok(worst)
}

type Case = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NnError>>;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `Σ op(x) ⊙ w` for a fixed random `w`, so every output element carries a
/// distinct weight into the scalar loss.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var, NnError> {
    let c = g.constant(w.clone());
    let p = g.mul(out, c)?;
    Ok(g.sum(p))
}

/// Checks every tape operation and the composite losses built from them.
/// Returns the worst relative error per case.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, f64)>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w34 = random(3, 4, &mut rng);
    let w32 = random(3, 2, &mut rng);
    let w36 = random(3, 6, &mut rng);
    let w24 = random(2, 4, &mut rng);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    let m = random(4, 2, &mut rng);
    let bias = random(1, 4, &mut rng);
    let c = random(3, 2, &mut rng);

    let mut cases: Vec<(&'static str, Vec<Tensor>, Case)> = Vec::new();
    let unary = |op: fn(&mut Graph, Var) -> Var, w: Tensor| -> Case {
        Box::new(move |g, v| {
            let o = op(g, v[0]);
            weighted(g, o, &w)
        })
    };
    cases.push(("matmul", vec![a.clone(), m.clone()], {
        let w = w32.clone();
        Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted(g, o, &w)
        })
    }));
    cases.push(("add_bias", vec![a.clone(), bias.clone()], {
        let w = w34.clone();
        Box::new(move |g, v| {
            let o = g.add_bias(v[0], v[1])?;
            weighted(g, o, &w)
        })
    }));
    for (name, op) in [
        ("add", Graph::add as fn(&mut Graph, Var, Var) -> Result<Var, NnError>),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ] {
        let w = w34.clone();
        cases.push((
            name,
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let o = op(g, v[0], v[1])?;
                weighted(g, o, &w)
            }),
        ));
    }
    cases.push(("scale", vec![a.clone()], unary(|g, x| g.scale(x, -1.7), w34.clone())));
    cases.push(("add_scalar", vec![a.clone()], unary(|g, x| g.add_scalar(x, 0.3), w34.clone())));
    cases.push(("tanh", vec![a.clone()], unary(Graph::tanh, w34.clone())));
    cases.push(("exp", vec![a.clone()], unary(Graph::exp, w34.clone())));
    cases.push(("softplus", vec![a.clone()], unary(Graph::softplus, w34.clone())));
    cases.push(("square", vec![a.clone()], unary(Graph::square, w34.clone())));
    cases.push((
        "sum",
        vec![a.clone()],
        Box::new(|g, v| {
            let t = g.tanh(v[0]);
            Ok(g.sum(t))
        }),
    ));
    cases.push((
        "mean",
        vec![a.clone()],
        Box::new(|g, v| {
            let t = g.square(v[0]);
            Ok(g.mean(t))
        }),
    ));
    cases.push(("concat_cols", vec![a.clone(), c.clone()], {
        let w = w36.clone();
        Box::new(move |g, v| {
            let o = g.concat_cols(&[v[0], v[1]])?;
            weighted(g, o, &w)
        })
    }));
    cases.push(("slice_cols", vec![a.clone()], {
        let w = w32.clone();
        Box::new(move |g, v| {
            let o = g.slice_cols(v[0], 1, 3)?;
            weighted(g, o, &w)
        })
    }));
    cases.push(("gather_rows", vec![a.clone()], {
        let w = random(4, 4, &mut rng);
        Box::new(move |g, v| {
            let o = g.gather_rows(v[0], &[2, 0, 2, 1])?;
            weighted(g, o, &w)
        })
    }));
    cases.push((
        "gaussian_nll",
        vec![a.clone(), random(3, 4, &mut rng), b.clone()],
        Box::new(|g, v| gaussian_nll(g, v[0], v[1], v[2])),
    ));
    cases.push(("soft_clamp_log_var", vec![Tensor::matrix(1, 4, vec![-12.0, -3.0, 2.5, 6.0])?], {
        let w = random(1, 4, &mut rng);
        Box::new(move |g, v| {
            let o = soft_clamp_log_var(g, v[0]);
            weighted(g, o, &w)
        })
    }));
    cases.push(("reparam_sample", vec![a.clone(), b.clone()], {
        let (w, noise) = (w34.clone(), random(3, 4, &mut rng));
        Box::new(move |g, v| {
            let n = g.constant(noise.clone());
            let o = reparam_sample(g, v[0], v[1], n)?;
            weighted(g, o, &w)
        })
    }));
    let mut store = ParamStore::new(ParamOwner::Dynamics);
    let mlp = MlpSpec::new(4, vec![5], 4).init_into(&mut store, "", &mut rng)?;
    let mut mlp_inputs = vec![random(2, 4, &mut rng)];
    for (_, t) in store.iter() {
        // Non-zero biases so their gradients are exercised away from the origin.
        mlp_inputs.push(random(t.rows(), t.cols(), &mut rng));
    }
    cases.push(("mlp", mlp_inputs, {
        let w = w24.clone();
        Box::new(move |g, v| {
            let o = mlp.forward_graph(g, &v[1..], v[0])?;
            weighted(g, o, &w)
        })
    }));

    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, max_relative_error(&inputs, f, 1e-6, 1e-6)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::row(&[0.5, -1.0]);
        // exp evaluated through a constant copy has zero tape gradient.
        let err = max_relative_error(
            &[x],
            |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                let e = g.exp(c);
                let s = g.add(e, v[0])?;
                Ok(g.sum(s))
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn every_op_matches_central_differences() {
        for (name, err) in check_all_ops(0).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
