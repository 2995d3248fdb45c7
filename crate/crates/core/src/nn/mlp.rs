use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::gemm;
use super::{Graph, NnError, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Layer sizes of a dense network. Hidden layers use `activation`; the
/// output layer uses `output_activation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "identity")]
    pub output_activation: Activation,
}

fn identity() -> Activation {
    Activation::Identity
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
            output_activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let dims = self.dims();
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::ShapeMismatch {
                op: "mlp_spec",
                left: dims,
                right: vec![],
            });
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    /// Adds freshly initialized layers under `prefix` and returns a handle.
    ///
    /// Weights are uniform in ±1/√fan_in, biases zero.
    pub fn init_into<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Mlp, NnError> {
        self.validate()?;
        let dims = self.dims();
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            store.insert(format!("{prefix}layer{i}.weight"), Tensor::matrix(fan_in, fan_out, data)?)?;
            store.insert(format!("{prefix}layer{i}.bias"), Tensor::zeros(vec![1, fan_out]))?;
        }
        Mlp::attach(self.clone(), store, prefix)
    }
}

/// A network spec resolved against the tensor positions of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Resolves the layers stored under `prefix`, checking their shapes.
    pub fn attach(spec: MlpSpec, store: &ParamStore, prefix: &str) -> Result<Self, NnError> {
        spec.validate()?;
        let dims = spec.dims();
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let wi = store.index_of(&format!("{prefix}layer{i}.weight"))?;
            let bi = store.index_of(&format!("{prefix}layer{i}.bias"))?;
            let (wt, bt) = (store.at(wi), store.at(bi));
            if wt.rows() != w[0] || wt.cols() != w[1] || bt.rows() != 1 || bt.cols() != w[1] {
                return Err(NnError::ShapeMismatch {
                    op: "mlp_attach",
                    left: vec![w[0], w[1]],
                    right: vec![wt.rows(), wt.cols()],
                });
            }
            layers.push((wi, bi));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Tape-free forward pass over a batch of rows.
    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor, NnError> {
        if input.cols() != self.spec.input_dim {
            return Err(NnError::ShapeMismatch {
                op: "forward_mlp",
                left: vec![input.rows(), input.cols()],
                right: vec![self.spec.input_dim],
            });
        }
        let rows = input.rows();
        let mut x = input.data().to_vec();
        let last = self.layers.len() - 1;
        for (li, &(wi, bi)) in self.layers.iter().enumerate() {
            let (w, b) = (store.at(wi), store.at(bi));
            let (k, n) = (w.rows(), w.cols());
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(b.data());
            }
            gemm(rows, k, n, &x, false, w.data(), false, &mut out, true);
            let act = if li == last {
                self.spec.output_activation
            } else {
                self.spec.activation
            };
            if act != super::Activation::Identity {
                for v in &mut out {
                    *v = act.apply(*v);
                }
            }
            x = out;
        }
        Tensor::matrix(rows, self.spec.output_dim, x)
    }

    /// Forward pass recorded on `g`, using leaves previously bound from the
    /// same store (`vars[i]` is tensor `i` of the store).
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var, NnError> {
        let x0 = g.value(input);
        if x0.cols() != self.spec.input_dim {
            return Err(NnError::ShapeMismatch {
                op: "forward_mlp",
                left: vec![x0.rows(), x0.cols()],
                right: vec![self.spec.input_dim],
            });
        }
        let last = self.layers.len() - 1;
        let mut x = input;
        for (li, &(wi, bi)) in self.layers.iter().enumerate() {
            let z = g.matmul(x, vars[wi])?;
            let z = g.add_bias(z, vars[bi])?;
            let act = if li == last {
                self.spec.output_activation
            } else {
                self.spec.activation
            };
            x = match act {
                Activation::Tanh => g.tanh(z),
                Activation::Identity => z,
            };
        }
        Ok(x)
    }
}

/// Runs a network described by `spec` whose layers live at the root of
/// `params`, recording the pass on a fresh graph.
pub fn forward_mlp(spec: &MlpSpec, params: &ParamStore, input: &Tensor) -> Result<(Graph, Var), NnError> {
    let mlp = Mlp::attach(spec.clone(), params, "")?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(input.clone());
    let out = mlp.forward_graph(&mut g, &vars, x)?;
    Ok((g, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamOwner;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> (MlpSpec, ParamStore, Mlp) {
        let spec = MlpSpec::new(3, vec![5, 4], 2);
        let mut store = ParamStore::new(ParamOwner::Dynamics);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = spec.init_into(&mut store, "", &mut rng).unwrap();
        // non-zero biases so the oracle covers them
        for i in 0..store.len() {
            if store.names()[i].ends_with("bias") {
                for v in store.values_mut(i) {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        (spec, store, mlp)
    }

    fn oracle_forward(spec: &MlpSpec, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n_layers = spec.hidden_dims.len() + 1;
        for l in 0..n_layers {
            let w = store.get(&format!("layer{l}.weight")).unwrap();
            let b = store.get(&format!("layer{l}.bias")).unwrap();
            let mut out = vec![0.0; w.cols()];
            for j in 0..w.cols() {
                let mut s = b.data()[j];
                for i in 0..w.rows() {
                    s += h[i] * w.get(i, j);
                }
                out[j] = if l + 1 < n_layers { s.tanh() } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(4, vec![8], 3);
        let mut store = ParamStore::new(ParamOwner::Dynamics);
        let mlp = spec
            .init_into(&mut store, "", &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for i in 0..store.len() {
            store.values_mut(i).fill(0.0);
        }
        let x = Tensor::matrix(2, 4, vec![1.0, -2.0, 3.0, 0.5, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let y = mlp.forward(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(3, vec![], 3);
        let mut store = ParamStore::new(ParamOwner::Dynamics);
        store
            .insert(
                "layer0.weight",
                Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        store.insert("layer0.bias", Tensor::zeros(vec![1, 3])).unwrap();
        let x = Tensor::row(&[0.3, -7.0, 2.5]);
        let (g, out) = forward_mlp(&spec, &store, &x).unwrap();
        assert_eq!(g.value(out).data(), x.data());
    }

    #[test]
    fn matches_loop_oracle_and_graph_path() {
        let (spec, store, mlp) = random_net(7);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..3).map(|c| ((r * 3 + c) as f64 * 0.37).sin()).collect())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let fast = mlp.forward(&store, &x).unwrap();
        let (g, out) = forward_mlp(&spec, &store, &x).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let want = oracle_forward(&spec, &store, row);
            for c in 0..2 {
                assert!((fast.get(r, c) - want[c]).abs() < 1e-12);
                assert!((g.value(out).get(r, c) - want[c]).abs() < 1e-12);
            }
        }
        // determinism
        assert_eq!(mlp.forward(&store, &x).unwrap(), fast);
    }

    #[test]
    fn input_shape_mismatch_is_error() {
        let (_, store, mlp) = random_net(1);
        assert!(mlp.forward(&store, &Tensor::row(&[1.0, 2.0])).is_err());
    }
}
