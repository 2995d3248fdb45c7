use super::{NnError, ParamStore, Tensor};

/// Adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; `grads[i]` belongs to tensor `i`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), NnError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                left: vec![store.len()],
                right: vec![grads.len()],
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            if g.len() != store.at(i).len() {
                return Err(NnError::ShapeMismatch {
                    op: "adam_step",
                    left: store.at(i).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.values_mut(i);
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ParamOwner};

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new(ParamOwner::Dynamics);
        s.insert("p", Tensor::row(&[1.2, -0.5, 0.3])).unwrap();
        s
    }

    fn loss_and_grad(store: &ParamStore) -> (f64, Vec<Tensor>) {
        // 0.5 * Σ c_i (p_i - t_i)^2
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let t = g.constant(Tensor::row(&[0.5, 0.25, -1.0]));
        let c = g.constant(Tensor::row(&[1.0, 4.0, 0.5]));
        let d = g.sub(vars[0], t).unwrap();
        let sq = g.square(d);
        let w = g.mul(sq, c).unwrap();
        let s = g.sum(w);
        let l = g.scale(s, 0.5);
        let mut grads = g.backward(l).unwrap();
        (g.value(l).item(), vec![grads.take(vars[0])])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = quadratic_store();
        let before = s.clone();
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::zeros(vec![1, 3])], 0.1).unwrap();
        assert_eq!(s, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn convex_quadratic_converges() {
        let mut s = quadratic_store();
        let mut adam = Adam::new(&s);
        let (initial, _) = loss_and_grad(&s);
        let mut losses = vec![initial];
        for _ in 0..200 {
            let (_, grads) = loss_and_grad(&s);
            adam.step(&mut s, &grads, 0.01).unwrap();
            losses.push(loss_and_grad(&s).0);
        }
        let last = *losses.last().unwrap();
        assert!(last < losses[0]);
        assert!(last < 0.01 * initial, "{last} vs {initial}");
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut s = quadratic_store();
            let mut adam = Adam::new(&s);
            for _ in 0..50 {
                let (_, grads) = loss_and_grad(&s);
                adam.step(&mut s, &grads, 0.05).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
