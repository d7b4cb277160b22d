use crate::error::{Error, Result};
use crate::layers::{Linear, Session};
use crate::params::{ParamId, ParamInit};
use crate::tensor::Var;

/// `z(t, u, ·) = log_softmax(W_o · tanh(W_e h_t + W_p g_u + b) + b_o)`, blank at index 0.
#[derive(Debug, Clone)]
pub struct JointNet {
    encoder_proj: Linear,
    prediction_proj: Linear,
    bias: ParamId,
    output: Linear,
    dim: usize,
    vocab: usize,
}

impl JointNet {
    pub fn new(init: &mut ParamInit<'_>, enc_dim: usize, pred_dim: usize, dim: usize, vocab: usize) -> Result<Self> {
        init.scoped("joint", |init| {
            Ok(Self {
                encoder_proj: Linear::new(init, "encoder_proj", enc_dim, dim, false)?,
                prediction_proj: Linear::new(init, "prediction_proj", pred_dim, dim, false)?,
                bias: init.constant("bias", &[dim], 0.0)?,
                output: Linear::new(init, "output", dim, vocab + 1, true)?,
                dim,
                vocab,
            })
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_params(&self) -> usize {
        self.encoder_proj.num_params() + self.prediction_proj.num_params() + self.dim + self.output.num_params()
    }

    /// Parameter ids of every joint weight (for tests that pin them).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.encoder_proj.weight(), self.prediction_proj.weight(), self.bias];
        ids.push(self.output.weight());
        ids.extend(self.output.bias());
        ids
    }

    /// `[T', dim]` encoder contribution.
    pub fn project_encoder(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        self.encoder_proj.forward(s, h)
    }

    /// `[U + 1, dim]` prediction contribution, including the combine bias.
    pub fn project_prediction(&self, s: &mut Session<'_>, g: Var) -> Result<Var> {
        let p = self.prediction_proj.forward(s, g)?;
        let b = s.param(self.bias);
        s.graph.add(p, b)
    }

    /// Combines projected rows into log-probabilities `[T', U + 1, V + 1]`.
    pub fn combine(&self, s: &mut Session<'_>, enc: Var, pred: Var) -> Result<Var> {
        let (es, ps) = (s.graph.shape(enc).to_vec(), s.graph.shape(pred).to_vec());
        if es.len() != 2 || ps.len() != 2 || es[1] != self.dim || ps[1] != self.dim {
            return Err(Error::shape("joint_forward", &es, &ps));
        }
        let (t, u1) = (es[0], ps[0]);
        let e3 = s.graph.reshape(enc, &[t, 1, self.dim])?;
        let p3 = s.graph.reshape(pred, &[1, u1, self.dim])?;
        let sum = s.graph.add(e3, p3)?;
        let act = s.graph.tanh(sum);
        let flat = s.graph.reshape(act, &[t * u1, self.dim])?;
        let logits = self.output.forward(s, flat)?;
        let logp = s.graph.log_softmax(logits);
        s.graph.reshape(logp, &[t, u1, self.vocab + 1])
    }

    /// Full lattice from encoder states `h: [T', enc_dim]` and prediction states `g: [U + 1, pred_dim]`.
    pub fn forward(&self, s: &mut Session<'_>, h: Var, g: Var) -> Result<Var> {
        let enc = self.project_encoder(s, h)?;
        let pred = self.project_prediction(s, g)?;
        self.combine(s, enc, pred)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::transducer::TransducerLattice;

    fn joint() -> (ParamStore, JointNet) {
        let mut store = ParamStore::new();
        let j = JointNet::new(&mut ParamInit::new(&mut store, 2), 4, 3, 5, 3).unwrap();
        (store, j)
    }

    fn lattice(store: &ParamStore, j: &JointNet, t: usize, u1: usize) -> Tensor {
        let mut s = Session::new(store, false);
        let h = s.input(Tensor::matrix(t, 4, (0..t * 4).map(|i| (i as f64).sin()).collect()).unwrap());
        let g = s.input(Tensor::matrix(u1, 3, (0..u1 * 3).map(|i| (i as f64).cos()).collect()).unwrap());
        let z = j.forward(&mut s, h, g).unwrap();
        s.value(z).clone()
    }

    #[test]
    fn nodes_are_normalized() {
        let (store, j) = joint();
        let z = lattice(&store, &j, 3, 4);
        assert_eq!(z.shape(), &[3, 4, 4]);
        TransducerLattice::new(z).unwrap().check_normalized(1e-6).unwrap();
    }

    #[test]
    fn zero_weights_uniform() {
        let (mut store, j) = joint();
        for id in j.param_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let z = lattice(&store, &j, 2, 2);
        for v in z.data() {
            assert!((v - (0.25f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node_shape() {
        let (store, j) = joint();
        assert_eq!(lattice(&store, &j, 1, 1).shape(), &[1, 1, 4]);
    }

    #[test]
    fn shape_mismatch() {
        let (store, j) = joint();
        let mut s = Session::new(&store, false);
        let h = s.input(Tensor::zeros(vec![2, 5]));
        let g = s.input(Tensor::zeros(vec![2, 3]));
        assert!(j.forward(&mut s, h, g).is_err());
    }
}
