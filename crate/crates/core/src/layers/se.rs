use std::rc::Rc;

use super::{dual_avg_pool, Linear, Mode, Session};
use crate::error::Result;
use crate::params::ParamInit;
use crate::tensor::{SeqLayout, Var};

/// Squeeze-and-excitation over time: pooled context → bottleneck → sigmoid
/// gate → elementwise rescale of the input.
#[derive(Debug, Clone)]
pub struct SEBlock {
    squeeze: Linear,
    excite: Linear,
}

impl SEBlock {
    pub fn new(init: &mut ParamInit<'_>, name: &str, channels: usize, bottleneck: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                squeeze: Linear::new(init, "squeeze", channels, bottleneck, true)?,
                excite: Linear::new(init, "excite", bottleneck, channels, true)?,
            })
        })
    }

    pub fn squeeze(&self) -> &Linear {
        &self.squeeze
    }

    pub fn excite(&self) -> &Linear {
        &self.excite
    }

    pub fn num_params(&self) -> usize {
        self.squeeze.num_params() + self.excite.num_params()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
        let pooled = dual_avg_pool(s, x, layout, mode)?;
        let h = self.squeeze.forward(s, pooled)?;
        let h = s.graph.swish(h);
        let h = self.excite.forward(s, h)?;
        let gate = s.graph.sigmoid(h);
        s.graph.mul(x, gate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn block_with_gate_bias(bias: f64) -> (ParamStore, SEBlock) {
        let mut store = ParamStore::new();
        let se = SEBlock::new(&mut ParamInit::new(&mut store, 1), "se", 3, 2).unwrap();
        store.set(se.excite().weight(), Tensor::zeros(vec![2, 3])).unwrap();
        store.set(se.excite().bias().unwrap(), Tensor::full(vec![3], bias)).unwrap();
        (store, se)
    }

    fn run(store: &ParamStore, se: &SEBlock, x: &Tensor, mode: Mode) -> Tensor {
        let mut s = Session::new(store, false);
        let xv = s.input(x.clone());
        let layout = Rc::new(SeqLayout::single(x.rows()));
        let y = se.forward(&mut s, xv, &layout, mode).unwrap();
        s.value(y).clone()
    }

    fn sample() -> Tensor {
        Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin() * 2.0).collect()).unwrap()
    }

    #[test]
    fn saturated_open_gate_passes_input() {
        let (store, se) = block_with_gate_bias(50.0);
        for mode in Mode::BOTH {
            assert!(run(&store, &se, &sample(), mode).max_abs_diff(&sample()) < 1e-6);
        }
    }

    #[test]
    fn saturated_closed_gate_blocks_input() {
        let (store, se) = block_with_gate_bias(-50.0);
        let y = run(&store, &se, &sample(), Mode::Streaming);
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn streaming_prefix_ignores_future() {
        let mut store = ParamStore::new();
        let se = SEBlock::new(&mut ParamInit::new(&mut store, 9), "se", 3, 2).unwrap();
        let x = sample();
        let mut x2 = x.clone();
        x2.data_mut()[9..].iter_mut().for_each(|v| *v = -7.0);
        let a = run(&store, &se, &x, Mode::Streaming);
        let b = run(&store, &se, &x2, Mode::Streaming);
        assert_eq!(&a.data()[..9], &b.data()[..9]);
        assert_eq!(a.shape(), x.shape());
    }
}
