use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-node log-probabilities `z[t][u][k]` of shape `[T', U + 1, V + 1]`,
/// blank at `k = 0`. Indices are 0-based here.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerLattice {
    logp: Tensor,
}

impl TransducerLattice {
    pub fn new(logp: Tensor) -> Result<Self> {
        let s = logp.shape();
        if s.len() != 3 || s.contains(&0) || s[2] < 2 {
            return Err(Error::arg(
                "lattice",
                format!("expected [T', U + 1, V + 1] with T' >= 1 and V >= 1, got {s:?}"),
            ));
        }
        Ok(Self { logp })
    }

    /// Builds a lattice from per-node logits by normalizing each node.
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let mut lat = Self::new(logits)?;
        let k = lat.logp.shape()[2];
        for node in lat.logp.data_mut().chunks_mut(k) {
            let lse = crate::tensor::logsumexp(node);
            node.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(lat)
    }

    pub fn frames(&self) -> usize {
        self.logp.shape()[0]
    }

    pub fn target_len(&self) -> usize {
        self.logp.shape()[1] - 1
    }

    pub fn vocab(&self) -> usize {
        self.logp.shape()[2] - 1
    }

    pub fn tensor(&self) -> &Tensor {
        &self.logp
    }

    pub fn into_tensor(self) -> Tensor {
        self.logp
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> f64 {
        let s = self.logp.shape();
        self.logp.data()[(t * s[1] + u) * s[2] + k]
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let s = self.logp.shape();
        let off = (t * s[1] + u) * s[2];
        &self.logp.data()[off..off + s[2]]
    }

    /// Fails unless every node is a log-distribution within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for t in 0..self.frames() {
            for u in 0..=self.target_len() {
                let lse = crate::tensor::logsumexp(self.node(t, u));
                if !(lse.abs() <= tol) {
                    return Err(Error::Precondition {
                        op: "rnnt_loss",
                        reason: format!(
                            "node (t={}, u={u}) sums to exp({lse}) instead of 1; pass log-probabilities",
                            t + 1
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_targets(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.target_len() {
            return Err(Error::arg(
                "rnnt_loss",
                format!("{} targets for a lattice with U = {}", y.len(), self.target_len()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&k| k == 0 || k > self.vocab()) {
            return Err(Error::arg(
                "rnnt_loss",
                format!("target token {bad} outside 1..={}", self.vocab()),
            ));
        }
        Ok(())
    }
}

const NORMALIZATION_TOL: f64 = 1e-6;

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward variables `α[t][u]`: log-probability of having emitted `y[..u]`
/// and arriving at frame `t` (0-based) before emitting anything there.
pub fn forward_variables(lat: &TransducerLattice, y: &[usize]) -> Result<Vec<Vec<f64>>> {
    lat.check_targets(y)?;
    let (t_len, u_len) = (lat.frames(), lat.target_len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; u_len + 1]; t_len];
    for t in 0..t_len {
        for u in 0..=u_len {
            alpha[t][u] = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 {
                    alpha[t - 1][u] + lat.at(t - 1, u, 0)
                } else {
                    f64::NEG_INFINITY
                };
                let from_label = if u > 0 {
                    alpha[t][u - 1] + lat.at(t, u - 1, y[u - 1])
                } else {
                    f64::NEG_INFINITY
                };
                lse2(from_blank, from_label)
            };
        }
    }
    Ok(alpha)
}

/// Backward variables `β[t][u]`: log-probability of completing the
/// alignment from node `(t, u)`, including its own emission.
pub fn backward_variables(lat: &TransducerLattice, y: &[usize]) -> Result<Vec<Vec<f64>>> {
    lat.check_targets(y)?;
    let (t_len, u_len) = (lat.frames(), lat.target_len());
    let mut beta = vec![vec![f64::NEG_INFINITY; u_len + 1]; t_len];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            beta[t][u] = if t == t_len - 1 && u == u_len {
                lat.at(t, u, 0)
            } else {
                let by_blank = if t + 1 < t_len {
                    beta[t + 1][u] + lat.at(t, u, 0)
                } else {
                    f64::NEG_INFINITY
                };
                let by_label = if u < u_len {
                    beta[t][u + 1] + lat.at(t, u, y[u])
                } else {
                    f64::NEG_INFINITY
                };
                lse2(by_blank, by_label)
            };
        }
    }
    Ok(beta)
}

/// Negative log-likelihood of `y` summed over all alignments.
pub fn rnnt_loss(lat: &TransducerLattice, y: &[usize]) -> Result<f64> {
    lat.check_normalized(NORMALIZATION_TOL)?;
    let alpha = forward_variables(lat, y)?;
    let (t, u) = (lat.frames() - 1, lat.target_len());
    Ok(-(alpha[t][u] + lat.at(t, u, 0)))
}

/// Loss together with its gradient with respect to every lattice entry.
pub fn rnnt_loss_and_grad(lat: &TransducerLattice, y: &[usize]) -> Result<(f64, Tensor)> {
    lat.check_normalized(NORMALIZATION_TOL)?;
    let alpha = forward_variables(lat, y)?;
    let beta = backward_variables(lat, y)?;
    let (t_len, u_len, k) = (lat.frames(), lat.target_len(), lat.vocab() + 1);
    let log_p = beta[0][0];
    let mut grad = Tensor::zeros(lat.tensor().shape().to_vec());
    let g = grad.data_mut();
    for t in 0..t_len {
        for u in 0..=u_len {
            let base = (t * (u_len + 1) + u) * k;
            let next_blank = if t + 1 < t_len {
                beta[t + 1][u]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            g[base] = -(alpha[t][u] + lat.at(t, u, 0) + next_blank - log_p).exp();
            if u < u_len {
                let label = y[u];
                g[base + label] -= (alpha[t][u] + lat.at(t, u, label) + beta[t][u + 1] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Largest `T' - 1 + U` accepted by [`rnnt_loss_bruteforce`].
pub const BRUTEFORCE_MAX_STEPS: usize = 12;

/// Reference loss by explicit enumeration of every alignment, summed in
/// probability space. Only for tiny lattices.
pub fn rnnt_loss_bruteforce(lat: &TransducerLattice, y: &[usize]) -> Result<f64> {
    lat.check_targets(y)?;
    let (t_len, u_len) = (lat.frames(), lat.target_len());
    if t_len - 1 + u_len > BRUTEFORCE_MAX_STEPS {
        return Err(Error::arg(
            "rnnt_loss_bruteforce",
            format!("T' - 1 + U = {} exceeds {BRUTEFORCE_MAX_STEPS}", t_len - 1 + u_len),
        ));
    }
    fn walk(lat: &TransducerLattice, y: &[usize], t: usize, u: usize, logp: f64, total: &mut f64) {
        let (t_last, u_len) = (lat.frames() - 1, lat.target_len());
        if t == t_last && u == u_len {
            *total += (logp + lat.at(t, u, 0)).exp();
            return;
        }
        if t < t_last {
            walk(lat, y, t + 1, u, logp + lat.at(t, u, 0), total);
        }
        if u < u_len {
            walk(lat, y, t, u + 1, logp + lat.at(t, u, y[u]), total);
        }
    }
    let mut total = 0.0;
    walk(lat, y, 0, 0, 0.0, &mut total);
    Ok(-total.ln())
}

/// Differentiable transducer loss for a lattice node `[T', U + 1, V + 1]`.
pub fn rnnt_loss_node(g: &mut Graph, lattice: Var, y: &[usize]) -> Result<Var> {
    let lat = TransducerLattice::new(g.value(lattice).clone())?;
    let (loss, grad) = rnnt_loss_and_grad(&lat, y)?;
    g.scalar_fn(loss, vec![(lattice, grad)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};

    fn uniform(t: usize, u1: usize, k: usize) -> TransducerLattice {
        TransducerLattice::new(Tensor::full(vec![t, u1, k], -(k as f64).ln())).unwrap()
    }

    fn pseudo_random(t: usize, u1: usize, k: usize, seed: u64) -> TransducerLattice {
        let logits = (0..t * u1 * k)
            .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 250.0 - 2.0)
            .collect();
        TransducerLattice::from_logits(Tensor::new(vec![t, u1, k], logits).unwrap()).unwrap()
    }

    #[test]
    fn two_frames_one_label_uniform_binary() {
        let lat = uniform(2, 2, 2);
        let loss = rnnt_loss(&lat, &[1]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((rnnt_loss_bruteforce(&lat, &[1]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_node_is_blank_logprob() {
        let lat = uniform(1, 1, 3);
        assert!((rnnt_loss(&lat, &[]).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration() {
        for (t, u, seed) in [(1, 3, 1), (3, 2, 2), (4, 4, 3), (6, 1, 4)] {
            let lat = pseudo_random(t, u + 1, 4, seed);
            let y: Vec<usize> = (0..u).map(|i| 1 + (i * 7 + seed as usize) % 3).collect();
            let a = rnnt_loss(&lat, &y).unwrap();
            let b = rnnt_loss_bruteforce(&lat, &y).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn alpha_beta_agree() {
        let lat = pseudo_random(5, 4, 3, 9);
        let y = [2, 1, 2];
        let alpha = forward_variables(&lat, &y).unwrap();
        let beta = backward_variables(&lat, &y).unwrap();
        let end = alpha[4][3] + lat.at(4, 3, 0);
        assert!((end - beta[0][0]).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lat = pseudo_random(3, 3, 3, 5);
        let y = [1, 2];
        let (_, grad) = rnnt_loss_and_grad(&lat, &y).unwrap();
        // Perturbing the raw entries without renormalizing is what the analytic gradient describes.
        let f = |x: &Tensor| {
            let l = TransducerLattice::new(x.clone()).unwrap();
            let alpha = forward_variables(&l, &y).unwrap();
            -(alpha[2][2] + l.at(2, 2, 0))
        };
        let num = finite_difference_gradient(f, lat.tensor(), 1e-5);
        assert!(relative_error(&grad, &num) < 1e-7);
    }

    #[test]
    fn unnormalized_input_rejected() {
        let lat = TransducerLattice::new(Tensor::zeros(vec![2, 2, 3])).unwrap();
        let err = rnnt_loss(&lat, &[1]).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }), "{err}");
    }

    #[test]
    fn bad_targets_rejected() {
        let lat = uniform(2, 3, 3);
        assert!(rnnt_loss(&lat, &[1]).is_err());
        assert!(rnnt_loss(&lat, &[1, 3]).is_err());
        assert!(rnnt_loss(&lat, &[0, 1]).is_err());
    }

    #[test]
    fn bruteforce_size_limit() {
        let lat = uniform(10, 5, 2);
        assert!(rnnt_loss_bruteforce(&lat, &[1, 1, 1, 1]).is_err());
    }

    #[test]
    fn graph_node_backpropagates() {
        let lat = pseudo_random(2, 2, 3, 3);
        let mut g = Graph::new();
        let v = g.variable(lat.tensor().clone());
        let loss = rnnt_loss_node(&mut g, v, &[2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let (_, expected) = rnnt_loss_and_grad(&lat, &[2]).unwrap();
        assert_eq!(grads.get(v), expected);
    }
}
