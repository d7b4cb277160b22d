use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::transducer::TransducerLattice;

/// Collapses a node's log-distribution to `(P_label, P_blank, P_rem)`, or to
/// `(P_blank, P_rem)` when there is no next label. `P_rem` is summed from
/// the remaining tokens rather than taken as `1 - P_label - P_blank`.
pub fn collapse(node: &[f64], label: Option<usize>) -> Vec<f64> {
    let blank = node[0].exp();
    let rem: f64 = node
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(k, _)| Some(k) != label)
        .map(|(_, z)| z.exp())
        .sum();
    match label {
        Some(l) => vec![node[l].exp(), blank, rem],
        None => vec![blank, rem],
    }
}

/// `KL(p ‖ q) = Σ p ln(p / q)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Node-summed distillation terms of one utterance.
#[derive(Debug, Clone)]
pub struct DistillTerms {
    pub kl_sum: f64,
    pub nodes: usize,
    pub student_grad: Tensor,
    pub teacher_grad: Tensor,
}

/// Teacher frame (0-based) paired with student frame `t` under `shift`.
pub fn teacher_frame(t: usize, shift: i64, frames: usize) -> usize {
    (t as i64 + shift).clamp(0, frames as i64 - 1) as usize
}

/// Sum over nodes of `KL(q_teacher ‖ q_student)` with the gradients of that
/// sum with respect to both lattices.
pub fn distill_terms(teacher: &TransducerLattice, student: &TransducerLattice, y: &[usize], shift: i64) -> Result<DistillTerms> {
    if teacher.tensor().shape() != student.tensor().shape() {
        return Err(Error::shape(
            "inplace_distill_loss",
            teacher.tensor().shape(),
            student.tensor().shape(),
        ));
    }
    if y.len() != student.target_len() {
        return Err(Error::arg(
            "inplace_distill_loss",
            format!("{} targets for a lattice with U = {}", y.len(), student.target_len()),
        ));
    }
    if let Some(&bad) = y.iter().find(|&&k| k == 0 || k > student.vocab()) {
        return Err(Error::arg(
            "inplace_distill_loss",
            format!("target token {bad} outside 1..={}", student.vocab()),
        ));
    }
    let (frames, u_len, k) = (student.frames(), student.target_len(), student.vocab() + 1);
    let mut student_grad = Tensor::zeros(student.tensor().shape().to_vec());
    let mut teacher_grad = Tensor::zeros(teacher.tensor().shape().to_vec());
    let mut kl_sum = 0.0;
    for t in 0..frames {
        let tt = teacher_frame(t, shift, frames);
        for u in 0..=u_len {
            let label = (u < u_len).then(|| y[u]);
            let zs = student.node(t, u);
            let zt = teacher.node(tt, u);
            let qs = collapse(zs, label);
            let qt = collapse(zt, label);
            kl_sum += kl_divergence(&qt, &qs);

            // (index of the collapsed "rest" entry, collapsed index of token k)
            let rest = qs.len() - 1;
            let part = |v: usize| match (v, label) {
                (0, Some(_)) => 1,
                (0, None) => 0,
                (v, Some(l)) if v == l => 0,
                _ => rest,
            };
            let sg = &mut student_grad.data_mut()[(t * (u_len + 1) + u) * k..][..k];
            for (v, g) in sg.iter_mut().enumerate() {
                let i = part(v);
                *g = if i == rest {
                    if qt[i] == 0.0 {
                        0.0
                    } else {
                        -qt[i] * zs[v].exp() / qs[i]
                    }
                } else {
                    -qt[i]
                };
            }
            let tg = &mut teacher_grad.data_mut()[(tt * (u_len + 1) + u) * k..][..k];
            for (v, g) in tg.iter_mut().enumerate() {
                let i = part(v);
                if qt[i] == 0.0 {
                    continue;
                }
                let dq = if i == rest { zt[v].exp() } else { qt[i] };
                *g += dq * (qt[i].ln() - qs[i].ln() + 1.0);
            }
        }
    }
    Ok(DistillTerms {
        kl_sum,
        nodes: frames * (u_len + 1),
        student_grad,
        teacher_grad,
    })
}

/// Mean over lattice nodes of `KL(q_teacher ‖ q_student)` for one utterance.
pub fn inplace_distill_loss(teacher: &TransducerLattice, student: &TransducerLattice, y: &[usize], shift: i64) -> Result<f64> {
    let terms = distill_terms(teacher, student, y, shift)?;
    Ok(terms.kl_sum / terms.nodes as f64)
}

/// Distillation loss over a batch of `(teacher, student, targets)` lattice
/// nodes: the mean over every node of every utterance. The teacher side goes
/// through a stop-gradient node first.
pub fn distill_loss_node(g: &mut Graph, pairs: &[(Var, Var, &[usize])], shift: i64) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::arg("inplace_distill_loss", "empty batch"));
    }
    let mut partials = Vec::with_capacity(2 * pairs.len());
    let mut kl_sum = 0.0;
    let mut nodes = 0;
    let mut terms = Vec::with_capacity(pairs.len());
    for &(teacher, student, y) in pairs {
        let tl = TransducerLattice::new(g.value(teacher).clone())?;
        let sl = TransducerLattice::new(g.value(student).clone())?;
        let d = distill_terms(&tl, &sl, y, shift)?;
        kl_sum += d.kl_sum;
        nodes += d.nodes;
        terms.push((teacher, student, d));
    }
    let scale = 1.0 / nodes as f64;
    for (teacher, student, d) in terms {
        let frozen = g.stop_gradient(teacher);
        partials.push((frozen, d.teacher_grad.map(|v| v * scale)));
        partials.push((student, d.student_grad.map(|v| v * scale)));
    }
    g.scalar_fn(kl_sum * scale, partials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};

    fn node_lattice(p: &[f64]) -> TransducerLattice {
        TransducerLattice::new(Tensor::new(vec![1, 2, p.len()], [p, p].concat().iter().map(|v| v.ln()).collect()).unwrap())
            .unwrap()
    }

    fn random_lattice(t: usize, u1: usize, k: usize, seed: u64) -> TransducerLattice {
        let logits = (0..t * u1 * k)
            .map(|i| ((i as u64 * 2654435761 + seed * 31) % 997) as f64 / 200.0 - 2.5)
            .collect();
        TransducerLattice::from_logits(Tensor::new(vec![t, u1, k], logits).unwrap()).unwrap()
    }

    #[test]
    fn hand_case_three_way() {
        // label 1: teacher (0.5 label, 0.25 blank, 0.25 rest), student (0.25, 0.5, 0.25)
        let teacher = collapse(&[0.25f64.ln(), 0.5f64.ln(), 0.25f64.ln()], Some(1));
        let student = collapse(&[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()], Some(1));
        assert!((kl_divergence(&teacher, &student) - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn identical_lattices_give_zero() {
        let lat = random_lattice(4, 3, 4, 1);
        assert!(inplace_distill_loss(&lat, &lat, &[2, 3], 0).unwrap().abs() < 1e-12);
        assert!(inplace_distill_loss(&lat, &lat, &[2, 3], 1).unwrap() > 0.0);
    }

    #[test]
    fn end_node_uses_two_way_split() {
        let lat = node_lattice(&[0.2, 0.3, 0.5]);
        let q = collapse(lat.node(0, 1), None);
        assert_eq!(q.len(), 2);
        assert!((q[0] - 0.2).abs() < 1e-12 && (q[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn shift_clamps() {
        assert_eq!(teacher_frame(2, 1, 3), 2);
        assert_eq!(teacher_frame(0, 1, 3), 1);
        assert_eq!(teacher_frame(0, -2, 3), 0);
        assert_eq!(teacher_frame(1, -2, 3), 0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = random_lattice(3, 3, 4, 2);
        let s = random_lattice(3, 3, 4, 3);
        let y = [3, 1];
        for shift in [-1, 0, 2] {
            let d = distill_terms(&t, &s, &y, shift).unwrap();
            let fs = |x: &Tensor| {
                distill_terms(&t, &TransducerLattice::new(x.clone()).unwrap(), &y, shift).unwrap().kl_sum
            };
            let ft = |x: &Tensor| {
                distill_terms(&TransducerLattice::new(x.clone()).unwrap(), &s, &y, shift).unwrap().kl_sum
            };
            assert!(relative_error(&d.student_grad, &finite_difference_gradient(fs, s.tensor(), 1e-5)) < 1e-7);
            assert!(relative_error(&d.teacher_grad, &finite_difference_gradient(ft, t.tensor(), 1e-5)) < 1e-7);
        }
    }

    #[test]
    fn graph_node_blocks_teacher() {
        let t = random_lattice(2, 2, 3, 4);
        let s = random_lattice(2, 2, 3, 5);
        let mut g = Graph::new();
        let tv = g.variable(t.tensor().clone());
        let sv = g.variable(s.tensor().clone());
        let loss = distill_loss_node(&mut g, &[(tv, sv, &[2])], 0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(tv).data().iter().all(|&v| v == 0.0));
        assert!(grads.get(sv).data().iter().any(|&v| v != 0.0));
        let expected = inplace_distill_loss(&t, &s, &[2], 0).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let a = random_lattice(2, 2, 3, 1);
        let b = random_lattice(3, 2, 3, 1);
        assert!(inplace_distill_loss(&a, &b, &[1], 0).is_err());
    }
}
