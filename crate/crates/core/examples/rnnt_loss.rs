//! Transducer loss on small lattices: the forward recursion against brute
//! force path enumeration, and the loss gradient inside a graph.

use dualmode::tensor::{Graph, Tensor};
use dualmode::transducer::{forward_variables, rnnt_loss, rnnt_loss_bruteforce, rnnt_loss_node, TransducerLattice};

fn main() -> dualmode::Result<()> {
    // T' = 2, U = 1, V = 1, every output has probability 1/2: two paths of 1/8.
    let uniform = TransducerLattice::new(Tensor::full(vec![2, 2, 2], 0.5f64.ln()))?;
    println!("uniform 2x2 lattice: loss {:.6} (ln 4 = {:.6})", rnnt_loss(&uniform, &[1])?, 4f64.ln());

    let (frames, u, v) = (4, 3, 3);
    let logits: Vec<f64> = (0..frames * (u + 1) * (v + 1)).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.5).collect();
    let lat = TransducerLattice::from_logits(Tensor::new(vec![frames, u + 1, v + 1], logits)?)?;
    let y = [2, 1, 3];
    let fast = rnnt_loss(&lat, &y)?;
    let slow = rnnt_loss_bruteforce(&lat, &y)?;
    println!("random {frames}x{}x{} lattice: recursion {fast:.12}, enumeration {slow:.12}", u + 1, v + 1);

    let alpha = forward_variables(&lat, &y)?;
    println!("log alpha:");
    for (t, row) in alpha.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:8.3}")).collect();
        println!("  t={} {}", t + 1, cells.join(" "));
    }

    let mut g = Graph::new();
    let node = g.variable(lat.tensor().clone());
    let loss = rnnt_loss_node(&mut g, node, &y)?;
    let grads = g.backward(loss)?;
    let grad = grads.get(node);
    let blank_mass: f64 = grad.data().chunks(v + 1).map(|c| c[0]).sum();
    println!("d loss / d log p(blank), summed over nodes: {blank_mass:.3} (minus the expected blank count)");
    Ok(())
}
