use std::rc::Rc;

use super::{Mode, Session};
use crate::error::Result;
use crate::tensor::{SeqLayout, Tensor, Var};

/// Parameter-free average over time built on a cumulative sum.
///
/// Streaming: `out[t] = mean(x[..=t])`. Full context: every row gets the
/// mean of its whole segment, read from the last row of the same prefix sum.
pub fn dual_avg_pool(s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
    let csum = s.graph.cumsum(x, Rc::clone(layout))?;
    let n = layout.total();
    let mut counts = Vec::with_capacity(n);
    match mode {
        Mode::Streaming => {
            for (_, len) in layout.segments() {
                counts.extend((1..=len).map(|c| 1.0 / c as f64));
            }
            let inv = s.input(Tensor::matrix(n, 1, counts)?);
            s.graph.mul(csum, inv)
        }
        Mode::FullContext => {
            let mut last = Vec::with_capacity(n);
            for (start, len) in layout.segments() {
                last.extend(std::iter::repeat_n(start + len - 1, len));
                counts.extend(std::iter::repeat_n(1.0 / len as f64, len));
            }
            let totals = s.graph.index_rows(csum, &last)?;
            let inv = s.input(Tensor::matrix(n, 1, counts)?);
            s.graph.mul(totals, inv)
        }
    }
}
