use crate::error::{Error, Result};
use crate::layers::Session;
use crate::params::{ParamId, ParamInit};
use crate::tensor::{Tensor, Var};

/// Auto-regressive label encoder: token embedding followed by one GRU cell.
/// Token 0 (blank) doubles as the start symbol.
#[derive(Debug, Clone)]
pub struct PredictionNet {
    embedding: ParamId,
    w_input: ParamId,
    w_hidden: ParamId,
    b_input: ParamId,
    b_hidden: ParamId,
    vocab: usize,
    embed_dim: usize,
    hidden: usize,
}

impl PredictionNet {
    pub fn new(init: &mut ParamInit<'_>, vocab: usize, embed_dim: usize, hidden: usize) -> Result<Self> {
        init.scoped("prediction", |init| {
            Ok(Self {
                embedding: init.uniform("embedding", &[vocab + 1, embed_dim], 1)?,
                w_input: init.uniform("w_input", &[embed_dim, 3 * hidden], embed_dim)?,
                w_hidden: init.uniform("w_hidden", &[hidden, 3 * hidden], hidden)?,
                b_input: init.constant("b_input", &[3 * hidden], 0.0)?,
                b_hidden: init.constant("b_hidden", &[3 * hidden], 0.0)?,
                vocab,
                embed_dim,
                hidden,
            })
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_params(&self) -> usize {
        (self.vocab + 1) * self.embed_dim + (self.embed_dim + self.hidden + 2) * 3 * self.hidden
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t > self.vocab) {
            return Err(Error::arg(
                "prediction_forward",
                format!("token {bad} outside 1..={}", self.vocab),
            ));
        }
        Ok(())
    }

    /// All-zero hidden state before the start symbol.
    pub fn zero_state(&self, s: &mut Session<'_>) -> Var {
        s.input(Tensor::zeros(vec![1, self.hidden]))
    }

    /// Consumes one token (0 = start/blank) and returns the new `[1, hidden]` state.
    pub fn step(&self, s: &mut Session<'_>, state: Var, token: usize) -> Result<Var> {
        if token > self.vocab {
            return Err(Error::arg("prediction_step", format!("token {token} outside 0..={}", self.vocab)));
        }
        let emb = s.param(self.embedding);
        let e = s.graph.index_rows(emb, &[token])?;
        let w = s.param(self.w_input);
        let b = s.param(self.b_input);
        let gx = s.graph.matmul(e, w)?;
        let gx = s.graph.add(gx, b)?;
        self.cell(s, gx, state)
    }

    /// Teacher-forced states: row `u` is the state after the start symbol
    /// and `y[..u]`. Output `[U + 1, hidden]`.
    pub fn forward(&self, s: &mut Session<'_>, y: &[usize]) -> Result<Var> {
        self.check_tokens(y)?;
        let mut tokens = Vec::with_capacity(y.len() + 1);
        tokens.push(0);
        tokens.extend_from_slice(y);
        let emb = s.param(self.embedding);
        let e = s.graph.index_rows(emb, &tokens)?;
        let w = s.param(self.w_input);
        let b = s.param(self.b_input);
        let gx_all = s.graph.matmul(e, w)?;
        let gx_all = s.graph.add(gx_all, b)?;

        let mut state = self.zero_state(s);
        let mut rows = Vec::with_capacity(tokens.len());
        for u in 0..tokens.len() {
            let gx = s.graph.slice(gx_all, 0, u, u + 1)?;
            state = self.cell(s, gx, state)?;
            rows.push(state);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            s.graph.concat(&rows, 0)
        }
    }

    /// GRU update from precomputed input gates `gx = x W_x + b_x`, gate order (reset, update, candidate).
    fn cell(&self, s: &mut Session<'_>, gx: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let wh = s.param(self.w_hidden);
        let bh = s.param(self.b_hidden);
        let gh = s.graph.matmul(h, wh)?;
        let gh = s.graph.add(gh, bh)?;

        let gx_rz = s.graph.slice(gx, 1, 0, 2 * n)?;
        let gh_rz = s.graph.slice(gh, 1, 0, 2 * n)?;
        let rz = s.graph.add(gx_rz, gh_rz)?;
        let rz = s.graph.sigmoid(rz);
        let r = s.graph.slice(rz, 1, 0, n)?;
        let z = s.graph.slice(rz, 1, n, 2 * n)?;

        let gx_n = s.graph.slice(gx, 1, 2 * n, 3 * n)?;
        let gh_n = s.graph.slice(gh, 1, 2 * n, 3 * n)?;
        let rn = s.graph.mul(r, gh_n)?;
        let cand = s.graph.add(gx_n, rn)?;
        let cand = s.graph.tanh(cand);

        // h' = cand + z * (h - cand)
        let diff = s.graph.sub(h, cand)?;
        let keep = s.graph.mul(z, diff)?;
        s.graph.add(cand, keep)
    }
}
