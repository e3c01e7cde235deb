use crate::datagen::{Example, Token};
use crate::error::{Error, Result};

use super::{LayerFilter, LayerSpec, ModelConfig};

/// Borrowed view of a parameter vector with its layout resolved.
pub struct Network<'a> {
    cfg: &'a ModelConfig,
    params: &'a [f64],
    layout: Vec<LayerSpec>,
    pe: Vec<f64>,
}

/// Activations of one forward pass over positions `start..n`.
pub struct Trace {
    pub tokens: Vec<Token>,
    pub start: usize,
    /// `h[k][t - start]`: input to block `k`; `h[mlp_layers]` feeds the readout.
    pub h: Vec<Vec<Vec<f64>>>,
    /// `act[k][t - start]`: activation output of block `k`.
    pub act: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

/// Loss gradients with respect to each linear layer's pre-activation at one position.
pub struct PreactGrads {
    pub readout: Vec<f64>,
    /// Indexed by block.
    pub blocks: Vec<Vec<f64>>,
    pub in_proj: Option<Vec<f64>>,
}

/// Sinusoidal position offsets, `context_len x embed_dim`.
fn positional_table(context_len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; context_len * dim];
    for pos in 0..context_len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy of `logits[i - 1]` against `tokens[i]` over positions
/// where `mask[i]` holds. Targets at unmasked positions are never read.
pub fn masked_cross_entropy(logits: &[Vec<f64>], tokens: &[Token], mask: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 1..tokens.len() {
        if mask[i] {
            total -= log_softmax(&logits[i - 1])[tokens[i] as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::input("loss mask selects no predictable position"));
    }
    Ok(total / count as f64)
}

#[inline]
fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[inline]
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a [f64]) -> Self {
        Self {
            cfg,
            params,
            layout: cfg.layout(),
            pe: positional_table(cfg.context_len, cfg.embed_dim),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn layer(&self, idx: usize) -> (&[f64], &[f64]) {
        let l = &self.layout[idx];
        let w = &self.params[l.offset..l.offset + l.out_dim * l.in_dim];
        let b = if l.bias { &self.params[l.offset + l.out_dim * l.in_dim..l.offset + l.len] } else { &[][..] };
        (w, b)
    }

    fn embed(&self) -> &[f64] {
        self.layer(0).0
    }

    fn in_proj(&self) -> (&[f64], &[f64]) {
        self.layer(1)
    }

    fn block(&self, k: usize) -> (&[f64], &[f64]) {
        self.layer(2 + k)
    }

    fn readout(&self) -> (&[f64], &[f64]) {
        self.layer(2 + self.cfg.mlp_layers)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.cfg.context_len {
            return Err(Error::input(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.cfg.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::input(format!("token id {t} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    /// Slot vector for context position `j`: `embed[token] + pe(j)`.
    fn slot(&self, token: Token, j: usize) -> Vec<f64> {
        let e = self.cfg.embed_dim;
        let emb = &self.embed()[token as usize * e..(token as usize + 1) * e];
        emb.iter().zip(&self.pe[j * e..(j + 1) * e]).map(|(a, b)| a + b).collect()
    }

    /// Full input vector of the prediction at position `t`.
    pub fn input_vector(&self, tokens: &[Token], t: usize) -> Vec<f64> {
        let e = self.cfg.embed_dim;
        let mut x = vec![0.0; self.cfg.context_len * e];
        for j in 0..=t {
            x[j * e..(j + 1) * e].copy_from_slice(&self.slot(tokens[j], j));
        }
        x
    }

    /// Forward pass producing activations for positions `start..tokens.len()`.
    pub fn forward_from(&self, tokens: &[Token], start: usize) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let (hd, e, nl, v) = (self.cfg.hidden_dim, self.cfg.embed_dim, self.cfg.mlp_layers, self.cfg.vocab_size);
        let in_cols = self.cfg.context_len * e;
        let act_fn = self.cfg.activation;
        let (w_in, b_in) = self.in_proj();
        let mut z_in = b_in.to_vec();
        let mut h = vec![Vec::with_capacity(n.saturating_sub(start)); nl + 1];
        let mut act = vec![Vec::with_capacity(n.saturating_sub(start)); nl];
        let mut logits = Vec::with_capacity(n.saturating_sub(start));
        for t in 0..n {
            // z_in(t) = z_in(t-1) + W_in[:, slot t] * slot_t
            let s = self.slot(tokens[t], t);
            for r in 0..hd {
                let row = &w_in[r * in_cols + t * e..r * in_cols + (t + 1) * e];
                z_in[r] += row.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>();
            }
            if t < start {
                continue;
            }
            let mut cur: Vec<f64> = z_in.iter().map(|&z| act_fn.apply(z)).collect();
            for k in 0..nl {
                let (w, b) = self.block(k);
                let mut z = b.to_vec();
                matvec_add(w, hd, hd, &cur, &mut z);
                let a: Vec<f64> = z.iter().map(|&z| act_fn.apply(z)).collect();
                let next: Vec<f64> = cur.iter().zip(&a).map(|(x, y)| x + y).collect();
                h[k].push(cur);
                act[k].push(a);
                cur = next;
            }
            let (w_o, b_o) = self.readout();
            let mut lg = b_o.to_vec();
            matvec_add(w_o, v, hd, &cur, &mut lg);
            h[nl].push(cur);
            logits.push(lg);
        }
        Ok(Trace { tokens: tokens.to_vec(), start, h, act, logits })
    }

    pub fn forward(&self, tokens: &[Token]) -> Result<Trace> {
        self.forward_from(tokens, 0)
    }

    /// Next-token logits after the last token of `tokens`.
    pub fn next_logits(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::input("cannot predict from an empty context"));
        }
        let mut tr = self.forward_from(tokens, tokens.len() - 1)?;
        Ok(tr.logits.pop().unwrap())
    }

    /// Final residual-stream states for every position, `[tokens x hidden]`.
    pub fn hidden_states(&self, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(tokens)?.h.pop().unwrap())
    }

    /// Positions whose next-token prediction enters the loss.
    fn loss_positions(&self, example: &Example) -> Result<Vec<usize>> {
        if example.loss_mask.len() != example.len() {
            return Err(Error::input(format!("example {}: mask length mismatch", example.id)));
        }
        if example.prompt_tokens.is_empty() {
            return Err(Error::input(format!("example {}: empty prompt", example.id)));
        }
        let pos: Vec<usize> = (1..example.len()).filter(|&i| example.loss_mask[i]).map(|i| i - 1).collect();
        if pos.is_empty() {
            return Err(Error::input(format!("example {}: loss mask is empty", example.id)));
        }
        Ok(pos)
    }

    /// Logits for every position and the mean masked cross-entropy.
    pub fn forward_loss(&self, example: &Example) -> Result<(Vec<Vec<f64>>, f64)> {
        let seq = example.sequence();
        self.loss_positions(example)?;
        let tr = self.forward(&seq)?;
        let loss = masked_cross_entropy(&tr.logits, &seq, &example.loss_mask)?;
        Ok((tr.logits, loss))
    }

    pub fn loss(&self, example: &Example) -> Result<f64> {
        let seq = example.sequence();
        let pos = self.loss_positions(example)?;
        let tr = self.forward_from(&seq, pos[0])?;
        let mut total = 0.0;
        for &t in &pos {
            total -= log_softmax(&tr.logits[t - tr.start])[seq[t + 1] as usize];
        }
        Ok(total / pos.len() as f64)
    }

    /// Backpropagates an output-logit gradient at one position down to each
    /// linear layer's pre-activation.
    pub fn preact_grads(&self, tr: &Trace, t: usize, dlogit: &[f64], with_in_proj: bool) -> PreactGrads {
        let i = t - tr.start;
        let (hd, nl, v) = (self.cfg.hidden_dim, self.cfg.mlp_layers, self.cfg.vocab_size);
        let act_fn = self.cfg.activation;
        let mut dh = vec![0.0; hd];
        matvec_t_add(self.readout().0, v, hd, dlogit, &mut dh);
        let mut blocks = vec![Vec::new(); nl];
        for k in (0..nl).rev() {
            let a = &tr.act[k][i];
            let dz: Vec<f64> = dh.iter().zip(a).map(|(g, &a)| g * act_fn.derivative_from_output(a)).collect();
            matvec_t_add(self.block(k).0, hd, hd, &dz, &mut dh);
            blocks[k] = dz;
        }
        let in_proj = with_in_proj.then(|| {
            dh.iter().zip(&tr.h[0][i]).map(|(g, &a)| g * act_fn.derivative_from_output(a)).collect()
        });
        PreactGrads { readout: dlogit.to_vec(), blocks, in_proj }
    }

    /// Input of a linear layer at position `t`, augmented with a trailing 1 when the layer has a bias.
    pub fn layer_input(&self, tr: &Trace, t: usize, layer: &LayerSpec) -> Result<Vec<f64>> {
        let i = t - tr.start;
        let mut a = if layer.name == "readout" {
            tr.h[self.cfg.mlp_layers][i].clone()
        } else if layer.name == "in_proj" {
            self.input_vector(&tr.tokens, t)
        } else if let Some(k) = layer.name.strip_prefix("mlp.").and_then(|k| k.parse::<usize>().ok()) {
            tr.h[k][i].clone()
        } else {
            return Err(Error::input(format!("layer `{}` is not a linear layer", layer.name)));
        };
        if layer.bias {
            a.push(1.0);
        }
        Ok(a)
    }

    pub fn layer_preact<'g>(&self, grads: &'g PreactGrads, layer: &LayerSpec) -> Result<&'g [f64]> {
        if layer.name == "readout" {
            Ok(&grads.readout)
        } else if layer.name == "in_proj" {
            grads.in_proj.as_deref().ok_or_else(|| Error::input("in_proj gradient not requested"))
        } else if let Some(k) = layer.name.strip_prefix("mlp.").and_then(|k| k.parse::<usize>().ok()) {
            Ok(&grads.blocks[k])
        } else {
            Err(Error::input(format!("layer `{}` is not a linear layer", layer.name)))
        }
    }

    /// Loss and gradient over the whole parameter vector. Layers outside
    /// `filter` are left at zero and skipped where possible.
    pub fn loss_and_gradient(&self, example: &Example, filter: Option<&LayerFilter>) -> Result<(f64, Vec<f64>)> {
        let seq = example.sequence();
        let pos = self.loss_positions(example)?;
        let tr = self.forward_from(&seq, 0)?;
        let (hd, e, nl, v) = (self.cfg.hidden_dim, self.cfg.embed_dim, self.cfg.mlp_layers, self.cfg.vocab_size);
        let in_cols = self.cfg.context_len * e;
        let wants = |name: &str| filter.is_none_or(|f| f.contains(name));
        let need_in = wants("in_proj") || wants("embed");
        let w = 1.0 / pos.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        // suffix sums of in_proj pre-activation gradients, indexed by position
        let mut dz_in_at = vec![vec![0.0; hd]; seq.len()];
        for &t in &pos {
            let lp = log_softmax(&tr.logits[t]);
            let y = seq[t + 1] as usize;
            loss -= lp[y];
            let mut dlogit: Vec<f64> = lp.iter().map(|l| w * l.exp()).collect();
            dlogit[y] -= w;
            let g = self.preact_grads(&tr, t, &dlogit, need_in);
            let ro = &self.layout[2 + nl];
            if wants("readout") {
                accumulate_outer(&mut grad[ro.offset..ro.offset + ro.len], &g.readout, &tr.h[nl][t], true);
            }
            for k in 0..nl {
                let l = &self.layout[2 + k];
                if wants(&l.name) {
                    accumulate_outer(&mut grad[l.offset..l.offset + l.len], &g.blocks[k], &tr.h[k][t], true);
                }
            }
            if let Some(dz) = g.in_proj {
                dz_in_at[t] = dz;
            }
        }
        if need_in {
            let (w_in, _) = self.in_proj();
            let li = &self.layout[1];
            let le = &self.layout[0];
            let mut suffix = vec![0.0; hd];
            for j in (0..seq.len()).rev() {
                for (s, d) in suffix.iter_mut().zip(&dz_in_at[j]) {
                    *s += d;
                }
                let slot = self.slot(seq[j], j);
                if wants("in_proj") {
                    let g = &mut grad[li.offset..li.offset + li.len];
                    for r in 0..hd {
                        let row = &mut g[r * in_cols + j * e..r * in_cols + (j + 1) * e];
                        for (gv, s) in row.iter_mut().zip(&slot) {
                            *gv += suffix[r] * s;
                        }
                    }
                    if j == 0 {
                        for r in 0..hd {
                            g[hd * in_cols + r] += suffix[r];
                        }
                    }
                }
                if wants("embed") {
                    let tok = seq[j] as usize;
                    let mut de = vec![0.0; e];
                    for r in 0..hd {
                        let row = &w_in[r * in_cols + j * e..r * in_cols + (j + 1) * e];
                        for (d, a) in de.iter_mut().zip(row) {
                            *d += a * suffix[r];
                        }
                    }
                    for (gv, d) in grad[le.offset + tok * e..le.offset + (tok + 1) * e].iter_mut().zip(&de) {
                        *gv += d;
                    }
                }
            }
        }
        let _ = v;
        Ok((loss * w, grad))
    }

    /// Analytic gradient of the example's loss restricted to `filter`,
    /// concatenated in layer order.
    pub fn per_example_gradient(&self, example: &Example, filter: &LayerFilter) -> Result<Vec<f64>> {
        let (_, full) = self.loss_and_gradient(example, Some(filter))?;
        Ok(gather(&full, &filter.layers(self.cfg)))
    }

    /// Visits every completion position of `example` once per possible
    /// target class `c`, with the pre-activation gradient of each filtered
    /// layer for the output gradient `sqrt(p_c) (p - e_c)`. Summing outer
    /// products of these columns gives exactly the expected outer product of
    /// gradients under targets sampled from the model, i.e. the Gauss-Newton
    /// / Fisher contribution of the position.
    ///
    /// The visitor receives `(position weight, per-layer inputs, per-layer column lists)`.
    pub fn fisher_columns<F>(&self, example: &Example, layers: &[LayerSpec], example_weight: f64, mut visit: F) -> Result<()>
    where
        F: FnMut(f64, &[Vec<f64>], &[Vec<Vec<f64>>]),
    {
        let seq = example.sequence();
        let pos = self.loss_positions(example)?;
        let tr = self.forward_from(&seq, pos[0])?;
        let need_in = layers.iter().any(|l| l.name == "in_proj");
        if layers.iter().any(|l| l.name == "embed") {
            return Err(Error::input("curvature is defined for linear layers only, not `embed`"));
        }
        let w = example_weight / pos.len() as f64;
        for &t in &pos {
            let p = softmax(&tr.logits[t - tr.start]);
            let inputs = layers.iter().map(|l| self.layer_input(&tr, t, l)).collect::<Result<Vec<_>>>()?;
            let mut cols: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(p.len()); layers.len()];
            for (c, &pc) in p.iter().enumerate() {
                if pc == 0.0 {
                    continue;
                }
                let s = pc.sqrt();
                let mut d: Vec<f64> = p.iter().map(|&q| s * q).collect();
                d[c] -= s;
                let g = self.preact_grads(&tr, t, &d, need_in);
                for (li, l) in layers.iter().enumerate() {
                    cols[li].push(self.layer_preact(&g, l)?.to_vec());
                }
            }
            visit(w, &inputs, &cols);
        }
        Ok(())
    }
}

/// `g[r, c] += d[r] * a[c]` over a row-major `out x in` weight, then `g_b[r] += d[r]` when `bias`.
fn accumulate_outer(g: &mut [f64], d: &[f64], a: &[f64], bias: bool) {
    let cols = a.len();
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        for (gv, av) in g[r * cols..(r + 1) * cols].iter_mut().zip(a) {
            *gv += dr * av;
        }
    }
    if bias {
        let off = d.len() * cols;
        for (r, &dr) in d.iter().enumerate() {
            g[off + r] += dr;
        }
    }
}

pub(crate) fn gather(full: &[f64], layers: &[LayerSpec]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(|l| l.len).sum());
    for l in layers {
        out.extend_from_slice(&full[l.offset..l.offset + l.len]);
    }
    out
}
