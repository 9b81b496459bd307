use super::{Gradient, PolicyParams, Tensor};
use crate::error::{Error, Result};
use crate::world::{Task, TokenId};

/// `out += x · W` for row-major `W` of shape `(x.len(), out.len())`.
fn vec_mat_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `out += W · g` (i.e. `g` pulled back through `W`).
fn mat_vec_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `W += x ⊗ g`.
fn outer_acc(x: &[f64], g: &[f64], w: &mut [f64]) {
    let n = g.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut w[i * n..(i + 1) * n];
        for (wij, &gj) in row.iter_mut().zip(g) {
            *wij += xi * gj;
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Context vector shared by every generation step of one task.
pub(crate) struct ContextState {
    pub features: Vec<f64>,
    pub projected: Vec<f64>,
    pub context: Vec<f64>,
    /// `context · W_c + b_h`
    pub hidden_base: Vec<f64>,
}

impl PolicyParams {
    pub(crate) fn context_state(&self, task: &Task) -> Result<ContextState> {
        self.check_task(task)?;
        let d = &self.dims;
        let mut features = vec![0.0; d.encoder];
        vec_mat_acc(
            &task.visual_features,
            self.tensor(Tensor::EncoderWeight),
            &mut features,
        );
        features.iter_mut().for_each(|f| *f = f.tanh());
        let mut projected = vec![0.0; d.encoder];
        vec_mat_acc(&features, self.tensor(Tensor::EncoderProjection), &mut projected);

        let mut context = self.tensor(Tensor::AdapterBias).to_vec();
        vec_mat_acc(&projected, self.tensor(Tensor::AdapterWeight), &mut context);

        if !task.prompt_tokens.is_empty() {
            let emb = self.tensor(Tensor::TextEmbedding);
            let inv = 1.0 / task.prompt_tokens.len() as f64;
            for &t in &task.prompt_tokens {
                let row = &emb[t as usize * d.context..(t as usize + 1) * d.context];
                for (c, e) in context.iter_mut().zip(row) {
                    *c += inv * e;
                }
            }
        }

        let mut hidden_base = self.tensor(Tensor::HiddenBias).to_vec();
        vec_mat_acc(&context, self.tensor(Tensor::HiddenFromContext), &mut hidden_base);
        Ok(ContextState {
            features,
            projected,
            context,
            hidden_base,
        })
    }

    /// Adapted visual features combined with the pooled prompt embedding.
    pub fn forward_context(&self, task: &Task) -> Result<Vec<f64>> {
        Ok(self.context_state(task)?.context)
    }

    /// Hidden activation and next-token log-probabilities given the pooled history.
    pub(crate) fn step(&self, ctx: &ContextState, history_mean: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z = ctx.hidden_base.clone();
        vec_mat_acc(history_mean, self.tensor(Tensor::HiddenFromHistory), &mut z);
        let h: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let mut logits = self.tensor(Tensor::OutputBias).to_vec();
        vec_mat_acc(&h, self.tensor(Tensor::OutputWeight), &mut logits);
        (h, log_softmax(&logits))
    }

    pub(crate) fn history_row(&self, t: TokenId) -> &[f64] {
        let dh = self.dims.history;
        &self.tensor(Tensor::HistoryEmbedding)[t as usize * dh..(t as usize + 1) * dh]
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next_token_logprobs(&self, task: &Task, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        let ctx = self.context_state(task)?;
        let mut mean = vec![0.0; self.dims.history];
        if !prefix.is_empty() {
            for &t in prefix {
                for (m, e) in mean.iter_mut().zip(self.history_row(t)) {
                    *m += e;
                }
            }
            let inv = 1.0 / prefix.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        Ok(self.step(&ctx, &mean).1)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.dims.vocab) {
            Some(t) => Err(Error::input(format!(
                "token {t} outside vocabulary of size {}",
                self.dims.vocab
            ))),
            None => Ok(()),
        }
    }

    /// Runs the forward pass over `tokens`, keeping what the backward pass needs.
    pub fn trace<'a>(&'a self, task: &'a Task, tokens: &'a [TokenId]) -> Result<Trace<'a>> {
        self.check_tokens(tokens)?;
        let ctx = self.context_state(task)?;
        let dh = self.dims.history;
        let mut sum = vec![0.0; dh];
        let mut history_means = Vec::with_capacity(tokens.len());
        let mut hidden = Vec::with_capacity(tokens.len());
        let mut logprobs = Vec::with_capacity(tokens.len());
        let mut per_token = Vec::with_capacity(tokens.len());
        for (i, &y) in tokens.iter().enumerate() {
            let mean: Vec<f64> = if i == 0 {
                vec![0.0; dh]
            } else {
                sum.iter().map(|s| s / i as f64).collect()
            };
            let (h, lp) = self.step(&ctx, &mean);
            per_token.push(lp[y as usize]);
            history_means.push(mean);
            hidden.push(h);
            logprobs.push(lp);
            for (s, e) in sum.iter_mut().zip(self.history_row(y)) {
                *s += e;
            }
        }
        Ok(Trace {
            params: self,
            task,
            tokens,
            ctx,
            history_means,
            hidden,
            logprobs,
            per_token,
        })
    }

    /// Exact sequence log-probability and its per-token terms.
    pub fn logprob(&self, task: &Task, tokens: &[TokenId]) -> Result<(f64, Vec<f64>)> {
        let tr = self.trace(task, tokens)?;
        Ok((tr.total(), tr.per_token))
    }

    /// Gradient of the total log-probability; frozen tensors get exact zeros.
    pub fn grad_logprob(&self, task: &Task, tokens: &[TokenId]) -> Result<Gradient> {
        let tr = self.trace(task, tokens)?;
        let mut g = self.zero_gradient();
        tr.accumulate(&vec![1.0; tokens.len()], &mut g);
        self.mask_gradient(&mut g);
        Ok(g)
    }
}

/// Forward activations for one (task, sequence) pair.
pub struct Trace<'a> {
    params: &'a PolicyParams,
    task: &'a Task,
    tokens: &'a [TokenId],
    ctx: ContextState,
    history_means: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    logprobs: Vec<Vec<f64>>,
    pub per_token: Vec<f64>,
}

impl Trace<'_> {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }

    /// Adds `Σ_t weights[t] · ∇ log π(y_t | ·)` into `grad`.
    ///
    /// Frozen tensors are not masked here; callers mask once after summing.
    pub fn accumulate(&self, weights: &[f64], grad: &mut Gradient) {
        assert_eq!(weights.len(), self.tokens.len());
        let p = self.params;
        let d = p.dims;
        let layout = p.layout();
        let g = &mut grad.0;

        let mut d_hidden_base = vec![0.0; d.hidden];
        let mut d_hist_sum_coeff = vec![vec![0.0; d.history]; self.tokens.len()];

        for (t, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let y = self.tokens[t] as usize;
            // d/dlogits of w·log p_y = w·(onehot - p)
            let dlogits: Vec<f64> = self.logprobs[t]
                .iter()
                .enumerate()
                .map(|(v, lp)| w * ((v == y) as u8 as f64 - lp.exp()))
                .collect();
            let h = &self.hidden[t];
            outer_acc(h, &dlogits, &mut g[layout.range(Tensor::OutputWeight)]);
            for (gb, dl) in g[layout.range(Tensor::OutputBias)].iter_mut().zip(&dlogits) {
                *gb += dl;
            }
            let mut dh = vec![0.0; d.hidden];
            mat_vec_acc(p.tensor(Tensor::OutputWeight), &dlogits, &mut dh);
            let dz: Vec<f64> = dh.iter().zip(h).map(|(a, hv)| a * (1.0 - hv * hv)).collect();

            outer_acc(
                &self.history_means[t],
                &dz,
                &mut g[layout.range(Tensor::HiddenFromHistory)],
            );
            if t > 0 {
                let mut dmean = vec![0.0; d.history];
                mat_vec_acc(p.tensor(Tensor::HiddenFromHistory), &dz, &mut dmean);
                d_hist_sum_coeff[t] = dmean;
            }
            for (a, b) in d_hidden_base.iter_mut().zip(&dz) {
                *a += b;
            }
        }

        // history embeddings: token j feeds the mean at every later position t with weight 1/t
        let hist_range = layout.range(Tensor::HistoryEmbedding);
        let mut carry = vec![0.0; d.history];
        for t in (1..self.tokens.len()).rev() {
            let inv = 1.0 / t as f64;
            for (c, dm) in carry.iter_mut().zip(&d_hist_sum_coeff[t]) {
                *c += inv * dm;
            }
            let j = self.tokens[t - 1] as usize;
            let row = &mut g[hist_range.clone()][j * d.history..(j + 1) * d.history];
            for (r, c) in row.iter_mut().zip(&carry) {
                *r += c;
            }
        }

        for (gb, v) in g[layout.range(Tensor::HiddenBias)]
            .iter_mut()
            .zip(&d_hidden_base)
        {
            *gb += v;
        }
        outer_acc(
            &self.ctx.context,
            &d_hidden_base,
            &mut g[layout.range(Tensor::HiddenFromContext)],
        );
        let mut dctx = vec![0.0; d.context];
        mat_vec_acc(p.tensor(Tensor::HiddenFromContext), &d_hidden_base, &mut dctx);

        if !self.task.prompt_tokens.is_empty() {
            let inv = 1.0 / self.task.prompt_tokens.len() as f64;
            let range = layout.range(Tensor::TextEmbedding);
            for &tok in &self.task.prompt_tokens {
                let k = tok as usize;
                let row = &mut g[range.clone()][k * d.context..(k + 1) * d.context];
                for (r, dc) in row.iter_mut().zip(&dctx) {
                    *r += inv * dc;
                }
            }
        }

        for (gb, dc) in g[layout.range(Tensor::AdapterBias)].iter_mut().zip(&dctx) {
            *gb += dc;
        }
        outer_acc(
            &self.ctx.projected,
            &dctx,
            &mut g[layout.range(Tensor::AdapterWeight)],
        );
        if p.is_trainable(Tensor::EncoderProjection) {
            let mut dproj = vec![0.0; d.encoder];
            mat_vec_acc(p.tensor(Tensor::AdapterWeight), &dctx, &mut dproj);
            outer_acc(
                &self.ctx.features,
                &dproj,
                &mut g[layout.range(Tensor::EncoderProjection)],
            );
        }
    }
}
