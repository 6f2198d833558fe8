//! The frozen next-token backbone: token embeddings concatenated over a
//! fixed window, one tanh hidden layer and an output projection.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{add_outer_slice, matvec_t_slice, softmax_cross_entropy_slice, Matrix};
use crate::rng;
use crate::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            context_len: 8,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "backbone: context_len, embed_dim and hidden_dim must be >= 1".into(),
            ));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "backbone.vocab_size must be >= 4, got {}",
                self.vocab_size
            )));
        }
        if self.vocab_size > u16::MAX as usize || self.input_dim() > u16::MAX as usize {
            return Err(Error::Config("backbone dimensions exceed u16".into()));
        }
        Ok(())
    }

    /// Width of the concatenated embedding window.
    pub fn input_dim(&self) -> usize {
        self.context_len * self.embed_dim
    }
}

/// The two linear layers that carry adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Hidden = 0,
    Output = 1,
}

impl LayerId {
    pub const ALL: [LayerId; 2] = [LayerId::Hidden, LayerId::Output];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(LayerId::Hidden),
            1 => Some(LayerId::Output),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    /// `W x + b`
    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec_unchecked(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// One next-token prediction: a full window of `context_len` tokens and its target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub context: Vec<Token>,
    pub target: Token,
}

/// The last `len` tokens of `history`, left-padded with token 0.
pub fn window(history: &[Token], len: usize) -> Vec<Token> {
    let mut out = vec![0; len];
    let take = history.len().min(len);
    out[len - take..].copy_from_slice(&history[history.len() - take..]);
    out
}

/// Expands a token sequence into predictions for positions `start..`.
pub fn predictions_for(sequence: &[Token], start: usize, context_len: usize) -> Vec<Prediction> {
    (start..sequence.len())
        .map(|i| Prediction {
            context: window(&sequence[..i], context_len),
            target: sequence[i],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    config: BackboneConfig,
    embedding: Matrix,
    hidden: Linear,
    output: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            lr: 0.1,
        }
    }
}

impl Backbone {
    /// Seeded random initialization (before pre-training).
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(rng::derive(seed, rng::BACKBONE));
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
        };
        let d_in = config.input_dim();
        let embedding = gauss(config.vocab_size, config.embed_dim, 1.0);
        let hidden = Linear {
            weight: gauss(config.hidden_dim, d_in, 1.0 / (d_in as f64).sqrt()),
            bias: vec![0.0; config.hidden_dim],
        };
        let output = Linear {
            weight: gauss(
                config.vocab_size,
                config.hidden_dim,
                1.0 / (config.hidden_dim as f64).sqrt(),
            ),
            bias: vec![0.0; config.vocab_size],
        };
        Ok(Self {
            config,
            embedding,
            hidden,
            output,
        })
    }

    /// Assembles a backbone from explicit weights.
    pub fn from_parts(
        config: BackboneConfig,
        embedding: Matrix,
        hidden: Linear,
        output: Linear,
    ) -> Result<Self> {
        config.validate()?;
        let d_in = config.input_dim();
        let check = |name: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::dim(name, got, want))
            } else {
                Ok(())
            }
        };
        check(
            "embedding",
            embedding.shape(),
            (config.vocab_size, config.embed_dim),
        )?;
        check("hidden", hidden.weight.shape(), (config.hidden_dim, d_in))?;
        check(
            "hidden bias",
            (hidden.bias.len(), 1),
            (config.hidden_dim, 1),
        )?;
        check(
            "output",
            output.weight.shape(),
            (config.vocab_size, config.hidden_dim),
        )?;
        check(
            "output bias",
            (output.bias.len(), 1),
            (config.vocab_size, 1),
        )?;
        Ok(Self {
            config,
            embedding,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layer(&self, id: LayerId) -> &Linear {
        match id {
            LayerId::Hidden => &self.hidden,
            LayerId::Output => &self.output,
        }
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    /// Concatenated embeddings of a full window.
    pub(crate) fn embed(&self, context: &[Token]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.config.input_dim());
        for &t in context {
            x.extend_from_slice(self.embedding.row(t as usize));
        }
        x
    }

    /// Next-token logits for a window, without any adapter.
    pub fn logits(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let x = self.embed(context);
        let h: Vec<f64> = self.hidden.apply(&x).into_iter().map(f64::tanh).collect();
        Ok(self.output.apply(&h))
    }

    pub(crate) fn check_context(&self, context: &[Token]) -> Result<()> {
        if context.len() != self.config.context_len {
            return Err(Error::InvalidArgument(format!(
                "context length {} != context_len {}",
                context.len(),
                self.config.context_len
            )));
        }
        self.check_tokens(context)
    }

    pub fn num_params(&self) -> usize {
        self.embedding.data().len()
            + self.hidden.weight.data().len()
            + self.hidden.bias.len()
            + self.output.weight.data().len()
            + self.output.bias.len()
    }

    /// Flattened parameters: embedding, hidden W, hidden b, output W, output b.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(self.embedding.data());
        p.extend_from_slice(self.hidden.weight.data());
        p.extend_from_slice(&self.hidden.bias);
        p.extend_from_slice(self.output.weight.data());
        p.extend_from_slice(&self.output.bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim(
                "set_params",
                (params.len(), 1),
                (self.num_params(), 1),
            ));
        }
        let mut rest = params;
        for dst in [
            self.embedding.data_mut(),
            self.hidden.weight.data_mut(),
            &mut self.hidden.bias[..],
            self.output.weight.data_mut(),
            &mut self.output.bias[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Mean NLL over a batch and its gradient w.r.t. every backbone parameter.
    pub fn loss_and_grad(&self, batch: &[Prediction]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = self.config;
        let (n_emb, n_w1, n_b1, n_w2) = (
            self.embedding.data().len(),
            self.hidden.weight.data().len(),
            self.hidden.bias.len(),
            self.output.weight.data().len(),
        );
        let mut grad = vec![0.0; self.num_params()];
        let weight = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for p in batch {
            self.check_context(&p.context)?;
            self.check_tokens(&[p.target])?;
            let x = self.embed(&p.context);
            let h: Vec<f64> = self.hidden.apply(&x).into_iter().map(f64::tanh).collect();
            let logits = self.output.apply(&h);
            let (loss, dz2) = softmax_cross_entropy_slice(&logits, p.target as usize)?;
            total += loss;

            let (g_emb, rest) = grad.split_at_mut(n_emb);
            let (g_w1, rest) = rest.split_at_mut(n_w1);
            let (g_b1, rest) = rest.split_at_mut(n_b1);
            let (g_w2, g_b2) = rest.split_at_mut(n_w2);

            add_outer_slice(g_w2, cfg.hidden_dim, weight, &dz2, &h);
            for (g, d) in g_b2.iter_mut().zip(&dz2) {
                *g += weight * d;
            }
            let dh = matvec_t_slice(self.output.weight.data(), cfg.hidden_dim, &dz2);
            let dz1: Vec<f64> = dh
                .iter()
                .zip(&h)
                .map(|(d, hv)| d * (1.0 - hv * hv))
                .collect();
            add_outer_slice(g_w1, cfg.input_dim(), weight, &dz1, &x);
            for (g, d) in g_b1.iter_mut().zip(&dz1) {
                *g += weight * d;
            }
            let dx = matvec_t_slice(self.hidden.weight.data(), cfg.input_dim(), &dz1);
            for (slot, &t) in p.context.iter().enumerate() {
                let row = &mut g_emb[t as usize * cfg.embed_dim..(t as usize + 1) * cfg.embed_dim];
                let src = &dx[slot * cfg.embed_dim..(slot + 1) * cfg.embed_dim];
                for (g, d) in row.iter_mut().zip(src) {
                    *g += weight * d;
                }
            }
        }
        Ok((total * weight, grad))
    }

    /// Seeded mini-batch SGD on the full backbone. Returns per-step losses.
    ///
    /// This is the only code path that ever changes backbone weights; once a
    /// backbone is wrapped in a [`super::DualAdapterModel`] it is immutable.
    pub fn pretrain(
        &mut self,
        corpus: &[Prediction],
        opts: &PretrainOpts,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus("pre-training corpus".into()));
        }
        let mut rng = rng::rng(rng::derive(seed, rng::PRETRAIN));
        let mut params = self.params();
        let mut losses = Vec::with_capacity(opts.steps);
        let batch_size = opts.batch_size.max(1);
        let mut batch = Vec::with_capacity(batch_size);
        for step in 0..opts.steps {
            batch.clear();
            for _ in 0..batch_size {
                let idx = rand::Rng::random_range(&mut rng, 0..corpus.len());
                batch.push(corpus[idx].clone());
            }
            let (loss, grad) = self.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pre-training loss at step {step}"
                )));
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= opts.lr * g;
            }
            self.set_params(&params)?;
            losses.push(loss);
        }
        Ok(losses)
    }
}
