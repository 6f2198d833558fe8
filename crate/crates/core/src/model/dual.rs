//! Frozen backbone with two parallel low-rank adapter streams.
//!
//! Both streams attach to the hidden and output projections and both always
//! take part in the forward pass; the trainability selector only decides
//! which stream receives gradients.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, LayerId, Prediction};
use crate::error::{Error, Result};
use crate::math::{add_outer_slice, matvec_t_slice, softmax_cross_entropy_slice, Matrix};
use crate::rng;
use crate::Token;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the Gaussian used for `A`.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > u16::MAX as usize {
            return Err(Error::Config(format!(
                "lora.rank must be in 1..=65535, got {}",
                self.rank
            )));
        }
        if !self.alpha.is_finite() || self.init_std < 0.0 || !self.init_std.is_finite() {
            return Err(Error::Config(
                "lora.alpha and lora.init_std must be finite, init_std >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One low-rank bypass `(alpha / r) · B · A` on a linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterPair {
    /// `A` from a seeded Gaussian, `B` all zeros.
    pub fn init(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut rng::Rng) -> Self {
        let a = if cfg.init_std > 0.0 {
            let normal = Normal::new(0.0, cfg.init_std).expect("finite std");
            Matrix::from_fn(cfg.rank, d_in, |_, _| normal.sample(rng))
        } else {
            Matrix::zeros(cfg.rank, d_in)
        };
        Self {
            a,
            b: Matrix::zeros(d_out, cfg.rank),
            rank: cfg.rank,
            alpha: cfg.alpha,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }

    /// The dense update `(alpha / r) · B · A`.
    pub fn delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter shapes")
            .scale(self.scaling())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    /// Rectification stream, trained on raw data and aggregated globally.
    R,
    /// Smoothing stream, trained on distilled data and kept on the client.
    S,
}

impl Stream {
    pub fn tag(self) -> u8 {
        match self {
            Stream::R => b'R',
            Stream::S => b'S',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            b'R' => Some(Stream::R),
            b'S' => Some(Stream::S),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamSelector {
    None,
    ROnly,
    SOnly,
    Both,
}

impl StreamSelector {
    pub fn includes(self, stream: Stream) -> bool {
        matches!(
            (self, stream),
            (StreamSelector::Both, _)
                | (StreamSelector::ROnly, Stream::R)
                | (StreamSelector::SOnly, Stream::S)
        )
    }

    pub fn only(stream: Stream) -> Self {
        match stream {
            Stream::R => StreamSelector::ROnly,
            Stream::S => StreamSelector::SOnly,
        }
    }
}

/// Gradients for both streams, flattened in stream layout order
/// (hidden A, hidden B, output A, output B). A frozen stream's buffer is
/// identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            r: vec![0.0; len],
            s: vec![0.0; len],
        }
    }

    pub fn stream(&self, stream: Stream) -> &[f64] {
        match stream {
            Stream::R => &self.r,
            Stream::S => &self.s,
        }
    }

    pub fn stream_mut(&mut self, stream: Stream) -> &mut Vec<f64> {
        match stream {
            Stream::R => &mut self.r,
            Stream::S => &mut self.s,
        }
    }

    pub fn is_zero(&self, stream: Stream) -> bool {
        self.stream(stream).iter().all(|&g| g == 0.0)
    }

    pub fn scale(&mut self, c: f64) {
        self.r
            .iter_mut()
            .chain(self.s.iter_mut())
            .for_each(|g| *g *= c);
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Trace {
    x: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
    /// `A·input` per (stream, layer): index `[stream][layer]`.
    u: [[Vec<f64>; 2]; 2],
}

#[derive(Clone, Debug)]
pub struct DualAdapterModel {
    backbone: Arc<Backbone>,
    lora: LoraConfig,
    lora_r: Vec<AdapterPair>,
    lora_s: Vec<AdapterPair>,
    trainable: StreamSelector,
}

fn stream_index(stream: Stream) -> usize {
    match stream {
        Stream::R => 0,
        Stream::S => 1,
    }
}

impl DualAdapterModel {
    /// Wraps a (pre-trained) backbone with freshly initialized adapters.
    /// Both streams start with `B = 0`, so the model equals the backbone.
    pub fn new(backbone: Arc<Backbone>, lora: LoraConfig, seed: u64) -> Result<Self> {
        lora.validate()?;
        let make = |label: u64| {
            let mut rng = rng::rng(rng::derive(seed, label));
            LayerId::ALL
                .iter()
                .map(|&id| {
                    let layer = backbone.layer(id);
                    AdapterPair::init(layer.d_in(), layer.d_out(), &lora, &mut rng)
                })
                .collect::<Vec<_>>()
        };
        let lora_r = make(rng::ADAPTER_R);
        let lora_s = make(rng::ADAPTER_S);
        Ok(Self {
            backbone,
            lora,
            lora_r,
            lora_s,
            trainable: StreamSelector::ROnly,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_arc(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn trainable(&self) -> StreamSelector {
        self.trainable
    }

    pub fn set_trainable(&mut self, selector: StreamSelector) {
        self.trainable = selector;
    }

    pub fn adapters(&self, stream: Stream) -> &[AdapterPair] {
        match stream {
            Stream::R => &self.lora_r,
            Stream::S => &self.lora_s,
        }
    }

    pub fn adapters_mut(&mut self, stream: Stream) -> &mut [AdapterPair] {
        match stream {
            Stream::R => &mut self.lora_r,
            Stream::S => &mut self.lora_s,
        }
    }

    pub fn adapter(&self, stream: Stream, layer: LayerId) -> &AdapterPair {
        &self.adapters(stream)[layer as usize]
    }

    /// Number of parameters in one stream.
    pub fn stream_len(&self) -> usize {
        self.lora_r.iter().map(AdapterPair::num_params).sum()
    }

    pub fn stream_params(&self, stream: Stream) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.stream_len());
        for pair in self.adapters(stream) {
            out.extend_from_slice(pair.a.data());
            out.extend_from_slice(pair.b.data());
        }
        out
    }

    pub fn set_stream_params(&mut self, stream: Stream, params: &[f64]) -> Result<()> {
        if params.len() != self.stream_len() {
            return Err(Error::dim(
                "set_stream_params",
                (params.len(), 1),
                (self.stream_len(), 1),
            ));
        }
        let mut rest = params;
        for pair in self.adapters_mut(stream) {
            for m in [&mut pair.a, &mut pair.b] {
                let (head, tail) = rest.split_at(m.data().len());
                m.data_mut().copy_from_slice(head);
                rest = tail;
            }
        }
        Ok(())
    }

    /// Joint forward of one adapted layer on a column input:
    /// `W0·h + b + (α/r)·B_r·A_r·h + (α/r)·B_s·A_s·h`.
    pub fn dual_lora_forward(&self, h: &Matrix, layer: LayerId) -> Result<Matrix> {
        let base = self.backbone.layer(layer);
        if h.cols() != 1 || h.rows() != base.d_in() {
            return Err(Error::dim(
                "dual_lora_forward",
                (base.d_out(), base.d_in()),
                h.shape(),
            ));
        }
        let (out, _) = self.layer_forward(layer, h.data());
        Ok(Matrix::column(&out))
    }

    fn layer_forward(&self, layer: LayerId, input: &[f64]) -> (Vec<f64>, [Vec<f64>; 2]) {
        let mut out = self.backbone.layer(layer).apply(input);
        let mut us: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for stream in [Stream::R, Stream::S] {
            let pair = self.adapter(stream, layer);
            let u = pair.a.matvec_unchecked(input);
            let bypass = pair.b.matvec_unchecked(&u);
            let s = pair.scaling();
            for (o, v) in out.iter_mut().zip(&bypass) {
                *o += s * v;
            }
            us[stream_index(stream)] = u;
        }
        (out, us)
    }

    fn trace(&self, context: &[Token]) -> Trace {
        let x = self.backbone.embed(context);
        let (z1, u_hidden) = self.layer_forward(LayerId::Hidden, &x);
        let h: Vec<f64> = z1.into_iter().map(f64::tanh).collect();
        let (logits, u_output) = self.layer_forward(LayerId::Output, &h);
        let [uh_r, uh_s] = u_hidden;
        let [uo_r, uo_s] = u_output;
        Trace {
            x,
            h,
            logits,
            u: [[uh_r, uo_r], [uh_s, uo_s]],
        }
    }

    /// Next-token logits for a full context window.
    pub fn logits(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.backbone.check_context(context)?;
        Ok(self.trace(context).logits)
    }

    /// Offsets of (A, B) for each layer within a flattened stream.
    fn layout(&self) -> [(usize, usize); 2] {
        let mut offset = 0;
        let mut out = [(0, 0); 2];
        for (i, pair) in self.lora_r.iter().enumerate() {
            out[i] = (offset, offset + pair.a.data().len());
            offset += pair.num_params();
        }
        out
    }

    /// Backward through one adapted layer. Accumulates adapter gradients for
    /// trainable streams and returns the gradient w.r.t. the layer input.
    fn layer_backward(
        &self,
        layer: LayerId,
        input: &[f64],
        upstream: &[f64],
        trace_u: &[[Vec<f64>; 2]; 2],
        weight: f64,
        need_input_grad: bool,
        grad: &mut Gradient,
    ) -> Vec<f64> {
        let layout = self.layout()[layer as usize];
        let base = self.backbone.layer(layer);
        let mut d_input = if need_input_grad {
            base.weight.matvec_t_unchecked(upstream)
        } else {
            Vec::new()
        };
        for stream in [Stream::R, Stream::S] {
            let trainable = self.trainable.includes(stream);
            if !trainable && !need_input_grad {
                continue;
            }
            let pair = self.adapter(stream, layer);
            let s = pair.scaling();
            // du = s · Bᵀ · upstream
            let mut du = matvec_t_slice(pair.b.data(), pair.rank, upstream);
            du.iter_mut().for_each(|v| *v *= s);
            if trainable {
                let u = &trace_u[stream_index(stream)][layer as usize];
                let buf = grad.stream_mut(stream);
                let (a_off, b_off) = layout;
                let a_len = pair.a.data().len();
                let b_len = pair.b.data().len();
                add_outer_slice(
                    &mut buf[b_off..b_off + b_len],
                    pair.rank,
                    s * weight,
                    upstream,
                    u,
                );
                add_outer_slice(
                    &mut buf[a_off..a_off + a_len],
                    pair.d_in(),
                    weight,
                    &du,
                    input,
                );
            }
            if need_input_grad {
                let back = pair.a.matvec_t_unchecked(&du);
                for (d, v) in d_input.iter_mut().zip(&back) {
                    *d += v;
                }
            }
        }
        d_input
    }

    fn accumulate(
        &self,
        context: &[Token],
        target: Token,
        weight: f64,
        grad: &mut Gradient,
    ) -> Result<f64> {
        let trace = self.trace(context);
        let (loss, dz2) = softmax_cross_entropy_slice(&trace.logits, target as usize)?;
        if self.trainable == StreamSelector::None {
            return Ok(loss);
        }
        let dh = self.layer_backward(
            LayerId::Output,
            &trace.h,
            &dz2,
            &trace.u,
            weight,
            true,
            grad,
        );
        let dz1: Vec<f64> = dh
            .iter()
            .zip(&trace.h)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        self.layer_backward(
            LayerId::Hidden,
            &trace.x,
            &dz1,
            &trace.u,
            weight,
            false,
            grad,
        );
        Ok(loss)
    }

    /// NLL of one prediction and gradients for the trainable stream(s).
    pub fn forward_nll(&self, context: &[Token], target: Token) -> Result<(f64, Gradient)> {
        self.backbone.check_context(context)?;
        self.backbone.check_tokens(&[target])?;
        let mut grad = Gradient::zeros(self.stream_len());
        let loss = self.accumulate(context, target, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    /// Mean NLL over a batch with the mean gradient.
    pub fn batch_nll(&self, batch: &[Prediction]) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut grad = Gradient::zeros(self.stream_len());
        let mut total = 0.0;
        for p in batch {
            self.backbone.check_context(&p.context)?;
            self.backbone.check_tokens(&[p.target])?;
            total += self.accumulate(&p.context, p.target, weight, &mut grad)?;
        }
        Ok((total * weight, grad))
    }

    /// Mean NLL over a batch, no gradients.
    pub fn mean_nll(&self, batch: &[Prediction]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for p in batch {
            let logits = self.logits(&p.context)?;
            self.backbone.check_tokens(&[p.target])?;
            total += softmax_cross_entropy_slice(&logits, p.target as usize)?.0;
        }
        Ok(total / batch.len() as f64)
    }

    /// One SGD step on the trainable streams: `θ -= lr · (g + μ (θ - anchor))`.
    /// Frozen streams are not touched.
    pub fn sgd_step(
        &mut self,
        grad: &Gradient,
        lr: f64,
        prox: Option<(f64, Stream, &[f64])>,
    ) -> Result<()> {
        for stream in [Stream::R, Stream::S] {
            if !self.trainable.includes(stream) {
                continue;
            }
            let mut params = self.stream_params(stream);
            let g = grad.stream(stream);
            match prox {
                Some((mu, anchor_stream, anchor)) if mu > 0.0 && anchor_stream == stream => {
                    for ((p, g), a) in params.iter_mut().zip(g).zip(anchor) {
                        *p -= lr * (g + mu * (*p - a));
                    }
                }
                _ => {
                    for (p, g) in params.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            self.set_stream_params(stream, &params)?;
        }
        Ok(())
    }

    /// Swaps the parameter contents of the two streams.
    pub fn swap_streams(&mut self) {
        std::mem::swap(&mut self.lora_r, &mut self.lora_s);
    }

    /// Zeroes `A` and `B` of one stream.
    pub fn zero_stream(&mut self, stream: Stream) {
        for pair in self.adapters_mut(stream) {
            pair.a.data_mut().fill(0.0);
            pair.b.data_mut().fill(0.0);
        }
    }

    /// Re-initializes one stream (`A` Gaussian, `B` zero) from `seed`.
    pub fn reinit_stream(&mut self, stream: Stream, seed: u64) {
        let label = match stream {
            Stream::R => rng::ADAPTER_R,
            Stream::S => rng::ADAPTER_S,
        };
        let mut rng = rng::rng(rng::derive(seed, label));
        let lora = self.lora;
        let fresh: Vec<AdapterPair> = LayerId::ALL
            .iter()
            .map(|&id| {
                let layer = self.backbone.layer(id);
                AdapterPair::init(layer.d_in(), layer.d_out(), &lora, &mut rng)
            })
            .collect();
        match stream {
            Stream::R => self.lora_r = fresh,
            Stream::S => self.lora_s = fresh,
        }
    }
}
