//! Joint CTC-attention sequence model.
//!
//! A unidirectional recurrent encoder feeds two heads: a linear CTC layer
//! over content tokens plus blank, and an attention decoder that emits
//! content tokens plus eos one step at a time. The decoder input at step
//! `t` is the embedding of the previous token (bos first) concatenated with
//! the previous attention context.

mod beam;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beam::{beam_search_with, greedy_with, BeamConfig, Hypothesis, NBestList, StepScorer};

use crate::corpus::Vocabulary;
use crate::losses::{GridKind, PosteriorGrid};
use crate::numerics::{Graph, NodeId, Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Update and reset gates.
    Gru,
    /// Minimal gated unit: a single forget gate.
    Mgu,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Mgu => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Mgu => "mgu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Content vocabulary size `z`.
    pub vocab_size: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub emb_dim: usize,
    pub cell: CellKind,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Small defaults sized for the synthetic corpus.
    pub fn new(input_dim: usize, vocab_size: usize) -> Self {
        Self {
            input_dim,
            vocab_size,
            enc_hidden: 32,
            enc_layers: 1,
            dec_hidden: 32,
            att_dim: 16,
            emb_dim: 8,
            cell: CellKind::Gru,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("enc_hidden", self.enc_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_hidden", self.dec_hidden),
            ("att_dim", self.att_dim),
            ("emb_dim", self.emb_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary { content: self.vocab_size }
    }

    /// `(name, rows, cols)` of every parameter tensor, in storage order.
    pub fn num_parameters(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }

    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let g = self.cell.gates();
        let (h, hd, z) = (self.enc_hidden, self.dec_hidden, self.vocab_size);
        let mut out = Vec::new();
        for l in 0..self.enc_layers {
            let fan_in = if l == 0 { self.input_dim } else { h };
            out.push((format!("enc.{l}.w_x"), fan_in, g * h));
            out.push((format!("enc.{l}.w_h"), h, g * h));
            out.push((format!("enc.{l}.b"), 1, g * h));
        }
        out.push(("att.w_k".into(), h, self.att_dim));
        out.push(("att.w_q".into(), hd, self.att_dim));
        out.push(("att.v".into(), self.att_dim, 1));
        // Rows: content tokens, then bos.
        out.push(("dec.emb".into(), z + 1, self.emb_dim));
        out.push(("dec.w_x".into(), self.emb_dim + h, g * hd));
        out.push(("dec.w_h".into(), hd, g * hd));
        out.push(("dec.b".into(), 1, g * hd));
        out.push((DEC_OUT_W.into(), hd + h, z + 1));
        out.push((DEC_OUT_B.into(), 1, z + 1));
        out.push((CTC_W.into(), h, z + 1));
        out.push((CTC_B.into(), 1, z + 1));
        out
    }
}

pub const DEC_OUT_W: &str = "dec.out.w";
pub const DEC_OUT_B: &str = "dec.out.b";
pub const CTC_W: &str = "ctc.w";
pub const CTC_B: &str = "ctc.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor<T>>,
}

fn init_tensor(rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> Vec<f64> {
    if name.ends_with(".b") {
        return vec![0.0; rows * cols];
    }
    let bound = if name == "dec.emb" { 1.0 } else { 1.0 / (rows as f64).sqrt() };
    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
}

impl<T: Real> ModelParams<T> {
    /// Seeded uniform initialization; biases start at zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                let data = init_tensor(&mut rng, &name, r, c).into_iter().map(T::of).collect();
                Ok(NamedTensor {
                    value: Tensor::from_vec(r, c, data)?,
                    name,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Checks names, shapes and finiteness against the config layout.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, r, c), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || t.value.shape() != (*r, *c) {
                return Err(Error::Shape {
                    context: "model parameters",
                    expected: format!("{name} {r}x{c}"),
                    found: format!("{} {}x{}", t.name, t.value.rows(), t.value.cols()),
                });
            }
            if !t.value.is_finite() {
                return Err(Error::NonFinite("model parameter"));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: t.value.cast(),
                })
                .collect(),
        }
    }

    /// Redraws the named tensors from a fresh seeded initializer, leaving
    /// every other tensor untouched.
    pub fn reinitialize(&mut self, names: &[&str], seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in names {
            let t = self
                .get_mut(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no parameter named {name}")))?;
            let (r, c) = t.shape();
            let data = init_tensor(&mut rng, name, r, c);
            t.data_mut().iter_mut().zip(data).for_each(|(d, v)| *d = T::of(v));
        }
        Ok(())
    }
}

/// Graph handles of the encoder output.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStates {
    /// `T_x x H`.
    pub states: NodeId,
    /// Attention keys `states · W_k`, `T_x x A`.
    pub keys: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: NodeId,
    pub context: NodeId,
    /// Attention weights that produced `context`, `1 x T_x`.
    pub attention: Option<NodeId>,
}

struct Layer {
    w_x: NodeId,
    w_h: NodeId,
    b: NodeId,
    /// MGU only: column blocks of `w_h` for the forget gate and candidate.
    split: Option<(NodeId, NodeId)>,
}

/// Model parameters placed into one graph.
pub struct Bound {
    config: ModelConfig,
    nodes: Vec<NodeId>,
    enc: Vec<Layer>,
    dec: Layer,
    att_k: NodeId,
    att_q: NodeId,
    att_v: NodeId,
    emb: NodeId,
    out_w: NodeId,
    out_b: NodeId,
    ctc_w: NodeId,
    ctc_b: NodeId,
}

impl Bound {
    /// Adds every parameter to `graph`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn new<T: Real>(graph: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Result<Self> {
        params.validate()?;
        let nodes: Vec<NodeId> = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.value.clone())
                } else {
                    graph.constant(t.value.clone())
                }
            })
            .collect();
        Self::attach(graph, &params.config, nodes)
    }

    /// Binds nodes already in `graph`, given in layout order.
    pub fn attach<T: Real>(graph: &mut Graph<T>, config: &ModelConfig, nodes: Vec<NodeId>) -> Result<Self> {
        let cfg = config;
        let layout = cfg.layout();
        if layout.len() != nodes.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter nodes, found {}",
                layout.len(),
                nodes.len()
            )));
        }
        for ((name, r, c), n) in layout.iter().zip(&nodes) {
            if graph.value(*n).shape() != (*r, *c) {
                return Err(Error::Shape {
                    context: "model parameters",
                    expected: format!("{name} {r}x{c}"),
                    found: format!("{:?}", graph.value(*n).shape()),
                });
            }
        }
        let by_name = |name: &str| -> Result<NodeId> {
            layout
                .iter()
                .position(|t| t.0 == name)
                .map(|i| nodes[i])
                .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
        };
        let layer = |graph: &mut Graph<T>, prefix: &str, hidden: usize| -> Result<Layer> {
            let w_h = by_name(&format!("{prefix}.w_h"))?;
            let split = match cfg.cell {
                CellKind::Gru => None,
                CellKind::Mgu => Some((
                    graph.slice(w_h, 0..hidden, 0..hidden)?,
                    graph.slice(w_h, 0..hidden, hidden..2 * hidden)?,
                )),
            };
            Ok(Layer {
                w_x: by_name(&format!("{prefix}.w_x"))?,
                w_h,
                b: by_name(&format!("{prefix}.b"))?,
                split,
            })
        };
        let enc = (0..cfg.enc_layers)
            .map(|l| layer(graph, &format!("enc.{l}"), cfg.enc_hidden))
            .collect::<Result<Vec<_>>>()?;
        let dec = layer(graph, "dec", cfg.dec_hidden)?;
        Ok(Self {
            enc,
            dec,
            att_k: by_name("att.w_k")?,
            att_q: by_name("att.w_q")?,
            att_v: by_name("att.v")?,
            emb: by_name("dec.emb")?,
            out_w: by_name(DEC_OUT_W)?,
            out_b: by_name(DEC_OUT_B)?,
            ctc_w: by_name(CTC_W)?,
            ctc_b: by_name(CTC_B)?,
            config: cfg.clone(),
            nodes,
        })
    }

    /// Parameter nodes in the order of [`ModelParams::tensors`].
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// One recurrent step. `pre` is the `1 x gH` input pre-activation
    /// (input projection plus bias), either a node or a row of one.
    fn cell<T: Real>(
        &self,
        graph: &mut Graph<T>,
        layer: &Layer,
        pre: (NodeId, usize),
        h: NodeId,
        hidden: usize,
    ) -> Result<NodeId> {
        let (src, r) = pre;
        let gate = |graph: &mut Graph<T>, k: usize| graph.slice(src, r..r + 1, k * hidden..(k + 1) * hidden);
        match layer.split {
            None => {
                let hu = graph.matmul(h, layer.w_h)?;
                let hz = graph.slice(hu, 0..1, 0..hidden)?;
                let hr = graph.slice(hu, 0..1, hidden..2 * hidden)?;
                let hn = graph.slice(hu, 0..1, 2 * hidden..3 * hidden)?;
                let (xz, xr, xn) = (gate(graph, 0)?, gate(graph, 1)?, gate(graph, 2)?);
                let z = graph.add(xz, hz)?;
                let z = graph.sigmoid(z);
                let r = graph.add(xr, hr)?;
                let r = graph.sigmoid(r);
                let rn = graph.mul(r, hn)?;
                let n = graph.add(xn, rn)?;
                let n = graph.tanh(n);
                // (1 - z)·n + z·h
                let d = graph.sub(h, n)?;
                let zd = graph.mul(z, d)?;
                graph.add(n, zd)
            }
            Some((uf, un)) => {
                let (xf, xn) = (gate(graph, 0)?, gate(graph, 1)?);
                let hf = graph.matmul(h, uf)?;
                let f = graph.add(xf, hf)?;
                let f = graph.sigmoid(f);
                let fh = graph.mul(f, h)?;
                let hn = graph.matmul(fh, un)?;
                let n = graph.add(xn, hn)?;
                let n = graph.tanh(n);
                // (1 - f)·h + f·n
                let d = graph.sub(n, h)?;
                let fd = graph.mul(f, d)?;
                graph.add(h, fd)
            }
        }
    }

    /// Runs the encoder over `T_x x d` frames. Dropout is applied to the
    /// encoder output only when `dropout` carries an RNG.
    pub fn encode<T: Real>(
        &self,
        graph: &mut Graph<T>,
        frames: &Tensor<T>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderStates> {
        let cfg = &self.config;
        if frames.rows() == 0 {
            return Err(Error::Shape {
                context: "encode",
                expected: "at least one frame".into(),
                found: "0 frames".into(),
            });
        }
        if frames.cols() != cfg.input_dim {
            return Err(Error::Shape {
                context: "encode",
                expected: format!("{} input columns", cfg.input_dim),
                found: format!("{}", frames.cols()),
            });
        }
        let h_dim = cfg.enc_hidden;
        let mut x = graph.constant(frames.clone());
        for layer in &self.enc {
            let xw = graph.matmul(x, layer.w_x)?;
            let pre = graph.add(xw, layer.b)?;
            let mut h = graph.constant(Tensor::zeros(1, h_dim));
            let mut outs = Vec::with_capacity(frames.rows());
            for t in 0..frames.rows() {
                h = self.cell(graph, layer, (pre, t), h, h_dim)?;
                outs.push(h);
            }
            x = graph.concat_rows(&outs)?;
        }
        if let Some(rng) = dropout.filter(|_| cfg.dropout > 0.0) {
            let keep = 1.0 - cfg.dropout;
            let mask = (0..frames.rows() * h_dim)
                .map(|_| if rng.random::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() })
                .collect();
            let mask = graph.constant(Tensor::from_vec(frames.rows(), h_dim, mask)?);
            x = graph.mul(x, mask)?;
        }
        let keys = graph.matmul(x, self.att_k)?;
        Ok(EncoderStates { states: x, keys })
    }

    /// Per-frame log-posteriors over content tokens plus blank.
    pub fn ctc_posteriors<T: Real>(&self, graph: &mut Graph<T>, enc: &EncoderStates) -> Result<PosteriorGrid> {
        let logits = graph.matmul(enc.states, self.ctc_w)?;
        let logits = graph.add(logits, self.ctc_b)?;
        Ok(PosteriorGrid::new(graph.log_softmax(logits), GridKind::CtcFrame))
    }

    pub fn initial_state<T: Real>(&self, graph: &mut Graph<T>) -> DecoderState {
        DecoderState {
            hidden: graph.constant(Tensor::zeros(1, self.config.dec_hidden)),
            context: graph.constant(Tensor::zeros(1, self.config.enc_hidden)),
            attention: None,
        }
    }

    /// Additive attention of `query` over the encoder rows.
    fn attend<T: Real>(&self, graph: &mut Graph<T>, enc: &EncoderStates, query: NodeId) -> Result<(NodeId, NodeId)> {
        let q = graph.matmul(query, self.att_q)?;
        let e = graph.add(enc.keys, q)?;
        let e = graph.tanh(e);
        let scores = graph.matmul(e, self.att_v)?;
        let scores = graph.transpose(scores);
        let alpha = graph.softmax(scores);
        let context = graph.matmul(alpha, enc.states)?;
        Ok((alpha, context))
    }

    /// Consumes `prev` (a content token or bos) and returns the `1 x (z+1)`
    /// log-distribution over content tokens plus eos, with the next state.
    pub fn decode_step<T: Real>(
        &self,
        graph: &mut Graph<T>,
        enc: &EncoderStates,
        state: &DecoderState,
        prev: usize,
    ) -> Result<(NodeId, DecoderState)> {
        let vocab = self.config.vocabulary();
        let row = if prev == vocab.bos() {
            vocab.content_size()
        } else if prev < vocab.content_size() {
            prev
        } else {
            return Err(Error::TokenOutOfVocab {
                token: prev,
                size: vocab.content_size(),
            });
        };
        let emb = graph.gather_rows(self.emb, &[row])?;
        let input = graph.concat_cols(emb, state.context)?;
        let xw = graph.matmul(input, self.dec.w_x)?;
        let pre = graph.add(xw, self.dec.b)?;
        let hidden = self.cell(graph, &self.dec, (pre, 0), state.hidden, self.config.dec_hidden)?;
        let (alpha, context) = self.attend(graph, enc, hidden)?;
        let features = graph.concat_cols(hidden, context)?;
        let logits = graph.matmul(features, self.out_w)?;
        let logits = graph.add(logits, self.out_b)?;
        let log_probs = graph.log_softmax(logits);
        Ok((
            log_probs,
            DecoderState {
                hidden,
                context,
                attention: Some(alpha),
            },
        ))
    }

    /// `(T_y + 1) x (z + 1)` decoder log-posteriors conditioned on the
    /// ground-truth prefix at every step (bos first, eos targeted last).
    pub fn teacher_forced<T: Real>(
        &self,
        graph: &mut Graph<T>,
        enc: &EncoderStates,
        tokens: &[usize],
    ) -> Result<PosteriorGrid> {
        self.config.vocabulary().check(tokens)?;
        let mut state = self.initial_state(graph);
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        let bos = self.config.vocabulary().bos();
        for prev in core::iter::once(bos).chain(tokens.iter().copied()) {
            let (lp, next) = self.decode_step(graph, enc, &state, prev)?;
            rows.push(lp);
            state = next;
        }
        Ok(PosteriorGrid::new(graph.concat_rows(&rows)?, GridKind::DecoderStep))
    }
}

/// Encoder output rows, computed without dropout.
pub fn encode<T: Real>(params: &ModelParams<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params, false)?;
    let enc = bound.encode(&mut graph, frames, None)?;
    Ok(graph.value(enc.states).clone())
}

/// Per-frame probabilities over content tokens plus blank.
pub fn ctc_frame_posteriors<T: Real>(params: &ModelParams<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params, false)?;
    let enc = bound.encode(&mut graph, frames, None)?;
    Ok(bound.ctc_posteriors(&mut graph, &enc)?.probs(&graph))
}

/// Teacher-forced decoder probabilities, `(T_y + 1) x (z + 1)`.
pub fn teacher_forced_posteriors<T: Real>(
    params: &ModelParams<T>,
    frames: &Tensor<T>,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params, false)?;
    let enc = bound.encode(&mut graph, frames, None)?;
    Ok(bound.teacher_forced(&mut graph, &enc, tokens)?.probs(&graph))
}

/// The attention decoder of a frozen model as a beam-search scorer.
pub struct ModelScorer<T> {
    graph: Graph<T>,
    bound: Bound,
    enc: EncoderStates,
    eos_column: usize,
    bos: usize,
}

impl<T: Real> ModelScorer<T> {
    pub fn new(params: &ModelParams<T>, frames: &Tensor<T>) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = Bound::new(&mut graph, params, false)?;
        let enc = bound.encode(&mut graph, frames, None)?;
        let vocab = params.config.vocabulary();
        Ok(Self {
            graph,
            bound,
            enc,
            eos_column: vocab.eos_column(),
            bos: vocab.bos(),
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<T> {
    type State = DecoderState;

    fn eos_column(&self) -> usize {
        self.eos_column
    }

    fn start(&mut self) -> Result<DecoderState> {
        Ok(self.bound.initial_state(&mut self.graph))
    }

    fn step(&mut self, state: &DecoderState, prev: Option<usize>) -> Result<(Vec<f64>, DecoderState)> {
        let prev = prev.unwrap_or(self.bos);
        let (lp, next) = self.bound.decode_step(&mut self.graph, &self.enc, state, prev)?;
        Ok((self.graph.value(lp).data().iter().map(|v| v.as_f64()).collect(), next))
    }
}

pub fn beam_search<T: Real>(params: &ModelParams<T>, frames: &Tensor<T>, config: &BeamConfig) -> Result<NBestList> {
    beam_search_with(&mut ModelScorer::new(params, frames)?, config)
}

pub fn greedy_decode<T: Real>(params: &ModelParams<T>, frames: &Tensor<T>, max_len: usize) -> Result<Hypothesis> {
    greedy_with(&mut ModelScorer::new(params, frames)?, max_len)
}

#[cfg(test)]
mod tests;
