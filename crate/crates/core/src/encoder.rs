//! Small dense-attention encoder with an exact reverse-mode gradient.
//!
//! Pre-norm residual stack over `x0 = E[token] + P[pos]`:
//!
//! ```text
//! u  = LN(x);  x += softmax(u Wq (u Wk)^T / sqrt(d)) (u Wv) Wo
//! u2 = LN(x);  x += gelu(u2 W1) W2
//! ```
//!
//! Layer norm carries no affine parameters and there is no final norm, so a
//! zero-layer encoder returns the raw embedding-plus-position rows.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{MarkerSequence, QUESTION_MARKER_ID, SENTENCE_MARKER_ID};
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Constant added to attention logits whose key is a marker token; 0 disables it.
    #[serde(default)]
    pub marker_key_bias: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            ffn_mult: 2,
            max_len: 512,
            vocab_size: 4,
            seed: 0,
            marker_key_bias: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 4 || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden size d={} must be even and >= 4",
                self.d
            )));
        }
        if self.ffn_mult == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "ffn_mult and max_len must be positive".into(),
            ));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must cover the reserved ids".into(),
            ));
        }
        if !self.marker_key_bias.is_finite() {
            return Err(Error::Config("marker_key_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    positional: Arc<Array2<f64>>,
}

/// Contextual vectors at the question marker and the `M` sentence markers.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerReps {
    pub q: Array1<f64>,
    /// One row per sentence.
    pub s: Array2<f64>,
}

impl MarkerReps {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            q: Array1::zeros(d),
            s: Array2::zeros((m, d)),
        }
    }

    pub fn num_sentences(&self) -> usize {
        self.s.nrows()
    }
}

fn sinusoidal(max_len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let rate = 10000f64.powf((i / 2 * 2) as f64 / d as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Gaussian weights with standard deviation `1/sqrt(d)`; deterministic per seed.
pub fn init_params(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let (d, h) = (cfg.d, cfg.hidden());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
    };
    let embedding = draw(cfg.vocab_size, d);
    let layers = (0..cfg.layers)
        .map(|_| LayerParams {
            wq: draw(d, d),
            wk: draw(d, d),
            wv: draw(d, d),
            wo: draw(d, d),
            w1: draw(d, h),
            w2: draw(h, d),
        })
        .collect();
    Ok(EncoderParams {
        cfg: cfg.clone(),
        embedding,
        layers,
        positional: Arc::new(sinusoidal(cfg.max_len, d)),
    })
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            cfg: self.cfg.clone(),
            embedding: z(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    w1: z(&l.w1),
                    w2: z(&l.w2),
                })
                .collect(),
            positional: Arc::clone(&self.positional),
        }
    }

    pub fn positional(&self) -> &Array2<f64> {
        &self.positional
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, w) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w1", &l.w1),
                ("w2", &l.w2),
            ] {
                out.push((format!("layer{i}.{name}"), w.view().into_dyn()));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![(
            "embedding".to_string(),
            self.embedding.view_mut().into_dyn(),
        )];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
            } = l;
            for (name, w) in [
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("w1", w1),
                ("w2", w2),
            ] {
                out.push((format!("layer{i}.{name}"), w.view_mut().into_dyn()));
            }
        }
        out
    }
}

fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut sigma = Array1::zeros(x.nrows());
    for (mut row, sig) in y.rows_mut().into_iter().zip(sigma.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *sig = (var + LN_EPS).sqrt();
        row /= *sig;
    }
    (y, sigma)
}

fn layer_norm_backward(y: &Array2<f64>, sigma: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = dy.clone();
    for ((mut dxr, yr), &sig) in dx.rows_mut().into_iter().zip(y.rows()).zip(sigma) {
        let mean_dy = dxr.sum() / d;
        let mean_dy_y = dxr.dot(&yr) / d;
        dxr.zip_mut_with(&yr, |g, &yv| *g = (*g - mean_dy - yv * mean_dy_y) / sig);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    u: Array2<f64>,
    u_sigma: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    u2: Array2<f64>,
    u2_sigma: Array1<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    caches: Vec<LayerCache>,
    output: Array2<f64>,
    question_pos: usize,
    sentence_pos: Vec<usize>,
}

impl EncoderTrace {
    pub fn reps(&self) -> MarkerReps {
        let q = self.output.row(self.question_pos).to_owned();
        let s = self.output.select(Axis(0), &self.sentence_pos);
        MarkerReps { q, s }
    }

    /// Attention weights of every layer, rows indexed by query position.
    pub fn attention(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.caches.iter().map(|c| &c.attn)
    }

    /// Full `n x d` output of the last layer.
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn check_sequence(seq: &MarkerSequence, p: &EncoderParams) -> Result<()> {
    if seq.len() > p.cfg.max_len {
        return Err(Error::Length {
            len: seq.len(),
            max_len: p.cfg.max_len,
        });
    }
    if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= p.cfg.vocab_size) {
        return Err(Error::Shape(format!(
            "token id {t} outside embedding table of {}",
            p.cfg.vocab_size
        )));
    }
    let n = seq.len();
    if seq.question_marker_pos >= n || seq.sentence_marker_pos.iter().any(|&j| j >= n) {
        return Err(Error::Shape("marker position beyond sequence end".into()));
    }
    Ok(())
}

pub fn encode_trace(seq: &MarkerSequence, p: &EncoderParams) -> Result<EncoderTrace> {
    check_sequence(seq, p)?;
    let (n, d) = (seq.len(), p.cfg.d);
    let mut x = Array2::zeros((n, d));
    for (i, &t) in seq.tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row += &p.embedding.row(t as usize);
        row += &p.positional.row(i);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let marker_keys: Vec<usize> = if p.cfg.marker_key_bias != 0.0 {
        seq.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == QUESTION_MARKER_ID || t == SENTENCE_MARKER_ID)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };

    let mut caches = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (u, u_sigma) = layer_norm(&x);
        let q = u.dot(&layer.wq);
        let k = u.dot(&layer.wk);
        let v = u.dot(&layer.wv);
        let mut attn = q.dot(&k.t()) * scale;
        for &j in &marker_keys {
            attn.column_mut(j)
                .mapv_inplace(|a| a + p.cfg.marker_key_bias);
        }
        softmax_rows(&mut attn);
        let ctx = attn.dot(&v);
        x += &ctx.dot(&layer.wo);

        let (u2, u2_sigma) = layer_norm(&x);
        let pre = u2.dot(&layer.w1);
        let act = pre.mapv(gelu);
        x += &act.dot(&layer.w2);
        caches.push(LayerCache {
            u,
            u_sigma,
            q,
            k,
            v,
            attn,
            ctx,
            u2,
            u2_sigma,
            pre,
            act,
        });
    }
    Ok(EncoderTrace {
        caches,
        output: x,
        question_pos: seq.question_marker_pos,
        sentence_pos: seq.sentence_marker_pos.clone(),
    })
}

pub fn encode(seq: &MarkerSequence, p: &EncoderParams) -> Result<MarkerReps> {
    Ok(encode_trace(seq, p)?.reps())
}

/// Gradient of `<upstream, encode(seq, p)>` with respect to every parameter.
pub fn encode_backward(
    seq: &MarkerSequence,
    p: &EncoderParams,
    upstream: &MarkerReps,
) -> Result<EncoderParams> {
    let trace = encode_trace(seq, p)?;
    backward_from_trace(seq, p, &trace, upstream)
}

pub fn backward_from_trace(
    seq: &MarkerSequence,
    p: &EncoderParams,
    trace: &EncoderTrace,
    upstream: &MarkerReps,
) -> Result<EncoderParams> {
    let d = p.cfg.d;
    if upstream.q.len() != d
        || upstream.s.ncols() != d
        || upstream.s.nrows() != trace.sentence_pos.len()
    {
        return Err(Error::Shape(format!(
            "cotangent shapes q={} s={:?} do not match forward (d={d}, M={})",
            upstream.q.len(),
            upstream.s.dim(),
            trace.sentence_pos.len()
        )));
    }
    let mut grads = p.zeros_like();
    let mut dx = Array2::zeros(trace.output.raw_dim());
    {
        let mut row = dx.row_mut(trace.question_pos);
        row += &upstream.q;
    }
    for (j, &pos) in trace.sentence_pos.iter().enumerate() {
        let mut row = dx.row_mut(pos);
        row += &upstream.s.row(j);
    }

    let scale = 1.0 / (d as f64).sqrt();
    for ((layer, cache), g) in p
        .layers
        .iter()
        .zip(&trace.caches)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // feed-forward block
        g.w2 = cache.act.t().dot(&dx);
        let mut d_pre = dx.dot(&layer.w2.t());
        d_pre.zip_mut_with(&cache.pre, |dg, &h| *dg *= gelu_grad(h));
        g.w1 = cache.u2.t().dot(&d_pre);
        let du2 = d_pre.dot(&layer.w1.t());
        dx += &layer_norm_backward(&cache.u2, &cache.u2_sigma, &du2);

        // attention block
        g.wo = cache.ctx.t().dot(&dx);
        let d_ctx = dx.dot(&layer.wo.t());
        let d_attn = d_ctx.dot(&cache.v.t());
        let dv = cache.attn.t().dot(&d_ctx);
        // softmax backward: dS = A * (dA - rowsum(A * dA))
        let row_dot = (&cache.attn * &d_attn).sum_axis(Axis(1));
        let mut d_logits = &cache.attn * &(&d_attn - &row_dot.insert_axis(Axis(1)));
        d_logits *= scale;
        let dq = d_logits.dot(&cache.k);
        let dk = d_logits.t().dot(&cache.q);
        g.wq = cache.u.t().dot(&dq);
        g.wk = cache.u.t().dot(&dk);
        g.wv = cache.u.t().dot(&dv);
        let du = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        dx += &layer_norm_backward(&cache.u, &cache.u_sigma, &du);
    }

    for (i, &t) in seq.tokens.iter().enumerate() {
        let mut row = grads.embedding.row_mut(t as usize);
        row += &dx.slice(s![i, ..]);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_sequence, tokenize, QaInstance, QuestionTypes, Vocabulary};

    fn sample_seq(sentences: &[&str]) -> (MarkerSequence, Vocabulary) {
        let inst = QaInstance {
            id: "t".into(),
            question: tokenize("alpha beta gamma"),
            sentences: sentences.iter().map(|s| tokenize(s)).collect(),
            evidence: [0].into_iter().collect(),
            qtype: QuestionTypes::hotpot().get(2).unwrap(),
            answerable: true,
            answer: None,
        };
        let vocab = Vocabulary::build([&inst]);
        (assemble_sequence(&inst, &vocab).unwrap(), vocab)
    }

    fn cfg(d: usize, layers: usize, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            d,
            layers,
            ffn_mult: 2,
            max_len: 64,
            vocab_size: vocab,
            seed: 7,
            marker_key_bias: 0.0,
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = init_params(&cfg(8, 2, 20)).unwrap();
        let b = init_params(&cfg(8, 2, 20)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn odd_d_rejected() {
        assert!(matches!(init_params(&cfg(7, 1, 20)), Err(Error::Config(_))));
    }

    #[test]
    fn init_means_within_three_sigma() {
        let p = init_params(&cfg(64, 1, 100)).unwrap();
        for (name, t) in p.tensors() {
            let n = t.len() as f64;
            let mean = t.sum() / n;
            let se = (1.0 / 64f64.sqrt()) / n.sqrt();
            assert!(
                mean.abs() < 3.0 * se,
                "{name}: mean {mean} vs 3se {}",
                3.0 * se
            );
        }
    }

    #[test]
    fn zero_layers_is_embedding_plus_position() {
        let (seq, vocab) = sample_seq(&["a b", "c d e"]);
        let p = init_params(&cfg(8, 0, vocab.len())).unwrap();
        let reps = encode(&seq, &p).unwrap();
        let expect =
            |pos: usize| &p.embedding.row(seq.tokens[pos] as usize) + &p.positional().row(pos);
        assert_eq!(reps.q, expect(0));
        for (j, &pos) in seq.sentence_marker_pos.iter().enumerate() {
            assert_eq!(reps.s.row(j), expect(pos));
        }
    }

    #[test]
    fn too_long_sequence_rejected() {
        let (seq, vocab) = sample_seq(&["a b", "c d e"]);
        let mut c = cfg(8, 1, vocab.len());
        c.max_len = 4;
        let p = init_params(&c).unwrap();
        assert!(matches!(encode(&seq, &p), Err(Error::Length { .. })));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (seq, vocab) = sample_seq(&["a b", "c d e", "f"]);
        let mut c = cfg(8, 2, vocab.len());
        c.marker_key_bias = 1.0;
        let p = init_params(&c).unwrap();
        let trace = encode_trace(&seq, &p).unwrap();
        for a in trace.attention() {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contextual_outputs_change_with_distractor_order() {
        let (seq, vocab) = sample_seq(&["a b c", "d e f"]);
        let p = init_params(&cfg(8, 1, vocab.len())).unwrap();
        let mut permuted = seq.clone();
        // swap two non-marker tokens inside sentence 2
        let base = seq.sentence_marker_pos[1];
        permuted.tokens.swap(base + 1, base + 3);
        let a = encode(&seq, &p).unwrap();
        let b = encode(&permuted, &p).unwrap();
        assert!((&a.s - &b.s).iter().any(|x| x.abs() > 1e-9));
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let (seq, vocab) = sample_seq(&["a b", "c"]);
        let p = init_params(&cfg(8, 1, vocab.len())).unwrap();
        let g = encode_backward(&seq, &p, &MarkerReps::zeros(8, 2)).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn absent_tokens_get_no_gradient() {
        let (seq, vocab) = sample_seq(&["a b", "c"]);
        let p = init_params(&EncoderConfig {
            vocab_size: vocab.len() + 5,
            ..cfg(8, 1, 0)
        })
        .unwrap();
        let mut up = MarkerReps::zeros(8, 2);
        up.q.fill(1.0);
        up.s.fill(1.0);
        let g = encode_backward(&seq, &p, &up).unwrap();
        for t in vocab.len()..vocab.len() + 5 {
            assert!(g.embedding.row(t).iter().all(|&x| x == 0.0));
        }
        assert!(g
            .embedding
            .row(seq.tokens[1] as usize)
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn cotangent_shape_mismatch() {
        let (seq, vocab) = sample_seq(&["a b", "c"]);
        let p = init_params(&cfg(8, 1, vocab.len())).unwrap();
        assert!(matches!(
            encode_backward(&seq, &p, &MarkerReps::zeros(8, 3)),
            Err(Error::Shape(_))
        ));
    }
}
