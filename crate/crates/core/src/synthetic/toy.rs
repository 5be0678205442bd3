//! Hand-constructed toy captioner.
//!
//! The residual stream is split into an object-content subspace (the first
//! `d_model - 16` dimensions, where object embeddings live) and sixteen
//! named coordinates for special-token content and position-type flags.
//! Every attention layer uses the same score pattern in all heads, so the
//! heads together act as one full-width head.
//!
//! * Block 1 marks positions at or after the query token; its FFN turns raw
//!   embedding coordinates into clean 0/1 flags (generating position, visual
//!   position, generated object, first filler, any filler, BOS, constant)
//!   and amplifies the content of generated objects.
//! * Block 2 counts earlier object mentions into the end-of-caption logit;
//!   its FFN writes the end-of-caption bias and the filler-word boosts.
//! * Block 3 reads the visual positions. Filler words compete for the same
//!   attention mass, so visual evidence thins out as the caption grows; the
//!   read mass is recorded on its own coordinate. Its FFN rewrites each
//!   visual position's content into `prior_strength` times the content of
//!   the paired (confusable) object.
//! * The next `drift_layers` blocks attend to the visual positions more
//!   strongly the less visual mass was read, copying that confusable content
//!   into generating positions.
//! * The last block subtracts the content of objects already generated.
//!   Earlier layers keep it, so a mentioned object stays high in the lens
//!   ranks until the final layer.
//!
//! Generic text tokens carry a constant logit bias on the constant
//! coordinate, so a caption whose visual evidence has thinned out lets them
//! overtake the scene's objects in rank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Vocab, BOS, EOS, FILL1, FILL2, FIRST_TEXT, QUERY};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::{Activation, Block, Model, ModelConfig, NormKind};

/// Circuit strengths. Scores are post-scaling attention logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCircuit {
    /// Attention score of a visual position seen from a generating position.
    pub read_score: f32,
    /// Attention weight of one filler word relative to one visual token.
    pub filler_dilution: f32,
    /// Gain on the visual content copied into generating positions.
    pub read_gain: f32,
    /// Content removed per earlier mention of the same object.
    pub suppress_gain: f32,
    pub eos_bias: f32,
    /// Extra copies of its own content a generated object carries, so the
    /// mention suppression reads it above whatever steering adds there.
    pub mention_gain: f32,
    /// End-of-caption bias added per earlier object mention.
    pub eos_per_mention: f32,
    pub filler_boost: f32,
    /// Constant logit bias of generic text tokens.
    pub text_prior: f32,
    /// Norm of the content part of generic text embeddings.
    pub text_content: f32,
    pub drift_layers: usize,
    pub drift_gain: f32,
    pub drift_base: f32,
    /// Score increase on visual positions per unit of missing read mass.
    pub drift_slope: f32,
    pub drift_sink: f32,
    /// Gain of the final norm; scales every logit.
    pub logit_scale: f32,
}

impl Default for ToyCircuit {
    fn default() -> Self {
        Self {
            read_score: 20.0,
            filler_dilution: 0.5,
            read_gain: 6.0,
            suppress_gain: 0.6,
            eos_bias: 0.6,
            eos_per_mention: 0.35,
            mention_gain: 9.0,
            filler_boost: 10.0,
            text_prior: 0.5,
            text_content: 0.3,
            drift_layers: 4,
            drift_gain: 2.5,
            drift_base: 5.5,
            drift_slope: 9.0,
            drift_sink: 10.0,
            logit_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    pub config: ModelConfig,
    /// Scale of the confusable content written at visual positions.
    pub prior_strength: f32,
    pub vocab: Vocab,
    #[serde(default)]
    pub circuit: ToyCircuit,
    /// The head is always the embedding transpose; `false` is rejected.
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl Default for ToyModelSpec {
    /// L = 8, d_model = 64, V = 512, 4 heads, objects 256..511, prior 1.0.
    fn default() -> Self {
        let config = ModelConfig {
            vocab_size: 512,
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq: 128,
            seed: 0,
            block_norm: NormKind::Identity,
            final_norm: NormKind::Rms,
            activation: Activation::Relu,
            norm_eps: 1e-6,
        };
        Self {
            config,
            prior_strength: 1.0,
            vocab: Vocab::new(512, 256).expect("valid default vocabulary"),
            circuit: ToyCircuit::default(),
            tie_embeddings: true,
        }
    }
}

impl ToyModelSpec {
    pub fn with_prior(mut self, rho: f32) -> Self {
        self.prior_strength = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        self.vocab.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(self.prior_strength >= 0.0 && self.prior_strength.is_finite()) {
            return fail(format!("prior_strength must be >= 0, got {}", self.prior_strength));
        }
        if !self.tie_embeddings {
            return fail("the toy model always ties its head to the embedding".into());
        }
        if self.vocab.vocab_size as usize != c.vocab_size {
            return fail("vocabulary size differs from the model config".into());
        }
        if c.d_model < 32 || !(c.d_model - MARKERS).is_multiple_of(2) {
            return fail(format!("toy model needs an even d_model >= 32, got {}", c.d_model));
        }
        if c.head_dim() < 4 {
            return fail("toy model needs head_dim >= 4".into());
        }
        if self.circuit.drift_layers == 0 || c.n_layers < 4 + self.circuit.drift_layers {
            return fail(format!(
                "toy model needs n_layers >= 4 + drift_layers, got {} and {}",
                c.n_layers, self.circuit.drift_layers
            ));
        }
        let d_ff_needed = FFN1_UNITS + (c.d_model - MARKERS) * 2;
        if c.d_ff < d_ff_needed {
            return fail(format!("toy model needs d_ff >= {d_ff_needed}"));
        }
        if c.activation != Activation::Relu || c.block_norm != NormKind::Identity {
            return fail("toy model needs ReLU activation and identity block norms".into());
        }
        Ok(())
    }
}

const MARKERS: usize = 16;
const FFN1_UNITS: usize = 38;

/// Named coordinates after the object-content subspace.
#[derive(Debug, Clone, Copy)]
struct Dims {
    content: usize,
    eos: usize,
    fill1: usize,
    fill2: usize,
    query: usize,
    bos: usize,
    obj: usize,
    one: usize,
    after_query: usize,
    gen: usize,
    vis: usize,
    gen_obj: usize,
    is_fill1: usize,
    filler: usize,
    bos_flag: usize,
    constant: usize,
    read_mass: usize,
}

impl Dims {
    fn new(d: usize) -> Self {
        let t = d - MARKERS;
        Self {
            content: t,
            eos: t,
            fill1: t + 1,
            fill2: t + 2,
            query: t + 3,
            bos: t + 4,
            obj: t + 5,
            one: t + 6,
            after_query: t + 7,
            gen: t + 8,
            vis: t + 9,
            gen_obj: t + 10,
            is_fill1: t + 11,
            filler: t + 12,
            bos_flag: t + 13,
            constant: t + 14,
            read_mass: t + 15,
        }
    }
}

/// Attention weights that give every head the same score pattern.
struct Wide<'a> {
    block: &'a mut Block,
    n_heads: usize,
    head_dim: usize,
    slot: usize,
}

impl<'a> Wide<'a> {
    fn new(block: &'a mut Block, cfg: &ModelConfig) -> Self {
        Self {
            block,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            slot: 0,
        }
    }

    /// Adds `score * sum(q_terms) * key_dim` to the score (after scaling).
    fn term(&mut self, q_terms: &[(usize, f32)], key_dim: usize, score: f32) {
        let s = self.slot;
        self.slot += 1;
        let scale = (self.head_dim as f32).sqrt();
        for h in 0..self.n_heads {
            let r = h * self.head_dim + s;
            for &(dim, w) in q_terms {
                self.block.wq.set(r, dim, w * score * scale);
            }
            self.block.wk.set(r, key_dim, 1.0);
        }
    }

    /// Copies residual dim `from` through the value path into `to` with gain.
    fn copy(&mut self, from: usize, to: usize, gain: f32) {
        self.block.wv.set(from, from, 1.0);
        self.block.wo.set(to, from, gain);
    }
}

/// FFN units appended one at a time.
struct Ffn<'a> {
    block: &'a mut Block,
    next: usize,
}

impl<'a> Ffn<'a> {
    fn new(block: &'a mut Block) -> Self {
        Self { block, next: 0 }
    }

    fn unit(&mut self, input: &[(usize, f32)], output: &[(usize, f32)]) {
        let u = self.next;
        self.next += 1;
        for &(d, w) in input {
            self.block.w_up.set(u, d, self.block.w_up.get(u, d) + w);
        }
        for &(d, w) in output {
            self.block.w_down.set(d, u, self.block.w_down.get(d, u) + w);
        }
    }

    /// `out += gain * clamp(x, 0, 1)` for `x = input`, using `one` as bias.
    fn saturate(&mut self, input: &[(usize, f32)], one: usize, out: usize, gain: f32) {
        self.unit(input, &[(out, gain)]);
        let mut shifted = input.to_vec();
        shifted.push((one, -1.0));
        self.unit(&shifted, &[(out, -gain)]);
    }

    /// `out += gain * x[dim]` exactly, for either sign of `x`.
    fn linear(&mut self, dim: usize, out: usize, gain: f32) {
        self.unit(&[(dim, 1.0)], &[(out, gain)]);
        self.unit(&[(dim, -1.0)], &[(out, -gain)]);
    }
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize, norm: f32) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let len = dot(&v, &v).sqrt();
        if len > 1e-3 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

/// `n` unit-norm directions in `dim` dimensions, spread apart by gradient
/// steps on the quartic frame potential `sum (x_a . x_b)^4`.
fn spread_directions(rng: &mut ChaCha8Rng, n: usize, dim: usize, iters: usize) -> Vec<Vec<f32>> {
    let mut xs: Vec<Vec<f32>> = (0..n).map(|_| random_direction(rng, dim, 1.0)).collect();
    let step = 3.0f32;
    for _ in 0..iters {
        let mut grads = vec![vec![0.0f32; dim]; n];
        for a in 0..n {
            for b in a + 1..n {
                let c = dot(&xs[a], &xs[b]);
                let g = c.powi(5);
                for k in 0..dim {
                    grads[a][k] += g * xs[b][k];
                    grads[b][k] += g * xs[a][k];
                }
            }
        }
        for (x, g) in xs.iter_mut().zip(&grads) {
            for (v, d) in x.iter_mut().zip(g) {
                *v -= step * d;
            }
            let len = dot(x, x).sqrt();
            x.iter_mut().for_each(|v| *v /= len);
        }
    }
    xs
}

/// Pair embeddings `(u, w)` and `(u, -w)` with `|u|^2 = |w|^2 = 1/2`, so
/// partners are orthogonal and related by a fixed reflection.
fn object_embeddings(rng: &mut ChaCha8Rng, pairs: usize, t: usize) -> Vec<Vec<f32>> {
    let half = t / 2;
    let norm = 0.5f32.sqrt();
    let us = spread_directions(rng, pairs, half, SPREAD_ITERS);
    let ws = spread_directions(rng, pairs, half, SPREAD_ITERS);
    let mut out = Vec::with_capacity(2 * pairs);
    for (u, w) in us.iter().zip(&ws) {
        let a: Vec<f32> = u.iter().chain(w).map(|x| x * norm).collect();
        let b: Vec<f32> = u.iter().chain(w.iter()).enumerate()
            .map(|(i, x)| if i < half { x * norm } else { -x * norm })
            .collect();
        out.push(a);
        out.push(b);
    }
    out
}

const SPREAD_ITERS: usize = 150;

/// Builds the toy captioner. The weights depend on `seed` only through the
/// embeddings; `prior_strength` only enters the FFN of block 3.
pub fn build_toy_model(spec: &ToyModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut config = spec.config.clone();
    config.seed = seed;
    let c = &spec.circuit;
    let cfg = config.clone();
    let d = cfg.d_model;
    let dims = Dims::new(d);
    let t = dims.content;
    let vocab = &spec.vocab;
    let mut model = Model::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // embeddings
    let objects = object_embeddings(&mut rng, (vocab.n_objects() / 2) as usize, t);
    {
        let e = &mut model.token_embedding;
        e.set(BOS as usize, dims.bos, 1.0);
        e.set(EOS as usize, dims.eos, 1.0);
        e.set(QUERY as usize, dims.query, 1.0);
        e.set(FILL1 as usize, dims.fill1, 1.0);
        e.set(FILL2 as usize, dims.fill2, 1.0);
        for tok in FIRST_TEXT..vocab.object_start {
            let row = e.row_mut(tok as usize);
            row[..t].copy_from_slice(&random_direction(&mut rng, t, c.text_content));
            row[dims.constant] = c.text_prior;
        }
        for (i, emb) in objects.iter().enumerate() {
            let row = e.row_mut(vocab.object_start as usize + i);
            row[..t].copy_from_slice(emb);
            row[dims.obj] = 1.0;
        }
    }
    for p in 0..cfg.max_seq {
        model.position_embedding.set(p, dims.one, 1.0);
    }
    model.final_norm = vec![c.logit_scale; d];

    let big = 30.0;
    let gate = 4.0;

    // block 1: query seen
    {
        let b = &mut model.blocks[0];
        let mut w = Wide::new(b, &cfg);
        w.term(&[(dims.one, 1.0)], dims.query, big);
        w.copy(dims.query, dims.after_query, 1.0);
        let mut f = Ffn::new(b);
        let one = dims.one;
        // clear whatever the input row holds on the flag coordinates
        for dim in [
            dims.gen,
            dims.vis,
            dims.gen_obj,
            dims.is_fill1,
            dims.filler,
            dims.bos_flag,
            dims.constant,
            dims.read_mass,
        ] {
            f.linear(dim, dim, -1.0);
        }
        for dim in [dims.obj, dims.query, dims.fill1, dims.fill2] {
            f.linear(dim, dim, -1.0);
        }
        f.saturate(&[(dims.after_query, 4.0), (one, -2.0)], one, dims.gen, 1.0);
        f.saturate(
            &[(dims.obj, 4.0), (one, -2.0), (dims.after_query, -8.0)],
            one,
            dims.vis,
            1.0,
        );
        f.saturate(
            &[(dims.obj, 4.0), (dims.after_query, 8.0), (one, -10.0)],
            one,
            dims.gen_obj,
            1.0,
        );
        f.saturate(&[(dims.fill1, 4.0), (one, -2.0)], one, dims.is_fill1, 1.0);
        f.saturate(
            &[(dims.fill1, 4.0), (dims.fill2, 4.0), (one, -2.0)],
            one,
            dims.filler,
            1.0,
        );
        f.saturate(&[(dims.bos, 4.0), (one, -2.0)], one, dims.bos_flag, 1.0);
        f.saturate(&[(one, 2.0)], one, dims.constant, 1.0);
        debug_assert_eq!(f.next, FFN1_UNITS);
        let open = 20.0;
        for i in 0..t {
            let g = [(dims.obj, open), (dims.after_query, open), (one, -2.0 * open)];
            f.unit(&[&[(i, 1.0)][..], &g].concat(), &[(i, c.mention_gain)]);
            f.unit(&[&[(i, -1.0)][..], &g].concat(), &[(i, -c.mention_gain)]);
        }
    }

    // block 2: mention count, end and filler biases
    let sink = 12.0;
    let offset = 3.0f32;
    let per_mention = (-offset).exp() / (1.0 + (-offset).exp());
    {
        let b = &mut model.blocks[1];
        let mut w = Wide::new(b, &cfg);
        w.term(&[(dims.gen, 1.0)], dims.gen_obj, sink - offset);
        w.term(&[(dims.constant, 1.0)], dims.bos_flag, sink);
        w.copy(dims.gen_obj, dims.eos, c.eos_per_mention / per_mention);
        let mut f = Ffn::new(b);
        f.unit(&[(dims.gen, 1.0)], &[(dims.eos, c.eos_bias)]);
        f.unit(&[(dims.gen_obj, 1.0)], &[(dims.fill1, c.filler_boost + c.mention_gain)]);
        f.unit(&[(dims.is_fill1, 1.0)], &[(dims.fill2, c.filler_boost)]);
    }

    // block 3: visual read with filler dilution; confusable rewrite
    {
        let b = &mut model.blocks[2];
        let mut w = Wide::new(b, &cfg);
        w.term(&[(dims.gen, 1.0)], dims.vis, c.read_score);
        w.term(&[(dims.gen, 1.0)], dims.filler, c.read_score + c.filler_dilution.ln());
        w.term(&[(dims.constant, 1.0)], dims.bos_flag, c.read_score / 2.0);
        w.term(&[(dims.gen, 1.0)], dims.gen_obj, -big);
        w.term(&[(dims.gen_obj, 1.0)], dims.vis, -big);
        w.term(&[(dims.gen_obj, 1.0)], dims.filler, -big);
        for i in 0..t {
            w.copy(i, i, c.read_gain);
        }
        w.copy(dims.vis, dims.read_mass, 1.0);
        let rho = spec.prior_strength;
        let mut f = Ffn::new(b);
        for i in 0..t {
            let diag = if i < t / 2 { rho - 1.0 } else { -rho - 1.0 };
            let g = [(dims.vis, gate), (dims.constant, -gate)];
            f.unit(&[&[(i, 1.0)][..], &g].concat(), &[(i, diag)]);
            f.unit(&[&[(i, -1.0)][..], &g].concat(), &[(i, -diag)]);
        }
    }

    // final blocks: drift toward the confusable content
    let last = cfg.n_layers - 1;
    for li in last - c.drift_layers..last {
        let b = &mut model.blocks[li];
        let mut w = Wide::new(b, &cfg);
        w.term(
            &[
                (dims.gen_obj, -big / c.drift_slope),
                (dims.gen, c.drift_base / c.drift_slope + big / c.drift_slope),
                (dims.constant, 1.0 - big / c.drift_slope),
                (dims.read_mass, -1.0),
            ],
            dims.vis,
            c.drift_slope,
        );
        w.term(&[(dims.constant, 1.0)], dims.bos_flag, c.drift_sink);
        for i in 0..t {
            w.copy(i, i, c.drift_gain);
        }
    }

    // last block: suppress objects already mentioned
    {
        let b = &mut model.blocks[last];
        let mut w = Wide::new(b, &cfg);
        w.term(&[(dims.gen, 1.0)], dims.gen_obj, sink - offset);
        w.term(&[(dims.constant, 1.0)], dims.bos_flag, sink);
        for i in 0..t {
            w.copy(i, i, -c.suppress_gain / (per_mention * (1.0 + c.mention_gain)));
        }
    }

    model.validate()?;
    Ok(model)
}
