use serde::{Deserialize, Serialize};

use super::{Activation, InputItem, Model, NormKind, PromptLayout, ResidualTrace, TraceStep};
use crate::error::{Error, Result};
use crate::linalg::{add_assign, dot};
use crate::steering::{inject_vsv, SteeringConfig, SteeringVector};

/// Key/value cache of one generation. Single owner; clone to fork a beam.
#[derive(Debug, Clone, PartialEq)]
pub struct KvState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvState {
    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Counts of steering primitives executed (one add and one rescale per
/// steered layer).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteerOps {
    pub adds: u64,
    pub rescales: u64,
}

impl std::ops::AddAssign for SteerOps {
    fn add_assign(&mut self, o: Self) {
        self.adds += o.adds;
        self.rescales += o.rescales;
    }
}

/// Result of processing one new position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub step: TraceStep,
    /// Final-layer logits `H(h^L)`.
    pub logits: Vec<f32>,
    pub steer_ops: SteerOps,
}

impl StepOutput {
    /// Hidden states `h^0..=h^L` of the new position.
    pub fn hidden(&self) -> &[Vec<f32>] {
        &self.step.hidden
    }
}

/// Output of a prompt prefill.
#[derive(Debug, Clone)]
pub struct Prefill {
    pub kv: KvState,
    pub trace: Option<ResidualTrace>,
    /// Logits at the last prompt position.
    pub logits: Vec<f32>,
    /// Hidden states of the last prompt position, `h^0..=h^L`.
    pub last_hidden: Vec<Vec<f32>>,
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl Model {
    pub fn new_kv(&self) -> KvState {
        let l = self.config.n_layers;
        KvState {
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    fn normalize(&self, x: &[f32], gain: &[f32], kind: NormKind) -> Vec<f32> {
        match kind {
            NormKind::Identity => x.to_vec(),
            NormKind::Rms => {
                let ms = dot(x, x) / x.len() as f32;
                let inv = 1.0 / (ms + self.config.norm_eps).sqrt();
                x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
            }
        }
    }

    /// Input row for `item` at `pos` (embedding or supplied row, plus position).
    pub fn embed(&self, item: &InputItem, pos: usize) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let mut row = match item {
            InputItem::Token(t) => {
                let t = *t as usize;
                if t >= self.config.vocab_size {
                    return Err(Error::Argument(format!(
                        "token {t} out of range for vocab {}",
                        self.config.vocab_size
                    )));
                }
                self.token_embedding.row(t).to_vec()
            }
            InputItem::Embedding(r) => {
                if r.len() != d {
                    return Err(Error::Argument(format!(
                        "embedding row has {} values, d_model is {d}",
                        r.len()
                    )));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("visual embedding row".into()));
                }
                r.clone()
            }
        };
        add_assign(&mut row, self.position_embedding.row(pos));
        Ok(row)
    }

    /// Runs block `li` (0-based) for the newest position, appending its key
    /// and value to the cache. Returns `(attention output, FFN output)`.
    fn block_forward(&self, li: usize, kv: &mut KvState, h: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let cfg = &self.config;
        let b = &self.blocks[li];
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();

        let x = self.normalize(h, &b.attn_norm, cfg.block_norm);
        let q = b.wq.matvec(&x);
        kv.keys[li].extend(b.wk.matvec(&x));
        kv.values[li].extend(b.wv.matvec(&x));
        let n = kv.keys[li].len() / d;
        let keys = &kv.keys[li];
        let values = &kv.values[li];

        let mut ctx = vec![0.0f32; d];
        let mut scores = vec![0.0f32; n];
        for head in 0..cfg.n_heads {
            let off = head * dh;
            let qh = &q[off..off + dh];
            let mut max = f32::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys[j * d + off..j * d + off + dh]) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let out = &mut ctx[off..off + dh];
            for (j, s) in scores.iter().enumerate() {
                let p = s / sum;
                for (o, v) in out.iter_mut().zip(&values[j * d + off..j * d + off + dh]) {
                    *o += p * v;
                }
            }
        }
        let a = b.wo.matvec(&ctx);

        let mid: Vec<f32> = h.iter().zip(&a).map(|(h, a)| h + a).collect();
        let y = self.normalize(&mid, &b.ffn_norm, cfg.block_norm);
        let mut up = b.w_up.matvec(&y);
        match cfg.activation {
            Activation::Relu => up.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Gelu => up.iter_mut().for_each(|v| *v = gelu(*v)),
        }
        let m = b.w_down.matvec(&up);
        (a, m)
    }

    /// Processes one new position through every block. The stream of each
    /// block is steered (when requested) before it is passed onward, so the
    /// next block's cached key/value already sees the injected state.
    fn forward_position(
        &self,
        kv: &mut KvState,
        item: &InputItem,
        steering: Option<(&SteeringVector, &SteeringConfig)>,
        capture: bool,
    ) -> Result<(TraceStep, SteerOps)> {
        let cfg = &self.config;
        let pos = kv.len;
        if pos >= cfg.max_seq {
            return Err(Error::Capacity {
                needed: pos + 1,
                max_seq: cfg.max_seq,
            });
        }
        if let Some((v, _)) = steering {
            if v.n_layers() != cfg.n_layers || v.d_model() != cfg.d_model {
                return Err(Error::Argument(format!(
                    "steering vector is {}x{}, model is {}x{}",
                    v.n_layers(),
                    v.d_model(),
                    cfg.n_layers,
                    cfg.d_model
                )));
            }
        }
        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        hidden.push(self.embed(item, pos)?);
        let (mut attn, mut mlp, mut steer) = if capture {
            (
                Some(Vec::with_capacity(cfg.n_layers)),
                Some(Vec::with_capacity(cfg.n_layers)),
                steering.map(|_| Vec::with_capacity(cfg.n_layers)),
            )
        } else {
            (None, None, None)
        };
        let mut ops = SteerOps::default();
        for li in 0..cfg.n_layers {
            let prev = &hidden[li];
            let (a, m) = self.block_forward(li, kv, prev);
            let mut h: Vec<f32> = prev
                .iter()
                .zip(&a)
                .zip(&m)
                .map(|((h, a), m)| h + a + m)
                .collect();
            if let Some((vsv, scfg)) = steering {
                let injected = inject_vsv(&h, vsv.layer(li + 1), scfg)?;
                ops.adds += 1;
                if scfg.renormalize {
                    ops.rescales += 1;
                }
                if let Some(s) = steer.as_mut() {
                    s.push(injected.iter().zip(&h).map(|(n, o)| n - o).collect());
                }
                h = injected;
            }
            if let Some(v) = attn.as_mut() {
                v.push(a);
            }
            if let Some(v) = mlp.as_mut() {
                v.push(m);
            }
            hidden.push(h);
        }
        kv.len += 1;
        Ok((
            TraceStep {
                hidden,
                attn,
                mlp,
                steer,
            },
            ops,
        ))
    }

    /// Processes one token (or embedding row) at the next cache position and
    /// returns its per-layer hiddens and final-layer logits.
    pub fn decode_step(
        &self,
        kv: &mut KvState,
        item: impl Into<InputItem>,
        steering: Option<(&SteeringVector, &SteeringConfig)>,
        capture: bool,
    ) -> Result<StepOutput> {
        let position = kv.len;
        let (step, steer_ops) = self.forward_position(kv, &item.into(), steering, capture)?;
        let logits = self.lens(&step.hidden[self.config.n_layers]);
        Ok(StepOutput {
            position,
            step,
            logits,
            steer_ops,
        })
    }

    /// Feeds `items` into `kv` without steering; returns the last position's
    /// hiddens (empty if `items` is empty) and the trace when `capture` is set.
    pub(crate) fn feed(
        &self,
        kv: &mut KvState,
        items: &[InputItem],
        capture: bool,
    ) -> Result<(Vec<Vec<f32>>, Option<ResidualTrace>)> {
        if kv.len + items.len() > self.config.max_seq {
            return Err(Error::Capacity {
                needed: kv.len + items.len(),
                max_seq: self.config.max_seq,
            });
        }
        let mut trace = capture.then(|| ResidualTrace::new(self.config.n_layers, self.config.d_model));
        let mut last = Vec::new();
        for item in items {
            let (step, _) = self.forward_position(kv, item, None, capture)?;
            last = step.hidden.clone();
            if let Some(t) = trace.as_mut() {
                t.steps.push(step);
            }
        }
        Ok((last, trace))
    }

    /// Runs the whole prompt with causal attention and returns a reusable cache.
    pub fn run_prefill(&self, layout: &PromptLayout, capture: bool) -> Result<Prefill> {
        if layout.is_empty() {
            return Err(Error::Argument("empty prompt layout".into()));
        }
        layout.check_capacity(self.config.max_seq)?;
        let mut kv = self.new_kv();
        let (last_hidden, trace) = self.feed(&mut kv, &layout.items(), capture)?;
        let logits = self.lens(&last_hidden[self.config.n_layers]);
        Ok(Prefill {
            kv,
            trace,
            logits,
            last_hidden,
        })
    }

    /// Last-position hidden state of every block `1..=L`.
    pub fn vectorize(&self, layout: &PromptLayout) -> Result<Vec<Vec<f32>>> {
        if layout.is_empty() {
            return Err(Error::Argument("cannot vectorize an empty layout".into()));
        }
        layout.check_capacity(self.config.max_seq)?;
        let mut kv = self.new_kv();
        let (mut last, _) = self.feed(&mut kv, &layout.items(), false)?;
        last.remove(0);
        Ok(last)
    }

    /// Final normalization then head, without input validation.
    pub fn lens(&self, hidden: &[f32]) -> Vec<f32> {
        let x = self.normalize(hidden, &self.final_norm, self.config.final_norm);
        let head = self.head_rows();
        (0..head.rows)
            .map(|r| dot(head.row(r), &x) + self.head_bias[r])
            .collect()
    }

    /// Logit lens: the model's head (with its final normalization) applied to
    /// an arbitrary hidden state. At `l = L` this equals the output logits.
    pub fn logit_lens(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        if hidden.len() != self.config.d_model {
            return Err(Error::Argument(format!(
                "hidden has {} values, d_model is {}",
                hidden.len(),
                self.config.d_model
            )));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit lens input".into()));
        }
        Ok(self.lens(hidden))
    }
}
