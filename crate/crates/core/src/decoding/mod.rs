//! Greedy, beam and nucleus decoding with optional steering and
//! self-logits augmentation applied at every step.
//!
//! Each step: the newest position is run through the model (steered when a
//! steering vector is supplied), the final-layer logits are optionally
//! blended with the augmentation logits, divided by the temperature and
//! handed to the selection rule.
//!
//! Randomness comes from ChaCha8 seeded with `rng_seed`; a run with index
//! `k` inside an experiment uses stream `k` of that generator (see
//! [`rng_for`]), so parallel runs are reproducible regardless of schedule.

mod beam;
mod select;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beam::beam_search;
pub use select::{greedy_select, nucleus_sample, nucleus_set};

use crate::error::{Error, Result};
use crate::model::{InputItem, KvState, Model, PromptLayout, ResidualTrace, SteerOps, StepOutput};
use crate::sla::{augmentation_logits, ensemble_logits, SlaConfig};
use crate::steering::{SteeringConfig, SteeringVector};

/// Generator for run `stream` of an experiment seeded with `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Nucleus { top_p: f64 },
}

fn default_temperature() -> f32 {
    1.0
}

fn default_max_new() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub steering: Option<SteeringConfig>,
    #[serde(default)]
    pub sla: Option<SlaConfig>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub stop_tokens: Vec<u32>,
    /// Keep per-step hidden states and components in the result.
    #[serde(default)]
    pub capture_trace: bool,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            max_new_tokens,
            steering: None,
            sla: None,
            rng_seed: 0,
            stop_tokens: Vec::new(),
            capture_trace: false,
        }
    }

    pub fn with_strategy(mut self, s: Strategy) -> Self {
        self.strategy = s;
        self
    }

    pub fn with_steering(mut self, lambda: f32) -> Self {
        self.steering = Some(SteeringConfig {
            lambda,
            renormalize: true,
        });
        self
    }

    pub fn with_sla(mut self, gamma: f32, window: usize) -> Self {
        self.sla = Some(SlaConfig { gamma, window });
        self
    }

    pub fn with_stop(mut self, stop: Vec<u32>) -> Self {
        self.stop_tokens = stop;
        self
    }

    pub fn with_capture(mut self, on: bool) -> Self {
        self.capture_trace = on;
        self
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        match self.strategy {
            Strategy::Beam { width: 0 } => {
                return Err(Error::Config("beam width must be >= 1".into()))
            }
            Strategy::Nucleus { top_p } if !(top_p > 0.0 && top_p <= 1.0) => {
                return Err(Error::Config(format!("top_p must lie in (0, 1], got {top_p}")))
            }
            _ => {}
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if let Some(s) = &self.steering {
            s.validate()?;
        }
        if let Some(s) = &self.sla {
            s.validate_for(model.n_layers())?;
        }
        Ok(())
    }
}

/// Output of one decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// `H(h^L)` at each step.
    #[serde(skip)]
    pub final_logits: Vec<Vec<f32>>,
    /// Blended logits at each step, when augmentation is active.
    #[serde(skip)]
    pub ensembled_logits: Option<Vec<Vec<f32>>>,
    /// Step `t` holds the stream that produced `tokens[t]`.
    #[serde(skip)]
    pub trace: Option<ResidualTrace>,
    /// Wall time per generated token in milliseconds.
    pub step_ms: Vec<f64>,
    pub steer_ops: SteerOps,
    /// Summed log-probability (beam search only).
    pub score: Option<f64>,
    /// True when the run ended on a stop token.
    pub stopped: bool,
}

/// Scores produced for one step: raw final logits, optional blend, and the
/// values handed to the selection rule.
pub(crate) struct StepScores {
    pub final_logits: Vec<f32>,
    pub ensembled: Option<Vec<f32>>,
    pub scores: Vec<f32>,
}

pub(crate) fn score_step(model: &Model, out: &StepOutput, cfg: &DecodeConfig) -> Result<StepScores> {
    let ensembled = match &cfg.sla {
        Some(sla) => {
            let lens: Vec<Vec<f32>> = sla
                .layers(model.n_layers())
                .map(|l| model.lens(&out.hidden()[l]))
                .collect();
            let aug = augmentation_logits(&lens, sla.window)?;
            Some(ensemble_logits(&out.logits, &aug, sla.gamma)?)
        }
        None => None,
    };
    let base = ensembled.as_ref().unwrap_or(&out.logits);
    let scores = if cfg.temperature == 1.0 {
        base.clone()
    } else {
        base.iter().map(|v| v / cfg.temperature).collect()
    };
    Ok(StepScores {
        final_logits: out.logits.clone(),
        ensembled,
        scores,
    })
}

/// Feeds all but the last prompt item; the last one is processed as part of
/// the first generation step so that its stream is steered.
pub(crate) fn prime(model: &Model, layout: &PromptLayout) -> Result<(KvState, InputItem)> {
    if layout.is_empty() {
        return Err(Error::Argument("empty prompt layout".into()));
    }
    layout.check_capacity(model.config.max_seq)?;
    let mut items = layout.items();
    let last = items.pop().expect("non-empty");
    let mut kv = model.new_kv();
    model.feed(&mut kv, &items, false)?;
    Ok((kv, last))
}

pub(crate) fn steering_pair<'a>(
    cfg: &'a DecodeConfig,
    vsv: Option<&'a SteeringVector>,
) -> Result<Option<(&'a SteeringVector, &'a SteeringConfig)>> {
    match (&cfg.steering, vsv) {
        (Some(c), Some(v)) => Ok(Some((v, c))),
        (Some(_), None) => Err(Error::Argument(
            "steering requested but no steering vector supplied".into(),
        )),
        (None, _) => Ok(None),
    }
}

/// Generates with the configured strategy (stream 0 of the seed).
pub fn generate(
    model: &Model,
    layout: &PromptLayout,
    cfg: &DecodeConfig,
    vsv: Option<&SteeringVector>,
) -> Result<Generation> {
    generate_on_stream(model, layout, cfg, vsv, 0)
}

/// Generates using stream `stream` of `cfg.rng_seed` for sampling.
pub fn generate_on_stream(
    model: &Model,
    layout: &PromptLayout,
    cfg: &DecodeConfig,
    vsv: Option<&SteeringVector>,
    stream: u64,
) -> Result<Generation> {
    cfg.validate(model)?;
    if let Strategy::Beam { .. } = cfg.strategy {
        return beam_search(model, layout, cfg, vsv);
    }
    let steering = steering_pair(cfg, vsv)?;
    let mut rng = rng_for(cfg.rng_seed, stream);
    let (mut kv, mut next) = prime(model, layout)?;

    let mut gen = Generation {
        tokens: Vec::new(),
        final_logits: Vec::new(),
        ensembled_logits: cfg.sla.map(|_| Vec::new()),
        trace: cfg
            .capture_trace
            .then(|| ResidualTrace::new(model.n_layers(), model.d_model())),
        step_ms: Vec::new(),
        steer_ops: SteerOps::default(),
        score: None,
        stopped: false,
    };
    for _ in 0..cfg.max_new_tokens {
        let start = Instant::now();
        let out = model.decode_step(&mut kv, next, steering, cfg.capture_trace)?;
        let s = score_step(model, &out, cfg)?;
        let token = match cfg.strategy {
            Strategy::Greedy => greedy_select(&s.scores),
            Strategy::Nucleus { top_p } => nucleus_sample(&s.scores, top_p, &mut rng)?,
            Strategy::Beam { .. } => unreachable!(),
        };
        gen.step_ms.push(start.elapsed().as_secs_f64() * 1e3);
        gen.steer_ops += out.steer_ops;
        gen.tokens.push(token);
        gen.final_logits.push(s.final_logits);
        if let (Some(e), Some(v)) = (gen.ensembled_logits.as_mut(), s.ensembled) {
            e.push(v);
        }
        if let Some(t) = gen.trace.as_mut() {
            t.steps.push(out.step);
        }
        if cfg.stop_tokens.contains(&token) {
            gen.stopped = true;
            break;
        }
        if kv.len() >= model.config.max_seq {
            break;
        }
        next = InputItem::Token(token);
    }
    Ok(gen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::random(ModelConfig::small(32, 4, 16, 2), true).unwrap()
    }

    fn layout() -> PromptLayout {
        PromptLayout::text(vec![1, 5, 9])
    }

    /// Plain prefill + argmax loop with no interventions.
    fn plain_loop(m: &Model, l: &PromptLayout, n: usize) -> Vec<u32> {
        let p = m.run_prefill(l, false).unwrap();
        let mut kv = p.kv;
        let mut logits = p.logits;
        let mut out = Vec::new();
        for _ in 0..n {
            let t = greedy_select(&logits);
            out.push(t);
            logits = m.decode_step(&mut kv, t, None, false).unwrap().logits;
        }
        out
    }

    #[test]
    fn greedy_without_interventions_matches_plain_loop() {
        let m = model();
        let g = generate(&m, &layout(), &DecodeConfig::greedy(10), None).unwrap();
        assert_eq!(g.tokens, plain_loop(&m, &layout(), 10));
    }

    #[test]
    fn zero_strength_interventions_are_identities() {
        let m = model();
        let vsv = crate::steering::SteeringVector::new(
            vec![vec![0.5; 16]; 4],
            Default::default(),
        )
        .unwrap();
        let off = generate(&m, &layout(), &DecodeConfig::greedy(12), None).unwrap();
        let on = generate(
            &m,
            &layout(),
            &DecodeConfig::greedy(12).with_steering(0.0).with_sla(0.0, 2),
            Some(&vsv),
        )
        .unwrap();
        assert_eq!(off.tokens, on.tokens);
        assert_eq!(off.final_logits, on.final_logits);
    }

    #[test]
    fn nucleus_is_deterministic_per_seed() {
        let m = model();
        let cfg = DecodeConfig::greedy(16).with_strategy(Strategy::Nucleus { top_p: 0.9 });
        let a = generate(&m, &layout(), &cfg, None).unwrap();
        let b = generate(&m, &layout(), &cfg, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn stops_on_stop_token() {
        let m = model();
        let free = generate(&m, &layout(), &DecodeConfig::greedy(8), None).unwrap();
        let stop = free.tokens[2];
        let g = generate(&m, &layout(), &DecodeConfig::greedy(8).with_stop(vec![stop]), None)
            .unwrap();
        let first = free.tokens.iter().position(|&t| t == stop).unwrap();
        assert_eq!(g.tokens, free.tokens[..=first].to_vec());
        assert!(g.stopped);
    }

    #[test]
    fn steering_without_vector_is_an_error() {
        let m = model();
        let cfg = DecodeConfig::greedy(4).with_steering(0.1);
        assert!(generate(&m, &layout(), &cfg, None).is_err());
    }

    #[test]
    fn steering_op_count_is_one_add_and_rescale_per_layer() {
        let m = model();
        let vsv = crate::steering::SteeringVector::new(
            vec![vec![0.1; 16]; 4],
            Default::default(),
        )
        .unwrap();
        let g = generate(&m, &layout(), &DecodeConfig::greedy(7).with_steering(0.2), Some(&vsv))
            .unwrap();
        let n = g.tokens.len() as u64;
        assert_eq!(g.steer_ops, SteerOps { adds: 4 * n, rescales: 4 * n });
    }
}
