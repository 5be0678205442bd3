//! Beam search over summed log-probabilities (no length penalty).
//!
//! At each step every live hypothesis is extended by every token; the
//! candidates are ranked by score (descending), then parent index, then
//! token id, and the best `width` survive. Survivors ending on a stop token
//! move to the finished pool. Search ends when no hypothesis is live, the
//! best finished score is at least the best live score (scores never
//! increase), or the length budget is spent.

use std::time::Instant;

use super::{prime, score_step, steering_pair, DecodeConfig, Generation, Strategy};
use crate::error::{Error, Result};
use crate::linalg::log_softmax;
use crate::model::{InputItem, KvState, Model, PromptLayout, ResidualTrace, SteerOps};
use crate::steering::SteeringVector;

#[derive(Clone)]
struct Hyp {
    kv: KvState,
    next: InputItem,
    tokens: Vec<u32>,
    score: f64,
    final_logits: Vec<Vec<f32>>,
    ensembled: Vec<Vec<f32>>,
    trace: Option<ResidualTrace>,
}

pub fn beam_search(
    model: &Model,
    layout: &PromptLayout,
    cfg: &DecodeConfig,
    vsv: Option<&SteeringVector>,
) -> Result<Generation> {
    let width = match cfg.strategy {
        Strategy::Beam { width } => width,
        _ => return Err(Error::Argument("beam_search needs a beam strategy".into())),
    };
    let steering = steering_pair(cfg, vsv)?;
    let (kv, next) = prime(model, layout)?;
    let mut live = vec![Hyp {
        kv,
        next,
        tokens: Vec::new(),
        score: 0.0,
        final_logits: Vec::new(),
        ensembled: Vec::new(),
        trace: cfg
            .capture_trace
            .then(|| ResidualTrace::new(model.n_layers(), model.d_model())),
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut step_ms = Vec::new();
    let mut ops = SteerOps::default();

    for _ in 0..cfg.max_new_tokens {
        let start = Instant::now();
        // (score, parent, token) for every extension
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        let mut expanded = Vec::with_capacity(live.len());
        for (i, hyp) in live.iter_mut().enumerate() {
            let out = model.decode_step(&mut hyp.kv, hyp.next.clone(), steering, cfg.capture_trace)?;
            ops += out.steer_ops;
            let s = score_step(model, &out, cfg)?;
            let lp = log_softmax(&s.scores);
            cands.extend(lp.iter().enumerate().map(|(t, &p)| (hyp.score + p, i, t as u32)));
            expanded.push((out.step, s.final_logits, s.ensembled));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(width);

        let mut next_live = Vec::with_capacity(width);
        for (score, parent, token) in cands {
            let mut h = live[parent].clone();
            let (step, fl, ens) = &expanded[parent];
            h.tokens.push(token);
            h.score = score;
            h.final_logits.push(fl.clone());
            if let Some(e) = ens {
                h.ensembled.push(e.clone());
            }
            if let Some(t) = h.trace.as_mut() {
                t.steps.push(step.clone());
            }
            h.next = InputItem::Token(token);
            if cfg.stop_tokens.contains(&token) {
                finished.push(h);
            } else {
                next_live.push(h);
            }
        }
        live = next_live;
        step_ms.push(start.elapsed().as_secs_f64() * 1e3);

        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
        if live[0].kv.len() >= model.config.max_seq {
            break;
        }
    }

    // earliest-found wins on equal scores; finished before live
    let mut best: Option<(Hyp, bool)> = None;
    for (h, stopped) in finished
        .into_iter()
        .map(|h| (h, true))
        .chain(live.into_iter().map(|h| (h, false)))
    {
        if best.as_ref().is_none_or(|(b, _)| h.score > b.score) {
            best = Some((h, stopped));
        }
    }
    let (best, stopped) = best.expect("beam always keeps a hypothesis");
    Ok(Generation {
        tokens: best.tokens,
        final_logits: best.final_logits,
        ensembled_logits: cfg.sla.map(|_| best.ensembled),
        trace: best.trace,
        step_ms,
        steer_ops: ops,
        score: Some(best.score),
        stopped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::generate;
    use crate::model::ModelConfig;

    #[test]
    fn width_one_equals_greedy() {
        let m = Model::random(ModelConfig::small(24, 3, 16, 2), true).unwrap();
        let l = PromptLayout::text(vec![2, 3, 4]);
        let g = generate(&m, &l, &DecodeConfig::greedy(9), None).unwrap();
        let b = generate(
            &m,
            &l,
            &DecodeConfig::greedy(9).with_strategy(Strategy::Beam { width: 1 }),
            None,
        )
        .unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert_eq!(g.final_logits, b.final_logits);
    }

    #[test]
    fn wider_beam_never_scores_worse_on_fixed_length() {
        let m = Model::random(ModelConfig::small(16, 2, 16, 2), true).unwrap();
        let l = PromptLayout::text(vec![1, 2]);
        let mut prev = f64::NEG_INFINITY;
        for w in [1, 16] {
            let cfg = DecodeConfig::greedy(2).with_strategy(Strategy::Beam { width: w });
            let s = generate(&m, &l, &cfg, None).unwrap().score.unwrap();
            assert!(s >= prev - 1e-12);
            prev = s;
        }
    }
}
