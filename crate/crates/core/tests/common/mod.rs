//! Reference computations shared by the integration suites.
#![allow(dead_code)]

use steerlens::linalg::Matrix;
use steerlens::model::{Activation, Model, ModelConfig, NormKind};

pub fn random_model(vocab: usize, layers: usize, d: usize, heads: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::small(vocab, layers, d, heads);
    cfg.seed = seed;
    Model::random(cfg, seed.is_multiple_of(2)).unwrap()
}

/// Whole-sequence forward in f64 with explicit causal attention over every
/// prefix; shares no code with the engine.
pub fn reference_logits(m: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let (d, dh) = (c.d_model, c.head_dim());
    let mv = |w: &Matrix, x: &[f64]| -> Vec<f64> {
        (0..w.rows)
            .map(|r| (0..w.cols).map(|k| w.get(r, k) as f64 * x[k]).sum())
            .collect()
    };
    let norm = |x: &[f64], g: &[f32], kind: NormKind| -> Vec<f64> {
        match kind {
            NormKind::Identity => x.to_vec(),
            NormKind::Rms => {
                let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
                let inv = 1.0 / (ms + c.norm_eps as f64).sqrt();
                x.iter().zip(g).map(|(v, g)| v * inv * *g as f64).collect()
            }
        }
    };
    let act = |v: f64| match c.activation {
        Activation::Relu => v.max(0.0),
        Activation::Gelu => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * v * (1.0 + (k * (v + 0.044715 * v * v * v)).tanh())
        }
    };
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..d)
                .map(|i| m.token_embedding.get(t as usize, i) as f64 + m.position_embedding.get(p, i) as f64)
                .collect()
        })
        .collect();
    for b in &m.blocks {
        let x: Vec<Vec<f64>> = h.iter().map(|r| norm(r, &b.attn_norm, c.block_norm)).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|r| mv(&b.wq, r)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|r| mv(&b.wk, r)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| mv(&b.wv, r)).collect();
        let mut next = Vec::new();
        for i in 0..h.len() {
            let mut ctx = vec![0.0; d];
            for head in 0..c.n_heads {
                let o = head * dh;
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|e| q[i][o + e] * k[j][o + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..=i {
                    let p = (s[j] - mx).exp() / z;
                    for e in 0..dh {
                        ctx[o + e] += p * v[j][o + e];
                    }
                }
            }
            let a = mv(&b.wo, &ctx);
            let mid: Vec<f64> = h[i].iter().zip(&a).map(|(x, y)| x + y).collect();
            let up: Vec<f64> = mv(&b.w_up, &norm(&mid, &b.ffn_norm, c.block_norm)).into_iter().map(act).collect();
            let down = mv(&b.w_down, &up);
            next.push(mid.iter().zip(&down).map(|(x, y)| x + y).collect());
        }
        h = next;
    }
    let head = m.head.as_ref().unwrap_or(&m.token_embedding);
    h.iter()
        .map(|r| {
            let x = norm(r, &m.final_norm, c.final_norm);
            (0..head.rows)
                .map(|t| mv(head, &x)[t] + m.head_bias[t] as f64)
                .collect()
        })
        .collect()
}

pub fn log_softmax64(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    x.iter().map(|v| v - z).collect()
}

/// Eight-token model (the smallest valid vocabulary) with tokens 4..8 masked
/// by a large negative head bias, leaving four live tokens.
pub fn four_token_model(seed: u64) -> Model {
    let mut m = random_model(8, 2, 8, 2, seed);
    m.head_bias[4..].iter_mut().for_each(|b| *b = -1e9);
    m
}

/// Brute-force beam of width `w`: every prefix is rescored from scratch by
/// the reference forward, every extension of every kept prefix is
/// enumerated, the best `w` are kept (ties by lexicographic order).
pub fn oracle_beam(m: &Model, prompt: &[u32], w: usize, len: usize) -> (Vec<u32>, f64) {
    let v = 4u32;
    let step_lp = |seq: &[u32]| -> Vec<f64> {
        let full: Vec<u32> = prompt.iter().chain(seq).copied().collect();
        log_softmax64(reference_logits(m, &full).last().unwrap())
    };
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..len {
        let mut cands: Vec<(Vec<u32>, f64)> = Vec::new();
        for (seq, score) in &beams {
            let lp = step_lp(seq);
            for t in 0..v {
                let mut s = seq.clone();
                s.push(t);
                cands.push((s, score + lp[t as usize]));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(w);
        beams = cands;
    }
    beams.swap_remove(0)
}
