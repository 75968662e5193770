//! Reference computations that share no code path with the cached
//! decoder.

use crate::error::Result;
use crate::model::{DecoderState, Modality, TokenSequence, Weights};

fn norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn mat_vec(data: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    data.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn position_code(pos: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (i, o) in out.iter_mut().enumerate() {
        let freq = 10_000f64.powf(2.0 * (i / 2) as f64 / dim as f64);
        let a = pos as f64 / freq;
        *o = if i % 2 == 0 { a.sin() } else { a.cos() };
    }
    out
}

/// Next-token logits at every position, recomputing full causal attention
/// over the whole sequence layer by layer with no cache.
pub fn full_forward_logits(weights: &Weights, sequence: &TokenSequence) -> Vec<Vec<f64>> {
    let c = &weights.config;
    let (d, hd, n) = (c.embed_dim, c.head_dim, sequence.len());
    let mut xs: Vec<Vec<f64>> = sequence
        .tokens()
        .iter()
        .zip(sequence.modalities())
        .enumerate()
        .map(|(p, (&t, &m))| {
            let table = if m == Modality::Image {
                &weights.image_embed
            } else {
                &weights.text_embed
            };
            let e = &table.data[t * d..(t + 1) * d];
            e.iter()
                .zip(position_code(p, d))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();

    for lw in &weights.layers {
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| norm(x)).collect();
        let qs: Vec<Vec<f64>> = hs.iter().map(|h| mat_vec(&lw.wq.data, d, h)).collect();
        let ks: Vec<Vec<f64>> = hs.iter().map(|h| mat_vec(&lw.wk.data, d, h)).collect();
        let vs: Vec<Vec<f64>> = hs.iter().map(|h| mat_vec(&lw.wv.data, d, h)).collect();
        let mut next = xs.clone();
        for i in 0..n {
            let mut mixed = vec![0.0; d];
            for head in 0..c.num_heads {
                let o = head * hd;
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..hd).map(|e| qs[i][o + e] * ks[j][o + e]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..=i {
                    for e in 0..hd {
                        mixed[o + e] += exps[j] / z * vs[j][o + e];
                    }
                }
            }
            let proj = mat_vec(&lw.wo.data, d, &mixed);
            for (a, b) in next[i].iter_mut().zip(proj) {
                *a += b;
            }
            let h2 = norm(&next[i]);
            let up: Vec<f64> = mat_vec(&lw.w_up.data, d, &h2)
                .into_iter()
                .zip(&lw.b_up)
                .map(|(u, b)| (u + b).tanh())
                .collect();
            let down = mat_vec(&lw.w_down.data, lw.w_down.cols, &up);
            for (a, b) in next[i].iter_mut().zip(down) {
                *a += b;
            }
        }
        xs = next;
    }

    xs.iter()
        .map(|x| {
            let h = norm(x);
            mat_vec(&weights.lm_head.data, d, &h)
                .into_iter()
                .zip(&weights.lm_bias)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

/// Plain greedy decoding with the cached decoder and none of the
/// sparsification machinery. Returns the tokens and the logits that chose
/// each one.
pub fn plain_greedy(
    state: &mut DecoderState,
    image: &[usize],
    prompt: &[usize],
    steps: usize,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut logits = state.ingest_prompt(image, prompt)?;
    let mut tokens = Vec::with_capacity(steps);
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        tokens.push(best);
        history.push(logits.clone());
        logits = state.decode_step(best)?.logit_theta;
    }
    Ok((tokens, history))
}
