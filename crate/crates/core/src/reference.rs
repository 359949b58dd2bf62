//! Double-precision reference implementation of the model forward pass.
//!
//! This is a deliberately independent re-implementation — plain f64 loops,
//! no tape, no shared kernels — used by tests as the oracle side of
//! finite-difference and brute-force likelihood checks. Production code
//! never calls into this module.

use std::collections::BTreeMap;

use crate::model::{ModelConfig, ParameterSet};

/// f64 copy of a parameter set, keyed by name.
pub struct F64Params {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl F64Params {
    pub fn from_params(params: &ParameterSet) -> Self {
        let tensors = params
            .iter()
            .map(|(n, t)| {
                let data: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
                (n.clone(), (t.shape().to_vec(), data))
            })
            .collect();
        F64Params { config: params.config().clone(), tensors }
    }

    fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let (shape, data) = self.tensors.get(name).expect("parameter present");
        (shape, data)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        &mut self.tensors.get_mut(name).expect("parameter present").1
    }
}

fn matmul(a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], (m, n): (usize, usize), gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let eps = f64::from(crate::tensor::LAYER_NORM_EPS);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = gain[j] * (row[j] - mean) * rstd + bias[j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Full-precision forward pass; returns `[T][V]` next-token logits.
pub fn logits_f64(params: &F64Params, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let d_head = d / cfg.n_heads;

    let (_, tok_emb) = params.get("tok_emb.w");
    let (_, pos_emb) = params.get("pos_emb.w");
    let mut x = vec![0.0; t_len * d];
    for (t, &id) in tokens.iter().enumerate() {
        for j in 0..d {
            x[t * d + j] = tok_emb[id as usize * d + j] + pos_emb[t * d + j];
        }
    }

    for layer in 0..cfg.n_layers {
        let p = |s: &str| format!("layer.{layer}.{s}");
        let h = layer_norm(&x, (t_len, d), params.get(&p("ln1.gain")).1, params.get(&p("ln1.bias")).1);

        let mut q = matmul(&h, (t_len, d), params.get(&p("attn.wq")).1, d);
        let mut k = matmul(&h, (t_len, d), params.get(&p("attn.wk")).1, d);
        let mut v = matmul(&h, (t_len, d), params.get(&p("attn.wv")).1, d);
        for (buf, bias) in [
            (&mut q, params.get(&p("attn.bq")).1),
            (&mut k, params.get(&p("attn.bk")).1),
            (&mut v, params.get(&p("attn.bv")).1),
        ] {
            for t in 0..t_len {
                for j in 0..d {
                    buf[t * d + j] += bias[j];
                }
            }
        }

        let mut merged = vec![0.0; t_len * d];
        let scale = 1.0 / (d_head as f64).sqrt();
        for head in 0..cfg.n_heads {
            let lo = head * d_head;
            for t in 0..t_len {
                // Causal: position t attends to positions 0..=t.
                let mut scores = Vec::with_capacity(t + 1);
                for s in 0..=t {
                    let mut dot = 0.0;
                    for j in 0..d_head {
                        dot += q[t * d + lo + j] * k[s * d + lo + j];
                    }
                    scores.push(dot * scale);
                }
                let attn = softmax_row(&scores);
                for (s, &a) in attn.iter().enumerate() {
                    for j in 0..d_head {
                        merged[t * d + lo + j] += a * v[s * d + lo + j];
                    }
                }
            }
        }
        let mut proj = matmul(&merged, (t_len, d), params.get(&p("attn.wo")).1, d);
        let bo = params.get(&p("attn.bo")).1;
        for t in 0..t_len {
            for j in 0..d {
                proj[t * d + j] += bo[j];
                x[t * d + j] += proj[t * d + j];
            }
        }

        let h2 = layer_norm(&x, (t_len, d), params.get(&p("ln2.gain")).1, params.get(&p("ln2.bias")).1);
        let mut ff = matmul(&h2, (t_len, d), params.get(&p("mlp.w1")).1, cfg.d_ff);
        let b1 = params.get(&p("mlp.b1")).1;
        for t in 0..t_len {
            for j in 0..cfg.d_ff {
                ff[t * cfg.d_ff + j] = gelu(ff[t * cfg.d_ff + j] + b1[j]);
            }
        }
        let mut out = matmul(&ff, (t_len, cfg.d_ff), params.get(&p("mlp.w2")).1, d);
        let b2 = params.get(&p("mlp.b2")).1;
        for t in 0..t_len {
            for j in 0..d {
                out[t * d + j] += b2[j];
                x[t * d + j] += out[t * d + j];
            }
        }
    }

    let xf = layer_norm(
        &x,
        (t_len, d),
        params.get("final_ln.gain").1,
        params.get("final_ln.bias").1,
    );
    let logits = matmul(&xf, (t_len, d), params.get("head.w").1, cfg.vocab_size);
    (0..t_len)
        .map(|t| logits[t * cfg.vocab_size..(t + 1) * cfg.vocab_size].to_vec())
        .collect()
}

pub fn log_softmax_pick_f64(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[idx] - max - denom.ln()
}

/// f64 counterpart of `model::sequence_logprob`.
pub fn sequence_logprob_f64(params: &F64Params, tokens: &[u32]) -> f64 {
    let logits = logits_f64(params, tokens);
    (1..tokens.len())
        .map(|t| log_softmax_pick_f64(&logits[t - 1], tokens[t] as usize))
        .sum()
}

/// f64 counterpart of `model::last_token_logprob`.
pub fn last_token_logprob_f64(params: &F64Params, prefix: &[u32], completion: u32) -> f64 {
    let logits = logits_f64(params, prefix);
    log_softmax_pick_f64(&logits[prefix.len() - 1], completion as usize)
}
