//! Context cache for fast query evaluation.
//!
//! Context tokens never attend to query tokens, so one causal pass over a
//! context yields the keys and values of every prefix. A query placed after
//! the first `c` context tokens then needs only its own row of each layer.

use super::params::ModelParams;
use super::scalar::{gemm, View};
use super::tokens::AttentionMask;
use super::transformer::{forward_acts, gelu, layernorm, linear};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ContextCache {
    pub len: usize,
    d_model: usize,
    /// Per layer, `len x 3 d_model` projections (query part unused).
    qkv: Vec<Vec<f32>>,
    /// Per layer plus final, `len x d_model` residual streams of the context.
    resid: Vec<Vec<f32>>,
}

impl ContextCache {
    /// Runs the causal pass over `tokens` (`len x token_width`).
    pub fn build(params: &ModelParams<f32>, tokens: &[f32]) -> Result<Self> {
        let w = params.config.token_width;
        if tokens.len() % w != 0 {
            return Err(Error::WidthMismatch {
                expected: w,
                got: tokens.len() % w,
            });
        }
        let len = tokens.len() / w;
        if len == 0 {
            let layers = params.config.layers;
            return Ok(ContextCache {
                len,
                d_model: params.config.d_model,
                qkv: vec![Vec::new(); layers],
                resid: vec![Vec::new(); layers + 1],
            });
        }
        let acts = forward_acts(params, tokens, &AttentionMask::causal(len), &[], None)?;
        let mut resid: Vec<Vec<f32>> = acts.layers.iter().map(|l| l.resid_in.clone()).collect();
        resid.push(acts.resid_final);
        Ok(ContextCache {
            len,
            d_model: params.config.d_model,
            qkv: acts.layers.into_iter().map(|l| l.qkv).collect(),
            resid,
        })
    }

    /// Residual of context token `t` entering layer `layer` (`layer == L`
    /// gives the output of the last block).
    pub fn context_resid(&self, layer: usize, t: usize) -> &[f32] {
        &self.resid[layer][t * self.d_model..(t + 1) * self.d_model]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub count: usize,
    /// `count x action_count`.
    pub logits: Vec<f32>,
    /// Per layer plus final, `count x d_model` residual of each query token.
    pub resid: Option<Vec<Vec<f32>>>,
    /// Per layer, `heads x count x (c + 1)`; the last column is the query itself.
    pub attention: Option<Vec<Vec<f32>>>,
}

impl QueryOutput {
    pub fn logits_of(&self, q: usize) -> &[f32] {
        let a = self.logits.len() / self.count.max(1);
        &self.logits[q * a..(q + 1) * a]
    }

    pub fn resid_of(&self, layer: usize, q: usize) -> Option<&[f32]> {
        let r = self.resid.as_ref()?;
        let d = r[layer].len() / self.count.max(1);
        Some(&r[layer][q * d..(q + 1) * d])
    }
}

/// Evaluates `queries` (`count x token_width`) each placed directly after
/// the first `c` context tokens. Queries do not see one another.
pub fn query_forward(
    params: &ModelParams<f32>,
    cache: &ContextCache,
    c: usize,
    queries: &[f32],
    capture: bool,
) -> Result<QueryOutput> {
    let cfg = &params.config;
    let lay = &params.layout;
    let (d, h, ff, w, na) = (cfg.d_model, cfg.heads, cfg.d_ff, cfg.token_width, cfg.action_count);
    let dh = d / h;
    if c > cache.len {
        return Err(Error::invalid(format!("prefix {c} exceeds cached context {}", cache.len)));
    }
    if queries.len() % w != 0 || cache.d_model != d {
        return Err(Error::WidthMismatch {
            expected: w,
            got: queries.len() % w,
        });
    }
    let nq = queries.len() / w;
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = vec![0.0f32; nq * d];
    linear(queries, nq, params.slice(lay.w_in), params.slice(lay.b_in), w, d, &mut x);

    let mut resid_cap = capture.then(Vec::new);
    let mut attn_cap = capture.then(Vec::new);
    let mut ln = vec![0.0f32; nq * d];
    let mut mean = vec![0.0f32; nq];
    let mut rstd = vec![0.0f32; nq];
    let mut qkv = vec![0.0f32; nq * 3 * d];
    let mut scores = vec![0.0f32; nq * (c + 1)];
    let mut att = vec![0.0f32; nq * d];
    let mut tmp = vec![0.0f32; nq * d];
    let mut fc = vec![0.0f32; nq * ff];

    for (li, ls) in lay.layers.iter().enumerate() {
        if let Some(r) = resid_cap.as_mut() {
            r.push(x.clone());
        }
        let ctx = &cache.qkv[li];
        layernorm(&x, nq, d, params.slice(ls.ln1_g), params.slice(ls.ln1_b), &mut ln, &mut mean, &mut rstd);
        linear(&ln, nq, params.slice(ls.w_qkv), params.slice(ls.b_qkv), d, 3 * d, &mut qkv);
        let mut layer_attn = capture.then(|| vec![0.0f32; h * nq * (c + 1)]);
        for head in 0..h {
            // prefix scores into columns 0..c, own score into column c
            if c > 0 {
                gemm(
                    nq,
                    dh,
                    c,
                    scale,
                    View::strided(&qkv[head * dh..], 3 * d, 1),
                    View::strided(&ctx[d + head * dh..], 1, 3 * d),
                    0.0,
                    &mut scores,
                    c + 1,
                    1,
                );
            }
            for q in 0..nq {
                let row = &qkv[q * 3 * d..(q + 1) * 3 * d];
                let own: f32 = (0..dh).map(|k| row[head * dh + k] * row[d + head * dh + k]).sum();
                let s = &mut scores[q * (c + 1)..(q + 1) * (c + 1)];
                s[c] = own * scale;
                let mx = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in s.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                s.iter_mut().for_each(|v| *v /= sum);
                let p_self = s[c];
                let out = &mut att[q * d + head * dh..q * d + (head + 1) * dh];
                for k in 0..dh {
                    out[k] = p_self * row[2 * d + head * dh + k];
                }
            }
            if c > 0 {
                gemm(
                    nq,
                    c,
                    dh,
                    1.0,
                    View::rm(&scores, c + 1),
                    View::strided(&ctx[2 * d + head * dh..], 3 * d, 1),
                    1.0,
                    &mut att[head * dh..],
                    d,
                    1,
                );
            }
            if let Some(a) = layer_attn.as_mut() {
                a[head * nq * (c + 1)..(head + 1) * nq * (c + 1)].copy_from_slice(&scores);
            }
        }
        if let (Some(cap), Some(a)) = (attn_cap.as_mut(), layer_attn) {
            cap.push(a);
        }
        linear(&att, nq, params.slice(ls.w_o), params.slice(ls.b_o), d, d, &mut tmp);
        x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        layernorm(&x, nq, d, params.slice(ls.ln2_g), params.slice(ls.ln2_b), &mut ln, &mut mean, &mut rstd);
        linear(&ln, nq, params.slice(ls.w_fc), params.slice(ls.b_fc), d, ff, &mut fc);
        fc.iter_mut().for_each(|v| *v = gelu(*v));
        linear(&fc, nq, params.slice(ls.w_proj), params.slice(ls.b_proj), ff, d, &mut tmp);
        x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: li });
        }
    }
    if let Some(r) = resid_cap.as_mut() {
        r.push(x.clone());
    }
    layernorm(&x, nq, d, params.slice(lay.lnf_g), params.slice(lay.lnf_b), &mut ln, &mut mean, &mut rstd);
    let mut logits = vec![0.0f32; nq * na];
    linear(&ln, nq, params.slice(lay.w_out), params.slice(lay.b_out), d, na, &mut logits);
    Ok(QueryOutput {
        count: nq,
        logits,
        resid: resid_cap,
        attention: attn_cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::{build_taskset, EnvConfig};
    use crate::model::params::ModelConfig;
    use crate::model::tokens::{tokenize, Slot};
    use crate::model::transformer::forward;
    use crate::rng::substream;

    #[test]
    fn matches_full_forward() {
        let cfg = EnvConfig {
            trajectory_len: 30,
            ..EnvConfig::gridworld()
        };
        let ts = build_taskset(10, 1, &cfg).unwrap();
        let task = &ts.tasks[0];
        let mc = ModelConfig::sized(task.suite(), 2, 2, 16);
        let mut p = ModelParams::<f32>::init(&mc, &mut substream(0, "init", 0)).unwrap();
        // larger weights make attention non-trivial
        p.data.iter_mut().for_each(|v| *v *= 20.0);
        let ctx_layout: Vec<Slot> = (0..30).map(Slot::Context).collect();
        let ctx = tokenize(task, &ctx_layout, 26).unwrap();
        let cache = ContextCache::build(&p, &ctx.tokens).unwrap();
        for c in [0usize, 1, 7, 30] {
            let mut layout: Vec<Slot> = (0..c).map(Slot::Context).collect();
            layout.extend([Slot::Query(4), Slot::Query(12), Slot::Query(24)]);
            let seq = tokenize(task, &layout, 26).unwrap();
            let full = forward(&p, &seq.tokens, &seq.mask(), true).unwrap();
            let q = query_forward(&p, &cache, c, &seq.tokens[c * 26..], true).unwrap();
            let tr = full.trace.clone().unwrap();
            for (k, &pos) in seq.query_positions.iter().enumerate() {
                for (a, b) in full.logits_at(pos, 5).iter().zip(q.logits_of(k)) {
                    assert!((a - b).abs() < 1e-4, "c={c}: {a} vs {b}");
                }
                for l in 0..=2 {
                    let want = if l < 2 { tr.resid_in_at(l, pos) } else { tr.resid_out_at(1, pos) };
                    for (a, b) in want.iter().zip(q.resid_of(l, k).unwrap()) {
                        assert!((a - b).abs() < 1e-3);
                    }
                }
                let att = &q.attention.as_ref().unwrap()[1];
                assert!((att[(nq_idx(1, k, 3)) * (c + 1) + c] - tr.attn(1, 1, pos, pos)).abs() < 1e-5);
            }
            if c > 0 {
                for (a, b) in tr.resid_in_at(1, c - 1).iter().zip(cache.context_resid(1, c - 1)) {
                    assert!((a - b).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn empty_context() {
        let cfg = EnvConfig {
            trajectory_len: 10,
            ..EnvConfig::gridworld()
        };
        let ts = build_taskset(10, 1, &cfg).unwrap();
        let task = &ts.tasks[0];
        let mc = ModelConfig::sized(task.suite(), 2, 2, 16);
        let p = ModelParams::<f32>::init(&mc, &mut substream(0, "init", 0)).unwrap();
        let seq = tokenize(task, &[Slot::Query(3)], 26).unwrap();
        let full = forward(&p, &seq.tokens, &seq.mask(), false).unwrap();
        let cache = ContextCache::build(&p, &[]).unwrap();
        let q = query_forward(&p, &cache, 0, &seq.tokens, false).unwrap();
        for (a, b) in full.logits_at(0, 5).iter().zip(q.logits_of(0)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn nq_idx(head: usize, q: usize, nq: usize) -> usize {
        head * nq + q
    }
}
