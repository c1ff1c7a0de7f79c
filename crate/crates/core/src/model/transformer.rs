//! Pre-norm GPT-2 style transformer over continuous tokens: learned linear
//! input projection, no positional embeddings, GELU MLP, final layer norm and
//! a linear action head. Forward and backward passes are written out by hand
//! over flat row-major buffers.

use rand::Rng as _;

use super::params::{LayerSlots, ModelParams, Slot};
use super::scalar::{gemm, Scalar, View};
use super::tokens::AttentionMask;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Replaces the attention row of position `row` at layer `layer` (0-based)
/// with `allowed`. The diagonal entry is always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct RowOverride {
    pub layer: usize,
    pub row: usize,
    pub allowed: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LayerActs<T> {
    pub resid_in: Vec<T>,
    pub(crate) ln1: Vec<T>,
    pub(crate) ln1_mean: Vec<T>,
    pub(crate) ln1_rstd: Vec<T>,
    pub(crate) qkv: Vec<T>,
    /// `heads x len x len` attention probabilities.
    pub probs: Vec<T>,
    pub(crate) att: Vec<T>,
    pub(crate) attn_drop: Option<Vec<T>>,
    pub(crate) resid_mid: Vec<T>,
    pub(crate) ln2: Vec<T>,
    pub(crate) ln2_mean: Vec<T>,
    pub(crate) ln2_rstd: Vec<T>,
    pub(crate) fc_pre: Vec<T>,
    pub(crate) fc_act: Vec<T>,
    pub(crate) mlp_drop: Option<Vec<T>>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub len: usize,
    x: Vec<T>,
    emb_drop: Option<Vec<T>>,
    pub layers: Vec<LayerActs<T>>,
    pub resid_final: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
    pub logits: Vec<T>,
}

/// Captured residual streams and attention weights of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub len: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Per layer, `len x d_model` residual entering the layer.
    pub resid_in: Vec<Vec<f32>>,
    /// Per layer, `len x d_model` residual leaving the layer.
    pub resid_out: Vec<Vec<f32>>,
    /// Per layer, `heads x len x len`.
    pub attention: Vec<Vec<f32>>,
}

impl ActivationTrace {
    pub fn resid_in_at(&self, layer: usize, pos: usize) -> &[f32] {
        &self.resid_in[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn resid_out_at(&self, layer: usize, pos: usize) -> &[f32] {
        &self.resid_out[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Attention weight from position `i` to `j`, head `h`.
    pub fn attn(&self, layer: usize, h: usize, i: usize, j: usize) -> f32 {
        self.attention[layer][(h * self.len + i) * self.len + j]
    }
}

impl<T: Scalar> Activations<T> {
    pub fn trace(&self, heads: usize) -> ActivationTrace {
        let to32 = |v: &Vec<T>| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let n = self.layers.len();
        let resid_in: Vec<Vec<f32>> = self.layers.iter().map(|l| to32(&l.resid_in)).collect();
        let mut resid_out: Vec<Vec<f32>> = resid_in.iter().skip(1).cloned().collect();
        resid_out.push(to32(&self.resid_final));
        debug_assert_eq!(resid_out.len(), n);
        let d_model = if self.len > 0 {
            self.resid_final.len() / self.len
        } else {
            0
        };
        ActivationTrace {
            len: self.len,
            d_model,
            heads,
            resid_in,
            resid_out,
            attention: self.layers.iter().map(|l| to32(&l.probs)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `len x action_count`.
    pub logits: Vec<f32>,
    pub trace: Option<ActivationTrace>,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize, actions: usize) -> &[f32] {
        &self.logits[pos * actions..(pos + 1) * actions]
    }
}

// ---------------------------------------------------------------- helpers

/// `out = x W^T + b` for `x: rows x in`, `W: out x in`.
pub(super) fn linear<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T], n_in: usize, n_out: usize, out: &mut [T]) {
    for r in 0..rows {
        out[r * n_out..(r + 1) * n_out].copy_from_slice(b);
    }
    gemm(
        rows,
        n_in,
        n_out,
        T::one(),
        View::rm(x, n_in),
        View::tr(w, n_in),
        T::one(),
        out,
        n_out,
        1,
    );
}

/// Accumulates parameter gradients of a linear layer and optionally the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
    accumulate_dx: bool,
) {
    gemm(
        n_out,
        rows,
        n_in,
        T::one(),
        View::tr(dout, n_out),
        View::rm(x, n_in),
        T::one(),
        dw,
        n_in,
        1,
    );
    for r in 0..rows {
        for (acc, &g) in db.iter_mut().zip(&dout[r * n_out..(r + 1) * n_out]) {
            *acc = *acc + g;
        }
    }
    if let Some(dx) = dx {
        let beta = if accumulate_dx { T::one() } else { T::zero() };
        gemm(
            rows,
            n_out,
            n_in,
            T::one(),
            View::rm(dout, n_out),
            View::rm(w, n_in),
            beta,
            dx,
            n_in,
            1,
        );
    }
}

pub(super) fn layernorm<T: Scalar>(
    x: &[T],
    rows: usize,
    d: usize,
    g: &[T],
    b: &[T],
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let eps = T::lit(LN_EPS);
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let m = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / dn;
        let s = T::one() / (var + eps).sqrt();
        mean[r] = m;
        rstd[r] = s;
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - m) * s * g[i] + b[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    mean: &[T],
    rstd: &[T],
    g: &[T],
    rows: usize,
    d: usize,
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dr = &dout[r * d..(r + 1) * d];
        let (m, s) = (mean[r], rstd[r]);
        let mut mean_dnorm = T::zero();
        let mut mean_dnorm_norm = T::zero();
        for i in 0..d {
            let norm = (xr[i] - m) * s;
            let dnorm = dr[i] * g[i];
            mean_dnorm = mean_dnorm + dnorm;
            mean_dnorm_norm = mean_dnorm_norm + dnorm * norm;
        }
        mean_dnorm = mean_dnorm / dn;
        mean_dnorm_norm = mean_dnorm_norm / dn;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let norm = (xr[i] - m) * s;
            dg[i] = dg[i] + dr[i] * norm;
            db[i] = db[i] + dr[i];
            let dnorm = dr[i] * g[i];
            dxr[i] = dxr[i] + s * (dnorm - mean_dnorm - norm * mean_dnorm_norm);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(super) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn p<T: Scalar>(params: &ModelParams<T>, s: Slot) -> &[T] {
    params.slice(s)
}

// ---------------------------------------------------------------- forward

/// Full forward pass keeping every intermediate needed for backward.
///
/// `dropout_rng` enables dropout (training mode); pass `None` at inference.
pub fn forward_acts<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[T],
    mask: &AttentionMask,
    overrides: &[RowOverride],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Activations<T>> {
    let cfg = &params.config;
    let lay = &params.layout;
    let (d, w_tok, na) = (cfg.d_model, cfg.token_width, cfg.action_count);
    let len = mask.len;
    if tokens.len() != len * w_tok {
        return Err(Error::WidthMismatch {
            expected: len * w_tok,
            got: tokens.len(),
        });
    }
    for o in overrides {
        if o.layer >= cfg.layers || o.row >= len || o.allowed.len() != len {
            return Err(Error::invalid("attention override does not fit the sequence"));
        }
    }
    let drop_p = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

    let mut resid = vec![T::zero(); len * d];
    linear(tokens, len, p(params, lay.w_in), p(params, lay.b_in), w_tok, d, &mut resid);
    let emb_drop = match dropout_rng.as_deref_mut() {
        Some(rng) if drop_p > 0.0 => {
            let m = dropout_mask::<T>(len * d, drop_p, rng);
            resid.iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
            Some(m)
        }
        _ => None,
    };

    let mut layers = Vec::with_capacity(cfg.layers);
    for (li, ls) in lay.layers.iter().enumerate() {
        let acts = layer_forward(params, ls, li, resid, mask, overrides, drop_p, dropout_rng.as_deref_mut())?;
        resid = acts.1;
        layers.push(acts.0);
    }

    let mut lnf = vec![T::zero(); len * d];
    let mut lnf_mean = vec![T::zero(); len];
    let mut lnf_rstd = vec![T::zero(); len];
    layernorm(&resid, len, d, p(params, lay.lnf_g), p(params, lay.lnf_b), &mut lnf, &mut lnf_mean, &mut lnf_rstd);
    let mut logits = vec![T::zero(); len * na];
    linear(&lnf, len, p(params, lay.w_out), p(params, lay.b_out), d, na, &mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: cfg.layers });
    }

    Ok(Activations {
        len,
        x: tokens.to_vec(),
        emb_drop,
        layers,
        resid_final: resid,
        lnf,
        lnf_mean,
        lnf_rstd,
        logits,
    })
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Scalar>(
    params: &ModelParams<T>,
    ls: &LayerSlots,
    li: usize,
    resid_in: Vec<T>,
    mask: &AttentionMask,
    overrides: &[RowOverride],
    drop_p: f64,
    mut rng: Option<&mut Rng>,
) -> Result<(LayerActs<T>, Vec<T>)> {
    let cfg = &params.config;
    let (d, h, ff) = (cfg.d_model, cfg.heads, cfg.d_ff);
    let dh = d / h;
    let len = mask.len;

    let mut ln1 = vec![T::zero(); len * d];
    let mut ln1_mean = vec![T::zero(); len];
    let mut ln1_rstd = vec![T::zero(); len];
    layernorm(&resid_in, len, d, p(params, ls.ln1_g), p(params, ls.ln1_b), &mut ln1, &mut ln1_mean, &mut ln1_rstd);

    let mut qkv = vec![T::zero(); len * 3 * d];
    linear(&ln1, len, p(params, ls.w_qkv), p(params, ls.b_qkv), d, 3 * d, &mut qkv);

    let mut probs = vec![T::zero(); h * len * len];
    let mut att = vec![T::zero(); len * d];
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let row_override: Vec<Option<&RowOverride>> = {
        let mut v = vec![None; len];
        for o in overrides.iter().filter(|o| o.layer == li) {
            v[o.row] = Some(o);
        }
        v
    };
    for head in 0..h {
        let pr = &mut probs[head * len * len..(head + 1) * len * len];
        gemm(
            len,
            dh,
            len,
            scale,
            View::strided(&qkv[head * dh..], 3 * d, 1),
            View::strided(&qkv[d + head * dh..], 1, 3 * d),
            T::zero(),
            pr,
            len,
            1,
        );
        for i in 0..len {
            let allowed: &[bool] = match row_override[i] {
                Some(o) => &o.allowed,
                None => mask.row(i),
            };
            // causality is enforced even under an override
            let row = &mut pr[i * len..(i + 1) * len];
            let mut mx = T::neg_infinity();
            for j in 0..=i {
                if allowed[j] || j == i {
                    mx = mx.max(row[j]);
                }
            }
            let mut sum = T::zero();
            for j in 0..=i {
                if allowed[j] || j == i {
                    let e = (row[j] - mx).exp();
                    row[j] = e;
                    sum = sum + e;
                } else {
                    row[j] = T::zero();
                }
            }
            row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
            let inv = T::one() / sum;
            row[..=i].iter_mut().for_each(|v| *v = *v * inv);
        }
        gemm(
            len,
            len,
            dh,
            T::one(),
            View::rm(pr, len),
            View::strided(&qkv[2 * d + head * dh..], 3 * d, 1),
            T::zero(),
            &mut att[head * dh..],
            d,
            1,
        );
    }

    let mut proj = vec![T::zero(); len * d];
    linear(&att, len, p(params, ls.w_o), p(params, ls.b_o), d, d, &mut proj);
    let attn_drop = match rng.as_deref_mut() {
        Some(r) if drop_p > 0.0 => {
            let m = dropout_mask::<T>(len * d, drop_p, r);
            proj.iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
            Some(m)
        }
        _ => None,
    };
    let resid_mid: Vec<T> = resid_in.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

    let mut ln2 = vec![T::zero(); len * d];
    let mut ln2_mean = vec![T::zero(); len];
    let mut ln2_rstd = vec![T::zero(); len];
    layernorm(&resid_mid, len, d, p(params, ls.ln2_g), p(params, ls.ln2_b), &mut ln2, &mut ln2_mean, &mut ln2_rstd);
    let mut fc_pre = vec![T::zero(); len * ff];
    linear(&ln2, len, p(params, ls.w_fc), p(params, ls.b_fc), d, ff, &mut fc_pre);
    let fc_act: Vec<T> = fc_pre.iter().map(|&v| gelu(v)).collect();
    let mut mlp = vec![T::zero(); len * d];
    linear(&fc_act, len, p(params, ls.w_proj), p(params, ls.b_proj), ff, d, &mut mlp);
    let mlp_drop = match rng.as_deref_mut() {
        Some(r) if drop_p > 0.0 => {
            let m = dropout_mask::<T>(len * d, drop_p, r);
            mlp.iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
            Some(m)
        }
        _ => None,
    };
    let resid_out: Vec<T> = resid_mid.iter().zip(&mlp).map(|(&a, &b)| a + b).collect();
    if resid_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: li });
    }

    Ok((
        LayerActs {
            resid_in,
            ln1,
            ln1_mean,
            ln1_rstd,
            qkv,
            probs,
            att,
            attn_drop,
            resid_mid,
            ln2,
            ln2_mean,
            ln2_rstd,
            fc_pre,
            fc_act,
            mlp_drop,
        },
        resid_out,
    ))
}

/// Inference forward pass over an f32 sequence.
pub fn forward(
    params: &ModelParams<f32>,
    tokens: &[f32],
    mask: &AttentionMask,
    capture: bool,
) -> Result<ForwardOutput> {
    forward_with(params, tokens, mask, &[], capture)
}

/// Inference forward with attention-row overrides.
pub fn forward_with(
    params: &ModelParams<f32>,
    tokens: &[f32],
    mask: &AttentionMask,
    overrides: &[RowOverride],
    capture: bool,
) -> Result<ForwardOutput> {
    let acts = forward_acts(params, tokens, mask, overrides, None)?;
    let trace = capture.then(|| acts.trace(params.config.heads));
    Ok(ForwardOutput {
        logits: acts.logits,
        trace,
    })
}

// ---------------------------------------------------------------- backward

/// Backpropagates `dlogits` (`len x action_count`) through a recorded pass.
/// Parameter gradients are accumulated into `grads`; the gradient with
/// respect to the input tokens is returned when `want_input_grad` is set.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    acts: &Activations<T>,
    dlogits: &[T],
    grads: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let cfg = &params.config;
    let lay = &params.layout;
    let (d, w_tok, na) = (cfg.d_model, cfg.token_width, cfg.action_count);
    let len = acts.len;
    assert_eq!(grads.len(), lay.total);
    assert_eq!(dlogits.len(), len * na);

    // head
    let mut dlnf = vec![T::zero(); len * d];
    {
        let (dw, db) = two_slots(grads, lay.w_out, lay.b_out);
        linear_backward(dlogits, &acts.lnf, p(params, lay.w_out), len, d, na, dw, db, Some(&mut dlnf), false);
    }
    let mut dresid = vec![T::zero(); len * d];
    {
        let (dg, db) = two_slots(grads, lay.lnf_g, lay.lnf_b);
        layernorm_backward(&dlnf, &acts.resid_final, &acts.lnf_mean, &acts.lnf_rstd, p(params, lay.lnf_g), len, d, dg, db, &mut dresid);
    }

    for (li, ls) in lay.layers.iter().enumerate().rev() {
        dresid = layer_backward(params, ls, &acts.layers[li], dresid, grads);
    }

    if let Some(m) = &acts.emb_drop {
        dresid.iter_mut().zip(m).for_each(|(g, &k)| *g = *g * k);
    }
    let mut dx = want_input_grad.then(|| vec![T::zero(); len * w_tok]);
    let (dw, db) = two_slots(grads, lay.w_in, lay.b_in);
    linear_backward(&dresid, &acts.x, p(params, lay.w_in), len, w_tok, d, dw, db, dx.as_deref_mut(), false);
    dx
}

/// Mutable views of two disjoint parameter slots.
fn two_slots<T>(grads: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert!(a.offset + a.len() <= b.offset, "slots must be ordered and disjoint");
    let (lo, hi) = grads.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

fn layer_backward<T: Scalar>(
    params: &ModelParams<T>,
    ls: &LayerSlots,
    a: &LayerActs<T>,
    dresid_out: Vec<T>,
    grads: &mut [T],
) -> Vec<T> {
    let cfg = &params.config;
    let (d, h, ff) = (cfg.d_model, cfg.heads, cfg.d_ff);
    let dh = d / h;
    let len = a.resid_in.len() / d;

    // mlp branch
    let mut dmlp = dresid_out.clone();
    if let Some(m) = &a.mlp_drop {
        dmlp.iter_mut().zip(m).for_each(|(g, &k)| *g = *g * k);
    }
    let mut dfc_act = vec![T::zero(); len * ff];
    {
        let (dw, db) = two_slots(grads, ls.w_proj, ls.b_proj);
        linear_backward(&dmlp, &a.fc_act, p(params, ls.w_proj), len, ff, d, dw, db, Some(&mut dfc_act), false);
    }
    let dfc_pre: Vec<T> = dfc_act
        .iter()
        .zip(&a.fc_pre)
        .map(|(&g, &x)| g * gelu_grad(x))
        .collect();
    let mut dln2 = vec![T::zero(); len * d];
    {
        let (dw, db) = two_slots(grads, ls.w_fc, ls.b_fc);
        linear_backward(&dfc_pre, &a.ln2, p(params, ls.w_fc), len, d, ff, dw, db, Some(&mut dln2), false);
    }
    let mut dresid_mid = dresid_out;
    {
        let (dg, db) = two_slots(grads, ls.ln2_g, ls.ln2_b);
        layernorm_backward(&dln2, &a.resid_mid, &a.ln2_mean, &a.ln2_rstd, p(params, ls.ln2_g), len, d, dg, db, &mut dresid_mid);
    }

    // attention branch
    let mut dproj = dresid_mid.clone();
    if let Some(m) = &a.attn_drop {
        dproj.iter_mut().zip(m).for_each(|(g, &k)| *g = *g * k);
    }
    let mut datt = vec![T::zero(); len * d];
    {
        let (dw, db) = two_slots(grads, ls.w_o, ls.b_o);
        linear_backward(&dproj, &a.att, p(params, ls.w_o), len, d, d, dw, db, Some(&mut datt), false);
    }
    let mut dqkv = vec![T::zero(); len * 3 * d];
    let mut dp = vec![T::zero(); len * len];
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    for head in 0..h {
        let pr = &a.probs[head * len * len..(head + 1) * len * len];
        // dP = dAtt_h V_h^T
        gemm(
            len,
            dh,
            len,
            T::one(),
            View::strided(&datt[head * dh..], d, 1),
            View::strided(&a.qkv[2 * d + head * dh..], 1, 3 * d),
            T::zero(),
            &mut dp,
            len,
            1,
        );
        // dV_h = P^T dAtt_h
        gemm(
            len,
            len,
            dh,
            T::one(),
            View::tr(pr, len),
            View::strided(&datt[head * dh..], d, 1),
            T::zero(),
            &mut dqkv[2 * d + head * dh..],
            3 * d,
            1,
        );
        // softmax backward, in place: dS = P * (dP - sum(P * dP))
        for i in 0..len {
            let prow = &pr[i * len..i * len + i + 1];
            let drow = &mut dp[i * len..(i + 1) * len];
            let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
            for j in 0..=i {
                drow[j] = prow[j] * (drow[j] - dot);
            }
            drow[i + 1..].iter_mut().for_each(|v| *v = T::zero());
        }
        // dQ_h = scale * dS K_h ; dK_h = scale * dS^T Q_h
        gemm(
            len,
            len,
            dh,
            scale,
            View::rm(&dp, len),
            View::strided(&a.qkv[d + head * dh..], 3 * d, 1),
            T::zero(),
            &mut dqkv[head * dh..],
            3 * d,
            1,
        );
        gemm(
            len,
            len,
            dh,
            scale,
            View::tr(&dp, len),
            View::strided(&a.qkv[head * dh..], 3 * d, 1),
            T::zero(),
            &mut dqkv[d + head * dh..],
            3 * d,
            1,
        );
    }
    let mut dln1 = vec![T::zero(); len * d];
    {
        let (dw, db) = two_slots(grads, ls.w_qkv, ls.b_qkv);
        linear_backward(&dqkv, &a.ln1, p(params, ls.w_qkv), len, d, 3 * d, dw, db, Some(&mut dln1), false);
    }
    let mut dresid_in = dresid_mid;
    {
        let (dg, db) = two_slots(grads, ls.ln1_g, ls.ln1_b);
        layernorm_backward(&dln1, &a.resid_in, &a.ln1_mean, &a.ln1_rstd, p(params, ls.ln1_g), len, d, dg, db, &mut dresid_in);
    }
    dresid_in
}

// ---------------------------------------------------------------- loss

/// Mean cross-entropy over labelled positions; writes `dloss/dlogits`
/// scaled by `weight` into `dlogits`. Returns the summed (unscaled) loss.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    actions: usize,
    positions: &[usize],
    labels: &[usize],
    weight: T,
    dlogits: &mut [T],
) -> f64 {
    let mut total = 0.0;
    for (&pos, &label) in positions.iter().zip(labels) {
        let row = &logits[pos * actions..(pos + 1) * actions];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += (lse - row[label]).as_f64();
        let drow = &mut dlogits[pos * actions..(pos + 1) * actions];
        for a in 0..actions {
            let pa = (row[a] - lse).exp();
            let target = if a == label { T::one() } else { T::zero() };
            drow[a] = drow[a] + weight * (pa - target);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::Suite;
    use crate::model::params::ModelConfig;
    use crate::model::tokens::{build_attention_mask, Role};
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(layers: usize, d: usize) -> ModelParams<f64> {
        let cfg = ModelConfig::sized(Suite::Gridworld, layers, 2, d);
        let mut p = ModelParams::<f64>::init(&cfg, &mut substream(3, "init", 0)).unwrap();
        // perturb gains/biases so their gradients are exercised too
        let mut rng = substream(3, "perturb", 0);
        for v in &mut p.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.05 * z;
        }
        p
    }

    fn random_tokens(len: usize, width: usize, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, "tok", 0);
        (0..len * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_rows_normalized_and_masked() {
        let p = tiny(2, 8).cast::<f32>();
        let roles = [Role::Context, Role::Context, Role::Query, Role::Context, Role::Query];
        let mask = build_attention_mask(&roles);
        let toks: Vec<f32> = random_tokens(5, 26, 1).iter().map(|&v| v as f32).collect();
        let out = forward(&p, &toks, &mask, true).unwrap();
        let tr = out.trace.unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for i in 0..5 {
                    let s: f32 = (0..5).map(|j| tr.attn(l, h, i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    for j in 0..5 {
                        if !mask.is_allowed(i, j) {
                            assert_eq!(tr.attn(l, h, i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = tiny(1, 8);
        let roles = [Role::Context, Role::Context, Role::Query, Role::Context, Role::Query];
        let mask = build_attention_mask(&roles);
        let toks = random_tokens(5, 26, 2);
        let positions = [2usize, 4];
        let labels = [1usize, 3];
        let loss = |q: &ModelParams<f64>| {
            let acts = forward_acts(q, &toks, &mask, &[], None).unwrap();
            let mut scratch = vec![0.0; acts.logits.len()];
            cross_entropy(&acts.logits, 5, &positions, &labels, 0.5, &mut scratch) / 2.0
        };
        let acts = forward_acts(&p, &toks, &mask, &[], None).unwrap();
        let mut dl = vec![0.0; acts.logits.len()];
        cross_entropy(&acts.logits, 5, &positions, &labels, 0.5, &mut dl);
        let mut grads = vec![0.0; p.data.len()];
        backward(&p, &acts, &dl, &mut grads, false);

        let mut rng = substream(9, "dir", 0);
        for (name, slot) in p.layout.named().to_vec() {
            let v: Vec<f64> = (0..slot.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = 1e-4;
            let mut plus = p.clone();
            let mut minus = p.clone();
            for (k, idx) in slot.range().enumerate() {
                plus.data[idx] += eps * v[k];
                minus.data[idx] -= eps * v[k];
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let an: f64 = slot.range().enumerate().map(|(k, idx)| grads[idx] * v[k]).sum();
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            assert!(rel < 1e-3, "{name}: fd {fd} vs analytic {an} (rel {rel})");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = tiny(2, 8);
        let mask = build_attention_mask(&[Role::Context, Role::Context, Role::Query]);
        let toks = random_tokens(3, 26, 4);
        let f = |x: &[f64]| forward_acts(&p, x, &mask, &[], None).unwrap().logits[2 * 5 + 1];
        let acts = forward_acts(&p, &toks, &mask, &[], None).unwrap();
        let mut dl = vec![0.0; 15];
        dl[2 * 5 + 1] = 1.0;
        let mut grads = vec![0.0; p.data.len()];
        let dx = backward(&p, &acts, &dl, &mut grads, true).unwrap();
        for &i in &[0usize, 13, 30, 51, 60, 77] {
            let mut a = toks.clone();
            let mut b = toks.clone();
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (f(&a) - f(&b)) / 2e-5;
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_actions() {
        let logits = vec![0.3f64; 10];
        let mut dl = vec![0.0; 10];
        let l = cross_entropy(&logits, 5, &[1], &[2], 1.0, &mut dl);
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_have_tiny_gradient() {
        let logits = vec![0.0, 0.0, 40.0, 0.0, 0.0];
        let mut dl = vec![0.0f64; 5];
        let l = cross_entropy(&logits, 5, &[0], &[2], 1.0, &mut dl);
        assert!(l < 1e-15);
        assert!(dl.iter().all(|g| g.abs() < 1e-15));
    }
}
