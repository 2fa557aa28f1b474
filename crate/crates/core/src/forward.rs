//! Forward and reverse passes of the transformer over a sequence plan.
//!
//! Attention follows the plan's boolean mask exactly. For the built-in
//! layouts every query's allowed key set is a contiguous range, which the
//! hot loops exploit via per-query run lists; arbitrary masks still work.
//! All reductions accumulate in f64 in ascending index order, so results are
//! identical across runs and thread counts.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::layout::{SegmentLabel, SequencePlan};
use crate::math;
use crate::model::{
    final_ln_ix, head_ix, layer_base, Model, ModelConfig, Tensors, L_B1, L_B2, L_LN1_B, L_LN1_G,
    L_LN2_B, L_LN2_G, L_W1, L_W2, L_WK, L_WO, L_WQ, L_WV,
};
use crate::model::tensor_specs;
use crate::tokenizer::{MultiScaleTokens, ScaleSchedule};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardError {
    PlanTooLarge(String),
    BadInputs(String),
    EmptyLossMask,
    NonFinite(String),
}

impl fmt::Display for ForwardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForwardError::PlanTooLarge(m) => write!(f, "plan exceeds model config: {m}"),
            ForwardError::BadInputs(m) => write!(f, "bad inputs: {m}"),
            ForwardError::EmptyLossMask => write!(f, "loss mask selects no positions"),
            ForwardError::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

/// Embedding source for one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Image token id, embedded through the token table.
    Token(u32),
    /// Text token id.
    Text(u32),
    /// Learned start embedding (first target scale).
    Start,
}

#[derive(Debug, Clone, Copy)]
pub struct PosMeta {
    pub seg: u8, // 0 subject, 1 text, 2 target
    pub scale: u16, // 1-based; 0 for text
    pub row_ix: u16,
    pub col_ix: u16,
    pub text_slot: u16,
}

/// Plan preprocessed for the model: per-position embedding metadata and
/// per-query allowed-key runs.
#[derive(Debug, Clone)]
pub struct PlanView {
    pub seq_len: usize,
    pub meta: Vec<PosMeta>,
    pub loss_positions: Vec<u32>,
    runs: Vec<(u32, u32)>,
    run_off: Vec<u32>,
    allowed_off: Vec<u32>,
}

impl PlanView {
    pub fn new(
        plan: &SequencePlan,
        schedule: &ScaleSchedule,
        config: &ModelConfig,
    ) -> Result<Self, ForwardError> {
        if schedule.final_side() > config.max_side {
            return Err(ForwardError::PlanTooLarge(
                "schedule side exceeds max_side".to_string(),
            ));
        }
        if schedule.num_scales() > config.max_scales {
            return Err(ForwardError::PlanTooLarge(
                "schedule scales exceed max_scales".to_string(),
            ));
        }
        let n = plan.len();
        let mut meta = Vec::with_capacity(n);
        for p in &plan.positions {
            let m = match p.label {
                SegmentLabel::Text => {
                    if p.col >= config.max_text_len {
                        return Err(ForwardError::PlanTooLarge(
                            "text length exceeds max_text_len".to_string(),
                        ));
                    }
                    PosMeta {
                        seg: 1,
                        scale: 0,
                        row_ix: 0,
                        col_ix: 0,
                        text_slot: p.col as u16,
                    }
                }
                SegmentLabel::Subject(k) | SegmentLabel::Target(k) => {
                    let side = schedule.side(k - 1);
                    // Cell centers mapped onto the finest grid.
                    let row_ix = ((2 * p.row + 1) * config.max_side / (2 * side)) as u16;
                    let col_ix = ((2 * p.col + 1) * config.max_side / (2 * side)) as u16;
                    PosMeta {
                        seg: if matches!(p.label, SegmentLabel::Subject(_)) { 0 } else { 2 },
                        scale: k as u16,
                        row_ix,
                        col_ix,
                        text_slot: 0,
                    }
                }
            };
            meta.push(m);
        }

        let mut runs = Vec::new();
        let mut run_off = Vec::with_capacity(n + 1);
        let mut allowed_off = Vec::with_capacity(n + 1);
        run_off.push(0u32);
        allowed_off.push(0u32);
        let mut total = 0u32;
        for q in 0..n {
            let mut k = 0;
            while k < n {
                if plan.allows(q, k) {
                    let start = k;
                    while k < n && plan.allows(q, k) {
                        k += 1;
                    }
                    runs.push((start as u32, (k - start) as u32));
                    total += (k - start) as u32;
                } else {
                    k += 1;
                }
            }
            run_off.push(runs.len() as u32);
            allowed_off.push(total);
        }
        let loss_positions = (0..n as u32)
            .filter(|&p| plan.loss_mask[p as usize])
            .collect();
        Ok(PlanView {
            seq_len: n,
            meta,
            loss_positions,
            runs,
            run_off,
            allowed_off,
        })
    }

    #[inline]
    pub fn query_runs(&self, q: usize) -> &[(u32, u32)] {
        &self.runs[self.run_off[q] as usize..self.run_off[q + 1] as usize]
    }

    #[inline]
    pub fn allowed_count(&self, q: usize) -> usize {
        (self.allowed_off[q + 1] - self.allowed_off[q]) as usize
    }

    #[inline]
    fn probs_base(&self, q: usize) -> usize {
        self.allowed_off[q] as usize
    }

    pub fn total_allowed(&self) -> usize {
        *self.allowed_off.last().unwrap() as usize
    }
}

/// Builds per-position inputs for a plan from subject tokens, text tokens,
/// and (optionally partial) target token maps. Target scale k > 1 embeds the
/// scale k-1 map upsampled to the scale-k grid; missing maps fall back to the
/// start embedding, which is only legal for positions the mask hides from
/// every computed logit.
pub fn assemble_inputs(
    plan: &SequencePlan,
    schedule: &ScaleSchedule,
    subject: &MultiScaleTokens,
    text: &[u32],
    target_maps: &[Vec<u32>],
) -> Result<Vec<InputKind>, ForwardError> {
    plan.positions
        .iter()
        .map(|p| position_input(p, schedule, subject, text, target_maps))
        .collect()
}

/// The single input rule shared by teacher forcing, scoring, and sampling:
/// subject and text positions embed their own tokens, TARGET(1) embeds the
/// start embedding, and TARGET(k>1) embeds the scale k-1 map upsampled to the
/// scale-k grid. Target scales missing from `target_maps` fall back to the
/// start embedding; that is only legal for positions the mask hides from
/// every computed logit.
pub fn position_input(
    p: &crate::layout::Position,
    schedule: &ScaleSchedule,
    subject: &MultiScaleTokens,
    text: &[u32],
    target_maps: &[Vec<u32>],
) -> Result<InputKind, ForwardError> {
    Ok(match p.label {
        SegmentLabel::Subject(k) => {
            let side = schedule.side(k - 1);
            let map = subject
                .maps
                .get(k - 1)
                .ok_or_else(|| ForwardError::BadInputs("missing subject scale".to_string()))?;
            if map.len() != side * side {
                return Err(ForwardError::BadInputs("subject map shape".to_string()));
            }
            InputKind::Token(map[p.row * side + p.col])
        }
        SegmentLabel::Text => InputKind::Text(
            *text
                .get(p.col)
                .ok_or_else(|| ForwardError::BadInputs("text too short".to_string()))?,
        ),
        SegmentLabel::Target(k) => {
            if k == 1 {
                InputKind::Start
            } else if let Some(prev) = target_maps.get(k - 2) {
                let side = schedule.side(k - 1);
                let prev_side = schedule.side(k - 2);
                if prev.len() != prev_side * prev_side {
                    return Err(ForwardError::BadInputs("target map shape".to_string()));
                }
                let f = side / prev_side;
                InputKind::Token(prev[(p.row / f) * prev_side + p.col / f])
            } else {
                InputKind::Start
            }
        }
    })
}

/// Logits at a selected set of positions.
#[derive(Debug, Clone)]
pub struct Logits {
    pub positions: Vec<u32>,
    pub vocab: usize,
    /// Row-major, one row of `vocab` per entry of `positions`.
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Row index for a sequence position, if present.
    pub fn row_of(&self, pos: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p as usize == pos)
    }
}

struct LayerCache {
    a_hat: Vec<f64>,
    ln1_inv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities, laid out as [query][head][allowed key].
    probs: Vec<f64>,
    ctx: Vec<f64>,
    b_hat: Vec<f64>,
    ln2_inv: Vec<f64>,
    z1: Vec<f64>,
    g1: Vec<f64>,
}

/// Activations kept for the reverse pass.
pub struct ActCache {
    inputs: Vec<InputKind>,
    layers: Vec<LayerCache>,
    f_hat: Vec<f64>,
    lnf_inv: Vec<f64>,
}

/// out[m,n] += x[m,k] · w[k,n]
pub(crate) fn matmul(x: &[f64], w: &[f64], out: &mut [f64], m: usize, kdim: usize, n: usize) {
    for i in 0..m {
        let xrow = &x[i * kdim..(i + 1) * kdim];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += xv * wrow[j];
            }
        }
    }
}

/// dw[k,n] += x[m,k]^T · dy[m,n]
fn matmul_xt(x: &[f64], dy: &[f64], dw: &mut [f64], m: usize, kdim: usize, n: usize) {
    for i in 0..m {
        let xrow = &x[i * kdim..(i + 1) * kdim];
        let dyrow = &dy[i * n..(i + 1) * n];
        for (kk, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let drow = &mut dw[kk * n..(kk + 1) * n];
            for j in 0..n {
                drow[j] += xv * dyrow[j];
            }
        }
    }
}

/// dx[m,k] += dy[m,n] · w[k,n]^T
fn matmul_wt(dy: &[f64], w: &[f64], dx: &mut [f64], m: usize, kdim: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let dxrow = &mut dx[i * kdim..(i + 1) * kdim];
        for kk in 0..kdim {
            let wrow = &w[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += dyrow[j] * wrow[j];
            }
            dxrow[kk] += acc;
        }
    }
}

pub(crate) fn layer_norm(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    d: usize,
    out: &mut [f64],
    x_hat: &mut [f64],
    inv_std: &mut [f64],
) {
    let m = x.len() / d;
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let inv = 1.0 / math::sqrt(var + LN_EPS);
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            x_hat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }
}

/// dx += LN backprop; accumulates dg, db.
fn layer_norm_backward(
    dout: &[f64],
    x_hat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let m = dout.len() / d;
    for i in 0..m {
        let do_row = &dout[i * d..(i + 1) * d];
        let xh_row = &x_hat[i * d..(i + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = do_row[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh_row[j];
            dg[j] += do_row[j] * xh_row[j];
            db[j] += do_row[j];
        }
        let inv = inv_std[i];
        let nd = d as f64;
        for j in 0..d {
            let dxh = do_row[j] * g[j];
            dx[i * d + j] += inv * (dxh - sum_dxhat / nd - xh_row[j] * sum_dxhat_xhat / nd);
        }
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = math::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Writes the embedding of one position into `out` (length d_model).
pub(crate) fn embed_at(
    model: &Model,
    meta: &PosMeta,
    kind: InputKind,
    out: &mut [f64],
) -> Result<(), ForwardError> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let tok = model.tensor(crate::model::T_TOK_EMBED);
    let text = model.tensor(crate::model::T_TEXT_EMBED);
    let seg = model.tensor(crate::model::T_SEG_EMBED);
    let scale = model.tensor(crate::model::T_SCALE_EMBED);
    let rowe = model.tensor(crate::model::T_ROW_EMBED);
    let cole = model.tensor(crate::model::T_COL_EMBED);
    let tpos = model.tensor(crate::model::T_TEXT_POS_EMBED);
    let start = model.tensor(crate::model::T_START_EMBED);
    match kind {
        InputKind::Token(t) => {
            let t = t as usize;
            if t >= cfg.token_vocab {
                return Err(ForwardError::BadInputs("token id out of range".to_string()));
            }
            out.copy_from_slice(&tok[t * d..(t + 1) * d]);
        }
        InputKind::Text(t) => {
            let t = t as usize;
            if t >= cfg.text_vocab {
                return Err(ForwardError::BadInputs("text id out of range".to_string()));
            }
            out.copy_from_slice(&text[t * d..(t + 1) * d]);
        }
        InputKind::Start => {
            out.copy_from_slice(&start[..d]);
        }
    }
    let s = meta.seg as usize;
    for j in 0..d {
        out[j] += seg[s * d + j];
    }
    if meta.seg == 1 {
        let slot = meta.text_slot as usize;
        for j in 0..d {
            out[j] += tpos[slot * d + j];
        }
    } else {
        let k = (meta.scale - 1) as usize;
        let (ri, ci) = (meta.row_ix as usize, meta.col_ix as usize);
        for j in 0..d {
            out[j] += scale[k * d + j] + rowe[ri * d + j] + cole[ci * d + j];
        }
    }
    Ok(())
}

fn embed(model: &Model, view: &PlanView, inputs: &[InputKind]) -> Result<Vec<f64>, ForwardError> {
    let d = model.config.d_model;
    if inputs.len() != view.seq_len {
        return Err(ForwardError::BadInputs("input length != plan length".to_string()));
    }
    let mut x = vec![0.0; view.seq_len * d];
    for (p, (&kind, m)) in inputs.iter().zip(&view.meta).enumerate() {
        embed_at(model, m, kind, &mut x[p * d..(p + 1) * d])?;
    }
    Ok(x)
}

fn attention_forward(
    model: &Model,
    view: &PlanView,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &mut [f64],
    ctx: &mut [f64],
) {
    let cfg = &model.config;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut scores: Vec<f64> = Vec::new();
    for qi in 0..view.seq_len {
        let base = view.probs_base(qi) * heads;
        let allowed = view.allowed_count(qi);
        for h in 0..heads {
            let qrow = &q[qi * d + h * hd..qi * d + (h + 1) * hd];
            scores.clear();
            let mut maxv = f64::NEG_INFINITY;
            for &(start, len) in view.query_runs(qi) {
                for key in start..start + len {
                    let krow = &k[key as usize * d + h * hd..key as usize * d + (h + 1) * hd];
                    let mut dot = 0.0;
                    for j in 0..hd {
                        dot += qrow[j] * krow[j];
                    }
                    let s = dot * scale;
                    if s > maxv {
                        maxv = s;
                    }
                    scores.push(s);
                }
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = math::exp(*s - maxv);
                sum += *s;
            }
            let inv = 1.0 / sum;
            let pslice = &mut probs[base + h * allowed..base + (h + 1) * allowed];
            for (ps, &s) in pslice.iter_mut().zip(scores.iter()) {
                *ps = s * inv;
            }
            let crow = &mut ctx[qi * d + h * hd..qi * d + (h + 1) * hd];
            let mut ai = 0;
            for &(start, len) in view.query_runs(qi) {
                for key in start..start + len {
                    let p = pslice[ai];
                    ai += 1;
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &v[key as usize * d + h * hd..key as usize * d + (h + 1) * hd];
                    for j in 0..hd {
                        crow[j] += p * vrow[j];
                    }
                }
            }
        }
    }
}

fn attention_backward(
    model: &Model,
    view: &PlanView,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dctx: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let cfg = &model.config;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut dp: Vec<f64> = Vec::new();
    for qi in 0..view.seq_len {
        let base = view.probs_base(qi) * heads;
        let allowed = view.allowed_count(qi);
        for h in 0..heads {
            let dcrow = &dctx[qi * d + h * hd..qi * d + (h + 1) * hd];
            if dcrow.iter().all(|&x| x == 0.0) {
                continue;
            }
            let pslice = &probs[base + h * allowed..base + (h + 1) * allowed];
            dp.clear();
            dp.resize(allowed, 0.0);
            let mut ai = 0;
            let mut pdp = 0.0;
            for &(start, len) in view.query_runs(qi) {
                for key in start..start + len {
                    let vrow = &v[key as usize * d + h * hd..key as usize * d + (h + 1) * hd];
                    let mut acc = 0.0;
                    for j in 0..hd {
                        acc += dcrow[j] * vrow[j];
                    }
                    dp[ai] = acc;
                    pdp += pslice[ai] * acc;
                    ai += 1;
                }
            }
            let qrow = &q[qi * d + h * hd..qi * d + (h + 1) * hd];
            let dqrow = &mut dq[qi * d + h * hd..qi * d + (h + 1) * hd];
            ai = 0;
            for &(start, len) in view.query_runs(qi) {
                for key in start..start + len {
                    let p = pslice[ai];
                    let ds = p * (dp[ai] - pdp) * scale;
                    ai += 1;
                    let kix = key as usize * d + h * hd;
                    // dv[key] += p * dctx
                    let dvrow = &mut dv[kix..kix + hd];
                    for j in 0..hd {
                        dvrow[j] += p * dcrow[j];
                    }
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &k[kix..kix + hd];
                    for j in 0..hd {
                        dqrow[j] += ds * krow[j];
                    }
                    let dkrow = &mut dk[kix..kix + hd];
                    for j in 0..hd {
                        dkrow[j] += ds * qrow[j];
                    }
                }
            }
        }
    }
}

/// Runs the model and returns logits at `logit_positions` (ascending), plus
/// the activation cache needed for [`backward`].
pub fn forward_cached(
    model: &Model,
    view: &PlanView,
    inputs: &[InputKind],
    logit_positions: &[u32],
) -> Result<(Logits, ActCache), ForwardError> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let hidden = cfg.mlp_hidden();
    let n = view.seq_len;
    let heads = cfg.n_heads;

    let mut x = embed(model, view, inputs)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let base = layer_base(l);
        let mut a = vec![0.0; n * d];
        let mut a_hat = vec![0.0; n * d];
        let mut ln1_inv = vec![0.0; n];
        layer_norm(
            &x,
            model.tensor(base + L_LN1_G),
            model.tensor(base + L_LN1_B),
            d,
            &mut a,
            &mut a_hat,
            &mut ln1_inv,
        );
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        matmul(&a, model.tensor(base + L_WQ), &mut q, n, d, d);
        matmul(&a, model.tensor(base + L_WK), &mut k, n, d, d);
        matmul(&a, model.tensor(base + L_WV), &mut v, n, d, d);
        let mut probs = vec![0.0; view.total_allowed() * heads];
        let mut ctx = vec![0.0; n * d];
        attention_forward(model, view, &q, &k, &v, &mut probs, &mut ctx);
        let mut x_mid = x.clone();
        matmul(&ctx, model.tensor(base + L_WO), &mut x_mid, n, d, d);
        let mut b_act = vec![0.0; n * d];
        let mut b_hat = vec![0.0; n * d];
        let mut ln2_inv = vec![0.0; n];
        layer_norm(
            &x_mid,
            model.tensor(base + L_LN2_G),
            model.tensor(base + L_LN2_B),
            d,
            &mut b_act,
            &mut b_hat,
            &mut ln2_inv,
        );
        let b1 = model.tensor(base + L_B1);
        let mut z1 = vec![0.0; n * hidden];
        for i in 0..n {
            z1[i * hidden..(i + 1) * hidden].copy_from_slice(b1);
        }
        matmul(&b_act, model.tensor(base + L_W1), &mut z1, n, d, hidden);
        let g1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
        let b2 = model.tensor(base + L_B2);
        let mut x_out = x_mid.clone();
        for i in 0..n {
            let row = &mut x_out[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += b2[j];
            }
        }
        matmul(&g1, model.tensor(base + L_W2), &mut x_out, n, hidden, d);
        layers.push(LayerCache {
            a_hat,
            ln1_inv,
            q,
            k,
            v,
            probs,
            ctx,
            b_hat,
            ln2_inv,
            z1,
            g1,
        });
        x = x_out;
    }

    let f_ix = final_ln_ix(cfg.n_layers);
    let mut f = vec![0.0; n * d];
    let mut f_hat = vec![0.0; n * d];
    let mut lnf_inv = vec![0.0; n];
    layer_norm(
        &x,
        model.tensor(f_ix),
        model.tensor(f_ix + 1),
        d,
        &mut f,
        &mut f_hat,
        &mut lnf_inv,
    );

    let head = model.tensor(head_ix(cfg.n_layers));
    let vocab = cfg.token_vocab;
    let mut data = vec![0.0; logit_positions.len() * vocab];
    for (i, &p) in logit_positions.iter().enumerate() {
        let frow = &f[p as usize * d..(p as usize + 1) * d];
        let orow = &mut data[i * vocab..(i + 1) * vocab];
        for (kk, &xv) in frow.iter().enumerate() {
            let wrow = &head[kk * vocab..(kk + 1) * vocab];
            for j in 0..vocab {
                orow[j] += xv * wrow[j];
            }
        }
    }
    for &v in &data {
        if !v.is_finite() {
            return Err(ForwardError::NonFinite("logits".to_string()));
        }
    }
    Ok((
        Logits {
            positions: logit_positions.to_vec(),
            vocab,
            data,
        },
        ActCache {
            inputs: inputs.to_vec(),
            layers,
            f_hat,
            lnf_inv,
        },
    ))
}

/// Logits at every sequence position.
pub fn forward(
    model: &Model,
    view: &PlanView,
    inputs: &[InputKind],
) -> Result<Logits, ForwardError> {
    let all: Vec<u32> = (0..view.seq_len as u32).collect();
    Ok(forward_cached(model, view, inputs, &all)?.0)
}

/// Reverse pass: given d(loss)/d(logits), accumulates gradients for every
/// parameter tensor.
pub fn backward(
    model: &Model,
    view: &PlanView,
    cache: &ActCache,
    dlogits: &Logits,
) -> Tensors {
    let cfg = &model.config;
    let d = cfg.d_model;
    let hidden = cfg.mlp_hidden();
    let n = view.seq_len;
    let vocab = cfg.token_vocab;
    let specs = tensor_specs(cfg);
    let mut grads = Tensors::zeros_like(&specs);

    // Head and final LN.
    let f_ix = final_ln_ix(cfg.n_layers);
    let h_ix = head_ix(cfg.n_layers);
    let head = model.tensor(h_ix);
    let g_f = model.tensor(f_ix);
    let b_f = model.tensor(f_ix + 1);
    let mut df = vec![0.0; n * d];
    {
        // Recompute f rows on demand (f = g * f_hat + b).
        for (i, &p) in dlogits.positions.iter().enumerate() {
            let p = p as usize;
            let drow = &dlogits.data[i * vocab..(i + 1) * vocab];
            let fh = &cache.f_hat[p * d..(p + 1) * d];
            let dh = &mut grads.0[h_ix];
            let dfrow = &mut df[p * d..(p + 1) * d];
            for kk in 0..d {
                let fval = g_f[kk] * fh[kk] + b_f[kk];
                let wrow = &head[kk * vocab..(kk + 1) * vocab];
                let dwrow = &mut dh[kk * vocab..(kk + 1) * vocab];
                let mut acc = 0.0;
                for j in 0..vocab {
                    dwrow[j] += fval * drow[j];
                    acc += drow[j] * wrow[j];
                }
                dfrow[kk] += acc;
            }
        }
    }
    let mut dx = vec![0.0; n * d];
    {
        let (dg_slice, rest) = grads.0[f_ix..].split_at_mut(1);
        let db_slice = &mut rest[0];
        layer_norm_backward(
            &df,
            &cache.f_hat,
            &cache.lnf_inv,
            g_f,
            d,
            &mut dx,
            &mut dg_slice[0],
            db_slice,
        );
    }

    for l in (0..cfg.n_layers).rev() {
        let base = layer_base(l);
        let lc = &cache.layers[l];
        // MLP backward. dx is d(loss)/d(x_out).
        let mut dg1 = vec![0.0; n * hidden];
        matmul_wt(&dx, model.tensor(base + L_W2), &mut dg1, n, hidden, d);
        matmul_xt(&lc.g1, &dx, &mut grads.0[base + L_W2], n, hidden, d);
        {
            let db2 = &mut grads.0[base + L_B2];
            for i in 0..n {
                let row = &dx[i * d..(i + 1) * d];
                for j in 0..d {
                    db2[j] += row[j];
                }
            }
        }
        let mut dz1 = dg1;
        for (dz, &z) in dz1.iter_mut().zip(&lc.z1) {
            *dz *= gelu_grad(z);
        }
        {
            let db1 = &mut grads.0[base + L_B1];
            for i in 0..n {
                let row = &dz1[i * hidden..(i + 1) * hidden];
                for j in 0..hidden {
                    db1[j] += row[j];
                }
            }
        }
        // b_act recomputed from b_hat.
        let g2 = model.tensor(base + L_LN2_G);
        let b2v = model.tensor(base + L_LN2_B);
        let mut b_act = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                b_act[i * d + j] = g2[j] * lc.b_hat[i * d + j] + b2v[j];
            }
        }
        matmul_xt(&b_act, &dz1, &mut grads.0[base + L_W1], n, d, hidden);
        let mut db_act = vec![0.0; n * d];
        matmul_wt(&dz1, model.tensor(base + L_W1), &mut db_act, n, d, hidden);
        // LN2 backward adds into d(x_mid).
        let mut dx_mid = dx; // residual path
        {
            let (dg_slice, rest) = grads.0[base + L_LN2_G..].split_at_mut(1);
            let db_slice = &mut rest[0];
            layer_norm_backward(
                &db_act,
                &lc.b_hat,
                &lc.ln2_inv,
                g2,
                d,
                &mut dx_mid,
                &mut dg_slice[0],
                db_slice,
            );
        }
        // Attention backward.
        let mut dctx = vec![0.0; n * d];
        matmul_wt(&dx_mid, model.tensor(base + L_WO), &mut dctx, n, d, d);
        matmul_xt(&lc.ctx, &dx_mid, &mut grads.0[base + L_WO], n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dkk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        attention_backward(
            model, view, &lc.q, &lc.k, &lc.v, &lc.probs, &dctx, &mut dq, &mut dkk, &mut dv,
        );
        // Project back through Wq/Wk/Wv; `a` recomputed from a_hat.
        let g1v = model.tensor(base + L_LN1_G);
        let b1v = model.tensor(base + L_LN1_B);
        let mut a = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                a[i * d + j] = g1v[j] * lc.a_hat[i * d + j] + b1v[j];
            }
        }
        matmul_xt(&a, &dq, &mut grads.0[base + L_WQ], n, d, d);
        matmul_xt(&a, &dkk, &mut grads.0[base + L_WK], n, d, d);
        matmul_xt(&a, &dv, &mut grads.0[base + L_WV], n, d, d);
        let mut da = vec![0.0; n * d];
        matmul_wt(&dq, model.tensor(base + L_WQ), &mut da, n, d, d);
        matmul_wt(&dkk, model.tensor(base + L_WK), &mut da, n, d, d);
        matmul_wt(&dv, model.tensor(base + L_WV), &mut da, n, d, d);
        // LN1 backward adds into d(x_in); residual path flows through dx_mid.
        let mut dx_in = dx_mid;
        {
            let (dg_slice, rest) = grads.0[base + L_LN1_G..].split_at_mut(1);
            let db_slice = &mut rest[0];
            layer_norm_backward(
                &da,
                &lc.a_hat,
                &lc.ln1_inv,
                g1v,
                d,
                &mut dx_in,
                &mut dg_slice[0],
                db_slice,
            );
        }
        dx = dx_in;
    }

    // Embedding backward.
    for (p, (&kind, m)) in cache.inputs.iter().zip(&view.meta).enumerate() {
        let drow = &dx[p * d..(p + 1) * d];
        match kind {
            InputKind::Token(t) => {
                let row = &mut grads.0[crate::model::T_TOK_EMBED][t as usize * d..];
                for j in 0..d {
                    row[j] += drow[j];
                }
            }
            InputKind::Text(t) => {
                let row = &mut grads.0[crate::model::T_TEXT_EMBED][t as usize * d..];
                for j in 0..d {
                    row[j] += drow[j];
                }
            }
            InputKind::Start => {
                let row = &mut grads.0[crate::model::T_START_EMBED];
                for j in 0..d {
                    row[j] += drow[j];
                }
            }
        }
        let s = m.seg as usize;
        {
            let row = &mut grads.0[crate::model::T_SEG_EMBED][s * d..];
            for j in 0..d {
                row[j] += drow[j];
            }
        }
        if m.seg == 1 {
            let row =
                &mut grads.0[crate::model::T_TEXT_POS_EMBED][m.text_slot as usize * d..];
            for j in 0..d {
                row[j] += drow[j];
            }
        } else {
            let k = (m.scale - 1) as usize;
            {
                let row = &mut grads.0[crate::model::T_SCALE_EMBED][k * d..];
                for j in 0..d {
                    row[j] += drow[j];
                }
            }
            {
                let row = &mut grads.0[crate::model::T_ROW_EMBED][m.row_ix as usize * d..];
                for j in 0..d {
                    row[j] += drow[j];
                }
            }
            let row = &mut grads.0[crate::model::T_COL_EMBED][m.col_ix as usize * d..];
            for j in 0..d {
                row[j] += drow[j];
            }
        }
    }
    grads
}

/// Mean negative log-likelihood (nats) of `targets` at mask-true positions.
/// `targets` and `mask` are indexed by sequence position; `logits` must cover
/// every masked position.
pub fn nll_loss(logits: &Logits, targets: &[u32], mask: &[bool]) -> Result<f64, ForwardError> {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(ForwardError::EmptyLossMask);
    }
    let mut total = 0.0;
    for (pos, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
        let row_ix = logits
            .row_of(pos)
            .ok_or_else(|| ForwardError::BadInputs("logits missing masked position".to_string()))?;
        let row = logits.row(row_ix);
        let lse = math::logsumexp(row);
        total += lse - row[targets[pos] as usize];
    }
    Ok(total / count as f64)
}

/// Per-row log-softmax of the chosen ids; rows align with `logits.positions`.
pub fn chosen_logprobs(logits: &Logits, chosen: &[u32]) -> Vec<f64> {
    logits
        .positions
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let row = logits.row(i);
            row[chosen[i] as usize] - math::logsumexp(row)
        })
        .collect()
}

/// Convenience used by supervised training and tests: teacher-forced forward,
/// mean NLL over the plan's loss positions, and full parameter gradients.
pub fn loss_and_gradients(
    model: &Model,
    view: &PlanView,
    inputs: &[InputKind],
    targets_flat: &[u32],
) -> Result<(f64, Tensors), ForwardError> {
    let positions = view.loss_positions.clone();
    if positions.is_empty() {
        return Err(ForwardError::EmptyLossMask);
    }
    if targets_flat.len() != positions.len() {
        return Err(ForwardError::BadInputs("targets/positions mismatch".to_string()));
    }
    let (logits, cache) = forward_cached(model, view, inputs, &positions)?;
    let count = positions.len() as f64;
    let vocab = logits.vocab;
    let mut loss = 0.0;
    let mut dlogits = Logits {
        positions: positions.clone(),
        vocab,
        data: vec![0.0; positions.len() * vocab],
    };
    for i in 0..positions.len() {
        let row = logits.row(i);
        let lse = math::logsumexp(row);
        let t = targets_flat[i] as usize;
        loss += lse - row[t];
        let drow = &mut dlogits.data[i * vocab..(i + 1) * vocab];
        for j in 0..vocab {
            drow[j] = math::exp(row[j] - lse) / count;
        }
        drow[t] -= 1.0 / count;
    }
    loss /= count;
    if !loss.is_finite() {
        return Err(ForwardError::NonFinite("loss".to_string()));
    }
    Ok((loss, backward(model, view, &cache, &dlogits)))
}
