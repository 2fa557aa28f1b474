//! Free-running multi-scale generation and log-probability scoring.
//!
//! Generation walks the plan's blocks in order with a per-layer key/value
//! cache: condition blocks are processed once, each target scale is sampled
//! in parallel over its positions and fed back as the next scale's inputs.
//! Recorded log-probabilities are always taken under the temperature-1,
//! full-vocabulary distribution, so they are exact policy probabilities
//! regardless of the sampling adjustments.
//!
//! Every position draws from its own RNG stream derived from
//! (seed, scale, row, col); results do not depend on evaluation order.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::forward::{self, chosen_logprobs, forward_cached, position_input, PlanView};
use crate::layout::{SegmentLabel, SequencePlan};
use crate::math;
use crate::model::{
    final_ln_ix, head_ix, layer_base, Model, L_B1, L_B2, L_LN1_B, L_LN1_G, L_LN2_B, L_LN2_G,
    L_W1, L_W2, L_WK, L_WO, L_WQ, L_WV,
};
use crate::rng::Stream;
use crate::tokenizer::{MultiScaleTokens, ScaleSchedule};

const TAG_SAMPLE: u64 = 0x5A3B;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SamplerError {
    InvalidParams(String),
    Forward(String),
}

impl fmt::Display for SamplerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerError::InvalidParams(m) => write!(f, "invalid sampling params: {m}"),
            SamplerError::Forward(m) => write!(f, "forward failed: {m}"),
        }
    }
}

impl From<forward::ForwardError> for SamplerError {
    fn from(e: forward::ForwardError) -> Self {
        SamplerError::Forward(alloc::format!("{e}"))
    }
}

/// Sampling adjustments. `top_k = 1` is deterministic argmax mode.
#[derive(Debug, Clone, Copy)]
pub struct SampleParams {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl SampleParams {
    /// GRPO default: unadjusted policy sampling, so stored log-probabilities
    /// are exact.
    pub fn policy(seed: u64, vocab: usize) -> Self {
        SampleParams {
            temperature: 1.0,
            top_k: vocab,
            seed,
        }
    }

    /// Deterministic argmax mode used by evaluation.
    pub fn argmax(seed: u64) -> Self {
        SampleParams {
            temperature: 1.0,
            top_k: 1,
            seed,
        }
    }
}

/// One generated image with its conditioning and per-token log-probabilities
/// under the policy that sampled it.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub tokens: MultiScaleTokens,
    /// log p(token) per target position, scale-major row-major; each <= 0.
    pub logprobs_old: Vec<f64>,
    pub text: Vec<u32>,
    pub subject: MultiScaleTokens,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.logprobs_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs_old.is_empty()
    }
}

/// Per-layer key/value cache over absolute sequence positions.
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Draws one token from a logits row. Returns (token, logprob under the
/// unadjusted temperature-1 full-vocab distribution).
fn draw_token(row: &[f64], params: &SampleParams, stream: &mut Stream) -> (u32, f64) {
    let vocab = row.len();
    let lse = math::logsumexp(row);
    let chosen = if params.top_k == 1 {
        // Argmax with ties to the lower index.
        let mut best = 0usize;
        for j in 1..vocab {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    } else {
        // Candidate set: top_k largest logits, ties toward lower index.
        let candidates: Vec<usize> = if params.top_k >= vocab {
            (0..vocab).collect()
        } else {
            let mut ix: Vec<usize> = (0..vocab).collect();
            ix.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut keep = ix[..params.top_k].to_vec();
            keep.sort_unstable();
            keep
        };
        // Temperature-adjusted softmax over candidates, inverse-CDF draw in
        // ascending token order.
        let mut maxv = f64::NEG_INFINITY;
        for &c in &candidates {
            maxv = maxv.max(row[c] / params.temperature);
        }
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&c| math::exp(row[c] / params.temperature - maxv))
            .collect();
        let total: f64 = weights.iter().sum();
        let r = stream.next_f64() * total;
        let mut acc = 0.0;
        let mut pick = candidates[candidates.len() - 1];
        for (i, &c) in candidates.iter().enumerate() {
            acc += weights[i];
            if acc > r {
                pick = c;
                break;
            }
        }
        pick
    };
    ((chosen as u32), (row[chosen] - lse).min(0.0))
}

/// Samples a rollout. Target inputs are built only from previously sampled
/// scales; the plan's mask guarantees nothing later can leak in.
pub fn sample(
    model: &Model,
    plan: &SequencePlan,
    schedule: &ScaleSchedule,
    subject: &MultiScaleTokens,
    text: &[u32],
    params: &SampleParams,
) -> Result<Rollout, SamplerError> {
    if !(params.temperature > 0.0) {
        return Err(SamplerError::InvalidParams(
            "temperature must be > 0".to_string(),
        ));
    }
    let vocab = model.config.token_vocab;
    if params.top_k < 1 || params.top_k > vocab {
        return Err(SamplerError::InvalidParams(alloc::format!(
            "top_k must be in [1, {vocab}]"
        )));
    }
    let view = PlanView::new(plan, schedule, &model.config)?;

    let cfg = &model.config;
    let d = cfg.d_model;
    let n = view.seq_len;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let hidden = cfg.mlp_hidden();
    let scale_inv = 1.0 / math::sqrt(hd as f64);

    let mut cache = KvCache {
        k: (0..cfg.n_layers).map(|_| vec![0.0; n * d]).collect(),
        v: (0..cfg.n_layers).map(|_| vec![0.0; n * d]).collect(),
    };

    // Stages: consecutive non-target blocks merge into one stage, each
    // target block is its own stage.
    let mut stages: Vec<(usize, usize, Option<usize>)> = Vec::new(); // (start, end, target scale)
    for b in &plan.blocks {
        match b.label {
            SegmentLabel::Target(k) => stages.push((b.start, b.start + b.len, Some(k))),
            _ => match stages.last_mut() {
                Some((_, end, None)) if *end == b.start => *end = b.start + b.len,
                _ => stages.push((b.start, b.start + b.len, None)),
            },
        }
    }

    let mut target_maps: Vec<Vec<u32>> = Vec::new();
    let mut logprobs = Vec::with_capacity(schedule.total_tokens());
    for (start, end, target_scale) in stages {
        let m = end - start;
        // Embed stage positions.
        let mut x = vec![0.0; m * d];
        for (i, pos) in (start..end).enumerate() {
            let kind = position_input(
                &plan.positions[pos],
                schedule,
                subject,
                text,
                &target_maps,
            )?;
            forward::embed_at(model, &view.meta[pos], kind, &mut x[i * d..(i + 1) * d])?;
        }
        for l in 0..cfg.n_layers {
            let base = layer_base(l);
            let mut a = vec![0.0; m * d];
            let mut a_hat = vec![0.0; m * d];
            let mut inv = vec![0.0; m];
            forward::layer_norm(
                &x,
                model.tensor(base + L_LN1_G),
                model.tensor(base + L_LN1_B),
                d,
                &mut a,
                &mut a_hat,
                &mut inv,
            );
            let mut q = vec![0.0; m * d];
            let mut kk = vec![0.0; m * d];
            let mut vv = vec![0.0; m * d];
            forward::matmul(&a, model.tensor(base + L_WQ), &mut q, m, d, d);
            forward::matmul(&a, model.tensor(base + L_WK), &mut kk, m, d, d);
            forward::matmul(&a, model.tensor(base + L_WV), &mut vv, m, d, d);
            // Write this stage's keys and values into the cache first so
            // intra-stage attention sees them.
            for i in 0..m {
                let pos = start + i;
                cache.k[l][pos * d..(pos + 1) * d].copy_from_slice(&kk[i * d..(i + 1) * d]);
                cache.v[l][pos * d..(pos + 1) * d].copy_from_slice(&vv[i * d..(i + 1) * d]);
            }
            let kc = &cache.k[l];
            let vc = &cache.v[l];
            let mut ctx = vec![0.0; m * d];
            let mut scores: Vec<(usize, f64)> = Vec::new();
            for i in 0..m {
                let qpos = start + i;
                for h in 0..heads {
                    let qrow = &q[i * d + h * hd..i * d + (h + 1) * hd];
                    scores.clear();
                    let mut maxv = f64::NEG_INFINITY;
                    for &(rs, rl) in view.query_runs(qpos) {
                        for key in rs as usize..(rs + rl) as usize {
                            debug_assert!(key < end, "mask references an unprocessed key");
                            let krow = &kc[key * d + h * hd..key * d + (h + 1) * hd];
                            let mut dot = 0.0;
                            for j in 0..hd {
                                dot += qrow[j] * krow[j];
                            }
                            let s = dot * scale_inv;
                            if s > maxv {
                                maxv = s;
                            }
                            scores.push((key, s));
                        }
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut() {
                        sc.1 = math::exp(sc.1 - maxv);
                        total += sc.1;
                    }
                    let invt = 1.0 / total;
                    let crow = &mut ctx[i * d + h * hd..i * d + (h + 1) * hd];
                    for &(key, w) in &scores {
                        let p = w * invt;
                        let vrow = &vc[key * d + h * hd..key * d + (h + 1) * hd];
                        for j in 0..hd {
                            crow[j] += p * vrow[j];
                        }
                    }
                }
            }
            let mut x_mid = x.clone();
            forward::matmul(&ctx, model.tensor(base + L_WO), &mut x_mid, m, d, d);
            let mut b_act = vec![0.0; m * d];
            let mut b_hat = vec![0.0; m * d];
            let mut inv2 = vec![0.0; m];
            forward::layer_norm(
                &x_mid,
                model.tensor(base + L_LN2_G),
                model.tensor(base + L_LN2_B),
                d,
                &mut b_act,
                &mut b_hat,
                &mut inv2,
            );
            let b1 = model.tensor(base + L_B1);
            let mut z1 = vec![0.0; m * hidden];
            for i in 0..m {
                z1[i * hidden..(i + 1) * hidden].copy_from_slice(b1);
            }
            forward::matmul(&b_act, model.tensor(base + L_W1), &mut z1, m, d, hidden);
            let g1: Vec<f64> = z1.iter().map(|&z| forward::gelu(z)).collect();
            let b2 = model.tensor(base + L_B2);
            let mut x_out = x_mid;
            for i in 0..m {
                let row = &mut x_out[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] += b2[j];
                }
            }
            forward::matmul(&g1, model.tensor(base + L_W2), &mut x_out, m, hidden, d);
            x = x_out;
        }

        let Some(k_scale) = target_scale else {
            continue;
        };
        // Final norm + head, then sample every position of this scale.
        let f_ix = final_ln_ix(cfg.n_layers);
        let mut f = vec![0.0; m * d];
        let mut f_hat = vec![0.0; m * d];
        let mut invf = vec![0.0; m];
        forward::layer_norm(
            &x,
            model.tensor(f_ix),
            model.tensor(f_ix + 1),
            d,
            &mut f,
            &mut f_hat,
            &mut invf,
        );
        let head = model.tensor(head_ix(cfg.n_layers));
        let mut logits = vec![0.0; m * vocab];
        forward::matmul(&f, head, &mut logits, m, d, vocab);
        let side = schedule.side(k_scale - 1);
        let mut map = vec![0u32; side * side];
        for i in 0..m {
            let pos = &plan.positions[start + i];
            let mut stream = Stream::derive(
                params.seed,
                TAG_SAMPLE,
                &[k_scale as u64, pos.row as u64, pos.col as u64],
            );
            let row = &logits[i * vocab..(i + 1) * vocab];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SamplerError::Forward("non-finite logits".to_string()));
            }
            let (tok, lp) = draw_token(row, params, &mut stream);
            map[pos.row * side + pos.col] = tok;
            logprobs.push(lp);
        }
        target_maps.push(map);
    }

    Ok(Rollout {
        tokens: MultiScaleTokens { maps: target_maps },
        logprobs_old: logprobs,
        text: text.to_vec(),
        subject: subject.clone(),
    })
}

/// Teacher-forces `tokens` and returns log p(token | conditions, earlier
/// scales) for every target position, scale-major row-major.
pub fn score_tokens(
    model: &Model,
    plan: &SequencePlan,
    schedule: &ScaleSchedule,
    subject: &MultiScaleTokens,
    text: &[u32],
    tokens: &MultiScaleTokens,
) -> Result<Vec<f64>, SamplerError> {
    let view = PlanView::new(plan, schedule, &model.config)?;
    let inputs = forward::assemble_inputs(plan, schedule, subject, text, &tokens.maps)?;
    let (logits, _) = forward_cached(model, &view, &inputs, &view.loss_positions)?;
    let flat = tokens.flatten();
    if flat.len() != view.loss_positions.len() {
        return Err(SamplerError::Forward("token count != target positions".to_string()));
    }
    if flat.iter().any(|&t| t as usize >= model.config.token_vocab) {
        return Err(SamplerError::Forward("token id out of range".to_string()));
    }
    Ok(chosen_logprobs(&logits, &flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{assemble_inputs, forward};
    use crate::layout::build_prefill_plan;
    use crate::model::{head_ix, init_model, ModelConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            token_vocab: 27,
            text_vocab: 6,
            max_scales: 2,
            max_side: 2,
            max_text_len: 4,
            seed: 3,
        }
    }

    fn tiny_subject(sched: &ScaleSchedule) -> MultiScaleTokens {
        MultiScaleTokens {
            maps: sched
                .sides()
                .iter()
                .map(|&s| (0..s * s).map(|i| (i % 27) as u32).collect())
                .collect(),
        }
    }

    #[test]
    fn argmax_mode_is_deterministic() {
        let cfg = tiny_config();
        let sched = ScaleSchedule::new(&[1, 2]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        let model = init_model(&cfg).unwrap();
        let subject = tiny_subject(&sched);
        let text = [0u32, 1, 2, 3];
        let a = sample(&model, &plan, &sched, &subject, &text, &SampleParams::argmax(7)).unwrap();
        let b = sample(&model, &plan, &sched, &subject, &text, &SampleParams::argmax(9)).unwrap();
        // Argmax ignores the seed entirely.
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let cfg = tiny_config();
        let sched = ScaleSchedule::new(&[1, 2]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        let model = init_model(&cfg).unwrap();
        let subject = tiny_subject(&sched);
        let text = [0u32, 1, 2, 3];
        for params in [
            SampleParams { temperature: 0.0, top_k: 27, seed: 1 },
            SampleParams { temperature: -1.0, top_k: 27, seed: 1 },
            SampleParams { temperature: 1.0, top_k: 0, seed: 1 },
            SampleParams { temperature: 1.0, top_k: 28, seed: 1 },
        ] {
            assert!(sample(&model, &plan, &sched, &subject, &text, &params).is_err());
        }
    }

    #[test]
    fn recorded_logprobs_match_scoring_path() {
        let cfg = tiny_config();
        let sched = ScaleSchedule::new(&[1, 2]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        let model = init_model(&cfg).unwrap();
        let subject = tiny_subject(&sched);
        let text = [0u32, 1, 2, 3];
        let params = SampleParams::policy(11, cfg.token_vocab);
        let rollout = sample(&model, &plan, &sched, &subject, &text, &params).unwrap();
        let scored =
            score_tokens(&model, &plan, &sched, &subject, &text, &rollout.tokens).unwrap();
        assert_eq!(scored.len(), rollout.logprobs_old.len());
        for (a, b) in rollout.logprobs_old.iter().zip(&scored) {
            assert!(math::abs(a - b) < 1e-10, "{a} vs {b}");
            assert!(*a <= 0.0);
        }
    }

    #[test]
    fn staged_sampling_equals_scale_by_scale_full_forward() {
        let cfg = tiny_config();
        let sched = ScaleSchedule::new(&[1, 2]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        let model = init_model(&cfg).unwrap();
        let subject = tiny_subject(&sched);
        let text = [1u32, 0, 3, 2];
        let params = SampleParams { temperature: 0.8, top_k: 9, seed: 21 };
        let fast = sample(&model, &plan, &sched, &subject, &text, &params).unwrap();

        // Reference: per scale, run the full (uncached) forward with the maps
        // sampled so far and draw from the same per-position streams.
        let view = PlanView::new(&plan, &sched, &cfg).unwrap();
        let mut maps: Vec<Vec<u32>> = Vec::new();
        for k in 1..=sched.num_scales() {
            let inputs = assemble_inputs(&plan, &sched, &subject, &text, &maps).unwrap();
            let logits = forward(&model, &view, &inputs).unwrap();
            let side = sched.side(k - 1);
            let block = plan
                .block_of(crate::layout::SegmentLabel::Target(k))
                .unwrap();
            let mut map = vec![0u32; side * side];
            for i in 0..block.len {
                let pos = &plan.positions[block.start + i];
                let row_ix = logits.row_of(block.start + i).unwrap();
                let mut stream = Stream::derive(
                    params.seed,
                    TAG_SAMPLE,
                    &[k as u64, pos.row as u64, pos.col as u64],
                );
                let (tok, _) = draw_token(logits.row(row_ix), &params, &mut stream);
                map[pos.row * side + pos.col] = tok;
            }
            maps.push(map);
        }
        assert_eq!(fast.tokens.maps, maps);
    }

    #[test]
    fn uniform_head_samples_each_token_half_the_time() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            token_vocab: 2,
            text_vocab: 2,
            max_scales: 1,
            max_side: 1,
            max_text_len: 1,
            seed: 0,
        };
        let sched = ScaleSchedule::new(&[1]).unwrap();
        let plan = build_prefill_plan(&sched, 1);
        let mut model = init_model(&cfg).unwrap();
        // Zero head -> all logits equal -> exactly uniform.
        let h = head_ix(cfg.n_layers);
        for w in model.tensor_mut(h) {
            *w = 0.0;
        }
        let subject = MultiScaleTokens { maps: alloc::vec![alloc::vec![1u32]] };
        let text = [0u32];
        let params_base = SampleParams::policy(0, 2);
        let mut ones = 0u32;
        let n = 10_000;
        for seed in 0..n {
            let params = SampleParams { seed: seed as u64, ..params_base };
            let r = sample(&model, &plan, &sched, &subject, &text, &params).unwrap();
            ones += r.tokens.maps[0][0];
            // Uniform over 2 tokens: every logprob is -ln 2.
            assert!(math::abs(r.logprobs_old[0] + math::ln(2.0)) < 1e-12);
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn scoring_probabilities_normalize() {
        let cfg = tiny_config();
        let sched = ScaleSchedule::new(&[1, 2]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        let model = init_model(&cfg).unwrap();
        let subject = tiny_subject(&sched);
        let text = [0u32, 1, 2, 3];
        let view = PlanView::new(&plan, &sched, &cfg).unwrap();
        let tokens = tiny_subject(&sched);
        let inputs = assemble_inputs(&plan, &sched, &subject, &text, &tokens.maps).unwrap();
        let (logits, _) = forward_cached(&model, &view, &inputs, &view.loss_positions).unwrap();
        for i in 0..logits.positions.len() {
            let row = logits.row(i);
            let lse = math::logsumexp(row);
            let total: f64 = row.iter().map(|&v| math::exp(v - lse)).sum();
            assert!(math::abs(total - 1.0) < 1e-9);
        }
    }

    #[test]
    fn uniform_model_scores_every_token_at_log_vocab() {
        let cfg = tiny_config();
        let sched = ScaleSchedule::new(&[1, 2]).unwrap();
        let plan = build_prefill_plan(&sched, 4);
        let mut model = init_model(&cfg).unwrap();
        let h = head_ix(cfg.n_layers);
        for w in model.tensor_mut(h) {
            *w = 0.0;
        }
        let subject = tiny_subject(&sched);
        let text = [0u32, 1, 2, 3];
        let tokens = tiny_subject(&sched);
        let lps = score_tokens(&model, &plan, &sched, &subject, &text, &tokens).unwrap();
        for lp in lps {
            assert!(math::abs(lp + math::ln(27.0)) < 1e-12);
        }
    }
}
