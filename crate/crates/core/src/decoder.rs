//! Structured-attention fusion decoder.
//!
//! Token layout for `T` time steps and `N_q` queries:
//! `[stmap 0..T | video T..2T | state 2T | queries 2T+1..2T+1+N_q]`.

use crate::dceb::{global_pool_map, global_pool_volume, ConfBundle, FeatureVolume};
use crate::error::{invalid, Result};
use crate::layers::{dot, relu_in_place, LayerNorm, Linear, Matrix};
use crate::numerics::{resample_linear, sigmoid, softplus, standardize};
use crate::sdmu::FeatureMap2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub queries: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            queries: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    frames: usize,
    queries: usize,
    tokens: Matrix,
}

impl TokenSet {
    pub fn new(frames: usize, queries: usize, tokens: Matrix) -> Result<Self> {
        if tokens.rows != 2 * frames + 1 + queries {
            return Err(invalid(format!(
                "{} tokens for T={frames}, N_q={queries}",
                tokens.rows
            )));
        }
        if tokens.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tokens must be finite"));
        }
        Ok(Self {
            frames,
            queries,
            tokens,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn stmap(&self, t: usize) -> &[f64] {
        self.tokens.row(t)
    }

    pub fn video(&self, t: usize) -> &[f64] {
        self.tokens.row(self.frames + t)
    }

    pub fn state(&self) -> &[f64] {
        self.tokens.row(2 * self.frames)
    }

    pub fn query(&self, q: usize) -> &[f64] {
        self.tokens.row(2 * self.frames + 1 + q)
    }

    fn with_tokens(&self, tokens: Matrix) -> Self {
        Self {
            frames: self.frames,
            queries: self.queries,
            tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Stmap,
    Video,
    State,
    Query,
}

pub fn token_kind(frames: usize, index: usize) -> TokenKind {
    if index < frames {
        TokenKind::Stmap
    } else if index < 2 * frames {
        TokenKind::Video
    } else if index == 2 * frames {
        TokenKind::State
    } else {
        TokenKind::Query
    }
}

/// Additive attention bias, `n × n` row-major with `n = 2T + 1 + N_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub frames: usize,
    pub queries: usize,
    pub data: Vec<f64>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        2 * self.frames + 1 + self.queries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size() + j]
    }
}

pub fn build_mask(
    frames: usize,
    queries: usize,
    conf_v: f64,
    conf_s: f64,
    lambda: f64,
    tau: f64,
) -> Result<AttentionMask> {
    for (name, c) in [("video", conf_v), ("STMap", conf_s)] {
        if !(c > 0.0 && c < 1.0) {
            return Err(invalid(format!("{name} confidence {c} is outside (0, 1)")));
        }
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("mask scale {lambda} must be finite and non-negative")));
    }
    if !tau.is_finite() {
        return Err(invalid("mask threshold must be finite"));
    }
    let n = 2 * frames + 1 + queries;
    let to_video = -lambda * (tau - conf_v).max(0.0);
    let to_stmap = -lambda * (tau - conf_s).max(0.0);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let ki = token_kind(frames, i);
        for j in 0..n {
            let kj = token_kind(frames, j);
            data[i * n + j] = match (ki, kj) {
                (TokenKind::Stmap, TokenKind::Video) => to_video,
                (TokenKind::Video, TokenKind::Stmap) => to_stmap,
                (TokenKind::Query, TokenKind::Query) if i != j => f64::NEG_INFINITY,
                (TokenKind::Stmap | TokenKind::Video, TokenKind::Query) => f64::NEG_INFINITY,
                _ => 0.0,
            };
        }
    }
    Ok(AttentionMask {
        frames,
        queries,
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionWeights {
    pub fn zeros(d: usize, heads: usize) -> Self {
        Self {
            heads,
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub proj_video: Linear,
    pub proj_stmap: Linear,
    pub state: Linear,
    pub queries: Matrix,
    pub attention: AttentionWeights,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
    /// State token → `(δ, α)` pre-activations.
    pub gate: Linear,
    pub query_head: Linear,
    pub out_head: Linear,
    pub lambda: f64,
    pub tau: f64,
}

impl DecoderWeights {
    pub fn zeros(channels: usize, cfg: &DecoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            proj_video: Linear::zeros(d, channels),
            proj_stmap: Linear::zeros(d, channels),
            state: Linear::zeros(d, 4),
            queries: Matrix::zeros(cfg.queries, d),
            attention: AttentionWeights::zeros(d, cfg.heads),
            norm1: LayerNorm::identity(d),
            ffn_in: Linear::zeros(4 * d, d),
            ffn_out: Linear::zeros(d, 4 * d),
            norm2: LayerNorm::identity(d),
            gate: Linear::zeros(2, d),
            query_head: Linear::zeros(d, d),
            out_head: Linear::zeros(1, d),
            lambda: 1.0,
            tau: 0.5,
        }
    }

    pub fn d_model(&self) -> usize {
        self.queries.cols
    }
}

fn rows_to_matrix(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Matrix {
    let data: Vec<f64> = rows.flatten().collect();
    Matrix {
        rows: data.len() / cols.max(1),
        cols,
        data,
    }
}

pub fn tokenize(
    v: &FeatureVolume,
    s: &FeatureMap2D,
    conf: &ConfBundle,
    w: &DecoderWeights,
) -> Result<TokenSet> {
    let frames = v.frames();
    if s.frames() != frames {
        return Err(invalid(format!(
            "decoder inputs differ in length: video {frames} vs STMap {}",
            s.frames()
        )));
    }
    if w.proj_video.in_dim() != v.channels() || w.proj_stmap.in_dim() != s.channels() {
        return Err(invalid("decoder projections do not match the feature channels"));
    }
    let d = w.d_model();
    let v_pool = global_pool_volume(v);
    let s_pool = global_pool_map(s);
    let at = |pool: &Vec<Vec<f64>>, t: usize| -> Vec<f64> { pool.iter().map(|c| c[t]).collect() };
    let stmap = (0..frames).map(|t| w.proj_stmap.apply(&at(&s_pool, t)));
    let video = (0..frames).map(|t| w.proj_video.apply(&at(&v_pool, t)));
    let state = std::iter::once(w.state.apply(&conf.means()));
    let queries = (0..w.queries.rows).map(|q| w.queries.row(q).to_vec());
    let tokens = rows_to_matrix(stmap.chain(video).chain(state).chain(queries), d);
    TokenSet::new(frames, w.queries.rows, tokens)
}

fn softmax_row(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Multi-head masked attention; also returns the per-head `n × n`
/// post-softmax weights.
pub fn masked_mhsa_with_weights(
    x: &TokenSet,
    mask: &AttentionMask,
    w: &AttentionWeights,
) -> Result<(TokenSet, Vec<Matrix>)> {
    let n = x.len();
    let d = x.dim();
    if w.heads == 0 || d % w.heads != 0 {
        return Err(invalid(format!("model width {d} is not divisible by {} heads", w.heads)));
    }
    if mask.size() != n || mask.frames != x.frames {
        return Err(invalid("attention mask does not match the token layout"));
    }
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = w.query.apply_rows(&x.tokens);
    let k = w.key.apply_rows(&x.tokens);
    let v = w.value.apply_rows(&x.tokens);

    let mut concat = Matrix::zeros(n, d);
    let mut all_weights = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut att = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = att.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k.row(j)[cols.clone()]) * scale + mask.get(i, j);
            }
            softmax_row(row);
        }
        for i in 0..n {
            let out = &mut concat.row_mut(i)[cols.clone()];
            for (j, &a) in att.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vv;
                }
            }
        }
        all_weights.push(att);
    }
    Ok((x.with_tokens(w.output.apply_rows(&concat)), all_weights))
}

pub fn masked_mhsa(x: &TokenSet, mask: &AttentionMask, w: &AttentionWeights) -> Result<TokenSet> {
    masked_mhsa_with_weights(x, mask, w).map(|(out, _)| out)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// `X' = LN(X + MHSA(X))`, `X'' = LN(X' + FFN(X'))`.
pub fn decoder_block(x: &TokenSet, mask: &AttentionMask, w: &DecoderWeights) -> Result<TokenSet> {
    let attended = masked_mhsa(x, mask, &w.attention)?;
    let x1 = w.norm1.apply_rows(&add(&x.tokens, &attended.tokens));
    let mut hidden = w.ffn_in.apply_rows(&x1);
    relu_in_place(&mut hidden.data);
    let ffn = w.ffn_out.apply_rows(&hidden);
    let x2 = w.norm2.apply_rows(&add(&x1, &ffn));
    Ok(x.with_tokens(x2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionGates {
    /// Video share, in `(0, 1)`.
    pub delta: f64,
    /// Query share, `≥ 0`.
    pub alpha: f64,
}

pub fn fusion_gates(state: &[f64], gate: &Linear) -> FusionGates {
    let raw = gate.apply(state);
    FusionGates {
        delta: sigmoid(raw[0]),
        alpha: softplus(raw[1]),
    }
}

/// `δ·v + (1−δ)·s + α·r` for one time step.
pub fn fuse_tokens(video: &[f64], stmap: &[f64], query: &[f64], gates: FusionGates) -> Vec<f64> {
    let FusionGates { delta, alpha } = gates;
    video
        .iter()
        .zip(stmap)
        .zip(query)
        .map(|((v, s), r)| delta * v + (1.0 - delta) * s + alpha * r)
        .collect()
}

/// Pre-standardization fused signal at the token rate, plus the gates used.
pub fn fused_signal(x: &TokenSet, w: &DecoderWeights) -> (Vec<f64>, FusionGates) {
    let gates = fusion_gates(x.state(), &w.gate);
    let d = x.dim();
    let mut pooled = vec![0.0; d];
    for q in 0..x.queries() {
        for (p, v) in pooled.iter_mut().zip(x.query(q)) {
            *p += v;
        }
    }
    if x.queries() > 0 {
        pooled.iter_mut().for_each(|p| *p /= x.queries() as f64);
    }
    let r_query = w.query_head.apply(&pooled);
    let signal = (0..x.frames())
        .map(|t| {
            let f = fuse_tokens(x.video(t), x.stmap(t), &r_query, gates);
            w.out_head.apply(&f)[0]
        })
        .collect();
    (signal, gates)
}

/// Head output upsampled to `out_len` samples and standardized.
pub fn fuse_output(x: &TokenSet, w: &DecoderWeights, out_len: usize) -> Result<Vec<f64>> {
    let (signal, _) = fused_signal(x, w);
    let up = resample_linear(&signal, out_len);
    let scale = up.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    standardize(&up, scale)
}

/// Full decoder on the deepest features; the mask uses the time-means of
/// the deepest block's video and STMap spectral confidences.
pub fn decode(
    v: &FeatureVolume,
    s: &FeatureMap2D,
    conf: &ConfBundle,
    w: &DecoderWeights,
    out_len: usize,
) -> Result<Vec<f64>> {
    let tokens = tokenize(v, s, conf, w)?;
    let mask = build_mask(
        tokens.frames(),
        tokens.queries(),
        conf.video.mean(),
        conf.stmap.mean(),
        w.lambda,
        w.tau,
    )?;
    let refined = decoder_block(&tokens, &mask, w)?;
    fuse_output(&refined, w, out_len)
}
