//! Time encodings, text embedding, per-frame fusion into backbone-width
//! tokens, and assembly of the mixed TEXT/OBJ/TIME/VIDEO sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grounding_gate::MaskTrack;
use crate::numerics::{l2_norm, layer_norm, Affine, Matrix};

pub const DEFAULT_N_OBJ: usize = 4;
pub const DEFAULT_N_TIME: usize = 8;
pub const DEFAULT_N_BINS: usize = 128;
pub const TIME_BASE: f64 = 10_000.0;
pub const LN_EPS: f64 = 1e-5;

/// `τ_t = (t − 1)/(T − 1)` for `t = 1..=T`; a single frame maps to 0.
pub fn normalize_timestamps(frames: usize) -> Result<Vec<f64>> {
    match frames {
        0 => Err(Error::invalid("cannot normalise timestamps of an empty video")),
        1 => Ok(vec![0.0]),
        n => Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect()),
    }
}

/// Interleaved `[sin(τ/ω_k), cos(τ/ω_k)]` pairs with `ω_k = 10000^(2k/d_f)`.
pub fn sinusoidal_encoding(tau: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("time encoding dimension must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = TIME_BASE.powf(2.0 * k as f64 / dim as f64);
        let (s, c) = (tau / omega).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Learned time encoder `W2·tanh(W1·[τ, τ²] + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp {
    pub hidden: Affine,
    pub output: Affine,
}

impl TimeMlp {
    pub fn new(hidden: Affine, output: Affine) -> Result<Self> {
        if hidden.in_dim() != 2 {
            return Err(Error::invalid(format!("time MLP input must be 2-wide, got {}", hidden.in_dim())));
        }
        if output.in_dim() != hidden.out_dim() {
            return Err(Error::invalid("time MLP layer widths do not chain"));
        }
        Ok(Self { hidden, output })
    }

    pub fn seeded(hidden: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { hidden: Affine::random(hidden, 2, &mut rng), output: Affine::random(dim, hidden, &mut rng) }
    }

    pub fn dim(&self) -> usize {
        self.output.out_dim()
    }
}

pub fn mlp_encoding(tau: f64, params: &TimeMlp) -> Result<Vec<f64>> {
    let mut h = params.hidden.apply(&[tau, tau * tau])?;
    h.iter_mut().for_each(|v| *v = v.tanh());
    params.output.apply(&h)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TimeEncoder {
    Sinusoidal { dim: usize },
    Mlp(TimeMlp),
}

impl TimeEncoder {
    pub fn dim(&self) -> usize {
        match self {
            Self::Sinusoidal { dim } => *dim,
            Self::Mlp(p) => p.dim(),
        }
    }

    pub fn encode(&self, tau: f64) -> Result<Vec<f64>> {
        match self {
            Self::Sinusoidal { dim } => sinusoidal_encoding(tau, *dim),
            Self::Mlp(p) => mlp_encoding(tau, p),
        }
    }
}

/// Sentence-level text embedding.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    /// Pooled embedding of the whole text.
    fn embed(&self, text: &str) -> Vec<f64>;

    /// One embedding per whitespace token.
    fn token_embeddings(&self, text: &str) -> Vec<Vec<f64>>;
}

/// Deterministic stand-in for a frozen text encoder: every lowercase
/// whitespace token maps to a Gaussian vector seeded by its FNV-1a hash, and
/// the pooled embedding is the token mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashedTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        let scale = 1.0 / (self.dim.max(1) as f64).sqrt();
        (0..self.dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl TextEncoder for HashedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let toks = self.token_embeddings(text);
        let mut out = vec![0.0; self.dim];
        if toks.is_empty() {
            return out;
        }
        for v in &toks {
            out.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        out.iter_mut().for_each(|a| *a /= toks.len() as f64);
        out
    }

    fn token_embeddings(&self, text: &str) -> Vec<Vec<f64>> {
        text.split_whitespace().map(|t| self.token_vector(&t.to_lowercase())).collect()
    }
}

/// Projection applied after layer-normalising `[z_t; e_text; e_time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub projection: Affine,
    pub eps: f64,
}

impl FusionParams {
    pub fn seeded(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { projection: Affine::random(out_dim, in_dim, &mut rng), eps: LN_EPS }
    }
}

/// `ũ_t = W_proj·LN([z_t; e_text; e_time]) + b_proj`.
pub fn fuse(z: &[f64], text: &[f64], time: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    let width = z.len() + text.len() + time.len();
    if width != params.projection.in_dim() {
        return Err(Error::invalid(format!(
            "fusion expects {} concatenated inputs, got {}+{}+{}",
            params.projection.in_dim(),
            z.len(),
            text.len(),
            time.len()
        )));
    }
    let concat: Vec<f64> = z.iter().chain(text).chain(time).copied().collect();
    params.projection.apply(&layer_norm(&concat, params.eps))
}

/// Fuses every frame row of `z` with the shared text embedding and its own
/// time encoding.
pub fn fuse_video(z: &Matrix, text: &[f64], time: &TimeEncoder, params: &FusionParams) -> Result<Vec<Vec<f64>>> {
    let taus = normalize_timestamps(z.rows())?;
    z.iter_rows().zip(taus).map(|(row, tau)| fuse(row, text, &time.encode(tau)?, params)).collect()
}

/// A discrete timestamp token `<bin>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DiscreteTimeToken {
    pub bin: usize,
    pub n_bins: usize,
}

impl DiscreteTimeToken {
    /// Normalised time at the centre of the bin.
    pub fn tau(&self) -> f64 {
        if self.n_bins <= 1 {
            0.0
        } else {
            self.bin as f64 / (self.n_bins - 1) as f64
        }
    }

    /// Nearest frame (1-based) to the bin centre in a `frames`-long video.
    pub fn frame(&self, frames: usize) -> usize {
        1 + (self.tau() * (frames.max(1) - 1) as f64).round() as usize
    }
}

/// Nearest-bin quantisation of the normalised timestamp of frame `t`.
pub fn quantize_time(t: usize, frames: usize, n_bins: usize) -> Result<DiscreteTimeToken> {
    if t == 0 || t > frames {
        return Err(Error::invalid(format!("frame {t} outside 1..={frames}")));
    }
    if n_bins == 0 {
        return Err(Error::invalid("need at least one time bin"));
    }
    let tau = if frames == 1 { 0.0 } else { (t - 1) as f64 / (frames - 1) as f64 };
    let bin = (tau * (n_bins - 1) as f64 + 0.5).floor() as usize;
    Ok(DiscreteTimeToken { bin: bin.min(n_bins - 1), n_bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Text,
    Obj,
    Time,
    Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedToken {
    pub kind: TokenKind,
    pub vector: Vec<f64>,
    /// Text token index, object slot, or 1-based frame for TIME/VIDEO.
    pub source: Option<usize>,
    pub time: Option<DiscreteTimeToken>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBudget {
    pub n_obj: usize,
    pub n_time: usize,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self { n_obj: DEFAULT_N_OBJ, n_time: DEFAULT_N_TIME }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedTokenSequence {
    pub tokens: Vec<MixedToken>,
    pub budget: TokenBudget,
}

impl MixedTokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.vector.len())
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.tokens.iter().map(|t| t.vector.as_slice()).collect()
    }

    /// Sequence positions of the VIDEO tokens, in frame order.
    pub fn video_positions(&self) -> Vec<usize> {
        self.tokens.iter().enumerate().filter(|(_, t)| t.kind == TokenKind::Video).map(|(i, _)| i).collect()
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        self.tokens.iter().map(|t| t.kind).collect()
    }

    /// Diagnostic dump: one JSON object per token.
    pub fn dump_rows(&self) -> Vec<TokenDumpRow> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(index, t)| TokenDumpRow {
                kind: t.kind,
                index,
                vector_l2: l2_norm(&t.vector),
                first4: t.vector.iter().take(4).copied().collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenDumpRow {
    pub kind: TokenKind,
    pub index: usize,
    pub vector_l2: f64,
    pub first4: Vec<f64>,
}

/// Splits `1..=frames` into `groups` contiguous blocks as evenly as possible,
/// returned as 1-based inclusive ranges.
pub fn time_groups(frames: usize, groups: usize) -> Vec<(usize, usize)> {
    (0..groups).map(|j| (j * frames / groups + 1, (j + 1) * frames / groups)).collect()
}

/// Lays out `[TEXT…][OBJ × n_obj]` followed by `n_time` groups of one TIME
/// token and the VIDEO tokens of that group's frames. With `n_time = 0` all
/// VIDEO tokens follow the OBJ block directly. Object embeddings beyond the
/// budget are dropped; missing slots are zero vectors. TIME vectors are the
/// projected sinusoidal encodings of each group's first frame.
pub fn assemble_sequence(
    text_tokens: &[Vec<f64>],
    objects: &[Vec<f64>],
    video: &[Vec<f64>],
    budget: TokenBudget,
    time_projection: &Affine,
    n_bins: usize,
) -> Result<MixedTokenSequence> {
    let frames = video.len();
    if budget.n_time > frames {
        return Err(Error::invalid(format!("{} time tokens for {frames} frames", budget.n_time)));
    }
    let width = time_projection.out_dim();
    let all = text_tokens.iter().chain(objects).chain(video);
    if let Some(v) = all.clone().find(|v| v.len() != width) {
        return Err(Error::invalid(format!("token of width {} in a width-{width} sequence", v.len())));
    }
    let mut tokens = Vec::with_capacity(text_tokens.len() + budget.n_obj + budget.n_time + frames);
    tokens.extend(text_tokens.iter().enumerate().map(|(i, v)| MixedToken {
        kind: TokenKind::Text,
        vector: v.clone(),
        source: Some(i),
        time: None,
    }));
    tokens.extend((0..budget.n_obj).map(|i| MixedToken {
        kind: TokenKind::Obj,
        vector: objects.get(i).cloned().unwrap_or_else(|| vec![0.0; width]),
        source: objects.get(i).map(|_| i),
        time: None,
    }));
    let video_token =
        |t: usize| MixedToken { kind: TokenKind::Video, vector: video[t - 1].clone(), source: Some(t), time: None };
    if budget.n_time == 0 {
        tokens.extend((1..=frames).map(video_token));
    } else {
        let taus = normalize_timestamps(frames)?;
        for (start, end) in time_groups(frames, budget.n_time) {
            let enc = sinusoidal_encoding(taus[start - 1], time_projection.in_dim())?;
            tokens.push(MixedToken {
                kind: TokenKind::Time,
                vector: time_projection.apply(&enc)?,
                source: Some(start),
                time: Some(quantize_time(start, frames, n_bins)?),
            });
            tokens.extend((start..=end).map(video_token));
        }
    }
    Ok(MixedTokenSequence { tokens, budget })
}

/// One embedding per track: the mean of the frame embeddings `z_t` over frames
/// where the track's mask is non-empty, projected to backbone width. Tracks
/// with no foreground frames yield the projected zero vector.
pub fn object_embeddings(z: &Matrix, tracks: &[MaskTrack], projection: &Affine) -> Result<Vec<Vec<f64>>> {
    tracks
        .iter()
        .map(|track| {
            let mut acc = vec![0.0; z.cols()];
            let mut n = 0usize;
            for t in track.start..=track.end().min(z.rows()) {
                if track.mask_at(t).is_some_and(|m| m.area() > 0) {
                    acc.iter_mut().zip(z.row(t - 1)).for_each(|(a, b)| *a += b);
                    n += 1;
                }
            }
            if n > 0 {
                acc.iter_mut().for_each(|a| *a /= n as f64);
            }
            projection.apply(&acc)
        })
        .collect()
}

/// Per-word TEXT tokens: text-encoder token embeddings lifted to backbone width.
pub fn text_tokens<E: TextEncoder + ?Sized>(encoder: &E, query: &str, lift: &Affine) -> Result<Vec<Vec<f64>>> {
    encoder.token_embeddings(query).iter().map(|v| lift.apply(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding_gate::BinaryMask;

    #[test]
    fn timestamps() {
        assert_eq!(normalize_timestamps(5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(normalize_timestamps(1).unwrap(), vec![0.0]);
        assert!(normalize_timestamps(0).is_err());
        let t = normalize_timestamps(96).unwrap();
        assert_eq!((t[0], t[95]), (0.0, 1.0));
        assert!((t[1] - 1.0 / 95.0).abs() < 1e-15);
    }

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoidal_encoding(0.0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_encoding(0.3, 5).is_err());
        assert!(sinusoidal_encoding(0.3, 0).is_err());
    }

    #[test]
    fn sinusoid_matches_extended_precision() {
        // mpmath, 50 digits; second pair uses ω_1 = 10000^(2/4) = 100
        let want =
            [0.479_425_538_604_203_0, 0.877_582_561_890_372_7, 0.004_999_979_166_692_708, 0.999_987_500_026_041_6];
        let e = sinusoidal_encoding(0.5, 4).unwrap();
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mlp_zero_weights_give_bias() {
        let p = TimeMlp::new(
            Affine::new(Matrix::zeros(3, 2), vec![0.0; 3]).unwrap(),
            Affine::new(Matrix::zeros(2, 3), vec![0.25, -1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(mlp_encoding(0.7, &p).unwrap(), vec![0.25, -1.0]);
    }

    #[test]
    fn mlp_without_input_weights_is_constant() {
        let mut p = TimeMlp::seeded(4, 3, 1);
        p.hidden.weight = Matrix::zeros(4, 2);
        p.hidden.bias = vec![0.1, -0.2, 0.3, 0.0];
        let a = mlp_encoding(0.0, &p).unwrap();
        let b = mlp_encoding(0.9, &p).unwrap();
        assert_eq!(a, b);
        let h: Vec<f64> = p.hidden.bias.iter().map(|v| v.tanh()).collect();
        assert_eq!(a, p.output.apply(&h).unwrap());
    }

    #[test]
    fn mlp_composition_oracle() {
        let p = TimeMlp::seeded(5, 4, 9);
        let tau = 0.3;
        let got = mlp_encoding(tau, &p).unwrap();
        for (o, out) in got.iter().enumerate() {
            let mut acc = p.output.bias[o];
            for j in 0..5 {
                let pre = p.hidden.weight.get(j, 0) * tau + p.hidden.weight.get(j, 1) * tau * tau + p.hidden.bias[j];
                acc += p.output.weight.get(o, j) * pre.tanh();
            }
            assert!((out - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_constant_concat_gives_bias() {
        let mut params = FusionParams::seeded(3, 6, 2);
        params.projection.bias = vec![1.0, 2.0, 3.0];
        let out = fuse(&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5], &params).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fuse_identity_projection_is_layer_norm() {
        let params = FusionParams { projection: Affine::identity(5), eps: 1e-5 };
        let z = [1.0, 2.0];
        let text = [0.5];
        let time = [-1.0, 3.0];
        let out = fuse(&z, &text, &time, &params).unwrap();
        assert_eq!(out, layer_norm(&[1.0, 2.0, 0.5, -1.0, 3.0], 1e-5));
        assert!(fuse(&z, &text, &[1.0], &params).is_err());
    }

    #[test]
    fn quantize_endpoints() {
        assert_eq!(quantize_time(1, 96, 128).unwrap().bin, 0);
        assert_eq!(quantize_time(96, 96, 128).unwrap().bin, 127);
        let bins: Vec<usize> = (1..=2).map(|t| quantize_time(t, 2, 2).unwrap().bin).collect();
        assert_eq!(bins, vec![0, 1]);
        assert!(quantize_time(0, 5, 10).is_err());
        assert!(quantize_time(6, 5, 10).is_err());
    }

    #[test]
    fn quantize_nearest_bin_scan() {
        let tok = quantize_time(49, 96, 100).unwrap();
        let tau = 48.0 / 95.0;
        let nearest = (0..100)
            .min_by(|&a, &b| {
                let da = (a as f64 / 99.0 - tau).abs();
                let db = (b as f64 / 99.0 - tau).abs();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(tok.bin, nearest);
        assert_eq!(tok.bin, 50);
        assert_eq!(tok.frame(96), 49);
    }

    #[test]
    fn hashed_encoder_is_deterministic() {
        let enc = HashedTextEncoder::new(8, 3);
        assert_eq!(enc.embed("the dog"), enc.embed("The  dog"));
        assert_ne!(enc.embed("the dog"), enc.embed("the cat"));
        assert_eq!(enc.embed(""), vec![0.0; 8]);
        assert_eq!(enc.token_embeddings("a b c").len(), 3);
    }

    fn vecs(n: usize, width: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64; width]).collect()
    }

    #[test]
    fn budgets_off_layout() {
        let proj = Affine::identity(4);
        let seq =
            assemble_sequence(&vecs(3, 4), &[], &vecs(5, 4), TokenBudget { n_obj: 0, n_time: 0 }, &proj, 16).unwrap();
        use TokenKind::*;
        assert_eq!(seq.kinds(), vec![Text, Text, Text, Video, Video, Video, Video, Video]);
    }

    #[test]
    fn default_budget_layout() {
        let proj = Affine::identity(4);
        let seq =
            assemble_sequence(&vecs(2, 4), &vecs(6, 4), &vecs(96, 4), TokenBudget::default(), &proj, 128).unwrap();
        assert_eq!(seq.len(), 2 + 4 + 8 + 96);
        let block = &seq.tokens[6..];
        let time_pos: Vec<usize> =
            block.iter().enumerate().filter(|(_, t)| t.kind == TokenKind::Time).map(|(i, _)| i + 1).collect();
        assert_eq!(time_pos, vec![1, 14, 27, 40, 53, 66, 79, 92]);
        let anchors: Vec<usize> =
            block.iter().filter(|t| t.kind == TokenKind::Time).map(|t| t.source.unwrap()).collect();
        assert_eq!(anchors, vec![1, 13, 25, 37, 49, 61, 73, 85]);
        assert_eq!(seq.video_positions().len(), 96);
        // only the first 4 of 6 object embeddings survive
        assert_eq!(seq.tokens[2 + 3].vector, vec![3.0; 4]);
        assert_eq!(seq.tokens[6].time.unwrap().bin, 0);
    }

    #[test]
    fn objects_zero_padded() {
        let proj = Affine::new(Matrix::from_fn(3, 4, |r, c| (r == c) as u8 as f64), vec![0.0; 3]).unwrap();
        let seq =
            assemble_sequence(&[], &vecs(1, 3), &vecs(4, 3), TokenBudget { n_obj: 3, n_time: 2 }, &proj, 8).unwrap();
        assert_eq!(seq.tokens[1].vector, vec![0.0; 3]);
        assert_eq!(seq.tokens[1].source, None);
        assert!(assemble_sequence(&[], &[], &vecs(4, 3), TokenBudget { n_obj: 0, n_time: 5 }, &proj, 8).is_err());
        assert!(assemble_sequence(&[], &[], &vecs(4, 2), TokenBudget::default(), &proj, 8).is_err());
    }

    #[test]
    fn object_embedding_averages_masked_frames() {
        let z = Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let full = BinaryMask::from_runs(1, 1, vec![0, 1]).unwrap();
        let empty = BinaryMask::empty(1, 1);
        let track =
            MaskTrack { noun: "dog".into(), start: 2, masks: vec![full.clone(), empty, full], diagnostic: None };
        let e = object_embeddings(&z, &[track], &Affine::identity(2)).unwrap();
        // frames 2 and 4: rows [2,3] and [6,7]
        assert_eq!(e[0], vec![4.0, 5.0]);
    }
}
