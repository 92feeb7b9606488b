//! Synthetic end-to-end run: a seeded latent video and detection stream with
//! a planted span, pushed through every stage of the pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment_loss::{aux_features, head_gradient, kl_alignment_loss, AffineAuxEncoder, FeaturePair, LossTerms};
use crate::backbone_adapter::{forward_sequence, BackboneAdapters, BackboneStub};
use crate::config::RunConfig;
use crate::dtl_encoder::{extract_features, pool_project, DiffusionCondition, LatentVideo, StubDenoiser};
use crate::error::{Error, Result};
use crate::grounding_gate::{
    rle_encode, run_gate, select_best_proposals, track_from_detections, BinaryMask, DetectionRecord, GateOutput,
    MaskGrid, MaskTrack, ScoreTable,
};
use crate::metrics::{interval_iou, Interval};
use crate::numerics::{Affine, Matrix, ProbVector};
use crate::prompt::{extract_nouns, Lexicon, NounSet};
use crate::span_decoder::{decode_span, head_distributions, select_rows, span_to_seconds, HeadParams, SpanPrediction};
use crate::token_fusion::{
    assemble_sequence, fuse_video, object_embeddings, text_tokens, FusionParams, HashedTextEncoder, MixedTokenSequence,
    TextEncoder, TimeEncoder,
};

pub const DEMO_QUERY: &str = "the person kicks the red ball";
pub const HIGHLIGHT_TEXT: &str = "highlight the masked region";
pub const DEMO_NOUNS: [&str; 6] = ["person", "ball", "dog", "car", "table", "cup"];
pub const DEMO_MODIFIERS: [&str; 3] = ["red", "small", "wooden"];

/// Fixed sizes of the synthetic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoDims {
    pub channels: usize,
    pub positions: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub width: usize,
    pub hidden: usize,
    pub mask_side: usize,
    pub duration_s: f64,
}

impl Default for DemoDims {
    fn default() -> Self {
        Self {
            channels: 8,
            positions: 4,
            feature_dim: 16,
            text_dim: 16,
            time_dim: 16,
            width: 64,
            hidden: 128,
            mask_side: 16,
            duration_s: 30.0,
        }
    }
}

/// Generator knobs. `separation = 0` gives a stream with no planted signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub frames: usize,
    /// Distance of each cluster mean from the origin, per latent entry.
    pub separation: f64,
    /// Standard deviation of the per-entry Gaussian noise.
    pub noise: f64,
}

/// Cluster margin fixed by the pilot runs.
pub const DEMO_SEPARATION: f64 = 2.0;
pub const DEMO_NOISE: f64 = 0.5;

impl SyntheticSpec {
    pub fn planted(frames: usize) -> Self {
        Self { frames, separation: DEMO_SEPARATION, noise: DEMO_NOISE }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub id: String,
    pub query: String,
    pub latent: LatentVideo,
    pub detections: Vec<DetectionRecord>,
    /// Planted span, 1-based inclusive frames.
    pub gt: (usize, usize),
    pub duration_s: f64,
}

impl SyntheticVideo {
    pub fn gt_interval(&self) -> Interval {
        let frames = self.latent.frames();
        span_to_seconds(&SpanPrediction { start: self.gt.0, end: self.gt.1, joint: 1.0 }, frames, self.duration_s)
    }
}

pub fn demo_lexicons() -> (Lexicon, Lexicon) {
    (Lexicon::new(DEMO_NOUNS), Lexicon::new(DEMO_MODIFIERS))
}

/// A `w × h` rectangle at a random position inside columns `[x_lo, x_hi)`.
fn random_rect(rng: &mut ChaCha8Rng, side: usize, (x_lo, x_hi): (usize, usize), (w, h): (usize, usize)) -> BinaryMask {
    let x = rng.random_range(x_lo..=x_hi - w);
    let y = rng.random_range(0..=side - h);
    let mut grid = MaskGrid::empty(side, side);
    grid.fill_rect(x, y, x + w, y + h);
    rle_encode(&grid)
}

/// Draws one video: frames inside the planted span come from one Gaussian
/// cluster and are detected with high scores; the rest come from the other.
pub fn generate_synthetic(seed: u64, spec: SyntheticSpec, dims: &DemoDims) -> Result<SyntheticVideo> {
    let frames = spec.frames;
    if frames < 4 {
        return Err(Error::invalid("synthetic videos need at least 4 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(frames / 5..=frames / 2).max(1);
    let start = rng.random_range(1..=frames - len + 1);
    let gt = (start, start + len - 1);
    let inside = |t: usize| t >= gt.0 && t <= gt.1;

    let direction: Vec<f64> = (0..dims.channels).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let width = dims.channels * dims.positions;
    let latent = Matrix::from_fn(frames, width, |t, j| {
        let sign = if inside(t + 1) { 1.0 } else { -1.0 };
        sign * spec.separation * direction[j % dims.channels] + spec.noise * rng.sample::<f64, _>(StandardNormal)
    });

    let (nouns, modifiers) = demo_lexicons();
    let noun_set = extract_nouns(DEMO_QUERY, &nouns, Some(&modifiers));
    let side = dims.mask_side;
    let lanes = noun_set.len().max(1);
    let sizes: Vec<(usize, usize)> =
        noun_set.iter().map(|_| (rng.random_range(1..=side / lanes), rng.random_range(side / 4..=side / 2))).collect();
    let mut detections = Vec::new();
    for t in 1..=frames {
        for (i, (noun, &size)) in noun_set.iter().zip(&sizes).enumerate() {
            let lane = (i * side / lanes, (i + 1) * side / lanes);
            for proposal in 0..2 {
                let score = if spec.separation == 0.0 {
                    rng.random_range(0.0..1.0)
                } else if inside(t) && proposal == 0 {
                    rng.random_range(0.7..0.98)
                } else {
                    rng.random_range(0.02..0.45)
                };
                let mask = Some(random_rect(&mut rng, side, lane, size));
                detections.push(DetectionRecord { frame: t, noun: noun.to_string(), proposal, score, mask });
            }
        }
    }
    Ok(SyntheticVideo {
        id: format!("synthetic-{seed}"),
        query: DEMO_QUERY.to_string(),
        latent: LatentVideo::new(latent)?,
        detections,
        gt,
        duration_s: dims.duration_s,
    })
}

/// Every frozen component of the demo model plus the trained heads.
#[derive(Debug, Clone)]
pub struct DemoModel {
    pub dims: DemoDims,
    pub denoiser: StubDenoiser,
    pub feature_projection: Affine,
    pub aux_encoder: AffineAuxEncoder,
    pub text_encoder: HashedTextEncoder,
    pub text_lift: Affine,
    pub time_encoder: TimeEncoder,
    pub fusion: FusionParams,
    pub object_projection: Affine,
    pub time_projection: Affine,
    pub backbone: BackboneStub,
    pub adapters: BackboneAdapters,
    pub heads: HeadParams,
}

impl DemoModel {
    pub fn seeded(config: &RunConfig, dims: DemoDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.random::<u64>();
        let backbone = BackboneStub::seeded(dims.width, dims.hidden, next());
        let adapters = BackboneAdapters::zero_init(&backbone, config.rank, config.alpha, next())?;
        let mut layers = ChaCha8Rng::seed_from_u64(next());
        Ok(Self {
            dims,
            denoiser: StubDenoiser::seeded(dims.channels, dims.positions, next())?,
            feature_projection: Affine::random(dims.feature_dim, dims.channels, &mut layers),
            aux_encoder: AffineAuxEncoder::seeded(dims.feature_dim, dims.channels * dims.positions, next()),
            text_encoder: HashedTextEncoder::new(dims.text_dim, next()),
            text_lift: Affine::random(dims.width, dims.text_dim, &mut layers),
            time_encoder: TimeEncoder::Sinusoidal { dim: dims.time_dim },
            fusion: FusionParams::seeded(dims.width, dims.feature_dim + dims.text_dim + dims.time_dim, next()),
            object_projection: Affine::random(dims.width, dims.feature_dim, &mut layers),
            time_projection: Affine::random(dims.width, dims.time_dim, &mut layers),
            backbone,
            adapters,
            heads: HeadParams::zeros(dims.width),
        })
    }
}

/// Every intermediate of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub nouns: NounSet,
    pub table: ScoreTable,
    pub gate: GateOutput,
    pub tracks: Vec<MaskTrack>,
    pub union_masks: Vec<BinaryMask>,
    pub dtl_features: Matrix,
    pub embeddings: Matrix,
    pub aux: Matrix,
    pub kl: f64,
    pub sequence: MixedTokenSequence,
    pub hidden: Matrix,
    pub hidden_video: Matrix,
    pub p_start: ProbVector,
    pub p_end: ProbVector,
    pub span: SpanPrediction,
    pub interval: Interval,
}

/// A failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage: name, source })
}

/// Gate → masks → DTL → fusion → backbone → heads → decode.
pub fn run_pipeline(
    video: &SyntheticVideo,
    config: &RunConfig,
    model: &DemoModel,
    seed: u64,
) -> std::result::Result<PipelineRun, StageError> {
    let frames = video.latent.frames();
    let dims = &model.dims;
    let (nouns_lex, modifiers) = demo_lexicons();
    let nouns = extract_nouns(&video.query, &nouns_lex, Some(&modifiers));

    let table = stage("gate", select_best_proposals(&video.detections, &nouns, frames))?;
    let gate_cfg = stage("gate", config.gate_config(&nouns))?;
    let gate = stage("gate", run_gate(&table, &gate_cfg))?;

    let (tracks, union_masks) = stage(
        "masks",
        track_from_detections(
            &video.detections,
            &table,
            &gate_cfg.thresholds,
            gate.t_s,
            dims.mask_side,
            dims.mask_side,
        ),
    )?;

    let mut dtl_cfg = config.dtl_config();
    dtl_cfg.frames = frames;
    dtl_cfg.positions = dims.positions;
    dtl_cfg.embed_dim = dims.feature_dim;
    let condition = DiffusionCondition::new(union_masks.clone(), HIGHLIGHT_TEXT);
    let dtl_features = stage("dtl", extract_features(&video.latent, &condition, &dtl_cfg, &model.denoiser, seed))?;
    let embeddings = stage("dtl", pool_project(&dtl_features, dims.positions, &model.feature_projection))?;
    let aux = stage("alignment", aux_features(&model.aux_encoder, &video.latent))?;
    let kl = stage("alignment", FeaturePair::new(embeddings.clone(), aux.clone()).and_then(|p| kl_alignment_loss(&p)))?;

    let sequence = stage("fusion", {
        (|| {
            let text_vec = model.text_encoder.embed(&video.query);
            let video_tokens = fuse_video(&embeddings, &text_vec, &model.time_encoder, &model.fusion)?;
            let words = text_tokens(&model.text_encoder, &video.query, &model.text_lift)?;
            let objects = object_embeddings(&embeddings, &tracks, &model.object_projection)?;
            assemble_sequence(&words, &objects, &video_tokens, config.budget(), &model.time_projection, config.n_bins)
        })()
    })?;

    let hidden = stage("backbone", forward_sequence(&sequence, &model.backbone, Some(&model.adapters)))?;
    let hidden_video = stage("backbone", select_rows(&hidden, &sequence.video_positions()))?;
    let (p_start, p_end) = stage("decode", head_distributions(&hidden_video, &model.heads))?;
    let span = stage("decode", decode_span(&p_start, &p_end))?;
    let interval = span_to_seconds(&span, frames, video.duration_s);
    Ok(PipelineRun {
        nouns,
        table,
        gate,
        tracks,
        union_masks,
        dtl_features,
        embeddings,
        aux,
        kl,
        sequence,
        hidden,
        hidden_video,
        p_start,
        p_end,
        span,
        interval,
    })
}

/// Head-training settings for the demo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTraining {
    pub videos: usize,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for HeadTraining {
    fn default() -> Self {
        Self { videos: 96, iterations: 1000, learning_rate: 0.05 }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fits the start/end heads to precomputed hidden states with Adam on the
/// mean cross-entropy; everything upstream stays frozen. The trace records
/// the loss before each update, with the fixed alignment term added.
pub fn train_heads(
    hidden: &[(Matrix, (usize, usize))],
    init: &HeadParams,
    settings: HeadTraining,
    kl: f64,
    lambda_kl: f64,
) -> Result<(HeadParams, Vec<LossTerms>)> {
    if hidden.is_empty() {
        return Err(Error::invalid("no training videos"));
    }
    let n = hidden.len() as f64;
    let width = init.width();
    let mut params: Vec<f64> = init.start.iter().chain(&init.end).copied().collect();
    let mut first = vec![0.0; 2 * width];
    let mut second = vec![0.0; 2 * width];
    let mut trace = Vec::with_capacity(settings.iterations);
    for step in 1..=settings.iterations {
        let heads = HeadParams { start: params[..width].to_vec(), end: params[width..].to_vec() };
        let mut grad = vec![0.0; 2 * width];
        let (mut ce_start, mut ce_end) = (0.0, 0.0);
        for (h, gt) in hidden {
            let (ps, pe) = head_distributions(h, &heads)?;
            ce_start -= ps[gt.0 - 1].ln() / n;
            ce_end -= pe[gt.1 - 1].ln() / n;
            let gs = head_gradient(h, &ps, gt.0)?;
            let ge = head_gradient(h, &pe, gt.1)?;
            grad.iter_mut().zip(gs.iter().chain(&ge)).for_each(|(a, b)| *a += b / n);
        }
        let total = ce_start + ce_end + lambda_kl * kl;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("head training loss is {total} at step {step}")));
        }
        trace.push(LossTerms { ce_start, ce_end, kl, total });
        let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grad).zip(&mut first).zip(&mut second) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= settings.learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok((HeadParams { start: params[..width].to_vec(), end: params[width..].to_vec() }, trace))
}

/// Result of a full demo: the trained model, the held-out run and its score.
#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub video: SyntheticVideo,
    pub model: DemoModel,
    pub run: PipelineRun,
    pub training_trace: Vec<LossTerms>,
    pub iou: f64,
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)).random()
}

/// Trains heads on `training.videos` planted-span videos, then runs the
/// pipeline on a held-out video drawn from `spec`.
pub fn run_demo(
    config: &RunConfig,
    spec: SyntheticSpec,
    training: HeadTraining,
) -> std::result::Result<DemoOutcome, StageError> {
    stage("config", config.validate())?;
    let dims = DemoDims::default();
    let mut model = stage("model", DemoModel::seeded(config, dims, derive_seed(config.seed, 1)))?;

    let train_spec = SyntheticSpec::planted(config.frames);
    let mut hidden = Vec::with_capacity(training.videos);
    let mut kl_sum = 0.0;
    for i in 0..training.videos {
        let s = derive_seed(config.seed, 100 + i as u64);
        let v = stage("synthesis", generate_synthetic(s, train_spec, &dims))?;
        let run = run_pipeline(&v, config, &model, s)?;
        kl_sum += run.kl;
        hidden.push((run.hidden_video, v.gt));
    }
    let kl = kl_sum / training.videos.max(1) as f64;
    let (heads, training_trace) =
        stage("training", train_heads(&hidden, &model.heads, training, kl, config.lambda_kl))?;
    model.heads = heads;

    let video = stage("synthesis", generate_synthetic(derive_seed(config.seed, 2), spec, &dims))?;
    let run = run_pipeline(&video, config, &model, derive_seed(config.seed, 3))?;
    let iou = interval_iou(&run.interval, &video.gt_interval());
    Ok(DemoOutcome { video, model, run, training_trace, iou })
}
