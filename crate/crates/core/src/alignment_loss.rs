//! Feature-alignment regulariser, the combined objective, and a plain
//! gradient-descent step over the trainable parameters.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone_adapter::{forward_sequence, BackboneAdapters, BackboneStub, LoraAdapter};
use crate::dtl_encoder::{project_rows, LatentVideo};
use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, log_softmax, softmax, Affine, Matrix, ProbVector, KL_FLOOR};
use crate::span_decoder::{head_distributions, select_rows, HeadParams};
use crate::token_fusion::{assemble_sequence, fuse_video, FusionParams, TimeEncoder, TokenBudget, LN_EPS};

pub const DEFAULT_LAMBDA_KL: f64 = 0.1;
pub const FD_STEP: f64 = 1e-6;

/// Diffusion features and reference features for the same frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    diff: Matrix,
    aux: Matrix,
}

impl FeaturePair {
    pub fn new(diff: Matrix, aux: Matrix) -> Result<Self> {
        if diff.shape() != aux.shape() {
            return Err(Error::invalid(format!("feature shapes differ: {:?} vs {:?}", diff.shape(), aux.shape())));
        }
        if diff.rows() == 0 || diff.cols() == 0 {
            return Err(Error::invalid("feature pair is empty"));
        }
        Ok(Self { diff, aux })
    }

    pub fn diff(&self) -> &Matrix {
        &self.diff
    }

    pub fn aux(&self) -> &Matrix {
        &self.aux
    }

    pub fn frames(&self) -> usize {
        self.diff.rows()
    }
}

/// Reference encoder applied to the full, unmasked frame latent.
pub trait AuxEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, frame: &[f64]) -> Result<Vec<f64>>;
}

/// Fixed seeded affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAuxEncoder(pub Affine);

impl AffineAuxEncoder {
    pub fn seeded(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        Self(Affine::random(out_dim, in_dim, &mut ChaCha8Rng::seed_from_u64(seed)))
    }
}

impl AuxEncoder for AffineAuxEncoder {
    fn dim(&self) -> usize {
        self.0.out_dim()
    }

    fn encode(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.0.apply(frame)
    }
}

/// `E_aux(x_t)` for every frame.
pub fn aux_features<E: AuxEncoder + ?Sized>(encoder: &E, video: &LatentVideo) -> Result<Matrix> {
    let rows = video.values().iter_rows().map(|r| encoder.encode(r)).collect::<Result<Vec<_>>>()?;
    if rows.iter().any(|r| r.len() != encoder.dim()) {
        return Err(Error::ContractViolation("auxiliary encoder returned the wrong width".into()));
    }
    Matrix::new(video.frames(), encoder.dim(), rows.concat())
}

/// Row-wise softmax of both feature grids.
pub fn feature_distributions(pair: &FeaturePair) -> Result<Vec<(ProbVector, ProbVector)>> {
    pair.diff.iter_rows().zip(pair.aux.iter_rows()).map(|(d, a)| Ok((softmax(d)?, softmax(a)?))).collect()
}

/// Mean over frames of `KL(p_diff ‖ p_aux)`.
pub fn kl_alignment_loss(pair: &FeaturePair) -> Result<f64> {
    let mut total = 0.0;
    for (p, q) in feature_distributions(pair)? {
        total += kl_divergence(&p, &q)?;
    }
    Ok(total / pair.frames() as f64)
}

/// Gradient of [`kl_alignment_loss`] with respect to the diffusion features:
/// row `t` is `p_j·(ln p_j − ln q_j − KL_t) / T`.
pub fn kl_gradient(pair: &FeaturePair) -> Result<Matrix> {
    let frames = pair.frames() as f64;
    let mut grad = Matrix::zeros(pair.diff.rows(), pair.diff.cols());
    for (t, (d, a)) in pair.diff.iter_rows().zip(pair.aux.iter_rows()).enumerate() {
        let log_p = log_softmax(d)?;
        let q = softmax(a)?;
        let ratio: Vec<f64> = log_p.iter().zip(q.as_slice()).map(|(lp, qi)| lp - qi.max(KL_FLOOR).ln()).collect();
        let kl: f64 = log_p.iter().zip(&ratio).map(|(lp, r)| lp.exp() * r).sum();
        for (g, (lp, r)) in grad.row_mut(t).iter_mut().zip(log_p.iter().zip(&ratio)) {
            *g = lp.exp() * (r - kl) / frames;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_kl: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_kl: DEFAULT_LAMBDA_KL, learning_rate: 1e-2, steps: 50 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(Error::invalid(format!("lambda_kl {} must be finite and non-negative", self.lambda_kl)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// The components of the objective; `total = ce_start + ce_end + λ·kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub ce_start: f64,
    pub ce_end: f64,
    pub kl: f64,
    pub total: f64,
}

fn check_gt(gt: (usize, usize), frames: usize) -> Result<()> {
    if gt.0 == 0 || gt.0 > gt.1 || gt.1 > frames {
        return Err(Error::invalid(format!("ground truth {gt:?} is not 1 ≤ s ≤ e ≤ {frames}")));
    }
    Ok(())
}

pub fn loss_terms(
    p_start: &ProbVector,
    p_end: &ProbVector,
    gt: (usize, usize),
    kl: f64,
    lambda_kl: f64,
) -> Result<LossTerms> {
    if p_start.len() != p_end.len() {
        return Err(Error::invalid("start and end distributions differ in length"));
    }
    check_gt(gt, p_start.len())?;
    let ce_start = -p_start[gt.0 - 1].ln();
    let ce_end = -p_end[gt.1 - 1].ln();
    Ok(LossTerms { ce_start, ce_end, kl, total: ce_start + ce_end + lambda_kl * kl })
}

/// `−ln p_s(s*) − ln p_e(e*) + λ·kl`.
pub fn total_loss(
    p_start: &ProbVector,
    p_end: &ProbVector,
    gt: (usize, usize),
    kl: f64,
    config: &LossConfig,
) -> Result<f64> {
    Ok(loss_terms(p_start, p_end, gt, kl, config.lambda_kl)?.total)
}

/// Gradient of `−ln softmax(H·w)[target]` in `w`: `Σ_t (p(t) − [t = target])·h_t`.
pub fn head_gradient(h: &Matrix, p: &ProbVector, target: usize) -> Result<Vec<f64>> {
    if h.rows() != p.len() {
        return Err(Error::invalid("hidden rows and distribution length differ"));
    }
    check_gt((target, target), p.len())?;
    let mut grad = vec![0.0; h.cols()];
    for (t, row) in h.iter_rows().enumerate() {
        let coeff = p[t] - if t + 1 == target { 1.0 } else { 0.0 };
        grad.iter_mut().zip(row).for_each(|(g, x)| *g += coeff * x);
    }
    Ok(grad)
}

/// Everything `grad_step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainables {
    pub heads: HeadParams,
    /// `g_φ`, projecting pooled diffusion features.
    pub feature_projection: Affine,
    /// Fusion projection onto backbone width.
    pub fusion_projection: Affine,
    /// Adapter on the backbone's final linear layer.
    pub lora: LoraAdapter,
}

/// Frozen pieces of the model around the trainables.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub backbone: BackboneStub,
    pub time_encoder: TimeEncoder,
    pub time_projection: Affine,
    pub budget: TokenBudget,
    pub n_bins: usize,
}

/// One training video with its frozen-encoder outputs precomputed.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// Position-pooled diffusion features, one row per frame.
    pub pooled: Matrix,
    /// Reference features `F_aux`, one row per frame.
    pub aux: Matrix,
    pub text_tokens: Vec<Vec<f64>>,
    pub text_embedding: Vec<f64>,
    pub objects: Vec<Vec<f64>>,
    pub gt: (usize, usize),
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Matrix,
    pub hidden_video: Matrix,
    pub p_start: ProbVector,
    pub p_end: ProbVector,
}

pub fn forward_example(params: &Trainables, model: &FrozenModel, ex: &TrainingExample) -> Result<ForwardPass> {
    let features = project_rows(&ex.pooled, &params.feature_projection)?;
    let fusion = FusionParams { projection: params.fusion_projection.clone(), eps: LN_EPS };
    let video = fuse_video(&features, &ex.text_embedding, &model.time_encoder, &fusion)?;
    let seq =
        assemble_sequence(&ex.text_tokens, &ex.objects, &video, model.budget, &model.time_projection, model.n_bins)?;
    let adapters = BackboneAdapters { up: None, down: Some(params.lora.clone()) };
    let hidden = forward_sequence(&seq, &model.backbone, Some(&adapters))?;
    let hidden_video = select_rows(&hidden, &seq.video_positions())?;
    let (p_start, p_end) = head_distributions(&hidden_video, &params.heads)?;
    Ok(ForwardPass { features, hidden_video, p_start, p_end })
}

/// Objective averaged over the batch.
pub fn batch_loss(
    params: &Trainables,
    model: &FrozenModel,
    batch: &[TrainingExample],
    lambda_kl: f64,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut acc = LossTerms { ce_start: 0.0, ce_end: 0.0, kl: 0.0, total: 0.0 };
    for ex in batch {
        let pass = forward_example(params, model, ex)?;
        let kl = kl_alignment_loss(&FeaturePair::new(pass.features, ex.aux.clone())?)?;
        let t = loss_terms(&pass.p_start, &pass.p_end, ex.gt, kl, lambda_kl)?;
        acc.ce_start += t.ce_start;
        acc.ce_end += t.ce_end;
        acc.kl += t.kl;
        acc.total += t.total;
    }
    let n = batch.len() as f64;
    let terms = LossTerms { ce_start: acc.ce_start / n, ce_end: acc.ce_end / n, kl: acc.kl / n, total: acc.total / n };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {} (ce_s {}, ce_e {}, kl {})",
            terms.total, terms.ce_start, terms.ce_end, terms.kl
        )));
    }
    Ok(terms)
}

type Slot = fn(&mut Trainables) -> &mut [f64];

const FD_SLOTS: [Slot; 6] = [
    |p| p.feature_projection.weight.as_mut_slice(),
    |p| &mut p.feature_projection.bias,
    |p| p.fusion_projection.weight.as_mut_slice(),
    |p| &mut p.fusion_projection.bias,
    |p| p.lora.a_mut().as_mut_slice(),
    |p| p.lora.b_mut().as_mut_slice(),
];

fn finite_difference(base: &Trainables, slot: Slot, eval: &dyn Fn(&Trainables) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = base.clone();
    let n = slot(&mut probe).len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = slot(&mut probe)[i];
        slot(&mut probe)[i] = orig + FD_STEP;
        let up = eval(&probe)?;
        slot(&mut probe)[i] = orig - FD_STEP;
        let down = eval(&probe)?;
        slot(&mut probe)[i] = orig;
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// Full gradient of [`batch_loss`]: heads analytically, the alignment term
/// analytically through `g_φ`, and the cross-entropy dependence of `g_φ`, the
/// fusion projection and the adapter by central differences.
pub fn gradients(
    params: &Trainables,
    model: &FrozenModel,
    batch: &[TrainingExample],
    lambda_kl: f64,
) -> Result<Trainables> {
    let n = batch.len() as f64;
    let width = params.heads.width();
    let mut head_start = vec![0.0; width];
    let mut head_end = vec![0.0; width];
    let proj = &params.feature_projection;
    let mut kl_weight = Matrix::zeros(proj.out_dim(), proj.in_dim());
    let mut kl_bias = vec![0.0; proj.out_dim()];
    for ex in batch {
        let pass = forward_example(params, model, ex)?;
        let gs = head_gradient(&pass.hidden_video, &pass.p_start, ex.gt.0)?;
        let ge = head_gradient(&pass.hidden_video, &pass.p_end, ex.gt.1)?;
        head_start.iter_mut().zip(gs).for_each(|(a, b)| *a += b / n);
        head_end.iter_mut().zip(ge).for_each(|(a, b)| *a += b / n);
        let dz = kl_gradient(&FeaturePair::new(pass.features, ex.aux.clone())?)?;
        for (g_row, x_row) in dz.iter_rows().zip(ex.pooled.iter_rows()) {
            for (i, g) in g_row.iter().enumerate() {
                let scaled = lambda_kl * g / n;
                kl_bias[i] += scaled;
                for (j, x) in x_row.iter().enumerate() {
                    kl_weight.set(i, j, kl_weight.get(i, j) + scaled * x);
                }
            }
        }
    }
    let ce_only = |p: &Trainables| batch_loss(p, model, batch, 0.0).map(|t| t.total);
    let mut grad = params.clone();
    grad.heads = HeadParams { start: head_start, end: head_end };
    for slot in FD_SLOTS {
        let g = finite_difference(params, slot, &ce_only)?;
        slot(&mut grad).copy_from_slice(&g);
    }
    for (g, k) in grad.feature_projection.weight.as_mut_slice().iter_mut().zip(kl_weight.as_slice()) {
        *g += k;
    }
    for (g, k) in grad.feature_projection.bias.iter_mut().zip(&kl_bias) {
        *g += k;
    }
    Ok(grad)
}

fn descend(params: &mut Trainables, grad: &Trainables, lr: f64) {
    let step = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
    step(&mut params.heads.start, &grad.heads.start);
    step(&mut params.heads.end, &grad.heads.end);
    let mut g = grad.clone();
    for slot in FD_SLOTS {
        let gs = slot(&mut g).to_vec();
        step(slot(params), &gs);
    }
}

/// One gradient-descent step. Returns the updated parameters and the loss
/// measured before the update.
pub fn grad_step(
    params: &Trainables,
    model: &FrozenModel,
    batch: &[TrainingExample],
    config: &LossConfig,
) -> Result<(Trainables, LossTerms)> {
    config.validate()?;
    let terms = batch_loss(params, model, batch, config.lambda_kl)?;
    let mut next = params.clone();
    if config.learning_rate > 0.0 {
        let grad = gradients(params, model, batch, config.lambda_kl)?;
        descend(&mut next, &grad, config.learning_rate);
    }
    Ok((next, terms))
}

/// Runs `config.steps` steps and returns the final parameters and the trace.
pub fn train(
    params: &Trainables,
    model: &FrozenModel,
    batch: &[TrainingExample],
    config: &LossConfig,
) -> Result<(Trainables, Vec<LossTerms>)> {
    let mut current = params.clone();
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (next, terms) = grad_step(&current, model, batch, config)?;
        trace.push(terms);
        current = next;
    }
    Ok((current, trace))
}

pub fn write_loss_trace<W: Write>(mut w: W, trace: &[LossTerms]) -> Result<()> {
    writeln!(w, "step,ce_s,ce_e,kl,total")?;
    for (i, t) in trace.iter().enumerate() {
        writeln!(w, "{},{},{},{},{}", i + 1, t.ce_start, t.ce_end, t.kl, t.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn tiny_setup(seed: u64) -> (Trainables, FrozenModel, Vec<TrainingExample>) {
        let (width, frames, channels, feat, time_dim, text_dim) = (8, 12, 4, 4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FrozenModel {
            backbone: BackboneStub::seeded(width, 8, seed ^ 0x11),
            time_encoder: TimeEncoder::Sinusoidal { dim: time_dim },
            time_projection: Affine::random(width, time_dim, &mut rng),
            budget: TokenBudget { n_obj: 2, n_time: 3 },
            n_bins: 16,
        };
        let params = Trainables {
            heads: HeadParams::new(
                (0..width).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..width).map(|_| rng.random_range(-0.5..0.5)).collect(),
            )
            .unwrap(),
            feature_projection: Affine::random(feat, channels, &mut rng),
            fusion_projection: Affine::random(width, feat + text_dim + time_dim, &mut rng),
            lora: LoraAdapter::random(width, 8, 2, 4.0, seed ^ 0x22).unwrap(),
        };
        let batch = (0..2)
            .map(|k| TrainingExample {
                pooled: random_matrix(frames, channels, seed * 10 + k),
                aux: random_matrix(frames, feat, seed * 10 + k + 100),
                text_tokens: vec![(0..width).map(|i| (i as f64 * 0.3).sin()).collect()],
                text_embedding: (0..text_dim).map(|i| (i as f64 * 0.7).cos()).collect(),
                objects: vec![(0..width).map(|i| (i as f64 * 0.2 + k as f64).cos() * 0.5).collect()],
                gt: (3 + k as usize, 8 + k as usize),
            })
            .collect();
        (params, model, batch)
    }

    #[test]
    fn constant_row_is_uniform_and_identical_pair_is_zero() {
        let m = Matrix::from_fn(3, 4, |r, _| r as f64);
        let pair = FeaturePair::new(m.clone(), m).unwrap();
        for (p, q) in feature_distributions(&pair).unwrap() {
            assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
            assert_eq!(p, q);
        }
        assert_eq!(kl_alignment_loss(&pair).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_hand_loop() {
        let pair = FeaturePair::new(random_matrix(4, 8, 1), random_matrix(4, 8, 2)).unwrap();
        let mut total = 0.0;
        for t in 0..4 {
            let norm = |m: &Matrix| {
                let z: f64 = (0..8).map(|j| m.get(t, j).exp()).sum();
                (0..8).map(|j| m.get(t, j).exp() / z).collect::<Vec<_>>()
            };
            let (p, q) = (norm(pair.diff()), norm(pair.aux()));
            total += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
        assert!((kl_alignment_loss(&pair).unwrap() - total / 4.0).abs() < 1e-12);
        let one = FeaturePair::new(random_matrix(1, 8, 1), random_matrix(1, 8, 2)).unwrap();
        let (p, q) = feature_distributions(&one).unwrap().remove(0);
        assert_eq!(kl_alignment_loss(&one).unwrap(), kl_divergence(&p, &q).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(FeaturePair::new(Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn total_loss_fixtures() {
        let cfg = LossConfig::default();
        let hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(total_loss(&hot, &hot, (2, 2), 0.0, &cfg).unwrap(), 0.0);
        let u = ProbVector::uniform(4).unwrap();
        assert!((total_loss(&u, &u, (1, 3), 0.0, &cfg).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-15);
        assert!(total_loss(&u, &u, (3, 2), 0.0, &cfg).is_err());
        assert!(total_loss(&u, &u, (1, 5), 0.0, &cfg).is_err());
        let a = total_loss(&u, &u, (1, 3), 0.7, &LossConfig { lambda_kl: 0.0, ..cfg.clone() }).unwrap();
        let b = total_loss(&u, &u, (1, 3), 0.7, &LossConfig { lambda_kl: 0.5, ..cfg }).unwrap();
        assert!((b - a - 0.35).abs() < 1e-15);
    }

    #[test]
    fn head_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..20 {
            let h = random_matrix(9, 5, k);
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = rng.random_range(1..=9);
            let loss = |w: &[f64]| -log_softmax(&crate::numerics::matvec(&h, w).unwrap()).unwrap()[target - 1];
            let p = softmax(&crate::numerics::matvec(&h, &w).unwrap()).unwrap();
            let analytic = head_gradient(&h, &p, target).unwrap();
            let numeric = finite_diff_grad(loss, &w, 1e-6).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let pair = FeaturePair::new(random_matrix(3, 6, 8), random_matrix(3, 6, 9)).unwrap();
        let analytic = kl_gradient(&pair).unwrap();
        let aux = pair.aux().clone();
        let loss = |flat: &[f64]| {
            kl_alignment_loss(&FeaturePair::new(Matrix::new(3, 6, flat.to_vec()).unwrap(), aux.clone()).unwrap())
                .unwrap()
        };
        let numeric = finite_diff_grad(loss, pair.diff().as_slice(), 1e-6).unwrap();
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn chained_gradient_matches_full_differences() {
        let (params, model, batch) = tiny_setup(3);
        let lambda = 0.5;
        let grad = gradients(&params, &model, &batch, lambda).unwrap();
        let full = |p: &Trainables| batch_loss(p, &model, &batch, lambda).map(|t| t.total);
        let numeric = finite_difference(&params, FD_SLOTS[0], &full).unwrap();
        let mut g = grad.clone();
        for (a, n) in FD_SLOTS[0](&mut g).iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
        let head = finite_diff_grad(
            |w| {
                let mut p = params.clone();
                p.heads.start.copy_from_slice(w);
                full(&p).unwrap()
            },
            &params.heads.start,
            1e-6,
        )
        .unwrap();
        for (a, n) in grad.heads.start.iter().zip(&head) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (params, model, batch) = tiny_setup(1);
        let cfg = LossConfig { learning_rate: 0.0, ..LossConfig::default() };
        let (next, _) = grad_step(&params, &model, &batch, &cfg).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn descent_is_mostly_monotone() {
        let (params, model, batch) = tiny_setup(7);
        let cfg = LossConfig { learning_rate: 1e-2, steps: 50, ..LossConfig::default() };
        let (last, trace) = train(&params, &model, &batch, &cfg).unwrap();
        let mut totals: Vec<f64> = trace.iter().map(|t| t.total).collect();
        totals.push(batch_loss(&last, &model, &batch, cfg.lambda_kl).unwrap().total);
        let non_increasing = totals.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(non_increasing >= 45, "{non_increasing} of 50");
        assert!(totals[50] < totals[0]);
    }

    #[test]
    fn trace_csv_layout() {
        let t = LossTerms { ce_start: 1.0, ce_end: 2.0, kl: 0.5, total: 3.05 };
        let mut buf = Vec::new();
        write_loss_trace(&mut buf, &[t]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,ce_s,ce_e,kl,total\n1,1,2,0.5,3.05\n");
    }
}
