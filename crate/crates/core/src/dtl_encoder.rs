//! Diffusion temporal latents: forward noising of a clean video latent, an
//! early-step denoiser query under mask conditioning, and per-frame pooling
//! into embeddings.
//!
//! A latent video is a `T × D` grid where each row holds `positions × channels`
//! values for one frame (positions are the spatial tokens of that frame).

use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding_gate::BinaryMask;
use crate::numerics::{matvec, Affine, Matrix};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Terminal ᾱ of the linear schedule.
pub const LINEAR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Cumulative signal level ᾱ(τ) of the variance-preserving schedule.
pub fn alpha_bar(tau: f64, kind: ScheduleKind) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("diffusion time {tau} outside [0, 1]")));
    }
    let ab = match kind {
        ScheduleKind::Linear => 1.0 - tau * (1.0 - LINEAR_FLOOR),
        ScheduleKind::Cosine => {
            let s = COSINE_OFFSET;
            let f = |t: f64| (((t + s) / (1.0 + s)) * FRAC_PI_2).cos().powi(2);
            f(tau) / f(0.0)
        }
    };
    Ok(ab.clamp(0.0, 1.0))
}

/// `(α_τ, σ_τ) = (√ᾱ, √(1 − ᾱ))`.
pub fn schedule_coeffs(tau: f64, kind: ScheduleKind) -> Result<(f64, f64)> {
    let ab = alpha_bar(tau, kind)?;
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

/// Clean (or noised) video latent, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo(Matrix);

impl LatentVideo {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::invalid("latent video needs at least one frame"));
        }
        Ok(Self(values))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Binary layout: `T` and `D` as little-endian `u64`, then `T·D`
    /// little-endian `f64` values in row-major order.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        write_grid(&self.0, w)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        Self::new(read_grid(r)?)
    }
}

pub(crate) fn write_grid<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_grid<R: Read>(mut r: R) -> Result<Matrix> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
    if expected != Some(rest.len()) {
        return Err(Error::invalid(format!("grid header says {rows}x{cols} but payload has {} bytes", rest.len())));
    }
    let data = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Matrix::new(rows, cols, data)
}

/// Seeded standard-normal noise grid in row-major draw order.
pub fn gaussian_noise(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `x_τ = α_τ x₀ + σ_τ ε`, with ε drawn from `seed`.
pub fn forward_noise(x0: &LatentVideo, tau: f64, kind: ScheduleKind, seed: u64) -> Result<LatentVideo> {
    let taus = vec![tau; x0.frames()];
    forward_noise_per_frame(x0, &taus, kind, seed)
}

/// Forward noising with a separate diffusion time for every frame. The noise
/// stream is the same one [`forward_noise`] draws for that seed.
pub fn forward_noise_per_frame(x0: &LatentVideo, taus: &[f64], kind: ScheduleKind, seed: u64) -> Result<LatentVideo> {
    if taus.len() != x0.frames() {
        return Err(Error::invalid(format!("{} diffusion times for {} frames", taus.len(), x0.frames())));
    }
    let coeffs = taus.iter().map(|&t| schedule_coeffs(t, kind)).collect::<Result<Vec<_>>>()?;
    let eps = gaussian_noise(x0.frames(), x0.dim(), seed);
    let x = x0.values();
    let out = Matrix::from_fn(x0.frames(), x0.dim(), |r, c| {
        let (a, s) = coeffs[r];
        a * x.get(r, c) + s * eps.get(r, c)
    });
    LatentVideo::new(out)
}

/// Packed conditioning: one union mask per frame (or none) and the
/// highlighting instruction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiffusionCondition {
    pub masks: Vec<BinaryMask>,
    pub highlight_text: String,
}

impl DiffusionCondition {
    pub fn new(masks: Vec<BinaryMask>, highlight_text: impl Into<String>) -> Self {
        Self { masks, highlight_text: highlight_text.into() }
    }

    /// Same instruction, no masks.
    pub fn unconditioned(&self) -> Self {
        Self { masks: Vec::new(), highlight_text: self.highlight_text.clone() }
    }

    /// Fraction of foreground pixels in frame `t` (0-based); 0 when unmasked.
    pub fn coverage(&self, t: usize) -> f64 {
        self.masks.get(t).map_or(0.0, BinaryMask::coverage)
    }

    fn validate(&self, frames: usize) -> Result<()> {
        if !self.masks.is_empty() && self.masks.len() != frames {
            return Err(Error::invalid(format!("condition has {} masks for {frames} frames", self.masks.len())));
        }
        Ok(())
    }
}

/// A frozen feature extractor queried at diffusion time `tau`.
pub trait Denoiser {
    /// Maps a `T × D` noised latent to a `T × D_h` feature grid.
    fn denoise(&self, noised: &Matrix, condition: &DiffusionCondition, tau: f64) -> Result<Matrix>;
}

/// Reference denoiser: a seeded orthogonal channel map applied at every
/// spatial position, scaled per frame by `1 + coverage(M_t)`. The
/// instruction text does not influence the output.
#[derive(Debug, Clone)]
pub struct StubDenoiser {
    weight: Matrix,
    positions: usize,
}

impl StubDenoiser {
    pub fn new(weight: Matrix, positions: usize) -> Result<Self> {
        if positions == 0 {
            return Err(Error::invalid("denoiser needs at least one position per frame"));
        }
        Ok(Self { weight, positions })
    }

    pub fn seeded(channels: usize, positions: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(random_orthogonal(channels, &mut rng), positions)
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn positions(&self) -> usize {
        self.positions
    }
}

impl Denoiser for StubDenoiser {
    fn denoise(&self, noised: &Matrix, condition: &DiffusionCondition, _tau: f64) -> Result<Matrix> {
        let c_in = self.weight.cols();
        if noised.cols() != self.positions * c_in {
            return Err(Error::invalid(format!(
                "stub denoiser expects {}x{} values per frame, got {}",
                self.positions,
                c_in,
                noised.cols()
            )));
        }
        let c_out = self.weight.rows();
        let mut out = Matrix::zeros(noised.rows(), self.positions * c_out);
        for t in 0..noised.rows() {
            let scale = 1.0 + condition.coverage(t);
            for p in 0..self.positions {
                let y = matvec(&self.weight, &noised.row(t)[p * c_in..(p + 1) * c_in])?;
                for (o, v) in out.row_mut(t)[p * c_out..(p + 1) * c_out].iter_mut().zip(y) {
                    *o = scale * v;
                }
            }
        }
        Ok(out)
    }
}

/// Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for u in &cols {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_fn(n, n, |r, c| cols[c][r])
}

/// Extraction settings; defaults follow the reference configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtlConfig {
    pub tau0: f64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub guidance: f64,
    pub frames: usize,
    pub segments: usize,
    pub embed_dim: usize,
    /// Spatial positions per latent frame; pooling averages over them.
    pub positions: usize,
}

impl Default for DtlConfig {
    fn default() -> Self {
        Self {
            tau0: 0.1,
            steps: 4,
            schedule: ScheduleKind::Cosine,
            guidance: 1.0,
            frames: 96,
            segments: 12,
            embed_dim: 16,
            positions: 4,
        }
    }
}

impl DtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0 < 1.0) {
            return Err(Error::invalid(format!("tau0 {} outside (0, 1)", self.tau0)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !self.guidance.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        if self.segments == 0 || !self.frames.is_multiple_of(self.segments) {
            return Err(Error::invalid(format!(
                "{} frames cannot be split into {} equal segments",
                self.frames, self.segments
            )));
        }
        if self.positions == 0 {
            return Err(Error::invalid("positions must be at least 1"));
        }
        Ok(())
    }
}

fn run_denoiser<D: Denoiser + ?Sized>(
    denoiser: &D,
    noised: &Matrix,
    condition: &DiffusionCondition,
    config: &DtlConfig,
) -> Result<Matrix> {
    let mut h = denoiser.denoise(noised, condition, config.tau0)?;
    check_rows(&h, noised.rows())?;
    for step in 1..config.steps {
        if h.cols() != noised.cols() {
            return Err(Error::ContractViolation(format!(
                "refinement step {step} needs shape-preserving output, got width {} for input width {}",
                h.cols(),
                noised.cols()
            )));
        }
        h = denoiser.denoise(&h, condition, config.tau0)?;
        check_rows(&h, noised.rows())?;
    }
    Ok(h)
}

fn check_rows(h: &Matrix, frames: usize) -> Result<()> {
    if h.rows() != frames {
        return Err(Error::ContractViolation(format!("denoiser returned {} rows for {frames} frames", h.rows())));
    }
    if !h.is_finite() {
        return Err(Error::ContractViolation("denoiser returned non-finite features".into()));
    }
    Ok(())
}

/// Noises `x0` to `tau0` and queries the denoiser (re-applied `steps` times).
/// With guidance `GS ≠ 1` the result is `h_u + GS·(h_c − h_u)`, where `h_u`
/// is the unmasked query on the same noised latent.
pub fn extract_features<D: Denoiser + ?Sized>(
    x0: &LatentVideo,
    condition: &DiffusionCondition,
    config: &DtlConfig,
    denoiser: &D,
    seed: u64,
) -> Result<Matrix> {
    config.validate()?;
    condition.validate(x0.frames())?;
    let noised = forward_noise(x0, config.tau0, config.schedule, seed)?;
    let h_cond = run_denoiser(denoiser, noised.values(), condition, config)?;
    if config.guidance == 1.0 {
        return Ok(h_cond);
    }
    let h_uncond = run_denoiser(denoiser, noised.values(), &condition.unconditioned(), config)?;
    if config.guidance == 0.0 {
        return Ok(h_uncond);
    }
    if h_uncond.shape() != h_cond.shape() {
        return Err(Error::ContractViolation("conditioned and unconditioned features differ in shape".into()));
    }
    h_uncond.add_scaled(&h_cond.add_scaled(&h_uncond, -1.0)?, config.guidance)
}

/// Mean over each frame's `positions` feature blocks.
pub fn pool_positions(h: &Matrix, positions: usize) -> Result<Matrix> {
    if positions == 0 || !h.cols().is_multiple_of(positions) {
        return Err(Error::invalid(format!("feature width {} is not a multiple of {positions} positions", h.cols())));
    }
    let channels = h.cols() / positions;
    let mut pooled = Matrix::zeros(h.rows(), channels);
    for (r, row) in h.iter_rows().enumerate() {
        let out = pooled.row_mut(r);
        for block in row.chunks_exact(channels) {
            out.iter_mut().zip(block).for_each(|(a, b)| *a += b);
        }
        out.iter_mut().for_each(|a| *a /= positions as f64);
    }
    Ok(pooled)
}

/// Applies `g_φ` to every row.
pub fn project_rows(pooled: &Matrix, projection: &Affine) -> Result<Matrix> {
    if projection.in_dim() != pooled.cols() {
        return Err(Error::invalid(format!(
            "projection expects {} inputs, pooled features have {}",
            projection.in_dim(),
            pooled.cols()
        )));
    }
    let rows = pooled.iter_rows().map(|r| projection.apply(r)).collect::<Result<Vec<_>>>()?;
    Matrix::new(pooled.rows(), projection.out_dim(), rows.concat())
}

/// Mean over each frame's `positions` feature blocks, then `g_φ` per frame.
pub fn pool_project(h: &Matrix, positions: usize, projection: &Affine) -> Result<Matrix> {
    project_rows(&pool_positions(h, positions)?, projection)
}

/// Per-frame diffusion times: `segments` equal contiguous blocks, each taking
/// one value from an evenly spaced grid over `[τ₀/2, 3τ₀/2]` (clipped into
/// the open unit interval), assigned to blocks in a seeded order.
pub fn segment_taus(frames: usize, segments: usize, tau0: f64, seed: u64) -> Result<Vec<f64>> {
    if segments == 0 || !frames.is_multiple_of(segments) {
        return Err(Error::invalid(format!("{frames} frames cannot be split into {segments} equal segments")));
    }
    if !(tau0 > 0.0 && tau0 < 1.0) {
        return Err(Error::invalid(format!("tau0 {tau0} outside (0, 1)")));
    }
    let lo = 0.5 * tau0;
    let hi = 1.5 * tau0;
    let mut grid: Vec<f64> = if segments == 1 {
        vec![tau0]
    } else {
        (0..segments).map(|k| lo + (hi - lo) * k as f64 / (segments - 1) as f64).collect()
    };
    for v in &mut grid {
        *v = v.clamp(1e-6, 1.0 - 1e-6);
    }
    grid.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let per = frames / segments;
    Ok(grid.iter().flat_map(|&t| std::iter::repeat_n(t, per)).collect())
}
