//! Frozen stand-in backbone with low-rank adapters on its linear maps.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{matvec, Affine, Matrix};
use crate::token_fusion::MixedTokenSequence;

pub const DEFAULT_RANK: usize = 64;
pub const DEFAULT_ALPHA: f64 = 128.0;

/// Low-rank update `(α/r)·A·B` for a `d_out × d_in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let r = a.cols();
        if r == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if b.rows() != r {
            return Err(Error::invalid(format!("LoRA A has rank {r} but B has {} rows", b.rows())));
        }
        if r > a.rows().min(b.cols()) {
            return Err(Error::invalid(format!("LoRA rank {r} exceeds min(d_out, d_in) = {}", a.rows().min(b.cols()))));
        }
        if !alpha.is_finite() {
            return Err(Error::invalid("LoRA alpha must be finite"));
        }
        Ok(Self { a, b, alpha })
    }

    /// Standard initialisation: `A = 0`, `B` Gaussian, so the update starts at zero.
    pub fn zero_init(d_out: usize, d_in: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::random(rank, d_in, 1.0 / (d_in.max(1) as f64).sqrt(), &mut rng);
        Self::new(Matrix::zeros(d_out, rank), b, alpha)
    }

    pub fn random(d_out: usize, d_in: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::random(d_out, rank, 1.0 / (rank as f64).sqrt(), &mut rng);
        let b = Matrix::random(rank, d_in, 1.0 / (d_in.max(1) as f64).sqrt(), &mut rng);
        Self::new(a, b, alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    /// Trainable parameters: `r·(d_in + d_out)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }

    fn check(&self, w0: &Matrix) -> Result<()> {
        if w0.rows() != self.d_out() || w0.cols() != self.d_in() {
            return Err(Error::invalid(format!(
                "adapter is {}x{} but frozen weight is {}x{}",
                self.d_out(),
                self.d_in(),
                w0.rows(),
                w0.cols()
            )));
        }
        Ok(())
    }
}

/// `W₀·x + (α/r)·A·(B·x)` without forming `A·B`.
pub fn apply_lora(w0: &Matrix, adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    adapter.check(w0)?;
    let mut y = matvec(w0, x)?;
    let bx = matvec(&adapter.b, x)?;
    let update = matvec(&adapter.a, &bx)?;
    let s = adapter.scale();
    y.iter_mut().zip(update).for_each(|(yi, ui)| *yi += s * ui);
    Ok(y)
}

/// Dense `W₀ + (α/r)·A·B`.
pub fn merge_lora(w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    adapter.check(w0)?;
    w0.add_scaled(&adapter.a.matmul(&adapter.b)?, adapter.scale())
}

/// Optional adapters for the two linear layers of [`BackboneStub`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackboneAdapters {
    pub up: Option<LoraAdapter>,
    pub down: Option<LoraAdapter>,
}

impl BackboneAdapters {
    pub fn zero_init(stub: &BackboneStub, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            up: Some(LoraAdapter::zero_init(stub.up.out_dim(), stub.up.in_dim(), rank, alpha, seed)?),
            down: Some(LoraAdapter::zero_init(stub.down.out_dim(), stub.down.in_dim(), rank, alpha, seed ^ 1)?),
        })
    }

    pub fn param_count(&self) -> usize {
        self.up.as_ref().map_or(0, LoraAdapter::param_count) + self.down.as_ref().map_or(0, LoraAdapter::param_count)
    }
}

/// Small frozen causal model standing in for the language backbone.
///
/// `h_t = x_t + W_down·tanh(W_up·m_t + b_up) + b_down` where the branch input
/// is causally mixed: `m_t = (1 − γ)·x_t + γ·mean(x_1..=x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneStub {
    pub up: Affine,
    pub down: Affine,
    pub mix: f64,
}

/// Weight of the causal prefix mean.
pub const DEFAULT_MIX: f64 = 0.5;

impl BackboneStub {
    pub fn seeded(width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let up = Affine::random(hidden, width, &mut rng);
        let down = Affine::random(width, hidden, &mut rng);
        Self { up, down, mix: DEFAULT_MIX }
    }

    pub fn width(&self) -> usize {
        self.up.in_dim()
    }

    /// The residual block for token `x` with branch input `mixed`.
    pub fn block(&self, x: &[f64], mixed: &[f64], adapters: Option<&BackboneAdapters>) -> Result<Vec<f64>> {
        let linear = |layer: &Affine, lora: Option<&LoraAdapter>, v: &[f64]| -> Result<Vec<f64>> {
            let mut y = match lora {
                Some(ad) => apply_lora(&layer.weight, ad, v)?,
                None => matvec(&layer.weight, v)?,
            };
            y.iter_mut().zip(&layer.bias).for_each(|(a, b)| *a += b);
            Ok(y)
        };
        let mut hidden = linear(&self.up, adapters.and_then(|a| a.up.as_ref()), mixed)?;
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut y = linear(&self.down, adapters.and_then(|a| a.down.as_ref()), &hidden)?;
        y.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        Ok(y)
    }

    /// The block applied to a lone token, where mixing is the identity.
    pub fn token_transform(&self, x: &[f64], adapters: Option<&BackboneAdapters>) -> Result<Vec<f64>> {
        self.block(x, x, adapters)
    }
}

/// Hidden states for every token, one row per position.
pub fn forward_backbone<V: AsRef<[f64]>>(
    tokens: &[V],
    stub: &BackboneStub,
    adapters: Option<&BackboneAdapters>,
) -> Result<Matrix> {
    let width = stub.width();
    if stub.down.out_dim() != width {
        return Err(Error::invalid("backbone output width differs from its input width"));
    }
    let mut out = Matrix::zeros(tokens.len(), width);
    let mut prefix = vec![0.0; width];
    for (t, tok) in tokens.iter().enumerate() {
        let x = tok.as_ref();
        if x.len() != width {
            return Err(Error::invalid(format!("token {t} has width {}, backbone expects {width}", x.len())));
        }
        prefix.iter_mut().zip(x).for_each(|(p, v)| *p += v);
        let n = (t + 1) as f64;
        let mixed: Vec<f64> =
            x.iter().zip(&prefix).map(|(xi, pi)| (1.0 - stub.mix) * xi + stub.mix * (pi / n)).collect();
        out.row_mut(t).copy_from_slice(&stub.block(x, &mixed, adapters)?);
    }
    Ok(out)
}

pub fn forward_sequence(
    seq: &MixedTokenSequence,
    stub: &BackboneStub,
    adapters: Option<&BackboneAdapters>,
) -> Result<Matrix> {
    forward_backbone(&seq.vectors(), stub, adapters)
}

/// Adapter checkpoint: a sequence of records, each a little-endian header
/// `layer: u64, d_out: u64, d_in: u64, r: u64, alpha: f64` followed by `A`
/// then `B` as row-major `f64`.
pub fn write_adapters<W: Write>(mut w: W, adapters: &[(u64, &LoraAdapter)]) -> Result<()> {
    for (layer, ad) in adapters {
        for v in [*layer, ad.d_out() as u64, ad.d_in() as u64, ad.rank() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&ad.alpha.to_le_bytes())?;
        for v in ad.a.as_slice().iter().chain(ad.b.as_slice()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_adapters<R: Read>(mut r: R) -> Result<Vec<(u64, LoraAdapter)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut words = bytes.chunks_exact(8);
    if !words.remainder().is_empty() {
        return Err(Error::invalid("adapter checkpoint length is not a multiple of 8 bytes"));
    }
    let mut next = |what: &str| -> Result<[u8; 8]> {
        words
            .next()
            .map(|c| c.try_into().unwrap())
            .ok_or_else(|| Error::invalid(format!("adapter checkpoint truncated while reading {what}")))
    };
    let mut out = Vec::new();
    while let Ok(w) = next("layer id") {
        let layer = u64::from_le_bytes(w);
        let d_out = u64::from_le_bytes(next("d_out")?) as usize;
        let d_in = u64::from_le_bytes(next("d_in")?) as usize;
        let rank = u64::from_le_bytes(next("rank")?) as usize;
        let alpha = f64::from_le_bytes(next("alpha")?);
        let mut grid = |rows: usize, cols: usize| -> Result<Matrix> {
            let data = (0..rows * cols).map(|_| next("weights").map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            Matrix::new(rows, cols, data)
        };
        let a = grid(d_out, rank)?;
        let b = grid(rank, d_in)?;
        out.push((layer, LoraAdapter::new(a, b, alpha)?));
    }
    Ok(out)
}
