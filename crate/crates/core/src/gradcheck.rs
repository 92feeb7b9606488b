//! Analytic-versus-central-difference checks for the training gradients.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alignment_loss::{head_gradient, kl_alignment_loss, kl_gradient, FeaturePair};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, l2_norm, log_softmax, matvec, softmax, Matrix};

pub const DEFAULT_INSTANCES: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    HeadStart,
    HeadEnd,
    KlAlignment,
}

impl Check {
    pub const ALL: [Check; 3] = [Check::HeadStart, Check::HeadEnd, Check::KlAlignment];

    pub fn name(self) -> &'static str {
        match self {
            Check::HeadStart => "head_ce_start",
            Check::HeadEnd => "head_ce_end",
            Check::KlAlignment => "kl_alignment",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSettings {
    pub instances: usize,
    pub tolerance: f64,
    pub step: f64,
    /// Test hook: nudges the analytic gradient of one check so the harness
    /// has something to catch.
    pub corrupt: Option<Check>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { instances: DEFAULT_INSTANCES, tolerance: DEFAULT_TOLERANCE, step: DEFAULT_STEP, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: Check,
    pub instances: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub failures: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ =
            writeln!(out, "{:<14} {:>9} {:>12} {:>12} {:>6}", "check", "instances", "max_rel", "mean_rel", "status");
        for r in &self.results {
            let status = if r.passed() { "pass" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<14} {:>9} {:>12.3e} {:>12.3e} {:>6}",
                r.check.name(),
                r.instances,
                r.max_rel_error,
                r.mean_rel_error,
                status
            );
        }
        out
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are tiny.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = l2_norm(analytic).max(l2_norm(numeric));
    if scale < 1e-12 {
        l2_norm(&diff)
    } else {
        l2_norm(&diff) / scale
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let m = Matrix::random(1, n, std, rng);
    m.into_vec()
}

fn head_ce(h: &Matrix, w: &[f64], target: usize) -> f64 {
    match matvec(h, w).and_then(|z| log_softmax(&z)) {
        Ok(lp) => -lp[target - 1],
        Err(_) => f64::NAN,
    }
}

/// Gradient pair `(analytic, numeric)` for one random instance.
fn instance(check: Check, rng: &mut ChaCha8Rng, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    match check {
        Check::HeadStart | Check::HeadEnd => {
            let frames = rng.random_range(2..=32);
            let width = rng.random_range(2..=16);
            let h = Matrix::random(frames, width, 1.0, rng);
            let w = gaussian(rng, width, 0.5);
            let target = rng.random_range(1..=frames);
            let p = softmax(&matvec(&h, &w)?)?;
            let analytic = head_gradient(&h, &p, target)?;
            let numeric = finite_diff_grad(|x| head_ce(&h, x, target), &w, step)?;
            Ok((analytic, numeric))
        }
        Check::KlAlignment => {
            let frames = rng.random_range(1..=16);
            let dim = rng.random_range(2..=16);
            let diff = Matrix::random(frames, dim, 1.5, rng);
            let aux = Matrix::random(frames, dim, 1.5, rng);
            let pair = FeaturePair::new(diff.clone(), aux.clone())?;
            let analytic = kl_gradient(&pair)?.into_vec();
            let numeric = finite_diff_grad(
                |x| {
                    let d = Matrix::new(frames, dim, x.to_vec()).expect("shape preserved");
                    FeaturePair::new(d, aux.clone()).and_then(|p| kl_alignment_loss(&p)).unwrap_or(f64::NAN)
                },
                diff.as_slice(),
                step,
            )?;
            Ok((analytic, numeric))
        }
    }
}

/// Runs every check over `settings.instances` seeded instances.
pub fn run_gradcheck(seed: u64, settings: &GradcheckSettings) -> Result<GradcheckReport> {
    if settings.instances == 0 {
        return Err(Error::invalid("gradcheck needs at least one instance"));
    }
    let mut results = Vec::with_capacity(Check::ALL.len());
    for (k, check) in Check::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let (mut max, mut sum, mut failures) = (0.0f64, 0.0, 0);
        for _ in 0..settings.instances {
            let (mut analytic, numeric) = instance(check, &mut rng, settings.step)?;
            if settings.corrupt == Some(check) {
                analytic[0] += 1e-3 * (1.0 + l2_norm(&analytic));
            }
            let err = relative_error(&analytic, &numeric);
            max = max.max(err);
            sum += err;
            if err.is_nan() || err > settings.tolerance {
                failures += 1;
            }
        }
        results.push(CheckResult {
            check,
            instances: settings.instances,
            max_rel_error: max,
            mean_rel_error: sum / settings.instances as f64,
            failures,
        });
    }
    Ok(GradcheckReport { seed, tolerance: settings.tolerance, results })
}
