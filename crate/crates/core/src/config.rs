//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::alignment_loss::{LossConfig, DEFAULT_LAMBDA_KL};
use crate::backbone_adapter::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::dtl_encoder::{DtlConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::grounding_gate::{GateConfig, DEFAULT_THRESHOLD};
use crate::prompt::NounSet;
use crate::token_fusion::{TokenBudget, DEFAULT_N_BINS, DEFAULT_N_OBJ, DEFAULT_N_TIME};

pub const DEFAULT_SEED: u64 = 42;

/// Detection thresholds: one global value plus per-noun overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub default: f64,
    pub per_noun: BTreeMap<String, f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { default: DEFAULT_THRESHOLD, per_noun: BTreeMap::new() }
    }
}

impl Thresholds {
    pub fn for_noun(&self, noun: &str) -> f64 {
        self.per_noun.get(noun).copied().unwrap_or(self.default)
    }

    pub fn for_nouns(&self, nouns: &NounSet) -> Vec<f64> {
        nouns.iter().map(|n| self.for_noun(n)).collect()
    }

    /// Applies a CSV of entries, each either `value` (global) or `noun:value`.
    pub fn apply_csv(&mut self, csv: &str) -> Result<()> {
        for entry in csv.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let (noun, value) = match entry.rsplit_once(':') {
                Some((n, v)) => (Some(n.trim().to_lowercase()), v.trim()),
                None => (None, entry),
            };
            let v: f64 = value.parse().map_err(|_| Error::Config(format!("threshold {value:?} is not a number")))?;
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("threshold {v} outside (0, 1]")));
            }
            match noun {
                Some(n) if n.is_empty() => return Err(Error::Config(format!("threshold entry {entry:?} has no noun"))),
                Some(n) => {
                    self.per_noun.insert(n, v);
                }
                None => self.default = v,
            }
        }
        Ok(())
    }

    pub fn parse_csv(csv: &str) -> Result<Self> {
        let mut t = Self::default();
        t.apply_csv(csv)?;
        Ok(t)
    }
}

impl fmt::Display for Thresholds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.default)?;
        for (noun, v) in &self.per_noun {
            write!(f, ",{noun}:{v}")?;
        }
        Ok(())
    }
}

/// Every tunable of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: usize,
    pub segments: usize,
    pub tau0: f64,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub guidance: f64,
    pub n_obj: usize,
    pub n_time: usize,
    pub n_bins: usize,
    pub rank: usize,
    pub alpha: f64,
    pub persistence: usize,
    pub min_span: usize,
    pub thresholds: Thresholds,
    pub lambda_kl: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 96,
            segments: 12,
            tau0: 0.1,
            steps: 4,
            schedule: ScheduleKind::Cosine,
            guidance: 1.0,
            n_obj: DEFAULT_N_OBJ,
            n_time: DEFAULT_N_TIME,
            n_bins: DEFAULT_N_BINS,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            persistence: 3,
            min_span: 5,
            thresholds: Thresholds::default(),
            lambda_kl: DEFAULT_LAMBDA_KL,
            seed: DEFAULT_SEED,
        }
    }
}

const KEYS: [&str; 16] = [
    "T",
    "K_seg",
    "tau0",
    "steps",
    "schedule",
    "guidance",
    "n_obj",
    "n_time",
    "n_bins",
    "r",
    "alpha",
    "persistence",
    "min_span",
    "thresholds",
    "lambda_kl",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "T" => self.frames = parse_value(key, value)?,
            "K_seg" => self.segments = parse_value(key, value)?,
            "tau0" => self.tau0 = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "schedule" => self.schedule = value.parse().map_err(|e: Error| Error::Config(format!("schedule: {e}")))?,
            "guidance" => self.guidance = parse_value(key, value)?,
            "n_obj" => self.n_obj = parse_value(key, value)?,
            "n_time" => self.n_time = parse_value(key, value)?,
            "n_bins" => self.n_bins = parse_value(key, value)?,
            "r" => self.rank = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "persistence" => self.persistence = parse_value(key, value)?,
            "min_span" => self.min_span = parse_value(key, value)?,
            "thresholds" => self.thresholds = Thresholds::parse_csv(value)?,
            "lambda_kl" => self.lambda_kl = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; repeated and unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key in canonical order; parsing the output reproduces `self`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = match key {
                "T" => self.frames.to_string(),
                "K_seg" => self.segments.to_string(),
                "tau0" => self.tau0.to_string(),
                "steps" => self.steps.to_string(),
                "schedule" => self.schedule.to_string(),
                "guidance" => self.guidance.to_string(),
                "n_obj" => self.n_obj.to_string(),
                "n_time" => self.n_time.to_string(),
                "n_bins" => self.n_bins.to_string(),
                "r" => self.rank.to_string(),
                "alpha" => self.alpha.to_string(),
                "persistence" => self.persistence.to_string(),
                "min_span" => self.min_span.to_string(),
                "thresholds" => self.thresholds.to_string(),
                "lambda_kl" => self.lambda_kl.to_string(),
                "seed" => self.seed.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.dtl_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.n_time > self.frames {
            return fail(format!("n_time {} exceeds T {}", self.n_time, self.frames));
        }
        if self.n_bins < 2 {
            return fail("n_bins must be at least 2".into());
        }
        if self.rank == 0 {
            return fail("r must be at least 1".into());
        }
        if !self.alpha.is_finite() {
            return fail("alpha must be finite".into());
        }
        if self.persistence == 0 || self.min_span == 0 {
            return fail("persistence and min_span must be at least 1".into());
        }
        self.loss_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn dtl_config(&self) -> DtlConfig {
        DtlConfig {
            tau0: self.tau0,
            steps: self.steps,
            schedule: self.schedule,
            guidance: self.guidance,
            frames: self.frames,
            segments: self.segments,
            ..DtlConfig::default()
        }
    }

    pub fn gate_config(&self, nouns: &NounSet) -> Result<GateConfig> {
        GateConfig::new(self.thresholds.for_nouns(nouns), self.persistence, self.min_span)
    }

    pub fn budget(&self) -> TokenBudget {
        TokenBudget { n_obj: self.n_obj, n_time: self.n_time }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_kl: self.lambda_kl, ..LossConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.frames, c.segments, c.rank, c.alpha), (96, 12, 64, 128.0));
        assert_eq!((c.n_obj, c.n_time, c.steps), (4, 8, 4));
        assert_eq!((c.schedule, c.guidance, c.tau0), (ScheduleKind::Cosine, 1.0, 0.1));
        assert_eq!((c.persistence, c.min_span, c.lambda_kl), (3, 5, 0.1));
    }

    #[test]
    fn roundtrip() {
        let text = "# demo\nT = 48\nK_seg=6\nthresholds=0.4,dog:0.7, red ball:0.55\nschedule=linear\ntau0=0.15\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.thresholds.for_noun("red ball"), 0.55);
        assert_eq!(c.thresholds.for_noun("cat"), 0.4);
        let again = RunConfig::parse(&c.dump()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.dump(), c.dump());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("frames=3").is_err());
        assert!(RunConfig::parse("T=96\nT=48").is_err());
        assert!(RunConfig::parse("T").is_err());
        assert!(RunConfig::parse("T=97").is_err());
        assert!(RunConfig::parse("schedule=quadratic").is_err());
        assert!(RunConfig::parse("thresholds=1.5").is_err());
        assert!(RunConfig::parse("thresholds=0").is_err());
        assert!(RunConfig::parse("thresholds=:0.3").is_err());
        assert!(RunConfig::parse("r=0").is_err());
        assert!(RunConfig::parse("lambda_kl=-1").is_err());
    }
}
