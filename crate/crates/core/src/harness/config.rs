//! Flat `key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Every key must appear in
//! [`KEYS`]; later sources (command-line overrides) replace earlier values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::ScorerTrainConfig;
use crate::denoiser::ArchConfig;
use crate::error::{Error, Result};
use crate::postprocess::InterpConfig;
use crate::sampler::{Oscillation, SamplerConfig};
use crate::trainer::TrainConfig;

/// Recognised keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "training seed"),
    ("corpus.seed", "corpus generator seed"),
    ("corpus.size", "number of corpus items"),
    ("resolution", "image side in pixels (32)"),
    ("arch.widths", "denoiser channel widths, two comma-separated values"),
    ("arch.blocks", "residual blocks per level"),
    ("pretrain.lr", "pretraining learning rate"),
    ("pretrain.batch_size", "pretraining batch size"),
    ("pretrain.steps", "pretraining steps"),
    ("dropout", "condition dropout probability during pretraining"),
    ("finetune.lr", "fine-tuning learning rate"),
    ("finetune.batch_size", "fine-tuning batch size"),
    ("finetune.clip", "fine-tuning gradient-norm clip, 0 disables"),
    ("emission_steps", "fine-tuning steps at which checkpoints are written"),
    ("rare_seed", "seed selecting the three rare tokens"),
    ("scorer.epochs", "scorer training epochs"),
    ("scorer.batch_size", "scorer batch size"),
    ("scorer.lr", "scorer learning rate"),
    ("ft", "fine-tuning step of the checkpoint used for editing, 0 = pretrained"),
    ("t0", "initial sampling time in (0, 1]"),
    ("steps", "sampling steps"),
    ("cfg_weight", "classifier-free guidance weight"),
    ("oscillation", "on or off"),
    ("oscillation.period", "oscillation period in steps"),
    ("oscillation.low", "guidance weight on off-beats"),
    ("oscillation.switch_fraction", "fraction of steps before oscillation starts"),
    ("threshold_p", "dynamic thresholding percentile"),
    ("eta", "sampler stochasticity in [0, 1]"),
    ("interp", "pixel interpolation post-process, on or off"),
    ("interp.sigma", "interpolation blur sigma in pixels"),
    ("interp.tau", "interpolation softness"),
    ("seeds", "number of sampling seeds per job"),
    ("sweep.ft", "fine-tuning steps of the sweep grid"),
    ("sweep.t0", "initial sampling times of the sweep grid"),
    ("configs", "list of (ft, t0) pairs evaluated by `sweep --configs`"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn parse_switch(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected on or off, got {other:?}"))),
    }
}

/// `(16, 1.0), (16,0.85)` → pairs. Whitespace anywhere is ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, f64)>> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || Error::Config(format!("configs: expected (ft, t0) pairs, got {text:?}"));
    let mut out = Vec::new();
    let mut rest = compact.as_str();
    while !rest.is_empty() {
        let inner = rest.strip_prefix('(').ok_or_else(bad)?;
        let close = inner.find(')').ok_or_else(bad)?;
        let (ft, t0) = inner[..close].split_once(',').ok_or_else(bad)?;
        out.push((parse_value("configs", ft)?, parse_value("configs", t0)?));
        rest = &inner[close + 1..];
        rest = rest.strip_prefix(',').unwrap_or(rest);
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if cfg.entries.contains_key(key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|v| parse_value(key, v)).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_value(key, s)).collect())
            .transpose()
    }

    fn switch(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key).map(|v| parse_switch(key, v)).transpose()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("seed", 0)
    }

    pub fn rare_seed(&self) -> Result<u64> {
        self.get_or("rare_seed", 0)
    }

    pub fn seeds(&self) -> Result<usize> {
        let n = self.get_or("seeds", 8)?;
        if n == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        Ok(n)
    }

    pub fn ft(&self) -> Result<usize> {
        self.get_or("ft", 64)
    }

    pub fn corpus(&self) -> Result<(u64, usize)> {
        Ok((self.get_or("corpus.seed", 0)?, self.get_or("corpus.size", 10_000)?))
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let mut arch = ArchConfig::default();
        if let Some(res) = self.get::<usize>("resolution")? {
            if res != crate::corpus::CANVAS {
                return Err(Error::Config(format!("resolution {res} unsupported (corpus canvas is {})", crate::corpus::CANVAS)));
            }
            arch.resolution = res;
        }
        if let Some(w) = self.get_list::<usize>("arch.widths")? {
            let [a, b] = w[..] else {
                return Err(Error::Config("arch.widths needs two values".into()));
            };
            arch.widths = [a, b];
        }
        arch.blocks = self.get_or("arch.blocks", arch.blocks)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn pretrain(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::pretrain();
        cfg.lr = self.get_or("pretrain.lr", cfg.lr)?;
        cfg.batch_size = self.get_or("pretrain.batch_size", cfg.batch_size)?;
        cfg.steps = self.get_or("pretrain.steps", cfg.steps)?;
        cfg.cond_dropout = self.get_or("dropout", cfg.cond_dropout)?;
        cfg.seed = self.seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::finetune();
        cfg.lr = self.get_or("finetune.lr", cfg.lr)?;
        cfg.batch_size = self.get_or("finetune.batch_size", cfg.batch_size)?;
        if let Some(clip) = self.get::<f64>("finetune.clip")? {
            cfg.grad_clip = (clip > 0.0).then_some(clip);
        }
        if let Some(steps) = self.get_list::<usize>("emission_steps")? {
            cfg.steps = steps.iter().copied().max().unwrap_or(0);
            cfg.emission_steps = steps;
        }
        cfg.seed = self.seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scorer(&self) -> Result<ScorerTrainConfig> {
        let mut cfg = ScorerTrainConfig::default();
        cfg.epochs = self.get_or("scorer.epochs", cfg.epochs)?;
        cfg.batch_size = self.get_or("scorer.batch_size", cfg.batch_size)?;
        cfg.lr = self.get_or("scorer.lr", cfg.lr)?;
        cfg.seed = self.seed()?;
        Ok(cfg)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let mut cfg = SamplerConfig::default();
        cfg.t0 = self.get_or("t0", cfg.t0)?;
        cfg.steps = self.get_or("steps", cfg.steps)?;
        cfg.cfg_weight = self.get_or("cfg_weight", cfg.cfg_weight)?;
        cfg.threshold_p = self.get_or("threshold_p", cfg.threshold_p)?;
        cfg.eta = self.get_or("eta", cfg.eta)?;
        if self.switch("oscillation")?.unwrap_or(false) {
            let Oscillation::On { period, low, switch_fraction } = Oscillation::standard() else {
                unreachable!()
            };
            cfg.oscillation = Oscillation::On {
                period: self.get_or("oscillation.period", period)?,
                low: self.get_or("oscillation.low", low)?,
                switch_fraction: self.get_or("oscillation.switch_fraction", switch_fraction)?,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` unless `interp = on`.
    pub fn interp(&self) -> Result<Option<InterpConfig>> {
        if !self.switch("interp")?.unwrap_or(false) {
            return Ok(None);
        }
        let mut cfg = InterpConfig::default();
        cfg.blur_sigma = self.get_or("interp.sigma", cfg.blur_sigma)?;
        cfg.tau = self.get_or("interp.tau", cfg.tau)?;
        cfg.validate()?;
        Ok(Some(cfg))
    }

    pub fn sweep_grid(&self) -> Result<super::SweepGrid> {
        let mut grid = super::SweepGrid::default();
        if let Some(ft) = self.get_list("sweep.ft")? {
            grid.ft_steps = ft;
        }
        if let Some(t0) = self.get_list("sweep.t0")? {
            grid.t0s = t0;
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn configs(&self) -> Result<Option<Vec<(usize, f64)>>> {
        self.raw("configs").map(parse_pairs).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let cfg = KvConfig::parse("# header\n\nt0 = 0.8  # inline\nsteps=32\n").unwrap();
        assert_eq!(cfg.get::<f64>("t0").unwrap(), Some(0.8));
        assert_eq!(cfg.sampler().unwrap().steps, 32);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(KvConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(KvConfig::parse("t0 = 1\nt0 = 0.5"), Err(Error::Config(_))));
        assert!(matches!(KvConfig::parse("t0"), Err(Error::Config(_))));
        assert!(KvConfig::parse("t0 = x").unwrap().sampler().is_err());
        assert!(KvConfig::parse("t0 = 1.5").unwrap().sampler().is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = KvConfig::parse("cfg_weight = 3").unwrap();
        cfg.apply_override("cfg_weight=7.5").unwrap();
        assert_eq!(cfg.sampler().unwrap().cfg_weight, 7.5);
        assert!(cfg.apply_override("nope=1").is_err());
    }

    #[test]
    fn oscillation_and_interp_switches() {
        let cfg = KvConfig::parse("oscillation = on\noscillation.period = 4\ninterp = on\ninterp.tau = 0.1").unwrap();
        let s = cfg.sampler().unwrap();
        assert_eq!(s.oscillation, Oscillation::On { period: 4, low: 1.0, switch_fraction: 0.5 });
        assert_eq!(cfg.interp().unwrap().unwrap().tau, 0.1);
        assert_eq!(KvConfig::default().interp().unwrap(), None);
    }

    #[test]
    fn emission_steps_set_the_step_count() {
        let cfg = KvConfig::parse("emission_steps = 8, 24").unwrap().finetune().unwrap();
        assert_eq!(cfg.emission_steps, vec![8, 24]);
        assert_eq!(cfg.steps, 24);
    }

    #[test]
    fn pair_list_accepts_irregular_spacing() {
        let pairs = parse_pairs("(16, 1.0), (16, 0.85),(16,0.8), (128, 1.0)").unwrap();
        assert_eq!(pairs, vec![(16, 1.0), (16, 0.85), (16, 0.8), (128, 1.0)]);
        assert!(parse_pairs("(16 1.0)").is_err());
        assert!(parse_pairs("").is_err());
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
    }
}
