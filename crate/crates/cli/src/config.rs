//! Run configuration: a TOML file, overridden by `--set key=value` pairs.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected at load time, and all values are validated before a command
//! runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use liprcp::attack::AttackObjective;
use liprcp::audit::CorrectionMode;
use liprcp::datasets::SplitPlan;
use liprcp::scores::{BoundMethod, ScoreKind, ScoreSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Top-level seed; every random draw derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub alpha: f64,
    /// Radius for robust prediction.
    pub epsilon: f64,
    /// Radius grid for attack sweeps.
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub method: BoundMethod,
    pub correction: CorrectionMode,
    /// Inflate the calibration threshold for this radius (0 = vanilla).
    pub calibration_epsilon: f64,
    /// Lipschitz product to assume when the data are precomputed logits.
    pub lipschitz_product: f64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub score: ScoreConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub poison: PoisonSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            alpha: 0.1,
            epsilon: 0.25,
            epsilons: vec![0.0, 0.05, 0.1, 0.25, 0.5],
            delta: 0.1,
            method: BoundMethod::TightMonotone,
            correction: CorrectionMode::AppendixCorrected,
            calibration_epsilon: 0.0,
            lipschitz_product: 1.0,
            data: None,
            model: None,
            record: None,
            score: ScoreConfig::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            poison: PoisonSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    pub temperature: f64,
    pub bias: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: ScoreKind::LacSigmoid,
            temperature: 1.0,
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            d: 16,
            classes: 4,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub cal: f64,
    pub eval: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            cal: 0.2,
            eval: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Hidden widths; the full stack is `[d, hidden.., classes]`.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            epochs: 20,
            learning_rate: 0.05,
            temperature: 0.25,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub steps: usize,
    pub restarts: usize,
    /// Step size as a fraction of the radius.
    pub step_fraction: f64,
    pub objective: AttackObjective,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            steps: 40,
            restarts: 3,
            step_fraction: 0.25,
            objective: AttackObjective::MaximizeTrueScore,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonSection {
    pub k: usize,
    pub epsilon: f64,
}

impl Default for PoisonSection {
    fn default() -> Self {
        Self {
            k: 10,
            epsilon: 0.05,
        }
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    ensure!(
        v >= 0.0 && v.is_finite(),
        "{name} must be a finite number >= 0, got {v}"
    );
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides (dotted keys address
    /// tables), then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha > 0.0 && self.alpha < 1.0,
            "alpha must lie in (0,1), got {}",
            self.alpha
        );
        ensure!(
            self.delta > 0.0 && self.delta < 1.0,
            "delta must lie in (0,1), got {}",
            self.delta
        );
        nonneg("epsilon", self.epsilon)?;
        nonneg("calibration_epsilon", self.calibration_epsilon)?;
        nonneg("poison.epsilon", self.poison.epsilon)?;
        ensure!(!self.epsilons.is_empty(), "epsilons must not be empty");
        for &e in &self.epsilons {
            nonneg("epsilons entry", e)?;
        }
        ensure!(
            self.lipschitz_product > 0.0 && self.lipschitz_product.is_finite(),
            "lipschitz_product must be positive"
        );
        self.score_spec()?;
        if self.method == BoundMethod::GlobalLipschitz && self.score.kind == ScoreKind::LacSoftmax {
            bail!("method global_lipschitz is not available for lac_softmax; use tight_monotone");
        }
        self.split_plan().validate()?;
        let s = &self.synth;
        ensure!(
            s.classes >= 2 && s.d >= 2,
            "synth needs classes >= 2 and d >= 2"
        );
        ensure!(s.d + 1 >= s.classes, "synth needs d >= classes - 1");
        nonneg("synth.separation", s.separation)?;
        let t = &self.train;
        ensure!(
            t.learning_rate > 0.0 && t.temperature > 0.0,
            "train learning_rate and temperature must be > 0"
        );
        ensure!(t.batch_size >= 1, "train.batch_size must be >= 1");
        ensure!(
            t.hidden.iter().all(|&w| w >= 1),
            "hidden widths must be >= 1"
        );
        let a = &self.attack;
        ensure!(a.restarts >= 1, "attack.restarts must be >= 1");
        ensure!(
            a.step_fraction > 0.0 && a.step_fraction.is_finite(),
            "attack.step_fraction must be > 0"
        );
        Ok(())
    }

    pub fn score_spec(&self) -> Result<ScoreSpec> {
        let spec = ScoreSpec {
            kind: self.score.kind,
            temperature: self.score.temperature,
            bias: self.score.bias,
        };
        Ok(spec.validated()?)
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            cal: self.split.cal,
            eval: self.split.eval,
            test: self.split.test,
            seed: self.seed,
        }
    }

    /// Layer widths of the trained network for data of dimension `d`.
    pub fn widths(&self, d: usize, classes: usize) -> Vec<usize> {
        let mut w = vec![d];
        w.extend(&self.train.hidden);
        w.push(classes);
        w
    }

    pub fn data_path(&self) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data.csv"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.json"))
    }

    pub fn record_path(&self) -> PathBuf {
        self.record
            .clone()
            .unwrap_or_else(|| self.out_dir.join("calibration.json"))
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    ensure!(!key.is_empty(), "override `{assignment}` has an empty key");
    // Parse as a TOML value; anything that does not parse is taken as a string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
