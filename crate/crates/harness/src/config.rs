//! Experiment configuration: a TOML file of dotted keys and sections,
//! overridden key by key from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use autoopt::controller::{ControllerConfig, SolveMode};
use autoopt::nn::{Architecture, DropoutRates};
use autoopt::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => bail!("unknown dataset {other:?} (expected mnist or cifar10)"),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Auto,
    Fixed,
}

impl FromStr for RunMode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(RunMode::Auto),
            "fixed" => Ok(RunMode::Fixed),
            other => bail!("unknown mode {other:?} (expected auto or fixed)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("unknown precision {other:?} (expected f32 or f64)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub dir: PathBuf,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Seed of the subset draw, shared by every training seed.
    pub seed: u64,
    pub standardize: bool,
}

/// Quadratic testbed settings for the `oracle` command.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Problem dimensions, cycled over the cases.
    pub dims: Vec<usize>,
    pub batch: usize,
    pub cases: usize,
    pub draws: usize,
    pub batches: usize,
    pub noise_lo: f64,
    pub noise_hi: f64,
    pub noise_free: bool,
    pub grid_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            dims: vec![8, 10],
            batch: 16,
            cases: 20,
            draws: 10_000,
            batches: 1000,
            noise_lo: 0.02,
            noise_hi: 0.08,
            noise_free: false,
            grid_step: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: Architecture,
    pub dropout: DropoutRates,
    pub merge_bias: bool,
    pub optimizer: OptimizerKind,
    pub mode: RunMode,
    pub alpha: f64,
    pub beta: f64,
    pub controller: ControllerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub precision: Precision,
    /// Measure the training error with a full evaluation pass each epoch
    /// rather than from the running mini-batch predictions.
    pub eval_train: bool,
    pub write_trace: bool,
    /// Record real elapsed time; when off the column is written as 0 so
    /// that repeated runs produce identical files.
    pub wall_time: bool,
    pub grid_alphas: Vec<f64>,
    pub grid_betas: Vec<f64>,
    pub oracle: OracleConfig,
}

/// Every recognised key, in the order `--help` lists them.
pub const KEYS: &[&str] = &[
    "dataset",
    "data.dir",
    "data.train_subset",
    "data.test_subset",
    "data.seed",
    "data.standardize",
    "model.arch",
    "model.dropout_conv",
    "model.dropout_fc",
    "model.merge_bias",
    "optimizer.name",
    "optimizer.beta2",
    "optimizer.eps",
    "mode",
    "alpha",
    "beta",
    "controller.upsilon",
    "controller.ridge",
    "controller.alpha_min",
    "controller.alpha_max",
    "controller.beta_max",
    "controller.init_alpha",
    "controller.warmup_steps",
    "controller.adagrad_mode",
    "controller.horizon_batch",
    "batch_size",
    "epochs",
    "seeds",
    "out",
    "precision",
    "eval.train",
    "output.trace",
    "output.wall_time",
    "grid.alphas",
    "grid.betas",
    "oracle.dims",
    "oracle.batch",
    "oracle.cases",
    "oracle.draws",
    "oracle.batches",
    "oracle.noise_lo",
    "oracle.noise_hi",
    "oracle.noise_free",
    "oracle.grid_step",
];

/// Raw key/value settings before typing. Later inserts win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().context("parsing configuration")?;
        let mut s = Settings::default();
        flatten("", &table, &mut s)?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Settings::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            bail!("unknown configuration key {key:?}");
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("{key} = {v:?}: {e}")))
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|e| anyhow!("{key} = {v:?}: {e}")))
                    .collect()
            })
            .transpose()
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let dataset: DatasetKind = self.parse("dataset")?.unwrap_or(DatasetKind::Mnist);
        let data = DataConfig {
            dataset,
            dir: self.parse("data.dir")?.unwrap_or_else(|| PathBuf::from(format!("data/{dataset}"))),
            train_subset: self.parse("data.train_subset")?,
            test_subset: self.parse("data.test_subset")?,
            seed: self.parse("data.seed")?.unwrap_or(0),
            standardize: self.parse("data.standardize")?.unwrap_or(true),
        };
        let model = match self.parse::<Architecture>("model.arch")? {
            Some(m) => m,
            None => match dataset {
                DatasetKind::Mnist => Architecture::MnistCnn,
                DatasetKind::Cifar10 => Architecture::CifarCnn,
            },
        };
        let defaults = DropoutRates::default();
        let dropout = DropoutRates {
            conv: self.parse("model.dropout_conv")?.unwrap_or(defaults.conv),
            fc: self.parse("model.dropout_fc")?.unwrap_or(defaults.fc),
        };

        let mut optimizer: OptimizerKind = self.parse("optimizer.name")?.unwrap_or(OptimizerKind::Sgd);
        match &mut optimizer {
            OptimizerKind::Adam { beta2, eps } => {
                *beta2 = self.parse("optimizer.beta2")?.unwrap_or(*beta2);
                *eps = self.parse("optimizer.eps")?.unwrap_or(*eps);
            }
            OptimizerKind::AdaGrad { eps } => {
                *eps = self.parse("optimizer.eps")?.unwrap_or(*eps);
            }
            OptimizerKind::Sgd | OptimizerKind::SgdMomentum => {}
        }
        optimizer.validate()?;

        let mut c = ControllerConfig::for_optimizer(&optimizer);
        c.upsilon = self.parse("controller.upsilon")?.unwrap_or(c.upsilon);
        c.ridge = self.parse("controller.ridge")?.unwrap_or(c.ridge);
        c.clamps.alpha_min = self.parse("controller.alpha_min")?.unwrap_or(c.clamps.alpha_min);
        c.clamps.alpha_max = self.parse("controller.alpha_max")?.unwrap_or(c.clamps.alpha_max);
        c.clamps.beta_max = self.parse("controller.beta_max")?.unwrap_or(c.clamps.beta_max);
        c.init_alpha = self.parse("controller.init_alpha")?.unwrap_or(c.init_alpha);
        c.warmup_steps = self.parse("controller.warmup_steps")?.unwrap_or(c.warmup_steps);
        c.adagrad_mode = self.parse::<SolveMode>("controller.adagrad_mode")?.unwrap_or(c.adagrad_mode);
        c.horizon_batch = match self.parse::<usize>("controller.horizon_batch")? {
            Some(0) => None,
            Some(size) => Some(size),
            None => c.horizon_batch,
        };
        c.validate()?;

        let mode = self.parse("mode")?.unwrap_or(RunMode::Auto);
        let alpha = self.parse("alpha")?.unwrap_or(0.01);
        let beta = self.parse("beta")?.unwrap_or(0.0);
        if !(alpha > 0.0) || !(0.0..1.0).contains(&beta) {
            bail!("fixed hyperparameters need alpha > 0 and beta in [0, 1), got {alpha}, {beta}");
        }
        let seeds: Vec<u64> = self.list("seeds")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let batch_size: usize = self.parse("batch_size")?.unwrap_or(64);
        if batch_size < 2 {
            bail!("batch_size must be at least 2, got {batch_size}");
        }
        let epochs = self.parse("epochs")?.unwrap_or(3);

        let od = OracleConfig::default();
        let oracle = OracleConfig {
            dims: self.list("oracle.dims")?.unwrap_or(od.dims),
            batch: self.parse("oracle.batch")?.unwrap_or(od.batch),
            cases: self.parse("oracle.cases")?.unwrap_or(od.cases),
            draws: self.parse("oracle.draws")?.unwrap_or(od.draws),
            batches: self.parse("oracle.batches")?.unwrap_or(od.batches),
            noise_lo: self.parse("oracle.noise_lo")?.unwrap_or(od.noise_lo),
            noise_hi: self.parse("oracle.noise_hi")?.unwrap_or(od.noise_hi),
            noise_free: self.parse("oracle.noise_free")?.unwrap_or(od.noise_free),
            grid_step: self.parse("oracle.grid_step")?.unwrap_or(od.grid_step),
        };
        if oracle.batch < 2 || oracle.dims.is_empty() || oracle.dims.contains(&0) || oracle.cases == 0 || oracle.draws == 0 || oracle.batches == 0 {
            bail!("oracle settings need batch >= 2 and positive dims, cases, draws and batches");
        }

        Ok(ExperimentConfig {
            data,
            model,
            dropout,
            merge_bias: self.parse("model.merge_bias")?.unwrap_or(false),
            optimizer,
            mode,
            alpha,
            beta,
            controller: c,
            batch_size,
            epochs,
            seeds,
            out: self.parse("out")?.unwrap_or_else(|| PathBuf::from("runs")),
            precision: self.parse("precision")?.unwrap_or(Precision::F64),
            eval_train: self.parse("eval.train")?.unwrap_or(true),
            write_trace: self.parse("output.trace")?.unwrap_or(true),
            wall_time: self.parse("output.wall_time")?.unwrap_or(false),
            grid_alphas: self.list("grid.alphas")?.unwrap_or_else(|| vec![1e-3, 1e-2, 1e-1]),
            grid_betas: self.list("grid.betas")?.unwrap_or_else(|| vec![0.0, 0.9]),
            oracle,
        })
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Settings) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    other => Err(anyhow!("{key}: unsupported list item {other}")),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            toml::Value::Datetime(_) => bail!("{key}: dates are not supported"),
        };
        out.set(&key, text)?;
    }
    Ok(())
}

pub type Overrides = Vec<(String, String)>;

/// Pulls `--dotted.key value` and `--dotted.key=value` pairs naming
/// configuration keys out of `args`, leaving everything else in place.
pub fn extract_key_overrides(args: Vec<String>, reserved: &[&str]) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut found = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !KEYS.contains(&name.as_str()) || reserved.contains(&name.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("--{name} needs a value"))?,
        };
        found.push((name, value));
    }
    Ok((rest, found))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Settings::default().build().unwrap();
        assert_eq!(c.data.dataset, DatasetKind::Mnist);
        assert_eq!(c.model, Architecture::MnistCnn);
        assert_eq!(c.controller.clamps.alpha_max, 10.0);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.grid_alphas.len() * c.grid_betas.len(), 6);
    }

    #[test]
    fn sections_and_dotted_keys() {
        let text = r#"
            dataset = "cifar10"
            seeds = [1, 2, 3]
            optimizer.name = "adam"
            optimizer.beta2 = 0.95

            [controller]
            upsilon = 0.8
            warmup_steps = 5
        "#;
        let c = Settings::from_toml_str(text).unwrap().build().unwrap();
        assert_eq!(c.model, Architecture::CifarCnn);
        assert_eq!(c.optimizer, OptimizerKind::Adam { beta2: 0.95, eps: 1e-8 });
        assert_eq!(c.controller.upsilon, 0.8);
        assert_eq!(c.controller.warmup_steps, 5);
        assert_eq!(c.controller.init_alpha, 0.001);
        assert_eq!(c.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Settings::from_toml_str("learning_rate = 0.1").is_err());
        let mut s = Settings::default();
        s.set("controller.upsilon", "1.5").unwrap();
        assert!(s.build().is_err());
        let mut s = Settings::default();
        s.set("batch_size", "1").unwrap();
        assert!(s.build().is_err());
    }

    #[test]
    fn overrides_are_extracted() {
        let args: Vec<String> = ["train", "--controller.upsilon", "0.5", "--epochs=2", "--out", "x", "--seeds", "4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, found) = extract_key_overrides(args, &["out"]).unwrap();
        assert_eq!(rest, ["train", "--out", "x"]);
        assert_eq!(
            found,
            vec![
                ("controller.upsilon".to_string(), "0.5".to_string()),
                ("epochs".to_string(), "2".to_string()),
                ("seeds".to_string(), "4".to_string()),
            ]
        );
    }
}
