use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seqmodel::Thresholds;
use crate::trading::CostModel;

/// Hyperparameters of one estimation run.
///
/// The text form is one `key = value` pair per line with `#` comments; keys
/// are the field names. List values are comma separated.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_factors: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lambda_var: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub squash: f64,
    pub lookback: usize,
    pub pca_window: usize,
    pub train_years: usize,
    pub validation_years: usize,
    pub retrain_years: usize,
    pub cost_transaction: f64,
    pub cost_short: f64,
    pub ridge: f64,
    pub batch_days: usize,
    pub ou_window: usize,
    pub ou_open: f64,
    pub ou_close: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Candidate `lambda_var` values scored on the first window's validation years.
    pub tune_lambda_var: Vec<f64>,
    /// Candidate learning rates scored on the first window's validation years.
    pub tune_learning_rate: Vec<f64>,
    pub seed: u64,
    /// Seeds for multi-seed reports.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_factors: 3,
            hidden: 32,
            attention_dim: 32,
            layers: 1,
            dropout: 0.1,
            epochs: 30,
            lambda_var: 100.0,
            learning_rate: 0.003,
            weight_decay: 0.05,
            squash: 0.001,
            lookback: 30,
            pca_window: 252,
            train_years: 8,
            validation_years: 2,
            retrain_years: 1,
            cost_transaction: 0.0005,
            cost_short: 0.0001,
            ridge: 1e-4,
            batch_days: 250,
            ou_window: 30,
            ou_open: 1.25,
            ou_close: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tune_lambda_var: Vec::new(),
            tune_learning_rate: Vec::new(),
            seed: 0,
            seeds: vec![0, 1, 2],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "n_factors" => self.n_factors = parse(k, value)?,
            "hidden" => self.hidden = parse(k, value)?,
            "attention_dim" => self.attention_dim = parse(k, value)?,
            "layers" => self.layers = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "lambda_var" => self.lambda_var = parse(k, value)?,
            "learning_rate" => self.learning_rate = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "squash" => self.squash = parse(k, value)?,
            "lookback" => self.lookback = parse(k, value)?,
            "pca_window" => self.pca_window = parse(k, value)?,
            "train_years" => self.train_years = parse(k, value)?,
            "validation_years" => self.validation_years = parse(k, value)?,
            "retrain_years" => self.retrain_years = parse(k, value)?,
            "cost_transaction" => self.cost_transaction = parse(k, value)?,
            "cost_short" => self.cost_short = parse(k, value)?,
            "ridge" => self.ridge = parse(k, value)?,
            "batch_days" => self.batch_days = parse(k, value)?,
            "ou_window" => self.ou_window = parse(k, value)?,
            "ou_open" => self.ou_open = parse(k, value)?,
            "ou_close" => self.ou_close = parse(k, value)?,
            "adam_beta1" => self.adam_beta1 = parse(k, value)?,
            "adam_beta2" => self.adam_beta2 = parse(k, value)?,
            "adam_eps" => self.adam_eps = parse(k, value)?,
            "tune_lambda_var" => self.tune_lambda_var = parse_list(k, value)?,
            "tune_learning_rate" => self.tune_learning_rate = parse_list(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "seeds" => self.seeds = parse_list(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Canonical text form; [`from_text`](Self::from_text) reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_factors", self.n_factors.to_string());
        kv("hidden", self.hidden.to_string());
        kv("attention_dim", self.attention_dim.to_string());
        kv("layers", self.layers.to_string());
        kv("dropout", self.dropout.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lambda_var", self.lambda_var.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("squash", self.squash.to_string());
        kv("lookback", self.lookback.to_string());
        kv("pca_window", self.pca_window.to_string());
        kv("train_years", self.train_years.to_string());
        kv("validation_years", self.validation_years.to_string());
        kv("retrain_years", self.retrain_years.to_string());
        kv("cost_transaction", self.cost_transaction.to_string());
        kv("cost_short", self.cost_short.to_string());
        kv("ridge", self.ridge.to_string());
        kv("batch_days", self.batch_days.to_string());
        kv("ou_window", self.ou_window.to_string());
        kv("ou_open", self.ou_open.to_string());
        kv("ou_close", self.ou_close.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("tune_lambda_var", join(&self.tune_lambda_var));
        kv("tune_learning_rate", join(&self.tune_learning_rate));
        kv("seed", self.seed.to_string());
        kv("seeds", join(&self.seeds));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("n_factors", self.n_factors),
            ("hidden", self.hidden),
            ("attention_dim", self.attention_dim),
            ("layers", self.layers),
            ("lookback", self.lookback),
            ("pca_window", self.pca_window),
            ("train_years", self.train_years),
            ("retrain_years", self.retrain_years),
            ("batch_days", self.batch_days),
            ("ou_window", self.ou_window),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.validation_years >= self.train_years {
            return fail("validation_years must be smaller than train_years".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("lambda_var", self.lambda_var),
            ("weight_decay", self.weight_decay),
            ("squash", self.squash),
            ("cost_transaction", self.cost_transaction),
            ("cost_short", self.cost_short),
            ("ridge", self.ridge),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and nonnegative"));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if !(self.ou_open > self.ou_close && self.ou_close >= 0.0) {
            return fail("need ou_open > ou_close >= 0".into());
        }
        if self.tune_lambda_var.iter().any(|v| !(*v >= 0.0))
            || self.tune_learning_rate.iter().any(|v| !(*v >= 0.0))
        {
            return fail("tuning candidates must be nonnegative".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        Ok(())
    }

    pub fn cost(&self) -> CostModel {
        CostModel {
            transaction: self.cost_transaction,
            short: self.cost_short,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            open: self.ou_open,
            close: self.ou_close,
        }
    }

    /// Cartesian product of the tuning candidates, or just `self`.
    pub fn tuning_candidates(&self) -> Vec<RunConfig> {
        let lv = if self.tune_lambda_var.is_empty() {
            vec![self.lambda_var]
        } else {
            self.tune_lambda_var.clone()
        };
        let lr = if self.tune_learning_rate.is_empty() {
            vec![self.learning_rate]
        } else {
            self.tune_learning_rate.clone()
        };
        let mut out = Vec::new();
        for &l in &lv {
            for &r in &lr {
                out.push(RunConfig {
                    lambda_var: l,
                    learning_rate: r,
                    ..self.clone()
                });
            }
        }
        out
    }
}
