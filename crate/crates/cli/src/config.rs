//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use parallel_cells::data::Tokenizer;
use parallel_cells::model::ModelConfig;
use parallel_cells::training::TrainConfig;
use parallel_cells::{Error, Result};

/// Everything a training run needs. `vocab_size` of the model is filled in
/// from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tokenizer: Tokenizer,
    pub max_vocab: usize,
    pub valid_frac: f64,
    pub test_frac: f64,
    /// `None` means "same as `hidden`".
    pub embed_dim: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::new(0, 200, 1, 2);
        model.tokenizer = Tokenizer::Word { eos: true };
        RunConfig {
            corpus: None,
            out_dir: PathBuf::from("run"),
            tokenizer: model.tokenizer,
            max_vocab: 10_000,
            valid_frac: 0.05,
            test_frac: 0.1,
            embed_dim: None,
            model,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "corpus",
    "out_dir",
    "tokenizer",
    "max_vocab",
    "valid_frac",
    "test_frac",
    "embed_dim",
    "layers",
    "hidden",
    "wide",
    "cell",
    "routing",
    "unroll",
    "batch",
    "init_range",
    "base_lr",
    "warm_epochs",
    "decay_factor",
    "total_epochs",
    "clip_threshold",
    "dropout_rate",
    "dropout_target",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "tokenizer" => self.tokenizer = v.parse()?,
            "max_vocab" => self.max_vocab = parse(key, v)?,
            "valid_frac" => self.valid_frac = parse(key, v)?,
            "test_frac" => self.test_frac = parse(key, v)?,
            "embed_dim" => self.embed_dim = Some(parse(key, v)?),
            "layers" => self.model.layers = parse(key, v)?,
            "hidden" => self.model.hidden = parse(key, v)?,
            "wide" => self.model.wide = parse(key, v)?,
            "cell" => self.model.cell = v.parse()?,
            "routing" => self.model.routing = v.parse()?,
            "unroll" => self.train.unroll = parse(key, v)?,
            "batch" => self.train.batch = parse(key, v)?,
            "init_range" => self.train.init_range = parse(key, v)?,
            "base_lr" => self.train.base_lr = parse(key, v)?,
            "warm_epochs" => self.train.warm_epochs = parse(key, v)?,
            "decay_factor" => self.train.decay_factor = parse(key, v)?,
            "total_epochs" => self.train.total_epochs = parse(key, v)?,
            "clip_threshold" => self.train.clip_threshold = parse(key, v)?,
            "dropout_rate" => self.train.dropout_rate = parse(key, v)?,
            "dropout_target" => self.train.dropout_target = v.parse()?,
            "seed" => self.train.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin} line {}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Model configuration for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        m.embed_dim = self.embed_dim.unwrap_or(m.hidden);
        m.tokenizer = self.tokenizer;
        m.batch = self.train.batch;
        m.unroll = self.train.unroll;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for (key, v) in [
            ("valid_frac", self.valid_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{key}` must be in [0, 1), got {v}")));
            }
        }
        if self.valid_frac + self.test_frac >= 1.0 {
            return Err(Error::Config(
                "`valid_frac` + `test_frac` leave no training data".into(),
            ));
        }
        if self.corpus.is_none() {
            return Err(Error::Config("`corpus` is not set".into()));
        }
        self.model_config(1).map(|_| ())
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn resolved_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let corpus = self
            .corpus
            .as_ref()
            .map_or(String::new(), |p| p.display().to_string());
        let values = [
            corpus,
            self.out_dir.display().to_string(),
            self.tokenizer.name(),
            self.max_vocab.to_string(),
            self.valid_frac.to_string(),
            self.test_frac.to_string(),
            self.embed_dim.unwrap_or(m.hidden).to_string(),
            m.layers.to_string(),
            m.hidden.to_string(),
            m.wide.to_string(),
            m.cell.name(),
            m.routing.name().to_string(),
            t.unroll.to_string(),
            t.batch.to_string(),
            t.init_range.to_string(),
            t.base_lr.to_string(),
            t.warm_epochs.to_string(),
            t.decay_factor.to_string(),
            t.total_epochs.to_string(),
            t.clip_threshold.to_string(),
            t.dropout_rate.to_string(),
            t.dropout_target.name().to_string(),
            t.seed.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# run\ncorpus = a.txt\nwide = 4\nhidden=64\ncell = rnn-tanh\ndecay_factor = 0.5\n",
            "test",
        )
        .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.resolved_text(), "resolved").unwrap();
        back.embed_dim = None;
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default()
            .apply_text("widht = 3\n", "x")
            .unwrap_err();
        assert!(err.to_string().contains("widht"));
    }

    #[test]
    fn bad_value_is_named() {
        let err = RunConfig::default()
            .apply_override("total_epochs=ten")
            .unwrap_err();
        assert!(err.to_string().contains("total_epochs"));
    }
}
