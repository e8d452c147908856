//! Corpus ingestion, vocabulary and contiguous minibatching.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tokenizer {
    /// Whitespace-separated words, optionally with an end-of-line token.
    Word { eos: bool },
    /// One token per byte.
    Byte,
}

impl Tokenizer {
    pub fn name(self) -> String {
        match self {
            Tokenizer::Word { eos: true } => "word".into(),
            Tokenizer::Word { eos: false } => "word-noeos".into(),
            Tokenizer::Byte => "byte".into(),
        }
    }

    pub fn tokenize(self, text: &[u8]) -> Vec<String> {
        match self {
            Tokenizer::Byte => text.iter().map(|&b| byte_token(b)).collect(),
            Tokenizer::Word { eos } => {
                let text = String::from_utf8_lossy(text);
                let mut out = Vec::new();
                for line in text.lines() {
                    let before = out.len();
                    out.extend(line.split_whitespace().map(str::to_string));
                    if eos && out.len() > before {
                        out.push(EOS.to_string());
                    }
                }
                out
            }
        }
    }
}

impl std::str::FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Tokenizer::Word { eos: true }),
            "word-noeos" => Ok(Tokenizer::Word { eos: false }),
            "byte" => Ok(Tokenizer::Byte),
            other => Err(Error::Config(format!(
                "unknown tokenizer `{other}` (expected word|word-noeos|byte)"
            ))),
        }
    }
}

/// Printable ASCII bytes stand for themselves; anything else is written as
/// `<0xHH>` so every token fits on one line of a vocabulary file.
pub fn byte_token(b: u8) -> String {
    if b.is_ascii_graphic() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk_id: usize,
    eos_id: Option<usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let unk_id = *index
            .get(UNK)
            .ok_or_else(|| Error::Data(format!("vocabulary has no `{UNK}` entry")))?;
        let eos_id = index.get(EOS).copied();
        Ok(Vocab {
            tokens,
            index,
            unk_id,
            eos_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.eos_id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }
}

/// Keeps the `max_size - reserved` most frequent tokens (ties broken
/// lexicographically) after `<unk>` (id 0) and, when `with_eos`, `<eos>`
/// (id 1). Literal `<unk>`/`<eos>` in the corpus map onto the reserved ids.
pub fn build_vocab(tokens: &[String], max_size: usize, with_eos: bool) -> Result<Vocab> {
    if tokens.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let reserved = if with_eos { 2 } else { 1 };
    if max_size < reserved {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room for the {reserved} reserved tokens"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        if t != UNK && t != EOS {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut list = vec![UNK.to_string()];
    if with_eos {
        list.push(EOS.to_string());
    }
    list.extend(
        ranked
            .into_iter()
            .take(max_size - reserved)
            .map(|(t, _)| t.to_string()),
    );
    Vocab::from_tokens(list)
}

pub fn encode(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id))
        .collect()
}

pub fn decode(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(UNK).to_string())
        .collect()
}

/// Splits off the last `test_frac` of the ids as test data, then the last
/// `valid_frac` of the remainder as validation data.
pub fn split_corpus<T: Clone>(
    ids: &[T],
    valid_frac: f64,
    test_frac: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n_test = (ids.len() as f64 * test_frac).round() as usize;
    let (train_all, test) = ids.split_at(ids.len() - n_test.min(ids.len()));
    let n_valid = (train_all.len() as f64 * valid_frac).round() as usize;
    let (train, valid) = train_all.split_at(train_all.len() - n_valid.min(train_all.len()));
    (train.to_vec(), valid.to_vec(), test.to_vec())
}

/// A tokenised corpus cut into train, validation and test ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedCorpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Tokenises `text`, splits it with [`split_corpus`] and builds the
/// vocabulary from the training part only.
pub fn prepare_corpus(
    text: &[u8],
    tokenizer: Tokenizer,
    max_vocab: usize,
    valid_frac: f64,
    test_frac: f64,
) -> Result<PreparedCorpus> {
    let tokens = tokenizer.tokenize(text);
    let (train, valid, test) = split_corpus(&tokens, valid_frac, test_frac);
    let vocab = build_vocab(
        &train,
        max_vocab,
        matches!(tokenizer, Tokenizer::Word { eos: true }),
    )?;
    Ok(PreparedCorpus {
        train: encode(&train, &vocab),
        valid: encode(&valid, &vocab),
        test: encode(&test, &vocab),
        vocab,
    })
}

/// One unroll window: `inputs[b][t]` is followed in the corpus by
/// `targets[b][t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The corpus laid out as `B` contiguous rows read `T` steps at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchStream {
    rows: Vec<Vec<usize>>,
    unroll: usize,
}

/// Truncates `ids` to a multiple of `batch` and reshapes it into `batch`
/// contiguous rows.
pub fn make_batches(ids: &[usize], batch: usize, unroll: usize) -> Result<BatchStream> {
    if batch == 0 || unroll == 0 {
        return Err(Error::Config("batch and unroll must be positive".into()));
    }
    let need = batch * (unroll + 1);
    if ids.len() < need {
        return Err(Error::Data(format!(
            "corpus has {} tokens but batch={batch}, unroll={unroll} needs at least {need}",
            ids.len()
        )));
    }
    let row_len = ids.len() / batch;
    let rows = ids[..row_len * batch]
        .chunks_exact(row_len)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(BatchStream { rows, unroll })
}

impl BatchStream {
    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    pub fn unroll(&self) -> usize {
        self.unroll
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Input positions per row (the last token of a row is only a target).
    fn positions(&self) -> usize {
        self.rows[0].len() - 1
    }

    pub fn num_windows(&self) -> usize {
        self.positions().div_ceil(self.unroll)
    }

    /// Total number of predicted positions per pass.
    pub fn num_targets(&self) -> usize {
        self.positions() * self.batch()
    }

    /// Window `k`; the final window may be shorter than `unroll`.
    pub fn window(&self, k: usize) -> Window {
        let start = k * self.unroll;
        let end = (start + self.unroll).min(self.positions());
        Window {
            inputs: self.rows.iter().map(|r| r[start..end].to_vec()).collect(),
            targets: self
                .rows
                .iter()
                .map(|r| r[start + 1..end + 1].to_vec())
                .collect(),
        }
    }

    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.num_windows()).map(move |k| self.window(k))
    }
}
