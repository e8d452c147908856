use std::path::{Path, PathBuf};

use parallel_cells::analysis::{
    ensemble_eval, mask_sweep, param_report, param_report_csv, parse_ensemble_spec, parse_groups,
};
use parallel_cells::cells::CellKind;
use parallel_cells::checkpoint::{Checkpoint, RngState};
use parallel_cells::data::{encode, make_batches, prepare_corpus, BatchStream, Vocab};
use parallel_cells::model::{no_masks, LMModel};
use parallel_cells::pc_layer::{Division, MaskSet, Routing};
use parallel_cells::training::{evaluate, init_params, train as run_training, EpochMetrics};
use parallel_cells::{rng_from_seed, Error, Result};

use crate::config::RunConfig;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_vocab(explicit: Option<&Path>, checkpoint: &Path, model: &LMModel) -> Result<Vocab> {
    let path = explicit.map_or_else(|| sibling(checkpoint, "vocab.txt"), Path::to_path_buf);
    let vocab = Vocab::load(&path)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary {} has {} tokens but the checkpoint expects {}",
            path.display(),
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok(vocab)
}

fn corpus_stream(path: &Path, model: &LMModel, vocab: &Vocab) -> Result<BatchStream> {
    let tokens = model.config.tokenizer.tokenize(&read(path)?);
    let ids = encode(&tokens, vocab);
    make_batches(&ids, model.config.batch, model.config.unroll)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn split_stream(ids: &[usize], cfg: &RunConfig, name: &str) -> Result<Option<BatchStream>> {
    if ids.is_empty() {
        return Ok(None);
    }
    make_batches(ids, cfg.train.batch, cfg.train.unroll)
        .map(Some)
        .map_err(|e| Error::Data(format!("{name} split: {e}")))
}

pub fn train(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    let corpus_path = cfg.corpus.clone().expect("validated");
    let text = read(&corpus_path)?;

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    write(&out.join("resolved-config.txt"), cfg.resolved_text())?;

    let corpus = prepare_corpus(
        &text,
        cfg.tokenizer,
        cfg.max_vocab,
        cfg.valid_frac,
        cfg.test_frac,
    )?;
    corpus.vocab.save(&out.join("vocab.txt"))?;
    let train_stream = split_stream(&corpus.train, &cfg, "training")?
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    let valid_stream = split_stream(&corpus.valid, &cfg, "validation")?;
    let test_stream = split_stream(&corpus.test, &cfg, "test")?;

    let model_cfg = cfg.model_config(corpus.vocab.len())?;
    let mut rng = rng_from_seed(cfg.train.seed);
    let mut model = LMModel::zeros(model_cfg)?;
    init_params(&mut model, cfg.train.init_range, &mut rng);
    eprintln!(
        "training {} parameters ({} recurrent), vocabulary {}, {} windows per epoch",
        model.param_count(),
        model.recurrent_param_count(),
        corpus.vocab.len(),
        train_stream.num_windows()
    );

    let outcome = run_training(
        model,
        &train_stream,
        valid_stream.as_ref(),
        &cfg.train,
        &mut rng,
        |m| {
            eprintln!(
                "epoch {} lr {:.6} train_ppl {:.4} valid_ppl {:.4}",
                m.epoch, m.lr, m.train_ppl, m.valid_ppl
            )
        },
    )?;

    let mut csv = format!("{}\n", EpochMetrics::CSV_HEADER);
    for m in &outcome.metrics {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    write(&out.join("metrics.csv"), csv)?;

    let epochs = cfg.train.total_epochs as u32;
    let mut last = Checkpoint::new(outcome.model.clone());
    last.epoch = epochs;
    last.rng = Some(RngState::capture(&rng));
    last.save(&out.join("final.pcrn"))?;
    let mut best = match &outcome.best {
        Some((epoch, m)) => {
            let mut c = Checkpoint::new(m.clone());
            c.epoch = *epoch as u32;
            c
        }
        None => last.clone(),
    };
    best.rng = None;
    best.save(&out.join("best.pcrn"))?;

    if let Some(test) = &test_stream {
        let best_model = &best.model;
        let ppl = evaluate(best_model, test, &no_masks(best_model.layers.len()))?.perplexity();
        println!(
            "test perplexity {ppl:.6} (best checkpoint, epoch {})",
            best.epoch
        );
    }
    println!("outputs written to {}", out.display());
    Ok(())
}

/// Parses `layer=L,cell=C` flags into per-layer mask sets.
fn parse_masks(flags: &[String], layers: usize) -> Result<Vec<MaskSet>> {
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); layers];
    for flag in flags {
        let (mut layer, mut cell) = (None, None);
        for part in flag.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--mask `{flag}`: expected layer=L,cell=C")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("--mask `{flag}`: `{v}` is not an index")))?;
            match k.trim() {
                "layer" => layer = Some(v),
                "cell" => cell = Some(v),
                other => {
                    return Err(Error::Usage(format!(
                        "--mask `{flag}`: unknown field `{other}`"
                    )))
                }
            }
        }
        let (Some(layer), Some(cell)) = (layer, cell) else {
            return Err(Error::Usage(format!(
                "--mask `{flag}`: expected layer=L,cell=C"
            )));
        };
        sets.get_mut(layer)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "--mask layer {layer} out of range for a {layers}-layer model"
                ))
            })?
            .push(cell);
    }
    Ok(sets.into_iter().map(MaskSet::from_indices).collect())
}

pub fn eval(checkpoint: &Path, corpus: &Path, vocab: Option<&Path>, mask: &[String]) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model;
    let vocab = load_vocab(vocab, checkpoint, &model)?;
    let masks = parse_masks(mask, model.layers.len())?;
    for m in &masks {
        m.validate(model.config.wide)?;
    }
    let stream = corpus_stream(corpus, &model, &vocab)?;
    let summary = evaluate(&model, &stream, &masks)?;
    eprintln!("{} target tokens", summary.count);
    println!("perplexity {:.6}", summary.perplexity());
    Ok(())
}

pub fn mask(
    checkpoint: &Path,
    corpus: &Path,
    vocab: Option<&Path>,
    groups: Option<&Path>,
    layers: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model;
    let vocab = load_vocab(vocab, checkpoint, &model)?;
    let groups = match groups {
        Some(p) => {
            let text = String::from_utf8(read(p)?)
                .map_err(|_| Error::Data(format!("{} is not UTF-8", p.display())))?;
            parse_groups(&text)?
        }
        None => Vec::new(),
    };
    let layers: Vec<usize> = if layers.is_empty() {
        (0..model.layers.len()).collect()
    } else {
        layers.to_vec()
    };
    let stream = corpus_stream(corpus, &model, &vocab)?;
    let report = mask_sweep(&model, &stream, &layers, Some(&vocab), &groups)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let dir = out.map_or_else(|| sibling(checkpoint, ""), Path::to_path_buf);
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let csv = report.to_csv();
    let path = dir.join("mask_report.csv");
    write(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn ensemble(spec: &Path, corpus: &Path, vocab: Option<&Path>) -> Result<()> {
    let text = String::from_utf8(read(spec)?)
        .map_err(|_| Error::Data(format!("{} is not UTF-8", spec.display())))?;
    let base = spec.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = parse_ensemble_spec(&text)
        .map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", spec.display())),
            other => other,
        })?
        .into_iter()
        .map(|p| if p.is_absolute() { p } else { base.join(p) })
        .collect();
    let members = paths
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    let vocab = load_vocab(vocab, &paths[0], &members[0])?;
    let stream = corpus_stream(corpus, &members[0], &vocab)?;
    let summary = ensemble_eval(&members, &stream)?;
    eprintln!("{} members, {} target tokens", members.len(), summary.count);
    println!("perplexity {:.6}", summary.perplexity());
    Ok(())
}

pub fn params(
    hidden: usize,
    wide: &[usize],
    cell: &str,
    routing: &str,
    balanced: bool,
) -> Result<()> {
    let kind: CellKind = cell.parse()?;
    let routing: Routing = routing.parse()?;
    let division = if balanced {
        Division::Balanced
    } else {
        Division::Equal
    };
    let configs: Vec<_> = wide.iter().map(|&n| (hidden, n, kind, routing)).collect();
    let rows = param_report(&configs, division).map_err(|e| match e {
        Error::Config(msg) if !balanced => Error::Config(format!(
            "{msg} (pass --balanced to count cells whose sizes differ by one)"
        )),
        other => other,
    })?;
    print!("{}", param_report_csv(&rows));
    Ok(())
}
