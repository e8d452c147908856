//! Empirical-study tooling: per-cell masking sweeps, probability-averaging
//! ensembles and parameter-count reports.

use std::path::PathBuf;

use crate::cells::CellKind;
use crate::data::{BatchStream, Vocab};
use crate::error::{Error, Result};
use crate::model::{forward_sequence, log_softmax, LMModel};
use crate::pc_layer::{
    closed_form_lstm, closed_form_rnn, count_params_for, Division, MaskSet, Routing,
};
use crate::training::{evaluate_with, EvalSummary};

/// A named set of target tokens whose perplexity is reported separately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGroup {
    pub name: String,
    pub tokens: Vec<String>,
}

/// Parses `name: tok tok tok` lines; blank lines and `#` comments are skipped.
pub fn parse_groups(text: &str) -> Result<Vec<TokenGroup>> {
    let mut groups = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, toks) = line.split_once(':').ok_or_else(|| {
            Error::Data(format!("groups line {}: expected `name: tokens...`", n + 1))
        })?;
        let name = name.trim();
        if name.is_empty() || name.contains(',') {
            return Err(Error::Data(format!(
                "groups line {}: invalid group name `{name}`",
                n + 1
            )));
        }
        groups.push(TokenGroup {
            name: name.to_string(),
            tokens: toks.split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRow {
    /// `none` or `mask_<cell>`.
    pub label: String,
    pub cell: Option<usize>,
    /// Whole-set perplexity followed by one value per group.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskReport {
    pub columns: Vec<String>,
    pub rows: Vec<MaskRow>,
    pub warnings: Vec<String>,
}

impl MaskReport {
    pub fn baseline(&self) -> f64 {
        self.rows[0].values[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("mask,{}\n", self.columns.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(f64::to_string).collect();
            out.push_str(&format!("{},{}\n", r.label, vals.join(",")));
        }
        out
    }
}

/// Per-layer mask list applying `mask` to each layer in `targets`.
pub fn layer_masks(layers: usize, targets: &[usize], mask: &MaskSet) -> Result<Vec<MaskSet>> {
    let mut out = vec![MaskSet::empty(); layers];
    for &l in targets {
        let slot = out.get_mut(l).ok_or_else(|| {
            Error::Usage(format!("layer {l} out of range for a {layers}-layer model"))
        })?;
        *slot = mask.clone();
    }
    Ok(out)
}

/// Evaluates the model with no mask and then with each single cell masked in
/// every layer listed in `layers`. Group tokens missing from `vocab` are
/// skipped with a warning.
pub fn mask_sweep(
    model: &LMModel,
    stream: &BatchStream,
    layers: &[usize],
    vocab: Option<&Vocab>,
    groups: &[TokenGroup],
) -> Result<MaskReport> {
    let mut warnings = Vec::new();
    let mut group_ids: Vec<Vec<bool>> = Vec::with_capacity(groups.len());
    for g in groups {
        let mut member = vec![false; model.config.vocab_size];
        for tok in &g.tokens {
            match vocab
                .and_then(|v| v.id(tok))
                .filter(|&id| id < member.len())
            {
                Some(id) => member[id] = true,
                None => warnings.push(format!(
                    "group `{}`: token `{tok}` not in vocabulary, skipped",
                    g.name
                )),
            }
        }
        group_ids.push(member);
    }

    let wide = model.config.wide;
    let mut configs = vec![("none".to_string(), None)];
    configs.extend((0..wide).map(|i| (format!("mask_{i}"), Some(i))));

    let mut rows = Vec::with_capacity(configs.len());
    for (label, cell) in configs {
        let mask = cell.map_or_else(MaskSet::empty, MaskSet::single);
        let masks = layer_masks(model.layers.len(), layers, &mask)?;
        let mut sums = vec![(0.0, 0usize); groups.len()];
        let summary = evaluate_with(model, stream, &masks, |target, nll| {
            for (acc, member) in sums.iter_mut().zip(&group_ids) {
                if member[target] {
                    acc.0 += nll;
                    acc.1 += 1;
                }
            }
        })?;
        let mut values = vec![summary.perplexity()];
        values.extend(sums.iter().map(|&(s, n)| {
            if n == 0 {
                f64::NAN
            } else {
                (s / n as f64).exp()
            }
        }));
        rows.push(MaskRow {
            label,
            cell,
            values,
        });
    }
    let mut columns = vec!["all".to_string()];
    columns.extend(groups.iter().map(|g| g.name.clone()));
    Ok(MaskReport {
        columns,
        rows,
        warnings,
    })
}

/// Parses an ensemble spec: one checkpoint path per line, blank lines and `#`
/// comments ignored.
pub fn parse_ensemble_spec(text: &str) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let path = fields.next().expect("non-empty line");
        if fields.next().is_some() {
            return Err(Error::Data(format!(
                "ensemble spec line {}: expected a single checkpoint path, got `{line}`",
                n + 1
            )));
        }
        paths.push(PathBuf::from(path));
    }
    if paths.is_empty() {
        return Err(Error::Data("ensemble spec lists no checkpoints".into()));
    }
    Ok(paths)
}

/// Perplexity of the arithmetic mean of the members' predicted
/// distributions. Per position the members' log-probabilities of the target
/// are sorted before being combined, so the result does not depend on member
/// order.
pub fn ensemble_eval(members: &[LMModel], stream: &BatchStream) -> Result<EvalSummary> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    for (k, m) in members.iter().enumerate().skip(1) {
        if m.config.vocab_size != first.config.vocab_size
            || m.config.tokenizer != first.config.tokenizer
        {
            return Err(Error::Config(format!(
                "ensemble member {k} has vocabulary {} ({}), member 0 has {} ({})",
                m.config.vocab_size,
                m.config.tokenizer.name(),
                first.config.vocab_size,
                first.config.tokenizer.name()
            )));
        }
    }
    let k = members.len();
    let ln_k = (k as f64).ln();
    let masks: Vec<Vec<MaskSet>> = members
        .iter()
        .map(|m| vec![MaskSet::empty(); m.layers.len()])
        .collect();
    let mut states: Vec<_> = members
        .iter()
        .map(|m| m.zero_state(stream.batch()))
        .collect();
    let mut sum = 0.0;
    let mut count = 0;
    for w in stream.windows() {
        let mut member_logits = Vec::with_capacity(k);
        for (j, m) in members.iter().enumerate() {
            let (logits, next, _) = forward_sequence(m, &w.inputs, &states[j], &masks[j], None)?;
            states[j] = next;
            member_logits.push(logits);
        }
        for (b, row) in w.targets.iter().enumerate() {
            for (t, &y) in row.iter().enumerate() {
                let mut lps: Vec<f64> = member_logits
                    .iter()
                    .map(|l| log_softmax(l[t].row(b))[y])
                    .collect();
                lps.sort_by(f64::total_cmp);
                let max = lps[k - 1];
                let log_mean = max + lps.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - ln_k;
                sum += -log_mean;
                count += 1;
            }
        }
    }
    Ok(EvalSummary {
        nll_sum: sum,
        count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub hidden: usize,
    pub wide: usize,
    pub kind: CellKind,
    pub routing: Routing,
    pub exact: usize,
    pub closed_form: usize,
}

impl ParamRow {
    pub fn difference(&self) -> i64 {
        self.exact as i64 - self.closed_form as i64
    }

    /// Exact count in millions, rounded to one decimal.
    pub fn millions(&self) -> String {
        format!("{:.1}M", self.exact as f64 / 1e6)
    }
}

/// Exact and closed-form parameter counts of one recurrent layer with input
/// size `m` for each `(m, n, kind, routing)`.
pub fn param_report(
    configs: &[(usize, usize, CellKind, Routing)],
    division: Division,
) -> Result<Vec<ParamRow>> {
    configs
        .iter()
        .map(|&(m, n, kind, routing)| {
            let exact = count_params_for(kind, m, m, n, routing, division)?;
            let closed_form = match kind {
                CellKind::Lstm => closed_form_lstm(m, n),
                CellKind::Rnn { .. } => closed_form_rnn(m, n),
            };
            Ok(ParamRow {
                hidden: m,
                wide: n,
                kind,
                routing,
                exact,
                closed_form,
            })
        })
        .collect()
}

pub fn param_report_csv(rows: &[ParamRow]) -> String {
    let mut out = String::from("hidden,wide,cell,routing,exact,closed_form,difference,millions\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.hidden,
            r.wide,
            r.kind.name(),
            r.routing.name(),
            r.exact,
            r.closed_form,
            r.difference(),
            r.millions()
        ));
    }
    out
}
