//! Final-token attention profiles at the last layer.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::prepare;
use crate::model::Backbone;
use crate::pooling::{PoolingKind, PoolingStrategy};
use crate::prompts::PromptTemplate;
use crate::tokenizer::Vocabulary;
use crate::{Error, Scalar};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("text is empty")]
    EmptyText,
    #[error("input produced no tokens")]
    NoTokens,
    #[error("token sequences differ at position {position}")]
    TokenMismatch { position: usize },
    #[error("profile lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("span {start}..{end} invalid for {len} tokens")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub layer: usize,
    pub aggregated_over_heads: bool,
    /// Token range of the original text inside the templated input.
    pub content: Option<Range<usize>>,
    /// Per-head rows, present only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<Vec<f64>>>,
}

impl AttentionProfile {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Mass on the original-text tokens, or 0 when the text produced none.
    pub fn content_mass(&self) -> f64 {
        self.content
            .clone()
            .map(|r| content_mass(self, r).unwrap_or(0.0))
            .unwrap_or(0.0)
    }
}

/// Outgoing attention of the last position at the last layer, averaged over
/// heads. With `per_head` the individual rows are kept as well.
pub fn final_token_profile<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    vocab: &Vocabulary,
    text: &str,
    template: Option<&PromptTemplate>,
    per_head: bool,
) -> Result<AttentionProfile, Error> {
    if text.trim().is_empty() {
        return Err(AttentionError::EmptyText.into());
    }
    let prepared = prepare(vocab, template, text, PoolingStrategy::new(PoolingKind::Mean))?;
    if prepared.ids.is_empty() {
        return Err(AttentionError::NoTokens.into());
    }
    let out = backbone.forward(&prepared.ids)?;
    let layer = out.attention.layers.len() - 1;
    let maps = out.attention.last_layer();
    let last = prepared.ids.len() - 1;
    let rows: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| m.row(last).iter().map(|w| w.as_f64()).collect())
        .collect();
    let n_heads = rows.len() as f64;
    let weights = (0..=last)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n_heads)
        .collect();
    let tokens = prepared
        .ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
        .collect();
    Ok(AttentionProfile {
        tokens,
        weights,
        layer,
        aggregated_over_heads: true,
        content: prepared.content,
        heads: per_head.then_some(rows),
    })
}

/// `after - before`, token by token.
pub fn profile_diff(before: &AttentionProfile, after: &AttentionProfile) -> Result<Vec<f64>, AttentionError> {
    if before.len() != after.len() || before.tokens.len() != after.tokens.len() {
        return Err(AttentionError::LengthMismatch(before.len(), after.len()));
    }
    if let Some(position) = before.tokens.iter().zip(&after.tokens).position(|(a, b)| a != b) {
        return Err(AttentionError::TokenMismatch { position });
    }
    Ok(after.weights.iter().zip(&before.weights).map(|(a, b)| a - b).collect())
}

pub fn content_mass(profile: &AttentionProfile, span: Range<usize>) -> Result<f64, AttentionError> {
    if span.start > span.end || span.end > profile.len() {
        return Err(AttentionError::BadSpan {
            start: span.start,
            end: span.end,
            len: profile.len(),
        });
    }
    Ok(profile.weights[span].iter().sum())
}

/// Labels recorded in the CSV comment header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileMeta {
    pub checkpoint: String,
    pub template: String,
}

/// `token,weight` rows (plus `head_i` columns when per-head rows are present)
/// after `#` comment lines.
pub fn write_csv<W: Write>(mut out: W, profile: &AttentionProfile, meta: &ProfileMeta) -> Result<(), AttentionError> {
    let io = |e: std::io::Error| AttentionError::Csv(e.into());
    writeln!(out, "# checkpoint: {}", meta.checkpoint).map_err(io)?;
    writeln!(out, "# template: {}", meta.template).map_err(io)?;
    writeln!(out, "# layer: {}", profile.layer).map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let heads = profile.heads.as_deref().unwrap_or(&[]);
    let mut header = vec!["token".to_string(), "weight".to_string()];
    header.extend((0..heads.len()).map(|h| format!("head_{h}")));
    w.write_record(&header)?;
    for (i, (tok, weight)) in profile.tokens.iter().zip(&profile.weights).enumerate() {
        let mut row = vec![tok.clone(), format!("{weight:.9}")];
        row.extend(heads.iter().map(|h| format!("{:.9}", h[i])));
        w.write_record(&row)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.json` side by side.
pub fn export(profile: &AttentionProfile, meta: &ProfileMeta, csv_path: &Path) -> Result<(), Error> {
    let mut buf = Vec::new();
    write_csv(&mut buf, profile, meta)?;
    std::fs::write(csv_path, buf)?;
    let json = serde_json::to_string_pretty(profile)?;
    std::fs::write(csv_path.with_extension("json"), json + "\n")?;
    Ok(())
}
