//! Word-level tokenizer with a frequency-built vocabulary.
//!
//! Text is lowercased and split on whitespace; every ASCII punctuation
//! character becomes its own token. Decoding joins tokens with single spaces,
//! so `decode(encode(t)) == normalize(t)` for in-vocabulary text.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const N_SPECIAL: usize = 3;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_size must be at least {min} (got {got})")]
    MaxSizeTooSmall { min: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids for one text. `content` marks the token range holding the
/// caller's original text when the ids came from a prompt-wrapped input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub content: Option<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends the end-of-sequence id and returns its position.
    pub fn push_eos(&mut self) -> usize {
        self.ids.push(EOS_ID);
        self.ids.len() - 1
    }
}

#[inline]
fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Splits `text` into lowercased tokens along with their byte ranges in `text`.
pub fn pre_tokenize(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<(String, Range<usize>)>, start: usize, end: usize| {
        out.push((text[start..end].to_lowercase(), start..end));
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_split_punct(c) {
            if let Some(s) = word_start.take() {
                flush(&mut out, s, i);
            }
            if is_split_punct(c) {
                flush(&mut out, i, i + c.len_utf8());
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        flush(&mut out, s, text.len());
    }
    out
}

/// Canonical form: lowercased tokens separated by single spaces. Idempotent.
pub fn normalize(text: &str) -> String {
    pre_tokenize(text)
        .into_iter()
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Keeps the `max_size - 3` most frequent tokens; ties broken
    /// lexicographically. Regular ids follow frequency rank.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        if max_size < N_SPECIAL + 1 {
            return Err(TokenizerError::MaxSizeTooSmall {
                min: N_SPECIAL + 1,
                got: max_size,
            });
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for (tok, _) in pre_tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for special in [PAD, UNK, EOS] {
            counts.remove(special);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_size - N_SPECIAL);

        let tokens = [PAD, UNK, EOS]
            .into_iter()
            .map(str::to_string)
            .chain(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let id_to_token: Vec<String> = tokens.into_iter().collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str, TokenizerError> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Out-of-vocabulary tokens map to `<unk>`. No EOS is appended.
    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence {
            ids: self.encode_with_offsets(text).0,
            content: None,
        }
    }

    /// Ids together with each token's byte range in `text`.
    pub fn encode_with_offsets(&self, text: &str) -> (Vec<u32>, Vec<Range<usize>>) {
        pre_tokenize(text)
            .into_iter()
            .map(|(tok, span)| (self.id(&tok).unwrap_or(UNK_ID), span))
            .unzip()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let toks = ids
            .iter()
            .map(|&id| self.token(id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(toks.join(" "))
    }

    /// `<id>\t<token>` per line, sorted by id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            s.push_str(&format!("{i}\t{t}\n"));
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let (id, tok) = line.split_once('\t').ok_or_else(|| TokenizerError::Parse {
                line: line_no,
                msg: "expected <id>\\t<token>".into(),
            })?;
            let id: usize = id.parse().map_err(|_| TokenizerError::Parse {
                line: line_no,
                msg: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(TokenizerError::Parse {
                    line: line_no,
                    msg: format!("ids must be contiguous from 0, expected {}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL] != [PAD, UNK, EOS] {
            return Err(TokenizerError::Parse {
                line: 1,
                msg: "first three entries must be <pad>, <unk>, <eos>".into(),
            });
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(TokenizerError::Parse {
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}
