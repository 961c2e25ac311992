//! Text to vector: template, tokenize, forward, pool.

use std::marker::PhantomData;
use std::ops::Range;

use rayon::prelude::*;

use crate::model::Backbone;
use crate::pooling::{pool_masked, Embedding, PoolingStrategy};
use crate::prompts::PromptTemplate;
use crate::tensor::Matrix;
use crate::tokenizer::{Vocabulary, EOS_ID};
use crate::{Error, Scalar};

/// Model input for one text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub ids: Vec<u32>,
    /// Tokens of the original text inside the (possibly prompted) input.
    pub content: Option<Range<usize>>,
    pub eos_position: Option<usize>,
    /// The string that was tokenized.
    pub input: String,
}

/// Applies the template and tokenizes; appends EOS when the pooling
/// strategy reads it.
pub fn prepare(
    vocab: &Vocabulary,
    template: Option<&PromptTemplate>,
    text: &str,
    pooling: PoolingStrategy,
) -> Result<Prepared, Error> {
    let (input, span) = match template {
        Some(t) => {
            let p = t.apply(text)?;
            (p.text, p.content_span)
        }
        None => (text.to_string(), 0..text.len()),
    };
    let (mut ids, offsets) = vocab.encode_with_offsets(&input);
    let inside: Vec<usize> = offsets
        .iter()
        .enumerate()
        .filter(|(_, r)| r.start >= span.start && r.end <= span.end)
        .map(|(i, _)| i)
        .collect();
    let content = match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) => Some(a..b + 1),
        _ => None,
    };
    let eos_position = if pooling.needs_eos() {
        ids.push(EOS_ID);
        Some(ids.len() - 1)
    } else {
        None
    };
    Ok(Prepared {
        ids,
        content,
        eos_position,
        input,
    })
}

pub struct Encoder<'a, T: Scalar, B: Backbone<T> + ?Sized> {
    backbone: &'a B,
    vocab: &'a Vocabulary,
    template: Option<&'a PromptTemplate>,
    pooling: PoolingStrategy,
    _scalar: PhantomData<T>,
}

impl<'a, T: Scalar, B: Backbone<T> + ?Sized> Encoder<'a, T, B> {
    pub fn new(
        backbone: &'a B,
        vocab: &'a Vocabulary,
        template: Option<&'a PromptTemplate>,
        pooling: PoolingStrategy,
    ) -> Self {
        Self {
            backbone,
            vocab,
            template,
            pooling,
            _scalar: PhantomData,
        }
    }

    pub fn pooling(&self) -> PoolingStrategy {
        self.pooling
    }

    pub fn prepare(&self, text: &str) -> Result<Prepared, Error> {
        prepare(self.vocab, self.template, text, self.pooling)
    }

    pub fn embed(&self, text: &str) -> Result<Embedding<T>, Error> {
        let p = self.prepare(text)?;
        let out = self.backbone.forward(&p.ids)?;
        Ok(pool_masked(
            &out.hidden,
            self.pooling,
            p.eos_position,
            p.content.as_ref(),
        )?)
    }

    /// One row per text, in input order; work is spread over the rayon pool.
    pub fn embed_all<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Matrix<T>, Error> {
        let rows = texts
            .par_iter()
            .map(|t| self.embed(t.as_ref()).map(|e| e.values))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.backbone.config().d_model));
        }
        Ok(Matrix::from_rows(&rows))
    }
}
