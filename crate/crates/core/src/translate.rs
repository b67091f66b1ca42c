//! The predictor interface shared by difficulty scoring and recovery checks.

use crate::error::{Error, Result};

/// Maps source token sequences to hypothesis token sequences.
///
/// Implementations must be deterministic; a failure on one input is reported
/// as [`Error::Decode`] carrying that input's index within the batch.
pub trait Translator {
    fn translate_batch(&self, sources: &[&[String]]) -> Result<Vec<Vec<String>>>;
}

impl<F> Translator for F
where
    F: Fn(&[String]) -> Result<Vec<String>>,
{
    fn translate_batch(&self, sources: &[&[String]]) -> Result<Vec<Vec<String>>> {
        sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                self(s).map_err(|e| Error::Decode {
                    id: i,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

/// Translates `sources` whose example ids are `ids`, rewriting batch-local
/// decode failures to carry the example id.
pub fn translate_ids<T: Translator + ?Sized>(
    translator: &T,
    ids: &[usize],
    sources: &[&[String]],
) -> Result<Vec<Vec<String>>> {
    let out = translator.translate_batch(sources).map_err(|e| match e {
        Error::Decode { id, message } => Error::Decode {
            id: ids.get(id).copied().unwrap_or(id),
            message,
        },
        other => other,
    })?;
    if out.len() != sources.len() {
        return Err(Error::Argument(format!(
            "translator returned {} outputs for {} inputs",
            out.len(),
            sources.len()
        )));
    }
    Ok(out)
}
