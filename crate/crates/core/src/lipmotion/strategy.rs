//! How the decoder's cross-attention obtains keys and values from a reference clip.

use std::fmt::Debug;
use std::sync::Arc;

use diffarray::Var;

use crate::error::{Error, Result};

/// Encoded reference streams, each `[R, n, d]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EncodedReference {
    pub audio: Option<Var>,
    pub lips: Option<Var>,
}

pub trait StyleAggregation: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_audio_encoder(&self) -> bool;

    fn needs_lip_encoder(&self) -> bool;

    /// Keys and values for cross-attention, or `None` when the decoder should
    /// attend to its own tokens instead.
    fn keys_values(&self, encoded: &EncodedReference) -> Result<Option<(Var, Var)>>;
}

fn missing(what: &str) -> Error {
    Error::Invalid(format!("reference {what} stream was not encoded"))
}

/// Reference audio as keys, reference lips as values.
#[derive(Debug, Clone, Copy)]
pub struct AudioKeyed;

impl StyleAggregation for AudioKeyed {
    fn name(&self) -> &'static str {
        "full"
    }

    fn needs_audio_encoder(&self) -> bool {
        true
    }

    fn needs_lip_encoder(&self) -> bool {
        true
    }

    fn keys_values(&self, encoded: &EncodedReference) -> Result<Option<(Var, Var)>> {
        let k = encoded.audio.ok_or_else(|| missing("audio"))?;
        let v = encoded.lips.ok_or_else(|| missing("lip"))?;
        Ok(Some((k, v)))
    }
}

/// Reference lips as both keys and values; reference audio is unused.
#[derive(Debug, Clone, Copy)]
pub struct LipKeyed;

impl StyleAggregation for LipKeyed {
    fn name(&self) -> &'static str {
        "norefaudio"
    }

    fn needs_audio_encoder(&self) -> bool {
        false
    }

    fn needs_lip_encoder(&self) -> bool {
        true
    }

    fn keys_values(&self, encoded: &EncodedReference) -> Result<Option<(Var, Var)>> {
        let v = encoded.lips.ok_or_else(|| missing("lip"))?;
        Ok(Some((v, v)))
    }
}

/// No reference branch: cross-attention layers act as self-attention.
#[derive(Debug, Clone, Copy)]
pub struct SelfOnly;

impl StyleAggregation for SelfOnly {
    fn name(&self) -> &'static str {
        "noref"
    }

    fn needs_audio_encoder(&self) -> bool {
        false
    }

    fn needs_lip_encoder(&self) -> bool {
        false
    }

    fn keys_values(&self, _: &EncodedReference) -> Result<Option<(Var, Var)>> {
        Ok(None)
    }
}

pub type StrategyFactory = fn() -> Arc<dyn StyleAggregation>;

/// Name-keyed table of aggregation strategies.
#[derive(Debug, Clone)]
pub struct StrategyRegistry {
    entries: Vec<(String, StrategyFactory)>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("full", || Arc::new(AudioKeyed));
        r.register("norefaudio", || Arc::new(LipKeyed));
        r.register("noref", || Arc::new(SelfOnly));
        r
    }

    /// Adds or replaces a strategy.
    pub fn register(&mut self, name: &str, factory: StrategyFactory) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name.to_string(), factory)),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn StyleAggregation>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| Error::Config(format!("unknown aggregation strategy `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names_resolve() {
        let r = StrategyRegistry::builtin();
        assert_eq!(r.names().collect::<Vec<_>>(), ["full", "norefaudio", "noref"]);
        for name in ["full", "norefaudio", "noref"] {
            assert_eq!(r.get(name).unwrap().name(), name);
        }
        assert!(matches!(r.get("nope"), Err(Error::Config(_))));
    }
}
