//! Token identities and the sequence state evolved by the denoising loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Vocabulary bounds plus the two special tokens the engine cares about.
///
/// Token semantics are otherwise opaque: the decoder only ever asks
/// "is this MASK?" and "is this EOS?".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vocabulary {
    pub size: u32,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: u32, mask_id: TokenId, eos_id: TokenId) -> Result<Self> {
        let vocab = Self {
            size,
            mask_id,
            eos_id,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("vocabulary size must be positive".into()));
        }
        if self.mask_id == self.eos_id {
            return Err(Error::Config(format!(
                "mask_id and eos_id must differ (both {})",
                self.mask_id
            )));
        }
        if self.mask_id >= self.size || self.eos_id >= self.size {
            return Err(Error::Config(format!(
                "special tokens must be < size {} (mask_id={}, eos_id={})",
                self.size, self.mask_id, self.eos_id
            )));
        }
        Ok(())
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }
}

impl Default for Vocabulary {
    /// LLaDA-family special token layout.
    fn default() -> Self {
        Self {
            size: 126_464,
            mask_id: 126_336,
            eos_id: 126_081,
        }
    }
}

/// One position of the generation region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Decoded(TokenId),
    Masked,
}

impl Slot {
    pub fn is_masked(&self) -> bool {
        matches!(self, Slot::Masked)
    }

    pub fn token(&self) -> Option<TokenId> {
        match self {
            Slot::Decoded(t) => Some(*t),
            Slot::Masked => None,
        }
    }
}

/// Prompt plus the mutable generation region.
///
/// The region only changes through the methods below, which keep unmasking
/// monotone: a decoded slot is never re-masked and never removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceState {
    prompt: Vec<TokenId>,
    gen: Vec<Slot>,
}

impl SequenceState {
    /// A fresh state with `l_init` masked slots after `prompt`.
    pub fn new(prompt: &[TokenId], l_init: usize, vocab: &Vocabulary) -> Result<Self> {
        if l_init < 1 {
            return Err(Error::Precondition(
                "initial generation length must be at least 1".into(),
            ));
        }
        if let Some(bad) = prompt.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::Precondition(format!(
                "prompt token {bad} outside vocabulary of size {}",
                vocab.size
            )));
        }
        Ok(Self {
            prompt: prompt.to_vec(),
            gen: vec![Slot::Masked; l_init],
        })
    }

    /// Rebuild a state from explicit parts, e.g. in tests or when replaying.
    pub fn from_parts(prompt: Vec<TokenId>, gen: Vec<Slot>) -> Self {
        Self { prompt, gen }
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn gen(&self) -> &[Slot] {
        &self.gen
    }

    /// Current generation-region length.
    pub fn l_cur(&self) -> usize {
        self.gen.len()
    }

    pub fn remaining_mask_count(&self) -> usize {
        self.gen.iter().filter(|s| s.is_masked()).count()
    }

    pub fn decoded_count(&self) -> usize {
        self.gen.len() - self.remaining_mask_count()
    }

    pub fn contains_mask(&self) -> bool {
        self.gen.iter().any(Slot::is_masked)
    }

    pub fn masked_positions(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        self.gen
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_masked())
            .map(|(i, _)| i)
    }

    /// Length of the maximal run of masked slots at the end of the region.
    pub fn trailing_mask_count(&self) -> usize {
        self.gen.iter().rev().take_while(|s| s.is_masked()).count()
    }

    /// Full token sequence with `mask_id` substituted at masked slots.
    pub fn tokens_with_masks(&self, mask_id: TokenId) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.prompt.len() + self.gen.len());
        out.extend_from_slice(&self.prompt);
        out.extend(self.gen.iter().map(|s| s.token().unwrap_or(mask_id)));
        out
    }

    /// Decoded generation tokens; `None` while any slot is still masked.
    pub fn decoded_tokens(&self) -> Option<Vec<TokenId>> {
        self.gen.iter().map(Slot::token).collect()
    }

    /// Write `token` into a masked slot.
    pub fn commit(&mut self, pos: usize, token: TokenId) -> Result<()> {
        match self.gen.get(pos) {
            Some(Slot::Masked) => {
                self.gen[pos] = Slot::Decoded(token);
                Ok(())
            }
            Some(Slot::Decoded(_)) => Err(Error::Invariant(format!(
                "attempt to overwrite decoded slot {pos}"
            ))),
            None => Err(Error::Invariant(format!(
                "commit position {pos} outside region of length {}",
                self.gen.len()
            ))),
        }
    }

    pub fn append_masks(&mut self, n: usize) {
        self.gen.extend(std::iter::repeat_n(Slot::Masked, n));
    }

    /// Drop `n` trailing slots. Every dropped slot must be masked.
    pub fn remove_trailing_masks(&mut self, n: usize) -> Result<()> {
        let trailing = self.trailing_mask_count();
        if n > trailing {
            return Err(Error::Invariant(format!(
                "contraction of {n} would delete decoded content (only {trailing} trailing masks)"
            )));
        }
        if n >= self.gen.len() {
            return Err(Error::Invariant(format!(
                "contraction of {n} would empty a region of length {}",
                self.gen.len()
            )));
        }
        self.gen.truncate(self.gen.len() - n);
        Ok(())
    }
}

/// Convenience wrapper matching the operation name used across the crate.
pub fn new_sequence(
    prompt: &[TokenId],
    l_init: usize,
    vocab: &Vocabulary,
) -> Result<SequenceState> {
    SequenceState::new(prompt, l_init, vocab)
}

pub fn remaining_mask_count(state: &SequenceState) -> usize {
    state.remaining_mask_count()
}
