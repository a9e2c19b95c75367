//! Token buffers: prompts, completions and partially masked sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// A full model input (prompt followed by response) where some positions
/// hold the mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    tokens: Vec<TokenId>,
    masked: Vec<bool>,
    mask_id: TokenId,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<TokenId>, masked: Vec<bool>, mask_id: TokenId) -> Result<Self> {
        if tokens.len() != masked.len() {
            return Err(Error::Sequence(format!(
                "{} tokens but {} mask flags",
                tokens.len(),
                masked.len()
            )));
        }
        for (k, (&tok, &m)) in tokens.iter().zip(&masked).enumerate() {
            if m != (tok == mask_id) {
                return Err(Error::Sequence(format!(
                    "position {k}: mask flag {m} inconsistent with token {tok}"
                )));
            }
        }
        Ok(Self {
            tokens,
            masked,
            mask_id,
        })
    }

    /// Prompt followed by `gen_budget` mask tokens (the fully noised response).
    pub fn all_masked_response(prompt: &[TokenId], gen_budget: usize, mask_id: TokenId) -> Self {
        let mut tokens = prompt.to_vec();
        let mut masked = vec![false; prompt.len()];
        tokens.resize(prompt.len() + gen_budget, mask_id);
        masked.resize(prompt.len() + gen_budget, true);
        Self {
            tokens,
            masked,
            mask_id,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked[pos]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(k, &m)| m.then_some(k))
    }

    /// Write a finalized token into a masked slot.
    pub fn fill(&mut self, pos: usize, token: TokenId) -> Result<()> {
        if !self.masked[pos] {
            return Err(Error::Sequence(format!("position {pos} is already finalized")));
        }
        if token == self.mask_id {
            return Err(Error::Sequence("cannot finalize the mask token".into()));
        }
        self.tokens[pos] = token;
        self.masked[pos] = false;
        Ok(())
    }

    pub fn mask(&mut self, pos: usize) {
        self.tokens[pos] = self.mask_id;
        self.masked[pos] = true;
    }
}

/// Token ids of a query. Never contains the mask id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(Vec<TokenId>);

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, mask_id: TokenId) -> Result<Self> {
        if tokens.contains(&mask_id) {
            return Err(Error::Sequence("prompt contains the mask token".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A fixed-budget generated response. Positions after the first EOS are padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    tokens: Vec<TokenId>,
    effective_len: usize,
}

impl Completion {
    pub fn new(tokens: Vec<TokenId>, eos_id: TokenId, mask_id: TokenId) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Sequence("empty completion".into()));
        }
        if tokens.contains(&mask_id) {
            return Err(Error::Sequence("completion contains the mask token".into()));
        }
        let effective_len = tokens
            .iter()
            .position(|&t| t == eos_id)
            .map_or(tokens.len(), |i| i + 1);
        Ok(Self {
            tokens,
            effective_len,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Index of the first EOS plus one, or the full budget when no EOS was emitted.
    pub fn effective_len(&self) -> usize {
        self.effective_len
    }

    /// Tokens strictly before the first EOS.
    pub fn answer(&self, eos_id: TokenId) -> &[TokenId] {
        let end = self
            .tokens
            .iter()
            .position(|&t| t == eos_id)
            .unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }

    pub fn has_eos(&self, eos_id: TokenId) -> bool {
        self.tokens.contains(&eos_id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_flags() {
        assert!(MaskedSequence::new(vec![0, 3], vec![false, false], 0).is_err());
        assert!(MaskedSequence::new(vec![2, 3], vec![true, false], 0).is_err());
        assert!(MaskedSequence::new(vec![0, 3], vec![true], 0).is_err());
        assert!(MaskedSequence::new(vec![0, 3], vec![true, false], 0).is_ok());
    }

    #[test]
    fn fill_refuses_mask_and_double_write() {
        let mut s = MaskedSequence::all_masked_response(&[5, 6], 2, 0);
        assert_eq!(s.masked_count(), 2);
        assert!(s.fill(2, 0).is_err());
        s.fill(2, 7).unwrap();
        assert!(s.fill(2, 8).is_err());
        assert_eq!(s.masked_positions().collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn completion_effective_len() {
        let c = Completion::new(vec![4, 5, 1, 1], 1, 0).unwrap();
        assert_eq!(c.effective_len(), 3);
        assert_eq!(c.answer(1), &[4, 5]);
        let c = Completion::new(vec![4, 5, 6], 1, 0).unwrap();
        assert_eq!(c.effective_len(), 3);
        assert!(!c.has_eos(1));
        let c = Completion::new(vec![1, 5], 1, 0).unwrap();
        assert_eq!(c.effective_len(), 1);
        assert!(Completion::new(vec![0, 1], 1, 0).is_err());
        assert!(Prompt::new(vec![3, 0], 0).is_err());
    }

    proptest! {
        #[test]
        fn mask_counts_partition_length(tokens in proptest::collection::vec(0u32..6, 1..40)) {
            let masked: Vec<bool> = tokens.iter().map(|&t| t == 0).collect();
            let s = MaskedSequence::new(tokens.clone(), masked, 0).unwrap();
            let unmasked = s.masked().iter().filter(|&&m| !m).count();
            prop_assert_eq!(s.masked_count() + unmasked, s.len());
            for (k, &t) in tokens.iter().enumerate() {
                prop_assert_eq!(s.is_masked(k), t == 0);
            }
        }
    }
}
