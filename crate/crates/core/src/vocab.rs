//! Task-defined token vocabularies.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// The two reserved ids every sampler and loss needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub mask_id: TokenId,
    pub eos_id: TokenId,
}

/// An ordered set of unique token strings with designated mask and EOS ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mask_id: TokenId,
    eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, mask_id: TokenId, eos_id: TokenId) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Vocabulary("empty token list".into()));
        }
        if mask_id == eos_id {
            return Err(Error::Vocabulary("mask_id and eos_id must differ".into()));
        }
        let size = tokens.len();
        if mask_id as usize >= size || eos_id as usize >= size {
            return Err(Error::Vocabulary(format!(
                "special ids (mask={mask_id}, eos={eos_id}) out of range for size {size}"
            )));
        }
        let mut index = HashMap::with_capacity(size);
        for (i, tok) in tokens.iter().enumerate() {
            if tok.contains('\n') || tok.is_empty() {
                return Err(Error::Vocabulary(format!("token {i} is empty or multi-line")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            mask_id,
            eos_id,
        })
    }

    pub fn specials(&self) -> Specials {
        Specials {
            mask_id: self.mask_id,
            eos_id: self.eos_id,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Look up a whitespace-free sequence of token strings.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token {:?}", t.as_ref())))
            })
            .collect()
    }

    /// Render ids as space-separated token strings; unknown ids print as `#<id>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) => t.to_string(),
                None => format!("#{id}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Text form: `mask_id=<int>`, `eos_id=<int>`, then one token per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mask_id={}", self.mask_id);
        let _ = writeln!(out, "eos_id={}", self.eos_id);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<TokenId> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Vocabulary(format!("missing header {key}")))?;
            let value = line
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .ok_or_else(|| Error::Vocabulary(format!("expected `{key}=<int>`, got {line:?}")))?;
            value
                .trim()
                .parse()
                .map_err(|_| Error::Vocabulary(format!("bad integer in {line:?}")))
        };
        let mask_id = header("mask_id")?;
        let eos_id = header("eos_id")?;
        let tokens = lines.map(str::to_string).collect();
        Self::new(tokens, mask_id, eos_id)
    }
}
