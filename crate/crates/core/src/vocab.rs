//! Token vocabularies with fixed reserved ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CorpusError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// CTC blank; present only in gloss vocabularies.
pub const BLANK: u32 = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BLANK_TOKEN: &str = "<blk>";

/// A bijective token <-> id mapping. Ids 0..=3 are PAD/BOS/EOS/UNK; gloss
/// vocabularies additionally reserve id 4 for the CTC blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    has_blank: bool,
}

impl Vocabulary {
    /// Builds a vocabulary from regular tokens, prepending the reserved ones.
    pub fn new<I, S>(regular: I, with_blank: bool) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        if with_blank {
            tokens.push(BLANK_TOKEN.to_string());
        }
        let reserved = tokens.len();
        for tok in regular {
            tokens.push(tok.into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() && i >= reserved {
                return Err(CorpusError::DuplicateToken(tok.clone()).into());
            }
        }
        Ok(Self { tokens, index, has_blank: with_blank })
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn has_blank(&self) -> bool {
        self.has_blank
    }

    /// Id of the first non-reserved token.
    pub fn first_regular(&self) -> u32 {
        if self.has_blank {
            BLANK + 1
        } else {
            UNK + 1
        }
    }

    /// Number of non-reserved tokens.
    pub fn regular_len(&self) -> usize {
        self.tokens.len() - self.first_regular() as usize
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        id < self.first_regular()
    }

    /// Ids of all non-reserved tokens, in order.
    pub fn regular_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.first_regular()..self.tokens.len() as u32
    }

    /// Dense class index of a regular token (used by the CTC lattice, where
    /// reserved ids have no columns).
    pub fn class_index(&self, id: u32) -> Option<u32> {
        (id >= self.first_regular() && (id as usize) < self.tokens.len())
            .then(|| id - self.first_regular())
    }

    /// Inverse of [`Vocabulary::class_index`].
    pub fn id_of_class(&self, class: u32) -> u32 {
        self.first_regular() + class
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.token(id).unwrap_or(UNK_TOKEN));
        }
        out
    }

    /// Writes the full ordered token list, one token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| CorpusError::io(path, e))?;
        Ok(())
    }

    /// Reads an ordered token list and checks the reserved prefix.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let lines: Vec<&str> = body.lines().collect();
        let expected = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if lines.len() < expected.len() || lines[..4] != expected {
            return Err(CorpusError::BadVocabHeader(path.display().to_string()).into());
        }
        let has_blank = lines.get(4) == Some(&BLANK_TOKEN);
        let first = if has_blank { 5 } else { 4 };
        Self::new(lines[first..].iter().map(|s| s.to_string()), has_blank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new(["a", "b"], true).unwrap();
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.id(BOS_TOKEN), Some(BOS));
        assert_eq!(v.id(EOS_TOKEN), Some(EOS));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK));
        assert_eq!(v.id(BLANK_TOKEN), Some(BLANK));
        assert_eq!(v.first_regular(), 5);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.regular_len(), 2);
    }

    #[test]
    fn lookup_roundtrip() {
        let v = Vocabulary::new(["x", "y", "z"], false).unwrap();
        for id in 0..v.len() as u32 {
            let tok = v.token(id).unwrap();
            assert_eq!(v.id(tok), Some(id));
        }
    }

    #[test]
    fn duplicate_token_rejected() {
        assert!(Vocabulary::new(["a", "a"], false).is_err());
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocabulary::new(["a"], false).unwrap();
        assert_eq!(v.id_or_unk("nope"), UNK);
    }

    #[test]
    fn file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("vocab-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gloss.vocab");
        let v = Vocabulary::new(["a", "b", "c"], true).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }
}
