use std::collections::HashMap;

use crate::curriculum::think_words;
use crate::error::{Error, Result};
use crate::grammar::SPECIAL_TOKENS;
use crate::world::TaskKind;

/// Word-level vocabulary: the special tokens first, then the base words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for s in SPECIAL_TOKENS {
            if !index.contains_key(s) {
                return Err(Error::Config(format!("vocabulary lacks {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every word the task and chain templates can produce.
    pub fn standard() -> Self {
        let mut words: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let base = TaskKind::template_words()
            .iter()
            .copied()
            .chain(TaskKind::answer_words())
            .chain(think_words().iter().copied());
        for w in base {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        Self::from_tokens(words).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<u32>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| self.token(i).ok_or_else(|| Error::UnknownToken(format!("#{i}"))))
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_round_trip() {
        let v = Vocab::standard();
        let mut seen = std::collections::HashSet::new();
        for s in SPECIAL_TOKENS {
            let id = v.id(s).unwrap();
            assert!(seen.insert(id));
            assert_eq!(v.token(id), Some(s));
        }
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t).unwrap(), i as u32);
        }
    }

    #[test]
    fn unknown_words_fail() {
        let v = Vocab::standard();
        assert!(matches!(v.id("zebra"), Err(Error::UnknownToken(_))));
        assert!(Vocab::from_tokens(["a", "b"]).is_err());
    }
}
