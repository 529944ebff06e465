use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vocabulary entry id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Ids of the standard vocabulary built by [`Vocab::standard`].
pub mod sym {
    use super::Token;

    pub const fn digit(d: u8) -> Token {
        Token(d as u32)
    }
    pub const PLUS: Token = Token(10);
    pub const MINUS: Token = Token(11);
    pub const TIMES: Token = Token(12);
    /// Opens a question.
    pub const QUESTION: Token = Token(13);
    /// Closes a question; also the equals sign inside derivations.
    pub const EQUALS: Token = Token(14);
    pub const SEP: Token = Token(15);
    /// Strategy marker: fold the expression left to right.
    pub const DIRECT: Token = Token(16);
    /// Strategy marker: restate every operation before computing it.
    pub const EXPAND: Token = Token(17);
    pub const WAIT: Token = Token(18);
    pub const HOWEVER: Token = Token(19);
    pub const ANSWER: Token = Token(20);
    pub const EOS: Token = Token(21);

    pub const STANDARD_SIZE: usize = 22;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub id: u32,
    pub symbol: String,
}

/// Ordered symbol table. Serialized as a JSON token table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabTable", into = "VocabTable")]
pub struct Vocab {
    symbols: Vec<String>,
    delimiter: Token,
    eos: Token,
}

#[derive(Serialize, Deserialize)]
struct VocabTable {
    tokens: Vec<TokenEntry>,
    delimiter: u32,
    eos: u32,
}

impl TryFrom<VocabTable> for Vocab {
    type Error = Error;

    fn try_from(table: VocabTable) -> Result<Self> {
        let n = table.tokens.len();
        let mut symbols = vec![None; n];
        for entry in table.tokens {
            let slot = symbols
                .get_mut(entry.id as usize)
                .ok_or_else(|| Error::Config(format!("token id {} outside table of {n}", entry.id)))?;
            if slot.is_some() {
                return Err(Error::Config(format!("duplicate token id {}", entry.id)));
            }
            *slot = Some(entry.symbol);
        }
        let symbols = symbols
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config("token table ids are not contiguous".into()))?;
        Vocab::new(symbols, Token(table.delimiter), Token(table.eos))
    }
}

impl From<Vocab> for VocabTable {
    fn from(v: Vocab) -> Self {
        VocabTable {
            tokens: v.symbols.iter().enumerate().map(|(i, s)| TokenEntry { id: i as u32, symbol: s.clone() }).collect(),
            delimiter: v.delimiter.0,
            eos: v.eos.0,
        }
    }
}

impl Vocab {
    pub fn new(symbols: Vec<String>, delimiter: Token, eos: Token) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        let size = symbols.len();
        for t in [delimiter, eos] {
            if t.index() >= size {
                return Err(Error::UnknownToken { id: t.0, vocab_size: size });
            }
        }
        if delimiter == eos {
            return Err(Error::Config("answer delimiter and end-of-sequence must differ".into()));
        }
        Ok(Vocab { symbols, delimiter, eos })
    }

    /// Digits, operators, strategy markers, reflection words, delimiter, EOS.
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.extend(
            ["+", "-", "*", "Q", "=", ";", "<direct>", "<expand>", "wait", "however", "ANS", "EOS"]
                .iter()
                .map(|s| s.to_string()),
        );
        debug_assert_eq!(symbols.len(), sym::STANDARD_SIZE);
        Vocab::new(symbols, sym::ANSWER, sym::EOS).expect("standard vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn delimiter(&self) -> Token {
        self.delimiter
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn symbol(&self, t: Token) -> Option<&str> {
        self.symbols.get(t.index()).map(String::as_str)
    }

    pub fn lookup(&self, symbol: &str) -> Option<Token> {
        self.symbols.iter().position(|s| s == symbol).map(|i| Token(i as u32))
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.size()) {
            Some(t) => Err(Error::UnknownToken { id: t.0, vocab_size: self.size() }),
            None => Ok(()),
        }
    }

    /// Space-separated symbols, for logs and debugging.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).map(str::to_string).unwrap_or_else(|| format!("#{}", t.0)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
