use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Symbol = usize;

pub const BLANK: Symbol = 0;
pub const SOS: Symbol = 1;
pub const EOS: Symbol = 2;
/// Index of the first real phone.
pub const FIRST_PHONE: Symbol = 3;

pub const BLANK_LABEL: &str = "<blk>";
pub const SOS_LABEL: &str = "<sos>";
pub const EOS_LABEL: &str = "<eos>";

/// Ordered symbol alphabet: `<blk>`, `<sos>`, `<eos>`, then the phones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    symbols: Vec<String>,
    index: HashMap<String, Symbol>,
}

impl PhoneInventory {
    pub fn new<S: AsRef<str>>(phones: &[S]) -> Result<Self> {
        if phones.is_empty() {
            return Err(Error::EmptyInput("phone inventory"));
        }
        let mut symbols: Vec<String> = vec![BLANK_LABEL.into(), SOS_LABEL.into(), EOS_LABEL.into()];
        symbols.extend(phones.iter().map(|p| p.as_ref().to_string()));
        Self::from_symbols(symbols)
    }

    /// Builds from a full symbol list whose first three entries are the reserved symbols.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 4
            || symbols[BLANK] != BLANK_LABEL
            || symbols[SOS] != SOS_LABEL
            || symbols[EOS] != EOS_LABEL
        {
            return Err(Error::invalid(
                "inventory must start with <blk>, <sos>, <eos> followed by at least one phone",
            ));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) || s.contains(':') {
                return Err(Error::invalid(format!("bad phone label {s:?}")));
            }
            if i >= FIRST_PHONE && (s == BLANK_LABEL || s == SOS_LABEL || s == EOS_LABEL) {
                return Err(Error::invalid(format!("reserved symbol {s} used as a phone")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate symbol {s}")));
            }
        }
        Ok(PhoneInventory { symbols, index })
    }

    /// Total symbol count, reserved symbols included.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_phones(&self) -> usize {
        self.symbols.len() - FIRST_PHONE
    }

    pub fn phones(&self) -> std::ops::Range<Symbol> {
        FIRST_PHONE..self.symbols.len()
    }

    pub fn is_phone(&self, s: Symbol) -> bool {
        (FIRST_PHONE..self.symbols.len()).contains(&s)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn label(&self, s: Symbol) -> &str {
        &self.symbols[s]
    }

    pub fn index_of(&self, label: &str) -> Result<Symbol> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownSymbol(label.to_string()))
    }

    pub fn phone_index(&self, label: &str) -> Result<Symbol> {
        let s = self.index_of(label)?;
        if self.is_phone(s) {
            Ok(s)
        } else {
            Err(Error::UnknownSymbol(label.to_string()))
        }
    }

    /// Parses a whitespace-separated phone string.
    pub fn parse(&self, text: &str) -> Result<Vec<Symbol>> {
        text.split_whitespace().map(|p| self.phone_index(p)).collect()
    }

    pub fn render(&self, seq: &[Symbol]) -> String {
        seq.iter()
            .map(|&s| self.label(s))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 over the newline-joined symbol list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Mask over the inventory selecting the phones (and optionally extra symbols).
    pub fn phone_mask(&self, extra: &[Symbol]) -> Vec<bool> {
        (0..self.len())
            .map(|i| self.is_phone(i) || extra.contains(&i))
            .collect()
    }
}
