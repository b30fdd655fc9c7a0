//! The frozen 64-word vocabulary shared by the text encoder and the language model.

use std::collections::HashMap;
use std::sync::LazyLock;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const EMB_BEGIN: TokenId = 4;
pub const EMB_END: TokenId = 5;
pub const HUMAN: TokenId = 6;
pub const ASSISTANT: TokenId = 7;

pub const VOCAB_SIZE: usize = 64;
pub const N_OBJECTS: usize = 12;
pub const N_ATTRIBUTES: usize = 6;

const FIRST_OBJECT: TokenId = 8;
const FIRST_ATTRIBUTE: TokenId = FIRST_OBJECT + N_OBJECTS;

/// `id<TAB>word` table, one entry per line.
pub const VOCAB_TSV: &str = include_str!("../../assets/vocab.tsv");

pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

static VOCAB: LazyLock<Vocab> =
    LazyLock::new(|| Vocab::parse(VOCAB_TSV).expect("bundled vocabulary is well formed"));

impl Vocab {
    pub fn get() -> &'static Vocab {
        &VOCAB
    }

    pub fn parse(table: &str) -> Result<Vocab, String> {
        let mut words = Vec::new();
        let mut ids = HashMap::new();
        for (n, line) in table.lines().enumerate() {
            let (id, word) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: missing tab", n + 1))?;
            let id: usize = id.parse().map_err(|_| format!("line {}: bad id", n + 1))?;
            if id != words.len() {
                return Err(format!("line {}: ids must be dense and ordered", n + 1));
            }
            if ids.insert(word.to_string(), id).is_some() {
                return Err(format!("line {}: duplicate word `{word}`", n + 1));
            }
            words.push(word.to_string());
        }
        if words.len() != VOCAB_SIZE {
            return Err(format!(
                "expected {VOCAB_SIZE} entries, found {}",
                words.len()
            ));
        }
        Ok(Vocab { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rendered `id<TAB>word` table.
    pub fn to_tsv(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{i}\t{w}\n"))
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<TokenId> {
    Vocab::get().tokenize(text)
}

pub fn detokenize(ids: &[TokenId]) -> String {
    Vocab::get().detokenize(ids)
}

pub fn object_token(object: usize) -> TokenId {
    assert!(object < N_OBJECTS, "object id {object} out of range");
    FIRST_OBJECT + object
}

pub fn attribute_token(attribute: usize) -> TokenId {
    assert!(
        attribute < N_ATTRIBUTES,
        "attribute id {attribute} out of range"
    );
    FIRST_ATTRIBUTE + attribute
}

pub fn object_of(token: TokenId) -> Option<usize> {
    (FIRST_OBJECT..FIRST_ATTRIBUTE)
        .contains(&token)
        .then(|| token - FIRST_OBJECT)
}

pub fn attribute_of(token: TokenId) -> Option<usize> {
    (FIRST_ATTRIBUTE..FIRST_ATTRIBUTE + N_ATTRIBUTES)
        .contains(&token)
        .then(|| token - FIRST_ATTRIBUTE)
}

pub fn object_word(object: usize) -> &'static str {
    Vocab::get().word(object_token(object))
}

pub fn attribute_word(attribute: usize) -> &'static str {
    Vocab::get().word(attribute_token(attribute))
}
