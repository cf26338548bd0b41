//! Word-level tokens for names and categories, character tokens for numbers.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{SerializedExample, CLAUSE_SEPARATOR, PAIR_SEPARATOR};
use crate::table::{ColumnKind, Schema};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const IS_WORD: &str = "is";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Unk,
    /// Prompt word, column name, "is", or a whole categorical value.
    Word(String),
    /// One character of a number: a digit, '.' or '-'.
    Digit(char),
    Comma,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("<pad>"),
            Token::Bos => f.write_str("<bos>"),
            Token::Eos => f.write_str("<eos>"),
            Token::Unk => f.write_str("<unk>"),
            Token::Word(w) => f.write_str(w),
            Token::Digit(c) => write!(f, "{c}"),
            Token::Comma => f.write_str(","),
        }
    }
}

/// True for values rendered as a run of [`Token::Digit`]s.
pub fn is_numeric_text(value: &str) -> bool {
    !value.is_empty()
        && value.chars().all(|c| c.is_ascii_digit() || c == '.' || c == '-')
        && value.chars().any(|c| c.is_ascii_digit())
}

fn push_value(value: &str, out: &mut Vec<Token>) {
    if value.is_empty() {
        return;
    }
    if is_numeric_text(value) {
        out.extend(value.chars().map(Token::Digit));
    } else {
        out.push(Token::Word(value.to_string()));
    }
}

/// Tokens of a clause body such as "income is high, age is 30".
pub fn body_tokens(body: &str) -> Vec<Token> {
    let mut out = Vec::new();
    if body.is_empty() {
        return out;
    }
    for (k, part) in body.split(CLAUSE_SEPARATOR).enumerate() {
        if k > 0 {
            out.push(Token::Comma);
        }
        match part.split_once(PAIR_SEPARATOR) {
            Some((name, value)) => {
                out.push(Token::Word(name.to_string()));
                out.push(Token::Word(IS_WORD.to_string()));
                push_value(value, &mut out);
            }
            None => out.extend(part.split_whitespace().map(|w| Token::Word(w.to_string()))),
        }
    }
    out
}

/// Splits `text` into prompt tokens and body tokens at `prompt_char_len`.
pub fn tokenize(text: &str, prompt_char_len: usize) -> (Vec<Token>, usize) {
    let (prompt, body) = match (text.get(..prompt_char_len), text.get(prompt_char_len..)) {
        (Some(p), Some(b)) => (p, b),
        _ => ("", text),
    };
    let mut tokens: Vec<Token> = prompt
        .split_whitespace()
        .map(|w| Token::Word(w.to_string()))
        .collect();
    let n_prompt = tokens.len();
    tokens.extend(body_tokens(body.trim()));
    (tokens, n_prompt)
}

/// Bijection between tokens and ids; ids 0..4 are reserved.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<Token>", into = "Vec<Token>")]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Token, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl From<Vec<Token>> for Vocab {
    fn from(tokens: Vec<Token>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<Token> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        Vec::from([Token::Pad, Token::Bos, Token::Eos, Token::Unk]).into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 4
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn id(&self, token: &Token) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.id(&Token::Word(word.to_string()))
    }

    pub fn comma_id(&self) -> Option<u32> {
        self.id(&Token::Comma)
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn insert(&mut self, token: Token) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Adds every token a schema can produce: names, "is", ",", number
    /// characters and categorical values.
    pub fn add_schema(&mut self, schema: &Schema) {
        for c in schema.columns() {
            self.insert(Token::Word(c.name.clone()));
        }
        self.insert(Token::Word(IS_WORD.into()));
        self.insert(Token::Comma);
        for ch in ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '.', '-'] {
            self.insert(Token::Digit(ch));
        }
        for c in schema.columns() {
            if c.kind() == ColumnKind::Categorical {
                let mut toks = Vec::new();
                for v in c.categories() {
                    push_value(v, &mut toks);
                }
                for t in toks {
                    self.insert(t);
                }
            }
        }
    }

    /// Appends unseen tokens in order of first appearance; existing ids are
    /// never renumbered.
    pub fn extend(&mut self, sentences: &[SerializedExample], schema: &Schema) {
        self.add_schema(schema);
        for ex in sentences {
            let (toks, _) = tokenize(&ex.text, ex.prompt_char_len);
            for t in toks {
                self.insert(t);
            }
        }
    }

    fn ids_of(&self, tokens: &[Token], unk_count: &mut usize) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    *unk_count += 1;
                    UNK
                })
            })
            .collect()
    }

    /// BOS + tokens of `text` (no EOS), optionally ending with a comma.
    /// Returns ids and the number of prompt tokens.
    pub fn prefix_ids(&self, text: &str, prompt_char_len: usize, trailing_comma: bool) -> (Vec<u32>, usize) {
        let (mut toks, n_prompt) = tokenize(text, prompt_char_len);
        if trailing_comma {
            toks.push(Token::Comma);
        }
        let mut unk = 0;
        let mut ids = Vec::with_capacity(toks.len() + 1);
        ids.push(BOS);
        ids.extend(self.ids_of(&toks, &mut unk));
        (ids, n_prompt)
    }
}

pub fn build_vocab(sentences: &[SerializedExample], schema: &Schema) -> Vocab {
    let mut v = Vocab::new();
    v.extend(sentences, schema);
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    /// 0 on BOS and prompt positions, 1 on body positions and EOS.
    pub loss_mask: Vec<u8>,
    pub unk_count: usize,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

pub fn encode(ex: &SerializedExample, vocab: &Vocab) -> EncodedExample {
    let (toks, n_prompt) = tokenize(&ex.text, ex.prompt_char_len);
    let mut unk_count = 0;
    let mut ids = Vec::with_capacity(toks.len() + 2);
    ids.push(BOS);
    ids.extend(vocab.ids_of(&toks, &mut unk_count));
    ids.push(EOS);
    let mut loss_mask = vec![0u8; 1 + n_prompt];
    loss_mask.resize(ids.len(), 1);
    EncodedExample {
        ids,
        loss_mask,
        unk_count,
    }
}

/// Inverse of [`encode`] up to the terminal newline: words are joined by
/// single spaces, number characters concatenate, commas attach left.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut out = String::new();
    let mut prev_digit = false;
    for &id in ids {
        let tok = vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
        match tok {
            Token::Pad | Token::Bos => continue,
            Token::Eos => break,
            Token::Comma => {
                out.push(',');
                prev_digit = false;
            }
            Token::Digit(c) => {
                if !prev_digit && !out.is_empty() {
                    out.push(' ');
                }
                out.push(*c);
                prev_digit = true;
            }
            Token::Word(_) | Token::Unk => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(&tok.to_string());
                prev_digit = false;
            }
        }
    }
    Ok(out)
}
