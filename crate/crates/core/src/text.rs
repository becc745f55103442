//! Tokenization, vocabulary and word embeddings.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Half-width of the uniform embedding initializer.
pub const EMBEDDING_INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenizerMode {
    #[default]
    Whitespace,
    CjkChar,
}

impl TokenizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerMode::Whitespace => "whitespace",
            TokenizerMode::CjkChar => "cjk-char",
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(TokenizerMode::Whitespace),
            "cjk-char" => Ok(TokenizerMode::CjkChar),
            other => Err(Error::Argument(format!("unknown tokenizer mode '{other}'"))),
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF     // hiragana, katakana
        | 0x3400..=0x4DBF   // extension A
        | 0x4E00..=0x9FFF   // unified ideographs
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // compatibility ideographs
        | 0x20000..=0x2FA1F)
}

/// Splits on Unicode whitespace and lowercases. In [`TokenizerMode::CjkChar`]
/// every CJK codepoint additionally becomes its own token.
pub fn tokenize(text: &str, mode: TokenizerMode) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        match mode {
            TokenizerMode::Whitespace => tokens.push(word),
            TokenizerMode::CjkChar => {
                let mut run = String::new();
                for c in word.chars() {
                    if is_cjk(c) {
                        if !run.is_empty() {
                            tokens.push(std::mem::take(&mut run));
                        }
                        tokens.push(c.to_string());
                    } else {
                        run.push(c);
                    }
                }
                if !run.is_empty() {
                    tokens.push(run);
                }
            }
        }
    }
    tokens
}

/// Token to id mapping. Ids are dense; 0 is PAD and 1 is UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized texts keeping tokens seen at least
    /// `min_count` times. Regular tokens get ids in lexicographic order.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for tok in text {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|(t, c)| *c >= min_count.max(1) && *t != PAD_TOKEN && *t != UNK_TOKEN)
                .map(|(t, _)| t.to_string()),
        )
    }

    fn from_tokens<I: IntoIterator<Item = String>>(regular: I) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(regular);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: PAD and UNK are present in every vocabulary.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Serialized form: one `token<TAB>id` line per entry.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                line: n + 1,
                message: message.to_string(),
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| parse_err("id is not an integer"))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        for (expected, (id, _)) in entries.iter().enumerate() {
            if *id != expected {
                return Err(Error::Data(format!(
                    "vocabulary ids are not dense: expected {expected}, found {id}"
                )));
            }
        }
        if entries.len() < 2 || entries[0].1 != PAD_TOKEN || entries[1].1 != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD_TOKEN} (0) and {UNK_TOKEN} (1)"
            )));
        }
        Ok(Self::from_tokens(
            entries.into_iter().skip(2).map(|(_, t)| t),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        hex_digest(self.to_tsv().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Maps tokens to ids, cuts to the first `s` and right-pads with PAD.
pub fn encode(tokens: &[String], vocab: &Vocabulary, s: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().take(s).map(|t| vocab.id(t)).collect();
    ids.resize(s, PAD_ID);
    ids
}

/// Embedding matrix with one `l`-dimensional column per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Mat,
}

impl EmbeddingTable {
    /// Uniform `±0.1` initialization; the PAD column is zero.
    pub fn random(dim: usize, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let mut weights = Mat::zeros(dim, vocab_size);
        for r in 0..dim {
            for c in 1..vocab_size {
                weights[(r, c)] = rng.gen_range(-EMBEDDING_INIT_RANGE..EMBEDDING_INIT_RANGE);
            }
        }
        EmbeddingTable { weights }
    }

    /// Random initialization overwritten by vectors from a
    /// `token v1 v2 … vl` text file wherever the token is in `vocab`.
    /// Returns the table and the number of tokens found in the file.
    pub fn with_pretrained(
        dim: usize,
        vocab: &Vocabulary,
        path: &Path,
        seed: u64,
    ) -> Result<(Self, usize)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Self::random(dim, vocab.len(), &mut rng);
        let mut found = 0;
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let values = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if let Some(id) = vocab.get(tok).filter(|&id| id != PAD_ID) {
                for (r, v) in values.into_iter().enumerate() {
                    table.weights[(r, id)] = v;
                }
                found += 1;
            }
        }
        Ok((table, found))
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.cols()
    }

    /// Mean of the embedding columns of non-PAD ids; zero vector if none.
    pub fn mean_vector(&self, ids: &[usize]) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim()];
        let mut n = 0usize;
        for &id in ids.iter().filter(|&&id| id != PAD_ID && id < self.vocab_size()) {
            for (r, s) in sum.iter_mut().enumerate() {
                *s += self.weights[(r, id)];
            }
            n += 1;
        }
        if n > 0 {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
        sum
    }
}

/// Looks up one embedding column per id, giving an `l × s` map.
pub fn embed(ids: &[usize], table: &EmbeddingTable) -> Result<Mat> {
    let v = table.vocab_size();
    if let Some(bad) = ids.iter().find(|&&id| id >= v) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of size {v}"
        )));
    }
    let mut out = Mat::zeros(table.dim(), ids.len());
    for r in 0..table.dim() {
        let src = table.weights.row(r);
        for (j, &id) in ids.iter().enumerate() {
            out[(r, j)] = src[id];
        }
    }
    Ok(out)
}

/// Scatter-adds `d_map` columns into `grad` at the looked-up ids. The PAD
/// column never receives gradient.
pub fn embed_backward(ids: &[usize], d_map: &Mat, grad: &mut Mat) {
    for r in 0..d_map.rows() {
        for (j, &id) in ids.iter().enumerate() {
            if id != PAD_ID {
                grad[(r, id)] += d_map[(r, j)];
            }
        }
    }
}
