use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::text::TokenizerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tcnn,
    Atcnn1,
    Atcnn2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tcnn, Variant::Atcnn1, Variant::Atcnn2];

    /// Input channels per tower at every block.
    pub fn channels(self) -> usize {
        match self {
            Variant::Tcnn => 1,
            Variant::Atcnn1 => 2,
            Variant::Atcnn2 => 3,
        }
    }

    pub fn has_attention(self) -> bool {
        self != Variant::Tcnn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tcnn => "tcnn",
            Variant::Atcnn1 => "atcnn1",
            Variant::Atcnn2 => "atcnn2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcnn" => Ok(Variant::Tcnn),
            "atcnn1" => Ok(Variant::Atcnn1),
            "atcnn2" => Ok(Variant::Atcnn2),
            other => Err(Error::Argument(format!(
                "unknown variant '{other}' (expected tcnn, atcnn1 or atcnn2)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Fixed sequence length `s` every text is padded or cut to.
    pub seq_len: usize,
    /// Embedding dimension `l`.
    pub embed_dim: usize,
    /// Convolution window `w`.
    pub window: usize,
    /// Filters per block `d`.
    pub filters: usize,
    /// Number of convolution blocks `L`.
    pub blocks: usize,
    /// `false` runs the two-tower mode over (query, title) only.
    pub use_answer: bool,
    pub seed: u64,
    pub tokenizer: TokenizerMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Tcnn,
            seq_len: 40,
            embed_dim: 50,
            window: 3,
            filters: 50,
            blocks: 2,
            use_answer: true,
            seed: 42,
            tokenizer: TokenizerMode::Whitespace,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if self.window < 1 || self.seq_len < self.window {
            return fail(format!(
                "need seq_len >= window >= 1, got seq_len={} window={}",
                self.seq_len, self.window
            ));
        }
        if self.blocks < 1 || self.filters < 1 || self.embed_dim < 1 {
            return fail(format!(
                "blocks, filters and embed_dim must be positive (got {}, {}, {})",
                self.blocks, self.filters, self.embed_dim
            ));
        }
        Ok(())
    }

    pub fn towers(&self) -> usize {
        if self.use_answer {
            3
        } else {
            2
        }
    }

    /// Height of one channel map entering block `b`.
    pub fn block_input_dim(&self, b: usize) -> usize {
        if b == 0 {
            self.embed_dim
        } else {
            self.filters
        }
    }

    /// Length of the output-layer feature vector.
    pub fn feature_count(&self) -> usize {
        (self.blocks + 1) * (self.towers() - 1)
    }

    /// Canonical `key=value` form, sorted by key.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("variant", self.variant.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("window", self.window.to_string()),
            ("filters", self.filters.to_string()),
            ("blocks", self.blocks.to_string()),
            ("use_answer", self.use_answer.to_string()),
            ("seed", self.seed.to_string()),
            ("tokenizer", self.tokenizer.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads the keys written by [`ModelConfig::to_kv`]; other keys are ignored.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("model config is missing '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("model config '{k}' is not a count")))
        };
        let cfg = ModelConfig {
            variant: get("variant")?.parse()?,
            seq_len: num("seq_len")?,
            embed_dim: num("embed_dim")?,
            window: num("window")?,
            filters: num("filters")?,
            blocks: num("blocks")?,
            use_answer: get("use_answer")?
                .parse()
                .map_err(|_| Error::Data("model config 'use_answer' is not a bool".into()))?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Data("model config 'seed' is not an integer".into()))?,
            tokenizer: get("tokenizer")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
