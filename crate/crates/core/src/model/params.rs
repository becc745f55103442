use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionWeights;
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::text::{EmbeddingTable, PAD_ID, Vocabulary};

/// Parameters of one convolution block. The filter is shared by all towers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `d × (channels · d_in · w)`
    pub filter: Mat,
    /// `d × 1`
    pub bias: Mat,
    /// Present for the attention variants.
    pub attention: Option<AttentionWeights>,
}

/// Every trainable tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub blocks: Vec<BlockParams>,
    /// `1 × feature_count`
    pub output_weights: Mat,
    /// `1 × 1`
    pub output_bias: Mat,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Mat::from_vec(rows, cols, data).expect("glorot shape")
}

impl ModelParams {
    /// Seeded initialization: embeddings uniform in ±0.1 (PAD zero), filters
    /// and attention weights Glorot-uniform, biases and output layer zero.
    pub fn init(cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embeddings = EmbeddingTable::random(cfg.embed_dim, vocab_size, &mut rng);
        Ok(Self::init_blocks(cfg, embeddings, &mut rng))
    }

    /// Starting point for training: [`ModelParams::init`], or pretrained word
    /// vectors for the embedding table when a file is given.
    pub fn initial(cfg: &ModelConfig, vocab: &Vocabulary, pretrained: Option<&Path>) -> Result<Self> {
        match pretrained {
            Some(path) => {
                let (table, _) = EmbeddingTable::with_pretrained(cfg.embed_dim, vocab, path, cfg.seed)?;
                Self::with_embeddings(cfg, table)
            }
            None => Self::init(cfg, vocab.len()),
        }
    }

    /// Like [`ModelParams::init`] but with a caller-provided embedding table.
    pub fn with_embeddings(cfg: &ModelConfig, embeddings: EmbeddingTable) -> Result<Self> {
        cfg.validate()?;
        if embeddings.dim() != cfg.embed_dim {
            return Err(Error::shape(format!(
                "embedding dimension {} does not match config {}",
                embeddings.dim(),
                cfg.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        Ok(Self::init_blocks(cfg, embeddings, &mut rng))
    }

    fn init_blocks(cfg: &ModelConfig, embeddings: EmbeddingTable, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let d_in = cfg.block_input_dim(b);
                let filter = glorot(cfg.filters, cfg.variant.channels() * d_in * cfg.window, rng);
                let attention = cfg.variant.has_attention().then(|| AttentionWeights {
                    w_qt0: glorot(d_in, cfg.seq_len, rng),
                    w_qt1: glorot(d_in, cfg.seq_len, rng),
                    w_qa0: glorot(d_in, cfg.seq_len, rng),
                    w_qa1: glorot(d_in, cfg.seq_len, rng),
                });
                BlockParams {
                    filter,
                    bias: Mat::zeros(cfg.filters, 1),
                    attention,
                }
            })
            .collect();
        ModelParams {
            embeddings,
            blocks,
            output_weights: Mat::zeros(1, cfg.feature_count()),
            output_bias: Mat::zeros(1, 1),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("embeddings".to_string(), &self.embeddings.weights)];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.filter"), &block.filter));
            out.push((format!("block{b}.bias"), &block.bias));
            if let Some(att) = &block.attention {
                out.push((format!("block{b}.w_qt0"), &att.w_qt0));
                out.push((format!("block{b}.w_qt1"), &att.w_qt1));
                out.push((format!("block{b}.w_qa0"), &att.w_qa0));
                out.push((format!("block{b}.w_qa1"), &att.w_qa1));
            }
        }
        out.push(("output.weights".to_string(), &self.output_weights));
        out.push(("output.bias".to_string(), &self.output_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![("embeddings".to_string(), &mut self.embeddings.weights)];
        for (b, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{b}.filter"), &mut block.filter));
            out.push((format!("block{b}.bias"), &mut block.bias));
            if let Some(att) = &mut block.attention {
                out.push((format!("block{b}.w_qt0"), &mut att.w_qt0));
                out.push((format!("block{b}.w_qt1"), &mut att.w_qt1));
                out.push((format!("block{b}.w_qa0"), &mut att.w_qa0));
                out.push((format!("block{b}.w_qa1"), &mut att.w_qa1));
            }
        }
        out.push(("output.weights".to_string(), &mut self.output_weights));
        out.push(("output.bias".to_string(), &mut self.output_bias));
        out
    }

    /// Expected `(name, rows, cols)` for a config, in [`ModelParams::tensors`] order.
    pub fn expected_shapes(cfg: &ModelConfig, vocab_size: usize) -> Vec<(String, usize, usize)> {
        let mut out = vec![("embeddings".to_string(), cfg.embed_dim, vocab_size)];
        for b in 0..cfg.blocks {
            let d_in = cfg.block_input_dim(b);
            out.push((
                format!("block{b}.filter"),
                cfg.filters,
                cfg.variant.channels() * d_in * cfg.window,
            ));
            out.push((format!("block{b}.bias"), cfg.filters, 1));
            if cfg.variant.has_attention() {
                for name in ["w_qt0", "w_qt1", "w_qa0", "w_qa1"] {
                    out.push((format!("block{b}.{name}"), d_in, cfg.seq_len));
                }
            }
        }
        out.push(("output.weights".to_string(), 1, cfg.feature_count()));
        out.push(("output.bias".to_string(), 1, 1));
        out
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(
        cfg: &ModelConfig,
        vocab_size: usize,
        tensors: Vec<(String, Mat)>,
    ) -> Result<Self> {
        let expected = Self::expected_shapes(cfg, vocab_size);
        if expected.len() != tensors.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, rows, cols), (got_name, m)) in expected.iter().zip(&tensors) {
            if name != got_name || (*rows, *cols) != m.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor '{got_name}' {}x{} does not match expected '{name}' {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let mut params = Self::init_blocks(
            cfg,
            EmbeddingTable {
                weights: Mat::zeros(cfg.embed_dim, vocab_size),
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        for ((_, slot), (_, m)) in params.tensors_mut().into_iter().zip(tensors) {
            *slot = m;
        }
        Ok(params)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_squares()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Zeroes the PAD embedding column.
    pub fn clear_pad(&mut self) {
        let w = &mut self.embeddings.weights;
        for r in 0..w.rows() {
            w[(r, PAD_ID)] = 0.0;
        }
    }
}
