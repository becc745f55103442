//! Finite-difference verification of [`gradients`](super::gradients).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::network::{gradients, loss_value, EncodedTriple, LossConfig};
use super::params::ModelParams;
use crate::error::Result;
use crate::numerics::{finite_diff_gradient, relative_error, Mat};
use crate::text::PAD_ID;

/// Relative error accepted by the gradient check.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPSILON: f64 = 1e-5;

/// The small configuration used for gradient checks
/// (`s=7, l=8, d=6, w=3, L=2`).
pub fn small_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        seq_len: 7,
        embed_dim: 8,
        window: 3,
        filters: 6,
        blocks: 2,
        use_answer: true,
        seed,
        ..ModelConfig::default()
    }
}

pub const SMALL_VOCAB: usize = 16;

/// Parameters with non-trivial output layer and biases, so that every
/// gradient path carries signal.
pub fn random_params(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::init(cfg, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for v in params.output_weights.as_mut_slice() {
        *v = rng.gen_range(-2.0..2.0);
    }
    params.output_bias[(0, 0)] = rng.gen_range(-0.5..0.5);
    for b in &mut params.blocks {
        for v in b.bias.as_mut_slice() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    // embeddings larger than the ±0.1 default keep tanh away from linear
    for r in 0..params.embeddings.dim() {
        for c in 1..vocab_size {
            params.embeddings.weights[(r, c)] = rng.gen_range(-1.0..1.0);
        }
    }
    Ok(params)
}

/// A random batch whose sequences have random lengths followed by PAD.
pub fn random_batch(cfg: &ModelConfig, vocab_size: usize, size: usize, seed: u64) -> Vec<EncodedTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(1..=cfg.seq_len);
        let mut ids: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab_size)).collect();
        ids.resize(cfg.seq_len, PAD_ID);
        ids
    };
    (0..size)
        .map(|i| EncodedTriple {
            query: seq(&mut rng),
            title: seq(&mut rng),
            answer: seq(&mut rng),
            label: (i % 2) as u8,
        })
        .collect()
}

/// Maximum relative error of each named parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, (_, e)| m.max(*e))
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|(_, e)| *e <= TOLERANCE)
    }
}

/// Compares analytic gradients against central differences of the same loss
/// for every parameter group. The PAD embedding column is excluded.
pub fn check_gradients(
    batch: &[EncodedTriple],
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: LossConfig,
) -> Result<GradCheckReport> {
    let (analytic, _) = gradients(batch, params, cfg, loss)?;
    let analytic: Vec<(String, Mat)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    let mut groups = Vec::with_capacity(analytic.len());
    for (idx, (name, grad)) in analytic.iter().enumerate() {
        let base = params.tensors()[idx].1.clone();
        let mut probe = params.clone();
        let mut numeric = finite_diff_gradient(
            |x| {
                *probe.tensors_mut()[idx].1 = x.clone();
                loss_value(batch, &probe, cfg, loss).unwrap_or(f64::NAN)
            },
            &base,
            EPSILON,
        )?;
        if idx == 0 {
            for r in 0..numeric.rows() {
                numeric[(r, PAD_ID)] = 0.0;
            }
        }
        groups.push((name.clone(), relative_error(grad, &numeric)));
    }
    Ok(GradCheckReport { groups })
}

/// Runs the standard check: small config, three random batches of four.
pub fn run_standard(variant: Variant, seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = small_config(variant, seed);
    let loss = LossConfig {
        l2: 1e-3,
        pos_weight: 1.5,
    };
    (0..3)
        .map(|i| {
            let params = random_params(&cfg, SMALL_VOCAB, seed.wrapping_add(i))?;
            let batch = random_batch(&cfg, SMALL_VOCAB, 4, seed.wrapping_add(100 + i));
            check_gradients(&batch, &params, &cfg, loss)
        })
        .collect()
}
