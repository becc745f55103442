use super::block::{self, BlockCache};
use super::config::ModelConfig;
use super::params::ModelParams;
use super::{ANSWER, QUERY, TITLE};
use crate::error::{Error, Result};
use crate::numerics::{avg_pool_all, avg_pool_all_backward, cosine_backward, cosine_unchecked, Mat};
use crate::text::{embed, embed_backward, PAD_ID};
use crate::train::loss::{bce_from_logit, bce_from_logit_grad, sigmoid};

/// Model output: a probability strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(f64);

impl Score {
    /// Smallest distance kept from 0 and 1.
    pub const MARGIN: f64 = 1e-15;

    pub fn from_logit(z: f64) -> Self {
        Score(sigmoid(z).clamp(Self::MARGIN, 1.0 - Self::MARGIN))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A (query, title, answer, label) example already encoded to ids of length `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTriple {
    pub query: Vec<usize>,
    pub title: Vec<usize>,
    pub answer: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// L2 coefficient λ.
    pub l2: f64,
    /// Weight applied to the loss of related (label 1) examples.
    pub pos_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            l2: 1e-4,
            pos_weight: 1.0,
        }
    }
}

/// Which towers contribute to the shared filter and bias gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerMask(pub [bool; 3]);

impl TowerMask {
    pub const ALL: TowerMask = TowerMask([true; 3]);

    pub fn only(tower: usize) -> Self {
        let mut m = [false; 3];
        m[tower] = true;
        TowerMask(m)
    }
}

struct Forward {
    ids: Vec<Vec<usize>>,
    maps: Vec<Mat>,
    /// `[level][tower]` all-ap vectors; level 0 is the embedding layer.
    vectors: Vec<Vec<Vec<f64>>>,
    caches: Vec<BlockCache>,
    features: Vec<f64>,
    logit: f64,
}

fn tower_ids<'a>(
    cfg: &ModelConfig,
    query: &'a [usize],
    title: &'a [usize],
    answer: &'a [usize],
) -> Result<Vec<&'a [usize]>> {
    let mut ids = vec![query, title];
    if cfg.use_answer {
        ids.push(answer);
    }
    if let Some(bad) = ids.iter().find(|x| x.len() != cfg.seq_len) {
        return Err(Error::shape(format!(
            "id sequence of length {} but the model expects {}",
            bad.len(),
            cfg.seq_len
        )));
    }
    Ok(ids)
}

fn check_params(params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    if params.blocks.len() != cfg.blocks
        || params.output_weights.cols() != cfg.feature_count()
        || params.embeddings.dim() != cfg.embed_dim
    {
        return Err(Error::shape(format!(
            "parameters ({} blocks, {} output features, dim {}) do not match config \
             ({} blocks, {} features, dim {})",
            params.blocks.len(),
            params.output_weights.cols(),
            params.embeddings.dim(),
            cfg.blocks,
            cfg.feature_count(),
            cfg.embed_dim
        )));
    }
    Ok(())
}

fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    query: &[usize],
    title: &[usize],
    answer: &[usize],
) -> Result<Forward> {
    check_params(params, cfg)?;
    let ids = tower_ids(cfg, query, title, answer)?;
    let maps = ids
        .iter()
        .map(|x| embed(x, &params.embeddings))
        .collect::<Result<Vec<_>>>()?;
    let mut vectors = vec![maps.iter().map(avg_pool_all).collect::<Result<Vec<_>>>()?];
    let mut caches = Vec::with_capacity(cfg.blocks);
    let mut inputs = maps.clone();
    for bp in &params.blocks {
        let cache = block::forward(inputs, bp, cfg.variant, cfg.window)?;
        vectors.push(cache.output.vectors.clone());
        inputs = cache.output.pooled.clone();
        caches.push(cache);
    }
    let mut features = Vec::with_capacity(cfg.feature_count());
    for level in &vectors {
        features.push(cosine_unchecked(&level[QUERY], &level[TITLE]));
        if cfg.use_answer {
            features.push(cosine_unchecked(&level[QUERY], &level[ANSWER]));
        }
    }
    let logit = params
        .output_weights
        .as_slice()
        .iter()
        .zip(&features)
        .map(|(w, x)| w * x)
        .sum::<f64>()
        + params.output_bias[(0, 0)];
    Ok(Forward {
        ids: ids.into_iter().map(<[usize]>::to_vec).collect(),
        maps,
        vectors,
        caches,
        features,
        logit,
    })
}

/// Matching probability of a query against a knowledge entry.
pub fn score(
    query: &[usize],
    title: &[usize],
    answer: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Score> {
    let f = forward(params, cfg, query, title, answer)?;
    Ok(Score::from_logit(f.logit))
}

/// The output-layer feature vector: per level, cos(q, t) then cos(q, a).
pub fn features(
    query: &[usize],
    title: &[usize],
    answer: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    Ok(forward(params, cfg, query, title, answer)?.features)
}

fn backward(
    f: &Forward,
    params: &ModelParams,
    cfg: &ModelConfig,
    d_logit: f64,
    grads: &mut ModelParams,
    mask: TowerMask,
) -> Result<()> {
    let towers = cfg.towers();
    for (g, x) in grads.output_weights.as_mut_slice().iter_mut().zip(&f.features) {
        *g += d_logit * x;
    }
    grads.output_bias[(0, 0)] += d_logit;

    let theta = params.output_weights.as_slice();
    let mut d_vectors: Vec<Vec<Vec<f64>>> = f
        .vectors
        .iter()
        .map(|level| level.iter().map(|v| vec![0.0; v.len()]).collect())
        .collect();
    let per_level = towers - 1;
    for (lvl, level) in f.vectors.iter().enumerate() {
        let dv = &mut d_vectors[lvl];
        let (dq, rest) = dv.split_at_mut(1);
        let g_t = d_logit * theta[lvl * per_level];
        cosine_backward(&level[QUERY], &level[TITLE], g_t, &mut dq[0], &mut rest[0]);
        if cfg.use_answer {
            let g_a = d_logit * theta[lvl * per_level + 1];
            cosine_backward(&level[QUERY], &level[ANSWER], g_a, &mut dq[0], &mut rest[1]);
        }
    }

    let mut d_next: Option<Vec<Mat>> = None;
    for b in (0..cfg.blocks).rev() {
        let d_inputs = block::backward(
            &f.caches[b],
            &params.blocks[b],
            d_next.as_deref(),
            &d_vectors[b + 1],
            &mut grads.blocks[b],
            &mask.0,
        )?;
        d_next = Some(d_inputs);
    }

    let d_inputs = d_next.expect("at least one block");
    for x in 0..towers {
        let (rows, cols) = f.maps[x].shape();
        let mut d_map = avg_pool_all_backward(rows, cols, &d_vectors[0][x]);
        d_map.add_assign(&d_inputs[x])?;
        embed_backward(&f.ids[x], &d_map, &mut grads.embeddings.weights);
    }
    Ok(())
}

/// Mean weighted binary cross-entropy over `batch` plus `λ‖θ‖²`, and its
/// exact gradient for every parameter.
pub fn gradients(
    batch: &[EncodedTriple],
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: LossConfig,
) -> Result<(ModelParams, f64)> {
    gradients_masked(batch, params, cfg, loss, TowerMask::ALL)
}

/// [`gradients`] with the shared filter and bias gradients restricted to the
/// towers in `mask`.
pub fn gradients_masked(
    batch: &[EncodedTriple],
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: LossConfig,
    mask: TowerMask,
) -> Result<(ModelParams, f64)> {
    if batch.is_empty() {
        return Err(Error::Argument("gradients of an empty batch".into()));
    }
    let mut grads = params.zeros_like();
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        if ex.label > 1 {
            return Err(Error::Argument(format!("label {} is not 0 or 1", ex.label)));
        }
        let y = f64::from(ex.label);
        let f = forward(params, cfg, &ex.query, &ex.title, &ex.answer)?;
        total += bce_from_logit(f.logit, y, loss.pos_weight);
        let d_logit = inv * bce_from_logit_grad(f.logit, y, loss.pos_weight);
        backward(&f, params, cfg, d_logit, &mut grads, mask)?;
    }
    let mut value = total * inv;
    if loss.l2 > 0.0 {
        value += loss.l2 * params.l2_norm_sq();
        for ((_, g), (_, p)) in grads.tensors_mut().into_iter().zip(params.tensors()) {
            g.add_scaled(2.0 * loss.l2, p)?;
        }
    }
    let w = &mut grads.embeddings.weights;
    for r in 0..w.rows() {
        w[(r, PAD_ID)] = 0.0;
    }
    Ok((grads, value))
}

/// Loss value only, evaluated exactly as in [`gradients`].
pub(crate) fn loss_value(
    batch: &[EncodedTriple],
    params: &ModelParams,
    cfg: &ModelConfig,
    loss: LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let f = forward(params, cfg, &ex.query, &ex.title, &ex.answer)?;
        total += bce_from_logit(f.logit, f64::from(ex.label), loss.pos_weight);
    }
    Ok(total / batch.len() as f64 + loss.l2 * params.l2_norm_sq())
}
