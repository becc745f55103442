//! One "convolution & pooling" block applied to all towers.

use super::attention::{
    attention_matrix, attention_matrix_backward, eval_channel, eval_channel_backward, f_q_terms,
    pooling_weights, pooling_weights_backward, AttentionWeights, Channel, F_A, F_QA, F_QT, F_T,
};
use super::config::Variant;
use super::params::BlockParams;
use super::{ANSWER, QUERY, TITLE};
use crate::error::{Error, Result};
use crate::numerics::{
    avg_pool_all, avg_pool_all_backward, weighted_pool_window, weighted_pool_window_backward,
    wide_conv_backward, wide_conv_forward, Mat,
};

/// Pooled maps (`d × s`, the next block's input) and all-ap vectors (`d`),
/// one per tower in query, title, answer order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub pooled: Vec<Mat>,
    pub vectors: Vec<Vec<f64>>,
}

/// Extra channels stacked under each tower's representation.
fn layout(variant: Variant, towers: usize) -> Vec<Vec<Channel>> {
    let map = |terms: Vec<_>| Channel::Map(terms);
    match (variant, towers) {
        (Variant::Tcnn, n) => vec![Vec::new(); n],
        (Variant::Atcnn1, 3) => vec![
            vec![map(f_q_terms())],
            vec![map(vec![F_T])],
            vec![map(vec![F_A])],
        ],
        (Variant::Atcnn1, _) => vec![vec![map(vec![F_QT])], vec![map(vec![F_T])]],
        (Variant::Atcnn2, 3) => vec![
            vec![map(vec![F_QT]), map(vec![F_QA])],
            vec![map(vec![F_T]), Channel::Zero],
            vec![map(vec![F_A]), Channel::Zero],
        ],
        (Variant::Atcnn2, _) => vec![
            vec![map(vec![F_QT]), Channel::Zero],
            vec![map(vec![F_T]), Channel::Zero],
        ],
    }
}

/// Intermediate values of one block kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    variant: Variant,
    window: usize,
    inputs: Vec<Mat>,
    att_in: Option<(Mat, Option<Mat>)>,
    stacks: Vec<Mat>,
    conv: Vec<Mat>,
    att_out: Option<(Mat, Option<Mat>)>,
    pool_weights: Vec<Vec<f64>>,
    pub output: BlockOutput,
}

/// Runs one block over two (query, title) or three (query, title, answer)
/// equal-shaped single-channel inputs.
pub fn block_forward(
    inputs: &[Mat],
    params: &BlockParams,
    variant: Variant,
    window: usize,
) -> Result<BlockOutput> {
    Ok(forward(inputs.to_vec(), params, variant, window)?.output)
}

pub(crate) fn forward(
    inputs: Vec<Mat>,
    params: &BlockParams,
    variant: Variant,
    window: usize,
) -> Result<BlockCache> {
    let towers = inputs.len();
    if !(2..=3).contains(&towers) {
        return Err(Error::shape(format!("a block needs 2 or 3 towers, got {towers}")));
    }
    let shape = inputs[0].shape();
    if let Some(m) = inputs.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape(format!(
            "tower inputs differ in shape: {}x{} vs {}x{}",
            shape.0,
            shape.1,
            m.rows(),
            m.cols()
        )));
    }
    let (d_in, s) = shape;

    let (att_in, stacks) = if variant.has_attention() {
        let weights = attention_weights(params)?;
        let a_qt = attention_matrix(&inputs[TITLE], &inputs[QUERY])?;
        let a_qa = if towers == 3 {
            Some(attention_matrix(&inputs[QUERY], &inputs[ANSWER])?)
        } else {
            None
        };
        let mut stacks = Vec::with_capacity(towers);
        for (input, channels) in inputs.iter().zip(layout(variant, towers)) {
            let mut parts = vec![input.clone()];
            for ch in &channels {
                parts.push(eval_channel(ch, weights, &a_qt, a_qa.as_ref(), d_in, s)?);
            }
            stacks.push(Mat::vstack(&parts.iter().collect::<Vec<_>>())?);
        }
        (Some((a_qt, a_qa)), stacks)
    } else {
        (None, inputs.clone())
    };

    let bias = params.bias.as_slice();
    let conv = stacks
        .iter()
        .map(|x| wide_conv_forward(x, &params.filter, bias, window))
        .collect::<Result<Vec<_>>>()?;
    let n = conv[0].cols();

    let (att_out, pool_weights) = if variant.has_attention() {
        let a_qt = attention_matrix(&conv[TITLE], &conv[QUERY])?;
        if towers == 3 {
            let a_qa = attention_matrix(&conv[QUERY], &conv[ANSWER])?;
            let (wt, wq, wa) = pooling_weights(&a_qt, &a_qa)?;
            (Some((a_qt, Some(a_qa))), vec![wq, wt, wa])
        } else {
            let (wt, wq) = (a_qt.row_sums(), a_qt.col_sums());
            (Some((a_qt, None)), vec![wq, wt])
        }
    } else {
        (None, vec![vec![1.0 / window as f64; n]; towers])
    };

    let pooled = conv
        .iter()
        .zip(&pool_weights)
        .map(|(c, wts)| weighted_pool_window(c, wts, window))
        .collect::<Result<Vec<_>>>()?;
    let vectors = conv.iter().map(avg_pool_all).collect::<Result<Vec<_>>>()?;

    Ok(BlockCache {
        variant,
        window,
        inputs,
        att_in,
        stacks,
        conv,
        att_out,
        pool_weights,
        output: BlockOutput { pooled, vectors },
    })
}

fn attention_weights(params: &BlockParams) -> Result<&AttentionWeights> {
    params
        .attention
        .as_ref()
        .ok_or_else(|| Error::shape("attention variant without attention weights"))
}

/// Backward pass. `d_pooled` is `None` when the pooled maps feed nothing
/// (the last block). Shared filter and bias gradients are only accumulated
/// from towers enabled in `shared_from`. Returns the input gradients.
pub(crate) fn backward(
    cache: &BlockCache,
    params: &BlockParams,
    d_pooled: Option<&[Mat]>,
    d_vectors: &[Vec<f64>],
    grads: &mut BlockParams,
    shared_from: &[bool; 3],
) -> Result<Vec<Mat>> {
    let towers = cache.inputs.len();
    let w = cache.window;
    let (d_in, s) = cache.inputs[0].shape();
    let (d, n) = cache.conv[0].shape();

    let mut d_conv: Vec<Mat> = d_vectors
        .iter()
        .map(|dv| avg_pool_all_backward(d, n, dv))
        .collect();

    if let Some(d_pooled) = d_pooled {
        let mut d_weights = Vec::with_capacity(towers);
        for x in 0..towers {
            let (dc, dw) = weighted_pool_window_backward(
                &cache.conv[x],
                &cache.pool_weights[x],
                &d_pooled[x],
                w,
            )?;
            d_conv[x].add_assign(&dc)?;
            d_weights.push(dw);
        }
        if let Some((_, a_qa)) = &cache.att_out {
            let mut d_qt = Mat::zeros(n, n);
            let mut d_qa = Mat::zeros(n, n);
            if towers == 3 {
                pooling_weights_backward(
                    &d_weights[TITLE],
                    &d_weights[QUERY],
                    &d_weights[ANSWER],
                    &mut d_qt,
                    &mut d_qa,
                );
            } else {
                for i in 0..n {
                    for j in 0..n {
                        d_qt[(i, j)] += d_weights[TITLE][i] + d_weights[QUERY][j];
                    }
                }
            }
            let (mut dq, mut dt) = (Mat::zeros(d, n), Mat::zeros(d, n));
            attention_matrix_backward(&cache.conv[TITLE], &cache.conv[QUERY], &d_qt, &mut dt, &mut dq);
            d_conv[QUERY].add_assign(&dq)?;
            d_conv[TITLE].add_assign(&dt)?;
            if a_qa.is_some() {
                let (mut dq, mut da) = (Mat::zeros(d, n), Mat::zeros(d, n));
                attention_matrix_backward(
                    &cache.conv[QUERY],
                    &cache.conv[ANSWER],
                    &d_qa,
                    &mut dq,
                    &mut da,
                );
                d_conv[QUERY].add_assign(&dq)?;
                d_conv[ANSWER].add_assign(&da)?;
            }
        }
    }

    let mut d_stacks = Vec::with_capacity(towers);
    for x in 0..towers {
        let g = wide_conv_backward(&cache.stacks[x], &params.filter, &cache.conv[x], &d_conv[x], w)?;
        if shared_from[x] {
            grads.filter.add_assign(&g.filter)?;
            for (acc, v) in grads.bias.as_mut_slice().iter_mut().zip(&g.bias) {
                *acc += v;
            }
        }
        d_stacks.push(g.input);
    }

    let mut d_inputs: Vec<Mat> = d_stacks.iter().map(|m| m.row_block(0, d_in)).collect();

    if let Some((a_qt, a_qa)) = &cache.att_in {
        let weights = attention_weights(params)?;
        let d_weights = grads
            .attention
            .as_mut()
            .ok_or_else(|| Error::shape("gradient buffer without attention weights"))?;
        let mut d_qt = Mat::zeros(s, s);
        let mut d_qa = Mat::zeros(s, s);
        for (x, channels) in layout(cache.variant, towers).iter().enumerate() {
            for (k, ch) in channels.iter().enumerate() {
                let d_map = d_stacks[x].row_block((k + 1) * d_in, d_in);
                eval_channel_backward(
                    ch,
                    weights,
                    a_qt,
                    a_qa.as_ref(),
                    &d_map,
                    d_weights,
                    &mut d_qt,
                    &mut d_qa,
                )?;
            }
        }
        let (mut dq, mut dt) = (Mat::zeros(d_in, s), Mat::zeros(d_in, s));
        attention_matrix_backward(
            &cache.inputs[TITLE],
            &cache.inputs[QUERY],
            &d_qt,
            &mut dt,
            &mut dq,
        );
        d_inputs[QUERY].add_assign(&dq)?;
        d_inputs[TITLE].add_assign(&dt)?;
        if a_qa.is_some() {
            let (mut dq, mut da) = (Mat::zeros(d_in, s), Mat::zeros(d_in, s));
            attention_matrix_backward(
                &cache.inputs[QUERY],
                &cache.inputs[ANSWER],
                &d_qa,
                &mut dq,
                &mut da,
            );
            d_inputs[QUERY].add_assign(&dq)?;
            d_inputs[ANSWER].add_assign(&da)?;
        }
    }

    Ok(d_inputs)
}
