//! Attention matrices, attention feature maps and attention pooling weights.
//!
//! Orientation: `A_qt = attention_matrix(R_t, R_q)` has rows indexed by title
//! positions and columns by query positions; `A_qa = attention_matrix(R_q,
//! R_a)` has rows indexed by query positions and columns by answer positions.

use crate::error::{Error, Result};
use crate::numerics::{cosine_backward, matmul, matmul_at, matmul_bt, Mat, ZERO_NORM};

/// `out[i, j] = cos(first[:, i], second[:, j])`.
pub fn attention_matrix(first: &Mat, second: &Mat) -> Result<Mat> {
    if first.shape() != second.shape() {
        return Err(Error::shape(format!(
            "attention: {}x{} vs {}x{}",
            first.rows(),
            first.cols(),
            second.rows(),
            second.cols()
        )));
    }
    let ft = normalized_columns(first);
    let st = normalized_columns(second);
    matmul_bt(&ft, &st)
}

/// Columns of `m` as unit-length rows; zero-norm columns stay zero.
fn normalized_columns(m: &Mat) -> Mat {
    let mut t = m.transpose();
    let d = t.cols();
    for row in t.as_mut_slice().chunks_mut(d.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    t
}

/// Accumulates the gradients of [`attention_matrix`] into `d_first` and
/// `d_second`.
pub fn attention_matrix_backward(
    first: &Mat,
    second: &Mat,
    d_out: &Mat,
    d_first: &mut Mat,
    d_second: &mut Mat,
) {
    let d = first.rows();
    let ft = first.transpose();
    let st = second.transpose();
    let mut dft = Mat::zeros(ft.rows(), d);
    let mut dst = Mat::zeros(st.rows(), d);
    for i in 0..ft.rows() {
        let u = ft.row(i);
        for j in 0..st.rows() {
            let g = d_out[(i, j)];
            if g == 0.0 {
                continue;
            }
            let v = st.row(j);
            let du = &mut dft.as_mut_slice()[i * d..(i + 1) * d];
            let mut dv = vec![0.0; d];
            cosine_backward(u, v, g, du, &mut dv);
            for (acc, x) in dst.as_mut_slice()[j * d..(j + 1) * d].iter_mut().zip(dv) {
                *acc += x;
            }
        }
    }
    d_first
        .add_assign(&dft.transpose())
        .expect("attention backward: first shape");
    d_second
        .add_assign(&dst.transpose())
        .expect("attention backward: second shape");
}

/// The four per-block attention weight matrices, each `d_in × s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_qt0: Mat,
    pub w_qt1: Mat,
    pub w_qa0: Mat,
    pub w_qa1: Mat,
}

impl AttentionWeights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AttentionWeights {
            w_qt0: Mat::zeros(rows, cols),
            w_qt1: Mat::zeros(rows, cols),
            w_qa0: Mat::zeros(rows, cols),
            w_qa1: Mat::zeros(rows, cols),
        }
    }

    pub(crate) fn get(&self, id: WeightId) -> &Mat {
        match id {
            WeightId::Qt0 => &self.w_qt0,
            WeightId::Qt1 => &self.w_qt1,
            WeightId::Qa0 => &self.w_qa0,
            WeightId::Qa1 => &self.w_qa1,
        }
    }

    pub(crate) fn get_mut(&mut self, id: WeightId) -> &mut Mat {
        match id {
            WeightId::Qt0 => &mut self.w_qt0,
            WeightId::Qt1 => &mut self.w_qt1,
            WeightId::Qa0 => &mut self.w_qa0,
            WeightId::Qa1 => &mut self.w_qa1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum WeightId {
    Qt0,
    Qt1,
    Qa0,
    Qa1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum AttId {
    Qt,
    Qa,
}

/// One summand `scale · W · op(A)` of an attention feature map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Term {
    pub scale: f64,
    pub weight: WeightId,
    pub att: AttId,
    pub transposed: bool,
}

/// An extra input channel of a tower: a sum of attention terms, or the zero map.
#[derive(Debug, Clone)]
pub(crate) enum Channel {
    Map(Vec<Term>),
    Zero,
}

const fn term(scale: f64, weight: WeightId, att: AttId, transposed: bool) -> Term {
    Term {
        scale,
        weight,
        att,
        transposed,
    }
}

/// `F_T = W_qt0 · A_qtᵀ`
pub(crate) const F_T: Term = term(1.0, WeightId::Qt0, AttId::Qt, true);
/// `F_A = W_qa1 · A_qa`
pub(crate) const F_A: Term = term(1.0, WeightId::Qa1, AttId::Qa, false);
/// `F_QT = W_qt1 · A_qt`
pub(crate) const F_QT: Term = term(1.0, WeightId::Qt1, AttId::Qt, false);
/// `F_QA = W_qa0 · A_qaᵀ`
pub(crate) const F_QA: Term = term(1.0, WeightId::Qa0, AttId::Qa, true);

/// `F_Q = (W_qt1 · A_qt + W_qa0 · A_qaᵀ) / 2`
pub(crate) fn f_q_terms() -> Vec<Term> {
    vec![
        Term { scale: 0.5, ..F_QT },
        Term { scale: 0.5, ..F_QA },
    ]
}

pub(crate) fn eval_channel(
    channel: &Channel,
    weights: &AttentionWeights,
    a_qt: &Mat,
    a_qa: Option<&Mat>,
    rows: usize,
    cols: usize,
) -> Result<Mat> {
    let mut out = Mat::zeros(rows, cols);
    if let Channel::Map(terms) = channel {
        for t in terms {
            let a = pick(t.att, a_qt, a_qa)?;
            let w = weights.get(t.weight);
            let prod = if t.transposed {
                matmul_bt(w, a)?
            } else {
                matmul(w, a)?
            };
            if prod.shape() != out.shape() {
                return Err(Error::shape(format!(
                    "attention map is {}x{}, expected {rows}x{cols}",
                    prod.rows(),
                    prod.cols()
                )));
            }
            out.add_scaled(t.scale, &prod)?;
        }
    }
    Ok(out)
}

/// Accumulates gradients of one channel into the weight and attention
/// gradients.
pub(crate) fn eval_channel_backward(
    channel: &Channel,
    weights: &AttentionWeights,
    a_qt: &Mat,
    a_qa: Option<&Mat>,
    d_map: &Mat,
    d_weights: &mut AttentionWeights,
    d_qt: &mut Mat,
    d_qa: &mut Mat,
) -> Result<()> {
    let Channel::Map(terms) = channel else {
        return Ok(());
    };
    for t in terms {
        let a = pick(t.att, a_qt, a_qa)?;
        let w = weights.get(t.weight);
        let d_f = d_map.scaled(t.scale);
        let (dw, da) = if t.transposed {
            // F = W·Aᵀ: dW = dF·A, dA = dFᵀ·W
            (matmul(&d_f, a)?, matmul_at(&d_f, w)?)
        } else {
            // F = W·A: dW = dF·Aᵀ, dA = Wᵀ·dF
            (matmul_bt(&d_f, a)?, matmul_at(w, &d_f)?)
        };
        d_weights.get_mut(t.weight).add_assign(&dw)?;
        match t.att {
            AttId::Qt => d_qt.add_assign(&da)?,
            AttId::Qa => d_qa.add_assign(&da)?,
        }
    }
    Ok(())
}

fn pick<'a>(att: AttId, a_qt: &'a Mat, a_qa: Option<&'a Mat>) -> Result<&'a Mat> {
    match att {
        AttId::Qt => Ok(a_qt),
        AttId::Qa => a_qa.ok_or_else(|| Error::shape("answer attention matrix is not available")),
    }
}

fn check_attention_inputs(atts: &[&Mat], ws: &[&Mat]) -> Result<()> {
    let s = atts[0].rows();
    if let Some(a) = atts.iter().find(|a| a.shape() != (s, s)) {
        return Err(Error::shape(format!(
            "attention matrices must be {s}x{s}, found {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let d_in = ws[0].rows();
    if let Some(w) = ws.iter().find(|w| w.shape() != (d_in, s)) {
        return Err(Error::shape(format!(
            "attention weights must be {d_in}x{s}, found {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Attention feature maps `(F_T, F_Q, F_A)` of the first attention variant.
pub fn atcnn1_attention_maps(
    a_qt: &Mat,
    a_qa: &Mat,
    w_qt0: &Mat,
    w_qt1: &Mat,
    w_qa0: &Mat,
    w_qa1: &Mat,
) -> Result<(Mat, Mat, Mat)> {
    check_attention_inputs(&[a_qt, a_qa], &[w_qt0, w_qt1, w_qa0, w_qa1])?;
    let weights = AttentionWeights {
        w_qt0: w_qt0.clone(),
        w_qt1: w_qt1.clone(),
        w_qa0: w_qa0.clone(),
        w_qa1: w_qa1.clone(),
    };
    let (rows, cols) = w_qt0.shape();
    let eval = |c: Channel| eval_channel(&c, &weights, a_qt, Some(a_qa), rows, cols);
    Ok((
        eval(Channel::Map(vec![F_T]))?,
        eval(Channel::Map(f_q_terms()))?,
        eval(Channel::Map(vec![F_A]))?,
    ))
}

/// The two extra query maps `(F_QT, F_QA)` of the second attention variant.
pub fn atcnn2_attention_maps(
    a_qt: &Mat,
    a_qa: &Mat,
    w_qt1: &Mat,
    w_qa0: &Mat,
) -> Result<(Mat, Mat)> {
    check_attention_inputs(&[a_qt, a_qa], &[w_qt1, w_qa0])?;
    let (rows, cols) = w_qt1.shape();
    let mut weights = AttentionWeights::zeros(rows, cols);
    weights.w_qt1 = w_qt1.clone();
    weights.w_qa0 = w_qa0.clone();
    let eval = |t: Term| eval_channel(&Channel::Map(vec![t]), &weights, a_qt, Some(a_qa), rows, cols);
    Ok((eval(F_QT)?, eval(F_QA)?))
}

/// Per-position attention mass `(weights_T, weights_Q, weights_A)`:
/// row sums of `A_qt'` for T, column sums of `A_qa'` for A, and for Q the
/// average of the column sums of `A_qt'` and the row sums of `A_qa'`.
pub fn pooling_weights(a_qt: &Mat, a_qa: &Mat) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = a_qt.rows();
    if a_qt.shape() != (n, n) || a_qa.shape() != (n, n) {
        return Err(Error::shape(format!(
            "pooling weights need equal square matrices, got {}x{} and {}x{}",
            a_qt.rows(),
            a_qt.cols(),
            a_qa.rows(),
            a_qa.cols()
        )));
    }
    let weights_t = a_qt.row_sums();
    let weights_a = a_qa.col_sums();
    let weights_q = a_qt
        .col_sums()
        .iter()
        .zip(a_qa.row_sums())
        .map(|(c, r)| (c + r) / 2.0)
        .collect();
    Ok((weights_t, weights_q, weights_a))
}

/// Gradient of [`pooling_weights`], accumulated into `d_qt` and `d_qa`.
pub fn pooling_weights_backward(
    d_t: &[f64],
    d_q: &[f64],
    d_a: &[f64],
    d_qt: &mut Mat,
    d_qa: &mut Mat,
) {
    let n = d_t.len();
    for i in 0..n {
        for j in 0..n {
            d_qt[(i, j)] += d_t[i] + d_q[j] / 2.0;
            d_qa[(i, j)] += d_a[j] + d_q[i] / 2.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_matrix_examples() {
        let ortho = Mat::from_rows(&[[0.6, -0.8], [0.8, 0.6]]);
        assert_close(&attention_matrix(&ortho, &ortho).unwrap(), &Mat::identity(2), 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random(&mut rng, 3, 4);
        assert_eq!(attention_matrix(&Mat::zeros(3, 4), &r).unwrap(), Mat::zeros(4, 4));

        // first columns {[1,0],[1,1]}, second columns {[0,1],[1,0]}
        let first = Mat::from_rows(&[[1.0, 1.0], [0.0, 1.0]]);
        let second = Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_close(
            &attention_matrix(&first, &second).unwrap(),
            &Mat::from_rows(&[[0.0, 1.0], [h, h]]),
            1e-9,
        );
        assert!(attention_matrix(&Mat::zeros(2, 3), &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let first = random(&mut rng, 5, 6);
        let mut second = random(&mut rng, 5, 6);
        // a zero column exercises the zero-vector rule
        for r in 0..5 {
            second[(r, 2)] = 0.0;
        }
        let probe = random(&mut rng, 6, 6);
        let loss = |a: &Mat, b: &Mat| -> f64 {
            let m = attention_matrix(a, b).unwrap();
            m.as_slice().iter().zip(probe.as_slice()).map(|(x, p)| x * p).sum()
        };
        let mut d_first = Mat::zeros(5, 6);
        let mut d_second = Mat::zeros(5, 6);
        attention_matrix_backward(&first, &second, &probe, &mut d_first, &mut d_second);
        let num_first = finite_diff_gradient(|x| loss(x, &second), &first, 1e-5).unwrap();
        assert!(relative_error(&d_first, &num_first) <= 1e-6);
        let mut num_second = finite_diff_gradient(|x| loss(&first, x), &second, 1e-5).unwrap();
        for r in 0..5 {
            assert_eq!(d_second[(r, 2)], 0.0);
            num_second[(r, 2)] = 0.0;
        }
        assert!(relative_error(&d_second, &num_second) <= 1e-6);
    }

    #[test]
    fn atcnn1_maps_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ws: Vec<Mat> = (0..4).map(|_| random(&mut rng, 3, 4)).collect();
        let a_qa = random(&mut rng, 4, 4);
        let (f_t, _, _) =
            atcnn1_attention_maps(&Mat::identity(4), &a_qa, &ws[0], &ws[1], &ws[2], &ws[3]).unwrap();
        assert_eq!(f_t, ws[0]);

        let z = Mat::zeros(4, 4);
        let (f_t, f_q, f_a) = atcnn1_attention_maps(&z, &z, &ws[0], &ws[1], &ws[2], &ws[3]).unwrap();
        assert_eq!(f_t, Mat::zeros(3, 4));
        assert_eq!(f_q, Mat::zeros(3, 4));
        assert_eq!(f_a, Mat::zeros(3, 4));

        let a_qt = Mat::from_rows(&[[1.0, 0.5], [0.5, 1.0]]);
        let a_qa = Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let w_qt1 = Mat::from_rows(&[[1.0, 1.0]]);
        let w_qa0 = Mat::from_rows(&[[1.0, 0.0]]);
        let other = Mat::zeros(1, 2);
        let (_, f_q, _) = atcnn1_attention_maps(&a_qt, &a_qa, &other, &w_qt1, &w_qa0, &other).unwrap();
        assert_close(&f_q, &Mat::from_rows(&[[0.75, 1.25]]), 1e-9);

        assert!(atcnn1_attention_maps(&a_qt, &Mat::zeros(3, 3), &other, &w_qt1, &w_qa0, &other)
            .is_err());
    }

    #[test]
    fn atcnn2_maps_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w1 = random(&mut rng, 3, 4);
        let w2 = random(&mut rng, 3, 4);
        let a = random(&mut rng, 4, 4);
        let (f_qt, _) = atcnn2_attention_maps(&Mat::identity(4), &a, &w1, &w2).unwrap();
        assert_eq!(f_qt, w1);
        let (_, f_qa) = atcnn2_attention_maps(&a, &Mat::zeros(4, 4), &w1, &w2).unwrap();
        assert_eq!(f_qa, Mat::zeros(3, 4));

        let a_qt = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let ones = Mat::from_rows(&[[1.0, 1.0]]);
        let (f_qt, _) = atcnn2_attention_maps(&a_qt, &Mat::zeros(2, 2), &ones, &ones).unwrap();
        assert_close(&f_qt, &Mat::from_rows(&[[4.0, 6.0]]), 1e-9);
        assert!(atcnn2_attention_maps(&a_qt, &a_qt, &Mat::zeros(1, 3), &ones).is_err());
    }

    #[test]
    fn pooling_weights_examples() {
        let ones = Mat::filled(3, 3, 1.0);
        let (t, q, a) = pooling_weights(&ones, &ones).unwrap();
        assert_eq!((t, q, a), (vec![3.0; 3], vec![3.0; 3], vec![3.0; 3]));

        let a_qt = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let a_qa = Mat::from_rows(&[[1.0, 0.0], [2.0, 1.0]]);
        let (t, q, a) = pooling_weights(&a_qt, &a_qa).unwrap();
        assert_eq!(t, vec![3.0, 7.0]);
        assert_eq!(q, vec![2.5, 4.5]);
        assert_eq!(a, vec![3.0, 1.0]);

        let z = Mat::zeros(2, 2);
        let (t, q, a) = pooling_weights(&z, &z).unwrap();
        assert!(t.iter().chain(&q).chain(&a).all(|&v| v == 0.0));
        assert!(pooling_weights(&a_qt, &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn attention_maps_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d_in, s) = (3, 4);
        let weights = AttentionWeights {
            w_qt0: random(&mut rng, d_in, s),
            w_qt1: random(&mut rng, d_in, s),
            w_qa0: random(&mut rng, d_in, s),
            w_qa1: random(&mut rng, d_in, s),
        };
        let a_qt = random(&mut rng, s, s);
        let a_qa = random(&mut rng, s, s);
        let probe = random(&mut rng, d_in, s);
        let channel = Channel::Map(f_q_terms());
        let loss = |w: &AttentionWeights, qt: &Mat, qa: &Mat| -> f64 {
            let m = eval_channel(&channel, w, qt, Some(qa), d_in, s).unwrap();
            m.as_slice().iter().zip(probe.as_slice()).map(|(x, p)| x * p).sum()
        };
        let mut dw = AttentionWeights::zeros(d_in, s);
        let mut d_qt = Mat::zeros(s, s);
        let mut d_qa = Mat::zeros(s, s);
        eval_channel_backward(
            &channel, &weights, &a_qt, Some(&a_qa), &probe, &mut dw, &mut d_qt, &mut d_qa,
        )
        .unwrap();
        let num_qt = finite_diff_gradient(|x| loss(&weights, x, &a_qa), &a_qt, 1e-5).unwrap();
        let num_qa = finite_diff_gradient(|x| loss(&weights, &a_qt, x), &a_qa, 1e-5).unwrap();
        let num_w1 = finite_diff_gradient(
            |x| loss(&AttentionWeights { w_qt1: x.clone(), ..weights.clone() }, &a_qt, &a_qa),
            &weights.w_qt1,
            1e-5,
        )
        .unwrap();
        let num_w2 = finite_diff_gradient(
            |x| loss(&AttentionWeights { w_qa0: x.clone(), ..weights.clone() }, &a_qt, &a_qa),
            &weights.w_qa0,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&d_qt, &num_qt) < 1e-8);
        assert!(relative_error(&d_qa, &num_qa) < 1e-8);
        assert!(relative_error(&dw.w_qt1, &num_w1) < 1e-8);
        assert!(relative_error(&dw.w_qa0, &num_w2) < 1e-8);
        assert_eq!(dw.w_qt0, Mat::zeros(d_in, s));
    }

    #[test]
    fn pooling_weights_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a_qt = random(&mut rng, 5, 5);
        let a_qa = random(&mut rng, 5, 5);
        let pt: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pq: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pa: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |qt: &Mat, qa: &Mat| -> f64 {
            let (t, q, a) = pooling_weights(qt, qa).unwrap();
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            dot(&t, &pt) + dot(&q, &pq) + dot(&a, &pa)
        };
        let mut d_qt = Mat::zeros(5, 5);
        let mut d_qa = Mat::zeros(5, 5);
        pooling_weights_backward(&pt, &pq, &pa, &mut d_qt, &mut d_qa);
        let num_qt = finite_diff_gradient(|x| loss(x, &a_qa), &a_qt, 1e-5).unwrap();
        let num_qa = finite_diff_gradient(|x| loss(&a_qt, x), &a_qa, 1e-5).unwrap();
        assert!(relative_error(&d_qt, &num_qt) < 1e-8);
        assert!(relative_error(&d_qa, &num_qa) < 1e-8);
    }
}
