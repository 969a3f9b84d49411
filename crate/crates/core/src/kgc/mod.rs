//! Knowledge-completion head, training objective, negative sampling, the
//! full per-query graph and the optimizer loop.

mod graph;
mod train;

use std::ops::Range;

pub use graph::{query_backward, query_forward, score_query, QueryPass};
pub use train::{batch_gradient, train, Adam, EpochLog, TrainConfig, TrainOutcome};

use crate::error::{invalid, shape, Result};
use crate::model::{HeadParams, HiddenStates};
use crate::numerics::ops::max_pool_rows_with_argmax;
use crate::numerics::{Matrix, SeededRng};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub logits: Vec<f64>,
    pub p: Vec<f64>,
    /// No visual rows were present, so `E_image` was taken as zero.
    pub image_fallback: bool,
}

/// Forward intermediates of the head for the reverse pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    rows: usize,
    kind: HeadCacheKind,
}

#[derive(Clone, Debug)]
enum HeadCacheKind {
    Completion {
        image_argmax: Option<Vec<usize>>,
        entity_rows: Range<usize>,
        relation_rows: Range<usize>,
        e_m: Vec<f64>,
        hidden1: Vec<f64>,
    },
    Plain {
        last: Vec<f64>,
    },
}

fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
    }
    out
}

fn mean_rows(h: &Matrix, rows: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; h.cols()];
    let n = rows.len() as f64;
    for r in rows {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Head over final hidden states. `entity_span` and `relation_span` index the
/// text part, which starts right after the visual rows.
pub fn head_forward(
    hidden: &HiddenStates,
    entity_span: Range<usize>,
    relation_span: Range<usize>,
    params: &HeadParams,
) -> Result<(HeadOutput, HeadCache)> {
    let h = &hidden.states;
    let rows = h.rows();
    let d = h.cols();
    let (logits, fallback, kind) = match params {
        HeadParams::Completion { w1, b1, w2, b2 } => {
            if w1.rows() != 3 * d {
                return Err(shape(format!("head expects width {}, hidden has {d}", w1.rows() / 3)));
            }
            let visual = hidden.visual_rows();
            let v = visual.len();
            if visual != (0..v).collect::<Vec<_>>() {
                return Err(invalid("visual rows must precede text rows"));
            }
            let k = rows - v;
            for (name, span) in [("entity", &entity_span), ("relation", &relation_span)] {
                if span.is_empty() || span.end > k {
                    return Err(invalid(format!(
                        "{name} span {span:?} is empty or outside {k} text rows"
                    )));
                }
            }
            let (e_image, image_argmax) = if v == 0 {
                (vec![0.0; d], None)
            } else {
                let (m, a) = max_pool_rows_with_argmax(&h.slice_rows(0, v))?;
                (m, Some(a))
            };
            let entity_rows = v + entity_span.start..v + entity_span.end;
            let relation_rows = v + relation_span.start..v + relation_span.end;
            let mut e_m = e_image;
            e_m.extend(mean_rows(h, entity_rows.clone()));
            e_m.extend(mean_rows(h, relation_rows.clone()));
            let hidden1: Vec<f64> = affine(&e_m, w1, b1).into_iter().map(f64::tanh).collect();
            let logits = affine(&hidden1, w2, b2);
            (
                logits,
                v == 0,
                HeadCacheKind::Completion {
                    image_argmax,
                    entity_rows,
                    relation_rows,
                    e_m,
                    hidden1,
                },
            )
        }
        HeadParams::Plain { w, b } => {
            if w.rows() != d || rows == 0 {
                return Err(shape(format!("plain head expects width {}, hidden has {d}", w.rows())));
            }
            let last = h.row(rows - 1).to_vec();
            (affine(&last, w, b), false, HeadCacheKind::Plain { last })
        }
    };
    let p = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok((
        HeadOutput {
            logits,
            p,
            image_fallback: fallback,
        },
        HeadCache { rows, kind },
    ))
}

/// Probabilities for every entity from final hidden states.
pub fn completion_head(
    hidden: &HiddenStates,
    entity_span: Range<usize>,
    relation_span: Range<usize>,
    params: &HeadParams,
) -> Result<HeadOutput> {
    head_forward(hidden, entity_span, relation_span, params).map(|(o, _)| o)
}

/// Reverse pass of [`head_forward`]; returns the gradient of the hidden states.
pub fn head_backward(d_logits: &[f64], cache: &HeadCache, params: &HeadParams, grads: &mut HeadParams) -> Matrix {
    match (&cache.kind, params, grads) {
        (
            HeadCacheKind::Completion {
                image_argmax,
                entity_rows,
                relation_rows,
                e_m,
                hidden1,
            },
            HeadParams::Completion { w1, w2, .. },
            HeadParams::Completion {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        ) => {
            let d = w1.rows() / 3;
            for (g, x) in gb2.data_mut().iter_mut().zip(d_logits) {
                *g += x;
            }
            let mut d_h1 = vec![0.0; hidden1.len()];
            for (i, &hv) in hidden1.iter().enumerate() {
                let wrow = w2.row(i);
                let grow = gw2.row_mut(i);
                let mut acc = 0.0;
                for j in 0..d_logits.len() {
                    grow[j] += hv * d_logits[j];
                    acc += wrow[j] * d_logits[j];
                }
                d_h1[i] = acc * (1.0 - hv * hv);
            }
            for (g, x) in gb1.data_mut().iter_mut().zip(&d_h1) {
                *g += x;
            }
            let mut d_em = vec![0.0; e_m.len()];
            for (i, &xv) in e_m.iter().enumerate() {
                let wrow = w1.row(i);
                let grow = gw1.row_mut(i);
                let mut acc = 0.0;
                for j in 0..d_h1.len() {
                    grow[j] += xv * d_h1[j];
                    acc += wrow[j] * d_h1[j];
                }
                d_em[i] = acc;
            }
            let mut dh = Matrix::zeros(cache.rows, d);
            if let Some(arg) = image_argmax {
                for (j, &r) in arg.iter().enumerate() {
                    dh.row_mut(r)[j] += d_em[j];
                }
            }
            for (block, rows) in [(1, entity_rows), (2, relation_rows)] {
                let n = rows.len() as f64;
                for r in rows.clone() {
                    for (o, g) in dh.row_mut(r).iter_mut().zip(&d_em[block * d..(block + 1) * d]) {
                        *o += g / n;
                    }
                }
            }
            dh
        }
        (HeadCacheKind::Plain { last }, HeadParams::Plain { w, .. }, HeadParams::Plain { w: gw, b: gb }) => {
            let d = last.len();
            for (g, x) in gb.data_mut().iter_mut().zip(d_logits) {
                *g += x;
            }
            let mut dh = Matrix::zeros(cache.rows, d);
            let out = dh.row_mut(cache.rows - 1);
            for i in 0..d {
                let grow = gw.row_mut(i);
                let mut acc = 0.0;
                for (j, &dl) in d_logits.iter().enumerate() {
                    grow[j] += last[i] * dl;
                    acc += w.get(i, j) * dl;
                }
                out[i] = acc;
            }
            dh
        }
        _ => panic!("head cache and parameters disagree on head kind"),
    }
}

fn check_ids(n: usize, target: usize, negatives: &[usize]) -> Result<()> {
    if negatives.is_empty() {
        return Err(invalid("at least one negative is required"));
    }
    if let Some(&bad) = std::iter::once(&target).chain(negatives).find(|&&i| i >= n) {
        return Err(invalid(format!("entity id {bad} out of range for {n} scores")));
    }
    Ok(())
}

/// `-ln p_t - mean_j ln(1 - p_j)` with probabilities clamped away from 0 and 1.
pub fn loss(p: &[f64], target: usize, negatives: &[usize]) -> Result<f64> {
    check_ids(p.len(), target, negatives)?;
    let c = |v: f64| v.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let pos = -c(p[target]).ln();
    let neg: f64 = negatives.iter().map(|&j| -(1.0 - c(p[j])).ln()).sum();
    Ok(pos + neg / negatives.len() as f64)
}

/// The same objective evaluated on logits (no clamping needed), with its
/// gradient with respect to every logit.
pub fn loss_from_logits(logits: &[f64], target: usize, negatives: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_ids(logits.len(), target, negatives)?;
    let n = negatives.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let zt = logits[target];
    let mut value = softplus(-zt);
    grad[target] = sigmoid(zt) - 1.0;
    for &j in negatives {
        value += softplus(logits[j]) / n;
        grad[j] += sigmoid(logits[j]) / n;
    }
    Ok((value, grad))
}

/// `n` distinct entities other than `target`, always containing `known`
/// (the hard negative); the other `n - 1` are uniform without replacement.
pub fn sample_negatives(
    known: usize,
    target: usize,
    num_entities: usize,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if num_entities < 3 {
        return Err(invalid(format!("negative sampling needs at least 3 entities, got {num_entities}")));
    }
    if n == 0 || n >= num_entities {
        return Err(invalid(format!(
            "negative count {n} must be in [1, {})",
            num_entities
        )));
    }
    if known >= num_entities || target >= num_entities {
        return Err(invalid("query entity out of range"));
    }
    if known == target {
        return Err(invalid(format!(
            "known entity {known} equals the target, so it cannot serve as a negative"
        )));
    }
    let mut pool: Vec<usize> = (0..num_entities).filter(|&e| e != known && e != target).collect();
    let take = n - 1;
    for i in 0..take {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let mut out = Vec::with_capacity(n);
    out.push(known);
    out.extend_from_slice(&pool[..take]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;

    fn hidden(rng: &mut SeededRng, v: usize, k: usize, d: usize) -> HiddenStates {
        let mut tags = vec![Modality::VisualImageView; v];
        tags.extend(vec![Modality::Text; k]);
        HiddenStates::new(rng.normal_matrix(v + k, d, 1.0), tags).unwrap()
    }

    fn completion_params(rng: &mut SeededRng, d: usize, r: usize) -> HeadParams {
        HeadParams::Completion {
            w1: rng.normal_matrix(3 * d, 3 * d, 0.3),
            b1: rng.normal_matrix(1, 3 * d, 0.1),
            w2: rng.normal_matrix(3 * d, r, 0.3),
            b2: rng.normal_matrix(1, r, 0.1),
        }
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut rng = SeededRng::new(1);
        let h = hidden(&mut rng, 2, 3, 4);
        let params = HeadParams::Completion {
            w1: rng.normal_matrix(12, 12, 1.0),
            b1: Matrix::zeros(1, 12),
            w2: Matrix::zeros(12, 1),
            b2: Matrix::zeros(1, 1),
        };
        let out = completion_head(&h, 0..2, 2..3, &params).unwrap();
        assert_eq!(out.p, vec![0.5]);
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = SeededRng::new(2);
        let h = hidden(&mut rng, 4, 3, 8);
        let out = completion_head(&h, 0..2, 2..3, &completion_params(&mut rng, 8, 20)).unwrap();
        assert_eq!(out.p.len(), 20);
        assert!(out.p.iter().all(|&p| p > 0.0 && p < 1.0));
        // Independent sigmoids, not a distribution.
        assert!((out.p.iter().sum::<f64>() - 1.0).abs() > 1e-3);
        assert!(!out.image_fallback);
    }

    #[test]
    fn matches_straight_line_recomputation() {
        let mut rng = SeededRng::new(3);
        let (v, k, d, r) = (3, 4, 5, 7);
        let h = hidden(&mut rng, v, k, d);
        let params = completion_params(&mut rng, d, r);
        let out = completion_head(&h, 0..2, 3..4, &params).unwrap();
        let HeadParams::Completion { w1, b1, w2, b2 } = &params else { unreachable!() };
        let s = &h.states;
        let mut em = vec![0.0; 3 * d];
        for c in 0..d {
            em[c] = (0..v).map(|i| s.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            em[d + c] = (s.get(v, c) + s.get(v + 1, c)) / 2.0;
            em[2 * d + c] = s.get(v + 3, c);
        }
        let mut h1 = vec![0.0; 3 * d];
        for j in 0..3 * d {
            let mut acc = b1.get(0, j);
            for i in 0..3 * d {
                acc += em[i] * w1.get(i, j);
            }
            h1[j] = acc.tanh();
        }
        for e in 0..r {
            let mut z = b2.get(0, e);
            for j in 0..3 * d {
                z += h1[j] * w2.get(j, e);
            }
            let p = 1.0 / (1.0 + (-z).exp());
            assert!((out.p[e] - p).abs() < 1e-14);
        }
    }

    #[test]
    fn no_visual_rows_falls_back() {
        let mut rng = SeededRng::new(4);
        let h = hidden(&mut rng, 0, 3, 4);
        let out = completion_head(&h, 0..1, 1..3, &completion_params(&mut rng, 4, 5)).unwrap();
        assert!(out.image_fallback);
    }

    #[test]
    fn bad_spans_are_rejected() {
        let mut rng = SeededRng::new(5);
        let h = hidden(&mut rng, 2, 3, 4);
        let p = completion_params(&mut rng, 4, 5);
        assert!(completion_head(&h, 0..0, 1..2, &p).is_err());
        assert!(completion_head(&h, 0..1, 2..4, &p).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = [1.0 - 1e-12, 1e-12, 1e-12];
        assert!(loss(&p, 0, &[1, 2]).unwrap() < 1e-10);
        let p = [0.5, 0.5];
        assert!((loss(&p, 0, &[1]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        // Exact 0 and 1 are clamped rather than producing infinities.
        assert!(loss(&[0.0, 1.0], 0, &[1]).unwrap().is_finite());
        assert!(loss(&[0.5, 0.5], 2, &[1]).is_err());
    }

    #[test]
    fn loss_matches_high_precision_value() {
        // p and the expected value were computed with mpmath at 50 digits.
        let p = [0.73, 0.12, 0.41, 0.05, 0.88, 0.3];
        let want = 0.9514503224634264;
        assert!((loss(&p, 0, &[1, 2, 3, 4, 5]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn logit_loss_agrees_with_probability_loss() {
        let mut rng = SeededRng::new(6);
        let z = rng.normal_vec(9, 2.0);
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let negs = [1, 4, 5, 8];
        let (l, g) = loss_from_logits(&z, 2, &negs).unwrap();
        assert!((l - loss(&p, 2, &negs).unwrap()).abs() < 1e-12);
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += 1e-6;
            let mut zm = z.clone();
            zm[i] -= 1e-6;
            let fd = (loss_from_logits(&zp, 2, &negs).unwrap().0 - loss_from_logits(&zm, 2, &negs).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn single_negative_is_the_known_entity() {
        let mut rng = SeededRng::new(7);
        assert_eq!(sample_negatives(4, 2, 10, 1, &mut rng).unwrap(), vec![4]);
    }

    #[test]
    fn negative_sampling_errors() {
        let mut rng = SeededRng::new(8);
        assert!(sample_negatives(0, 1, 10, 10, &mut rng).is_err());
        assert!(sample_negatives(0, 1, 10, 0, &mut rng).is_err());
        assert!(sample_negatives(0, 1, 2, 1, &mut rng).is_err());
        assert!(sample_negatives(3, 3, 10, 2, &mut rng).is_err());
    }

    #[test]
    fn target_never_sampled_and_no_duplicates() {
        let mut rng = SeededRng::new(9);
        for _ in 0..10_000 {
            let s = sample_negatives(1, 5, 12, 6, &mut rng).unwrap();
            assert!(!s.contains(&5));
            assert_eq!(s[0], 1);
            let mut u = s.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 6);
        }
    }

    #[test]
    fn uniform_over_non_target_entities() {
        let (r, n, draws) = (10, 4, 100_000);
        let mut rng = SeededRng::new(10);
        let mut counts = vec![0usize; r];
        for _ in 0..draws {
            for e in sample_negatives(0, 1, r, n, &mut rng).unwrap() {
                counts[e] += 1;
            }
        }
        assert_eq!(counts[0], draws);
        assert_eq!(counts[1], 0);
        // Each of the 8 remaining entities is in a set with probability 3/8.
        let p = (n - 1) as f64 / (r - 2) as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts[2..] {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "{c} vs {mean} ± {sd}");
        }
    }
}
