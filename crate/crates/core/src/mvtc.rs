//! Multi-view visual token compressor.
//!
//! The `N(M+1)` projected region rows of an entity are squeezed into `H`
//! rows from a textual view (query = max-pooled entity and relation tokens)
//! and `H` rows from a visual view (query = max-pooled CLS rows). Each head
//! scores the regions with a `d`-wide query/key but returns a full `D`-wide
//! value mixture, and the heads are stacked as rows.
//!
//! The joint sequence is `I_image ‖ I_text ‖ T_t`.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{invalid, shape, Result};
use crate::model::{HiddenStates, Modality, Model, MvtcView, Params, VisualMode};
use crate::numerics::ops::max_pool_rows_with_argmax;
use crate::numerics::{dot, Matrix};

/// One query's model input.
#[derive(Clone, Debug)]
pub struct MultimodalBatch<'a> {
    /// Region features `N(M+1) x E_i`; row `k (M+1)` is the CLS row of image `k`.
    pub visual: &'a Matrix,
    pub text_ids: Vec<usize>,
    pub entity_span: Range<usize>,
    pub relation_span: Range<usize>,
}

pub fn fuse_text_query(t_entity: &Matrix, t_relation: &Matrix) -> Result<Vec<f64>> {
    if t_entity.rows() == 0 || t_relation.rows() == 0 {
        return Err(invalid("entity and relation spans must be non-empty"));
    }
    let stacked = Matrix::concat_rows(&[t_entity, t_relation])?;
    Ok(max_pool_rows_with_argmax(&stacked)?.0)
}

pub fn fuse_visual_query(cls_rows: &Matrix) -> Result<Vec<f64>> {
    if cls_rows.rows() == 0 {
        return Err(invalid("no CLS rows to pool"));
    }
    Ok(max_pool_rows_with_argmax(cls_rows)?.0)
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    query: Vec<f64>,
    q: Vec<f64>,
    k: Matrix,
    v: Matrix,
    /// Per head, attention weights over the `n` region rows.
    weights: Vec<Vec<f64>>,
}

impl MhaCache {
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Compresses `tokens` (`n x D`) into `H x D` rows for one view.
pub fn mha_compress(query: &[f64], tokens: &Matrix, view: &MvtcView, heads: usize) -> Result<Matrix> {
    Ok(mha_compress_cached(query, tokens, view, heads)?.0)
}

pub fn mha_compress_cached(
    query: &[f64],
    tokens: &Matrix,
    view: &MvtcView,
    heads: usize,
) -> Result<(Matrix, MhaCache)> {
    let n = tokens.rows();
    let dm = view.w_v.cols();
    if n == 0 {
        return Err(invalid("mha_compress over zero tokens"));
    }
    if query.len() != dm || tokens.cols() != dm || dm % heads != 0 {
        return Err(shape(format!(
            "query {} / tokens {:?} / width {dm} with {heads} heads",
            query.len(),
            tokens.shape()
        )));
    }
    let hd = dm / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = Matrix::row_vector(query).matmul(&view.w_q).into_data();
    let k = tokens.matmul(&view.w_k);
    let v = tokens.matmul(&view.w_v);
    let mut out = Matrix::zeros(heads, dm);
    let mut weights = Vec::with_capacity(heads);
    let mut order: Vec<usize> = (0..n).collect();
    for h in 0..heads {
        let c = h * hd..(h + 1) * hd;
        let scores: Vec<f64> = (0..n)
            .map(|j| dot(&q[c.clone()], &k.row(j)[c.clone()]) * scale)
            .collect();
        // Sum in an order fixed by the (score, value row) pairs themselves so
        // the result does not depend on how the regions were listed.
        order.sort_by(|&a, &b| canonical_cmp(&scores, &v, a, b));
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = order.iter().map(|&j| exps[j]).sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let row = out.row_mut(h);
        for &j in &order {
            let wj = w[j];
            for (o, x) in row.iter_mut().zip(v.row(j)) {
                *o += wj * x;
            }
        }
        weights.push(w);
    }
    Ok((
        out,
        MhaCache {
            query: query.to_vec(),
            q,
            k,
            v,
            weights,
        },
    ))
}

fn canonical_cmp(scores: &[f64], v: &Matrix, a: usize, b: usize) -> Ordering {
    scores[a].total_cmp(&scores[b]).then_with(|| {
        v.row(a)
            .iter()
            .zip(v.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Reverse pass for one view. Accumulates into `grads` and `d_tokens`;
/// returns the gradient of the pooled query.
pub fn mha_backward(
    d_out: &Matrix,
    cache: &MhaCache,
    tokens: &Matrix,
    view: &MvtcView,
    grads: &mut MvtcView,
    d_tokens: &mut Matrix,
    heads: usize,
) -> Vec<f64> {
    let n = tokens.rows();
    let dm = view.w_v.cols();
    let hd = dm / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; dm];
    let mut dk = Matrix::zeros(n, dm);
    let mut dv = Matrix::zeros(n, dm);
    let mut da = vec![0.0; n];
    for h in 0..heads {
        let c = h * hd..(h + 1) * hd;
        let dh = d_out.row(h);
        let w = &cache.weights[h];
        for j in 0..n {
            da[j] = dot(cache.v.row(j), dh);
            for (o, x) in dv.row_mut(j).iter_mut().zip(dh) {
                *o += w[j] * x;
            }
        }
        let inner = dot(&da, w);
        for j in 0..n {
            let ds = w[j] * (da[j] - inner) * scale;
            if ds == 0.0 {
                continue;
            }
            for (o, kv) in dq[c.clone()].iter_mut().zip(&cache.k.row(j)[c.clone()]) {
                *o += ds * kv;
            }
            for (o, qv) in dk.row_mut(j)[c.clone()].iter_mut().zip(&cache.q[c.clone()]) {
                *o += ds * qv;
            }
        }
    }
    let dq_m = Matrix::row_vector(&dq);
    Matrix::row_vector(&cache.query).t_matmul_acc(&dq_m, &mut grads.w_q);
    tokens.t_matmul_acc(&dk, &mut grads.w_k);
    tokens.t_matmul_acc(&dv, &mut grads.w_v);
    d_tokens.add_assign(&dk.matmul_t(&view.w_k));
    d_tokens.add_assign(&dv.matmul_t(&view.w_v));
    dq_m.matmul_t(&view.w_q).into_data()
}

/// Everything the reverse pass needs from [`compress`].
#[derive(Clone, Debug)]
pub struct CompressCache {
    text_ids: Vec<usize>,
    visual_features: Matrix,
    projected: Matrix,
    visual_count: usize,
    /// For each column of `X_t`, the `T_t` row that won the max-pool.
    text_argmax: Vec<usize>,
    /// For each column of `X_i`, the projected row that won the max-pool.
    cls_argmax: Vec<usize>,
    text_view: Option<MhaCache>,
    image_view: Option<MhaCache>,
}

#[derive(Clone, Debug)]
pub struct Compressed {
    pub sequence: HiddenStates,
    pub visual_count: usize,
    pub cache: CompressCache,
}

impl Compressed {
    /// Attention weights of the textual then visual view (when computed).
    pub fn view_weights(&self) -> (Option<&[Vec<f64>]>, Option<&[Vec<f64>]>) {
        (
            self.cache.text_view.as_ref().map(|c| c.weights()),
            self.cache.image_view.as_ref().map(|c| c.weights()),
        )
    }
}

pub fn cls_row_indices(n_images: usize, n_regions: usize) -> Vec<usize> {
    (0..n_images).map(|k| k * (n_regions + 1)).collect()
}

/// Builds the joint sequence `T` for one query.
pub fn compress(model: &Model, batch: &MultimodalBatch<'_>) -> Result<Compressed> {
    let cfg = &model.config;
    let k = batch.text_ids.len();
    for (name, span) in [("entity", &batch.entity_span), ("relation", &batch.relation_span)] {
        if span.is_empty() || span.end > k {
            return Err(invalid(format!(
                "{name} span {span:?} is empty or outside {k} text tokens"
            )));
        }
    }
    let projected = model.project_visual(batch.visual)?;
    let visual_count = cfg.visual_tokens();
    let text = model.embed_text(&batch.text_ids, visual_count)?;

    let mut text_rows: Vec<usize> = batch.entity_span.clone().collect();
    text_rows.extend(batch.relation_span.clone());
    let (x_t, t_arg) = max_pool_rows_with_argmax(&text.select_rows(&text_rows))?;
    let text_argmax = t_arg.iter().map(|&i| text_rows[i]).collect();

    let cls = cls_row_indices(cfg.n_images, cfg.n_regions);
    let (x_i, c_arg) = max_pool_rows_with_argmax(&projected.select_rows(&cls))?;
    let cls_argmax = c_arg.iter().map(|&i| cls[i]).collect();

    let p = &model.params.mvtc;
    let want_text = matches!(cfg.visual_mode, VisualMode::Full | VisualMode::NoImageView);
    let want_image = matches!(cfg.visual_mode, VisualMode::Full | VisualMode::NoTextView);
    let (i_text, text_view) = if want_text {
        let (m, c) = mha_compress_cached(&x_t, &projected, &p.text, cfg.heads)?;
        (Some(m), Some(c))
    } else {
        (None, None)
    };
    let (i_image, image_view) = if want_image {
        let (m, c) = mha_compress_cached(&x_i, &projected, &p.image, cfg.heads)?;
        (Some(m), Some(c))
    } else {
        (None, None)
    };

    let mut tags = Vec::with_capacity(visual_count + k);
    let visual = match cfg.visual_mode {
        VisualMode::Uncompressed => {
            tags.extend(std::iter::repeat_n(Modality::VisualRegion, projected.rows()));
            projected.clone()
        }
        _ => {
            let mut parts = Vec::new();
            if let Some(m) = &i_image {
                tags.extend(std::iter::repeat_n(Modality::VisualImageView, m.rows()));
                parts.push(m);
            }
            if let Some(m) = &i_text {
                tags.extend(std::iter::repeat_n(Modality::VisualTextView, m.rows()));
                parts.push(m);
            }
            Matrix::concat_rows(&parts)?
        }
    };
    debug_assert_eq!(visual.rows(), visual_count);
    let mut visual = visual;
    for r in 0..visual_count {
        for (o, pe) in visual.row_mut(r).iter_mut().zip(model.params.pos_emb.row(r)) {
            *o += pe;
        }
    }
    tags.extend(std::iter::repeat_n(Modality::Text, k));
    let states = Matrix::concat_rows(&[&visual, &text])?;
    model.check_sequence(&states)?;
    Ok(Compressed {
        sequence: HiddenStates::new(states, tags)?,
        visual_count,
        cache: CompressCache {
            text_ids: batch.text_ids.clone(),
            visual_features: batch.visual.clone(),
            projected,
            visual_count,
            text_argmax,
            cls_argmax,
            text_view,
            image_view,
        },
    })
}

/// Reverse pass of [`compress`] given the gradient of the joint sequence.
pub fn compress_backward(model: &Model, c: &Compressed, d_seq: &Matrix, grads: &mut Params) {
    let cfg = &model.config;
    let cache = &c.cache;
    let v = cache.visual_count;
    let heads = cfg.heads;
    let dm = cfg.d_model;
    let mut d_text = d_seq.slice_rows(v, d_seq.rows());
    let mut d_proj = Matrix::zeros(cache.projected.rows(), dm);

    for r in 0..v {
        for (g, x) in grads.pos_emb.row_mut(r).iter_mut().zip(d_seq.row(r)) {
            *g += x;
        }
    }
    match cfg.visual_mode {
        VisualMode::Uncompressed => d_proj.add_assign(&d_seq.slice_rows(0, v)),
        mode => {
            let mut next = 0;
            if let Some(ic) = &cache.image_view {
                let d_out = d_seq.slice_rows(next, next + heads);
                next += heads;
                let dx = mha_backward(
                    &d_out,
                    ic,
                    &cache.projected,
                    &model.params.mvtc.image,
                    &mut grads.mvtc.image,
                    &mut d_proj,
                    heads,
                );
                for (j, &row) in cache.cls_argmax.iter().enumerate() {
                    d_proj.row_mut(row)[j] += dx[j];
                }
            }
            if let Some(tc) = &cache.text_view {
                let d_out = d_seq.slice_rows(next, next + heads);
                let dx = mha_backward(
                    &d_out,
                    tc,
                    &cache.projected,
                    &model.params.mvtc.text,
                    &mut grads.mvtc.text,
                    &mut d_proj,
                    heads,
                );
                for (j, &row) in cache.text_argmax.iter().enumerate() {
                    d_text.row_mut(row)[j] += dx[j];
                }
            }
            debug_assert!(mode != VisualMode::Full || next == heads);
        }
    }

    for (i, &id) in cache.text_ids.iter().enumerate() {
        let dr = d_text.row(i);
        for (g, x) in grads.tok_emb.row_mut(id).iter_mut().zip(dr) {
            *g += x;
        }
        for (g, x) in grads.pos_emb.row_mut(v + i).iter_mut().zip(dr) {
            *g += x;
        }
    }
    cache.visual_features.t_matmul_acc(&d_proj, &mut grads.vis_w);
    for (g, x) in grads.vis_b.data_mut().iter_mut().zip(d_proj.column_sums()) {
        *g += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig};
    use crate::numerics::SeededRng;

    fn cfg(n_images: usize, n_regions: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            vocab_size: 10,
            n_images,
            n_regions,
            visual_dim: 6,
            max_seq: 256,
            num_entities: 5,
            mlp_hidden: 8,
            layer_norm: true,
            visual_mode: VisualMode::Full,
            head: HeadKind::Completion,
        }
    }

    /// Loop-based evaluation of the per-head compression equations.
    fn reference_mha(x: &[f64], it: &Matrix, view: &MvtcView, heads: usize) -> Matrix {
        let (n, dm) = it.shape();
        let hd = dm / heads;
        let mut out = Matrix::zeros(heads, dm);
        for h in 0..heads {
            let mut q = vec![0.0; hd];
            for t in 0..hd {
                for a in 0..dm {
                    q[t] += x[a] * view.w_q.get(a, h * hd + t);
                }
            }
            let mut logits = vec![0.0; n];
            for j in 0..n {
                for t in 0..hd {
                    let mut kjt = 0.0;
                    for a in 0..dm {
                        kjt += it.get(j, a) * view.w_k.get(a, h * hd + t);
                    }
                    logits[j] += q[t] * kjt;
                }
                logits[j] /= (hd as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..n {
                let w = (logits[j] - mx).exp() / z;
                for c in 0..dm {
                    let mut vjc = 0.0;
                    for a in 0..dm {
                        vjc += it.get(j, a) * view.w_v.get(a, c);
                    }
                    out.set(h, c, out.get(h, c) + w * vjc);
                }
            }
        }
        out
    }

    #[test]
    fn fuse_examples() {
        let v = Matrix::row_vector(&[0.5, -1.0]);
        assert_eq!(fuse_text_query(&v, &v).unwrap(), vec![0.5, -1.0]);
        let e = Matrix::row_vector(&[1.0, 0.0]);
        let r = Matrix::row_vector(&[0.0, 1.0]);
        assert_eq!(fuse_text_query(&e, &r).unwrap(), vec![1.0, 1.0]);
        assert!(fuse_text_query(&Matrix::zeros(0, 2), &r).is_err());

        let cls = Matrix::from_rows(&[vec![2.0, -1.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(fuse_visual_query(&cls).unwrap(), vec![2.0, 3.0]);
        assert_eq!(fuse_visual_query(&e).unwrap(), vec![1.0, 0.0]);
        assert!(fuse_visual_query(&Matrix::zeros(0, 2)).is_err());

        let mut rng = SeededRng::new(1);
        let a = rng.normal_matrix(3, 6, 1.0);
        let b = rng.normal_matrix(2, 6, 1.0);
        let got = fuse_text_query(&a, &b).unwrap();
        for j in 0..6 {
            let want = (0..3).map(|i| a.get(i, j)).chain((0..2).map(|i| b.get(i, j))).fold(f64::MIN, f64::max);
            assert_eq!(got[j], want);
        }
        let many = rng.normal_matrix(10, 6, 1.0);
        let got = fuse_visual_query(&many).unwrap();
        for j in 0..6 {
            assert_eq!(got[j], (0..10).map(|i| many.get(i, j)).fold(f64::MIN, f64::max));
        }
    }

    #[test]
    fn mha_single_token_returns_value_row() {
        let model = Model::new(cfg(1, 1), 3).unwrap();
        let view = &model.params.mvtc.text;
        let mut rng = SeededRng::new(2);
        let tok = rng.normal_matrix(1, 8, 1.0);
        let x = rng.normal_vec(8, 1.0);
        let out = mha_compress(&x, &tok, view, 2).unwrap();
        let v = tok.matmul(&view.w_v);
        for h in 0..2 {
            assert_eq!(out.row(h), v.row(0));
        }
        assert!(mha_compress(&x, &Matrix::zeros(0, 8), view, 2).is_err());
    }

    #[test]
    fn mha_identical_keys_split_evenly() {
        let model = Model::new(cfg(1, 1), 3).unwrap();
        let row = SeededRng::new(5).normal_matrix(1, 8, 1.0);
        let toks = Matrix::concat_rows(&[&row, &row]).unwrap();
        let x = SeededRng::new(6).normal_vec(8, 1.0);
        let (_, c) = mha_compress_cached(&x, &toks, &model.params.mvtc.text, 2).unwrap();
        for w in c.weights() {
            assert_eq!(w, &vec![0.5, 0.5]);
        }
    }

    #[test]
    fn mha_matches_loop_reference() {
        let model = Model::new(cfg(2, 2), 11).unwrap();
        let mut rng = SeededRng::new(12);
        let it = rng.normal_matrix(6, 8, 1.0);
        let x = rng.normal_vec(8, 1.0);
        let view = &model.params.mvtc.image;
        let got = mha_compress(&x, &it, view, 2).unwrap();
        let want = reference_mha(&x, &it, view, 2);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    fn batch_for(model: &Model, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let visual = rng.normal_matrix(model.config.visual_rows(), model.config.visual_dim, 1.0);
        (visual, vec![1, 2, 3, 7, 9])
    }

    #[test]
    fn compress_shapes_and_composition() {
        let model = Model::new(cfg(5, 3), 4).unwrap();
        let (visual, ids) = batch_for(&model, 1);
        let batch = MultimodalBatch {
            visual: &visual,
            text_ids: ids.clone(),
            entity_span: 0..3,
            relation_span: 3..5,
        };
        let c = compress(&model, &batch).unwrap();
        assert_eq!(c.sequence.len(), 2 * 2 + 5);

        // First H rows are the visual view, next H the textual view.
        let it = model.project_visual(&visual).unwrap();
        let cls = it.select_rows(&cls_row_indices(5, 3));
        let x_i = fuse_visual_query(&cls).unwrap();
        let text = model.embed_text(&ids, 4).unwrap();
        let x_t = fuse_text_query(&text.slice_rows(0, 3), &text.slice_rows(3, 5)).unwrap();
        let mut i_image = mha_compress(&x_i, &it, &model.params.mvtc.image, 2).unwrap();
        let mut i_text = mha_compress(&x_t, &it, &model.params.mvtc.text, 2).unwrap();
        for r in 0..2 {
            for (o, p) in i_image.row_mut(r).iter_mut().zip(model.params.pos_emb.row(r)) {
                *o += p;
            }
            for (o, p) in i_text.row_mut(r).iter_mut().zip(model.params.pos_emb.row(r + 2)) {
                *o += p;
            }
        }
        let s = &c.sequence.states;
        assert_eq!(s.slice_rows(0, 2), i_image);
        assert_eq!(s.slice_rows(2, 4), i_text);
        assert_eq!(s.slice_rows(4, 9), text);
        assert_eq!(c.sequence.tags[0], Modality::VisualImageView);
        assert_eq!(c.sequence.tags[2], Modality::VisualTextView);
        assert_eq!(c.sequence.tags[4], Modality::Text);

        let wide = Model::new(cfg(10, 3), 4).unwrap();
        let (visual, _) = batch_for(&wide, 2);
        let batch = MultimodalBatch { visual: &visual, ..batch };
        assert_eq!(compress(&wide, &batch).unwrap().sequence.len(), 9);
    }

    #[test]
    fn compress_rejects_missing_spans() {
        let model = Model::new(cfg(2, 2), 4).unwrap();
        let (visual, ids) = batch_for(&model, 1);
        let batch = MultimodalBatch {
            visual: &visual,
            text_ids: ids,
            entity_span: 0..0,
            relation_span: 3..5,
        };
        assert!(compress(&model, &batch).is_err());
        let batch = MultimodalBatch { entity_span: 0..2, relation_span: 4..9, ..batch };
        assert!(compress(&model, &batch).is_err());
    }

    #[test]
    fn ablation_modes_change_visual_rows() {
        for (mode, rows) in [
            (VisualMode::NoTextView, 2),
            (VisualMode::NoImageView, 2),
            (VisualMode::Uncompressed, 3 * 4),
        ] {
            let mut c = cfg(3, 3);
            c.visual_mode = mode;
            let model = Model::new(c, 4).unwrap();
            let (visual, ids) = batch_for(&model, 1);
            let batch = MultimodalBatch {
                visual: &visual,
                text_ids: ids,
                entity_span: 0..2,
                relation_span: 2..3,
            };
            let out = compress(&model, &batch).unwrap();
            assert_eq!(out.visual_count, rows);
            assert_eq!(out.sequence.len(), rows + 5);
        }
    }

    #[test]
    fn image_order_permutation_is_bitwise_invariant() {
        let model = Model::new(cfg(4, 3), 21).unwrap();
        let (visual, ids) = batch_for(&model, 22);
        let block = 4;
        let perm_images = [2, 0, 3, 1];
        let rows: Vec<usize> = perm_images
            .iter()
            .flat_map(|&k| (k * block)..(k + 1) * block)
            .collect();
        let shuffled = visual.select_rows(&rows);
        let mk = |v| MultimodalBatch {
            visual: v,
            text_ids: ids.clone(),
            entity_span: 0..2,
            relation_span: 2..5,
        };
        let a = compress(&model, &mk(&visual)).unwrap();
        let b = compress(&model, &mk(&shuffled)).unwrap();
        assert_eq!(a.sequence.states, b.sequence.states);
    }
}
