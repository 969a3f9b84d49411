//! Attention-sublayer pruning: similarity profiling, layer selection and the
//! least-squares compensation `W_c` fitted bottom-up.

use serde::{Deserialize, Serialize};

use crate::data::{MkgDataset, Query, Split};
use crate::error::{invalid, shape, Result};
use crate::eval::attention_flops;
use crate::model::{ActivationTrace, Model};
use crate::mvtc::compress;
use crate::numerics::{cosine_similarity, pinv, Matrix, SeededRng};

/// Default number of profiled / fitted samples.
pub const DEFAULT_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    /// Mean input/output cosine similarity of each layer's attention sublayer.
    pub layers: Vec<f64>,
    pub samples: usize,
    /// Rows whose similarity was undefined (a zero vector) and counted as 0.
    pub degenerate_rows: usize,
}

impl SimilarityProfile {
    /// `layer,similarity` with one row per layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,similarity\n");
        for (l, v) in self.layers.iter().enumerate() {
            s.push_str(&format!("{l},{v}\n"));
        }
        s
    }
}

/// Averages cosine similarity between every input row and the matching output
/// row, over all positions and samples of each layer.
pub fn profile_from_trace(trace: &ActivationTrace) -> Result<SimilarityProfile> {
    let mut layers = Vec::with_capacity(trace.layers.len());
    let mut degenerate = 0;
    let mut samples = 0;
    for points in &trace.layers {
        let (mut sum, mut count) = (0.0, 0usize);
        for p in points {
            if p.input.shape() != p.output.shape() {
                return Err(shape("trace input and output shapes differ"));
            }
            for r in 0..p.input.rows() {
                let c = cosine_similarity(p.input.row(r), p.output.row(r))?;
                degenerate += usize::from(c.degenerate);
                sum += c.value;
                count += 1;
            }
        }
        if count == 0 {
            return Err(invalid("trace holds no rows for a layer"));
        }
        samples = samples.max(points.len());
        layers.push(sum / count as f64);
    }
    Ok(SimilarityProfile {
        layers,
        samples,
        degenerate_rows: degenerate,
    })
}

/// Up to `s` training queries without replacement, in a seeded order.
pub fn sample_queries(dataset: &MkgDataset, s: usize, rng: &mut SeededRng) -> Result<Vec<Query>> {
    if s == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let mut q = dataset.queries(Split::Train);
    if q.is_empty() {
        return Err(invalid("training split is empty"));
    }
    rng.shuffle(&mut q);
    q.truncate(s);
    Ok(q)
}

/// Joint input sequences (after compression) for `queries`.
pub fn input_sequences(model: &Model, dataset: &MkgDataset, queries: &[Query]) -> Result<Vec<Matrix>> {
    queries
        .iter()
        .map(|q| compress(model, &dataset.batch(q)).map(|c| c.sequence.states))
        .collect()
}

pub fn profile_attention_similarity(
    model: &Model,
    dataset: &MkgDataset,
    s: usize,
    rng: &mut SeededRng,
) -> Result<SimilarityProfile> {
    let queries = sample_queries(dataset, s, rng)?;
    let l = model.config.layers;
    let mut sums = vec![0.0; l];
    let mut counts = vec![0usize; l];
    let mut degenerate = 0;
    for q in &queries {
        let c = compress(model, &dataset.batch(q))?;
        let (_, trace) = model.forward(&c.sequence, true)?;
        let single = profile_from_trace(&trace.expect("trace requested"))?;
        let rows = c.sequence.len();
        for (i, v) in single.layers.iter().enumerate() {
            sums[i] += v * rows as f64;
            counts[i] += rows;
        }
        degenerate += single.degenerate_rows;
    }
    Ok(SimilarityProfile {
        layers: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        samples: queries.len(),
        degenerate_rows: degenerate,
    })
}

/// The `k_p` most similar layers (lower index wins ties), sorted ascending.
pub fn select_prune_layers(profile: &SimilarityProfile, k_p: usize) -> Result<Vec<usize>> {
    let l = profile.layers.len();
    if k_p > l {
        return Err(invalid(format!("cannot prune {k_p} of {l} layers")));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| profile.layers[b].total_cmp(&profile.layers[a]).then(a.cmp(&b)));
    let mut chosen = order[..k_p].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationMode {
    /// Fit the mean pruned-path vector to the mean error (rank-one `W_c`).
    #[default]
    Mean,
    /// Fit every stacked row.
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ErrorSample {
    Mean { x: Vec<f64>, eps: Vec<f64> },
    Stacked { x: Matrix, eps: Matrix },
}

impl ErrorSample {
    pub fn mode(&self) -> CompensationMode {
        match self {
            ErrorSample::Mean { .. } => CompensationMode::Mean,
            ErrorSample::Stacked { .. } => CompensationMode::Sample,
        }
    }

    /// Design and target as matrices (`1 x D` in mean mode).
    pub fn design(&self) -> (Matrix, Matrix) {
        match self {
            ErrorSample::Mean { x, eps } => (Matrix::row_vector(x), Matrix::row_vector(eps)),
            ErrorSample::Stacked { x, eps } => (x.clone(), eps.clone()),
        }
    }

    /// `||X W - E||_F`.
    pub fn residual(&self, w: &Matrix) -> f64 {
        let (x, e) = self.design();
        x.matmul(w).sub(&e).frobenius_norm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compensation {
    pub w: Matrix,
    /// Mean mode with `x̄ = 0`: no information, `W_c` returned as zero.
    pub degenerate: bool,
}

/// Minimum-norm least squares `W_c = pinv(X) E`.
pub fn estimate_compensation(sample: &ErrorSample) -> Result<Compensation> {
    let (x, e) = sample.design();
    if x.shape() != e.shape() {
        return Err(shape(format!("design {:?} vs target {:?}", x.shape(), e.shape())));
    }
    if x.rows() == 0 || x.cols() == 0 {
        return Err(invalid("empty error sample"));
    }
    let d = x.cols();
    if let ErrorSample::Mean { x, .. } = sample {
        if x.iter().all(|&v| v == 0.0) {
            return Ok(Compensation {
                w: Matrix::zeros(d, d),
                degenerate: true,
            });
        }
    }
    Ok(Compensation {
        w: pinv(&x)?.matmul(&e),
        degenerate: false,
    })
}

/// `x̄ᵀ ε̄ / ||x̄||²`, the closed form of the mean-mode fit.
pub fn rank_one_compensation(x: &[f64], eps: &[f64]) -> Result<Matrix> {
    if x.len() != eps.len() {
        return Err(shape("x̄ and ε̄ lengths differ"));
    }
    let nn: f64 = x.iter().map(|v| v * v).sum();
    let d = x.len();
    let mut w = Matrix::zeros(d, d);
    if nn == 0.0 {
        return Ok(w);
    }
    for i in 0..d {
        for (j, e) in eps.iter().enumerate() {
            w.set(i, j, x[i] * e / nn);
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub mode: CompensationMode,
    pub degenerate: bool,
    /// Residual of the objective that `mode` fits: `||ε̄ - x̄ W||` for mean
    /// mode, `||E - X W||_F` for sample mode. `pre` uses `W = 0`.
    pub residual_pre: f64,
    pub residual_post: f64,
    /// The stacked per-row residual, whatever the mode.
    pub stacked_residual_pre: f64,
    pub stacked_residual_post: f64,
    pub samples: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationPlan {
    pub layers: Vec<usize>,
    pub mode: CompensationMode,
    pub entries: Vec<PlanEntry>,
    /// Attention FLOP ratio after pruning, `(L - K_p) / L`.
    pub attention_flop_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<SimilarityProfile>,
    #[serde(skip)]
    pub matrices: Vec<Matrix>,
}

fn stack(rows: impl Iterator<Item = Matrix>) -> Result<Matrix> {
    let parts: Vec<Matrix> = rows.collect();
    let refs: Vec<&Matrix> = parts.iter().collect();
    Matrix::concat_rows(&refs)
}

/// Prunes `layers` of a copy of `model`, fitting each `W_c` in ascending order
/// so that every fit sees the already-compensated layers below it.
///
/// At pruned layer `l`, with `x_o` / `x_p` the residual streams entering the
/// block in the original / partially pruned model, the target is
/// `ε = (x_o + A(LN x_o)) - x_p` and the design is `LN(x_p)`: exactly what the
/// compensated block adds on top of `x_p`.
pub fn fit_all_compensations(
    model: &Model,
    inputs: &[Matrix],
    layers: &[usize],
    mode: CompensationMode,
) -> Result<(Model, CompensationPlan)> {
    let nl = model.config.layers;
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("pruned layers must be strictly increasing"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= nl) {
        return Err(invalid(format!("layer {bad} out of range for {nl} layers")));
    }
    if !layers.is_empty() && inputs.is_empty() {
        return Err(invalid("no samples to fit compensation on"));
    }
    let mut pruned = model.clone();
    let mut entries = Vec::with_capacity(layers.len());
    let mut matrices = Vec::with_capacity(layers.len());
    let mut targets: Vec<Vec<Matrix>> = vec![Vec::new(); layers.len()];
    for x in inputs {
        let (_, caches) = model.run_blocks(x, true)?;
        for (slot, &l) in layers.iter().enumerate() {
            targets[slot].push(caches[l].residual_in.add(&caches[l].attn_out));
        }
    }
    for (slot, &l) in layers.iter().enumerate() {
        let mut designs = Vec::with_capacity(inputs.len());
        let mut errors = Vec::with_capacity(inputs.len());
        for (x, target) in inputs.iter().zip(&targets[slot]) {
            let (_, caches) = pruned.run_blocks(x, true)?;
            let c = &caches[l];
            errors.push(target.sub(&c.residual_in));
            designs.push(c.attn_in.clone());
        }
        let x_all = stack(designs.into_iter())?;
        let e_all = stack(errors.into_iter())?;
        let sample = match mode {
            CompensationMode::Mean => ErrorSample::Mean {
                x: x_all.column_means(),
                eps: e_all.column_means(),
            },
            CompensationMode::Sample => ErrorSample::Stacked {
                x: x_all.clone(),
                eps: e_all.clone(),
            },
        };
        let comp = estimate_compensation(&sample)?;
        let d = model.config.d_model;
        let zero = Matrix::zeros(d, d);
        let stacked = ErrorSample::Stacked { x: x_all, eps: e_all };
        entries.push(PlanEntry {
            layer: l,
            mode,
            degenerate: comp.degenerate,
            residual_pre: sample.residual(&zero),
            residual_post: sample.residual(&comp.w),
            stacked_residual_pre: stacked.residual(&zero),
            stacked_residual_post: stacked.residual(&comp.w),
            samples: inputs.len(),
            rows: stacked.design().0.rows(),
        });
        pruned.prune_layer(l, Some(comp.w.clone()))?;
        matrices.push(comp.w);
    }
    let plan = CompensationPlan {
        layers: layers.to_vec(),
        mode,
        entries,
        attention_flop_ratio: flop_ratio(nl, layers.len()),
        profile: None,
        matrices,
    };
    Ok((pruned, plan))
}

/// Attention FLOP ratio after pruning `k_p` of `l` layers.
pub fn flop_ratio(l: usize, k_p: usize) -> f64 {
    let full = attention_flops(1, 1, l);
    if full == 0 {
        return 0.0;
    }
    attention_flops(1, 1, l - k_p) as f64 / full as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::{HiddenStates, Modality, TracePoint};

    fn profile(v: &[f64]) -> SimilarityProfile {
        SimilarityProfile {
            layers: v.to_vec(),
            samples: 1,
            degenerate_rows: 0,
        }
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_prune_layers(&profile(&[0.9, 0.2, 0.95]), 2).unwrap(), vec![0, 2]);
        assert!(select_prune_layers(&profile(&[0.9, 0.2, 0.95]), 0).unwrap().is_empty());
        assert_eq!(select_prune_layers(&profile(&[0.5, 0.5, 0.1]), 1).unwrap(), vec![0]);
        assert!(select_prune_layers(&profile(&[0.5]), 2).is_err());
    }

    fn point(input: Matrix, output: Matrix) -> TracePoint {
        TracePoint {
            residual_in: input.clone(),
            input,
            output,
        }
    }

    #[test]
    fn identity_and_negation_layers() {
        let mut rng = SeededRng::new(1);
        let x = rng.normal_matrix(4, 6, 1.0);
        let trace = ActivationTrace {
            layers: vec![vec![point(x.clone(), x.clone())], vec![point(x.clone(), x.scaled(-1.0))]],
        };
        let p = profile_from_trace(&trace).unwrap();
        assert!((p.layers[0] - 1.0).abs() < 1e-15);
        assert!((p.layers[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn injected_similarities_are_recovered() {
        // Output rows built at a fixed angle to the input: cos = 0.9 and 0.1.
        let mut rng = SeededRng::new(2);
        let mut layers = Vec::new();
        for &c in &[0.9f64, 0.1] {
            let mut pts = Vec::new();
            for _ in 0..3 {
                let input = rng.normal_matrix(5, 4, 1.0);
                let mut output = Matrix::zeros(5, 4);
                for r in 0..5 {
                    let a = input.row(r).to_vec();
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut b = rng.normal_vec(4, 1.0);
                    let proj = crate::numerics::dot(&a, &b) / (na * na);
                    b.iter_mut().zip(&a).for_each(|(bv, av)| *bv -= proj * av);
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = (1.0 - c * c).sqrt();
                    for j in 0..4 {
                        output.set(r, j, c * a[j] / na + s * b[j] / nb);
                    }
                }
                pts.push(point(input, output));
            }
            layers.push(pts);
        }
        let p = profile_from_trace(&ActivationTrace { layers }).unwrap();
        assert!((p.layers[0] - 0.9).abs() < 1e-12);
        assert!((p.layers[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn estimate_examples() {
        let zero = estimate_compensation(&ErrorSample::Mean {
            x: vec![0.3, -1.0, 2.0],
            eps: vec![0.0; 3],
        })
        .unwrap();
        assert_eq!(zero.w, Matrix::zeros(3, 3));

        let u = vec![0.5, -2.0, 1.5];
        let w = estimate_compensation(&ErrorSample::Mean {
            x: vec![1.0, 0.0, 0.0],
            eps: u.clone(),
        })
        .unwrap()
        .w;
        assert!(w.row(0).iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(w.row(1).iter().chain(w.row(2)).all(|&v| v == 0.0));

        let deg = estimate_compensation(&ErrorSample::Mean {
            x: vec![0.0; 3],
            eps: u,
        })
        .unwrap();
        assert!(deg.degenerate);
        assert_eq!(deg.w, Matrix::zeros(3, 3));
    }

    #[test]
    fn mean_mode_matches_closed_form() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_vec(12, 1.0);
        let e = rng.normal_vec(12, 1.0);
        let a = estimate_compensation(&ErrorSample::Mean { x: x.clone(), eps: e.clone() }).unwrap().w;
        let b = rank_one_compensation(&x, &e).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn empty_plan_leaves_model_unchanged() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let x = SeededRng::new(4).normal_matrix(6, 8, 1.0);
        let (pruned, plan) = fit_all_compensations(&model, &[x.clone()], &[], CompensationMode::Mean).unwrap();
        assert_eq!(pruned, model);
        assert!(plan.entries.is_empty());
        assert_eq!(plan.attention_flop_ratio, 1.0);
        let tags = vec![Modality::Text; 6];
        let hs = HiddenStates::new(x, tags).unwrap();
        assert_eq!(pruned.forward(&hs, false).unwrap().0, model.forward(&hs, false).unwrap().0);
    }

    #[test]
    fn fitted_layers_reduce_their_residual() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let mut rng = SeededRng::new(5);
        let inputs: Vec<Matrix> = (0..20).map(|_| rng.normal_matrix(7, 8, 1.0)).collect();
        for mode in [CompensationMode::Mean, CompensationMode::Sample] {
            let (pruned, plan) = fit_all_compensations(&model, &inputs, &[0, 1], mode).unwrap();
            assert_eq!(pruned.pruned_layers(), vec![0, 1]);
            for e in &plan.entries {
                assert!(e.residual_post <= e.residual_pre, "{e:?}");
            }
            assert_eq!(plan.attention_flop_ratio, 0.0);
        }
    }

    #[test]
    fn bad_layer_lists_are_rejected() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let x = vec![Matrix::zeros(2, 8)];
        assert!(fit_all_compensations(&model, &x, &[1, 0], CompensationMode::Mean).is_err());
        assert!(fit_all_compensations(&model, &x, &[2], CompensationMode::Mean).is_err());
    }

    #[test]
    fn flop_ratio_is_exact() {
        assert_eq!(flop_ratio(8, 4), 0.5);
        assert_eq!(flop_ratio(8, 8), 0.0);
        assert_eq!(flop_ratio(8, 0), 1.0);
    }
}
