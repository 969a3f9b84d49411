#![allow(dead_code)]

use elmm::data::{generate_synthetic_mkg, GenConfig, MkgDataset, Query, Split};
use elmm::kgc::{batch_gradient, loss_from_logits, sample_negatives, score_query};
use elmm::model::{HeadKind, Model, ModelConfig, VisualMode};
use elmm::numerics::SeededRng;

/// D=8, H=2, L=2 over a 20-entity synthetic graph.
pub fn tiny_setup(mode: VisualMode, head: HeadKind) -> (Model, MkgDataset) {
    let gen = GenConfig {
        num_entities: 20,
        num_relations: 2,
        train_triples: 60,
        dev_triples: 8,
        test_triples: 8,
        n_images: 2,
        n_regions: 3,
        visual_dim: 6,
        latent_dim: 4,
        signal_regions: 1,
        ..GenConfig::default()
    };
    let d = generate_synthetic_mkg(&gen).unwrap().dataset;
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        vocab_size: d.vocab_size,
        n_images: 2,
        n_regions: 3,
        visual_dim: 6,
        max_seq: 16,
        num_entities: 20,
        mlp_hidden: 12,
        layer_norm: true,
        visual_mode: mode,
        head,
    };
    (Model::new(cfg, 11).unwrap(), d)
}

fn batch_loss(model: &Model, d: &MkgDataset, items: &[(Query, Vec<usize>)]) -> f64 {
    let mut total = 0.0;
    for (q, negs) in items {
        let out = score_query(model, &d.batch(q)).unwrap();
        total += loss_from_logits(&out.logits, q.target, negs).unwrap().0;
    }
    total / items.len() as f64
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    pub failures: Vec<String>,
}

/// Compares every analytic gradient entry with a central difference.
/// An entry passes when `|a - n| <= tol * max(|a|, |n|, floor)`.
pub fn gradcheck(model: &Model, d: &MkgDataset, items: &[(Query, Vec<usize>)], h: f64, tol: f64, floor: f64) -> GradCheck {
    let (_, grads) = batch_gradient(model, d, items).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, m)| (n, m.data().to_vec())).collect();
    let mut probe = model.clone();
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
        failures: Vec::new(),
    };
    for (t, (name, a)) in analytic.iter().enumerate() {
        if model.freeze_compensation && name.ends_with(".compensation") {
            continue;
        }
        for i in 0..a.len() {
            let orig = model.params.tensors()[t].1.data()[i];
            probe.params.tensors_mut()[t].1.data_mut()[i] = orig + h;
            let up = batch_loss(&probe, d, items);
            probe.params.tensors_mut()[t].1.data_mut()[i] = orig - h;
            let down = batch_loss(&probe, d, items);
            probe.params.tensors_mut()[t].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a[i] - numeric).abs() / a[i].abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_name = format!("{name}[{i}]");
            }
            if rel > tol {
                out.failures.push(format!("{name}[{i}]: analytic {} numeric {numeric}", a[i]));
            }
        }
    }
    out
}

/// `count` train queries with fixed negative sets.
pub fn sample_items(d: &MkgDataset, count: usize, negatives: usize, rng: &mut SeededRng) -> Vec<(Query, Vec<usize>)> {
    let mut qs = d.queries(Split::Train);
    rng.shuffle(&mut qs);
    qs.truncate(count);
    qs.into_iter()
        .map(|q| {
            let n = sample_negatives(q.known, q.target, d.num_entities(), negatives, rng).unwrap();
            (q, n)
        })
        .collect()
}

/// D=8, H=2 model for `n` images of `m` regions and `k` text tokens.
pub fn mvtc_model(n: usize, m: usize, k: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        vocab_size: 12,
        n_images: n,
        n_regions: m,
        visual_dim: 5,
        max_seq: (n * (m + 1)).max(4) + k,
        num_entities: 7,
        mlp_hidden: 8,
        layer_norm: true,
        visual_mode: VisualMode::Full,
        head: HeadKind::Completion,
    };
    Model::new(cfg, seed).unwrap()
}
