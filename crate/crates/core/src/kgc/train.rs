use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{MkgDataset, Query, Split};
use crate::error::{invalid, ElmmError, Result};
use crate::eval::{evaluate, ModelScorer};
use crate::kgc::{loss_from_logits, query_backward, query_forward, sample_negatives};
use crate::model::{Model, Params};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Score the dev split after every epoch.
    pub eval_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            negatives: 64,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            eval_dev: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("train.lr must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("train.eps must be positive"));
        }
        if self.negatives == 0 {
            return Err(invalid("train.negatives must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "dev_MR")]
    pub dev_mr: Option<f64>,
    pub dev_hits1: Option<f64>,
    pub dev_hits3: Option<f64>,
    pub dev_hits10: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// Applies one update. Tensors for which `frozen(name)` holds are left
    /// untouched, moments included.
    pub fn step(&mut self, params: &mut Params, grads: &Params, frozen: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
            if frozen(&name) {
                continue;
            }
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn frozen_filter(model: &Model) -> impl Fn(&str) -> bool {
    let freeze = model.freeze_compensation;
    move |name: &str| freeze && name.ends_with(".compensation")
}

/// Mean loss and summed-then-averaged gradients over `queries`, each paired
/// with its negative set.
pub fn batch_gradient(
    model: &Model,
    dataset: &MkgDataset,
    queries: &[(Query, Vec<usize>)],
) -> Result<(f64, Params)> {
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / queries.len().max(1) as f64;
    for (q, negs) in queries {
        let batch = dataset.batch(q);
        let pass = query_forward(model, &batch)?;
        let (l, mut d) = loss_from_logits(&pass.output.logits, q.target, negs)?;
        if !l.is_finite() {
            return Err(ElmmError::Diverged(format!(
                "non-finite loss for query (known {}, relation {}, target {})",
                q.known, q.relation, q.target
            )));
        }
        total += l;
        d.iter_mut().for_each(|v| *v *= scale);
        query_backward(model, &pass, &d, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Trains in place. One JSON line per epoch goes to `log_sink` when given.
pub fn train(
    model: &mut Model,
    dataset: &MkgDataset,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let r = dataset.num_entities();
    if r != model.config.num_entities {
        return Err(invalid(format!(
            "model scores {} entities, dataset has {r}",
            model.config.num_entities
        )));
    }
    if cfg.negatives >= r {
        return Err(invalid(format!(
            "train.negatives ({}) must be below the entity count ({r})",
            cfg.negatives
        )));
    }
    let root = SeededRng::new(cfg.seed);
    let mut order_rng = root.fork(0);
    let mut neg_rng = root.fork(1);
    let mut queries = dataset.queries(Split::Train);
    if queries.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut adam = Adam::new(&model.params, cfg);
    let frozen = frozen_filter(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order_rng.shuffle(&mut queries);
        let mut epoch_loss = 0.0;
        for chunk in queries.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for q in chunk {
                items.push((*q, sample_negatives(q.known, q.target, r, cfg.negatives, &mut neg_rng)?));
            }
            let (l, grads) = batch_gradient(model, dataset, &items)?;
            if grads.tensors().iter().any(|(_, m)| !m.is_finite()) {
                return Err(ElmmError::Diverged(format!("non-finite gradient at epoch {epoch}, step {steps}")));
            }
            adam.step(&mut model.params, &grads, &frozen);
            epoch_loss += l * chunk.len() as f64;
            steps += 1;
        }
        let mean_loss = epoch_loss / queries.len() as f64;
        if !mean_loss.is_finite() {
            return Err(ElmmError::Diverged(format!("loss became {mean_loss} in epoch {epoch}")));
        }
        let dev = if cfg.eval_dev && !dataset.dev.is_empty() {
            Some(evaluate(&mut ModelScorer::new(model), dataset, Split::Dev, true)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            loss: mean_loss,
            dev_mr: dev.as_ref().map(|d| d.mr),
            dev_hits1: dev.as_ref().map(|d| d.hits1),
            dev_hits3: dev.as_ref().map(|d| d.hits3),
            dev_hits10: dev.as_ref().map(|d| d.hits10),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(sink) = log_sink.as_mut() {
            writeln!(sink, "{}", serde_json::to_string(&entry)?)?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome { log, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_mkg, GenConfig};
    use crate::model::{HeadKind, ModelConfig, VisualMode};

    fn setup() -> (Model, MkgDataset) {
        let gen = GenConfig {
            num_entities: 20,
            num_relations: 2,
            train_triples: 40,
            dev_triples: 6,
            test_triples: 6,
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
            mlp_hidden: 16,
            layer_norm: true,
            visual_mode: VisualMode::Full,
            head: HeadKind::Completion,
        };
        (Model::new(cfg, 1).unwrap(), d)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, d) = setup();
        let before = model.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            negatives: 5,
            eval_dev: false,
            ..TrainConfig::default()
        };
        train(&mut model, &d, &cfg, None).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn fixed_batch_loss_decreases() {
        let (mut model, d) = setup();
        let cfg = TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let mut rng = SeededRng::new(3);
        let items: Vec<(Query, Vec<usize>)> = d.queries(Split::Train)[..8]
            .iter()
            .map(|q| (*q, sample_negatives(q.known, q.target, 20, 5, &mut rng).unwrap()))
            .collect();
        let mut adam = Adam::new(&model.params, &cfg);
        let (first, _) = batch_gradient(&model, &d, &items).unwrap();
        let mut last = first;
        for _ in 0..50 {
            let (l, g) = batch_gradient(&model, &d, &items).unwrap();
            last = l;
            adam.step(&mut model.params, &g, |_| false);
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn same_seed_same_result_and_log_format() {
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 2,
            negatives: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (mut a, d) = setup();
        let mut b = a.clone();
        let mut sink = Vec::new();
        let log = train(&mut a, &d, &cfg, Some(&mut sink)).unwrap();
        train(&mut b, &d, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.log.len(), 2);
        let text = String::from_utf8(sink).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "loss", "dev_MR", "dev_hits1", "dev_hits3", "dev_hits10", "wall_seconds"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn frozen_compensation_is_not_updated() {
        let (mut model, d) = setup();
        let wc = SeededRng::new(9).normal_matrix(8, 8, 0.1);
        model.prune_layer(1, Some(wc.clone())).unwrap();
        model.freeze_compensation = true;
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 1,
            negatives: 5,
            eval_dev: false,
            ..TrainConfig::default()
        };
        let before = model.params.layers[0].w_q.clone();
        train(&mut model, &d, &cfg, None).unwrap();
        assert_eq!(model.params.layers[1].compensation.as_ref(), Some(&wc));
        assert_ne!(model.params.layers[0].w_q, before);

        model.freeze_compensation = false;
        train(&mut model, &d, &cfg, None).unwrap();
        assert_ne!(model.params.layers[1].compensation.as_ref(), Some(&wc));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, d) = setup();
        model.params.lnf_gain.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            negatives: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &d, &cfg, None), Err(ElmmError::Diverged(_))));
    }
}
