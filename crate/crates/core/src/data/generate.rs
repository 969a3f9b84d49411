//! Seeded synthetic multimodal knowledge graph.
//!
//! Every entity gets a unit latent vector `z_e`, drawn around one of
//! `clusters` random centres; every base relation gets a random
//! orthogonal map `R`. Candidate facts `(h, r, t)` are the `fanout` entities
//! whose latents lie closest to `z_h R`, so tails are recoverable from the
//! head's latent. Each image carries a low-noise CLS projection of the latent,
//! `signal_regions` noisier projections at random region slots, and pure-noise
//! distractor regions elsewhere. Entity names are short token strings over a
//! small vocabulary, so text alone cannot always tell entities apart.

use serde::{Deserialize, Serialize};

use crate::data::{EntityRecord, MkgDataset, RelationRecord, Triple};
use crate::error::{invalid, Result};
use crate::numerics::{dot, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub train_triples: usize,
    pub dev_triples: usize,
    pub test_triples: usize,
    pub n_images: usize,
    /// Regions per image, CLS excluded.
    pub n_regions: usize,
    pub visual_dim: usize,
    pub latent_dim: usize,
    /// Latent mixture components; 0 draws latents isotropically.
    pub clusters: usize,
    /// Spread of latents around their component centre, before normalizing.
    pub cluster_spread: f64,
    /// Regions per image that carry the entity latent; the rest are distractors.
    pub signal_regions: usize,
    pub region_noise: f64,
    pub cls_noise: f64,
    /// Nearest-latent candidates per `(head, relation)`.
    pub fanout: usize,
    /// Size of the token alphabet used for entity names.
    pub name_vocab: usize,
    pub name_len: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_entities: 200,
            num_relations: 8,
            train_triples: 3000,
            dev_triples: 300,
            test_triples: 300,
            n_images: 10,
            n_regions: 8,
            visual_dim: 32,
            latent_dim: 16,
            clusters: 20,
            cluster_spread: 0.35,
            signal_regions: 3,
            region_noise: 0.5,
            cls_noise: 0.2,
            fanout: 3,
            name_vocab: 12,
            name_len: 2,
            seed: 17,
        }
    }
}

impl GenConfig {
    pub fn vocab_size(&self) -> usize {
        self.name_vocab + 2 * self.num_relations
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gen.num_entities", self.num_entities),
            ("gen.num_relations", self.num_relations),
            ("gen.n_images", self.n_images),
            ("gen.n_regions", self.n_regions),
            ("gen.visual_dim", self.visual_dim),
            ("gen.latent_dim", self.latent_dim),
            ("gen.fanout", self.fanout),
            ("gen.name_vocab", self.name_vocab),
            ("gen.name_len", self.name_len),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.num_entities < 3 {
            return Err(invalid("gen.num_entities must be at least 3"));
        }
        if self.signal_regions > self.n_regions {
            return Err(invalid(format!(
                "gen.signal_regions ({}) exceeds gen.n_regions ({})",
                self.signal_regions, self.n_regions
            )));
        }
        if self.fanout >= self.num_entities {
            return Err(invalid("gen.fanout must be below gen.num_entities"));
        }
        let want = self.train_triples + self.dev_triples + self.test_triples;
        let avail = self.num_entities * self.num_relations * self.fanout;
        if want > avail {
            return Err(invalid(format!(
                "{want} triples requested but only {avail} can be constructed \
                 (entities x relations x fanout)"
            )));
        }
        if self.clusters > self.num_entities {
            return Err(invalid("gen.clusters exceeds gen.num_entities"));
        }
        if !(self.region_noise >= 0.0 && self.cls_noise >= 0.0 && self.cluster_spread >= 0.0) {
            return Err(invalid("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Generator-side ground truth, never written to disk.
#[derive(Clone, Debug)]
pub struct LatentTruth {
    pub latents: Vec<Vec<f64>>,
    pub relation_maps: Vec<Matrix>,
}

impl LatentTruth {
    /// Negative squared distance between the mapped known latent and each
    /// candidate. Reciprocal relation ids (`>= R`) score `z_e R` against the
    /// known entity instead.
    pub fn scores(&self, known: usize, relation: usize) -> Vec<f64> {
        let nr = self.relation_maps.len();
        if relation < nr {
            let y = map_latent(&self.latents[known], &self.relation_maps[relation]);
            self.latents.iter().map(|z| -sq_dist(&y, z)).collect()
        } else {
            let m = &self.relation_maps[relation - nr];
            let target = &self.latents[known];
            self.latents
                .iter()
                .map(|z| -sq_dist(&map_latent(z, m), target))
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedMkg {
    pub dataset: MkgDataset,
    pub truth: LatentTruth,
}

fn map_latent(z: &[f64], r: &Matrix) -> Vec<f64> {
    Matrix::row_vector(z).matmul(r).into_data()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Random orthogonal matrix by modified Gram–Schmidt on a Gaussian draw.
fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = rng.normal_vec(n, 1.0);
        for c in &cols {
            let p = dot(&v, c);
            for (x, y) in v.iter_mut().zip(c) {
                *x -= p * y;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            cols.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let mut m = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            m.set(i, j, x);
        }
    }
    m
}

/// Rounds through `f32` so in-memory features equal what the file stores.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic_mkg(cfg: &GenConfig) -> Result<GeneratedMkg> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut latent_rng = root.fork(0);
    let mut visual_rng = root.fork(1);
    let mut triple_rng = root.fork(2);
    let mut text_rng = root.fork(3);

    let ne = cfg.num_entities;
    let ld = cfg.latent_dim;
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let n = dot(&v, &v).sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect()
    };
    let centres: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| unit(latent_rng.normal_vec(ld, 1.0)))
        .collect();
    let spread = cfg.cluster_spread / (ld as f64).sqrt();
    let latents: Vec<Vec<f64>> = (0..ne)
        .map(|_| {
            if centres.is_empty() {
                unit(latent_rng.normal_vec(ld, 1.0))
            } else {
                let c = &centres[latent_rng.below(centres.len())];
                unit(c.iter().map(|x| x + spread * latent_rng.normal()).collect())
            }
        })
        .collect();
    let relation_maps: Vec<Matrix> = (0..cfg.num_relations)
        .map(|_| random_orthogonal(ld, &mut latent_rng))
        .collect();

    let mut candidates = Vec::with_capacity(ne * cfg.num_relations * cfg.fanout);
    for h in 0..ne {
        for (r, rm) in relation_maps.iter().enumerate() {
            let y = map_latent(&latents[h], rm);
            let mut order: Vec<(f64, usize)> = (0..ne)
                .filter(|&t| t != h)
                .map(|t| (sq_dist(&y, &latents[t]), t))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, t) in order.iter().take(cfg.fanout) {
                candidates.push(Triple {
                    head: h,
                    relation: r,
                    tail: t,
                });
            }
        }
    }
    triple_rng.shuffle(&mut candidates);
    let test: Vec<Triple> = candidates[..cfg.test_triples].to_vec();
    let dev: Vec<Triple> =
        candidates[cfg.test_triples..cfg.test_triples + cfg.dev_triples].to_vec();
    let start = cfg.test_triples + cfg.dev_triples;
    let train: Vec<Triple> = candidates[start..start + cfg.train_triples].to_vec();

    let p_cls = visual_rng.normal_matrix(ld, cfg.visual_dim, 1.0);
    let p_reg = visual_rng.normal_matrix(ld, cfg.visual_dim, 1.0);
    let rows_per_image = cfg.n_regions + 1;
    let mut visual = Vec::with_capacity(ne);
    for z in &latents {
        let cls_clean = map_latent(z, &p_cls);
        let reg_clean = map_latent(z, &p_reg);
        let mut m = Matrix::zeros(cfg.n_images * rows_per_image, cfg.visual_dim);
        for img in 0..cfg.n_images {
            let base = img * rows_per_image;
            for (o, c) in m.row_mut(base).iter_mut().zip(&cls_clean) {
                *o = c + cfg.cls_noise * visual_rng.normal();
            }
            let mut slots: Vec<usize> = (1..rows_per_image).collect();
            visual_rng.shuffle(&mut slots);
            for (k, &slot) in slots.iter().enumerate() {
                let row = m.row_mut(base + slot);
                if k < cfg.signal_regions {
                    for (o, c) in row.iter_mut().zip(&reg_clean) {
                        *o = c + cfg.region_noise * visual_rng.normal();
                    }
                } else {
                    // Unit latents through N(0, 1) projections have unit-scale
                    // entries, so plain N(0, 1) distractors look alike.
                    for o in row.iter_mut() {
                        *o = visual_rng.normal();
                    }
                }
            }
        }
        for v in m.data_mut() {
            *v = f32_round(*v);
        }
        visual.push(m);
    }

    let entities = (0..ne)
        .map(|id| EntityRecord {
            id,
            name: format!("entity_{id}"),
            text_tokens: (0..cfg.name_len).map(|_| text_rng.below(cfg.name_vocab)).collect(),
            entity_span: [0, cfg.name_len],
        })
        .collect();
    let nr = cfg.num_relations;
    let relations = (0..2 * nr)
        .map(|id| RelationRecord {
            id,
            name: if id < nr {
                format!("relation_{id}")
            } else {
                format!("relation_{}_inverse", id - nr)
            },
            text_tokens: vec![cfg.name_vocab + id],
            relation_span: [0, 1],
            inverse_of: (id >= nr).then(|| id - nr),
        })
        .collect();

    let dataset = MkgDataset {
        entities,
        relations,
        num_base_relations: nr,
        train,
        dev,
        test,
        visual,
        n_images: cfg.n_images,
        n_regions: cfg.n_regions,
        visual_dim: cfg.visual_dim,
        vocab_size: cfg.vocab_size(),
    };
    dataset.validate()?;
    Ok(GeneratedMkg {
        dataset,
        truth: LatentTruth {
            latents,
            relation_maps,
        },
    })
}
