//! The toy multimodal transformer: embeddings, visual projection, pre-norm
//! blocks, and optional per-layer activation tracing.

pub mod checkpoint;
mod config;
pub mod layers;
mod params;

use serde::{Deserialize, Serialize};

pub use config::{HeadKind, ModelConfig, VisualMode};
pub use params::{HeadParams, LayerParams, MvtcParams, MvtcView, Params};

use crate::error::{invalid, shape, Result};
use crate::numerics::{Matrix, SeededRng};
use layers::{block_forward, BlockCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Compressed from the textual view (`I_text`).
    VisualTextView,
    /// Compressed from the visual view (`I_image`).
    VisualImageView,
    /// Uncompressed projected region row.
    VisualRegion,
    Text,
}

impl Modality {
    pub fn is_visual(self) -> bool {
        !matches!(self, Modality::Text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Matrix,
    pub tags: Vec<Modality>,
}

impl HiddenStates {
    pub fn new(states: Matrix, tags: Vec<Modality>) -> Result<Self> {
        if states.rows() != tags.len() {
            return Err(shape(format!(
                "{} rows but {} modality tags",
                states.rows(),
                tags.len()
            )));
        }
        Ok(Self { states, tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn visual_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i].is_visual()).collect()
    }
}

/// One traced attention sublayer evaluation.
#[derive(Clone, Debug)]
pub struct TracePoint {
    /// Residual stream entering the block.
    pub residual_in: Matrix,
    /// Post-norm input of the attention sublayer.
    pub input: Matrix,
    /// Attention sublayer output, before the residual add.
    pub output: Matrix,
}

/// `layers[l][k]` is the k-th traced sample at layer `l`.
#[derive(Clone, Debug, Default)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<TracePoint>>,
}

impl ActivationTrace {
    pub fn with_layers(n: usize) -> Self {
        Self {
            layers: vec![Vec::new(); n],
        }
    }

    pub fn merge(&mut self, other: ActivationTrace) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize(other.layers.len(), Vec::new());
        }
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            mine.extend(theirs);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    /// Keep installed `W_c` matrices fixed during training.
    pub freeze_compensation: bool,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self {
            config,
            params,
            freeze_compensation: false,
        })
    }

    pub fn pruned_layers(&self) -> Vec<usize> {
        (0..self.params.layers.len())
            .filter(|&l| self.params.layers[l].pruned)
            .collect()
    }

    /// Marks `layer` pruned and installs (or clears) its compensation.
    pub fn prune_layer(&mut self, layer: usize, compensation: Option<Matrix>) -> Result<()> {
        let d = self.config.d_model;
        let lp = self
            .params
            .layers
            .get_mut(layer)
            .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
        if let Some(w) = &compensation {
            if w.shape() != (d, d) {
                return Err(shape(format!("W_c is {:?}, expected ({d}, {d})", w.shape())));
            }
        }
        lp.pruned = true;
        lp.compensation = compensation;
        Ok(())
    }

    /// Text token embeddings with absolute positions starting at `offset`.
    pub fn embed_text(&self, ids: &[usize], offset: usize) -> Result<Matrix> {
        let d = self.config.d_model;
        if offset + ids.len() > self.config.max_seq {
            return Err(invalid(format!(
                "positions up to {} exceed max_seq {}",
                offset + ids.len(),
                self.config.max_seq
            )));
        }
        let mut out = Matrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(invalid(format!(
                    "token id {id} out of range for vocab of {}",
                    self.config.vocab_size
                )));
            }
            let row = out.row_mut(i);
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.params.tok_emb.row(id))
                .zip(self.params.pos_emb.row(offset + i))
            {
                *o = e + p;
            }
        }
        Ok(out)
    }

    /// Affine projection of region features `N(M+1) x E_i` into model space.
    pub fn project_visual(&self, features: &Matrix) -> Result<Matrix> {
        let expected = (self.config.visual_rows(), self.config.visual_dim);
        if features.shape() != expected {
            return Err(shape(format!(
                "visual features {:?}, expected {expected:?}",
                features.shape()
            )));
        }
        let mut out = features.matmul(&self.params.vis_w);
        out.add_row_broadcast(self.params.vis_b.data());
        Ok(out)
    }

    /// Runs all blocks. With `trace` the attention sublayer input and output
    /// of every layer are recorded; outputs are identical either way.
    pub fn forward(
        &self,
        input: &HiddenStates,
        trace: bool,
    ) -> Result<(HiddenStates, Option<ActivationTrace>)> {
        let (out, caches) = self.run_blocks(&input.states, trace)?;
        let trace = trace.then(|| ActivationTrace {
            layers: caches
                .into_iter()
                .map(|c| {
                    vec![TracePoint {
                        residual_in: c.residual_in,
                        input: c.attn_in,
                        output: c.attn_out,
                    }]
                })
                .collect(),
        });
        Ok((
            HiddenStates {
                states: out,
                tags: input.tags.clone(),
            },
            trace,
        ))
    }

    pub(crate) fn check_sequence(&self, x: &Matrix) -> Result<()> {
        if x.rows() > self.config.max_seq {
            return Err(invalid(format!(
                "sequence length {} exceeds max_seq {}",
                x.rows(),
                self.config.max_seq
            )));
        }
        if x.cols() != self.config.d_model {
            return Err(shape(format!(
                "sequence width {} vs d_model {}",
                x.cols(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    pub(crate) fn run_blocks(&self, x: &Matrix, keep: bool) -> Result<(Matrix, Vec<BlockCache>)> {
        self.check_sequence(x)?;
        let mut h = x.clone();
        let mut caches = Vec::new();
        for lp in &self.params.layers {
            let (next, cache) = block_forward(&h, lp, self.config.heads, self.config.layer_norm);
            if keep {
                caches.push(cache);
            }
            h = next;
        }
        Ok((h, caches))
    }
}

/// Standard self-attention sublayer applied to `x` with one layer's
/// parameters, plus the per-head weight matrices.
pub fn attention_sublayer(x: &Matrix, params: &LayerParams, heads: usize) -> Result<(Matrix, Vec<Matrix>)> {
    if x.cols() != params.w_q.rows() || x.cols() % heads != 0 {
        return Err(shape(format!(
            "attention input width {} with {heads} heads",
            x.cols()
        )));
    }
    let (out, cache) = layers::attention_forward(x, params, heads);
    Ok((out, cache.weights().to_vec()))
}
