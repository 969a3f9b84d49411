//! One query end to end: compression, blocks, final norm, head.

use crate::error::Result;
use crate::kgc::{head_backward, head_forward, HeadCache, HeadOutput};
use crate::model::layers::{block_backward, layer_norm_backward, layer_norm_forward, BlockCache, LnCache};
use crate::model::{HiddenStates, Model, Params};
use crate::mvtc::{compress, compress_backward, Compressed, MultimodalBatch};

/// Forward state kept for [`query_backward`].
#[derive(Clone, Debug)]
pub struct QueryPass {
    pub output: HeadOutput,
    compressed: Compressed,
    blocks: Vec<BlockCache>,
    lnf: Option<LnCache>,
    head: HeadCache,
}

fn run(model: &Model, batch: &MultimodalBatch<'_>, keep: bool) -> Result<QueryPass> {
    let compressed = compress(model, batch)?;
    let (x, blocks) = model.run_blocks(&compressed.sequence.states, keep)?;
    let p = &model.params;
    let (y, lnf) = layer_norm_forward(&x, &p.lnf_gain, &p.lnf_bias, model.config.layer_norm);
    let hidden = HiddenStates {
        states: y,
        tags: compressed.sequence.tags.clone(),
    };
    let (output, head) = head_forward(
        &hidden,
        batch.entity_span.clone(),
        batch.relation_span.clone(),
        &p.head,
    )?;
    Ok(QueryPass {
        output,
        compressed,
        blocks,
        lnf,
        head,
    })
}

pub fn query_forward(model: &Model, batch: &MultimodalBatch<'_>) -> Result<QueryPass> {
    run(model, batch, true)
}

/// Logits for every entity, without keeping block caches.
pub fn score_query(model: &Model, batch: &MultimodalBatch<'_>) -> Result<HeadOutput> {
    run(model, batch, false).map(|p| p.output)
}

/// Accumulates into `grads` the gradient of a scalar whose derivative with
/// respect to the logits is `d_logits`. Installed `W_c` receive no gradient
/// while `model.freeze_compensation` is set.
pub fn query_backward(model: &Model, pass: &QueryPass, d_logits: &[f64], grads: &mut Params) {
    let p = &model.params;
    let dh = head_backward(d_logits, &pass.head, &p.head, &mut grads.head);
    let mut dx = layer_norm_backward(
        &dh,
        pass.lnf.as_ref(),
        &p.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
    );
    let train_wc = !model.freeze_compensation;
    for (l, cache) in pass.blocks.iter().enumerate().rev() {
        dx = block_backward(
            &dx,
            cache,
            &p.layers[l],
            &mut grads.layers[l],
            model.config.heads,
            train_wc,
        );
    }
    compress_backward(model, &pass.compressed, &dx, grads);
}
