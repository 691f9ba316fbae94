//! Miniature decoder-only transformer with a hand-written backward pass,
//! exposing token embeddings, final hidden states and logits.

mod checkpoint;
mod generate;
mod layers;
mod model;

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_MAGIC};
pub use generate::{generate, nucleus_filter};
pub use model::{
    accumulate_token_embedding_grad, BlockParams, ForwardTrace, LmConfig, LmParams, TransformerLm,
};

use crate::error::Result;

impl TransformerLm {
    /// Checkpoint with the model config in the header and every tensor under `prefix`.
    pub fn to_checkpoint(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, t) in self.params.named_tensors() {
            ck.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn from_checkpoint(config: LmConfig, prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let mut model = TransformerLm::new(config.clone())?;
        let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut params = model.params.clone();
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            *dst = ck.get(&format!("{prefix}{name}"))?.clone();
        }
        model = TransformerLm::from_params(config, params)?;
        Ok(model)
    }
}
