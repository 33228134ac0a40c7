//! Promptable multi-mask segmentation network with low-rank adapters.

mod checkpoint;
mod net;
pub mod ops;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use net::{
    encode, encode_backward, forward, positional_encoding, DecodeCache, Encoded, ForwardOutput,
    PointPrompt, Polarity, Prepared, PromptSet,
};
pub use params::{
    adapter_scale, clone_frozen, init_params, trainable_parameters, AdaptedLayer, ArchConfig,
    Gradients, ModelParams, ParamId, ParamView, TrainMode, ALLOWED_RANKS,
};

/// Projects adapted-layer gradients onto the adapter factors, then zeroes
/// everything outside the trainable view for `mode`.
pub fn finish_gradients(params: &ModelParams, grads: &mut Gradients, mode: TrainMode) {
    grads.project_adapters(params);
    grads.restrict_to(&trainable_parameters(params, mode));
}

#[cfg(test)]
mod tests;
