//! Frozen next-token backbone with dual low-rank adapter streams.

mod backbone;
mod dual;
mod generate;
mod payload;

pub use backbone::{
    predictions_for, window, Backbone, BackboneConfig, LayerId, Linear, Prediction, PretrainOpts,
};
pub use dual::{AdapterPair, DualAdapterModel, Gradient, LoraConfig, Stream, StreamSelector};
pub use generate::{argmax, sample_token, GenerationConfig};
pub use payload::{
    contains_f64, payload_len, AdapterPayload, LayerBlock, HEADER_LEN, LAYER_HEADER_LEN,
};

pub(crate) use payload::Reader;
