//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use fedsdr_core::federation::ClientUpdate;
use fedsdr_core::model::{
    Backbone, BackboneConfig, DualAdapterModel, LoraConfig, Prediction, Stream, StreamSelector,
};
use fedsdr_core::Matrix;

fn wave(i: usize, salt: f64) -> f64 {
    0.1 * ((i as f64) * 0.61 + salt).sin()
}

pub fn matrix(rows: usize, cols: usize, salt: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| wave(r * cols + c, salt))
}

/// Default-sized dual model with both streams nonzero and trainable.
pub fn model() -> DualAdapterModel {
    let bb = Backbone::random(BackboneConfig::default(), 0).expect("default backbone");
    let mut m =
        DualAdapterModel::new(Arc::new(bb), LoraConfig::default(), 0).expect("default adapters");
    for (stream, salt) in [(Stream::R, 0.3), (Stream::S, 1.9)] {
        let p: Vec<f64> = (0..m.stream_len()).map(|i| wave(i, salt)).collect();
        m.set_stream_params(stream, &p).expect("stream length");
    }
    m.set_trainable(StreamSelector::Both);
    m
}

pub fn batch(cfg: &BackboneConfig, n: usize) -> Vec<Prediction> {
    let v = cfg.vocab_size as u32;
    (0..n as u32)
        .map(|i| Prediction {
            context: (0..cfg.context_len as u32)
                .map(|j| (i * 5 + j * 3) % v)
                .collect(),
            target: (i * 13 + 1) % v,
        })
        .collect()
}

pub fn updates(clients: usize, len: usize) -> Vec<ClientUpdate> {
    (0..clients)
        .map(|k| ClientUpdate {
            client_id: k,
            delta_r: (0..len).map(|i| wave(i, k as f64) * 1e-2).collect(),
            delta_s: None,
            n_k: 16 + k,
            steps: Vec::new(),
            payload_bytes: 0,
        })
        .collect()
}
