//! Binary adapter payload.
//!
//! ```text
//! "FSDR" | version u16 | stream tag u8 | layer count u8
//! per layer: layer id u8 | r u16 | d_in u16 | d_out u16 | A (r·d_in f64) | B (d_out·r f64)
//! ```
//! All integers and floats little-endian; matrices row-major.

use super::backbone::LayerId;
use super::dual::{DualAdapterModel, Stream};
use crate::error::{Error, Result};
use crate::math::Matrix;

pub const MAGIC: &[u8; 4] = b"FSDR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;
pub const LAYER_HEADER_LEN: usize = 7;

/// One decoded adapter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock {
    pub layer: LayerId,
    pub a: Matrix,
    pub b: Matrix,
}

/// A decoded adapter payload.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPayload {
    pub stream: Stream,
    pub layers: Vec<LayerBlock>,
}

impl AdapterPayload {
    /// Parameters flattened in stream layout order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in &self.layers {
            out.extend_from_slice(block.a.data());
            out.extend_from_slice(block.b.data());
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.stream.tag());
        buf.push(self.layers.len() as u8);
        for block in &self.layers {
            buf.push(block.layer as u8);
            buf.extend_from_slice(&(block.a.rows() as u16).to_le_bytes());
            buf.extend_from_slice(&(block.a.cols() as u16).to_le_bytes());
            buf.extend_from_slice(&(block.b.rows() as u16).to_le_bytes());
            for v in block.a.data().iter().chain(block.b.data()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Decodes one payload from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let tag_at = r.pos;
        let stream = Stream::from_tag(r.u8()?).ok_or_else(|| Error::Parse {
            offset: tag_at,
            reason: "unknown stream tag".into(),
        })?;
        let count = r.u8()?;
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id_at = r.pos;
            let layer = LayerId::from_u8(r.u8()?).ok_or_else(|| Error::Parse {
                offset: id_at,
                reason: "unknown layer id".into(),
            })?;
            let rank = r.u16()? as usize;
            let d_in = r.u16()? as usize;
            let d_out = r.u16()? as usize;
            let a = Matrix::new(rank, d_in, r.f64s(rank * d_in)?)?;
            let b = Matrix::new(d_out, rank, r.f64s(d_out * rank)?)?;
            layers.push(LayerBlock { layer, a, b });
        }
        Ok((Self { stream, layers }, r.pos))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (payload, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Parse {
                offset: used,
                reason: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(payload)
    }
}

/// Size in bytes of a payload with the given `(r, d_in, d_out)` layers.
pub fn payload_len(layers: &[(usize, usize, usize)]) -> usize {
    HEADER_LEN
        + layers
            .iter()
            .map(|&(r, d_in, d_out)| LAYER_HEADER_LEN + 8 * r * (d_in + d_out))
            .sum::<usize>()
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!(
                    "truncated: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: self.pos,
            reason: "length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl DualAdapterModel {
    pub fn stream_payload(&self, stream: Stream) -> AdapterPayload {
        AdapterPayload {
            stream,
            layers: LayerId::ALL
                .iter()
                .map(|&layer| {
                    let pair = self.adapter(stream, layer);
                    LayerBlock {
                        layer,
                        a: pair.a.clone(),
                        b: pair.b.clone(),
                    }
                })
                .collect(),
        }
    }

    /// Encodes one stream's adapters. The output never contains the other stream.
    pub fn serialize_stream(&self, stream: Stream) -> Vec<u8> {
        self.stream_payload(stream).encode()
    }

    /// Loads a payload into the stream named by its tag.
    pub fn deserialize_stream(&mut self, bytes: &[u8]) -> Result<Stream> {
        let payload = AdapterPayload::decode(bytes)?;
        let stream = payload.stream;
        for block in &payload.layers {
            let pair = &self.adapter(stream, block.layer);
            if pair.a.shape() != block.a.shape() || pair.b.shape() != block.b.shape() {
                return Err(Error::dim(
                    "deserialize_stream",
                    pair.a.shape(),
                    block.a.shape(),
                ));
            }
        }
        for block in payload.layers {
            let pair = &mut self.adapters_mut(stream)[block.layer as usize];
            pair.a = block.a;
            pair.b = block.b;
        }
        Ok(stream)
    }
}

/// Whether the 8-byte little-endian pattern of `value` occurs anywhere in `bytes`.
pub fn contains_f64(bytes: &[u8], value: f64) -> bool {
    let pattern = value.to_le_bytes();
    bytes.windows(8).any(|w| w == pattern)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::{Backbone, BackboneConfig};
    use crate::model::dual::LoraConfig;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn model(seed: u64) -> DualAdapterModel {
        let bb = Backbone::random(BackboneConfig::default(), 1).unwrap();
        DualAdapterModel::new(Arc::new(bb), LoraConfig::default(), seed).unwrap()
    }

    #[test]
    fn round_trip_into_fresh_model() {
        let mut src = model(1);
        let mut p = src.stream_params(Stream::R);
        p.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += i as f64 * 1e-3);
        src.set_stream_params(Stream::R, &p).unwrap();
        let bytes = src.serialize_stream(Stream::R);
        let mut dst = model(2);
        assert_eq!(dst.deserialize_stream(&bytes).unwrap(), Stream::R);
        let same = src
            .stream_params(Stream::R)
            .iter()
            .zip(dst.stream_params(Stream::R))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn payload_size_from_shapes() {
        let m = model(0);
        let bytes = m.serialize_stream(Stream::R);
        // hidden: r=8, d_in=128, d_out=32; output: r=8, d_in=32, d_out=32
        assert_eq!(bytes.len(), payload_len(&[(8, 128, 32), (8, 32, 32)]));
        let one = AdapterPayload {
            stream: Stream::S,
            layers: vec![m.stream_payload(Stream::S).layers[1].clone()],
        };
        assert_eq!(
            one.encode().len(),
            HEADER_LEN + LAYER_HEADER_LEN + 8 * 8 * (32 + 32)
        );
    }

    #[test]
    fn r_payload_never_carries_s_values() {
        let mut m = model(3);
        let sentinels: Vec<f64> = (0..m.stream_len())
            .map(|i| 12345.678 + i as f64 * 0.001)
            .collect();
        m.set_stream_params(Stream::S, &sentinels).unwrap();
        let bytes = m.serialize_stream(Stream::R);
        assert!(sentinels.iter().all(|&v| !contains_f64(&bytes, v)));
        let s_bytes = m.serialize_stream(Stream::S);
        assert!(contains_f64(&s_bytes, sentinels[0]));
    }

    #[test]
    fn corrupt_and_truncated_payloads() {
        let bytes = model(4).serialize_stream(Stream::R);
        let err = AdapterPayload::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            AdapterPayload::decode(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad_tag = bytes.clone();
        bad_tag[6] = b'Q';
        assert!(matches!(
            AdapterPayload::decode(&bad_tag),
            Err(Error::Parse { offset: 6, .. })
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(AdapterPayload::decode(&trailing).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(values in prop::collection::vec(prop::num::f64::NORMAL, 6), tag in prop::bool::ANY) {
            let stream = if tag { Stream::R } else { Stream::S };
            let payload = AdapterPayload {
                stream,
                layers: vec![LayerBlock {
                    layer: LayerId::Output,
                    a: Matrix::new(1, 4, values[..4].to_vec()).unwrap(),
                    b: Matrix::new(2, 1, values[4..].to_vec()).unwrap(),
                }],
            };
            prop_assert_eq!(AdapterPayload::decode(&payload.encode()).unwrap(), payload);
        }
    }
}
