//! Corpus file: JSON lines, one sample per line with fields
//! `client_id, domain, c, x, y, y_distilled`.

use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use super::partition::ClientShard;
use crate::error::{Error, Result};
use crate::Token;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub client_id: Option<usize>,
    pub domain: usize,
    pub c: Token,
    pub x: Vec<Token>,
    pub y: Vec<Token>,
    pub y_distilled: Option<Vec<Token>>,
}

fn to_line(record: &CorpusRecord) -> String {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    line
}

/// Serializes shards in client order; distilled responses ride along when present.
pub fn write_corpus(shards: &[ClientShard]) -> String {
    let mut out = String::new();
    for shard in shards {
        for (i, s) in shard.raw.iter().enumerate() {
            out.push_str(&to_line(&CorpusRecord {
                client_id: Some(shard.client_id),
                domain: s.domain,
                c: s.c,
                x: s.x.clone(),
                y: s.y.clone(),
                y_distilled: shard.distilled.get(i).map(|d| d.y.clone()),
            }));
        }
    }
    out
}

/// Serializes samples that belong to no client (held-out sets).
pub fn write_samples(samples: &[Sample]) -> String {
    samples
        .iter()
        .map(|s| {
            to_line(&CorpusRecord {
                client_id: None,
                domain: s.domain,
                c: s.c,
                x: s.x.clone(),
                y: s.y.clone(),
                y_distilled: None,
            })
        })
        .collect()
}

fn parse_records(text: &str) -> Result<Vec<CorpusRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Json(format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn read_samples(text: &str) -> Result<Vec<Sample>> {
    Ok(parse_records(text)?
        .into_iter()
        .enumerate()
        .map(|(id, r)| Sample {
            id,
            domain: r.domain,
            c: r.c,
            x: r.x,
            y: r.y,
        })
        .collect())
}

/// Rebuilds shards from a corpus file. Every record must carry a client id,
/// and a shard is either fully distilled or not at all.
pub fn read_corpus(text: &str, num_domains: usize) -> Result<Vec<ClientShard>> {
    let records = parse_records(text)?;
    let num_clients = records
        .iter()
        .map(|r| {
            r.client_id
                .map(|c| c + 1)
                .ok_or_else(|| Error::Json("record without client_id".into()))
        })
        .try_fold(0usize, |acc, c| c.map(|c| acc.max(c)))?;
    let mut raw: Vec<Vec<Sample>> = vec![Vec::new(); num_clients];
    let mut distilled: Vec<Vec<Sample>> = vec![Vec::new(); num_clients];
    for (id, r) in records.into_iter().enumerate() {
        if r.domain >= num_domains {
            return Err(Error::Json(format!(
                "record {id}: domain {} >= {num_domains}",
                r.domain
            )));
        }
        let client = r.client_id.expect("checked above");
        let sample = Sample {
            id,
            domain: r.domain,
            c: r.c,
            x: r.x,
            y: r.y,
        };
        if let Some(yd) = r.y_distilled {
            distilled[client].push(Sample {
                y: yd,
                ..sample.clone()
            });
        }
        raw[client].push(sample);
    }
    raw.into_iter()
        .zip(distilled)
        .enumerate()
        .map(|(client_id, (raw, distilled))| {
            if !distilled.is_empty() && distilled.len() != raw.len() {
                return Err(Error::Json(format!(
                    "client {client_id}: partially distilled shard"
                )));
            }
            let mut shard = ClientShard::new(client_id, raw, num_domains);
            shard.distilled = distilled;
            Ok(shard)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard() -> ClientShard {
        let raw = vec![
            Sample {
                id: 0,
                domain: 1,
                c: 6,
                x: vec![1, 2],
                y: vec![3],
            },
            Sample {
                id: 1,
                domain: 0,
                c: 0,
                x: vec![],
                y: vec![4, 5],
            },
        ];
        let mut s = ClientShard::new(0, raw, 2);
        s.distilled = s
            .raw
            .iter()
            .map(|r| Sample {
                y: vec![9, 9, 9],
                ..r.clone()
            })
            .collect();
        s
    }

    #[test]
    fn field_names_and_null() {
        let mut s = shard();
        s.distilled.clear();
        let text = write_corpus(&[s]);
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"client_id":0,"domain":1,"c":6,"x":[1,2],"y":[3],"y_distilled":null}"#
        );
    }

    #[test]
    fn round_trip() {
        let s = shard();
        let back = read_corpus(&write_corpus(std::slice::from_ref(&s)), 2).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn rejects_unknown_fields_and_partial_distillation() {
        assert!(read_corpus(
            r#"{"client_id":0,"domain":0,"c":0,"x":[],"y":[],"y_distilled":null,"z":1}"#,
            1
        )
        .is_err());
        let partial = "{\"client_id\":0,\"domain\":0,\"c\":0,\"x\":[],\"y\":[1],\"y_distilled\":[2]}\n\
                       {\"client_id\":0,\"domain\":0,\"c\":0,\"x\":[],\"y\":[1],\"y_distilled\":null}\n";
        assert!(read_corpus(partial, 1).is_err());
    }
}
