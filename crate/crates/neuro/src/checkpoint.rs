//! Checkpoint file: a short text header followed by the raw parameter payload.
//!
//! ```text
//! CHAUFFEUR-CHECKPOINT v1
//! config {"encoder":...}
//! params 3
//! param encoder.embed.bias 1 64 0
//! ...
//! payload 12345
//! <little-endian f64 values, sorted-name order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::NeuroError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "CHAUFFEUR-CHECKPOINT v1";

fn bad(msg: impl Into<String>) -> NeuroError {
    NeuroError::Checkpoint(msg.into())
}

pub fn to_bytes(params: &ParamStore, config: &serde_json::Value) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "config {}\n",
        serde_json::to_string(config).expect("json value")
    ));
    header.push_str(&format!("params {}\n", params.len()));
    let mut offset = 0;
    for (_, name, t) in params.iter() {
        header.push_str(&format!("param {name} {} {} {offset}\n", t.rows(), t.cols()));
        offset += t.len();
    }
    header.push_str(&format!("payload {offset}\n"));
    let mut out = header.into_bytes();
    out.reserve(offset * 8);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value), NeuroError> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str, NeuroError> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("unrecognised format version"));
    }
    let config_line = next_line()?;
    let config_json = config_line
        .strip_prefix("config ")
        .ok_or_else(|| bad("missing config line"))?;
    let config: serde_json::Value = serde_json::from_str(config_json).map_err(|e| bad(format!("config: {e}")))?;
    let count: usize = next_line()?
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing params line"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "param" {
            return Err(bad(format!("malformed param line `{line}`")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in `{line}`")));
        entries.push((f[1].to_string(), parse(f[2])?, parse(f[3])?, parse(f[4])?));
    }
    let total: usize = next_line()?
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing payload line"))?;
    let payload = &bytes[pos..];
    if payload.len() != total * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut map = BTreeMap::new();
    for (name, rows, cols, offset) in entries {
        let n = rows * cols;
        if offset + n > total {
            return Err(bad(format!("{name} runs past the payload")));
        }
        let data = payload[offset * 8..(offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if map.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
    }
    Ok((ParamStore::from_map(map), config))
}

pub fn save(path: &Path, params: &ParamStore, config: &serde_json::Value) -> Result<(), NeuroError> {
    std::fs::write(path, to_bytes(params, config))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value), NeuroError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, HeadMode, ModelConfig, TokenInput};

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let echo = serde_json::to_value(&cfg).unwrap();
        let bytes = to_bytes(&params, &echo);
        let (back, echo_back) = from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(echo_back, echo);
        assert_eq!(to_bytes(&back, &echo_back), bytes);

        let rows: Vec<f64> = (0..21).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let mask = [true, true, false];
        let input = [TokenInput {
            rows: &rows,
            mask: &mask,
        }];
        let a = forward(&params, &cfg, &input, HeadMode::Rl).unwrap();
        let b = forward(&back, &cfg, &input, HeadMode::Rl).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let params = init_params(&ModelConfig::default()).unwrap();
        let mut bytes = to_bytes(&params, &serde_json::Value::Null);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(from_bytes(&bytes), Err(NeuroError::Checkpoint(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(from_bytes(b"NOT A CHECKPOINT\n").is_err());
    }
}
