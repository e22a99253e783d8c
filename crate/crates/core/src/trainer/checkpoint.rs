//! Checkpoint layout: `u64` little-endian header length, a JSON header, then
//! raw little-endian `f64` payloads (weights, first moments, second moments,
//! each in parameter order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::Model;

use super::{batch_stream, AdamState, TrainState};

const FORMAT: &str = "hestia-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    step: usize,
    seed: u64,
    /// u128 does not survive JSON numbers, so it travels as a string.
    rng_word_pos: String,
    flips: u64,
    dead_zone_sum: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState, seed: u64) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        step: state.step,
        seed,
        rng_word_pos: state.rng.get_word_pos().to_string(),
        flips: state.flips,
        dead_zone_sum: state.dead_zone_sum,
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + head.len());
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend_from_slice(&head);
    for group in [&state.weights, &state.adam.m, &state.adam.v] {
        for x in group.iter().flatten() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint written for `model` and returns the state with the
/// seed it was produced under.
pub fn load_checkpoint(path: &Path, model: &Model) -> Result<(TrainState, u64)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(invalid("checkpoint too short"));
    }
    let head_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + head_len)
        .ok_or_else(|| invalid("checkpoint header truncated"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format != FORMAT {
        return Err(invalid(format!("unknown checkpoint format {:?}", header.format)));
    }
    let params = model.params();
    if header.tensors.len() != params.len()
        || header
            .tensors
            .iter()
            .zip(params)
            .any(|(e, p)| e.name != p.name || e.shape != p.shape)
    {
        return Err(invalid("checkpoint tensors do not match the model"));
    }
    let mut floats = bytes[8 + head_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let total: usize = params.iter().map(|p| p.numel()).sum();
    if bytes.len() - 8 - head_len != 3 * total * 8 {
        return Err(invalid("checkpoint payload has the wrong size"));
    }
    let mut take = || -> Vec<Vec<f64>> {
        params
            .iter()
            .map(|p| floats.by_ref().take(p.numel()).collect())
            .collect()
    };
    let weights = take();
    let m = take();
    let v = take();
    let mut rng = batch_stream(header.seed);
    let pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| invalid("bad rng position in checkpoint"))?;
    rng.set_word_pos(pos);
    Ok((
        TrainState {
            step: header.step,
            weights,
            adam: AdamState { m, v },
            rng,
            flips: header.flips,
            dead_zone_sum: header.dead_zone_sum,
        },
        header.seed,
    ))
}
