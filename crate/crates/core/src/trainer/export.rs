//! Hard export: ternary codes plus per-group scales for quantized tensors,
//! raw values for everything else.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::Model;
use crate::quantizer::{dequantize, GroupScales, Quantizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExportedValues {
    Ternary {
        codes: Vec<i8>,
        gammas: Vec<f64>,
        group_len: usize,
    },
    Full {
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(flatten)]
    pub values: ExportedValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedArtifact {
    pub tensors: Vec<ExportedTensor>,
}

/// Fractions of codes -1, 0, +1 over all quantized tensors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeHistogram {
    pub minus: f64,
    pub zero: f64,
    pub plus: f64,
}

/// Quantizes every tensor flagged for quantization in `model` using
/// `weights` (same order as the model's parameters).
pub fn export_quantized(
    model: &Model,
    weights: &[Vec<f64>],
    quantizer: &Quantizer,
) -> Result<QuantizedArtifact> {
    if weights.len() != model.params().len() {
        return Err(invalid("weight list does not match the model"));
    }
    let tensors = model
        .params()
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            let values = if p.quantize {
                let scales = quantizer.compute_scale(w)?;
                ExportedValues::Ternary {
                    codes: quantizer.codes(w, &scales)?,
                    gammas: scales.gammas().to_vec(),
                    group_len: scales.group_len(),
                }
            } else {
                ExportedValues::Full { values: w.clone() }
            };
            Ok(ExportedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedArtifact { tensors })
}

impl QuantizedArtifact {
    /// Dequantized parameter values, `code * gamma` for ternary tensors.
    pub fn reconstruct(&self) -> Result<Vec<Vec<f64>>> {
        self.tensors
            .iter()
            .map(|t| match &t.values {
                ExportedValues::Ternary {
                    codes,
                    gammas,
                    group_len,
                } => {
                    if codes.iter().any(|c| !(-1..=1).contains(c)) {
                        return Err(invalid(format!("tensor {} has a non-ternary code", t.name)));
                    }
                    let scales = GroupScales::from_parts(gammas.clone(), *group_len, codes.len())?;
                    Ok(dequantize(codes, &scales))
                }
                ExportedValues::Full { values } => Ok(values.clone()),
            })
            .collect()
    }

    pub fn code_histogram(&self) -> CodeHistogram {
        let mut counts = [0usize; 3];
        for t in &self.tensors {
            if let ExportedValues::Ternary { codes, .. } = &t.values {
                for &c in codes {
                    counts[(c + 1) as usize] += 1;
                }
            }
        }
        let n = counts.iter().sum::<usize>().max(1) as f64;
        CodeHistogram {
            minus: counts[0] as f64 / n,
            zero: counts[1] as f64 / n,
            plus: counts[2] as f64 / n,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
