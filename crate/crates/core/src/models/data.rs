//! Synthetic tasks. Each split is drawn from its own seed stream, so the
//! train and held-out sets never share samples and regeneration is exact.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::no_grad;
use crate::error::{invalid, Result};
use crate::rng;

use super::{MlpSpec, Model, ModelSpec, Nonlinearity};

const TEACHER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherStudentRegression,
    GaussianClusterClassification,
    SequenceCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub train_size: usize,
    pub heldout_size: usize,
    /// Label noise std (regression), blob std (clusters), or token
    /// corruption probability (sequence copy).
    pub noise: f64,
    pub input_dim: usize,
    /// Regression outputs or number of classes.
    pub output_dim: usize,
    /// Hidden widths of the teacher network.
    pub teacher_hidden: Vec<usize>,
    /// Distance between cluster means, in blob std units.
    pub separation: f64,
    pub vocab: usize,
    pub seq_len: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self::teacher_student(0)
    }
}

impl SyntheticTask {
    pub fn teacher_student(seed: u64) -> Self {
        Self {
            kind: TaskKind::TeacherStudentRegression,
            seed,
            train_size: 8192,
            heldout_size: 2048,
            noise: 0.01,
            input_dim: 16,
            output_dim: 1,
            teacher_hidden: vec![64, 64],
            separation: 10.0,
            vocab: 32,
            seq_len: 16,
        }
    }

    pub fn clusters(seed: u64) -> Self {
        Self {
            kind: TaskKind::GaussianClusterClassification,
            noise: 1.0,
            output_dim: 4,
            ..Self::teacher_student(seed)
        }
    }

    pub fn sequence_copy(seed: u64) -> Self {
        Self {
            kind: TaskKind::SequenceCopy,
            train_size: 2048,
            heldout_size: 256,
            noise: 0.0,
            ..Self::teacher_student(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.heldout_size == 0 {
            return Err(invalid("task splits must be non-empty"));
        }
        if !(self.noise >= 0.0) {
            return Err(invalid("noise must be >= 0"));
        }
        match self.kind {
            TaskKind::TeacherStudentRegression => {
                if self.input_dim == 0 || self.output_dim == 0 {
                    return Err(invalid("teacher-student dims must be >= 1"));
                }
            }
            TaskKind::GaussianClusterClassification => {
                if self.output_dim < 2 || self.output_dim > self.input_dim {
                    return Err(invalid("cluster task needs 2 <= classes <= input_dim"));
                }
            }
            TaskKind::SequenceCopy => {
                if self.seq_len < 2 || self.seq_len % 2 != 0 || self.vocab < 2 {
                    return Err(invalid("sequence copy needs an even seq_len >= 2 and vocab >= 2"));
                }
                if self.noise > 1.0 {
                    return Err(invalid("corruption probability must be <= 1"));
                }
            }
        }
        Ok(())
    }

    /// The frozen network that labels teacher-student data.
    pub fn teacher(&self) -> Result<Model> {
        Model::build(&ModelSpec::Mlp(MlpSpec {
            input_dim: self.input_dim,
            hidden: self.teacher_hidden.clone(),
            output_dim: self.output_dim,
            nonlinearity: Nonlinearity::Relu,
            seed: rng::derive_seed(&[self.seed, TEACHER_STREAM]),
            random_bias: true,
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// Row-major `(n, dim)` features.
    Dense { values: Vec<f64>, dim: usize },
    /// `n` sequences of `seq_len` tokens, concatenated.
    Tokens { tokens: Vec<usize>, seq_len: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression { values: Vec<f64>, dim: usize },
    Classes(Vec<usize>),
    /// Next-token targets with per-position loss weights.
    NextToken { targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

impl Batch {
    /// Number of samples (sequences for token tasks).
    pub fn len(&self) -> usize {
        match &self.inputs {
            Inputs::Dense { values, dim } => values.len() / dim,
            Inputs::Tokens { tokens, seq_len } => tokens.len() / seq_len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        fn rows<T: Copy>(v: &[T], width: usize, idx: &[usize]) -> Vec<T> {
            idx.iter()
                .flat_map(|&i| v[i * width..(i + 1) * width].iter().copied())
                .collect()
        }
        let inputs = match &self.inputs {
            Inputs::Dense { values, dim } => Inputs::Dense {
                values: rows(values, *dim, indices),
                dim: *dim,
            },
            Inputs::Tokens { tokens, seq_len } => Inputs::Tokens {
                tokens: rows(tokens, *seq_len, indices),
                seq_len: *seq_len,
            },
        };
        let targets = match (&self.targets, &self.inputs) {
            (Targets::Regression { values, dim }, _) => Targets::Regression {
                values: rows(values, *dim, indices),
                dim: *dim,
            },
            (Targets::Classes(c), _) => Targets::Classes(rows(c, 1, indices)),
            (Targets::NextToken { targets, weights }, Inputs::Tokens { seq_len, .. }) => {
                Targets::NextToken {
                    targets: rows(targets, *seq_len, indices),
                    weights: rows(weights, *seq_len, indices),
                }
            }
            (Targets::NextToken { .. }, Inputs::Dense { .. }) => {
                unreachable!("next-token targets always pair with token inputs")
            }
        };
        Batch { inputs, targets }
    }

    /// Contiguous chunks of at most `size` samples.
    pub fn chunks(&self, size: usize) -> Vec<Batch> {
        let n = self.len();
        (0..n)
            .step_by(size.max(1))
            .map(|s| self.select(&(s..(s + size).min(n)).collect::<Vec<_>>()))
            .collect()
    }

    /// SHA-256 over the batch contents, for calibration provenance.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        match &self.inputs {
            Inputs::Dense { values, .. } => values.iter().for_each(|v| h.update(v.to_le_bytes())),
            Inputs::Tokens { tokens, .. } => {
                tokens.iter().for_each(|t| h.update((*t as u64).to_le_bytes()))
            }
        }
        match &self.targets {
            Targets::Regression { values, .. } => {
                values.iter().for_each(|v| h.update(v.to_le_bytes()))
            }
            Targets::Classes(c) => c.iter().for_each(|t| h.update((*t as u64).to_le_bytes())),
            Targets::NextToken { targets, weights } => {
                targets.iter().for_each(|t| h.update((*t as u64).to_le_bytes()));
                weights.iter().for_each(|v| h.update(v.to_le_bytes()));
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub heldout: Batch,
}

pub fn generate_task(task: &SyntheticTask) -> Result<Dataset> {
    task.validate()?;
    match task.kind {
        TaskKind::TeacherStudentRegression => {
            let teacher = task.teacher()?;
            Ok(Dataset {
                train: teacher_split(task, &teacher, TRAIN_STREAM, task.train_size)?,
                heldout: teacher_split(task, &teacher, HELDOUT_STREAM, task.heldout_size)?,
            })
        }
        TaskKind::GaussianClusterClassification => Ok(Dataset {
            train: cluster_split(task, TRAIN_STREAM, task.train_size),
            heldout: cluster_split(task, HELDOUT_STREAM, task.heldout_size),
        }),
        TaskKind::SequenceCopy => Ok(Dataset {
            train: copy_split(task, TRAIN_STREAM, task.train_size),
            heldout: copy_split(task, HELDOUT_STREAM, task.heldout_size),
        }),
    }
}

fn teacher_split(task: &SyntheticTask, teacher: &Model, stream: u64, n: usize) -> Result<Batch> {
    let mut r = rng::stream(task.seed, stream);
    let x: Vec<f64> = (0..n * task.input_dim)
        .map(|_| r.sample(StandardNormal))
        .collect();
    let clean = no_grad(|| {
        let weights = teacher.leaves(false);
        let input = Inputs::Dense {
            values: x.clone(),
            dim: task.input_dim,
        };
        teacher.forward(&weights, &input)
    })?;
    let y = clean
        .data()
        .iter()
        .map(|&c| c + task.noise * r.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Batch {
        inputs: Inputs::Dense {
            values: x,
            dim: task.input_dim,
        },
        targets: Targets::Regression {
            values: y,
            dim: task.output_dim,
        },
    })
}

fn cluster_split(task: &SyntheticTask, stream: u64, n: usize) -> Batch {
    // means sit on scaled coordinate axes, so every pair is exactly
    // `separation * noise` apart
    let radius = task.separation * task.noise / std::f64::consts::SQRT_2;
    let mut r = rng::stream(task.seed, stream);
    let mut values = Vec::with_capacity(n * task.input_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.random_range(0..task.output_dim);
        labels.push(k);
        for j in 0..task.input_dim {
            let mean = if j == k { radius } else { 0.0 };
            values.push(mean + task.noise * r.sample::<f64, _>(StandardNormal));
        }
    }
    Batch {
        inputs: Inputs::Dense {
            values,
            dim: task.input_dim,
        },
        targets: Targets::Classes(labels),
    }
}

fn copy_split(task: &SyntheticTask, stream: u64, n: usize) -> Batch {
    let (len, half) = (task.seq_len, task.seq_len / 2);
    let mut r = rng::stream(task.seed, stream);
    let mut tokens = Vec::with_capacity(n * len);
    let mut targets = Vec::with_capacity(n * len);
    let mut weights = Vec::with_capacity(n * len);
    for _ in 0..n {
        let mut seq: Vec<usize> = (0..half).map(|_| r.random_range(0..task.vocab)).collect();
        for j in 0..half {
            let corrupt = task.noise > 0.0 && r.random::<f64>() < task.noise;
            seq.push(if corrupt {
                r.random_range(0..task.vocab)
            } else {
                seq[j]
            });
        }
        for t in 0..len {
            // position t predicts token t + 1; only the copied half is scored
            let scored = t + 1 < len && t + 1 >= half;
            targets.push(if t + 1 < len { seq[t + 1] } else { 0 });
            weights.push(if scored { 1.0 } else { 0.0 });
        }
        tokens.extend(seq);
    }
    Batch {
        inputs: Inputs::Tokens {
            tokens,
            seq_len: len,
        },
        targets: Targets::NextToken { targets, weights },
    }
}

#[derive(Serialize, Deserialize)]
struct DumpSidecar {
    kind: String,
    n: usize,
    input_width: usize,
    target_width: usize,
    arrays: Vec<String>,
}

/// Writes a split as a flat little-endian `f64` file plus a JSON sidecar
/// (`<path>.json`) describing shapes.
pub fn dump_batch(batch: &Batch, path: &Path) -> Result<()> {
    let mut flat: Vec<f64> = Vec::new();
    let (kind, input_width, target_width, arrays) = match (&batch.inputs, &batch.targets) {
        (Inputs::Dense { values, dim }, Targets::Regression { values: y, dim: ydim }) => {
            flat.extend(values);
            flat.extend(y);
            ("regression", *dim, *ydim, vec!["inputs", "targets"])
        }
        (Inputs::Dense { values, dim }, Targets::Classes(c)) => {
            flat.extend(values);
            flat.extend(c.iter().map(|&v| v as f64));
            ("classification", *dim, 1, vec!["inputs", "labels"])
        }
        (Inputs::Tokens { tokens, seq_len }, Targets::NextToken { targets, weights }) => {
            flat.extend(tokens.iter().map(|&v| v as f64));
            flat.extend(targets.iter().map(|&v| v as f64));
            flat.extend(weights);
            ("next_token", *seq_len, *seq_len, vec!["tokens", "targets", "weights"])
        }
        _ => return Err(invalid("inconsistent batch")),
    };
    let mut f = std::fs::File::create(path)?;
    for v in &flat {
        f.write_all(&v.to_le_bytes())?;
    }
    let sidecar = DumpSidecar {
        kind: kind.into(),
        n: batch.len(),
        input_width,
        target_width,
        arrays: arrays.into_iter().map(String::from).collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<Batch> {
    let sidecar: DumpSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(invalid("dump length is not a multiple of 8 bytes"));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (n, iw, tw) = (sidecar.n, sidecar.input_width, sidecar.target_width);
    let expect = match sidecar.kind.as_str() {
        "regression" => n * iw + n * tw,
        "classification" => n * iw + n,
        "next_token" => 3 * n * iw,
        k => return Err(invalid(format!("unknown dump kind {k}"))),
    };
    if flat.len() != expect {
        return Err(invalid(format!("dump holds {} values, sidecar implies {expect}", flat.len())));
    }
    let idx = |v: &[f64]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
    Ok(match sidecar.kind.as_str() {
        "regression" => Batch {
            inputs: Inputs::Dense { values: flat[..n * iw].to_vec(), dim: iw },
            targets: Targets::Regression { values: flat[n * iw..].to_vec(), dim: tw },
        },
        "classification" => Batch {
            inputs: Inputs::Dense { values: flat[..n * iw].to_vec(), dim: iw },
            targets: Targets::Classes(idx(&flat[n * iw..])),
        },
        _ => Batch {
            inputs: Inputs::Tokens { tokens: idx(&flat[..n * iw]), seq_len: iw },
            targets: Targets::NextToken {
                targets: idx(&flat[n * iw..2 * n * iw]),
                weights: flat[2 * n * iw..].to_vec(),
            },
        },
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_identical() {
        let t = SyntheticTask {
            train_size: 64,
            heldout_size: 16,
            ..SyntheticTask::teacher_student(3)
        };
        assert_eq!(generate_task(&t).unwrap(), generate_task(&t).unwrap());
        let other = generate_task(&SyntheticTask { seed: 4, ..t.clone() }).unwrap();
        assert_ne!(generate_task(&t).unwrap(), other);
    }

    #[test]
    fn splits_differ() {
        let t = SyntheticTask {
            train_size: 32,
            heldout_size: 32,
            ..SyntheticTask::clusters(1)
        };
        let d = generate_task(&t).unwrap();
        assert_ne!(d.train.inputs, d.heldout.inputs);
    }

    #[test]
    fn copy_task_structure() {
        let t = SyntheticTask {
            train_size: 8,
            heldout_size: 4,
            ..SyntheticTask::sequence_copy(0)
        };
        let d = generate_task(&t).unwrap();
        let Inputs::Tokens { tokens, seq_len } = &d.train.inputs else { panic!() };
        let Targets::NextToken { targets, weights } = &d.train.targets else { panic!() };
        for s in 0..8 {
            let seq = &tokens[s * seq_len..(s + 1) * seq_len];
            let half = seq_len / 2;
            assert_eq!(&seq[..half], &seq[half..]);
            for pos in 0..*seq_len {
                let i = s * seq_len + pos;
                if weights[i] > 0.0 {
                    // a scored target always equals an earlier token
                    assert_eq!(targets[i], seq[pos + 1 - half]);
                }
            }
        }
    }

    #[test]
    fn select_and_chunks() {
        let t = SyntheticTask {
            train_size: 10,
            heldout_size: 2,
            ..SyntheticTask::teacher_student(0)
        };
        let d = generate_task(&t).unwrap();
        let chunks = d.train.chunks(4);
        assert_eq!(chunks.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(d.train.select(&(0..10).collect::<Vec<_>>()), d.train);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for task in [
            SyntheticTask::teacher_student(0),
            SyntheticTask::clusters(0),
            SyntheticTask::sequence_copy(0),
        ] {
            let task = SyntheticTask {
                train_size: 5,
                heldout_size: 3,
                ..task
            };
            let d = generate_task(&task).unwrap();
            let p = dir.path().join("split.bin");
            dump_batch(&d.heldout, &p).unwrap();
            assert_eq!(load_batch(&p).unwrap(), d.heldout);
        }
    }
}
