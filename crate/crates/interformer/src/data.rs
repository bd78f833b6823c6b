//! Synthetic sequence-classification tasks. Each task is regenerated
//! deterministically from its seed; frames are drawn from a small per-task
//! alphabet of feature vectors so labels can be recomputed by exact scans.

use crate::rng::StreamRng;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// A key pattern sits in the first frames; the label says whether an
    /// exact copy of it appears later in the sequence. Negatives carry a
    /// decoy pattern instead, so the label needs the stored key (global
    /// retrieval) plus local window matching.
    MotifMatch,
    /// Label: is the second half an exact copy of the first half.
    LongCopyDetect,
    /// Two delimiter frames bracket a span; label is the parity of marker
    /// frames strictly inside the span.
    ParitySpan,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::MotifMatch => "motif-match",
            TaskKind::LongCopyDetect => "long-copy-detect",
            TaskKind::ParitySpan => "parity-span",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "motif-match" => Ok(TaskKind::MotifMatch),
            "long-copy-detect" => Ok(TaskKind::LongCopyDetect),
            "parity-span" => Ok(TaskKind::ParitySpan),
            other => Err(TensorError::Invalid(format!(
                "unknown task kind '{other}' (expected motif-match|long-copy-detect|parity-span)"
            ))),
        }
    }
}

/// Generator constants. Kept fixed so datasets are a pure function of
/// (kind, sizes, seed).
pub const MOTIF_LEN: usize = 8;
pub const MOTIF_GAP: usize = 2;
pub const ALPHABET: usize = 6;
pub const MARKER_PROB: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub t: usize,
    pub f: usize,
    pub num_classes: usize,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn desk_default() -> Self {
        Self {
            kind: TaskKind::MotifMatch,
            t: 64,
            f: 16,
            num_classes: 2,
            samples: 2048,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(TensorError::Invalid(
                "synthetic tasks are binary (num_classes must be 2)".into(),
            ));
        }
        let min_t = match self.kind {
            TaskKind::MotifMatch => 2 * MOTIF_LEN + MOTIF_GAP + 1,
            TaskKind::LongCopyDetect => 4,
            TaskKind::ParitySpan => 4,
        };
        if self.t < min_t {
            return Err(TensorError::InputTooShort {
                min: min_t,
                got: self.t,
            });
        }
        if self.f == 0 || self.samples == 0 {
            return Err(TensorError::Invalid(
                "feature dim and sample count must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl Dataset {
    pub fn label_fraction(&self, label: usize, idx: &[usize]) -> f64 {
        let hits = idx
            .iter()
            .filter(|&&i| self.samples[i].label == label)
            .count();
        hits as f64 / idx.len().max(1) as f64
    }
}

/// Per-task alphabet of feature vectors: random but orthonormalized when
/// the feature dim allows (clean similarity structure for content-based
/// attention, dense channels so per-sequence feature statistics stay
/// stable), plain random vectors otherwise. Parity-span appends a
/// delimiter and a marker symbol after the regular ones.
pub fn task_alphabet(task: &SyntheticTask) -> Vec<Vec<f64>> {
    let extra = match task.kind {
        TaskKind::ParitySpan => 2,
        _ => 0,
    };
    let count = ALPHABET + extra;
    let mut rng = StreamRng::new(task.seed, "alphabet");
    let mut rows: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let mut v = vec![0.0; task.f];
            rng.fill_uniform(&mut v, -1.0, 1.0);
            v
        })
        .collect();
    if count <= task.f {
        // Gram-Schmidt; a fresh random draw replaces any degenerate row
        for i in 0..count {
            loop {
                for j in 0..i {
                    let proj: f64 =
                        rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let prev = rows[j].clone();
                    for (x, p) in rows[i].iter_mut().zip(&prev) {
                        *x -= proj * p;
                    }
                }
                let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for x in rows[i].iter_mut() {
                        *x /= norm;
                    }
                    break;
                }
                rng.fill_uniform(&mut rows[i], -1.0, 1.0);
            }
        }
    }
    rows
}

const DELIM: usize = ALPHABET;
const MARKER: usize = ALPHABET + 1;

fn symbols_to_features(symbols: &[usize], alphabet: &[Vec<f64>], f: usize) -> Tensor {
    let mut data = Vec::with_capacity(symbols.len() * f);
    for &s in symbols {
        data.extend_from_slice(&alphabet[s]);
    }
    Tensor::from_op(vec![symbols.len(), f], data)
}

fn gen_motif_match(t: usize, rng: &mut StreamRng) -> (Vec<usize>, usize) {
    let m = MOTIF_LEN;
    let positive = rng.bernoulli(0.5);
    // the key is a length-m run of one symbol in the leading frames; runs
    // survive the 4x front-end downsampling at any alignment
    let key_sym = rng.below(ALPHABET);
    let mut symbols = vec![0usize; t];
    for slot in symbols.iter_mut().take(m) {
        *slot = key_sym;
    }
    // anti-run body fill: no two adjacent equal symbols, so the only
    // length-m runs are the ones planted below
    for i in m..t {
        loop {
            let s = rng.below(ALPHABET);
            if s != symbols[i - 1] {
                symbols[i] = s;
                break;
            }
        }
    }
    let place_at = m + MOTIF_GAP + rng.below(t - 2 * m - MOTIF_GAP + 1);
    let plant_sym = if positive {
        key_sym
    } else {
        // decoy run: same local structure, different symbol, so the label
        // still requires comparing against the stored key
        loop {
            let s = rng.below(ALPHABET);
            if s != key_sym {
                break s;
            }
        }
    };
    for slot in symbols.iter_mut().skip(place_at).take(m) {
        *slot = plant_sym;
    }
    (symbols, positive as usize)
}

fn gen_long_copy(t: usize, rng: &mut StreamRng) -> (Vec<usize>, usize) {
    let half = t / 2;
    let positive = rng.bernoulli(0.5);
    let mut symbols: Vec<usize> = (0..t).map(|_| rng.below(ALPHABET)).collect();
    if positive {
        let (first, rest) = symbols.split_at_mut(half);
        rest[..half].copy_from_slice(first);
    } else {
        // force at least one mismatch between the halves
        if (0..half).all(|i| symbols[i] == symbols[half + i]) {
            let i = rng.below(half);
            loop {
                let replacement = rng.below(ALPHABET);
                if replacement != symbols[i] {
                    symbols[half + i] = replacement;
                    break;
                }
            }
        }
    }
    (symbols, positive as usize)
}

fn gen_parity_span(t: usize, rng: &mut StreamRng) -> (Vec<usize>, usize) {
    let i = rng.below(t - 2);
    let j = i + 2 + rng.below(t - i - 2);
    let mut symbols: Vec<usize> = (0..t)
        .map(|_| {
            if rng.bernoulli(MARKER_PROB) {
                MARKER
            } else {
                rng.below(ALPHABET)
            }
        })
        .collect();
    symbols[i] = DELIM;
    symbols[j] = DELIM;
    let count = symbols[i + 1..j].iter().filter(|&&s| s == MARKER).count();
    (symbols, count % 2)
}

/// Generate the full labeled dataset with a seed-hashed 80/20 train/val
/// split.
pub fn gen_task(task: &SyntheticTask) -> Result<Dataset> {
    task.validate()?;
    let alphabet = task_alphabet(task);
    let root = StreamRng::new(task.seed, "task-data");
    let split_root = StreamRng::new(task.seed, "task-split");
    let mut samples = Vec::with_capacity(task.samples);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for i in 0..task.samples {
        let mut rng = root.derive(i as u64, "sample");
        let (symbols, label) = match task.kind {
            TaskKind::MotifMatch => gen_motif_match(task.t, &mut rng),
            TaskKind::LongCopyDetect => gen_long_copy(task.t, &mut rng),
            TaskKind::ParitySpan => gen_parity_span(task.t, &mut rng),
        };
        samples.push(Sample {
            features: symbols_to_features(&symbols, &alphabet, task.f),
            label,
        });
        let mut h = split_root.derive(i as u64, "split");
        if h.uniform(0.0, 1.0) < 0.2 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    Ok(Dataset {
        samples,
        train_idx,
        val_idx,
    })
}
