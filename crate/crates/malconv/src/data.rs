//! Byte-sequence ingestion, tokenization, and synthetic corpus generation.
//!
//! Token alphabet: byte values map to ids 0-255, a single EOF marker (256)
//! follows the last byte, and PAD (257) right-pads short inputs. PAD is a
//! distinct id with a frozen all-zero embedding, so EOF remains a learnable
//! signal while padding is inert.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOF_TOKEN: u16 = 256;
pub const PAD_TOKEN: u16 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Frozen-zero embedding rows: PAD only.
pub fn frozen_rows() -> BTreeSet<usize> {
    [PAD_TOKEN as usize].into_iter().collect()
}

/// Bytes as ids, one EOF, then PAD up to at least `min_len`.
pub fn tokenize(bytes: &[u8], min_len: usize) -> Vec<u16> {
    let n = (bytes.len() + 1).max(min_len);
    let mut out = Vec::with_capacity(n);
    out.extend(bytes.iter().map(|&b| b as u16));
    out.push(EOF_TOKEN);
    out.resize(n, PAD_TOKEN);
    out
}

/// A labeled sample on disk.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: u8,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub records: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Load a `path,label` CSV. Relative paths resolve against the CSV's
/// directory. Each malformed row reports its line number.
pub fn load_index(csv_path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let csv_name = csv_path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "path,label" => {}
        _ => {
            return Err(Error::DataRow {
                path: csv_name,
                line: 1,
                msg: "expected header `path,label`".to_string(),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row_err = |msg: String| Error::DataRow {
            path: csv_name.clone(),
            line: line_no,
            msg,
        };
        let (path_field, label_field) = line
            .rsplit_once(',')
            .ok_or_else(|| row_err("expected `path,label`".to_string()))?;
        let label: u8 = match label_field.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(row_err(format!("label `{other}` is not 0 or 1"))),
        };
        let mut path = PathBuf::from(path_field.trim());
        if path.is_relative() {
            path = base.join(path);
        }
        let meta = std::fs::metadata(&path)
            .map_err(|e| row_err(format!("{}: {e}", path.display())))?;
        records.push(SampleRecord {
            path,
            label,
            byte_length: meta.len(),
        });
    }
    Ok(DatasetIndex { records })
}

/// Token stream over a sample that never materializes the whole file unless
/// explicitly asked to. File-backed sources serve the winner scan with
/// chunk-sized positional reads.
pub enum TokenSource {
    Mem(Vec<u16>),
    File {
        file: File,
        path: String,
        byte_len: usize,
        total_len: usize,
    },
}

impl TokenSource {
    pub fn from_bytes(bytes: &[u8], min_len: usize) -> Self {
        TokenSource::Mem(tokenize(bytes, min_len))
    }

    pub fn from_tokens(tokens: Vec<u16>) -> Self {
        TokenSource::Mem(tokens)
    }

    pub fn open(path: &Path, min_len: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let byte_len = file
            .metadata()
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .len() as usize;
        Ok(TokenSource::File {
            file,
            path: path.display().to_string(),
            byte_len,
            total_len: (byte_len + 1).max(min_len),
        })
    }

    /// Token length including EOF and padding.
    pub fn len(&self) -> usize {
        match self {
            TokenSource::Mem(v) => v.len(),
            TokenSource::File { total_len, .. } => *total_len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fill `out` with tokens starting at `start`.
    pub fn read_into(&self, start: usize, out: &mut [u16]) -> Result<()> {
        debug_assert!(start + out.len() <= self.len());
        match self {
            TokenSource::Mem(v) => out.copy_from_slice(&v[start..start + out.len()]),
            TokenSource::File {
                file,
                path,
                byte_len,
                ..
            } => {
                let in_file = byte_len.saturating_sub(start).min(out.len());
                if in_file > 0 {
                    let mut buf = vec![0u8; in_file];
                    file.read_exact_at(&mut buf, start as u64)
                        .map_err(|e| Error::io(path.clone(), e))?;
                    for (o, b) in out[..in_file].iter_mut().zip(&buf) {
                        *o = *b as u16;
                    }
                }
                for (i, o) in out.iter_mut().enumerate().skip(in_file) {
                    let pos = start + i;
                    *o = if pos == *byte_len { EOF_TOKEN } else { PAD_TOKEN };
                }
            }
        }
        Ok(())
    }

    /// Whole token sequence in memory; only the dense reference path needs it.
    pub fn materialize(&self) -> Result<Vec<u16>> {
        match self {
            TokenSource::Mem(v) => Ok(v.clone()),
            _ => {
                let mut out = vec![0u16; self.len()];
                self.read_into(0, &mut out)?;
                Ok(out)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Deterministic shuffling
// ---------------------------------------------------------------------------

/// Seeded per-epoch sample order: each epoch gets a distinct but reproducible
/// permutation.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticTask {
    /// Label 1 iff motif M1 occurs anywhere.
    A,
    /// Context-conditional: a key K may sit in the first `key_window` bytes.
    /// Label 1 iff (K present AND M1 present at distance >= sep_min from K)
    /// or (K absent AND M2 present). Distractor motifs appear in both
    /// classes, so no single motif is sufficient.
    B,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n_samples: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
    /// Hex-encoded motifs. Task A: `[M1]`. Task B: `[K, M1, M2]`.
    #[serde(default)]
    pub motifs: Vec<String>,
    /// Minimum K-to-M1 distance for task B labels.
    #[serde(default = "default_sep_min")]
    pub sep_min: usize,
    /// K must start within the first this-many bytes.
    #[serde(default = "default_key_window")]
    pub key_window: usize,
    /// How many copies of each selected motif to plant. The label rule is
    /// presence-based, so extra copies leave labels and the motif-only
    /// baseline untouched; they only raise the odds that a motif window wins
    /// the max pool early in training.
    #[serde(default = "default_copies")]
    pub copies: usize,
}

fn default_sep_min() -> usize {
    2560
}

fn default_key_window() -> usize {
    1024
}

fn default_copies() -> usize {
    1
}

impl SyntheticSpec {
    pub fn default_motifs(task: SyntheticTask) -> Vec<String> {
        // Arbitrary distinctive 16-byte patterns.
        let k = "4b45595f434f4e544558545f30303142"; // "KEY_CONTEXT_001B"
        let m1 = "4d4f5449465f414c5048415f39374651"; // "MOTIF_ALPHA_97FQ"
        let m2 = "4d4f5449465f425241564f5f32583755"; // "MOTIF_BRAVO_2X7U"
        match task {
            SyntheticTask::A => vec![m1.to_string()],
            SyntheticTask::B => vec![k.to_string(), m1.to_string(), m2.to_string()],
        }
    }

    pub fn decoded_motifs(&self) -> Result<Vec<Vec<u8>>> {
        let hexes = if self.motifs.is_empty() {
            Self::default_motifs(self.task)
        } else {
            self.motifs.clone()
        };
        let needed = match self.task {
            SyntheticTask::A => 1,
            SyntheticTask::B => 3,
        };
        if hexes.len() != needed {
            return Err(Error::Config(format!(
                "task {:?} needs {needed} motifs, got {}",
                self.task,
                hexes.len()
            )));
        }
        hexes.iter().map(|h| decode_hex(h)).collect()
    }

    fn validate(&self, motifs: &[Vec<u8>]) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".to_string()));
        }
        if self.len_min > self.len_max {
            return Err(Error::Config("len_min > len_max".to_string()));
        }
        let max_motif = motifs.iter().map(|m| m.len()).max().unwrap_or(0);
        if max_motif < 4 {
            return Err(Error::Config("motifs must be at least 4 bytes".to_string()));
        }
        if self.copies == 0 {
            return Err(Error::Config("copies must be >= 1".to_string()));
        }
        let floor = match self.task {
            SyntheticTask::A => 4 * self.copies * max_motif,
            SyntheticTask::B => self.key_window + self.sep_min + 4 * self.copies * max_motif,
        };
        if self.len_min < floor {
            return Err(Error::Config(format!(
                "len_min {} too small for task layout (need >= {floor})",
                self.len_min
            )));
        }
        Ok(())
    }
}

fn decode_hex(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    if s.len() % 2 != 0 || !s.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::Config(format!("invalid hex motif `{s}`")));
    }
    Ok((0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap())
        .collect())
}

fn find_all(hay: &[u8], needle: &[u8]) -> Vec<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| &hay[i..i + needle.len()] == needle)
        .collect()
}

/// Label rule for task B, recomputable from file bytes alone.
pub fn task_b_label(bytes: &[u8], k: &[u8], m1: &[u8], m2: &[u8], sep_min: usize, key_window: usize) -> u8 {
    let k_pos = find_all(bytes, k)
        .into_iter()
        .find(|&p| p < key_window);
    match k_pos {
        Some(kp) => {
            let far = find_all(bytes, m1)
                .into_iter()
                .any(|p| p.abs_diff(kp) >= sep_min);
            far as u8
        }
        None => (!find_all(bytes, m2).is_empty()) as u8,
    }
}

pub fn task_a_label(bytes: &[u8], m1: &[u8]) -> u8 {
    (!find_all(bytes, m1).is_empty()) as u8
}

/// Plan of one task-B sample before byte generation.
#[derive(Clone, Copy)]
struct PlantPlan {
    key: bool,
    m1: bool,
    m2: bool,
    label: u8,
}

/// Generate a corpus under `out_dir` (raw `.bin` files plus `labels.csv`),
/// fully determined by the spec's seed. Labels are re-derived from the
/// written bytes by the documented rule and cross-checked; for task B the
/// motif-only baselines are verified to stay at or below 75 % accuracy.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetIndex> {
    let motifs = spec.decoded_motifs()?;
    spec.validate(&motifs)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let plans: Vec<PlantPlan> = match spec.task {
        SyntheticTask::A => (0..spec.n_samples)
            .map(|i| {
                let pos = i % 2 == 0;
                PlantPlan {
                    key: false,
                    m1: pos,
                    m2: false,
                    label: pos as u8,
                }
            })
            .collect(),
        SyntheticTask::B => (0..spec.n_samples)
            .map(|i| {
                // Four balanced populations x exact-half distractors: every
                // motif-presence classifier caps at 75 % accuracy while the
                // key-aware rule stays exact.
                let pop = i % 4;
                let distract = (i / 4) % 2 == 0;
                match pop {
                    0 => PlantPlan { key: true, m1: true, m2: distract, label: 1 },
                    1 => PlantPlan { key: true, m1: false, m2: distract, label: 0 },
                    2 => PlantPlan { key: false, m1: distract, m2: true, label: 1 },
                    _ => PlantPlan { key: false, m1: distract, m2: false, label: 0 },
                }
            })
            .collect(),
    };

    let mut records = Vec::with_capacity(spec.n_samples);
    let mut csv = String::from("path,label\n");
    for (i, plan) in plans.iter().enumerate() {
        let bytes = loop {
            let candidate = render_sample(spec, &motifs, *plan, &mut rng);
            let derived = match spec.task {
                SyntheticTask::A => task_a_label(&candidate, &motifs[0]),
                SyntheticTask::B => task_b_label(
                    &candidate,
                    &motifs[0],
                    &motifs[1],
                    &motifs[2],
                    spec.sep_min,
                    spec.key_window,
                ),
            };
            // Accidental motif collisions in the random background are
            // astronomically unlikely for >= 8-byte motifs; redraw if seen.
            if derived == plan.label {
                break candidate;
            }
        };
        let name = format!("{i:06}.bin");
        let path = out_dir.join(&name);
        let mut f =
            File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        csv.push_str(&format!("{name},{}\n", plan.label));
        records.push(SampleRecord {
            path,
            label: plan.label,
            byte_length: bytes.len() as u64,
        });
    }
    let csv_path = out_dir.join("labels.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    verify_corpus(spec, &motifs, &records)?;
    Ok(DatasetIndex { records })
}

fn render_sample(
    spec: &SyntheticSpec,
    motifs: &[Vec<u8>],
    plan: PlantPlan,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let len = rng.gen_range(spec.len_min..=spec.len_max);
    let mut bytes = vec![0u8; len];
    rng.fill(bytes.as_mut_slice());
    match spec.task {
        SyntheticTask::A => {
            if plan.m1 {
                let m = &motifs[0];
                let mut used: Vec<(usize, usize)> = Vec::new();
                for _ in 0..spec.copies {
                    loop {
                        let pos = rng.gen_range(0..=len - m.len());
                        if used.iter().all(|&(s, e)| pos + m.len() <= s || pos >= e) {
                            bytes[pos..pos + m.len()].copy_from_slice(m);
                            used.push((pos, pos + m.len()));
                            break;
                        }
                    }
                }
            }
        }
        SyntheticTask::B => {
            let (k, m1, m2) = (&motifs[0], &motifs[1], &motifs[2]);
            let mut used: Vec<(usize, usize)> = Vec::new();
            let place = |rng: &mut ChaCha8Rng,
                             lo: usize,
                             hi: usize,
                             m: &[u8],
                             bytes: &mut [u8],
                             used: &mut Vec<(usize, usize)>| {
                loop {
                    let pos = rng.gen_range(lo..=hi);
                    if used
                        .iter()
                        .all(|&(s, e)| pos + m.len() <= s || pos >= e)
                    {
                        bytes[pos..pos + m.len()].copy_from_slice(m);
                        used.push((pos, pos + m.len()));
                        return pos;
                    }
                }
            };
            let key_present = if plan.key {
                // Extra key copies also live inside the key window, so the
                // "first K in the window" the label rule anchors on is one
                // of them and M1 placement below clears sep_min from all.
                for _ in 0..spec.copies.min(spec.key_window / (2 * k.len())).max(1) {
                    place(rng, 0, spec.key_window - k.len(), k, &mut bytes, &mut used);
                }
                true
            } else {
                false
            };
            if plan.m1 {
                for _ in 0..spec.copies {
                    if key_present {
                        // Label-relevant M1 must sit at least sep_min past
                        // every key copy.
                        place(
                            rng,
                            spec.key_window + spec.sep_min,
                            len - m1.len(),
                            m1,
                            &mut bytes,
                            &mut used,
                        );
                    } else {
                        place(rng, 0, len - m1.len(), m1, &mut bytes, &mut used);
                    }
                }
            }
            if plan.m2 {
                for _ in 0..spec.copies {
                    place(rng, 0, len - m2.len(), m2, &mut bytes, &mut used);
                }
            }
        }
    }
    bytes
}

/// Re-derive every label from file bytes and, for task B, empirically cap the
/// motif-only baselines.
fn verify_corpus(spec: &SyntheticSpec, motifs: &[Vec<u8>], records: &[SampleRecord]) -> Result<()> {
    let mut m1_hits = Vec::with_capacity(records.len());
    let mut m2_hits = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        let mut bytes = Vec::new();
        File::open(&rec.path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(rec.path.display().to_string(), e))?;
        let derived = match spec.task {
            SyntheticTask::A => task_a_label(&bytes, &motifs[0]),
            SyntheticTask::B => task_b_label(
                &bytes,
                &motifs[0],
                &motifs[1],
                &motifs[2],
                spec.sep_min,
                spec.key_window,
            ),
        };
        if derived != rec.label {
            return Err(Error::Config(format!(
                "{}: stored label {} disagrees with derived {}",
                rec.path.display(),
                rec.label,
                derived
            )));
        }
        labels.push(rec.label);
        if spec.task == SyntheticTask::B {
            m1_hits.push(!find_all(&bytes, &motifs[1]).is_empty());
            m2_hits.push(!find_all(&bytes, &motifs[2]).is_empty());
        }
    }
    if spec.task == SyntheticTask::B {
        let cap = if records.len() % 8 == 0 { 0.75 } else { 0.78 };
        let acc = best_motif_baseline_accuracy(&m1_hits, &m2_hits, &labels);
        if acc > cap + 1e-9 {
            return Err(Error::Config(format!(
                "motif-only baseline reaches {acc:.4} > {cap}"
            )));
        }
    }
    Ok(())
}

/// Best accuracy over all 16 boolean functions of (M1 present, M2 present).
pub fn best_motif_baseline_accuracy(m1: &[bool], m2: &[bool], labels: &[u8]) -> f64 {
    let mut best = 0.0f64;
    for f in 0..16u32 {
        let mut correct = 0usize;
        for i in 0..labels.len() {
            let cell = ((m1[i] as u32) << 1) | m2[i] as u32;
            let pred = (f >> cell) & 1;
            if pred as u8 == labels[i] {
                correct += 1;
            }
        }
        best = best.max(correct as f64 / labels.len() as f64);
    }
    best
}
