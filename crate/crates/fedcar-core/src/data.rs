//! Datasets: seeded Gaussian-blob generation, train/validation splitting,
//! and the binary on-disk format shared by raw-feature datasets and
//! precomputed hidden-state tables.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic  "FCHS"        4 bytes
//! version 1            1 byte
//! n  (sample count)    u32
//! d  (vector dim)      u32
//! k  (class count)     u32
//! n records:  label u32, then d × f64
//! ```
//!
//! Total length is therefore `17 + n·(4 + 8d)` bytes. Sample ids are record
//! positions, so a file round-trips to the identical byte string.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tags, SplitMix64};
use std::io::{Read, Write};
use std::path::Path;

pub const DATA_MAGIC: [u8; 4] = *b"FCHS";
pub const DATA_VERSION: u8 = 1;

/// One labeled vector. `id` is stable across splits and shards so that
/// precomputed hidden-state lookups keep working after partitioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub features: Vec<f64>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Hidden-state table indexed by sample id (for the precomputed encoder).
    /// Requires ids to be exactly 0..n in some order.
    pub fn state_table(&self) -> Result<Vec<Vec<f64>>> {
        let mut table = vec![Vec::new(); self.samples.len()];
        for s in &self.samples {
            let slot = table
                .get_mut(s.id as usize)
                .ok_or(Error::UnknownSampleId(s.id))?;
            *slot = s.features.clone();
        }
        if let Some(missing) = table.iter().position(|v| v.is_empty()) {
            return Err(Error::Format(format!("dataset has no sample with id {missing}")));
        }
        Ok(table)
    }
}

/// Isotropic Gaussian blobs: each class center is a seeded random point on
/// the unit sphere scaled by 3; points are center + spread·N(0, I). Samples
/// come out class-major with ids 0..n.
pub fn gen_synthetic(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    assert!(n_classes >= 1 && dim >= 1 && n_per_class >= 1);
    assert!(spread >= 0.0, "spread must be nonnegative");
    let mut samples = Vec::with_capacity(n_per_class * n_classes);
    for c in 0..n_classes {
        let mut center_rng = SplitMix64::new(derive_seed(seed, tags::DATA_CENTER, c as u64));
        let mut center: Vec<f64> = (0..dim).map(|_| center_rng.next_gaussian()).collect();
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        center.iter_mut().for_each(|v| *v *= 3.0 / norm);

        let mut point_rng = SplitMix64::new(derive_seed(seed, tags::DATA_POINT, c as u64));
        for j in 0..n_per_class {
            let features = center
                .iter()
                .map(|&m| m + spread * point_rng.next_gaussian())
                .collect();
            samples.push(Sample {
                id: (c * n_per_class + j) as u32,
                features,
                label: c as u32,
            });
        }
    }
    Dataset { dim, n_classes, samples }
}

/// Seeded holdout split; `val_fraction` of the samples (rounded down) go to
/// the validation set. Ids are preserved.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!((0.0..1.0).contains(&val_fraction), "val_fraction in [0, 1)");
    let mut order: Vec<usize> = (0..ds.samples.len()).collect();
    SplitMix64::new(derive_seed(seed, tags::VAL_SPLIT, 0)).shuffle(&mut order);
    let n_val = (ds.samples.len() as f64 * val_fraction).floor() as usize;
    let mk = |ids: &[usize]| Dataset {
        dim: ds.dim,
        n_classes: ds.n_classes,
        samples: ids.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    (mk(&order[n_val..]), mk(&order[..n_val]))
}

/// Serialize in the documented byte layout.
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + ds.samples.len() * (4 + 8 * ds.dim));
    out.extend_from_slice(&DATA_MAGIC);
    out.push(DATA_VERSION);
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes as u32).to_le_bytes());
    for s in &ds.samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse the documented byte layout; errors name the offending byte offset.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let need = |have: usize, need: usize, what: &str| -> Result<()> {
        if have < need {
            Err(Error::Format(format!(
                "truncated at byte {have}: {what} needs {need} bytes total"
            )))
        } else {
            Ok(())
        }
    };
    need(bytes.len(), 17, "header")?;
    if bytes[0..4] != DATA_MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    if bytes[4] != DATA_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let rd_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let n = rd_u32(5) as usize;
    let dim = rd_u32(9) as usize;
    let n_classes = rd_u32(13) as usize;
    if dim == 0 || n_classes == 0 {
        return Err(Error::Format("zero dimension or class count".into()));
    }
    let record = 4 + 8 * dim;
    let expect = 17 + n * record;
    if bytes.len() < expect {
        return Err(Error::Format(format!(
            "truncated at byte {}: {n} records of {record} bytes need {expect} bytes total",
            bytes.len()
        )));
    }
    if bytes.len() > expect {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - expect
        )));
    }
    let mut samples = Vec::with_capacity(n);
    let mut at = 17;
    for id in 0..n {
        let label = rd_u32(at);
        if label as usize >= n_classes {
            return Err(Error::Format(format!(
                "record {id}: label {label} out of range for {n_classes} classes"
            )));
        }
        at += 4;
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format(format!("record {id}: non-finite feature")));
            }
            features.push(v);
            at += 8;
        }
        samples.push(Sample { id: id as u32, features, label });
    }
    Ok(Dataset { dim, n_classes, samples })
}

/// Write a dataset (raw features or hidden states — same layout) to disk.
pub fn save_hidden_states(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&dataset_to_bytes(ds))?;
    Ok(())
}

/// Load a dataset file; the reverse of `save_hidden_states`.
pub fn load_hidden_states(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_centers_sit_on_the_3_sphere() {
        let ds = gen_synthetic(50, 3, 8, 0.0, 42);
        // spread 0 ⇒ every sample IS its class center
        for c in 0..3 {
            let s = &ds.samples[c * 50];
            let norm = s.features.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-9, "class {c} center norm {norm}");
            for j in 1..50 {
                assert_eq!(ds.samples[c * 50 + j].features, s.features);
            }
        }
    }

    #[test]
    fn blob_spread_controls_scatter() {
        let spread = 0.5;
        let ds = gen_synthetic(4000, 1, 6, spread, 7);
        let center = gen_synthetic(1, 1, 6, 0.0, 7).samples[0].features.clone();
        let mut var = 0.0;
        for s in &ds.samples {
            var += s
                .features
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        var /= (ds.samples.len() * 6) as f64;
        assert!(
            (var - spread * spread).abs() < 0.01,
            "per-coordinate variance {var} vs {}",
            spread * spread
        );
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_synthetic(10, 2, 4, 0.3, 9);
        let b = gen_synthetic(10, 2, 4, 0.3, 9);
        assert_eq!(a, b);
        let c = gen_synthetic(10, 2, 4, 0.3, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn split_preserves_ids_and_counts() {
        let ds = gen_synthetic(25, 2, 3, 0.1, 1);
        let (train, val) = split_train_val(&ds, 0.2, 99);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 40);
        let mut ids: Vec<u32> = train.samples.iter().chain(&val.samples).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<u32>>());
    }

    #[test]
    fn byte_layout_length_formula() {
        let ds = gen_synthetic(3, 2, 5, 0.1, 4);
        let bytes = dataset_to_bytes(&ds);
        assert_eq!(bytes.len(), 17 + 6 * (4 + 8 * 5));
        assert_eq!(&bytes[0..4], b"FCHS");
        assert_eq!(bytes[4], 1);
    }

    #[test]
    fn hand_assembled_single_record_file() {
        // magic, version, n=1, d=2, k=1, then label 0 and values 1.0, 2.0
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"FCHS");
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        bytes.extend_from_slice(&2.0f64.to_le_bytes());
        let ds = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(ds.dim, 2);
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].features, vec![1.0, 2.0]);
        assert_eq!(ds.samples[0].label, 0);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ds = gen_synthetic(7, 3, 4, 0.2, 11);
        let bytes = dataset_to_bytes(&ds);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(dataset_to_bytes(&back), bytes);
        assert_eq!(back, ds);
    }

    #[test]
    fn decode_rejects_malformed_inputs() {
        let good = dataset_to_bytes(&gen_synthetic(2, 2, 3, 0.1, 5));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(dataset_from_bytes(&bad_magic).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(dataset_from_bytes(&bad_version).is_err());
        // truncation error names a byte offset
        let err = dataset_from_bytes(&good[..good.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("byte"), "got: {err}");
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(dataset_from_bytes(&trailing).is_err());
        let mut bad_label = good;
        bad_label[17..21].copy_from_slice(&9u32.to_le_bytes());
        assert!(dataset_from_bytes(&bad_label).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.fchs");
        let ds = gen_synthetic(5, 2, 3, 0.4, 21);
        save_hidden_states(&ds, &path).unwrap();
        assert_eq!(load_hidden_states(&path).unwrap(), ds);
    }

    #[test]
    fn state_table_by_id() {
        let ds = gen_synthetic(3, 2, 2, 0.1, 2);
        let table = ds.state_table().unwrap();
        for s in &ds.samples {
            assert_eq!(table[s.id as usize], s.features);
        }
    }
}
