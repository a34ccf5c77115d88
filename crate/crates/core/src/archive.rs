//! On-disk weight archives.
//!
//! An archive is a TOML manifest plus a flat little-endian binary blob. The
//! manifest lists every tensor with its name, shape, byte offset and dtype,
//! together with the configuration snapshot and a format-version string.
//! The blob sits next to the manifest, named `<manifest file name>.bin`.
//!
//! ```text
//! model.wt        manifest
//! model.wt.bin    tensors, back to back, in manifest order
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::networks::{Model, NetworkRole, ParamStore, PowerNormStats};
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: &str = "fbcode-weights/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub blob: String,
    pub blob_bytes: u64,
    pub parity_stats_frozen: bool,
    pub feedback_stats_frozen: bool,
    /// Free-form counters (optimizer step, batch index, ...).
    #[serde(default)]
    pub metadata: toml::Table,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".bin");
    manifest.with_file_name(name)
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

/// Writes `tensors` and a manifest built from `config` and `metadata`.
pub fn write_tensors<S: Scalar>(
    path: &Path,
    config: &ExperimentConfig,
    tensors: &[(String, &Tensor<S>)],
    frozen: (bool, bool),
    metadata: toml::Table,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            offset: blob.len() as u64,
            dtype: S::DTYPE.to_string(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        blob: blob_file.file_name().unwrap().to_string_lossy().into_owned(),
        blob_bytes: blob.len() as u64,
        parity_stats_frozen: frozen.0,
        feedback_stats_frozen: frozen.1,
        metadata,
        config: config.clone(),
        tensors: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse {
        what: "manifest".into(),
        reason: e.to_string(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A manifest and its blob, read and checked for consistency.
#[derive(Clone, Debug)]
pub struct TensorFile {
    pub manifest: Manifest,
    blob: Vec<u8>,
    hash: String,
}

impl TensorFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Archive {
            entry: path.display().to_string(),
            reason: format!("unreadable manifest: {e}"),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Archive {
                entry: "format_version".into(),
                reason: format!("unsupported version `{}`", manifest.format_version),
            });
        }
        let blob_file = path.with_file_name(&manifest.blob);
        let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(Error::Archive {
                entry: manifest.blob.clone(),
                reason: format!("blob has {} bytes, manifest declares {}", blob.len(), manifest.blob_bytes),
            });
        }
        let mut covered = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let size = dtype_size(&e.dtype).ok_or_else(|| Error::Archive {
                entry: e.name.clone(),
                reason: format!("unknown dtype `{}`", e.dtype),
            })?;
            let bytes = (e.shape[0] * e.shape[1] * size) as u64;
            if e.offset % size as u64 != 0 || e.offset + bytes > blob.len() as u64 {
                return Err(Error::Archive {
                    entry: e.name.clone(),
                    reason: format!("bad offset {} for {bytes} bytes in a {}-byte blob", e.offset, blob.len()),
                });
            }
            covered.push((e.offset, e.offset + bytes, e.name.clone()));
        }
        covered.sort();
        for w in covered.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Archive {
                    entry: w[1].2.clone(),
                    reason: format!("overlaps `{}`", w[0].2),
                });
            }
        }
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(&blob);
        let hash = hex::encode(&h.finalize()[..8]);
        Ok(TensorFile { manifest, blob, hash })
    }

    /// Content hash of manifest and blob.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|e| e.name == name)
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let e = self.entry(name).ok_or_else(|| Error::Archive {
            entry: name.to_string(),
            reason: "missing from manifest".into(),
        })?;
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let data: Vec<S> = match e.dtype.as_str() {
            "f32" => self.blob[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| S::from_f64_lossy(f64::from(f32::read_le(c))))
                .collect(),
            _ => self.blob[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        Ok(Tensor::from_vec(e.shape[0], e.shape[1], data))
    }
}

fn stats_name(role: NetworkRole, field: &str) -> String {
    format!("power_norm.{}.{field}", role.name())
}

fn stats_tensor<S: Scalar>(stats: &PowerNormStats, values: &[f64]) -> Tensor<S> {
    Tensor::from_f64(stats.rounds, stats.positions, values)
}

/// Saves parameters, normalization statistics and configuration.
pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path, metadata: toml::Table) -> Result<()> {
    let mut owned: Vec<(String, Tensor<S>)> = Vec::new();
    for (role, stats) in [
        (NetworkRole::Parity, &model.parity_stats),
        (NetworkRole::Feedback, &model.feedback_stats),
    ] {
        if stats.rounds > 0 {
            owned.push((stats_name(role, "mean"), stats_tensor(stats, &stats.mean)));
            owned.push((stats_name(role, "std"), stats_tensor(stats, &stats.std)));
        }
    }
    let mut tensors: Vec<(String, &Tensor<S>)> =
        model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
    write_tensors(
        path,
        &model.config,
        &tensors,
        (model.parity_stats.frozen, model.feedback_stats.frozen),
        metadata,
    )
}

fn read_stats<S: Scalar>(file: &TensorFile, role: NetworkRole, rounds: usize, l: usize, frozen: bool) -> Result<PowerNormStats> {
    let mut stats = PowerNormStats::unfrozen(rounds, l);
    if rounds == 0 {
        return Ok(stats);
    }
    for (field, dst) in [("mean", &mut stats.mean), ("std", &mut stats.std)] {
        let name = stats_name(role, field);
        let t = file.tensor::<S>(&name)?;
        if t.shape() != [rounds, l] {
            return Err(Error::Archive {
                entry: name,
                reason: format!("shape {:?}, expected [{rounds}, {l}]", t.shape()),
            });
        }
        *dst = t.to_f64_vec();
    }
    stats.frozen = frozen;
    Ok(stats)
}

/// Loads a model, checking every expected parameter against its declared
/// shape.
pub fn load_model<S: Scalar>(path: &Path) -> Result<(Model<S>, TensorFile)> {
    let file = TensorFile::read(path)?;
    let config = file.manifest.config.clone();
    config.validate().into_result()?;
    let template = Model::<S>::from_parts(config.clone(), ParamStore::default());
    let mut params = ParamStore::default();
    for spec in template.manifest() {
        let t = file.tensor::<S>(&spec.name)?;
        if t.shape() != spec.shape {
            return Err(Error::Archive {
                entry: spec.name,
                reason: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
            });
        }
        params.insert(&spec.name, t);
    }
    let mut model = Model::from_parts(config, params);
    let p = &model.config.protocol;
    let (rounds, l) = (p.rounds, p.l);
    model.parity_stats = read_stats::<S>(&file, NetworkRole::Parity, rounds, l, file.manifest.parity_stats_frozen)?;
    model.feedback_stats = read_stats::<S>(
        &file,
        NetworkRole::Feedback,
        rounds.saturating_sub(1),
        l,
        file.manifest.feedback_stats_frozen,
    )?;
    Ok((model, file))
}

/// Human- and machine-readable overview of an archive.
#[derive(Clone, Debug, Serialize)]
pub struct ArchiveSummary {
    pub format_version: String,
    pub archive_hash: String,
    pub config_hash: String,
    pub networks: Vec<NetworkSummary>,
    pub total_parameters: usize,
    pub tensors: Vec<TensorSummary>,
    pub stats: Vec<StatsSummary>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct NetworkSummary {
    pub name: String,
    pub layers: usize,
    pub parameters: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct StatsSummary {
    pub network: String,
    pub shape: [usize; 2],
    pub frozen: bool,
    pub mean_abs_mean: f64,
    pub min_std: f64,
    pub max_std: f64,
}

pub fn summarize(path: &Path) -> Result<ArchiveSummary> {
    let (model, file) = load_model::<f64>(path)?;
    let networks = model
        .units()
        .iter()
        .map(|u| NetworkSummary {
            name: u.role.name().to_string(),
            layers: u.n_layers,
            parameters: u.param_specs().iter().map(|s| s.shape[0] * s.shape[1]).sum(),
        })
        .collect();
    let stats = [
        ("parity", &model.parity_stats),
        ("feedback", &model.feedback_stats),
    ]
    .into_iter()
    .filter(|(_, s)| s.rounds > 0)
    .map(|(name, s)| StatsSummary {
        network: name.to_string(),
        shape: s.shape(),
        frozen: s.frozen,
        mean_abs_mean: s.mean.iter().map(|v| v.abs()).sum::<f64>() / s.mean.len() as f64,
        min_std: s.std.iter().copied().fold(f64::INFINITY, f64::min),
        max_std: s.std.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
    .collect();
    Ok(ArchiveSummary {
        format_version: file.manifest.format_version.clone(),
        archive_hash: file.hash().to_string(),
        config_hash: model.config.hash(),
        networks,
        total_parameters: model.params.num_scalars(),
        tensors: file
            .manifest
            .tensors
            .iter()
            .map(|e| TensorSummary {
                name: e.name.clone(),
                shape: e.shape,
                dtype: e.dtype.clone(),
            })
            .collect(),
        stats,
        config: model.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rng_from_seed;
    use crate::config::{desk_scale_config, FeedbackMode};
    use crate::networks::freeze_stats;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wt");
        let mut model = Model::<f32>::new(&desk_scale_config(FeedbackMode::Active), 5).unwrap();
        freeze_stats(&mut model, 64, &mut rng_from_seed(1)).unwrap();
        save_model(&model, &path, toml::Table::new()).unwrap();
        assert!(blob_path(&path).exists());
        let (back, file) = load_model::<f32>(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(file.manifest.format_version, FORMAT_VERSION);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn corrupted_offset_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wt");
        let model = Model::<f32>::new(&desk_scale_config(FeedbackMode::Passive), 5).unwrap();
        save_model(&model, &path, toml::Table::new()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut manifest: Manifest = toml::from_str(&text).unwrap();
        manifest.tensors[3].offset = manifest.blob_bytes + 4;
        let victim = manifest.tensors[3].name.clone();
        std::fs::write(&path, toml::to_string(&manifest).unwrap()).unwrap();
        match load_model::<f32>(&path) {
            Err(Error::Archive { entry, .. }) => assert_eq!(entry, victim),
            other => panic!("expected archive error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn missing_parameter_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wt");
        let model = Model::<f32>::new(&desk_scale_config(FeedbackMode::Passive), 5).unwrap();
        save_model(&model, &path, toml::Table::new()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut manifest: Manifest = toml::from_str(&text).unwrap();
        let removed = manifest.tensors.remove(0).name;
        std::fs::write(&path, toml::to_string(&manifest).unwrap()).unwrap();
        match load_model::<f32>(&path) {
            Err(Error::Archive { entry, .. }) => assert_eq!(entry, removed),
            other => panic!("expected archive error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn summary_lists_networks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wt");
        let model = Model::<f32>::new(&crate::config::reference_config(), 0).unwrap();
        save_model(&model, &path, toml::Table::new()).unwrap();
        let s = summarize(&path).unwrap();
        let layers: Vec<(String, usize)> = s.networks.iter().map(|n| (n.name.clone(), n.layers)).collect();
        assert_eq!(
            layers,
            vec![("parity".into(), 2), ("feedback".into(), 2), ("decoder".into(), 3)]
        );
        assert_eq!(s.total_parameters, model.params.num_scalars());
    }
}
