use std::fs;
use std::path::{Path, PathBuf};

use cgreid::checkpoint;
use cgreid::data::{read_dataset, write_dataset, Dataset, Split};
use cgreid::eval::{describe_test_split, evaluate_descriptors, select_descriptor, EvalReport, ImageMeta, Setting};
use cgreid::model::Model;
use cgreid::trainer::{compare_variants, train, GridResult, TrainLog};
use cgreid::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FEATURES_MAGIC: &[u8; 8] = b"CGREIDFT";
pub const FEATURES_VERSION: u32 = 1;
pub const FEATURES_SCHEMA_VERSION: u32 = 1;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let ds = cgreid::data::generate_dataset(&cfg.synth_spec())?;
    write_dataset(out_dir, &ds)?;
    Ok(ds)
}

fn check_compatible(model: &Model, ds: &Dataset, path: &Path) -> Result<()> {
    let want = model.spec().backbone.input_hw;
    if want != ds.spec.image_hw {
        return Err(Error::format(
            path,
            format!("checkpoint expects {want:?} images but the dataset has {:?}", ds.spec.image_hw),
        ));
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let ds = read_dataset(data_dir)?;
    if ds.spec.image_hw != cfg.data.image_hw || ds.n_train_ids() != cfg.data.n_train_ids {
        return Err(Error::InvalidSpec(format!(
            "dataset in {} does not match the configured image size and identity count",
            data_dir.display()
        )));
    }
    let (model, log) = train(&cfg.model_spec()?, &ds, &cfg.train_spec(), cfg.init_seed())?;
    create_dir(out_dir)?;
    checkpoint::save(&out_dir.join(CHECKPOINT_FILE), &model)?;
    let log_path = out_dir.join(LOG_FILE);
    fs::write(&log_path, log.to_jsonl()?).map_err(|e| Error::io(&log_path, e))?;
    Ok((model, log))
}

pub fn eval_cmd(ckpt: &Path, data_dir: &Path, settings: &[Setting], k_max: Option<usize>) -> Result<Vec<EvalReport>> {
    let model = checkpoint::load(ckpt)?;
    let ds = read_dataset(data_dir)?;
    check_compatible(&model, &ds, ckpt)?;
    let td = describe_test_split(&model, &ds)?;
    settings.iter().map(|&s| evaluate_descriptors(&td, s, k_max)).collect()
}

pub fn compare_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path, jobs: usize) -> Result<GridResult> {
    cfg.validate()?;
    let ds = read_dataset(data_dir)?;
    let result = compare_variants(&cfg.grid, &cfg.model_spec()?, &cfg.train, &ds, jobs)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(&result)? + "\n";
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub identity: usize,
    pub camera: u8,
    pub split: Split,
}

/// JSON sidecar written next to an exported descriptor matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub schema_version: u32,
    pub setting: Setting,
    pub descriptor_dim: usize,
    pub rows: Vec<FeatureRow>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Query then gallery descriptors of the test split.
///
/// Matrix file: magic `CGREIDFT`, version `u32`, N `u64`, D `u64`, then
/// N×D row-major little-endian `f64`s.
pub fn export_features(ckpt: &Path, data_dir: &Path, setting: Setting, out: &Path) -> Result<FeatureSidecar> {
    let model = checkpoint::load(ckpt)?;
    let ds = read_dataset(data_dir)?;
    check_compatible(&model, &ds, ckpt)?;
    let td = describe_test_split(&model, &ds)?;
    let q = select_descriptor(&td.query, setting)?;
    let g = select_descriptor(&td.gallery, setting)?;
    let d = q.dim(1);
    let rows: Vec<FeatureRow> = td
        .query_meta
        .iter()
        .map(|m| (m, Split::Query))
        .chain(td.gallery_meta.iter().map(|m| (m, Split::Gallery)))
        .map(|(m, split)| FeatureRow {
            identity: m.identity,
            camera: m.camera,
            split,
        })
        .collect();
    let mut buf = Vec::with_capacity(24 + 8 * rows.len() * d);
    buf.extend_from_slice(FEATURES_MAGIC);
    buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in q.data().iter().chain(g.data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, buf).map_err(|e| Error::io(out, e))?;
    let sidecar = FeatureSidecar {
        schema_version: FEATURES_SCHEMA_VERSION,
        setting,
        descriptor_dim: d,
        rows,
    };
    let side = sidecar_path(out);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}

/// Features read back from an export.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub sidecar: FeatureSidecar,
    pub n: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl FeatureSet {
    /// Descriptor rows and metadata of one split.
    pub fn split(&self, split: Split) -> (cgreid::tensor::Tensor, Vec<ImageMeta>) {
        let mut data = Vec::new();
        let mut meta = Vec::new();
        for (i, r) in self.sidecar.rows.iter().enumerate() {
            if r.split == split {
                data.extend_from_slice(&self.values[i * self.d..(i + 1) * self.d]);
                meta.push(ImageMeta {
                    identity: r.identity,
                    camera: r.camera,
                });
            }
        }
        let t = cgreid::tensor::Tensor::new(&[meta.len(), self.d], data).expect("rows of width d");
        (t, meta)
    }
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 || &bytes[..8] != FEATURES_MAGIC {
        return Err(Error::format(path, "not a feature file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FEATURES_VERSION {
        return Err(Error::format(path, format!("unsupported feature file version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let body = &bytes[28..];
    if Some(body.len()) != n.checked_mul(d).and_then(|x| x.checked_mul(8)) {
        return Err(Error::format(path, "value count does not match the header"));
    }
    let values = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: FeatureSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if sidecar.rows.len() != n || sidecar.descriptor_dim != d {
        return Err(Error::format(&side, "sidecar does not match the feature matrix"));
    }
    Ok(FeatureSet { sidecar, n, d, values })
}
