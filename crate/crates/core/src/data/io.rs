//! On-disk dataset: `manifest.json` plus one raw little-endian `f32` blob per
//! image (3×H×W, row-major, no header).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub file: String,
    pub identity: usize,
    pub camera: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub spec: SynthSpec,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub samples: Vec<ManifestSample>,
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let (h, w) = ds.spec.image_hw;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("{IMAGE_DIR}/{i:06}.f32");
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestSample {
            file,
            identity: s.identity,
            camera: s.camera,
            split: s.split,
        });
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        seed: ds.spec.seed,
        image_shape: [3, h, w],
        spec: ds.spec.clone(),
        train_ids: ds.train_ids.clone(),
        test_ids: ds.test_ids.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    let mut spec = manifest.spec;
    spec.seed = manifest.seed;
    let shape = manifest.image_shape;
    let n: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != 4 * n {
            return Err(Error::format(&p, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        samples.push(Sample {
            image: Tensor::new(&shape, data)?,
            identity: entry.identity,
            camera: entry.camera,
            split: entry.split,
        });
    }
    let ds = Dataset {
        spec,
        samples,
        train_ids: manifest.train_ids,
        test_ids: manifest.test_ids,
    };
    ds.check_invariants()?;
    Ok(ds)
}
