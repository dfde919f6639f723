//! Datasets: synthetic scenes, netpbm ingestion, manifests and noise.

pub mod netpbm;
pub mod noise;
pub mod scene;
pub mod split;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use netpbm::Image8;
pub use scene::{CueBox, Scene, SceneSpec};
pub use split::Split;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CUES_FILE: &str = "cues.csv";
pub const SPEC_FILE: &str = "scene_spec.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// `path,label,split` rows; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    /// Generator parameters when the dataset is synthetic.
    pub source: Option<SceneSpec>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        match &self.source {
            Some(spec) => spec.n_classes,
            None => self.rows.iter().map(|r| r.label + 1).max().unwrap_or(0),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let n_classes = self.n_classes();
        for row in &self.rows {
            if !seen.insert(row.path.as_str()) {
                return Err(Error::input(format!(
                    "duplicate manifest path {:?}",
                    row.path
                )));
            }
            if row.label >= n_classes {
                return Err(Error::input(format!(
                    "label {} of {:?} ≥ {n_classes} classes",
                    row.label, row.path
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::input(format!(
                "manifest header must be path,label,split, got {headers:?}"
            )));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let m = Self { rows, source: None };
        m.validate()?;
        Ok(m)
    }

    /// Reads `manifest.csv`, picking up `scene_spec.json` beside it if present.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
        let mut m = Self::from_csv(&text)?;
        let spec_path = path.with_file_name(SPEC_FILE);
        if spec_path.exists() {
            let spec = fs::read_to_string(&spec_path).map_err(Error::at_path(&spec_path))?;
            m.source = Some(serde_json::from_str(&spec)?);
            m.validate()?;
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(Error::at_path(path))
    }
}

/// One decoded image with its label and split.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub path: String,
    pub label: usize,
    /// Stored 8-bit pixels, the input to noise corruption.
    pub raw: Image8,
    /// `raw` as a `3 × h × w` tensor in `[0, 1]`.
    pub image: Tensor,
    /// Cue location, known for synthetic scenes.
    pub cue: Option<CueBox>,
}

impl Sample {
    pub fn new(path: String, label: usize, raw: Image8, cue: Option<CueBox>) -> Self {
        let raw = raw.to_rgb();
        let image = raw.to_tensor();
        Self {
            path,
            label,
            raw,
            image,
            cue,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn scene_path(spec: &SceneSpec, index: usize) -> String {
    format!(
        "images/c{}_{:04}.ppm",
        spec.label_of(index),
        index % spec.images_per_class
    )
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn push(&mut self, split: Split, sample: Sample) {
        match split {
            Split::Train => self.train.push(sample),
            Split::Val => self.val.push(sample),
            Split::Test => self.test.push(sample),
        }
    }

    /// Generates `spec` in memory and splits it 60/20/20 per class.
    pub fn synthetic(spec: &SceneSpec, exec: Exec) -> Result<(Self, DatasetManifest)> {
        let scenes = scene::generate_scenes(spec, exec)?;
        let labels: Vec<usize> = scenes.iter().map(|s| s.label).collect();
        let splits = split::split_dataset(&labels, spec.seed);
        let mut data = Dataset {
            n_classes: spec.n_classes,
            train: vec![],
            val: vec![],
            test: vec![],
        };
        let mut manifest = DatasetManifest {
            rows: Vec::new(),
            source: Some(spec.clone()),
        };
        for (i, (scene, split)) in scenes.into_iter().zip(splits).enumerate() {
            let path = scene_path(spec, i);
            manifest.rows.push(ManifestRow {
                path: path.clone(),
                label: scene.label,
                split,
            });
            data.push(
                split,
                Sample::new(path, scene.label, scene.image, Some(scene.cue)),
            );
        }
        Ok((data, manifest))
    }

    /// Loads every image named by a manifest file. `resize` applies a
    /// nearest-neighbor resize to `(height, width)` on ingest.
    pub fn load(manifest_path: impl AsRef<Path>, resize: Option<(usize, usize)>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let cues = read_cues(&root.join(CUES_FILE))?;
        let mut data = Dataset {
            n_classes: manifest.n_classes(),
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for row in &manifest.rows {
            let mut raw = netpbm::read_pnm(root.join(&row.path))?.to_rgb();
            let mut cue = cues.iter().find(|(p, _)| p == &row.path).map(|(_, c)| *c);
            if let Some((h, w)) = resize {
                if (raw.height, raw.width) != (h, w) {
                    raw = raw.resize_nearest(h, w);
                    cue = None;
                }
            }
            data.push(
                row.split,
                Sample::new(row.path.clone(), row.label, raw, cue),
            );
        }
        Ok(data)
    }
}

fn read_cues(path: &Path) -> Result<Vec<(String, CueBox)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    #[derive(Deserialize)]
    struct Row {
        path: String,
        row: usize,
        col: usize,
        size: usize,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok((
                row.path,
                CueBox {
                    row: row.row,
                    col: row.col,
                    size: row.size,
                },
            ))
        })
        .collect()
}

/// Writes every image of `spec` under `out_dir`, together with
/// `manifest.csv`, `cues.csv` and `scene_spec.json`.
pub fn generate_dataset(
    spec: &SceneSpec,
    out_dir: impl AsRef<Path>,
    exec: Exec,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let images_dir: PathBuf = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(Error::at_path(&images_dir))?;
    let scenes = scene::generate_scenes(spec, exec)?;
    let written: Vec<Result<()>> = exec.map_range(scenes.len(), |i| {
        netpbm::write_pnm(&scenes[i].image, out_dir.join(scene_path(spec, i)))
    });
    written.into_iter().collect::<Result<()>>()?;

    let labels: Vec<usize> = scenes.iter().map(|s| s.label).collect();
    let splits = split::split_dataset(&labels, spec.seed);
    let rows = scenes
        .iter()
        .zip(&splits)
        .enumerate()
        .map(|(i, (s, &split))| ManifestRow {
            path: scene_path(spec, i),
            label: s.label,
            split,
        })
        .collect();
    let manifest = DatasetManifest {
        rows,
        source: Some(spec.clone()),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;

    let mut cues = String::from("path,row,col,size\n");
    for (i, s) in scenes.iter().enumerate() {
        cues.push_str(&format!(
            "{},{},{},{}\n",
            scene_path(spec, i),
            s.cue.row,
            s.cue.col,
            s.cue.size
        ));
    }
    let cues_path = out_dir.join(CUES_FILE);
    fs::write(&cues_path, cues).map_err(Error::at_path(&cues_path))?;
    let spec_path = out_dir.join(SPEC_FILE);
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?)
        .map_err(Error::at_path(&spec_path))?;
    Ok(manifest)
}
