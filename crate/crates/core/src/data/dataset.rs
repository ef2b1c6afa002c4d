use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_ppm, save_ppm, ImageTensor};
use crate::error::{Error, Result};
use crate::rng::mix64;

pub const LABELS_FILE: &str = "labels.csv";
pub const CLASSES_FILE: &str = "classes.csv";

/// Deterministic 90/10 split by index hash.
pub fn is_held_out(index: usize) -> bool {
    mix64(index as u64) % 10 == 0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    HeldOut,
    All,
}

impl Split {
    pub fn contains(self, index: usize) -> bool {
        match self {
            Split::Train => !is_held_out(index),
            Split::HeldOut => is_held_out(index),
            Split::All => true,
        }
    }
}

/// Images with dense class ids in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    file_names: Vec<String>,
    class_names: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    filename: String,
    class_id: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct ClassRow {
    class_id: usize,
    name: String,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        file_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != file_names.len() {
            return Err(Error::InvalidParameter(format!(
                "{} images, {} labels, {} names",
                images.len(),
                labels.len(),
                file_names.len()
            )));
        }
        if let Some(&id) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::UnknownClass {
                id,
                num_classes: class_names.len(),
            });
        }
        Ok(Self {
            images,
            labels,
            file_names,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn file_names(&self) -> &[String] {
        &self.file_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Indices belonging to `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| split.contains(i)).collect()
    }

    /// Writes `<name>.ppm` images plus `labels.csv` and `classes.csv`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.len() + 2);
        for (img, name) in self.images.iter().zip(&self.file_names) {
            let p = dir.join(name);
            save_ppm(img, &p)?;
            written.push(p);
        }
        let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
        for (name, &class_id) in self.file_names.iter().zip(&self.labels) {
            w.serialize(LabelRow {
                filename: name.clone(),
                class_id,
            })?;
        }
        w.flush()?;
        written.push(dir.join(LABELS_FILE));
        let mut w = csv::Writer::from_path(dir.join(CLASSES_FILE))?;
        for (class_id, name) in self.class_names.iter().enumerate() {
            w.serialize(ClassRow {
                class_id,
                name: name.clone(),
            })?;
        }
        w.flush()?;
        written.push(dir.join(CLASSES_FILE));
        Ok(written)
    }

    /// Loads a directory written by [`Self::save_dir`]. `classes.csv` is
    /// optional; without it the class count is one past the largest id.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ds_err = |path: &Path, msg: String| Error::Dataset {
            path: path.to_path_buf(),
            msg,
        };
        let labels_path = dir.join(LABELS_FILE);
        if !labels_path.is_file() {
            return Err(ds_err(&labels_path, "missing label file".into()));
        }
        let mut reader = csv::Reader::from_path(&labels_path)
            .map_err(|e| ds_err(&labels_path, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| ds_err(&labels_path, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["filename", "class_id"] {
            return Err(ds_err(&labels_path, format!("bad header {headers:?}")));
        }
        let rows: Vec<LabelRow> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ds_err(&labels_path, e.to_string()))?;

        let classes_path = dir.join(CLASSES_FILE);
        let class_names: Vec<String> = if classes_path.is_file() {
            let mut r = csv::Reader::from_path(&classes_path)
                .map_err(|e| ds_err(&classes_path, e.to_string()))?;
            let named: BTreeMap<usize, String> = r
                .deserialize::<ClassRow>()
                .map(|row| row.map(|c| (c.class_id, c.name)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| ds_err(&classes_path, e.to_string()))?;
            if named.keys().copied().ne(0..named.len()) {
                return Err(ds_err(&classes_path, "class ids are not dense".into()));
            }
            named.into_values().collect()
        } else {
            let n = rows.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
            (0..n).map(|i| format!("class{i}")).collect()
        };

        let mut images = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        let mut names = Vec::with_capacity(rows.len());
        for row in rows {
            let p = dir.join(&row.filename);
            if !p.is_file() {
                return Err(ds_err(&p, "listed in labels.csv but missing".into()));
            }
            let img = load_ppm(&p).map_err(|e| ds_err(&p, e.to_string()))?;
            if row.class_id >= class_names.len() {
                return Err(ds_err(
                    &labels_path,
                    format!(
                        "class id {} for {} out of range",
                        row.class_id, row.filename
                    ),
                ));
            }
            images.push(img);
            labels.push(row.class_id);
            names.push(row.filename);
        }
        Self::new(images, labels, names, class_names)
    }
}
