//! Dataset manifest: a JSON list of images, their instance label maps, the
//! instances inside them and the split they belong to. Paths are relative to
//! the manifest file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Grid2D};
use crate::io::{load_image, load_label_values};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInstance {
    /// Value of the instance in the label image.
    pub label: u32,
    pub class: String,
    /// Box a user would draw around the instance, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub instances: Vec<ManifestInstance>,
    pub split: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        Self { entries, root: root.into() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads the images and label maps of `split`.
    pub fn load_split(&self, split: &str) -> Result<Vec<(Grid2D, Vec<u32>, Vec<ManifestInstance>)>> {
        self.split(split)
            .map(|e| {
                let image = load_image(self.resolve(&e.image))?;
                let (w, h, labels) = load_label_values(self.resolve(&e.label))?;
                if (w, h) != (image.width(), image.height()) {
                    return Err(Error::DimensionMismatch(format!(
                        "{} is {}x{} but its label map is {w}x{h}",
                        e.image.display(),
                        image.width(),
                        image.height()
                    )));
                }
                Ok((image, labels, e.instances.clone()))
            })
            .collect()
    }
}
