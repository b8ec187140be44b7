//! Images, masks and per-pixel features for a manifest, held in memory.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::raster::{Mask, Raster};
use crate::segmodel::PixelFeatures;
use crate::synth::GeneratedCorpus;

#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: DatasetManifest,
    images: Vec<Raster>,
    masks: Vec<Option<Mask>>,
    features: Vec<PixelFeatures>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(manifest: DatasetManifest, images: Vec<Raster>, masks: Vec<Option<Mask>>) -> Result<Self> {
        if images.len() != manifest.len() || masks.len() != manifest.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} records, {} images, {} masks",
                manifest.len(),
                images.len(),
                masks.len()
            )));
        }
        for ((r, img), mask) in manifest.records().iter().zip(&images).zip(&masks) {
            if let Some(m) = mask {
                if m.height() != img.height() || m.width() != img.width() {
                    return Err(Error::InvalidRecord {
                        id: r.id.clone(),
                        message: "mask and image sizes differ".into(),
                    });
                }
                m.validate(manifest.num_classes())?;
            }
        }
        let features = images.iter().map(PixelFeatures::from_raster).collect();
        let index = manifest
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Corpus {
            manifest,
            images,
            masks,
            features,
            index,
        })
    }

    /// A synthetic corpus keeps the ground truth of every record, so any
    /// record can be "annotated" on demand.
    pub fn from_generated(g: GeneratedCorpus) -> Result<Self> {
        let masks = g.masks.into_iter().map(Some).collect();
        Corpus::new(g.manifest, g.images, masks)
    }

    /// Loads every image, and every mask a record points at, relative to the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(manifest.len());
        let mut masks = Vec::with_capacity(manifest.len());
        for r in manifest.records() {
            images.push(Raster::read_ppm(&root.join(&r.image_path))?);
            masks.push(match &r.label_path {
                Some(p) => Some(Mask::read_pgm(&root.join(p))?),
                None => None,
            });
        }
        Corpus::new(manifest, images, masks)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn image(&self, id: &str) -> Result<&Raster> {
        Ok(&self.images[self.position(id)?])
    }

    pub fn features(&self, id: &str) -> Result<&PixelFeatures> {
        Ok(&self.features[self.position(id)?])
    }

    pub fn mask(&self, id: &str) -> Result<&Mask> {
        self.masks[self.position(id)?].as_ref().ok_or_else(|| Error::InvalidRecord {
            id: id.to_string(),
            message: "no label available".into(),
        })
    }

    /// `(features, mask)` pairs for the given ids.
    pub fn labeled<'a>(&'a self, ids: &[impl AsRef<str>]) -> Result<Vec<(&'a PixelFeatures, &'a Mask)>> {
        ids.iter()
            .map(|id| Ok((self.features(id.as_ref())?, self.mask(id.as_ref())?)))
            .collect()
    }
}
