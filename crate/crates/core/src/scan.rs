use serde::{Deserialize, Serialize};

use crate::stage::LightStage;
use crate::{Error, Image, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub name: String,
    pub seed: u64,
}

/// One image per stage light plus a foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct OlatScan {
    stage: LightStage,
    images: Vec<Image>,
    mask: Image,
    pub meta: ScanMeta,
}

impl OlatScan {
    pub fn new(stage: LightStage, images: Vec<Image>, mask: Image, meta: ScanMeta) -> Result<Self> {
        if images.len() != stage.n() {
            return Err(Error::ShapeMismatch(format!(
                "{} images for {} lights",
                images.len(),
                stage.n()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            img.check_mask(&mask)
                .map_err(|e| Error::ShapeMismatch(format!("image {i}: {e}")))?;
            if img.channels() != 3 {
                return Err(Error::ShapeMismatch(format!("image {i} is not RGB")));
            }
        }
        Ok(Self {
            stage,
            images,
            mask,
            meta,
        })
    }

    pub fn stage(&self) -> &LightStage {
        &self.stage
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn mask(&self) -> &Image {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    /// Drops the listed lights and re-triangulates the stage.
    pub fn without_lights(&self, drop_indices: &[usize]) -> Result<Self> {
        let (stage, keep) = self.stage.without(drop_indices)?;
        self.with_stage(stage, &keep)
    }

    /// Keeps only the listed lights (in the order given by the new stage).
    pub fn with_stage(&self, stage: LightStage, keep: &[usize]) -> Result<Self> {
        let images = keep.iter().map(|&i| self.images[i].clone()).collect();
        Self::new(stage, images, self.mask.clone(), self.meta.clone())
    }
}
