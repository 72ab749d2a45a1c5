use lumisr_core::scan::OlatScan;
use lumisr_core::{Error as CoreError, Image, SelectMode, Vec3};
use rayon::prelude::*;

use crate::model::{decode, encode, input_tensor, pool, pool_weights, tensor_image, FeaturePyramid, Net};
use crate::params::ModelParams;
use crate::real::Real;
use crate::{NeuralError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// Random `k` of the `m` nearest lights, drawn from `seed`.
    Train { seed: u64 },
    /// The `k` nearest lights.
    Eval,
}

fn check_scan<T>(params: &ModelParams<T>, scan: &OlatScan) -> Result<()> {
    let r = params.config.input_res;
    if scan.width() != r || scan.height() != r {
        return Err(NeuralError::Shape(format!(
            "scan is {}x{}, the model expects {r}x{r}",
            scan.width(),
            scan.height()
        )));
    }
    Ok(())
}

fn unit(query: &Vec3) -> Result<Vec3> {
    let n = query.norm();
    if !(n.is_finite() && n > 1e-6) {
        return Err(NeuralError::Core(CoreError::InvalidArgument(format!(
            "query direction ({}, {}, {}) is not normalizable",
            query.x, query.y, query.z
        ))));
    }
    Ok(query / n)
}

fn active_indices<T: Real>(
    params: &ModelParams<T>,
    scan: &OlatScan,
    query: &Vec3,
    mode: RenderMode,
    holdout: Option<usize>,
) -> Result<Vec<usize>> {
    let c = &params.config;
    let stage = scan.stage();
    let sel = match mode {
        RenderMode::Eval => SelectMode::Eval { holdout },
        RenderMode::Train { .. } => SelectMode::Train,
    };
    let seed = match mode {
        RenderMode::Train { seed } => seed,
        RenderMode::Eval => 0,
    };
    let m = match mode {
        RenderMode::Eval => c.k,
        RenderMode::Train { .. } => c.m.min(stage.n()),
    };
    let set = stage.select_active_set(query, m, c.k, seed, sel)?;
    if let (RenderMode::Train { .. }, Some(h)) = (mode, holdout) {
        if set.indices.contains(&h) {
            return Err(NeuralError::Core(CoreError::InvalidArgument(
                "holdout is only supported in eval mode".into(),
            )));
        }
    }
    Ok(set.indices)
}

fn finish<T: Real>(
    params: &ModelParams<T>,
    scan: &OlatScan,
    query: &Vec3,
    indices: &[usize],
    pyramids: &[&FeaturePyramid<T>],
) -> Result<Image> {
    let lay = params.layout();
    let dots: Vec<f64> = indices.iter().map(|&i| scan.stage().lights()[i].dot(query)).collect();
    let weights = pool_weights(&params.config, &dots, params.sharpness());
    let pooled = pool(pyramids, &weights)?;
    let (out, _) = decode(params, &lay, Net::Full, &pooled, query, false)?;
    Ok(tensor_image(&out))
}

/// Renders `scan` lit from `query`, encoding only the active lights.
pub fn render_neural<T: Real>(
    params: &ModelParams<T>,
    scan: &OlatScan,
    query: &Vec3,
    mode: RenderMode,
    holdout: Option<usize>,
) -> Result<Image> {
    check_scan(params, scan)?;
    let q = unit(query)?;
    let indices = active_indices(params, scan, &q, mode, holdout)?;
    let lay = params.layout();
    let pyramids: Vec<FeaturePyramid<T>> = indices
        .par_iter()
        .map(|&i| encode(params, &lay, Net::Full, &input_tensor(scan.image(i), &scan.stage().lights()[i]), false).0)
        .collect();
    let refs: Vec<&FeaturePyramid<T>> = pyramids.iter().collect();
    finish(params, scan, &q, &indices, &refs)
}

/// Encoder outputs of every light of a scan. The encoder does not see the
/// query, so renders from the cache equal [`render_neural`] exactly.
pub struct EncodedScan<T = f32> {
    pyramids: Vec<FeaturePyramid<T>>,
}

impl<T: Real> EncodedScan<T> {
    pub fn new(params: &ModelParams<T>, scan: &OlatScan) -> Result<Self> {
        check_scan(params, scan)?;
        let lay = params.layout();
        let pyramids = (0..scan.stage().n())
            .into_par_iter()
            .map(|i| encode(params, &lay, Net::Full, &input_tensor(scan.image(i), &scan.stage().lights()[i]), false).0)
            .collect();
        Ok(Self { pyramids })
    }

    pub fn len(&self) -> usize {
        self.pyramids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pyramids.is_empty()
    }

    /// `scan` must be the one this cache was built from.
    pub fn render(
        &self,
        params: &ModelParams<T>,
        scan: &OlatScan,
        query: &Vec3,
        mode: RenderMode,
        holdout: Option<usize>,
    ) -> Result<Image> {
        if scan.stage().n() != self.pyramids.len() {
            return Err(NeuralError::Shape("encoded cache belongs to another scan".into()));
        }
        let q = unit(query)?;
        let indices = active_indices(params, scan, &q, mode, holdout)?;
        let refs: Vec<&FeaturePyramid<T>> = indices.iter().map(|&i| &self.pyramids[i]).collect();
        finish(params, scan, &q, &indices, &refs)
    }
}
