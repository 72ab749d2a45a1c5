use std::str::FromStr;
use std::sync::OnceLock;

use lumisr_core::env::{env_relight_many, CachedRenderer, EnvMap};
use lumisr_core::io::encode_png_bytes;
use lumisr_core::relight::{barycentric_blend, linear_blend, photometric_stereo_fit, ps_render, soft_shadow, PsModel, PsOptions};
use lumisr_core::scan::OlatScan;
use lumisr_core::{Image, Vec3};
use lumisr_neural::{EncodedScan, ModelParams, RenderMode};
use serde::{Deserialize, Serialize};

/// Seed of the soft-shadow cap pattern; fixed so renders are reproducible.
pub const SOFTNESS_SEED: u64 = 0;

/// Environment directions closer than about `1 / ENV_CACHE_RESOLUTION` share
/// one neural render.
pub const ENV_CACHE_RESOLUTION: f64 = 4096.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Neural,
    Linear,
    Barycentric,
    Ps,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Neural, Method::Linear, Method::Barycentric, Method::Ps];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Neural => "neural",
            Method::Linear => "linear",
            Method::Barycentric => "barycentric",
            Method::Ps => "ps",
        }
    }
}

impl FromStr for Method {
    type Err = RequestError;

    fn from_str(s: &str) -> Result<Self, RequestError> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RequestError::Invalid(format!("unknown method `{s}` (expected neural, linear, barycentric or ps)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Softness {
    pub radius_deg: f64,
    pub samples: usize,
}

/// Body of `POST /render`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub light: [f64; 3],
    pub method: String,
    #[serde(default)]
    pub softness: Option<Softness>,
    #[serde(default)]
    pub exposure: Option<f64>,
    #[serde(default)]
    pub format: Option<String>,
    /// Blend sharpness for `linear`; defaults to the stage's half-weight value.
    #[serde(default)]
    pub sharpness: Option<f64>,
}

/// A validated request with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub light: [f64; 3],
    pub method: Method,
    pub radius_deg: f64,
    pub samples: usize,
    pub exposure: f64,
    pub sharpness: f64,
}

impl Resolved {
    /// Canonical text form; equal requests give equal keys.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    /// Unparseable input.
    #[error("{0}")]
    Malformed(String),
    /// Well-formed but unusable input.
    #[error("{0}")]
    Invalid(String),
    #[error("render failed: {0}")]
    Render(String),
}

impl From<lumisr_core::Error> for RequestError {
    fn from(e: lumisr_core::Error) -> Self {
        RequestError::Render(e.to_string())
    }
}

impl From<lumisr_neural::NeuralError> for RequestError {
    fn from(e: lumisr_neural::NeuralError) -> Self {
        RequestError::Render(e.to_string())
    }
}

/// Normalizes a light direction; fails when the norm is below 1e-6.
pub fn normalize_light(light: [f64; 3]) -> Result<Vec3, RequestError> {
    let v = Vec3::new(light[0], light[1], light[2]);
    let n = v.norm();
    if !(n.is_finite() && n > 1e-6) {
        return Err(RequestError::Invalid(format!(
            "light ({}, {}, {}) cannot be normalized",
            light[0], light[1], light[2]
        )));
    }
    Ok(v / n)
}

/// Immutable scan and model with lazily fitted baselines. Every rendering
/// path of the CLI and the service goes through here.
pub struct RelightContext {
    scan: OlatScan,
    params: Option<ModelParams<f32>>,
    encoded: Option<EncodedScan<f32>>,
    ps: OnceLock<Result<PsModel, String>>,
    default_sharpness: f64,
}

impl RelightContext {
    pub fn new(scan: OlatScan, params: Option<ModelParams<f32>>) -> Result<Self, RequestError> {
        let encoded = params.as_ref().map(|p| EncodedScan::new(p, &scan)).transpose()?;
        let default_sharpness = scan.stage().half_weight_sharpness();
        Ok(Self {
            scan,
            params,
            encoded,
            ps: OnceLock::new(),
            default_sharpness,
        })
    }

    pub fn scan(&self) -> &OlatScan {
        &self.scan
    }

    pub fn params(&self) -> Option<&ModelParams<f32>> {
        self.params.as_ref()
    }

    pub fn default_sharpness(&self) -> f64 {
        self.default_sharpness
    }

    pub fn methods(&self) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|&m| m != Method::Neural || self.params.is_some())
            .collect()
    }

    /// `k` used by linear blending: the model's when one is loaded.
    pub fn blend_k(&self) -> usize {
        match &self.params {
            Some(p) => p.config.k,
            None => lumisr_core::stage::default_neighbors(self.scan.stage().n()).1,
        }
    }

    pub fn resolve(&self, req: &RenderRequest) -> Result<Resolved, RequestError> {
        let light = normalize_light(req.light)?;
        let method: Method = req.method.parse()?;
        if method == Method::Neural && self.params.is_none() {
            return Err(RequestError::Invalid("method `neural` needs a loaded model".into()));
        }
        let soft = req.softness.unwrap_or(Softness {
            radius_deg: 0.0,
            samples: 1,
        });
        if !(soft.radius_deg.is_finite() && soft.radius_deg >= 0.0 && soft.radius_deg < 90.0) {
            return Err(RequestError::Invalid(format!(
                "softness radius {} must be in [0, 90) degrees",
                soft.radius_deg
            )));
        }
        if soft.samples == 0 {
            return Err(RequestError::Invalid("softness samples must be >= 1".into()));
        }
        let exposure = req.exposure.unwrap_or(1.0);
        if !(exposure.is_finite() && exposure >= 0.0) {
            return Err(RequestError::Invalid(format!("exposure {exposure} must be >= 0")));
        }
        if let Some(f) = &req.format {
            if f != "png" {
                return Err(RequestError::Invalid(format!("unsupported format `{f}` (only png)")));
            }
        }
        let sharpness = req.sharpness.unwrap_or(self.default_sharpness);
        if !(sharpness.is_finite() && sharpness > 0.0) {
            return Err(RequestError::Invalid(format!("sharpness {sharpness} must be positive")));
        }
        // radius 0 is the unsoftened render whatever the sample count
        let samples = if soft.radius_deg == 0.0 { 1 } else { soft.samples };
        Ok(Resolved {
            light: [light.x, light.y, light.z],
            method,
            radius_deg: soft.radius_deg,
            samples,
            exposure,
            sharpness,
        })
    }

    fn ps_model(&self) -> Result<&PsModel, RequestError> {
        self.ps
            .get_or_init(|| photometric_stereo_fit(&self.scan, PsOptions::default()).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| RequestError::Render(format!("photometric stereo fit: {e}")))
    }

    /// Single-direction render with a hard light.
    pub fn render_dir(&self, method: Method, dir: &Vec3, sharpness: f64) -> Result<Image, RequestError> {
        Ok(match method {
            Method::Neural => {
                let (p, enc) = self
                    .params
                    .as_ref()
                    .zip(self.encoded.as_ref())
                    .ok_or_else(|| RequestError::Invalid("method `neural` needs a loaded model".into()))?;
                enc.render(p, &self.scan, dir, RenderMode::Eval, None)?
            }
            Method::Linear => linear_blend(&self.scan, dir, sharpness, self.blend_k(), None)?,
            Method::Barycentric => barycentric_blend(&self.scan, dir)?,
            Method::Ps => ps_render(self.ps_model()?, dir)?,
        })
    }

    pub fn render(&self, r: &Resolved) -> Result<Image, RequestError> {
        let center = Vec3::new(r.light[0], r.light[1], r.light[2]);
        if r.radius_deg == 0.0 {
            return self.render_dir(r.method, &center, r.sharpness);
        }
        let mut err = None;
        let img = soft_shadow(
            |d| {
                self.render_dir(r.method, d, r.sharpness).map_err(|e| {
                    let msg = e.to_string();
                    err = Some(e);
                    lumisr_core::Error::InvalidArgument(msg)
                })
            },
            &center,
            r.radius_deg.to_radians(),
            r.samples,
            SOFTNESS_SEED,
        );
        match (img, err) {
            (Ok(img), _) => Ok(img),
            (Err(_), Some(e)) => Err(e),
            (Err(e), None) => Err(e.into()),
        }
    }

    pub fn render_png(&self, r: &Resolved) -> Result<Vec<u8>, RequestError> {
        let img = self.render(r)?;
        Ok(encode_png_bytes(&img, r.exposure as f32)?)
    }

    /// Image under an environment map: every map pixel is a directional
    /// light weighted by its radiance and solid angle.
    pub fn render_env(&self, method: Method, env: &EnvMap) -> Result<Image, RequestError> {
        let mut out = self.render_env_many(method, std::slice::from_ref(env))?;
        Ok(out.pop().expect("one image per map"))
    }

    /// [`Self::render_env`] for several same-size maps, rendering each lit
    /// direction once. Neural renders are memoized by quantized direction.
    pub fn render_env_many(&self, method: Method, envs: &[EnvMap]) -> Result<Vec<Image>, RequestError> {
        if method == Method::Neural && self.params.is_none() {
            return Err(RequestError::Invalid("method `neural` needs a loaded model".into()));
        }
        if method == Method::Ps {
            self.ps_model()?;
        }
        let s = self.default_sharpness;
        let direct = |d: &Vec3| self.render_dir(method, d, s).map_err(|e| lumisr_core::Error::InvalidArgument(e.to_string()));
        Ok(if method == Method::Neural {
            let cached = CachedRenderer::new(direct, ENV_CACHE_RESOLUTION);
            env_relight_many(|d: &Vec3| cached.render(d), envs)?
        } else {
            env_relight_many(direct, envs)?
        })
    }
}
