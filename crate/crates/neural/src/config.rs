use serde::{Deserialize, Serialize};

use lumisr_core::stage::default_neighbors;
use lumisr_core::LightStage;

use crate::{NeuralError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Train on the `k` nearest lights instead of a random subset of `m`.
    NaiveNeighbors,
    /// Pool with uniform weights `1/k`.
    AvgPool,
}

impl std::str::FromStr for Ablation {
    type Err = NeuralError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive_neighbors" => Ok(Self::NaiveNeighbors),
            "avg_pool" => Ok(Self::AvgPool),
            other => Err(NeuralError::Config(format!(
                "unknown ablation `{other}` (expected naive_neighbors or avg_pool)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_res: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub k: usize,
    pub m: usize,
    pub fc_layers: usize,
    /// Upper bound on group-norm groups; each layer uses `min(group_count, channels)`.
    pub group_count: usize,
    pub s_init: f64,
    pub seed: u64,
    /// Side of the square training crop; `input_res` disables cropping.
    pub crop: usize,
    #[serde(default)]
    pub ablation: Option<Ablation>,
}

impl ModelConfig {
    /// Desk-scale defaults for a training stage.
    pub fn desk(stage: &LightStage) -> Self {
        let (m, k) = default_neighbors(stage.n());
        Self {
            input_res: 64,
            levels: 4,
            base_channels: 16,
            max_channels: 64,
            k,
            m,
            fc_layers: 3,
            group_count: 8,
            s_init: stage.half_weight_sharpness(),
            seed: 0,
            crop: 64,
            ablation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NeuralError::Config(m));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        // the decoder seed is broadcast, so any whole seed size works
        let unit = 1usize << self.levels;
        if self.input_res == 0 || self.input_res % unit != 0 {
            return bad(format!(
                "input_res {} must be a multiple of 2^levels = {unit}",
                self.input_res
            ));
        }
        if self.crop == 0 || self.crop > self.input_res || self.crop % (1 << self.levels) != 0 {
            return bad(format!(
                "crop {} must be in 1..={} and divisible by 2^levels",
                self.crop, self.input_res
            ));
        }
        if self.base_channels == 0 || self.base_channels > self.max_channels {
            return bad(format!(
                "need 0 < base_channels ({}) <= max_channels ({})",
                self.base_channels, self.max_channels
            ));
        }
        if self.k == 0 || self.k > self.m {
            return bad(format!("need 1 <= k ({}) <= m ({})", self.k, self.m));
        }
        if self.fc_layers == 0 {
            return bad("fc_layers must be >= 1".into());
        }
        if self.group_count == 0 {
            return bad("group_count must be >= 1".into());
        }
        if !(self.s_init.is_finite() && self.s_init > 0.0) {
            return bad(format!("s_init {} must be positive", self.s_init));
        }
        Ok(())
    }

    /// Encoder output channels per level.
    pub fn enc_channels(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| (self.base_channels << l).min(self.max_channels))
            .collect()
    }

    /// Width of the dense stem and channel count of the decoder seed.
    pub fn seed_channels(&self) -> usize {
        *self.enc_channels().last().expect("levels >= 1")
    }

    /// `(input channels, output channels)` of the transposed convolution
    /// that decodes level `d` (skip concatenated first).
    pub fn dec_channels(&self, d: usize) -> (usize, usize) {
        let enc = self.enc_channels();
        let below = if d + 1 == self.levels {
            self.seed_channels()
        } else {
            self.dec_channels(d + 1).1
        };
        let out = if d == 0 { self.base_channels } else { enc[d - 1] };
        (below + enc[d], out)
    }

    pub fn groups(&self, channels: usize) -> usize {
        gcd(self.group_count.min(channels), channels)
    }

    /// Copy with exactly one behavior toggled.
    pub fn ablation(&self, kind: Ablation) -> Self {
        Self {
            ablation: Some(kind),
            ..self.clone()
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
