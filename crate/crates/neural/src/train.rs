use lumisr_core::scan::OlatScan;
use lumisr_core::{Image, SelectMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ModelConfig};
use crate::model::{image_tensor, input_tensor, loss_and_grad, Example, Net};
use crate::params::{HalfResParams, ModelParams, ParamSet};
use crate::real::Real;
use crate::{NeuralError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;
/// Lower bound on the learned sharpness after each update.
pub const MIN_SHARPNESS: f64 = 1e-3;
/// Share of steps spent on the half-resolution net when training progressively.
pub const HALF_RES_FRACTION: f64 = 0.4;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub progressive: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-3,
            progressive: false,
        }
    }
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Adam moments with a step counter per tensor, so tensors that join late
/// get a fresh bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: vec![0; params.len()],
        }
    }

    /// Updates the tensors flagged in `active`.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64, active: &[bool]) {
        for i in 0..params.len() {
            if !active[i] {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, g), m), v) in params.values[i]
                .iter_mut()
                .zip(&grads.values[i])
                .zip(self.m.values[i].iter_mut())
                .zip(self.v.values[i].iter_mut())
            {
                let g = g.as_f64();
                let mn = ADAM_BETA1 * m.as_f64() + (1.0 - ADAM_BETA1) * g;
                let vn = ADAM_BETA2 * v.as_f64() + (1.0 - ADAM_BETA2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                *p = T::from_f64(p.as_f64() - step);
            }
        }
    }
}

/// Stepwise trainer; [`train`] runs it to completion.
pub struct Trainer<'a> {
    scans: &'a [OlatScan],
    params: ModelParams<f32>,
    half: Option<HalfResParams<f32>>,
    adam: Adam<f32>,
    half_adam: Option<Adam<f32>>,
    rng: ChaCha8Rng,
    options: TrainOptions,
    half_steps: usize,
    step: usize,
    losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(scans: &'a [OlatScan], config: &ModelConfig, options: TrainOptions) -> Result<Self> {
        config.validate()?;
        if options.steps == 0 {
            return Err(NeuralError::Config("steps must be >= 1".into()));
        }
        if !(options.lr.is_finite() && options.lr >= 0.0) {
            return Err(NeuralError::Config(format!("learning rate {} must be >= 0", options.lr)));
        }
        scans
            .first()
            .ok_or_else(|| NeuralError::Config("no training scans".into()))?;
        for scan in scans {
            if scan.width() != config.input_res || scan.height() != config.input_res {
                return Err(NeuralError::Config(format!(
                    "scan `{}` is {}x{}, the model expects {r}x{r}",
                    scan.meta.name,
                    scan.width(),
                    scan.height(),
                    r = config.input_res
                )));
            }
            if config.m > scan.stage().n() {
                return Err(NeuralError::Config(format!(
                    "m = {} exceeds the {} lights of scan `{}`",
                    config.m,
                    scan.stage().n(),
                    scan.meta.name
                )));
            }
            if scan.mask().mask_count() == 0 {
                return Err(NeuralError::Core(lumisr_core::Error::EmptyMask));
            }
        }
        let params = ModelParams::init(config)?;
        let adam = Adam::new(&params.tensors);
        let half_steps = if options.progressive {
            (options.steps as f64 * HALF_RES_FRACTION).floor() as usize
        } else {
            0
        };
        let (half, half_adam) = if half_steps > 0 {
            let h = HalfResParams::init(config, config.seed.wrapping_add(1));
            let a = Adam::new(&h.tensors);
            (Some(h), Some(a))
        } else {
            (None, None)
        };
        Ok(Self {
            scans,
            params,
            half,
            adam,
            half_adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f6c_7372),
            options,
            half_steps,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn adam(&self) -> &Adam<f32> {
        &self.adam
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.options.steps
    }

    pub fn in_half_phase(&self) -> bool {
        self.step < self.half_steps
    }

    /// Draws the next example: scan, query light, active set, crop.
    fn sample(&mut self) -> Result<Example<f32>> {
        let c = &self.params.config;
        let scan = &self.scans[self.rng.random_range(0..self.scans.len())];
        let stage = scan.stage();
        let target_idx = self.rng.random_range(0..stage.n());
        let query = stage.lights()[target_idx];
        let select_seed: u64 = self.rng.random();
        let mode = match c.ablation {
            // the k nearest other lights, as at evaluation time
            Some(Ablation::NaiveNeighbors) => SelectMode::Eval {
                holdout: Some(target_idx),
            },
            _ => SelectMode::Train,
        };
        let active = stage.select_active_set(&query, c.m, c.k, select_seed, mode)?;
        let span = c.input_res - c.crop;
        let x0 = self.rng.random_range(0..=span);
        let y0 = self.rng.random_range(0..=span);
        let crop = |img: &Image| img.crop(x0, y0, c.crop, c.crop);
        let mut inputs = Vec::with_capacity(active.indices.len());
        let mut dots = Vec::with_capacity(active.indices.len());
        for &i in &active.indices {
            let dir = stage.lights()[i];
            inputs.push(input_tensor(&crop(scan.image(i))?, &dir));
            dots.push(dir.dot(&query));
        }
        let target = image_tensor(&crop(scan.image(target_idx))?);
        let mask = crop(scan.mask())?
            .data()
            .iter()
            .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
            .collect();
        Ok(Example {
            inputs,
            dots,
            query,
            target,
            mask,
        })
    }

    /// Runs one optimization step and returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let ex = self.sample()?;
        if ex.mask.iter().all(|&m: &f32| m == 0.0) {
            // the crop missed the foreground: nothing to learn from
            self.losses.push(0.0);
            self.step += 1;
            return Ok(0.0);
        }
        let half_phase = self.in_half_phase();
        let net = match (&self.half, half_phase) {
            (Some(h), true) => Net::Half(h),
            _ => Net::Full,
        };
        let res = loss_and_grad(&self.params, net, &ex)?;
        if !res.loss.is_finite() || !res.grads.all_finite() {
            return Err(NeuralError::NonFiniteLoss(self.step));
        }
        let active = self.active_mask(half_phase);
        self.adam.update(&mut self.params.tensors, &res.grads, self.options.lr, &active);
        if let (Some(h), Some(a), Some(g)) = (self.half.as_mut(), self.half_adam.as_mut(), res.half_grads.as_ref()) {
            let all = vec![true; h.tensors.len()];
            a.update(&mut h.tensors, g, self.options.lr, &all);
        }
        let si = self.params.layout().sharpness;
        let s = &mut self.params.tensors.values[si][0];
        *s = s.max(MIN_SHARPNESS as f32);
        self.losses.push(res.loss);
        self.step += 1;
        if self.step == self.half_steps {
            // the truncated net's extra layers are discarded at the switch
            self.half = None;
            self.half_adam = None;
        }
        Ok(res.loss)
    }

    fn active_mask(&self, half_phase: bool) -> Vec<bool> {
        let mut active = vec![true; self.params.tensors.len()];
        if half_phase {
            let lay = self.params.layout();
            for b in [&lay.enc[0], &lay.dec[0]] {
                for i in [b.w, b.b, b.gamma, b.beta, b.prelu] {
                    active[i] = false;
                }
            }
            active[lay.head.w] = false;
            active[lay.head.b] = false;
        }
        if self.params.config.ablation == Some(Ablation::AvgPool) {
            active[self.params.layout().sharpness] = false;
        }
        active
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            params: self.params,
            losses: self.losses,
        }
    }
}

/// Trains a fresh model on `scans`, calling `progress(step, loss)` after
/// every step.
pub fn train_with_progress(
    scans: &[OlatScan],
    config: &ModelConfig,
    options: TrainOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(scans, config, options)?;
    while !trainer.is_done() {
        let loss = trainer.step()?;
        progress(trainer.step, loss);
    }
    Ok(trainer.finish())
}

pub fn train(scans: &[OlatScan], config: &ModelConfig, options: TrainOptions) -> Result<TrainOutput> {
    train_with_progress(scans, config, options, |_, _| {})
}

/// Mean of a slice, for loss-trace summaries.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
