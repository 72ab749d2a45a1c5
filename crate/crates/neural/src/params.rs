use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::real::Real;
use crate::{NeuralError, Result};

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Zeroed tensors of the same shapes, for gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| vec![T::zero(); v.len()]).collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::from_f64(x.as_f64())).collect())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIdx {
    pub w: usize,
    pub b: usize,
    pub gamma: usize,
    pub beta: usize,
    pub prelu: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

/// Tensor indices of every layer.
#[derive(Clone, Debug)]
pub struct Layout {
    pub enc: Vec<BlockIdx>,
    pub fc: Vec<BlockIdx>,
    pub dec: Vec<BlockIdx>,
    pub head: ConvIdx,
    pub sharpness: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub tensors: ParamSet<T>,
}

struct Init<'a, T> {
    set: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let v = (0..n).map(|_| T::from_f64(self.rng.random_range(-bound..bound))).collect();
        self.set.push(name, shape, v)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> usize {
        let n = shape.iter().product();
        self.set.push(name, shape, vec![T::from_f64(value); n])
    }

    fn block(&mut self, prefix: &str, kernel: &str, wshape: Vec<usize>, fan_in: f64, cout: usize) -> BlockIdx {
        // He-uniform bound for a PReLU with slope 0.25
        let gain = (2.0 / (1.0 + 0.25f64 * 0.25)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        BlockIdx {
            w: self.uniform(format!("{prefix}.{kernel}.weight"), wshape, bound),
            b: self.constant(format!("{prefix}.{kernel}.bias"), vec![cout], 0.0),
            gamma: self.constant(format!("{prefix}.norm.scale"), vec![cout], 1.0),
            beta: self.constant(format!("{prefix}.norm.offset"), vec![cout], 0.0),
            prelu: self.constant(format!("{prefix}.prelu"), vec![cout], 0.25),
        }
    }
}

/// Encoder input channels: RGB plus the tiled light direction.
pub const INPUT_CHANNELS: usize = 6;

impl<T: Real> ModelParams<T> {
    /// Fresh parameters; the seed is `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut set = ParamSet::new();
        build(config, &mut Init { set: &mut set, rng: ChaCha8Rng::seed_from_u64(config.seed) });
        Ok(Self {
            config: config.clone(),
            tensors: set,
        })
    }

    pub fn layout(&self) -> Layout {
        layout_of(&self.config, &self.tensors).expect("parameters match their config")
    }

    /// Checks names and shapes against the architecture of `config`.
    pub fn from_parts(config: ModelConfig, tensors: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let reference: ModelParams<T> = ModelParams::init(&config)?;
        if reference.tensors.len() != tensors.len() {
            return Err(NeuralError::Format(format!(
                "{} tensors, the config implies {}",
                tensors.len(),
                reference.tensors.len()
            )));
        }
        for i in 0..tensors.len() {
            if reference.tensors.names[i] != tensors.names[i] || reference.tensors.shapes[i] != tensors.shapes[i] {
                return Err(NeuralError::Format(format!(
                    "tensor {i} is {} {:?}, expected {} {:?}",
                    tensors.names[i], tensors.shapes[i], reference.tensors.names[i], reference.tensors.shapes[i]
                )));
            }
        }
        if !tensors.all_finite() {
            return Err(NeuralError::Format("non-finite parameter values".into()));
        }
        let s = tensors.values[tensors.index_of("sharpness").expect("checked")][0];
        if !(s > T::zero()) {
            return Err(NeuralError::Format("sharpness must be positive".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn sharpness(&self) -> f64 {
        self.tensors.values[self.layout().sharpness][0].as_f64()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.cast(),
        }
    }
}

fn build<T: Real>(c: &ModelConfig, init: &mut Init<T>) {
    let enc = c.enc_channels();
    let mut cin = INPUT_CHANNELS;
    for (l, &cout) in enc.iter().enumerate() {
        init.block(&format!("enc.{l}"), "conv", vec![cout, cin, 3, 3], (cin * 9) as f64, cout);
        cin = cout;
    }
    let f = c.seed_channels();
    let mut fin = 3;
    for i in 0..c.fc_layers {
        init.block(&format!("fc.{i}"), "dense", vec![f, fin], fin as f64, f);
        fin = f;
    }
    for d in (0..c.levels).rev() {
        let (ci, co) = c.dec_channels(d);
        // each output pixel of a stride-2 transposed conv sees ~9/4 taps per channel
        init.block(&format!("dec.{d}"), "tconv", vec![ci, co, 3, 3], ci as f64 * 9.0 / 4.0, co);
    }
    let fan = (c.base_channels * 9) as f64;
    init.uniform("head.weight".into(), vec![3, c.base_channels, 3, 3], (3.0 / fan).sqrt());
    init.constant("head.bias".into(), vec![3], 0.0);
    init.constant("sharpness".into(), vec![1], c.s_init);
}

fn layout_of<T: Real>(c: &ModelConfig, set: &ParamSet<T>) -> Option<Layout> {
    let idx = |n: String| set.index_of(&n);
    let block = |p: String, kernel: &str| -> Option<BlockIdx> {
        Some(BlockIdx {
            w: idx(format!("{p}.{kernel}.weight"))?,
            b: idx(format!("{p}.{kernel}.bias"))?,
            gamma: idx(format!("{p}.norm.scale"))?,
            beta: idx(format!("{p}.norm.offset"))?,
            prelu: idx(format!("{p}.prelu"))?,
        })
    };
    Some(Layout {
        enc: (0..c.levels).map(|l| block(format!("enc.{l}"), "conv")).collect::<Option<_>>()?,
        fc: (0..c.fc_layers).map(|i| block(format!("fc.{i}"), "dense")).collect::<Option<_>>()?,
        dec: (0..c.levels).map(|d| block(format!("dec.{d}"), "tconv")).collect::<Option<_>>()?,
        head: ConvIdx {
            w: idx("head.weight".into())?,
            b: idx("head.bias".into())?,
        },
        sharpness: idx("sharpness".into())?,
    })
}

/// Extra layers of the half-resolution training phase: a 1x1 convolution
/// that injects the downsampled input in place of the finest encoder level,
/// and a 3x3 output head at half resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfResParams<T> {
    pub tensors: ParamSet<T>,
}

pub struct HalfResLayout {
    pub inject: ConvIdx,
    pub head: ConvIdx,
}

impl<T: Real> HalfResParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut set = ParamSet::new();
        let mut init = Init {
            set: &mut set,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c0 = config.enc_channels()[0];
        init.uniform("inject.weight".into(), vec![c0, INPUT_CHANNELS, 1, 1], (6.0 / INPUT_CHANNELS as f64).sqrt());
        init.constant("inject.bias".into(), vec![c0], 0.0);
        let fan = (c0 * 9) as f64;
        init.uniform("half_head.weight".into(), vec![3, c0, 3, 3], (3.0 / fan).sqrt());
        init.constant("half_head.bias".into(), vec![3], 0.0);
        Self { tensors: set }
    }

    pub fn layout(&self) -> HalfResLayout {
        HalfResLayout {
            inject: ConvIdx { w: 0, b: 1 },
            head: ConvIdx { w: 2, b: 3 },
        }
    }
}
