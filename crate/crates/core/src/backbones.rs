//! Image feature extractors: the six-block fully convolutional backbone and
//! a frozen pretrained-extractor adapter.

use std::path::PathBuf;

use ndarray::{Array2, Array4, ArrayD, Ix2};
use rand::Rng;
use scl_autograd::nn::Conv2d;
use scl_autograd::{ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclError};
use crate::models::checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Side of the square model input.
    pub input_size: usize,
    /// Output channels of each convolutional block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    /// Channels of the final 1x1 convolution, i.e. the feature size F.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: crate::dataset::MODEL_INPUT_SIZE,
            channels: vec![16, 32, 64, 64, 128, 128],
            kernel: 3,
            stride: 2,
            feature_dim: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(SclError::Config("backbone needs at least one block with positive channels".into()));
        }
        if self.kernel == 0 || self.stride == 0 || self.feature_dim == 0 || self.input_size == 0 {
            return Err(SclError::Config("backbone kernel, stride, feature_dim and input_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_input(shape: &[usize], size: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
        return Err(SclError::Shape {
            expected: format!("batch of {size}x{size}x3 images"),
            got: format!("{shape:?}"),
        });
    }
    Ok(())
}

/// Convolutional blocks (conv, rectifier, stride-2 downsampling), a final
/// 1x1 convolution and global average pooling.
#[derive(Debug, Clone)]
pub struct FcnBackbone {
    pub config: BackboneConfig,
    pub prefix: String,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl FcnBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_c = 3;
        let mut blocks = Vec::with_capacity(config.channels.len());
        for (i, &c) in config.channels.iter().enumerate() {
            blocks.push(Conv2d::new(
                store,
                &format!("{prefix}.block{i}"),
                in_c,
                c,
                config.kernel,
                config.stride,
                config.kernel / 2,
                rng,
            ));
            in_c = c;
        }
        let head = Conv2d::new(store, &format!("{prefix}.final"), in_c, config.feature_dim, 1, 1, 0, rng);
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            blocks,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Activations after each block, then after the final convolution.
    pub fn forward_maps(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        check_input(tape.shape(x), self.config.input_size)?;
        let mut maps = Vec::with_capacity(self.blocks.len() + 1);
        let mut h = x;
        for block in &self.blocks {
            let z = block.forward(tape, store, h);
            h = tape.relu(z);
            maps.push(h);
        }
        let z = self.head.forward(tape, store, h);
        maps.push(z);
        Ok(maps)
    }

    /// `[B, 3, S, S]` images to `[B, F]` features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let last = *self.forward_maps(tape, store, x)?.last().expect("final map");
        Ok(tape.grid_pool(last, 1))
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.num_elements_with_prefix(&format!("{}.", self.prefix))
    }
}

/// Source of the pretrained extractor's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Channels of the extractor's convolutional stages.
    pub channels: Vec<usize>,
    /// Spatial pooling grid; output size is `last_channels * grid^2`.
    pub grid: usize,
    /// Seed of the fixed random stand-in weights.
    pub seed: u64,
    /// Checkpoint directory holding `extractor.*` weights that replace the
    /// stand-in values.
    pub weights: Option<PathBuf>,
    /// Fine-tune the extractor instead of keeping it frozen.
    pub trainable: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            grid: 2,
            seed: 1234,
            weights: None,
            trainable: false,
        }
    }
}

/// Adapter over a frozen convolutional feature extractor.
///
/// Without external weights it is a fixed random convnet, which keeps the
/// desk-scale tests free of downloads while preserving the frozen-feature
/// training regime.
#[derive(Debug, Clone)]
pub struct PretrainedExtractor {
    pub config: ExtractorConfig,
    pub input_size: usize,
    stages: Vec<Conv2d>,
}

pub const EXTRACTOR_PREFIX: &str = "extractor";

impl PretrainedExtractor {
    pub fn new(store: &mut ParamStore, config: Option<&ExtractorConfig>, input_size: usize) -> Result<Self> {
        let config = config.ok_or_else(|| {
            SclError::Config("NASNET needs a pretrained feature extractor; set `extractor` in the model config".into())
        })?;
        if config.channels.is_empty() || config.grid == 0 {
            return Err(SclError::Config("extractor needs at least one stage and a positive grid".into()));
        }
        let mut rng = crate::rng::component_rng(config.seed, "extractor");
        let mut in_c = 3;
        let mut stages = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("{EXTRACTOR_PREFIX}.stage{i}"), in_c, c, 3, 2, 1, &mut rng));
            in_c = c;
        }
        if let Some(dir) = &config.weights {
            let loaded = checkpoint::read_params(dir)?;
            let mut found = 0;
            for (name, value) in loaded {
                if !name.starts_with(&format!("{EXTRACTOR_PREFIX}.")) {
                    continue;
                }
                let id = store
                    .id(&name)
                    .ok_or_else(|| SclError::Config(format!("extractor weights contain unknown parameter `{name}`")))?;
                if store.get(id).shape() != value.shape() {
                    return Err(SclError::Shape {
                        expected: format!("{:?} for `{name}`", store.get(id).shape()),
                        got: format!("{:?}", value.shape()),
                    });
                }
                *store.get_mut(id) = value;
                found += 1;
            }
            if found != 2 * stages.len() {
                return Err(SclError::Config(format!(
                    "extractor weights in {} cover {found} of {} parameters",
                    dir.display(),
                    2 * stages.len()
                )));
            }
        }
        let ids: Vec<_> = store.ids_with_prefix("extractor.").collect();
        for id in ids {
            store.set_trainable(id, config.trainable);
        }
        Ok(Self {
            config: config.clone(),
            input_size,
            stages,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.channels.last().copied().unwrap_or(0) * self.config.grid * self.config.grid
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        check_input(tape.shape(x), self.input_size)?;
        // the extractor expects inputs in [-1, 1]
        let scaled = tape.scale(x, 2.0);
        let one = tape.constant(ArrayD::from_elem(vec![1], 1.0));
        let mut h = tape.sub(scaled, one);
        for stage in &self.stages {
            let z = stage.forward(tape, store, h);
            h = tape.relu(z);
        }
        let size = tape.shape(h)[2].min(tape.shape(h)[3]);
        Ok(tape.grid_pool(h, self.config.grid.min(size)))
    }
}

/// The image encoder of a model.
#[derive(Debug, Clone)]
pub enum Backbone {
    Fcn(FcnBackbone),
    Pretrained(PretrainedExtractor),
}

impl Backbone {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Backbone::Fcn(b) => b.forward(tape, store, x),
            Backbone::Pretrained(p) => p.forward(tape, store, x),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Backbone::Fcn(b) => b.feature_dim(),
            Backbone::Pretrained(p) => p.output_dim(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Backbone::Fcn(b) => b.config.input_size,
            Backbone::Pretrained(p) => p.input_size,
        }
    }
}

/// Features for a batch of images, outside of any training graph.
pub fn extract(backbone: &Backbone, store: &ParamStore, images: &Array4<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone().into_dyn());
    let f = backbone.forward(&mut tape, store, x)?;
    Ok(tape
        .value(f)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("features are rank 2"))
}
