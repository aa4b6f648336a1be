//! Composite backbone modules: CSPBlock, ResBlock-D, CBAM and the auxiliary
//! residual block, plus the elementwise fusion of auxiliary and backbone
//! features.
//!
//! Every block owns its convolutions as [`ConvParams`]. "CBL" below means
//! convolution, batch norm, then LeakyReLU.

use thiserror::Error;

use crate::tensor::{
    self, add, broadcast_mul, channel_pool, concat_channels, conv2d, leaky_relu, pool2d, relu,
    sigmoid, spatial_pool, ConvParams, Exec, PoolKind, Shape, Tensor, TensorError, LEAKY_DIVISOR,
};

/// Default CBAM channel reduction ratio.
pub const CBAM_REDUCTION: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("{block}: {msg}")]
    Config { block: &'static str, msg: String },
    #[error("{block}: input has {actual} channels, block expects {expected}")]
    Channels {
        block: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{block}: internal shape mismatch {lhs} vs {rhs}")]
    Internal {
        block: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BlockError>;

/// Conv + BN + LeakyReLU.
pub fn cbl(conv: &ConvParams, x: &Tensor, exec: Exec) -> tensor::Result<Tensor> {
    leaky_relu(&conv2d(x, conv, exec)?, LEAKY_DIVISOR)
}

fn check_channels(block: &'static str, expected: usize, x: &Tensor) -> Result<()> {
    if x.shape().c != expected {
        return Err(BlockError::Channels {
            block,
            expected,
            actual: x.shape().c,
        });
    }
    Ok(())
}

/// Visits the named convolutions of a block in a fixed order.
pub trait ConvOwner {
    fn convs(&self) -> Vec<(&'static str, &ConvParams)>;
    fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)>;
}

/// Tiny-variant cross stage partial block: `c -> 2c` channels, half spatial.
#[derive(Clone, Debug, PartialEq)]
pub struct CspBlock {
    pub channels: usize,
    pub conv0: ConvParams,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

/// Block output plus the pre-pool 1x1 feature used as an FPN route.
#[derive(Clone, Debug, PartialEq)]
pub struct CspOutput {
    pub out: Tensor,
    pub route: Tensor,
}

impl CspBlock {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(BlockError::Config {
                block: "csp",
                msg: format!("channel count must be even and positive, got {channels}"),
            });
        }
        let half = channels / 2;
        Ok(Self {
            channels,
            conv0: ConvParams::zeros(channels, channels, 3, 1, false, true),
            conv1: ConvParams::zeros(half, half, 3, 1, false, true),
            conv2: ConvParams::zeros(half, half, 3, 1, false, true),
            conv3: ConvParams::zeros(channels, channels, 1, 1, false, true),
        })
    }

    pub fn output_shape(&self, s: Shape) -> Shape {
        Shape::new(s.n, 2 * self.channels, s.h / 2, s.w / 2)
    }

    /// Route output shape (`conv3`, before pooling).
    pub fn route_shape(&self, s: Shape) -> Shape {
        Shape::new(s.n, self.channels, s.h, s.w)
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<CspOutput> {
        check_channels("csp", self.channels, x)?;
        let half = self.channels / 2;
        let x0 = cbl(&self.conv0, x, exec)?;
        let second = x0.slice_channels(half, self.channels)?;
        let x1 = cbl(&self.conv1, &second, exec)?;
        let x2 = cbl(&self.conv2, &x1, exec)?;
        let x3 = cbl(&self.conv3, &concat_channels(&x2, &x1)?, exec)?;
        let out = pool2d(&concat_channels(&x0, &x3)?, PoolKind::Max, 2, 2)?;
        Ok(CspOutput { out, route: x3 })
    }
}

impl ConvOwner for CspBlock {
    fn convs(&self) -> Vec<(&'static str, &ConvParams)> {
        vec![
            ("conv0", &self.conv0),
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("conv3", &self.conv3),
        ]
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        vec![
            ("conv0", &mut self.conv0),
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("conv3", &mut self.conv3),
        ]
    }
}

/// Two-path downsampling residual block: `c -> 2c` channels, half spatial.
///
/// Path A is 1x1 (c -> c/2), 3x3 stride 2, 1x1 (c/2 -> 2c); path B is a 2x2
/// average pool followed by 1x1 (c -> 2c). The final conv of each path is
/// BN-only; one LeakyReLU follows the sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockD {
    pub channels: usize,
    pub a_reduce: ConvParams,
    pub a_down: ConvParams,
    pub a_expand: ConvParams,
    pub b_proj: ConvParams,
}

impl ResBlockD {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(BlockError::Config {
                block: "resblock_d",
                msg: format!("channel count must be even and positive, got {channels}"),
            });
        }
        let half = channels / 2;
        Ok(Self {
            channels,
            a_reduce: ConvParams::zeros(channels, half, 1, 1, false, true),
            a_down: ConvParams::zeros(half, half, 3, 2, false, true),
            a_expand: ConvParams::zeros(half, 2 * channels, 1, 1, false, true),
            b_proj: ConvParams::zeros(channels, 2 * channels, 1, 1, false, true),
        })
    }

    pub fn output_shape(&self, s: Shape) -> Shape {
        Shape::new(s.n, 2 * self.channels, s.h / 2, s.w / 2)
    }

    pub fn path_a(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let a = cbl(&self.a_reduce, x, exec)?;
        let a = cbl(&self.a_down, &a, exec)?;
        Ok(conv2d(&a, &self.a_expand, exec)?)
    }

    pub fn path_b(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let b = pool2d(x, PoolKind::Avg, 2, 2)?;
        Ok(conv2d(&b, &self.b_proj, exec)?)
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        check_channels("resblock_d", self.channels, x)?;
        let a = self.path_a(x, exec)?;
        let b = self.path_b(x, exec)?;
        if a.shape() != b.shape() {
            return Err(BlockError::Internal {
                block: "resblock_d",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(leaky_relu(&add(&a, &b)?, LEAKY_DIVISOR)?)
    }
}

impl ConvOwner for ResBlockD {
    fn convs(&self) -> Vec<(&'static str, &ConvParams)> {
        vec![
            ("a_reduce", &self.a_reduce),
            ("a_down", &self.a_down),
            ("a_expand", &self.a_expand),
            ("b_proj", &self.b_proj),
        ]
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        vec![
            ("a_reduce", &mut self.a_reduce),
            ("a_down", &mut self.a_down),
            ("a_expand", &mut self.a_expand),
            ("b_proj", &mut self.b_proj),
        ]
    }
}

/// Convolutional block attention: channel attention followed by spatial
/// attention, each applied multiplicatively.
///
/// The shared MLP is stored as two biased 1x1 convolutions applied to the
/// pooled `(n, c, 1, 1)` descriptors. The spatial map comes from a biased
/// 7x7 convolution over the `[max; mean]` channel reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbam {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: ConvParams,
    pub fc2: ConvParams,
    pub spatial: ConvParams,
}

impl Cbam {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels == 0 || !channels.is_multiple_of(reduction) {
            return Err(BlockError::Config {
                block: "cbam",
                msg: format!("{channels} channels not divisible by reduction {reduction}"),
            });
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            fc1: ConvParams::zeros(channels, hidden, 1, 1, true, false),
            fc2: ConvParams::zeros(hidden, channels, 1, 1, true, false),
            spatial: ConvParams::zeros(2, 1, 7, 1, true, false),
        })
    }

    fn mlp(&self, v: &Tensor, exec: Exec) -> Result<Tensor> {
        let h = relu(&conv2d(v, &self.fc1, exec)?)?;
        Ok(conv2d(&h, &self.fc2, exec)?)
    }

    /// `sigmoid(mlp(avg(F)) + mlp(max(F)))`, shape `(n, c, 1, 1)`.
    pub fn channel_map(&self, f: &Tensor, exec: Exec) -> Result<Tensor> {
        check_channels("cbam", self.channels, f)?;
        let avg = self.mlp(&channel_pool(f, PoolKind::Avg)?, exec)?;
        let max = self.mlp(&channel_pool(f, PoolKind::Max)?, exec)?;
        Ok(sigmoid(&add(&avg, &max)?)?)
    }

    /// `sigmoid(conv7x7([max_c(F); mean_c(F)]))`, shape `(n, 1, h, w)`.
    pub fn spatial_map(&self, f: &Tensor, exec: Exec) -> Result<Tensor> {
        let pooled = concat_channels(
            &spatial_pool(f, PoolKind::Max)?,
            &spatial_pool(f, PoolKind::Avg)?,
        )?;
        Ok(sigmoid(&conv2d(&pooled, &self.spatial, exec)?)?)
    }

    pub fn forward(&self, f: &Tensor, exec: Exec) -> Result<Tensor> {
        let refined = broadcast_mul(f, &self.channel_map(f, exec)?)?;
        let ms = self.spatial_map(&refined, exec)?;
        Ok(broadcast_mul(&refined, &ms)?)
    }
}

impl ConvOwner for Cbam {
    fn convs(&self) -> Vec<(&'static str, &ConvParams)> {
        vec![("fc1", &self.fc1), ("fc2", &self.fc2), ("spatial", &self.spatial)]
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        vec![
            ("fc1", &mut self.fc1),
            ("fc2", &mut self.fc2),
            ("spatial", &mut self.spatial),
        ]
    }
}

/// Auxiliary residual block: two stacked 3x3 CBLs (the first strided) with
/// CBAM on the second, concatenated with the first conv's output.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxBlock {
    pub channels: usize,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub cbam: Cbam,
}

impl AuxBlock {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channels,
            conv1: ConvParams::zeros(channels, channels, 3, 2, false, true),
            conv2: ConvParams::zeros(channels, channels, 3, 1, false, true),
            cbam: Cbam::new(channels, reduction)?,
        })
    }

    pub fn output_shape(&self, s: Shape) -> Shape {
        Shape::new(s.n, 2 * self.channels, s.h / 2, s.w / 2)
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        check_channels("aux", self.channels, x)?;
        let a = cbl(&self.conv1, x, exec)?;
        let b = cbl(&self.conv2, &a, exec)?;
        let attended = self.cbam.forward(&b, exec)?;
        Ok(concat_channels(&a, &attended)?)
    }
}

impl ConvOwner for AuxBlock {
    fn convs(&self) -> Vec<(&'static str, &ConvParams)> {
        let mut v = vec![("conv1", &self.conv1), ("conv2", &self.conv2)];
        v.extend(
            self.cbam
                .convs()
                .into_iter()
                .map(|(name, p)| (cbam_name(name), p)),
        );
        v
    }

    fn convs_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        let mut v = vec![("conv1", &mut self.conv1), ("conv2", &mut self.conv2)];
        v.extend(
            self.cbam
                .convs_mut()
                .into_iter()
                .map(|(name, p)| (cbam_name(name), p)),
        );
        v
    }
}

fn cbam_name(name: &'static str) -> &'static str {
    match name {
        "fc1" => "cbam.fc1",
        "fc2" => "cbam.fc2",
        "spatial" => "cbam.spatial",
        other => other,
    }
}

/// Adds the auxiliary features to the stage output.
pub fn fuse(stage_out: &Tensor, aux_out: &Tensor) -> Result<Tensor> {
    Ok(add(stage_out, aux_out)?)
}
