//! Forward and backward kernels for the fixed layer set of the network.

mod activation;
mod batchnorm;
mod concat;
mod conv;
mod conv_transpose;
mod pool;
mod softmax;

pub use activation::{relu_backward, relu_backward_from_output, relu_forward, relu_inplace};
pub use batchnorm::{
    batchnorm3d_backward, batchnorm3d_forward, BatchNormCache, BatchNormGrads, BatchNormOutput,
    BnMode, BnSettings,
};
pub use concat::{concat_channels, split_channels};
pub use conv::{
    conv3d_backward, conv3d_backward_input, conv3d_backward_params, conv3d_forward, ConvGrads,
};
pub use conv_transpose::{transposed_conv3d_backward, transposed_conv3d_forward};
pub use pool::{maxpool3d_backward, maxpool3d_forward, PoolOutput};
pub use softmax::{softmax_channels, softmax_channels_backward};

use alloc::format;

use crate::error::{Error, Result};

/// Geometry of a 3D (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvSpec {
    /// `(kd, kh, kw)`
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Zero padding per spatial axis.
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let spec = ConvSpec { kernel, stride, padding, in_channels, out_channels };
        spec.validate()?;
        Ok(spec)
    }

    /// 3×3×3 kernel, stride 1, padding 1: preserves spatial extents.
    pub fn same3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { kernel: [3; 3], stride: [1; 3], padding: [1; 3], in_channels, out_channels }
    }

    /// 1×1×1 kernel.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { kernel: [1; 3], stride: [1; 3], padding: [0; 3], in_channels, out_channels }
    }

    /// 2×2×2 kernel with stride 2: halves (conv) or doubles (transposed) extents.
    pub fn up2(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { kernel: [2; 3], stride: [2; 3], padding: [0; 3], in_channels, out_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config(format!(
                "kernel {:?} and stride {:?} must be ≥ 1 on every axis",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents of a forward convolution; `(in + 2p − k)` must be a
    /// non-negative multiple of the stride.
    pub fn conv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::Config(format!(
                    "axis {a}: kernel {} exceeds padded extent {span}",
                    self.kernel[a]
                )));
            }
            let reach = span - self.kernel[a];
            if reach % self.stride[a] != 0 {
                return Err(Error::Config(format!(
                    "axis {a}: (in {} + 2·pad {} − kernel {}) is not divisible by stride {}",
                    input[a], self.padding[a], self.kernel[a], self.stride[a]
                )));
            }
            out[a] = reach / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution, `(in − 1)·s + k − 2p`.
    pub fn transposed_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] == 0 {
                return Err(Error::Config(format!("axis {a}: empty input")));
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::Config(format!(
                    "axis {a}: padding {} leaves no output",
                    self.padding[a]
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }

    /// `[out, in, kd, kh, kw]`
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    /// `[in, out, kd, kh, kw]`, the layout used by transposed convolutions.
    pub fn transposed_weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.in_channels, self.out_channels, kd, kh, kw]
    }
}
