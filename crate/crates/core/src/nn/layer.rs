use crate::error::{Error, Result};

/// One stage of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { out_features: usize },
    /// Valid convolution, stride one, square kernel.
    Conv2d { out_channels: usize, kernel: usize },
    /// Non-overlapping max pooling (stride equals kernel); trailing rows and
    /// columns that do not fill a window are dropped.
    MaxPool2d { kernel: usize },
    Relu,
    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    Dropout { rate: f64 },
    Flatten,
    LogSoftmax,
}

impl LayerSpec {
    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { out_features: 0 } => {
                Err(Error::InvalidArgument("dense layer needs out_features > 0".into()))
            }
            LayerSpec::Conv2d { out_channels, kernel } if out_channels == 0 || kernel == 0 => Err(
                Error::InvalidArgument("conv layer needs positive channels and kernel".into()),
            ),
            LayerSpec::MaxPool2d { kernel: 0 } => {
                Err(Error::InvalidArgument("pool kernel must be positive".into()))
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => Err(
                Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")),
            ),
            _ => Ok(()),
        }
    }
}

/// Resolved geometry of a valid, stride-one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix.
    pub fn patch_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample `x[in_c, in_h, in_w]` into `cols[patch_rows, out_pixels]`.
    pub fn im2col<T: Copy>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.out_pixels();
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oh in 0..self.out_h {
                        let src = &plane[(oh + ki) * self.in_w + kj..][..self.out_w];
                        dst[oh * self.out_w..(oh + 1) * self.out_w].copy_from_slice(src);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back
    /// onto the input image, accumulating overlaps.
    pub fn col2im_add<T: Copy + std::ops::AddAssign>(&self, cols: &[T], dx: &mut [T]) {
        let hw = self.out_pixels();
        let mut row = 0;
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oh in 0..self.out_h {
                        let dst = &mut plane[(oh + ki) * self.in_w + kj..][..self.out_w];
                        for (d, &s) in dst.iter_mut().zip(&src[oh * self.out_w..(oh + 1) * self.out_w]) {
                            *d += s;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// A layer with all shapes resolved against its input.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    Conv2d {
        geom: ConvGeom,
        weight: usize,
        bias: usize,
    },
    MaxPool2d(PoolGeom),
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
    LogSoftmax {
        classes: usize,
    },
}
