use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

use super::layer::LayerSpec;
use super::network::Network;

/// The two classifier architectures used in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// conv(10, 5) - pool(2) - relu - conv(20, 5) - dropout - pool(2) - relu
    /// - 320 features - fc(50) - relu - dropout - fc(10) - log-softmax.
    MnistCnn,
    /// conv(6, 5) - relu - pool(2) - conv(16, 5) - relu - pool(2) - 400
    /// features - fc(120) - relu - fc(84) - relu - fc(10) - log-softmax.
    CifarCnn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutRates {
    pub conv: f64,
    pub fc: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates { conv: 0.25, fc: 0.5 }
    }
}

impl Architecture {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Architecture::MnistCnn => [1, 28, 28],
            Architecture::CifarCnn => [3, 32, 32],
        }
    }

    pub fn layers(&self, dropout: DropoutRates) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match self {
            Architecture::MnistCnn => vec![
                Conv2d { out_channels: 10, kernel: 5 },
                MaxPool2d { kernel: 2 },
                Relu,
                Conv2d { out_channels: 20, kernel: 5 },
                Dropout { rate: dropout.conv },
                MaxPool2d { kernel: 2 },
                Relu,
                Flatten,
                Dense { out_features: 50 },
                Relu,
                Dropout { rate: dropout.fc },
                Dense { out_features: 10 },
                LogSoftmax,
            ],
            Architecture::CifarCnn => vec![
                Conv2d { out_channels: 6, kernel: 5 },
                Relu,
                MaxPool2d { kernel: 2 },
                Conv2d { out_channels: 16, kernel: 5 },
                Relu,
                MaxPool2d { kernel: 2 },
                Flatten,
                Dense { out_features: 120 },
                Relu,
                Dense { out_features: 84 },
                Relu,
                Dense { out_features: 10 },
                LogSoftmax,
            ],
        }
    }

    pub fn build<T: Real>(&self, dropout: DropoutRates, rng: &mut Rng) -> Result<Network<T>> {
        Network::new(&self.input_shape(), &self.layers(dropout), rng)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::MnistCnn => "mnist_cnn",
            Architecture::CifarCnn => "cifar_cnn",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_cnn" => Ok(Architecture::MnistCnn),
            "cifar_cnn" => Ok(Architecture::CifarCnn),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}
