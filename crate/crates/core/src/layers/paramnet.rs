use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::smoother::{GaussianParams, GAUSSIAN_PARAM_LEN};
use crate::tensor::Tensor;

use super::{Conv2d, Dense, MaxPool2, Param, ParamGroup, Relu};

/// Shape of the network that regresses Gaussian parameters from the image:
/// conv, relu, 2x2 pool, conv, relu, 2x2 pool, linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterNetSpec {
    pub in_channels: usize,
    pub in_hw: (usize, usize),
    /// `(channels, kernel)` of the first convolution.
    pub conv1: (usize, usize),
    pub conv2: (usize, usize),
    /// Number of smoothers fed; the output has `5 * num_smoothers` values.
    pub num_smoothers: usize,
}

impl ParameterNetSpec {
    pub fn new(in_hw: (usize, usize), num_smoothers: usize) -> Self {
        ParameterNetSpec {
            in_channels: 1,
            in_hw,
            conv1: (8, 3),
            conv2: (8, 3),
            num_smoothers,
        }
    }

    pub fn output_len(&self) -> usize {
        GAUSSIAN_PARAM_LEN * self.num_smoothers
    }
}

/// The parameter network. All of its parameters belong to
/// [`ParamGroup::Smoother`].
#[derive(Clone, Debug)]
pub struct ParamNet {
    spec: ParameterNetSpec,
    pub conv1: Conv2d,
    relu1: Relu,
    pool1: MaxPool2,
    pub conv2: Conv2d,
    relu2: Relu,
    pool2: MaxPool2,
    pub fc: Dense,
    pooled_shape: Vec<usize>,
}

impl ParamNet {
    /// The regression layer starts at zero weight with its bias set to the
    /// centered Gaussian, so every image initially gets `mu = (0.5, 0.5)`
    /// and identity precision.
    pub fn new(name: &str, spec: ParameterNetSpec, rng: &mut Rng) -> Result<Self> {
        if spec.num_smoothers == 0 {
            return Err(Error::Config("parameter net needs at least one smoother".into()));
        }
        let g = ParamGroup::Smoother;
        let conv1 = Conv2d::new(&format!("{name}.conv1"), spec.in_channels, spec.conv1.0, spec.conv1.1, spec.in_hw, g, rng)?;
        let (h1, w1) = conv1.out_hw();
        if h1 % 2 != 0 || w1 % 2 != 0 {
            return Err(Error::Config(format!("parameter net conv1 output {h1}x{w1} is not poolable")));
        }
        let conv2 = Conv2d::new(&format!("{name}.conv2"), spec.conv1.0, spec.conv2.0, spec.conv2.1, (h1 / 2, w1 / 2), g, rng)?;
        let (h2, w2) = conv2.out_hw();
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(Error::Config(format!("parameter net conv2 output {h2}x{w2} is not poolable")));
        }
        let flat = spec.conv2.0 * (h2 / 2) * (w2 / 2);
        let mut fc = Dense::new(&format!("{name}.fc"), flat, spec.output_len(), g, rng);
        fc.weight.value = Tensor::zeros(&[spec.output_len(), flat]);
        let centered = GaussianParams::centered().to_array();
        for (i, b) in fc.bias.value.data_mut().iter_mut().enumerate() {
            *b = centered[i % GAUSSIAN_PARAM_LEN];
        }
        Ok(ParamNet {
            spec,
            conv1,
            relu1: Relu::new(),
            pool1: MaxPool2::new(),
            conv2,
            relu2: Relu::new(),
            pool2: MaxPool2::new(),
            fc,
            pooled_shape: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ParameterNetSpec {
        &self.spec
    }

    /// `[N, C, H, W]` images to `[N, 5 * S]` raw Gaussian parameters.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?;
        let h = self.pool1.forward(&self.relu1.forward(&h))?;
        let h = self.conv2.forward(&h)?;
        let h = self.pool2.forward(&self.relu2.forward(&h))?;
        self.pooled_shape = h.shape().to_vec();
        self.fc.forward(&h)
    }

    /// Gaussian parameters for each image of the batch.
    pub fn gaussian_params(&mut self, x: &Tensor) -> Result<Vec<Vec<GaussianParams>>> {
        let out = self.forward(x)?;
        Ok(out
            .data()
            .chunks_exact(self.spec.output_len())
            .map(|row| row.chunks_exact(GAUSSIAN_PARAM_LEN).map(GaussianParams::from_slice).collect())
            .collect())
    }

    /// Accumulates parameter gradients from `[N, 5 * S]` upstream. The
    /// image itself is not trainable, so no input gradient is produced.
    pub fn backward(&mut self, gy: &Tensor) -> Result<()> {
        let g = self.fc.backward(gy)?.reshape(&self.pooled_shape)?;
        let g = self.relu2.backward(&self.pool2.backward(&g)?)?;
        let g = self.conv2.backward(&g, true)?.expect("input gradient requested");
        let g = self.relu1.backward(&self.pool1.backward(&g)?)?;
        self.conv1.backward(&g, false)?;
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.fc.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v.extend(self.fc.params());
        v
    }

    /// Relu masks and pooling winners from the last forward pass.
    pub fn fingerprint(&self, out: &mut Vec<u64>) {
        for relu in [&self.relu1, &self.relu2] {
            out.extend(relu.mask().iter().map(|&b| b as u64));
        }
        for pool in [&self.pool1, &self.pool2] {
            out.extend(pool.argmax().iter().map(|&i| i as u64));
        }
    }
}
