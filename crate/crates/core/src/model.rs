//! Dual-head classifiers.
//!
//! A body maps the input to a hidden vector `h`. Two independent affine
//! heads read `h`: the prediction head produces `z1`, the teacher head
//! produces `z2` from `stop_gradient(h)`, so nothing the teacher learns
//! reaches the body.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Cnn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub labels: usize,
}

impl Default for MlpConfig {
    /// 784 → 500 → 500 → 10 with ReLU.
    fn default() -> Self {
        MlpConfig { input: 784, hidden: vec![500, 500], labels: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    pub channels: usize,
    /// Square input side; must be divisible by 4.
    pub image: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub fc: usize,
    pub labels: usize,
}

impl Default for CnnConfig {
    /// Two 5×5 convolutions (32 and 64 filters), each followed by 2×2 max
    /// pooling, then a 512-unit fully-connected layer.
    fn default() -> Self {
        CnnConfig { channels: 1, image: 28, conv1: 32, conv2: 64, kernel: 5, fc: 512, labels: 10 }
    }
}

impl CnnConfig {
    /// Width of the flattened feature map after the second pooling.
    pub fn flat_size(&self) -> usize {
        let side = self.image / 4;
        self.conv2 * side * side
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelConfig {
    Mlp(MlpConfig),
    Cnn(CnnConfig),
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Mlp => ModelConfig::Mlp(MlpConfig::default()),
            ModelKind::Cnn => ModelConfig::Cnn(CnnConfig::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Mlp(_) => ModelKind::Mlp,
            ModelConfig::Cnn(_) => ModelKind::Cnn,
        }
    }

    pub fn labels(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => c.labels,
            ModelConfig::Cnn(c) => c.labels,
        }
    }

    /// Shape of one input example (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelConfig::Mlp(c) => vec![c.input],
            ModelConfig::Cnn(c) => vec![c.channels, c.image, c.image],
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadModel<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    head1: usize,
    head2: usize,
}

/// Parameters of a model recorded on a tape, same order as
/// [`DualHeadModel::params`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    /// Wraps already-recorded parameter handles, in [`DualHeadModel::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundModel { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Results of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub h: Var,
    pub z1: Var,
    pub z2: Option<Var>,
}

impl<T: Scalar> DualHeadModel<T> {
    /// Gaussian weights with standard deviation `1/sqrt(fan_in)` and zero
    /// biases, drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names: Vec<String> = Vec::new();
        let mut params: Vec<Tensor<T>> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let t = if fan_in == 0 {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
            };
            names.push(name);
            params.push(t.with_grad());
            params.len()
        };
        let hidden = match &config {
            ModelConfig::Mlp(c) => {
                if c.input == 0 || c.labels == 0 || c.hidden.is_empty() || c.hidden.contains(&0) {
                    return Err(Error::Parameter(format!("invalid MLP config {:?}", c)));
                }
                let mut fan_in = c.input;
                for (i, &width) in c.hidden.iter().enumerate() {
                    add(format!("body.fc{}.weight", i + 1), vec![fan_in, width], fan_in, &mut rng);
                    add(format!("body.fc{}.bias", i + 1), vec![width], 0, &mut rng);
                    fan_in = width;
                }
                fan_in
            }
            ModelConfig::Cnn(c) => {
                if c.image % 4 != 0 || c.image == 0 || c.kernel % 2 == 0 || c.labels == 0 {
                    return Err(Error::Parameter(format!("invalid CNN config {:?}", c)));
                }
                let k2 = c.kernel * c.kernel;
                add("body.conv1.weight".into(), vec![c.conv1, c.channels, c.kernel, c.kernel], c.channels * k2, &mut rng);
                add("body.conv1.bias".into(), vec![c.conv1], 0, &mut rng);
                add("body.conv2.weight".into(), vec![c.conv2, c.conv1, c.kernel, c.kernel], c.conv1 * k2, &mut rng);
                add("body.conv2.bias".into(), vec![c.conv2], 0, &mut rng);
                add("body.fc.weight".into(), vec![c.flat_size(), c.fc], c.flat_size(), &mut rng);
                add("body.fc.bias".into(), vec![c.fc], 0, &mut rng);
                c.fc
            }
        };
        let labels = config.labels();
        let head1 = add("head1.weight".into(), vec![hidden, labels], hidden, &mut rng) - 1;
        add("head1.bias".into(), vec![labels], 0, &mut rng);
        let head2 = add("head2.weight".into(), vec![hidden, labels], hidden, &mut rng) - 1;
        add("head2.bias".into(), vec![labels], 0, &mut rng);
        Ok(DualHeadModel { config, names, params, head1, head2 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn labels(&self) -> usize {
        self.config.labels()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Indices of the body, prediction-head and teacher-head parameters.
    pub fn body_indices(&self) -> std::ops::Range<usize> {
        0..self.head1
    }

    pub fn head1_indices(&self) -> std::ops::Range<usize> {
        self.head1..self.head2
    }

    pub fn head2_indices(&self) -> std::ops::Range<usize> {
        self.head2..self.params.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces a parameter's values; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Dimension(format!("{} model has no parameter named {:?}", self.kind(), name)))?;
        if self.params[i].shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?} but {:?} was supplied",
                name,
                self.params[i].shape(),
                value.shape()
            )));
        }
        let rg = self.params[i].requires_grad();
        let mut value = value;
        value.set_requires_grad(rg);
        value.clear_grad();
        self.params[i] = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel { vars: self.params.iter().map(|p| tape.param(p)).collect() }
    }

    /// Records the parameters as constants, for evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid")))
                .collect(),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundModel) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            tape.accumulate_into(v, p)?;
        }
        Ok(())
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        let want = self.config.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] || shape[0] == 0 {
            return Err(Error::Dimension(format!(
                "{} model expects input [batch, {:?}], got {:?}",
                self.kind(),
                want,
                shape
            )));
        }
        Ok(())
    }

    fn linear(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Runs the body and the prediction head, plus the teacher head when
    /// `teacher` is set.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundModel, x: Var, teacher: bool) -> Result<Forward> {
        self.check_input(tape, x)?;
        let v = &bound.vars;
        let h = match &self.config {
            ModelConfig::Mlp(c) => {
                let mut a = x;
                for i in 0..c.hidden.len() {
                    let y = Self::linear(tape, a, v[2 * i], v[2 * i + 1])?;
                    a = tape.relu(y);
                }
                a
            }
            ModelConfig::Cnn(c) => {
                let batch = tape.value(x).shape()[0];
                let y = tape.conv2d(x, v[0], v[1])?;
                let y = tape.relu(y);
                let y = tape.maxpool2d(y)?;
                let y = tape.conv2d(y, v[2], v[3])?;
                let y = tape.relu(y);
                let y = tape.maxpool2d(y)?;
                let y = tape.reshape(y, [batch, c.flat_size()])?;
                let y = Self::linear(tape, y, v[4], v[5])?;
                tape.relu(y)
            }
        };
        let z1 = Self::linear(tape, h, v[self.head1], v[self.head1 + 1])?;
        let z2 = if teacher {
            let detached = tape.stop_gradient(h);
            Some(Self::linear(tape, detached, v[self.head2], v[self.head2 + 1])?)
        } else {
            None
        };
        Ok(Forward { h, z1, z2 })
    }

    pub fn cast<U: Scalar>(&self) -> DualHeadModel<U> {
        DualHeadModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            head1: self.head1,
            head2: self.head2,
        }
    }
}

/// Row-wise argmax of a logit matrix, ties to the smaller index.
pub fn predict<T: Scalar>(z1: &Tensor<T>) -> Vec<usize> {
    (0..z1.rows()).map(|i| argmax(z1.row(i))).collect()
}
