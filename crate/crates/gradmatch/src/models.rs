//! Network architectures and parameter initialization.
//!
//! Four desk-scale architectures are provided; all forwards are
//! differentiable w.r.t. both the parameters and the input batch (the input
//! side carries the meta-gradient during condensation).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Logistic,
    Mlp,
    ConvnetLite,
    LenetLite,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Arch::Logistic => "logistic",
            Arch::Mlp => "mlp",
            Arch::ConvnetLite => "convnet_lite",
            Arch::LenetLite => "lenet_lite",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Arch::Logistic),
            "mlp" => Ok(Arch::Mlp),
            "convnet_lite" => Ok(Arch::ConvnetLite),
            "lenet_lite" => Ok(Arch::LenetLite),
            other => Err(Error::Config(vec![format!("unknown arch '{other}'")])),
        }
    }
}

/// Architecture plus input geometry; two equal specs always produce
/// identically-shaped parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    /// Channel width of every convnet_lite block.
    pub conv_width: usize,
    /// Hidden units of the mlp.
    pub mlp_hidden: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, input: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Contract(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        Ok(Self {
            arch,
            input,
            num_classes,
            conv_width: 32,
            mlp_hidden: 128,
        })
    }

    pub fn flat_dim(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Ordered (layer, role, shape) list defining the ParamSet layout.
    /// Conv weights use the (out, in, kh, kw) layout.
    pub fn param_shapes(&self) -> Result<Vec<(String, Role, Vec<usize>)>> {
        let (c, h, w) = self.input;
        let cls = self.num_classes;
        let mut out = Vec::new();
        let mut push = |layer: &str, role: Role, shape: Vec<usize>| {
            out.push((layer.to_string(), role, shape));
        };
        match self.arch {
            Arch::Logistic => {
                push("fc", Role::Weight, vec![cls, self.flat_dim()]);
                push("fc", Role::Bias, vec![cls]);
            }
            Arch::Mlp => {
                push("fc1", Role::Weight, vec![self.mlp_hidden, self.flat_dim()]);
                push("fc1", Role::Bias, vec![self.mlp_hidden]);
                push("fc2", Role::Weight, vec![cls, self.mlp_hidden]);
                push("fc2", Role::Bias, vec![cls]);
            }
            Arch::ConvnetLite => {
                let wd = self.conv_width;
                let (mut hh, mut ww) = (h, w);
                let mut cin = c;
                for i in 1..=3 {
                    push(&format!("conv{i}"), Role::Weight, vec![wd, cin, 3, 3]);
                    push(&format!("conv{i}"), Role::Bias, vec![wd]);
                    cin = wd;
                    // conv 3x3 pad 1 keeps dims; pool 2 halves them
                    if hh < 2 || ww < 2 {
                        return Err(Error::Shape {
                            op: "convnet_lite",
                            shape: vec![c, h, w],
                            msg: format!("input too small for pool stage {i}"),
                        });
                    }
                    hh /= 2;
                    ww /= 2;
                }
                push("head", Role::Weight, vec![cls, wd * hh * ww]);
                push("head", Role::Bias, vec![cls]);
            }
            Arch::LenetLite => {
                // conv 5x5 pad 2 keeps dims; pool 2; conv 5x5 pad 0; pool 2
                push("conv1", Role::Weight, vec![6, c, 5, 5]);
                push("conv1", Role::Bias, vec![6]);
                let (h1, w1) = (h / 2, w / 2);
                if h1 < 5 || w1 < 5 {
                    return Err(Error::Shape {
                        op: "lenet_lite",
                        shape: vec![c, h, w],
                        msg: "input too small for the 5x5 stage".into(),
                    });
                }
                push("conv2", Role::Weight, vec![16, 6, 5, 5]);
                push("conv2", Role::Bias, vec![16]);
                let (h2, w2) = ((h1 - 4) / 2, (w1 - 4) / 2);
                push("fc1", Role::Weight, vec![120, 16 * h2 * w2]);
                push("fc1", Role::Bias, vec![120]);
                push("fc2", Role::Weight, vec![cls, 120]);
                push("fc2", Role::Bias, vec![cls]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub layer: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Ordered parameter collection; the order is the contract every
/// GradientSet mirrors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Kaiming-normal weights (std = sqrt(2 / fan_in)), zero biases;
/// deterministic per seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut entries = Vec::new();
    for (layer, role, shape) in spec.param_shapes()? {
        let tensor = match role {
            Role::Bias => Tensor::zeros(&shape),
            Role::Weight => {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) * std)
            }
        };
        entries.push(ParamEntry {
            layer,
            role,
            tensor,
        });
    }
    Ok(ParamSet { entries })
}

/// Mount a ParamSet onto a graph, one leaf per entry, preserving order.
pub fn bind_params(g: &Graph, params: &ParamSet, requires_grad: bool) -> Result<Vec<Var>> {
    params
        .entries
        .iter()
        .map(|e| g.leaf(e.tensor.clone(), requires_grad))
        .collect()
}

fn check_batch(spec: &ModelSpec, batch: &Var) -> Result<usize> {
    let s = batch.shape();
    let (c, h, w) = spec.input;
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
        return Err(Error::Dim {
            op: "forward: batch does not match model input",
            lhs: s,
            rhs: vec![c, h, w],
        });
    }
    if s[0] == 0 {
        return Err(Error::EmptyInput { op: "forward" });
    }
    Ok(s[0])
}

/// The representation feeding the final linear layer, [N, D].
pub fn forward_features(spec: &ModelSpec, params: &[Var], batch: &Var) -> Result<Var> {
    check_batch(spec, batch)?;
    let linear = |x: &Var, w: &Var, b: &Var| -> Result<Var> {
        x.matmul(&w.transpose()?)?.add_row_bias(b)
    };
    match spec.arch {
        Arch::Logistic => batch.flatten(),
        Arch::Mlp => linear(&batch.flatten()?, &params[0], &params[1])?.relu(),
        Arch::ConvnetLite => {
            let mut x = batch.clone();
            for i in 0..3 {
                x = x
                    .conv2d(&params[2 * i], 1, 1)?
                    .add_channel_bias(&params[2 * i + 1])?
                    .relu()?
                    .avg_pool2d(2)?;
            }
            x.flatten()
        }
        Arch::LenetLite => {
            let x = batch
                .conv2d(&params[0], 1, 2)?
                .add_channel_bias(&params[1])?
                .relu()?
                .avg_pool2d(2)?;
            let x = x
                .conv2d(&params[2], 1, 0)?
                .add_channel_bias(&params[3])?
                .relu()?
                .avg_pool2d(2)?;
            linear(&x.flatten()?, &params[4], &params[5])?.relu()
        }
    }
}

/// Logits [N, C]; differentiable w.r.t. `params` and `batch`. The last two
/// params are always the classification head.
pub fn forward(spec: &ModelSpec, params: &[Var], batch: &Var) -> Result<Var> {
    let expected = spec.param_shapes()?;
    if params.len() != expected.len() {
        return Err(Error::Contract(format!(
            "forward: {} params bound, spec has {}",
            params.len(),
            expected.len()
        )));
    }
    let features = forward_features(spec, params, batch)?;
    let (w, b) = (&params[params.len() - 2], &params[params.len() - 1]);
    features.matmul(&w.transpose()?)?.add_row_bias(b)
}
