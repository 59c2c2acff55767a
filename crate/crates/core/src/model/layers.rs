//! Parameterized layers and the named-parameter registry.

use crate::error::Result;
use crate::tensor::{batch_norm2d, conv2d, relu, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::rc::Rc;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    Backbone,
    Branch,
}

/// A named trainable tensor.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub group: LrGroup,
    /// Weight decay applies only to convolution weights, not biases or
    /// normalization parameters.
    pub decay: bool,
}

/// A named non-trainable buffer (batch-norm running stats).
#[derive(Clone)]
pub struct NamedBuffer {
    pub name: String,
    pub data: Rc<RefCell<Array1<f64>>>,
}

/// Collects named params/buffers while walking the module tree.
pub struct ParamCollector {
    pub params: Vec<Param>,
    pub buffers: Vec<NamedBuffer>,
}

impl ParamCollector {
    pub fn new() -> Self {
        ParamCollector { params: Vec::new(), buffers: Vec::new() }
    }
}

impl Default for ParamCollector {
    fn default() -> Self {
        Self::new()
    }
}

fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub struct Conv2dLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let weight = Var::leaf(kaiming_normal(rng, &[cout, cin, k, k], cin * k * k), true);
        let bias = bias.then(|| Var::leaf(ArrayD::zeros(vec![cout]), true));
        Conv2dLayer { weight, bias, stride, pad, dilation }
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad, self.dilation)
    }

    pub fn collect(&self, prefix: &str, group: LrGroup, out: &mut ParamCollector) {
        out.params.push(Param {
            name: format!("{prefix}.weight"),
            var: self.weight.clone(),
            group,
            decay: true,
        });
        if let Some(b) = &self.bias {
            out.params.push(Param {
                name: format!("{prefix}.bias"),
                var: b.clone(),
                group,
                decay: false,
            });
        }
    }
}

pub struct BatchNorm2dLayer {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Rc<RefCell<Array1<f64>>>,
    pub running_var: Rc<RefCell<Array1<f64>>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2dLayer {
    pub fn new(c: usize) -> Self {
        BatchNorm2dLayer {
            gamma: Var::leaf(ArrayD::ones(vec![c]), true),
            beta: Var::leaf(ArrayD::zeros(vec![c]), true),
            running_mean: Rc::new(RefCell::new(Array1::zeros(c))),
            running_var: Rc::new(RefCell::new(Array1::ones(c))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var, training: bool) -> Result<Var> {
        batch_norm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            training,
            self.momentum,
            self.eps,
        )
    }

    pub fn collect(&self, prefix: &str, group: LrGroup, out: &mut ParamCollector) {
        out.params.push(Param {
            name: format!("{prefix}.gamma"),
            var: self.gamma.clone(),
            group,
            decay: false,
        });
        out.params.push(Param {
            name: format!("{prefix}.beta"),
            var: self.beta.clone(),
            group,
            decay: false,
        });
        out.buffers.push(NamedBuffer {
            name: format!("{prefix}.running_mean"),
            data: self.running_mean.clone(),
        });
        out.buffers.push(NamedBuffer {
            name: format!("{prefix}.running_var"),
            data: self.running_var.clone(),
        });
    }
}

/// Conv 3x3 -> batch norm -> ReLU. One distinct instance per fusion site.
pub struct GBlock {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2dLayer,
}

impl GBlock {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        GBlock {
            conv: Conv2dLayer::new(rng, channels, channels, 3, 1, 1, 1, false),
            bn: BatchNorm2dLayer::new(channels),
        }
    }

    pub fn forward(&self, x: &Var, training: bool) -> Result<Var> {
        Ok(relu(&self.bn.forward(&self.conv.forward(x)?, training)?))
    }

    pub fn collect(&self, prefix: &str, group: LrGroup, out: &mut ParamCollector) {
        self.conv.collect(&format!("{prefix}.conv"), group, out);
        self.bn.collect(&format!("{prefix}.bn"), group, out);
    }
}
