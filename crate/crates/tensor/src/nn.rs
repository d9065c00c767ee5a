//! Parameterised layers. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so whole models can be hashed, frozen and checkpointed by name.

use rand::Rng;

use crate::graph::{Conv2dSpec, Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::KaimingNormal { fan_in, gain: 1.0 },
            rng,
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), &[out_channels], Init::Zeros, rng));
        Conv2d { weight, bias, spec: Conv2dSpec { stride, pad }, in_channels, out_channels, kernel }
    }

    /// "Same" 3x3 convolution, stride 1.
    pub fn same3<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(ps, name, cin, cout, 3, 1, 1, true, rng)
    }

    pub fn pointwise<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(ps, name, cin, cout, 1, 1, 0, bias, rng)
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }

    /// Sets weight (and bias) to zero.
    pub fn zero<S: Scalar>(&self, ps: &mut ParamStore<S>) {
        ps.get_mut(self.weight).value.iter_mut().for_each(|v| *v = S::zero());
        if let Some(b) = self.bias {
            ps.get_mut(b).value.iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), &[fan_out, fan_in], Init::FanInUniform { fan_in }, rng);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), &[fan_out], Init::Zeros, rng));
        Linear { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.weight"), &[dim], Init::Ones, rng),
            beta: ps.add(format!("{name}.bias"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        g.layer_norm(x, g.param(self.gamma), g.param(self.beta), 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses `min(channels, max_groups)` groups, reduced until it divides `channels`.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        max_groups: usize,
        gamma_init: Init,
        rng: &mut R,
    ) -> Self {
        let mut groups = channels.min(max_groups).max(1);
        while channels % groups != 0 {
            groups -= 1;
        }
        GroupNorm {
            gamma: ps.add(format!("{name}.weight"), &[channels], gamma_init, rng),
            beta: ps.add(format!("{name}.bias"), &[channels], Init::Zeros, rng),
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        g.group_norm(x, g.param(self.gamma), g.param(self.beta), self.groups, 1e-5)
    }
}
