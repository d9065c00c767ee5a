//! Convolutional trunks: the compact baseline and the ResNet18-style network.

use gazesr_tensor::nn::{Conv2d, GroupNorm, Linear};
use gazesr_tensor::{Graph, Init, ParamStore, Scalar, Var};
use rand::Rng;

use super::GazeRegressorConfig;

const MAX_GROUPS: usize = 8;

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn norm<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, name: &str, ch: usize, rng: &mut R) -> GroupNorm {
    GroupNorm::new(ps, name, ch, MAX_GROUPS, Init::Ones, rng)
}

/// Flatten, hidden layer with ReLU and dropout, linear to `(pitch, yaw)`.
pub(crate) struct Head {
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
}

impl Head {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        prefix: &str,
        features: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Head {
            fc1: Linear::new(ps, &format!("{prefix}head.fc1"), features, hidden, true, rng),
            fc2: Linear::new(ps, &format!("{prefix}head.fc2"), hidden, 2, true, rng),
            dropout,
        }
    }

    pub(crate) fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let s = g.shape(x);
        let flat = g.reshape(x, &[s[0], s[1..].iter().product()]);
        let h = g.dropout(g.leaky_relu(self.fc1.forward(g, flat), 0.01), self.dropout);
        self.fc2.forward(g, h)
    }
}

/// Conv-norm-ReLU-pool stages down to a 7x7 map, then the flatten head.
pub(crate) struct SimpleCnn {
    stages: Vec<(Conv2d, GroupNorm)>,
    head: Head,
}

impl SimpleCnn {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, cfg: &GazeRegressorConfig, rng: &mut R) -> Self {
        let mut side = cfg.input_size;
        let mut cin = 3;
        let mut stages = Vec::new();
        let mut i = 0;
        while side > 7 {
            let cout = cfg.width << i.min(2);
            stages.push((
                Conv2d::same3(ps, &format!("features.{i}.conv"), cin, cout, rng),
                norm(ps, &format!("features.{i}.norm"), cout, rng),
            ));
            cin = cout;
            side /= 2;
            i += 1;
        }
        let head = Head::new(ps, "", cin * side * side, cfg.head_hidden, cfg.dropout, rng);
        SimpleCnn { stages, head }
    }

    pub(crate) fn forward<S: Scalar>(&self, g: &Graph<'_, S>, mut x: Var) -> Var {
        for (conv, gn) in &self.stages {
            x = g.max_pool2d(g.relu(gn.forward(g, conv.forward(g, x))), 2, 2, 0);
        }
        self.head.forward(g, x)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    downsample: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng);
        let norm1 = norm(ps, &format!("{name}.gn1"), cout, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng);
        let norm2 = norm(ps, &format!("{name}.gn2"), cout, rng);
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(ps, &format!("{name}.downsample.0"), cin, cout, 1, stride, 0, false, rng),
                norm(ps, &format!("{name}.downsample.1"), cout, rng),
            )
        });
        BasicBlock { conv1, norm1, conv2, norm2, downsample }
    }

    fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let h = g.relu(self.norm1.forward(g, self.conv1.forward(g, x)));
        let h = self.norm2.forward(g, self.conv2.forward(g, h));
        let skip = match &self.downsample {
            Some((c, n)) => n.forward(g, c.forward(g, x)),
            None => x,
        };
        g.relu(g.add(h, skip))
    }
}

/// Standard four-stage residual layout (two basic blocks per stage) with
/// group normalisation and the flatten head.
pub(crate) struct ResNet18 {
    conv1: Conv2d,
    norm1: GroupNorm,
    stages: Vec<Vec<BasicBlock>>,
    head: Head,
}

/// `(channels, side)` of the activation entering `stage` (1-based) of a
/// ResNet18-style trunk; `stage = 5` describes the trunk output.
pub(crate) fn resnet_stage_input(input_size: usize, width: usize, stage: usize) -> (usize, usize) {
    let mut side = conv_out(conv_out(input_size, 7, 2, 3), 3, 2, 1);
    let mut c = width;
    for k in 1..stage.min(5) {
        if k > 1 {
            side = conv_out(side, 3, 2, 1);
        }
        c = width << (k - 1);
    }
    (c, side)
}

impl ResNet18 {
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        prefix: &str,
        cfg: &GazeRegressorConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        let conv1 = Conv2d::new(ps, &format!("{prefix}conv1"), 3, w, 7, 2, 3, false, rng);
        let norm1 = norm(ps, &format!("{prefix}gn1"), w, rng);
        let mut cin = w;
        let stages = (0..4)
            .map(|k| {
                let cout = w << k;
                let stride = if k == 0 { 1 } else { 2 };
                let blocks = vec![
                    BasicBlock::new(ps, &format!("{prefix}layer{}.0", k + 1), cin, cout, stride, rng),
                    BasicBlock::new(ps, &format!("{prefix}layer{}.1", k + 1), cout, cout, 1, rng),
                ];
                cin = cout;
                blocks
            })
            .collect();
        let (c, side) = resnet_stage_input(cfg.input_size, w, 5);
        let head = Head::new(ps, prefix, c * side * side, cfg.head_hidden, cfg.dropout, rng);
        ResNet18 { conv1, norm1, stages, head }
    }

    pub(crate) fn stem<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let h = g.relu(self.norm1.forward(g, self.conv1.forward(g, x)));
        g.max_pool2d(h, 3, 2, 1)
    }

    /// Runs stage `k` (1-based).
    pub(crate) fn stage<S: Scalar>(&self, g: &Graph<'_, S>, k: usize, mut x: Var) -> Var {
        for b in &self.stages[k - 1] {
            x = b.forward(g, x);
        }
        x
    }

    pub(crate) fn head<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        self.head.forward(g, x)
    }

    pub(crate) fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let mut h = self.stem(g, x);
        for k in 1..=4 {
            h = self.stage(g, k, h);
        }
        self.head(g, h)
    }
}
