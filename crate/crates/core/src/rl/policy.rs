use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mdp::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::measures::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    RbfSoftmax,
    MlpGaussian,
}

/// Layout of `theta` for each family.
///
/// * `RbfSoftmax`: `theta[c * actions + a]` is the weight of feature `c` in
///   the logit of action `a`. Features are Gaussian bumps on `centers`,
///   normalised to sum to one.
/// * `MlpGaussian`: per layer, a row-major weight matrix followed by its
///   bias; tanh on hidden layers, linear output, fixed `stddev`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyShape {
    RbfSoftmax {
        centers: Vec<Point>,
        bandwidth: f64,
        actions: usize,
    },
    MlpGaussian {
        input: usize,
        hidden: Vec<usize>,
        output: usize,
        stddev: f64,
    },
}

impl PolicyShape {
    pub fn family(&self) -> PolicyFamily {
        match self {
            PolicyShape::RbfSoftmax { .. } => PolicyFamily::RbfSoftmax,
            PolicyShape::MlpGaussian { .. } => PolicyFamily::MlpGaussian,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PolicyShape::RbfSoftmax {
                centers, actions, ..
            } => centers.len() * actions,
            PolicyShape::MlpGaussian {
                input,
                hidden,
                output,
                ..
            } => layer_sizes(*input, hidden, *output)
                .windows(2)
                .map(|w| (w[0] + 1) * w[1])
                .sum(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            PolicyShape::RbfSoftmax { actions, .. } => ActionSpace::Discrete(*actions),
            PolicyShape::MlpGaussian { output, .. } => ActionSpace::Continuous(*output),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        match self {
            PolicyShape::RbfSoftmax {
                centers,
                bandwidth,
                actions,
            } => {
                if centers.is_empty() {
                    return Err(Error::Empty("rbf centers"));
                }
                if centers.iter().any(|c| c.dim() != centers[0].dim()) {
                    return bad("centers", "mixed dimensions");
                }
                if !(*bandwidth > 0.0 && bandwidth.is_finite()) {
                    return bad("bandwidth", "must be positive");
                }
                if *actions == 0 {
                    return bad("actions", "need at least one action");
                }
            }
            PolicyShape::MlpGaussian {
                input,
                hidden,
                output,
                stddev,
            } => {
                if *input == 0 || *output == 0 || hidden.contains(&0) {
                    return bad("hidden", "layer widths must be positive");
                }
                if !(*stddev > 0.0 && stddev.is_finite()) {
                    return bad("stddev", "must be positive");
                }
            }
        }
        Ok(())
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    family: PolicyFamily,
    shape: PolicyShape,
    theta: Vec<f64>,
}

/// Policy parameters; serialises as `{family, shape, theta}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct PolicyParams {
    shape: PolicyShape,
    theta: Vec<f64>,
}

impl TryFrom<RawParams> for PolicyParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        if raw.family != raw.shape.family() {
            return Err(Error::InvalidParameter {
                name: "family",
                reason: format!("{:?} does not match the shape", raw.family),
            });
        }
        Self::new(raw.shape, raw.theta)
    }
}

impl From<PolicyParams> for RawParams {
    fn from(p: PolicyParams) -> Self {
        RawParams {
            family: p.shape.family(),
            shape: p.shape,
            theta: p.theta,
        }
    }
}

/// Action distribution at one state.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Categorical(Vec<f64>),
    DiagGaussian { mean: Vec<f64>, stddev: f64 },
}

impl ActionDistribution {
    pub fn sample(&self, rng: &mut dyn RngCore) -> Action {
        self.sample_with(rng, false)
    }

    /// As [`sample`](Self::sample); with `mirror_x` the Gaussian noise on
    /// the first coordinate is negated, so a reflected policy driven by the
    /// same generator produces the reflected action.
    pub fn sample_with(&self, rng: &mut dyn RngCore, mirror_x: bool) -> Action {
        match self {
            ActionDistribution::Categorical(p) => {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                for (a, &w) in p.iter().enumerate() {
                    acc += w;
                    if r < acc {
                        return Action::Discrete(a);
                    }
                }
                Action::Discrete(p.len() - 1)
            }
            ActionDistribution::DiagGaussian { mean, stddev } => Action::Continuous(
                mean.iter()
                    .enumerate()
                    .map(|(k, m)| {
                        let z: f64 = StandardNormal.sample(rng);
                        let z = if mirror_x && k == 0 { -z } else { z };
                        m + stddev * z
                    })
                    .collect(),
            ),
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (ActionDistribution::Categorical(p), Action::Discrete(a)) => match p.get(*a) {
                Some(&w) if w > 0.0 => Ok(w.ln()),
                _ => Err(Error::InvalidAction(format!("{a}"))),
            },
            (ActionDistribution::DiagGaussian { mean, stddev }, Action::Continuous(x)) => {
                if x.len() != mean.len() {
                    return Err(Error::DimensionMismatch {
                        expected: mean.len(),
                        got: x.len(),
                    });
                }
                let norm = (stddev * (2.0 * std::f64::consts::PI).sqrt()).ln();
                Ok(x.iter()
                    .zip(mean)
                    .map(|(a, m)| -0.5 * ((a - m) / stddev).powi(2) - norm)
                    .sum())
            }
            (_, other) => Err(Error::InvalidAction(format!("{other:?}"))),
        }
    }
}

impl PolicyParams {
    pub fn new(shape: PolicyShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(Self { shape, theta })
    }

    /// All-zero parameters: uniform softmax, or an MLP whose mean is 0.
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        let n = shape.param_count();
        Self::new(shape, vec![0.0; n])
    }

    /// Hidden layers uniform in `+-1/sqrt(fan_in)`, output layer zero, so
    /// the initial mean action is 0 everywhere. Softmax policies start at 0.
    pub fn init<R: Rng + ?Sized>(shape: PolicyShape, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        if let PolicyShape::MlpGaussian {
            input,
            hidden,
            output,
            ..
        } = &p.shape
        {
            let sizes = layer_sizes(*input, hidden, *output);
            let mut k = 0;
            for (l, w) in sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let n = (fan_in + 1) * fan_out;
                if l + 2 < sizes.len() {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for t in &mut p.theta[k..k + fan_in * fan_out] {
                        *t = rng.random_range(-bound..bound);
                    }
                }
                k += n;
            }
        }
        Ok(p)
    }

    pub fn family(&self) -> PolicyFamily {
        self.shape.family()
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Replace the parameters, keeping the shape.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.shape.clone(), theta)
    }

    /// `theta += scale * direction`; fails if anything becomes non-finite.
    pub fn step(&mut self, direction: &[f64], scale: f64) -> Result<()> {
        if direction.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                got: direction.len(),
            });
        }
        for (t, d) in self.theta.iter_mut().zip(direction) {
            *t += scale * d;
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(())
    }

    pub fn distribution(&self, state: &Point) -> Result<ActionDistribution> {
        match &self.shape {
            PolicyShape::RbfSoftmax { actions, .. } => {
                let phi = self.features(state)?;
                Ok(ActionDistribution::Categorical(softmax_logits(
                    &phi, &self.theta, *actions,
                )))
            }
            PolicyShape::MlpGaussian { stddev, .. } => Ok(ActionDistribution::DiagGaussian {
                mean: self.forward(state)?.pop().unwrap_or_default(),
                stddev: *stddev,
            }),
        }
    }

    pub fn log_prob(&self, state: &Point, action: &Action) -> Result<f64> {
        self.distribution(state)?.log_prob(action)
    }

    /// `grad_theta log pi(action | state)`.
    pub fn grad_log_prob(&self, state: &Point, action: &Action) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.theta.len()];
        self.accumulate_grad_log_prob(state, action, &mut g)?;
        Ok(g)
    }

    /// Adds `grad_theta log pi(action | state)` into `out`.
    pub fn accumulate_grad_log_prob(
        &self,
        state: &Point,
        action: &Action,
        out: &mut [f64],
    ) -> Result<()> {
        match (&self.shape, action) {
            (PolicyShape::RbfSoftmax { actions, .. }, Action::Discrete(a)) => {
                if a >= actions {
                    return Err(Error::InvalidAction(format!("{a}")));
                }
                let phi = self.features(state)?;
                let p = softmax_logits(&phi, &self.theta, *actions);
                for (c, f) in phi.iter().enumerate() {
                    if *f == 0.0 {
                        continue;
                    }
                    let row = &mut out[c * actions..(c + 1) * actions];
                    for (b, (o, pb)) in row.iter_mut().zip(&p).enumerate() {
                        let ind = if b == *a { 1.0 } else { 0.0 };
                        *o += f * (ind - pb);
                    }
                }
                Ok(())
            }
            (
                PolicyShape::MlpGaussian {
                    input,
                    hidden,
                    output,
                    stddev,
                },
                Action::Continuous(x),
            ) => {
                if x.len() != *output {
                    return Err(Error::DimensionMismatch {
                        expected: *output,
                        got: x.len(),
                    });
                }
                let acts = self.forward(state)?;
                let sizes = layer_sizes(*input, hidden, *output);
                let mean = &acts[acts.len() - 1];
                let mut delta: Vec<f64> = x
                    .iter()
                    .zip(mean)
                    .map(|(a, m)| (a - m) / (stddev * stddev))
                    .collect();
                let offsets = layer_offsets(&sizes);
                for l in (0..sizes.len() - 1).rev() {
                    let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                    let w_at = offsets[l];
                    let b_at = w_at + fan_in * fan_out;
                    let prev = &acts[l];
                    for o in 0..fan_out {
                        for i in 0..fan_in {
                            out[w_at + o * fan_in + i] += delta[o] * prev[i];
                        }
                        out[b_at + o] += delta[o];
                    }
                    if l > 0 {
                        // back through tanh of the previous layer
                        let mut next = vec![0.0; fan_in];
                        for (i, n) in next.iter_mut().enumerate() {
                            let s: f64 = (0..fan_out)
                                .map(|o| self.theta[w_at + o * fan_in + i] * delta[o])
                                .sum();
                            *n = s * (1.0 - prev[i] * prev[i]);
                        }
                        delta = next;
                    }
                }
                Ok(())
            }
            (_, other) => Err(Error::InvalidAction(format!("{other:?}"))),
        }
    }

    /// Reflect an MLP policy through `x -> -x` on the first input and output
    /// coordinate: the mirrored policy's mean at `s` is the reflection of the
    /// original mean at the reflected `s`.
    pub fn mirror_x(&self) -> Result<Self> {
        let PolicyShape::MlpGaussian {
            input,
            hidden,
            output,
            ..
        } = &self.shape
        else {
            return Err(Error::InvalidParameter {
                name: "family",
                reason: "mirroring is defined for mlp_gaussian only".into(),
            });
        };
        let sizes = layer_sizes(*input, hidden, *output);
        let offsets = layer_offsets(&sizes);
        let mut theta = self.theta.clone();
        let first_in = sizes[0];
        for o in 0..sizes[1] {
            theta[o * first_in] = -theta[o * first_in];
        }
        let last = sizes.len() - 2;
        let (fan_in, fan_out) = (sizes[last], sizes[last + 1]);
        let w_at = offsets[last];
        for i in 0..fan_in {
            theta[w_at + i] = -theta[w_at + i];
        }
        theta[w_at + fan_in * fan_out] = -theta[w_at + fan_in * fan_out];
        self.with_theta(theta)
    }

    fn features(&self, state: &Point) -> Result<Vec<f64>> {
        let PolicyShape::RbfSoftmax {
            centers, bandwidth, ..
        } = &self.shape
        else {
            unreachable!("features of a non-rbf policy");
        };
        if state.dim() != centers[0].dim() {
            return Err(Error::DimensionMismatch {
                expected: centers[0].dim(),
                got: state.dim(),
            });
        }
        let scale = 2.0 * bandwidth * bandwidth;
        let mut phi: Vec<f64> = centers
            .iter()
            .map(|c| (-state.sq_dist(c) / scale).exp())
            .collect();
        let total: f64 = phi.iter().sum();
        if !(total > 0.0) {
            return Err(Error::IncompatibleState(
                "state too far from every rbf centre".into(),
            ));
        }
        for f in &mut phi {
            *f /= total;
        }
        Ok(phi)
    }

    /// Activations of every layer, input first and mean last.
    fn forward(&self, state: &Point) -> Result<Vec<Vec<f64>>> {
        let PolicyShape::MlpGaussian {
            input,
            hidden,
            output,
            ..
        } = &self.shape
        else {
            unreachable!("forward pass of a non-mlp policy");
        };
        if state.dim() != *input {
            return Err(Error::DimensionMismatch {
                expected: *input,
                got: state.dim(),
            });
        }
        let sizes = layer_sizes(*input, hidden, *output);
        let offsets = layer_offsets(&sizes);
        let mut acts = vec![state.coords().to_vec()];
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w = &self.theta[offsets[l]..offsets[l] + fan_in * fan_out];
            let b = &self.theta[offsets[l] + fan_in * fan_out..offsets[l + 1]];
            let prev = &acts[l];
            let hidden_layer = l + 2 < sizes.len();
            let next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let z: f64 = b[o]
                        + w[o * fan_in..(o + 1) * fan_in]
                            .iter()
                            .zip(prev)
                            .map(|(a, x)| a * x)
                            .sum::<f64>();
                    if hidden_layer {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(next);
        }
        Ok(acts)
    }
}

fn layer_offsets(sizes: &[usize]) -> Vec<usize> {
    let mut offsets = vec![0];
    for w in sizes.windows(2) {
        let last = *offsets.last().unwrap_or(&0);
        offsets.push(last + (w[0] + 1) * w[1]);
    }
    offsets
}

fn softmax_logits(phi: &[f64], theta: &[f64], actions: usize) -> Vec<f64> {
    let mut logits = vec![0.0; actions];
    for (c, f) in phi.iter().enumerate() {
        if *f == 0.0 {
            continue;
        }
        for (l, t) in logits.iter_mut().zip(&theta[c * actions..(c + 1) * actions]) {
            *l += f * t;
        }
    }
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in &mut logits {
        *l = (*l - top).exp();
        total += *l;
    }
    for l in &mut logits {
        *l /= total;
    }
    logits
}

/// RBF softmax with centres on every cell of a `rows x cols` grid, cell
/// `(r, c)` at coordinates `(r, c)`.
pub fn grid_rbf_shape(rows: usize, cols: usize, bandwidth: f64, actions: usize) -> PolicyShape {
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            centers.push(Point::new(vec![r as f64, c as f64]).expect("finite grid coordinates"));
        }
    }
    PolicyShape::RbfSoftmax {
        centers,
        bandwidth,
        actions,
    }
}
