use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseArray, Mlp, MlpSpec, Scalar, TensorPack};
use crate::error::{config, shape, Result};

/// Network shape of a flow-map policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyArch {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub max_frequency: f64,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            time_features: 16,
            max_frequency: 8.0,
        }
    }
}

/// Average-velocity network `u_{r,t}(a | s)` and the jump
/// `X_{r,t}(a) = a + (t - r) u_{r,t}(a | s)` it induces.
///
/// The network sees `[s, a]` as raw inputs and `(r, t)` as two embedded
/// time axes.
#[derive(Clone, Debug)]
pub struct FlowMapPolicy<T: Scalar = f32> {
    net: Mlp<T>,
    state_dim: usize,
    action_dim: usize,
}

impl<T: Scalar> FlowMapPolicy<T> {
    pub fn spec_for(state_dim: usize, action_dim: usize, arch: &PolicyArch) -> MlpSpec {
        MlpSpec {
            input_width: state_dim + action_dim,
            time_axes: 2,
            time_features: arch.time_features,
            max_frequency: arch.max_frequency,
            hidden: arch.hidden.clone(),
            output_width: action_dim,
            layer_norm: None,
        }
    }

    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        arch: &PolicyArch,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::new(Self::spec_for(state_dim, action_dim, arch), rng)?;
        Self::from_net(net, state_dim)
    }

    pub fn from_net(net: Mlp<T>, state_dim: usize) -> Result<Self> {
        let spec = net.spec();
        if spec.time_axes != 2
            || spec.input_width < state_dim
            || spec.output_width + state_dim != spec.input_width
        {
            return config("flow-map network must map [s, a] and (r, t) to an action-sized output");
        }
        if spec.layer_norm.is_some() {
            return config("flow-map network cannot use LayerNorm (time derivatives are needed)");
        }
        let action_dim = spec.output_width;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    /// Single-layer policy with `u_{r,t}(a | s) = W a + b`, independent of
    /// state and time. `w` is `d x d` row-major.
    pub fn affine(w: &[f64], b: &[f64], state_dim: usize) -> Result<Self> {
        let d = b.len();
        if w.len() != d * d {
            return shape(format!("affine velocity needs a {d}x{d} matrix"));
        }
        let arch = PolicyArch {
            hidden: vec![],
            time_features: 2,
            max_frequency: 1.0,
        };
        let mut net = Mlp::zeros(Self::spec_for(state_dim, d, &arch))?;
        let width = net.spec().embedded_width();
        let mut full = vec![T::ZERO; d * width];
        for i in 0..d {
            for j in 0..d {
                full[i * width + state_dim + j] = T::of(w[i * d + j]);
            }
        }
        let bias: Vec<T> = b.iter().map(|&v| T::of(v)).collect();
        net.set_layer(0, &full, &bias)?;
        Self::from_net(net, state_dim)
    }

    pub fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn cast<U: Scalar>(&self) -> FlowMapPolicy<U> {
        FlowMapPolicy {
            net: self.net.cast(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    pub fn export(&self, prefix: &str, pack: &mut TensorPack) -> Result<()> {
        self.net.export(prefix, pack)
    }

    pub fn import(&mut self, prefix: &str, pack: &TensorPack) -> Result<()> {
        self.net.import(prefix, pack)
    }

    pub(crate) fn inputs(
        &self,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
    ) -> Result<DenseArray<T>> {
        states.ensure_shape(states.rows(), self.state_dim, "states")?;
        actions.ensure_shape(states.rows(), self.action_dim, "actions")?;
        DenseArray::hstack(&[states, actions])
    }

    pub(crate) fn times(r: &[T], t: &[T]) -> Result<DenseArray<T>> {
        if r.len() != t.len() {
            return shape(format!("{} r values vs {} t values", r.len(), t.len()));
        }
        let data = r.iter().zip(t).flat_map(|(&a, &b)| [a, b]).collect();
        DenseArray::matrix(r.len(), 2, data)
    }

    /// `u_{r,t}(a | s)` for every row.
    pub fn velocity(
        &self,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
        r: &[T],
        t: &[T],
    ) -> Result<DenseArray<T>> {
        let u = self
            .net
            .forward(&self.inputs(states, actions)?, &Self::times(r, t)?)?;
        u.check_finite("policy velocity")?;
        Ok(u)
    }

    /// `X_{r,t}(a | s)` for every row.
    pub fn jump(
        &self,
        states: &DenseArray<T>,
        a_r: &DenseArray<T>,
        r: &[T],
        t: &[T],
    ) -> Result<DenseArray<T>> {
        let u = self.velocity(states, a_r, r, t)?;
        Ok(jump_with(a_r, &u, r, t))
    }

    /// One network evaluation: `X_{0,1}(a0 | s)`.
    pub fn sample_one_step(
        &self,
        states: &DenseArray<T>,
        a0: &DenseArray<T>,
    ) -> Result<DenseArray<T>> {
        let n = states.rows();
        self.jump(states, a0, &vec![T::ZERO; n], &vec![T::ONE; n])
    }

    /// Explicit Euler on the diagonal velocity `u_{t,t}`.
    pub fn sample_euler(
        &self,
        states: &DenseArray<T>,
        a0: &DenseArray<T>,
        steps: usize,
    ) -> Result<DenseArray<T>> {
        if steps == 0 {
            return config("Euler sampler needs at least one step");
        }
        let n = states.rows();
        let h = T::of(1.0 / steps as f64);
        let mut a = a0.clone();
        for k in 0..steps {
            let tk = vec![T::of(k as f64 / steps as f64); n];
            let u = self.velocity(states, &a, &tk, &tk)?;
            for (x, v) in a.as_mut_slice().iter_mut().zip(u.as_slice()) {
                *x += h * *v;
            }
        }
        Ok(a)
    }
}

/// `a + (t - r) u` row-wise.
pub(crate) fn jump_with<T: Scalar>(
    a: &DenseArray<T>,
    u: &DenseArray<T>,
    r: &[T],
    t: &[T],
) -> DenseArray<T> {
    let mut out = a.clone();
    let d = a.cols();
    for i in 0..a.rows() {
        let h = t[i] - r[i];
        for (x, v) in out
            .row_mut(i)
            .iter_mut()
            .zip(&u.as_slice()[i * d..(i + 1) * d])
        {
            *x += h * *v;
        }
    }
    out
}

/// `(1 - t) a0 + t a1`.
pub fn interpolate<T: Scalar>(a0: &[T], a1: &[T], t: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&t) {
        return crate::error::domain(format!("interpolation time {t} outside [0, 1]"));
    }
    if a0.len() != a1.len() {
        return shape(format!("{} vs {} action components", a0.len(), a1.len()));
    }
    if t == 0.0 {
        return Ok(a0.to_vec());
    }
    if t == 1.0 {
        return Ok(a1.to_vec());
    }
    let tt = T::of(t);
    Ok(a0
        .iter()
        .zip(a1)
        .map(|(&x, &y)| (T::ONE - tt) * x + tt * y)
        .collect())
}

/// Row-wise interpolation with a per-row time.
pub(crate) fn interpolate_rows<T: Scalar>(
    a0: &DenseArray<T>,
    a1: &DenseArray<T>,
    t: &[T],
) -> DenseArray<T> {
    let mut out = a0.clone();
    for i in 0..a0.rows() {
        let ti = t[i];
        for (x, &y) in out.row_mut(i).iter_mut().zip(a1.row(i)) {
            *x = (T::ONE - ti) * *x + ti * y;
        }
    }
    out
}

/// Standard-normal batch.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> DenseArray<T> {
    let data = (0..rows * cols)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    DenseArray::matrix(rows, cols, data).expect("consistent shape")
}
