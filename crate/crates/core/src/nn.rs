//! Named parameters, forward sessions, and the Conv / BatchNorm / ReLU
//! building blocks every network module is assembled from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Graph, NormStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type ParamId = usize;

/// BatchNorm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in `running = m*running + (1-m)*batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only convolution weights receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

/// Ordered name → tensor map holding every weight and buffer of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, kind, value, grad: None });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Replaces a value, keeping the shape fixed.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: p.name.clone(),
                found: value.shape().to_vec(),
                expected: p.value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn add_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id];
        match &mut p.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => p.grad = Some(grad.to_vec()),
        }
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            let m = T::from_f64_lossy(u.momentum);
            let keep = T::one() - m;
            for (id, batch) in [(u.running_mean, u.stats.mean), (u.running_var, u.stats.var)] {
                let old = self.params[id].value.data();
                let new: Vec<T> = old.iter().zip(&batch).map(|(&r, &b)| m * r + keep * b).collect();
                self.params[id].value = Tensor::from_parts(self.params[id].value.shape().to_vec(), new);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast(), grad: None })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Creates parameters under a dotted name prefix with seeded initialization.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn child(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.qualify(name);
        ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let full = self.qualify(name);
        self.store.add(full, kind, value)
    }

    /// Kaiming normal with fan-out scaling: `std = sqrt(2 / (out * kh * kw))`.
    pub fn kaiming_fan_out(&mut self, name: &str, shape: [usize; 4]) -> Result<ParamId> {
        let fan_out = (shape[0] * shape[2] * shape[3]).max(1) as f64;
        let value = Tensor::rand_normal(shape.to_vec(), 0.0, (2.0 / fan_out).sqrt(), self.rng);
        self.add(name, ParamKind::ConvWeight, value)
    }
}

/// Seeds the parameter RNG used by model construction.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates recorded.
    Train,
    /// Running statistics.
    Eval,
}

/// Pending running-statistic update produced by a training forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats<T>,
}

/// One forward pass: a graph, the weights it reads, and the BN mode.
pub struct Session<'a, T> {
    pub graph: &'a Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    leaves: RefCell<HashMap<ParamId, Var<T>>>,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamStore<T>, mode: Mode) -> Self {
        Session { graph, params, mode, leaves: RefCell::new(HashMap::new()), updates: RefCell::new(Vec::new()) }
    }

    /// Graph leaf for a parameter, created once per session.
    pub fn param(&self, id: ParamId) -> Var<T> {
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| {
                let p = self.params.get(id);
                self.graph.leaf(p.value.clone(), p.kind.trainable())
            })
            .clone()
    }

    /// Gradients accumulated on every parameter leaf used by this session.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> =
            self.leaves.borrow().iter().filter_map(|(&id, v)| self.graph.grad(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }
}

/// Convolution weights and geometry.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(format!("conv `{name}`: channels, kernel and stride must be positive")));
        }
        let mut b = b.child(name);
        let weight = b.kaiming_fan_out("weight", [out_channels, in_channels, kernel, kernel])?;
        let bias = if bias { Some(b.add("bias", ParamKind::Bias, Tensor::zeros(vec![out_channels]))?) } else { None };
        Ok(Conv2d { weight, bias, in_channels, out_channels, kernel, stride, padding })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = s.param(self.weight);
        let b = self.bias.map(|id| s.param(id));
        s.graph.conv2d(x, &w, b.as_ref(), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.child(name);
        Ok(BatchNorm2d {
            gamma: b.add("weight", ParamKind::NormScale, Tensor::full(vec![channels], T::one()))?,
            beta: b.add("bias", ParamKind::NormShift, Tensor::zeros(vec![channels]))?,
            running_mean: b.add("running_mean", ParamKind::RunningMean, Tensor::zeros(vec![channels]))?,
            running_var: b.add("running_var", ParamKind::RunningVar, Tensor::full(vec![channels], T::one()))?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::from_f64_lossy(self.eps);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, &gamma, &beta, NormStats::Batch, eps)?;
                if let Some(stats) = stats {
                    s.updates.borrow_mut().push(StatUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.params.value(self.running_mean);
                let var = s.params.value(self.running_var);
                let stats = NormStats::Running { mean: mean.data(), var: var.data() };
                Ok(s.graph.batch_norm(x, &gamma, &beta, stats, eps)?.0)
            }
        }
    }
}

/// Convolution (no bias) → BatchNorm → optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut b = b.child(name);
        let conv = Conv2d::new(&mut b, "conv", in_channels, out_channels, kernel, stride, kernel / 2, false)?;
        let bn = BatchNorm2d::new(&mut b, "bn", out_channels)?;
        Ok(ConvBnRelu { conv, bn, relu: true })
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, &y)?;
        if self.relu {
            s.graph.relu(&y)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", ParamKind::Bias, Tensor::zeros(vec![2])).unwrap();
        assert!(store.add("a", ParamKind::Bias, Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn builder_prefixes_names() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut enc = b.child("encoder");
        ConvBnRelu::new(&mut enc, "stem", 3, 8, 3, 2).unwrap();
        assert!(store.find("encoder.stem.conv.weight").is_some());
        assert!(store.find("encoder.stem.bn.running_var").is_some());
        assert_eq!(store.parameter_count(), 8 * 3 * 9 + 8 + 8);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let bn = BatchNorm2d::new(&mut b, "bn", 1).unwrap();
        let g = Graph::no_grad();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let updates = {
            let s = Session::new(&g, &store, Mode::Train);
            bn.forward(&s, &x).unwrap();
            s.take_stat_updates()
        };
        store.apply_stat_updates(updates);
        // batch mean 2, unbiased var 2
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
