//! Named parameters, batch-norm buffers and per-step binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, BnMode, Conv2dOpts, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F> {
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±gain·sqrt(3 / fan_in)`.
    Uniform { fan_in: usize, gain: f64 },
}

/// FNV-1a; stable across platforms and releases, used to derive per-name seeds.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// All parameters and batch-norm running statistics of a model, keyed by
/// dotted names. Iteration order is lexicographic and therefore stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Parameter<F>>,
    buffers: BTreeMap<String, BatchNormState<F>>,
    seed: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new(), seed }
    }

    /// Adds a parameter; its initial values depend only on the store seed
    /// and the name, so adding modules never perturbs existing ones.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Uniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
            }
        };
        let tensor = Tensor::new(shape, data)?;
        self.params.insert(name.to_string(), Parameter { tensor, trainable: true });
        Ok(())
    }

    /// Convolution weight `{prefix}.weight` and optional `{prefix}.bias`.
    pub fn add_conv(
        &mut self,
        prefix: &str,
        cout: usize,
        cin_per_group: usize,
        kernel: usize,
        bias: bool,
        init: Init,
    ) -> Result<()> {
        let fan_in = cin_per_group * kernel * kernel;
        let w_init = match init {
            Init::Uniform { gain, .. } => Init::Uniform { fan_in, gain },
            other => other,
        };
        self.add(&format!("{prefix}.weight"), &[cout, cin_per_group, kernel, kernel], w_init)?;
        if bias {
            self.add(&format!("{prefix}.bias"), &[cout], Init::Zeros)?;
        }
        Ok(())
    }

    /// Batch-norm affine `{prefix}.gamma`/`{prefix}.beta` plus running buffers.
    pub fn add_bn(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.add(&format!("{prefix}.gamma"), &[channels], Init::Ones)?;
        self.add(&format!("{prefix}.beta"), &[channels], Init::Zeros)?;
        self.buffers.insert(prefix.to_string(), BatchNormState::new(channels));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn buffers(&self) -> &BTreeMap<String, BatchNormState<F>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, BatchNormState<F>> {
        &mut self.buffers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of scalar values over parameters with `trainable == true`.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Count of scalars in parameters whose names start with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), Parameter { tensor: p.tensor.cast(), trainable: p.trainable }))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, b)| {
                    let conv = |v: &Vec<F>| v.iter().map(|x| G::lit(x.f64())).collect();
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: conv(&b.running_mean),
                            running_var: conv(&b.running_var),
                            momentum: b.momentum,
                            eps: b.eps,
                        },
                    )
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Starts a forward pass: parameters are bound to the tape lazily on first use.
    pub fn bind<'t, 'm>(&'m mut self, tape: &'t Tape<F>, mode: BnMode, update_stats: bool) -> Ctx<'t, 'm, F> {
        Ctx { tape, params: &self.params, buffers: &mut self.buffers, vars: HashMap::new(), mode, update_stats }
    }
}

/// A forward pass in progress: the tape plus the model's parameters.
pub struct Ctx<'t, 'm, F: Scalar> {
    pub tape: &'t Tape<F>,
    params: &'m BTreeMap<String, Parameter<F>>,
    buffers: &'m mut BTreeMap<String, BatchNormState<F>>,
    vars: HashMap<String, Var<'t, F>>,
    pub mode: BnMode,
    pub update_stats: bool,
}

impl<'t, F: Scalar> Ctx<'t, '_, F> {
    /// Tape variable for a parameter. Frozen parameters enter the tape as
    /// constants, so no gradient is ever computed for them.
    pub fn param(&mut self, name: &str) -> Result<Var<'t, F>> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.tape.leaf(p.tensor.clone(), p.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` in place of the stored parameter `name` for this pass.
    pub fn substitute(&mut self, name: &str, var: Var<'t, F>) -> Result<()> {
        let p = self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.tensor.shape() != var.shape() {
            return Err(Error::Shape(format!("substitute `{name}`: {:?} vs {:?}", p.tensor.shape(), var.shape())));
        }
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn conv(&mut self, prefix: &str, x: Var<'t, F>, opts: Conv2dOpts) -> Result<Var<'t, F>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.has(&bias_name) { Some(self.param(&bias_name)?) } else { None };
        x.conv2d(w, b, opts)
    }

    pub fn bn(&mut self, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let state = self
            .buffers
            .get_mut(prefix)
            .ok_or_else(|| Error::UnknownParameter(format!("{prefix} (batch-norm buffers)")))?;
        x.batchnorm2d(gamma, beta, state, self.mode, self.update_stats)
    }

    /// Parameters touched so far in this pass.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var<'t, F>)> {
        self.vars.iter()
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g)))
            .collect()
    }
}
