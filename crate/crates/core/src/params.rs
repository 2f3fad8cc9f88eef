//! Learnable-parameter registry and the per-forward binding onto a tape.
//!
//! A [`ParamStore`] owns the weight arrays in a fixed registration order
//! (which makes checkpoints and optimizer state unambiguous). A
//! [`Session`] clones the weights onto a fresh [`Tape`] for one forward
//! pass and collects gradients back out after `backward`.

use crate::autodiff::{c, Real, Tape, Var};
use crate::error::{Error, Result};
use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Optimizer grouping: the flow net trains on its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    Flow,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Exact zeros (final prediction layers, so residual branches start
    /// inert).
    Zeros,
    /// Uniform over `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn { fan_in: usize },
}

/// Stable handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T: Real> {
    name: String,
    group: ParamGroup,
    value: Array4<T>,
}

/// Ordered registry of every learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor under a unique dotted name. Draw order is part of
    /// the reproducibility contract: one `random` call per element for
    /// `FanIn`, none for `Zeros`.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize, usize, usize),
        group: ParamGroup,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zeros => Array4::zeros(shape),
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array4::from_shape_simple_fn(shape, || {
                    c::<T>((rng.random::<f64>() * 2.0 - 1.0) * bound)
                })
            }
        };
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(Entry { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Array4<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array4<T> {
        &mut self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total learnable scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalar count of parameters whose dotted name starts with `prefix`.
    pub fn scalar_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Top-level module names (first dotted component), in registration
    /// order without duplicates.
    pub fn module_names(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            let head = e.name.split('.').next().unwrap_or("").to_string();
            if !seen.contains(&head) {
                seen.push(head);
            }
        }
        seen
    }
}

/// Weight/bias pair for one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Register a conv layer: `FanIn` weights, zero bias. `zero_out` makes the
/// whole layer inert (both weight and bias zero).
pub fn register_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    group: ParamGroup,
    zero_out: bool,
    rng: &mut ChaCha8Rng,
) -> ConvIds {
    let init = if zero_out {
        Init::Zeros
    } else {
        Init::FanIn { fan_in: ci * k * k }
    };
    let w = store.register(format!("{name}.weight"), (co, ci, k, k), group, init, rng);
    let b = store.register(
        format!("{name}.bias"),
        (1, co, 1, 1),
        group,
        Init::Zeros,
        rng,
    );
    ConvIds { w, b }
}

/// Two-conv residual block ids.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub c1: ConvIds,
    pub c2: ConvIds,
}

pub fn register_block<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    ch: usize,
    group: ParamGroup,
    rng: &mut ChaCha8Rng,
) -> BlockIds {
    BlockIds {
        c1: register_conv(store, &format!("{name}.conv1"), ch, ch, 3, group, false, rng),
        c2: register_conv(store, &format!("{name}.conv2"), ch, ch, 3, group, false, rng),
    }
}

/// One forward pass: a tape with every store parameter bound as a leaf.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Var>,
}

impl<'s, T: Real> Session<'s, T> {
    /// Bind all parameters. `trainable = false` binds them as plain inputs
    /// so inference graphs skip backward bookkeeping.
    pub fn bind(store: &'s ParamStore<T>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.input(e.value.clone())
                }
            })
            .collect();
        Session { tape, store, vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Convolution through a registered layer.
    pub fn conv(&mut self, ids: ConvIds, x: Var, pad: usize, groups: usize) -> Result<Var> {
        self.tape
            .conv2d(x, self.var(ids.w), Some(self.var(ids.b)), pad, groups)
    }

    /// conv + leaky ReLU.
    pub fn conv_act(&mut self, ids: ConvIds, x: Var, pad: usize, groups: usize) -> Result<Var> {
        let y = self.conv(ids, x, pad, groups)?;
        Ok(self.tape.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Residual block: `x + conv2(lrelu(conv1(x)))`.
    pub fn res_block(&mut self, ids: BlockIds, x: Var) -> Result<Var> {
        let h = self.conv_act(ids.c1, x, 1, 1)?;
        let h = self.conv(ids.c2, h, 1, 1)?;
        self.tape.add(x, h)
    }

    pub fn res_blocks(&mut self, ids: &[BlockIds], mut x: Var) -> Result<Var> {
        for b in ids {
            x = self.res_block(*b, x)?;
        }
        Ok(x)
    }

    /// Collect the gradient of every parameter after `backward`; params
    /// untouched by the graph get zeros.
    pub fn param_grads(&self) -> Vec<Array4<T>> {
        self.store
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| match self.tape.grad(self.vars[i]) {
                Some(g) => g.clone(),
                None => Array4::zeros(e.value.dim()),
            })
            .collect()
    }
}

/// Validate that a gradient set is finite; index of the offender otherwise.
pub fn check_finite<T: Real>(grads: &[Array4<T>]) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence(format!(
                "non-finite gradient in parameter {i}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_is_deterministic() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let ia = register_conv(&mut a, "m.c", 4, 2, 3, ParamGroup::Main, false, &mut r1);
        let ib = register_conv(&mut b, "m.c", 4, 2, 3, ParamGroup::Main, false, &mut r2);
        assert_eq!(a.value(ia.w), b.value(ib.w));
        assert_eq!(a.scalar_count(), 4 * 2 * 9 + 4);
        assert_eq!(a.scalar_count_prefix("m."), a.scalar_count());
        assert_eq!(a.scalar_count_prefix("x."), 0);
    }

    #[test]
    fn session_binds_and_collects_grads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = register_conv(&mut store, "m.c", 2, 2, 3, ParamGroup::Main, false, &mut rng);
        let mut sess = Session::bind(&store, true);
        let x = sess.tape.input(Array4::from_elem((1, 2, 4, 4), 0.5));
        let y = sess.conv(ids, x, 1, 1).unwrap();
        let t = sess.tape.zeros_like(y);
        let l = sess.tape.charbonnier(y, t, 1e-6).unwrap();
        sess.tape.backward(l);
        let grads = sess.param_grads();
        assert_eq!(grads.len(), 2);
        assert!(grads[0].iter().any(|&v| v != 0.0), "weight grad nonzero");
        assert!(grads[1].iter().any(|&v| v != 0.0), "bias grad nonzero");
        assert!(check_finite(&grads).is_ok());
    }
}
