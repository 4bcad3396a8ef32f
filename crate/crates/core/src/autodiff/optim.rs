use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Replaces a value in place, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Puts every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        Bindings {
            vars: self.values.iter().map(|v| graph.param(v.clone())).collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zeros where none reached it.
    pub fn grads(&self, graph: &Graph) -> Vec<Array> {
        self.vars
            .iter()
            .map(|&v| {
                graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(graph.shape(v)))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.values.iter().map(|a| Array::zeros(a.shape())).collect(),
            v: params.values.iter().map(|a| Array::zeros(a.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.m, &self.v)
    }

    /// Restores optimiser state saved by [`Adam::moments`] and [`Adam::steps_taken`].
    pub fn restore(&mut self, step: u64, m: Vec<Array>, v: Vec<Array>) -> Result<()> {
        let same = |a: &[Array], b: &[Array]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update at learning rate `lr`.
    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &[Array], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array]) -> Result<()> {
        self.step_with_lr(params, grads, self.config.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut ps = ParamStore::new();
        ps.add("w", Array::from_vec(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &ps);
        let g = vec![Array::from_vec(vec![3.0, -0.01, 0.0])];
        adam.step(&mut ps, &g).unwrap();
        let w = ps.get(ParamId(0)).data();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] - (-1.9)).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Array::from_vec(vec![3.0, -4.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &ps);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = ps.bind(&mut g);
            let x = b.var(id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss).unwrap();
            adam.step(&mut ps, &b.grads(&g)).unwrap();
        }
        assert!(ps.get(id).max_abs() < 1e-3);
    }

    #[test]
    fn restore_rejects_wrong_shapes() {
        let mut ps = ParamStore::new();
        ps.add("w", Array::zeros(&[2]));
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        assert!(adam
            .restore(3, vec![Array::zeros(&[3])], vec![Array::zeros(&[2])])
            .is_err());
    }
}
