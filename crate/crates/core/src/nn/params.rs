use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::SeededRng;
use crate::tensor::{Element, Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Classifier => "classifier",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Whether the optimizer applies weight decay to this tensor.
    pub decay: bool,
}

/// Owns every trainable tensor of a network, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight drawn from N(0, 2/fan_in).
    pub fn add_he(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        group: ParamGroup,
        decay: bool,
        rng: &mut SeededRng,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let draws: Tensor<f64> = rng.normal_tensor(shape);
        let value = Tensor::from_f64(shape, &draws.data().iter().map(|v| v * std).collect::<Vec<_>>())
            .expect("valid shape");
        self.add(name, value, group, decay)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup, decay: bool) -> ParamId {
        self.add(name, Tensor::zeros(shape), group, decay)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every tensor on `g`. Parameters for which `frozen` returns
    /// true enter as constants and never receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, frozen: impl Fn(ParamGroup) -> bool) -> Result<Bindings> {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if frozen(p.group) {
                    g.constant(p.value.clone())
                } else {
                    g.param(i, p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bindings(vars))
    }

    /// SHA-256 over names and little-endian value bytes of one group.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Central-difference check of `loss` with respect to every parameter of
/// `store`. Coordinates are indexed in store order, parameter by parameter.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    eps: f64,
    loss: F,
) -> Result<crate::tensor::GradCheckReport, super::NnError>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>, &Bindings) -> Result<Var, super::NnError>,
{
    use crate::tensor::{grad_compare, GradCheckReport};
    let wrap = |e| super::NnError::layer("grad_check", e);
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false).map_err(wrap)?;
    let l = loss(store, &mut g, &b)?;
    let grads = g.backward(l).map_err(wrap)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64, super::NnError> {
        let mut g = Graph::inference();
        let b = s.bind(&mut g, |_| false).map_err(wrap)?;
        let l = loss(s, &mut g, &b)?;
        Ok(g.value(l).item())
    };
    let f0 = eval(store)?;
    let mut report = GradCheckReport::new();
    let mut flat = 0;
    for (id, p) in store.iter() {
        let analytic = grads.param(id.0).expect("bound parameter");
        for i in 0..p.value.len() {
            let original = p.value.data()[i];
            let mut work = store.clone();
            work.get_mut(id).value.data_mut()[i] = original + eps;
            let fp = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = original - eps;
            let fm = eval(&work)?;
            report.record(flat, grad_compare(analytic.data()[i], f0, fp, fm, eps));
            flat += 1;
        }
    }
    Ok(report)
}
