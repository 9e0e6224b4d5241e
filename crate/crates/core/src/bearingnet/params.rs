use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    /// Name prefix before the first dot, e.g. `backbone` or `attn`.
    pub fn submodule(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

/// Positions of each parameter in [`ModelParams::entries`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub backbone: Vec<(usize, usize)>,
    pub nl_theta: usize,
    pub nl_phi: usize,
    pub nl_g: usize,
    pub nl_z: usize,
    pub centers: usize,
    pub rce: Vec<(usize, usize)>,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub pos_head: Vec<(usize, usize)>,
    pub heading_head: Vec<(usize, usize)>,
}

/// Every learnable tensor in a fixed order. Linear weights are stored as
/// `[in, out]` so layers compute `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub entries: Vec<Param>,
    pub layout: Layout,
}

/// Names and shapes of all parameters for `cfg`, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = 3;
    for (i, &w) in cfg.backbone_widths.iter().enumerate() {
        out.push((format!("backbone.{i}.weight"), vec![w, c_in, cfg.backbone_kernel, cfg.backbone_kernel]));
        out.push((format!("backbone.{i}.bias"), vec![w]));
        c_in = w;
    }
    let (d, h) = (cfg.d, cfg.d / 2);
    out.push(("nonlocal.theta".into(), vec![d, h]));
    out.push(("nonlocal.phi".into(), vec![d, h]));
    out.push(("nonlocal.g".into(), vec![d, h]));
    out.push(("nonlocal.z".into(), vec![h, d]));
    out.push(("gluf.centers".into(), vec![cfg.k, d]));
    let mlp = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, dims: &[usize]| {
        for (i, w) in dims.windows(2).enumerate() {
            out.push((format!("{prefix}.{i}.weight"), vec![w[0], w[1]]));
            out.push((format!("{prefix}.{i}.bias"), vec![w[1]]));
        }
    };
    mlp(&mut out, "rce", &cfg.rce_dims);
    let kd = cfg.kd();
    out.push(("attn.query".into(), vec![kd, kd]));
    out.push(("attn.key".into(), vec![kd, kd]));
    out.push(("attn.value".into(), vec![kd, kd]));
    mlp(&mut out, "pos_head", &cfg.head_dims);
    mlp(&mut out, "heading_head", &cfg.head_dims);
    out
}

fn layout_for(cfg: &ModelConfig) -> Layout {
    let next = std::cell::Cell::new(0);
    let take = || {
        let v = next.get();
        next.set(v + 1);
        v
    };
    let pairs = |n: usize| (0..n).map(|_| (take(), take())).collect::<Vec<_>>();
    let backbone = pairs(cfg.backbone_widths.len());
    let (nl_theta, nl_phi, nl_g, nl_z, centers) = (take(), take(), take(), take(), take());
    let rce = pairs(cfg.rce_dims.len() - 1);
    let (wq, wk, wv) = (take(), take(), take());
    let pos_head = pairs(cfg.head_dims.len() - 1);
    let heading_head = pairs(cfg.head_dims.len() - 1);
    Layout { backbone, nl_theta, nl_phi, nl_g, nl_z, centers, rce, wq, wk, wv, pos_head, heading_head }
}

impl ModelParams {
    /// Kaiming-uniform weights (bound `√(6/fan_in)`), zero biases, zero
    /// non-local output projection, and cluster centers drawn from
    /// `N(0, 1/√D)`.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let centers = Normal::new(0.0, 1.0 / (cfg.d as f64).sqrt()).expect("positive std");
        let entries = param_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") || name == "nonlocal.z" {
                    Tensor::zeros(&shape)
                } else if name == "gluf.centers" {
                    let data = (0..shape.iter().product()).map(|_| centers.sample(rng)).collect();
                    Tensor::new(&shape, data).expect("shape matches data")
                } else {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let b = (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&shape, -b, b, rng)
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { entries, layout: layout_for(cfg) })
    }

    /// Builds parameters from named tensors, checking names and shapes.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let expect = param_shapes(cfg);
        if expect.len() != named.len() {
            return Err(ModelError::Config(format!("expected {} parameters, got {}", expect.len(), named.len())));
        }
        for ((en, es), (n, t)) in expect.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(ModelError::Config(format!("parameter {n} {:?} does not match {en} {es:?}", t.shape())));
            }
        }
        let entries = named.into_iter().map(|(name, value)| Param { name, value }).collect();
        Ok(Self { entries, layout: layout_for(cfg) })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<(), ModelError> {
        if values.len() != self.entries.len() {
            return Err(ModelError::Config("parameter count mismatch".into()));
        }
        for (p, v) in self.entries.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(ModelError::Config(format!("shape mismatch for {}", p.name)));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Distinct submodule prefixes in storage order.
    pub fn submodules(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.entries {
            if out.last().map(String::as_str) != Some(p.submodule()) {
                out.push(p.submodule().to_string());
            }
        }
        out
    }
}
