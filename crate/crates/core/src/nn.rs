//! Parameter declarations, initialization, and the layer helpers shared by
//! the encoder and the heads.

use mtlab_autograd::{Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::{ParamSet, Session};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    He,
    Normal(f64),
    Const(f64),
    /// Identity for square 1x1 convolutions, `He` otherwise.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations while an architecture is described.
#[derive(Clone, Debug, Default)]
pub struct Decls(pub Vec<ParamDecl>);

impl Decls {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamDecl {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// `name.weight` `[cout, cin, k, k]` and optional `name.bias`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, init: Init) {
        self.push(format!("{name}.weight"), &[cout, cin, k, k], init);
        if bias {
            self.push(format!("{name}.bias"), &[cout], Init::Const(0.0));
        }
    }

    pub fn conv_bias(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init, bias: f64) {
        self.push(format!("{name}.weight"), &[cout, cin, k, k], init);
        self.push(format!("{name}.bias"), &[cout], Init::Const(bias));
    }

    pub fn group_norm(&mut self, name: &str, c: usize, gamma: f64) {
        self.push(format!("{name}.gamma"), &[c], Init::Const(gamma));
        self.push(format!("{name}.beta"), &[c], Init::Const(0.0));
    }

    /// Convolution without bias followed by group norm.
    pub fn conv_gn(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.conv(&format!("{name}.conv"), cin, cout, k, false, Init::He);
        self.group_norm(&format!("{name}.gn"), cout, 1.0);
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(ParamDecl::numel).sum()
    }

    /// Draws every tensor from its own stream keyed by name, so adding or
    /// removing a parameter never perturbs the others.
    pub fn materialize(&self, seed: u64) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for d in &self.0 {
            set.insert(d.name.clone(), init_tensor(d, seed)?);
        }
        Ok(set)
    }
}

fn init_tensor(d: &ParamDecl, seed: u64) -> Result<Tensor> {
    let n = d.numel();
    let fan_in: usize = d.shape.iter().skip(1).product::<usize>().max(1);
    let mut r = rng::stream(seed, &format!("init:{}", d.name), 0);
    let normal = |std: f64, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(r)).collect()
    };
    let data = match d.init {
        Init::He => normal((2.0 / fan_in as f64).sqrt(), &mut r),
        Init::Normal(std) => normal(std, &mut r),
        Init::Const(v) => vec![v; n],
        Init::Identity => {
            if d.shape.len() == 4 && d.shape[0] == d.shape[1] && d.shape[2] == 1 && d.shape[3] == 1 {
                let c = d.shape[0];
                let mut v = vec![0.0; n];
                (0..c).for_each(|i| v[i * c + i] = 1.0);
                v
            } else {
                normal((2.0 / fan_in as f64).sqrt(), &mut r)
            }
        }
    };
    Ok(Tensor::from_vec(&d.shape, data)?)
}

/// Group count for `c` channels: the largest divisor of `c` not above
/// `min(32, max(1, c / 4))`.
pub fn gn_groups(c: usize) -> usize {
    let cap = (c / 4).clamp(1, 32);
    (1..=cap).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Convolution with "same" padding; the bias is used when declared.
pub fn conv(s: &mut Session, x: Var, name: &str, stride: usize) -> Result<Var> {
    let w = s.param(&format!("{name}.weight"))?;
    let k = s.graph.value(w).shape()[2];
    let bias_name = format!("{name}.bias");
    let b = if s.has_param(&bias_name) {
        Some(s.param(&bias_name)?)
    } else {
        None
    };
    Ok(s.graph.conv2d(x, w, b, stride, k / 2)?)
}

pub fn group_norm(s: &mut Session, x: Var, name: &str) -> Result<Var> {
    let gamma = s.param(&format!("{name}.gamma"))?;
    let beta = s.param(&format!("{name}.beta"))?;
    let c = s.graph.value(gamma).numel();
    Ok(s.graph.group_norm(x, gamma, beta, gn_groups(c))?)
}

/// `conv -> group norm`, optionally followed by ReLU.
pub fn conv_gn(s: &mut Session, x: Var, name: &str, stride: usize, relu: bool) -> Result<Var> {
    let y = conv(s, x, &format!("{name}.conv"), stride)?;
    let y = group_norm(s, y, &format!("{name}.gn"))?;
    Ok(if relu { s.graph.relu(y) } else { y })
}
