use rand_distr::{Distribution, StandardNormal};

use crate::elastic::{Purpose, RngStream};
use crate::numcore::{NumError, Tensor, Var};
use crate::{Error, Result};

/// Draws a `rows×cols` matrix with entries `N(0, 1/rows)`.
pub(crate) fn init_matrix(rows: usize, cols: usize, seed: u64, slot: u64) -> Tensor {
    let mut rng = RngStream::new(seed, Purpose::Init, slot, 0);
    let scale = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, seed: u64, slot: u64) -> Self {
        Self {
            weight: init_matrix(d_in, d_out, seed, slot),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Two-layer relu perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub up: Linear,
    pub down: Linear,
}

/// One MoE block: router `W_g` plus `N` experts of identical shape.
///
/// When `n_null > 0` the router has `N + n_null` columns; the trailing
/// columns score zero-output null experts and are only consulted by the
/// null-expert routing mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: Tensor,
    pub experts: Vec<Expert>,
    pub n_null: usize,
}

impl MoeLayer {
    pub fn init(d: usize, d_h: usize, n_experts: usize, n_null: usize, seed: u64, slot: u64) -> Result<Self> {
        if n_experts < 2 {
            return Err(Error::Config(format!("need at least 2 experts, got {n_experts}")));
        }
        if d == 0 || d_h == 0 {
            return Err(Error::Config("expert widths must be positive".into()));
        }
        let router = init_matrix(d, n_experts + n_null, seed, slot);
        let experts = (0..n_experts as u64)
            .map(|e| Expert {
                up: Linear::init(d, d_h, seed, slot + 1 + 2 * e),
                down: Linear::init(d_h, d, seed, slot + 2 + 2 * e),
            })
            .collect();
        Ok(Self {
            router,
            experts,
            n_null,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d(&self) -> usize {
        self.router.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.experts[0].up.d_out()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.n_experts();
        if n < 2 {
            return Err(Error::Config("need at least 2 experts".into()));
        }
        if self.router.cols() != n + self.n_null {
            return Err(Error::Config("router width does not match expert count".into()));
        }
        let (d, dh) = (self.d(), self.d_hidden());
        for e in &self.experts {
            if e.up.weight.shape() != [d, dh] || e.down.weight.shape() != [dh, d] {
                return Err(Error::Config("experts must share identical shapes".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn bind(l: &Linear, source: &mut dyn FnMut(&Tensor) -> Var<'t>) -> Self {
        Self {
            weight: source(&l.weight),
            bias: source(&l.bias),
        }
    }

    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>, NumError> {
        x.matmul(self.weight)?.add_bias(self.bias)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BoundLayer<'t> {
    pub router: Var<'t>,
    pub experts: Vec<(BoundLinear<'t>, BoundLinear<'t>)>,
    pub n_experts: usize,
    pub n_null: usize,
}

impl<'t> BoundLayer<'t> {
    pub fn bind(layer: &MoeLayer, source: &mut dyn FnMut(&Tensor) -> Var<'t>) -> Self {
        let router = source(&layer.router);
        let experts = layer
            .experts
            .iter()
            .map(|e| (BoundLinear::bind(&e.up, source), BoundLinear::bind(&e.down, source)))
            .collect();
        Self {
            router,
            experts,
            n_experts: layer.n_experts(),
            n_null: layer.n_null,
        }
    }

    pub fn expert(&self, e: usize, x: Var<'t>) -> Result<Var<'t>, NumError> {
        let (up, down) = &self.experts[e];
        down.apply(up.apply(x)?.relu()?)
    }
}
