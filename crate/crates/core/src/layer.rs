//! Trainable layers. A convolutional layer is a bias vector plus a
//! [`FilterBank`], the parameterisation that turns stored scalars into a
//! virtual `(n, m, d, d)` filter tensor and maps spatial filter gradients back
//! onto those scalars. Every compression method is one `FilterBank`.

use serde::{Deserialize, Serialize};

use crate::baselines::{DropFreqStore, LrdStore, SpatialHashedConvStore};
use crate::error::{contract, Result};
use crate::fresh::{FreqWeightStore, HashedFcStore};
use crate::ops;
use crate::tensor::Tensor4;

/// How a layer stores its weights. The discriminant is the on-disk tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Method {
    /// Uncompressed conv filters (also what filter dropping leaves behind).
    Dense = 0,
    Fresh = 1,
    HashedSpatial = 2,
    DropFreq = 3,
    Lrd = 4,
    HashedFc = 5,
}

impl Method {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Method::Dense,
            1 => Method::Fresh,
            2 => Method::HashedSpatial,
            3 => Method::DropFreq,
            4 => Method::Lrd,
            5 => Method::HashedFc,
            _ => return None,
        })
    }
}

/// Hash/allocation metadata written ahead of a layer's weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerHeader {
    pub layer_seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub k_total: u64,
    pub band_counts: Vec<u64>,
    pub use_sign: bool,
}

/// Stored parameterisation of a convolutional filter bank.
pub trait FilterBank {
    fn method(&self) -> Method;
    /// `[n, m, d, d]` of the virtual filters.
    fn filter_dims(&self) -> [usize; 4];
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Materialises the spatial filters.
    fn reconstruct(&self) -> Tensor4;
    /// Gradient w.r.t. [`FilterBank::params`] given `∂L/∂filters`.
    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>>;
    fn header(&self) -> LayerHeader;
}

/// Uncompressed filters.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFilters {
    pub filters: Tensor4,
}

impl FilterBank for DenseFilters {
    fn method(&self) -> Method {
        Method::Dense
    }

    fn filter_dims(&self) -> [usize; 4] {
        self.filters.dims()
    }

    fn params(&self) -> &[f64] {
        self.filters.data()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.filters.data_mut()
    }

    fn reconstruct(&self) -> Tensor4 {
        self.filters.clone()
    }

    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>> {
        contract!(filter_grad.dims() == self.filters.dims(), "filter gradient dims mismatch");
        Ok(filter_grad.data().to_vec())
    }

    fn header(&self) -> LayerHeader {
        LayerHeader {
            k_total: self.filters.len() as u64,
            ..Default::default()
        }
    }
}

/// Enum dispatch over every supported filter parameterisation.
#[derive(Clone, Debug)]
pub enum ConvBank {
    Dense(DenseFilters),
    Fresh(FreqWeightStore),
    HashedSpatial(SpatialHashedConvStore),
    DropFreq(DropFreqStore),
    Lrd(LrdStore),
}

macro_rules! dispatch {
    ($self:expr, $b:ident => $e:expr) => {
        match $self {
            ConvBank::Dense($b) => $e,
            ConvBank::Fresh($b) => $e,
            ConvBank::HashedSpatial($b) => $e,
            ConvBank::DropFreq($b) => $e,
            ConvBank::Lrd($b) => $e,
        }
    };
}

impl FilterBank for ConvBank {
    fn method(&self) -> Method {
        dispatch!(self, b => b.method())
    }
    fn filter_dims(&self) -> [usize; 4] {
        dispatch!(self, b => b.filter_dims())
    }
    fn params(&self) -> &[f64] {
        dispatch!(self, b => b.params())
    }
    fn params_mut(&mut self) -> &mut [f64] {
        dispatch!(self, b => b.params_mut())
    }
    fn reconstruct(&self) -> Tensor4 {
        dispatch!(self, b => b.reconstruct())
    }
    fn pull_back(&self, filter_grad: &Tensor4) -> Result<Vec<f64>> {
        dispatch!(self, b => b.pull_back(filter_grad))
    }
    fn header(&self) -> LayerHeader {
        dispatch!(self, b => b.header())
    }
}

/// What a conv layer keeps from its forward pass.
#[derive(Clone, Debug)]
pub struct ConvContext {
    input: Tensor4,
    filters: Tensor4,
}

impl ConvContext {
    /// Filters reconstructed for the forward pass (reused by backward).
    pub fn filters(&self) -> &Tensor4 {
        &self.filters
    }
}

/// Gradients of one layer.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub params: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Tensor4>,
}

/// Same-padded convolution whose filters come from a [`FilterBank`].
#[derive(Clone, Debug)]
pub struct ConvLayer<B = ConvBank> {
    pub bank: B,
    pub bias: Vec<f64>,
}

impl<B: FilterBank> ConvLayer<B> {
    pub fn new(bank: B) -> Self {
        let n = bank.filter_dims()[0];
        Self {
            bank,
            bias: vec![0.0; n],
        }
    }

    /// Trainable scalars, biases included.
    pub fn num_params(&self) -> usize {
        self.bank.params().len() + self.bias.len()
    }

    pub fn forward(&self, input: &Tensor4) -> Result<(Tensor4, ConvContext)> {
        let filters = self.bank.reconstruct();
        let out = ops::conv2d_same(input, &filters, &self.bias)?;
        Ok((
            out,
            ConvContext {
                input: input.clone(),
                filters,
            },
        ))
    }

    pub fn backward(&self, ctx: &ConvContext, grad_out: &Tensor4, need_input_grad: bool) -> Result<LayerGrads> {
        contract!(
            ctx.filters.dims() == self.bank.filter_dims(),
            "context was produced by a layer with filter dims {:?}",
            ctx.filters.dims()
        );
        let g = ops::conv2d_same_backward(&ctx.input, &ctx.filters, grad_out, need_input_grad)?;
        Ok(LayerGrads {
            params: self.bank.pull_back(&g.filters)?,
            bias: g.bias,
            input: g.input,
        })
    }
}

/// What a hashed FC layer keeps from its forward pass.
#[derive(Clone, Debug)]
pub struct FcContext {
    input: Tensor4,
    weights: Vec<f64>,
}

/// Fully-connected layer with hashed (virtual) weights.
#[derive(Clone, Debug)]
pub struct FcLayer {
    pub store: HashedFcStore,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn new(store: HashedFcStore) -> Self {
        let q = store.out_dim();
        Self {
            store,
            bias: vec![0.0; q],
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.params().len() + self.bias.len()
    }

    pub fn forward(&self, input: &Tensor4) -> Result<(Tensor4, FcContext)> {
        let b = input.dims()[0];
        contract!(
            b == 0 || input.len() / b == self.store.in_dim(),
            "fc layer expects {} inputs per sample, got dims {:?}",
            self.store.in_dim(),
            input.dims()
        );
        let weights = self.store.materialize();
        let out = ops::fc_forward(input, &weights, &self.bias)?;
        Ok((
            out,
            FcContext {
                input: input.clone(),
                weights,
            },
        ))
    }

    pub fn backward(&self, ctx: &FcContext, grad_out: &Tensor4) -> Result<LayerGrads> {
        let g = ops::fc_backward(&ctx.input, &ctx.weights, grad_out)?;
        Ok(LayerGrads {
            params: self.store.pull_back(&g.weights)?,
            bias: g.bias,
            input: Some(g.input),
        })
    }
}
