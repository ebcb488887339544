//! Runtime layer stack: forward pass with a recorded tape, exact backward
//! pass, and flat access to trainable parameter groups.

use rand::Rng;

use crate::error::{contract, Result};
use crate::layer::{ConvContext, ConvLayer, FcContext, FcLayer, FilterBank, LayerGrads};
use crate::netspec::{NetworkSpec, PostOp};
use crate::ops::{self, DropoutMask, PoolIndex};
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvLayer),
    Fc(FcLayer),
}

impl Layer {
    pub fn params(&self) -> &[f64] {
        match self {
            Layer::Conv(c) => c.bank.params(),
            Layer::Fc(f) => f.store.params(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Conv(c) => &c.bias,
            Layer::Fc(f) => &f.bias,
        }
    }

    /// Trainable scalars, biases included.
    pub fn num_params(&self) -> usize {
        self.params().len() + self.bias().len()
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub layer: Layer,
    pub ops: Vec<PostOp>,
}

enum LayerCtx {
    Conv(ConvContext),
    Fc(FcContext),
}

enum OpCtx {
    Pool(PoolIndex),
    Drop(DropoutMask),
    Relu(Tensor4),
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    entries: Vec<(LayerCtx, Vec<OpCtx>)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    stages: Vec<Stage>,
}

impl Network {
    pub fn from_stages(spec: NetworkSpec, stages: Vec<Stage>) -> Result<Self> {
        spec.validate()?;
        contract!(
            spec.layers.len() == stages.len(),
            "{} stages for {} layer specs",
            stages.len(),
            spec.layers.len()
        );
        Ok(Self { spec, stages })
    }

    /// The spec this network was built from (after any filter dropping).
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.layer.num_params()).sum()
    }

    /// Stored weight scalars, biases excluded.
    pub fn num_weight_params(&self) -> usize {
        self.stages.iter().map(|s| s.layer.params().len()).sum()
    }

    /// `[layer0 weights, layer0 bias, layer1 weights, …]`.
    pub fn param_groups(&self) -> Vec<&[f64]> {
        self.stages
            .iter()
            .flat_map(|s| [s.layer.params(), s.layer.bias()])
            .collect()
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.stages.len());
        for s in &mut self.stages {
            match &mut s.layer {
                Layer::Conv(c) => {
                    out.push(c.bank.params_mut());
                    out.push(c.bias.as_mut_slice());
                }
                Layer::Fc(f) => {
                    out.push(f.store.params_mut());
                    out.push(f.bias.as_mut_slice());
                }
            }
        }
        out
    }

    /// Copies every parameter group.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.param_groups().into_iter().map(<[f64]>::to_vec).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        let mut groups = self.param_groups_mut();
        contract!(groups.len() == snapshot.len(), "snapshot has {} groups", snapshot.len());
        for (g, s) in groups.iter_mut().zip(snapshot) {
            contract!(g.len() == s.len(), "snapshot group length mismatch");
            g.copy_from_slice(s);
        }
        Ok(())
    }

    /// Runs the stack. `train` enables dropout (drawing masks from `rng`).
    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor4, train: bool, rng: &mut R) -> Result<(Tensor4, Tape)> {
        let inp = self.spec.input;
        contract!(
            input.dims()[1..] == [inp.channels, inp.rows, inp.cols],
            "network expects inputs of {:?}, got {:?}",
            inp,
            input.dims()
        );
        let mut x = input.clone();
        let mut entries = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (mut y, lctx) = match &stage.layer {
                Layer::Conv(c) => {
                    let (y, ctx) = c.forward(&x)?;
                    (y, LayerCtx::Conv(ctx))
                }
                Layer::Fc(f) => {
                    let (y, ctx) = f.forward(&x)?;
                    (y, LayerCtx::Fc(ctx))
                }
            };
            let mut octx = Vec::with_capacity(stage.ops.len());
            for op in &stage.ops {
                match op {
                    PostOp::MaxPool => {
                        let (p, idx) = ops::maxpool2(&y)?;
                        octx.push(OpCtx::Pool(idx));
                        y = p;
                    }
                    PostOp::Dropout => {
                        let (p, mask) = ops::dropout(&y, self.spec.dropout_rate, train, rng)?;
                        octx.push(OpCtx::Drop(mask));
                        y = p;
                    }
                    PostOp::Relu => {
                        let p = ops::relu(&y);
                        octx.push(OpCtx::Relu(y));
                        y = p;
                    }
                }
            }
            entries.push((lctx, octx));
            x = y;
        }
        Ok((x, Tape { entries }))
    }

    /// Class logits in eval mode.
    pub fn logits(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self.forward(input, false, &mut rng)?.0)
    }

    /// Per-layer gradients given `∂L/∂logits`, in stage order.
    pub fn backward(&self, tape: Tape, grad_logits: Tensor4) -> Result<Vec<LayerGrads>> {
        contract!(tape.entries.len() == self.stages.len(), "tape does not belong to this network");
        let mut grads = Vec::with_capacity(self.stages.len());
        let mut g = grad_logits;
        for (i, (stage, (lctx, octx))) in self.stages.iter().zip(tape.entries).enumerate().rev() {
            for ctx in octx.iter().rev() {
                g = match ctx {
                    OpCtx::Pool(idx) => ops::maxpool2_backward(idx, &g)?,
                    OpCtx::Drop(mask) => ops::dropout_backward(mask, &g)?,
                    OpCtx::Relu(input) => ops::relu_backward(input, &g)?,
                };
            }
            let lg = match (&stage.layer, &lctx) {
                (Layer::Conv(c), LayerCtx::Conv(ctx)) => c.backward(ctx, &g, i > 0)?,
                (Layer::Fc(f), LayerCtx::Fc(ctx)) => f.backward(ctx, &g)?,
                _ => {
                    return Err(crate::Error::Contract(format!(
                        "tape entry {i} does not match its layer"
                    )))
                }
            };
            if let Some(gi) = &lg.input {
                g = gi.clone();
            }
            grads.push(lg);
        }
        grads.reverse();
        Ok(grads)
    }

    /// Mean cross-entropy on a batch and the gradient of every parameter
    /// group, in [`Network::param_groups`] order.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        images: &Tensor4,
        labels: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let (logits, tape) = self.forward(images, train, rng)?;
        let (loss, dlogits) = ops::softmax_xent(&logits, labels)?;
        let grads = self.backward(tape, dlogits)?;
        Ok((
            loss,
            grads.into_iter().flat_map(|g| [g.params, g.bias]).collect(),
        ))
    }
}
