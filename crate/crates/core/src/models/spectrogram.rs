//! Autoregressive spectrogram decoder emitting `r` frames per step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{add_positions, BlockConfig, CrossCache, CrossMode, DecoderStack, Dropout, IncrementalState, Linear};
use crate::tensor::flops::Category;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SpecDecoder {
    pub prenet: Linear,
    pub input_proj: Linear,
    pub stack: DecoderStack,
    pub frame_out: Linear,
    pub eos_out: Linear,
    pub d_spec: usize,
    pub reduction: usize,
}

/// Output of a teacher-forced spectrogram pass.
#[derive(Clone, Copy, Debug)]
pub struct SpecOutputs {
    pub states: Var,
    /// `steps × (r·d_spec)`.
    pub frames: Var,
    /// `steps × 1`.
    pub eos_logits: Var,
}

/// Number of decoder steps for `frames` target frames.
pub fn decoder_steps(frames: usize, reduction: usize) -> usize {
    frames.div_ceil(reduction)
}

impl SpecDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_spec: usize,
        reduction: usize,
        prenet_dim: usize,
        depth: usize,
        cfg: &BlockConfig,
        mode: CrossMode,
        rng: &mut R,
    ) -> Self {
        let group = d_spec * reduction;
        let d = cfg.d_model;
        SpecDecoder {
            prenet: Linear::new(store, &format!("{name}.prenet"), group, prenet_dim, Category::Projection, rng),
            input_proj: Linear::new(store, &format!("{name}.input_proj"), prenet_dim, d, Category::Projection, rng),
            stack: DecoderStack::new(store, name, depth, cfg, mode, rng),
            frame_out: Linear::new(store, &format!("{name}.frame_out"), d, group, Category::Projection, rng),
            eos_out: Linear::new(store, &format!("{name}.eos_out"), d, 1, Category::Projection, rng),
            d_spec,
            reduction,
        }
    }

    /// Groups `r` consecutive frames per row, zero-padding the last group.
    pub fn group_frames(&self, spec: &Tensor) -> Result<Tensor> {
        if spec.cols() != self.d_spec || spec.shape().len() != 2 {
            return Err(Error::shape(format!("spectrogram {:?}, expected width {}", spec.shape(), self.d_spec)));
        }
        let steps = decoder_steps(spec.rows(), self.reduction);
        let mut data = spec.data().to_vec();
        data.resize(steps * self.reduction * self.d_spec, 0.0);
        Tensor::matrix(steps, self.reduction * self.d_spec, data)
    }

    fn embed(&self, g: &mut Graph, prev: Var, offset: usize) -> Result<Var> {
        let p = self.prenet.forward(g, prev)?;
        let p = g.silu(p);
        let x = self.input_proj.forward(g, p)?;
        add_positions(g, x, offset)
    }

    fn heads(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        Ok((self.frame_out.forward(g, h)?, self.eos_out.forward(g, h)?))
    }

    /// Teacher-forced pass over grouped targets (`steps × r·d_spec`).
    pub fn forward(&self, g: &mut Graph, grouped: &Tensor, contexts: &[Var], drop: &mut Dropout) -> Result<SpecOutputs> {
        let (steps, width) = (grouped.rows(), grouped.cols());
        let mut shifted = vec![0.0; steps * width];
        shifted[width..].copy_from_slice(&grouped.data()[..(steps - 1) * width]);
        let prev = g.constant_raw(steps, width, shifted);
        let x = self.embed(g, prev, 0)?;
        let x = drop.apply(g, x);
        let states = self.stack.forward(g, x, contexts, drop)?;
        let (frames, eos_logits) = self.heads(g, states)?;
        Ok(SpecOutputs { states, frames, eos_logits })
    }

    /// One step consuming the previous group of frames (zeros at the start).
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        state: &mut IncrementalState,
        cross: &'a CrossCache,
        prev: &[f64],
    ) -> Result<SpecOutputs> {
        let prev = g.constant_raw(1, prev.len(), prev.to_vec());
        let x = self.embed(g, prev, state.len())?;
        let states = self.stack.step(g, state, cross, x)?;
        let (frames, eos_logits) = self.heads(g, states)?;
        Ok(SpecOutputs { states, frames, eos_logits })
    }
}
