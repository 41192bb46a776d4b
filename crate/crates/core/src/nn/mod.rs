//! Encoder and decoder building blocks.

mod attention;
mod conformer;
mod decoder;
mod encoder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::flops::Category;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub use attention::MultiHeadAttention;
pub use conformer::{subsampled_len, ConformerBlock, ConvSubsampler, SpeechEncoder};
pub use decoder::{CrossCache, CrossMode, DecoderLayer, DecoderStack, IncrementalState, LayerCache, TokenDecoder};
pub use encoder::{EncoderLayer, TransformerEncoder};

/// Shape and regularization of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_head: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_head == 0 {
            return Err(Error::invalid("block dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout source. Every mask is drawn from the generator held here, so a
/// forward pass is a pure function of its inputs and this seed.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn new(p: f64, seed: u64) -> Self {
        if p <= 0.0 {
            return Self::disabled();
        }
        Dropout { p, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) => g.dropout(x, self.p, rng),
            None => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    cat: Category,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        cat: Category,
        rng: &mut R,
    ) -> Self {
        let w = store.add_randn(format!("{name}.weight"), &[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng);
        let b = store.add_const(format!("{name}.bias"), &[d_out], 0.0);
        Linear { w, b: Some(b), cat }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul_in(self.cat, x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), &[d], 1.0),
            bias: store.add_const(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Position-wise feed-forward network with SiLU activation.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), cfg.d_model, cfg.d_ff, Category::FeedForward, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.d_ff, cfg.d_model, Category::FeedForward, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h);
        let h = drop.apply(g, h);
        self.fc2.forward(g, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2]
            .iter()
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect()
    }
}

/// Sinusoidal absolute position encodings for positions `offset..offset+len`.
pub fn positional_encoding(len: usize, d: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        let pos = (p + offset) as f64;
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            data[p * d + i] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("positional encoding shape")
}

/// `x·√d + PE` for rows starting at `offset`.
pub(crate) fn add_positions(g: &mut Graph, x: Var, offset: usize) -> Result<Var> {
    let (len, d) = g.shape(x);
    let x = g.scale(x, (d as f64).sqrt());
    let pe = g.constant(&positional_encoding(len, d, offset));
    g.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_config_validation() {
        let ok = BlockConfig { d_model: 8, d_ff: 16, n_head: 2, conv_kernel: 3, dropout: 0.1 };
        assert!(ok.validate().is_ok());
        assert!(BlockConfig { n_head: 3, ..ok }.validate().is_err());
        assert!(BlockConfig { conv_kernel: 4, ..ok }.validate().is_err());
        assert!(BlockConfig { dropout: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn positional_encoding_offsets_agree() {
        let full = positional_encoding(6, 8, 0);
        let tail = positional_encoding(2, 8, 4);
        assert_eq!(full.row(4), tail.row(0));
        assert_eq!(full.row(5), tail.row(1));
        assert_eq!(full.row(0)[0], 0.0);
        assert_eq!(full.row(0)[1], 1.0);
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let t = Tensor::matrix(4, 4, vec![1.0; 16]).unwrap();
        let run = |seed| {
            let mut g = Graph::new();
            let x = g.constant(&t);
            let mut d = Dropout::new(0.5, seed);
            let y = d.apply(&mut g, x);
            g.value(y).to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
