//! Conformer speech encoder.
//!
//! Block layout (pre-norm, macaron):
//!
//! ```text
//! x = x + ½·FFN(LN(x))
//! x = x + MHSA(LN(x))
//! x = x + Conv(LN(x))      Conv = pointwise(2d) → GLU → depthwise(k) → LN → SiLU → pointwise(d)
//! x = x + ½·FFN(LN(x))
//! y = LN(x)
//! ```
//!
//! The convolution module normalizes with a layer norm instead of batch
//! norm so that every utterance is processed independently.

use rand::Rng;

use super::{add_positions, BlockConfig, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::tensor::flops::Category;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const SUB_KERNEL: usize = 3;
const SUB_STRIDE: usize = 2;
const SUB_PAD: usize = 1;

/// Encoder length after the two stride-2 convolutions:
/// `floor(floor((T − 1) / 2) / 2) + 1`.
pub fn subsampled_len(frames: usize) -> Result<usize> {
    if frames < 4 {
        return Err(Error::TooShort { frames, min: 4 });
    }
    Ok((frames - 1) / 2 / 2 + 1)
}

/// Two strided 1-D convolutions (kernel 3, stride 2, padding 1), each
/// followed by SiLU, reducing the frame rate by 4.
#[derive(Clone, Debug)]
pub struct ConvSubsampler {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl ConvSubsampler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_feat: usize, d_model: usize, rng: &mut R) -> Self {
        ConvSubsampler {
            conv1: Linear::new(store, &format!("{name}.conv1"), SUB_KERNEL * d_feat, d_model, Category::Other, rng),
            conv2: Linear::new(store, &format!("{name}.conv2"), SUB_KERNEL * d_model, d_model, Category::Other, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        subsampled_len(g.rows(x))?;
        let p = g.im2col(x, SUB_KERNEL, SUB_STRIDE, SUB_PAD)?;
        let h = self.conv1.forward(g, p)?;
        let h = g.silu(h);
        let p = g.im2col(h, SUB_KERNEL, SUB_STRIDE, SUB_PAD)?;
        let h = self.conv2.forward(g, p)?;
        Ok(g.silu(h))
    }
}

#[derive(Clone, Debug)]
struct ConvModule {
    norm: LayerNorm,
    pointwise1: Linear,
    depthwise: ParamId,
    mid_norm: LayerNorm,
    pointwise2: Linear,
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    cfg: BlockConfig,
    ffn1_norm: LayerNorm,
    ffn1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    conv: ConvModule,
    ffn2_norm: LayerNorm,
    ffn2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let conv = ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.conv.norm"), d),
            pointwise1: Linear::new(store, &format!("{name}.conv.pw1"), d, 2 * d, Category::Other, rng),
            depthwise: store.add_randn(
                format!("{name}.conv.depthwise"),
                &[cfg.conv_kernel, d],
                (1.0 / cfg.conv_kernel as f64).sqrt(),
                rng,
            ),
            mid_norm: LayerNorm::new(store, &format!("{name}.conv.mid_norm"), d),
            pointwise2: Linear::new(store, &format!("{name}.conv.pw2"), d, d, Category::Other, rng),
        };
        Ok(ConformerBlock {
            cfg,
            ffn1_norm: LayerNorm::new(store, &format!("{name}.ffn1.norm"), d),
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), &cfg, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn.norm"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.n_head, rng),
            conv,
            ffn2_norm: LayerNorm::new(store, &format!("{name}.ffn2.norm"), d),
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), &cfg, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        if g.cols(x) != self.cfg.d_model {
            return Err(Error::shape(format!(
                "conformer block expects width {}, got {}",
                self.cfg.d_model,
                g.cols(x)
            )));
        }
        let h = self.ffn1_norm.forward(g, x)?;
        let h = self.ffn1.forward(g, h, drop)?;
        let h = drop.apply(g, h);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h)?;

        let h = self.attn_norm.forward(g, x)?;
        let h = self.attn.forward(g, h, h, false)?;
        let h = drop.apply(g, h);
        let x = g.add(x, h)?;

        let h = self.conv.norm.forward(g, x)?;
        let h = self.conv.pointwise1.forward(g, h)?;
        let h = g.glu(h)?;
        let w = g.param(self.conv.depthwise);
        let h = g.depthwise_conv(h, w)?;
        let h = self.conv.mid_norm.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv.pointwise2.forward(g, h)?;
        let h = drop.apply(g, h);
        let x = g.add(x, h)?;

        let h = self.ffn2_norm.forward(g, x)?;
        let h = self.ffn2.forward(g, h, drop)?;
        let h = drop.apply(g, h);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h)?;

        self.final_norm.forward(g, x)
    }
}

/// Convolutional subsampler, positional encoding and a Conformer stack.
#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub subsampler: ConvSubsampler,
    pub blocks: Vec<ConformerBlock>,
    d_feat: usize,
}

impl SpeechEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_feat: usize,
        layers: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let subsampler = ConvSubsampler::new(store, &format!("{name}.subsample"), d_feat, cfg.d_model, rng);
        let blocks = (0..layers)
            .map(|i| ConformerBlock::new(store, &format!("{name}.layers.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(SpeechEncoder { subsampler, blocks, d_feat })
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn forward(&self, g: &mut Graph, features: &Tensor, drop: &mut Dropout) -> Result<Var> {
        if features.cols() != self.d_feat {
            return Err(Error::shape(format!(
                "features have {} dims, encoder expects {}",
                features.cols(),
                self.d_feat
            )));
        }
        let x = g.constant(features);
        let h = self.subsampler.forward(g, x)?;
        let h = add_positions(g, h, 0)?;
        let mut h = drop.apply(g, h);
        for b in &self.blocks {
            h = b.forward(g, h, drop)?;
        }
        Ok(h)
    }
}
