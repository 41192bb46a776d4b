//! Bidirectional Transformer encoder (T2U / T2S bridge and the text encoder
//! of the denoising pretraining task).

use rand::Rng;

use super::{BlockConfig, Dropout, FeedForward, LayerNorm, MultiHeadAttention};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        EncoderLayer {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn.norm"), cfg.d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.n_head, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn.norm"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let h = self.attn.forward(g, h, h, false)?;
        let h = drop.apply(g, h);
        let x = g.add(x, h)?;
        let h = self.ffn_norm.forward(g, x)?;
        let h = self.ffn.forward(g, h, drop)?;
        let h = drop.apply(g, h);
        g.add(x, h)
    }
}

/// Stack of encoder layers with a final layer norm. With zero layers the
/// encoder is the identity map (no final norm either).
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    final_norm: Option<LayerNorm>,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Self {
        let ls = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), cfg, rng))
            .collect();
        let final_norm = (layers > 0).then(|| LayerNorm::new(store, &format!("{name}.final_norm"), cfg.d_model));
        TransformerEncoder { layers: ls, final_norm }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, h, drop)?;
        }
        match &self.final_norm {
            Some(n) => n.forward(g, h),
            None => Ok(h),
        }
    }
}
