//! Pre-norm Transformer decoder with optional cross-attention and
//! incremental (cached) single-token stepping.

use rand::Rng;

use super::{add_positions, BlockConfig, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::tensor::flops::Category;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Cross-attention arrangement of a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossMode {
    /// Self-attention only.
    None,
    /// One cross-attention over one context.
    Single,
    /// Two cross-attentions over two contexts, outputs summed.
    Parallel,
    /// Two cross-attentions applied one after the other.
    Sequential,
}

impl CrossMode {
    pub fn contexts(self) -> usize {
        match self {
            CrossMode::None => 0,
            CrossMode::Single => 1,
            CrossMode::Parallel | CrossMode::Sequential => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CrossMode::None => "none",
            CrossMode::Single => "single",
            CrossMode::Parallel => "parallel",
            CrossMode::Sequential => "sequential",
        }
    }
}

impl std::fmt::Display for CrossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CrossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [CrossMode::None, CrossMode::Single, CrossMode::Parallel, CrossMode::Sequential]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown cross-attention mode {s:?}"))
    }
}

/// Self-attention keys and values of one layer for every consumed position.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct IncrementalState {
    pub layers: Vec<LayerCache>,
    len: usize,
}

impl IncrementalState {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Projected cross-attention keys/values, per layer and per context.
#[derive(Clone, Debug)]
pub struct CrossCache {
    layers: Vec<Vec<(Tensor, Tensor)>>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    mode: CrossMode,
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: Option<LayerNorm>,
    cross1: Option<MultiHeadAttention>,
    cross2_norm: Option<LayerNorm>,
    cross2: Option<MultiHeadAttention>,
    ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BlockConfig,
        mode: CrossMode,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let mha = |store: &mut ParamStore, n: &str, rng: &mut R| {
            MultiHeadAttention::new(store, &format!("{name}.{n}"), d, cfg.n_head, rng)
        };
        let self_norm = LayerNorm::new(store, &format!("{name}.self_attn.norm"), d);
        let self_attn = mha(store, "self_attn", rng);
        let (cross_norm, cross1) = if mode == CrossMode::None {
            (None, None)
        } else {
            (
                Some(LayerNorm::new(store, &format!("{name}.cross_attn.norm"), d)),
                Some(mha(store, "cross_attn", rng)),
            )
        };
        let cross2_norm = (mode == CrossMode::Sequential)
            .then(|| LayerNorm::new(store, &format!("{name}.cross_attn2.norm"), d));
        let cross2 = (mode.contexts() == 2).then(|| mha(store, "cross_attn2", rng));
        DecoderLayer {
            mode,
            self_norm,
            self_attn,
            cross_norm,
            cross1,
            cross2_norm,
            cross2,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn.norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng),
        }
    }

    pub fn mode(&self) -> CrossMode {
        self.mode
    }

    fn cross_attns(&self) -> Vec<&MultiHeadAttention> {
        self.cross1.iter().chain(self.cross2.iter()).collect()
    }

    fn cross_block(&self, g: &mut Graph, x: Var, kvs: &[(Var, Var)], drop: &mut Dropout) -> Result<Var> {
        match self.mode {
            CrossMode::None => Ok(x),
            CrossMode::Single => {
                let h = self.cross_norm.as_ref().expect("cross norm").forward(g, x)?;
                let a = self.cross1.as_ref().expect("cross attn").attend(g, h, kvs[0].0, kvs[0].1, false)?;
                let a = drop.apply(g, a);
                g.add(x, a)
            }
            CrossMode::Parallel => {
                let h = self.cross_norm.as_ref().expect("cross norm").forward(g, x)?;
                let a1 = self.cross1.as_ref().expect("cross attn").attend(g, h, kvs[0].0, kvs[0].1, false)?;
                let a2 = self.cross2.as_ref().expect("cross attn 2").attend(g, h, kvs[1].0, kvs[1].1, false)?;
                let a = g.add(a1, a2)?;
                let a = drop.apply(g, a);
                g.add(x, a)
            }
            CrossMode::Sequential => {
                let h = self.cross_norm.as_ref().expect("cross norm").forward(g, x)?;
                let a = self.cross1.as_ref().expect("cross attn").attend(g, h, kvs[0].0, kvs[0].1, false)?;
                let a = drop.apply(g, a);
                let x = g.add(x, a)?;
                let h = self.cross2_norm.as_ref().expect("cross norm 2").forward(g, x)?;
                let a = self.cross2.as_ref().expect("cross attn 2").attend(g, h, kvs[1].0, kvs[1].1, false)?;
                let a = drop.apply(g, a);
                g.add(x, a)
            }
        }
    }

    fn ffn_block(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.ffn_norm.forward(g, x)?;
        let h = self.ffn.forward(g, h, drop)?;
        let h = drop.apply(g, h);
        g.add(x, h)
    }

    /// Causal forward over a whole sequence.
    pub fn forward(&self, g: &mut Graph, x: Var, contexts: &[Var], drop: &mut Dropout) -> Result<Var> {
        check_contexts(self.mode, contexts.len())?;
        let h = self.self_norm.forward(g, x)?;
        let (k, v) = self.self_attn.project_kv(g, h)?;
        let a = self.self_attn.attend(g, h, k, v, true)?;
        let a = drop.apply(g, a);
        let x = g.add(x, a)?;
        let kvs = self
            .cross_attns()
            .iter()
            .zip(contexts)
            .map(|(attn, &ctx)| attn.project_kv(g, ctx))
            .collect::<Result<Vec<_>>>()?;
        let x = self.cross_block(g, x, &kvs, drop)?;
        self.ffn_block(g, x, drop)
    }

    /// Processes one new position given this layer's cache and the
    /// pre-projected cross-attention keys/values. Extends the cache by one.
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        cache: &mut LayerCache,
        x: Var,
        cross: &'a [(Tensor, Tensor)],
    ) -> Result<Var> {
        check_contexts(self.mode, cross.len())?;
        let d = g.cols(x);
        let h = self.self_norm.forward(g, x)?;
        let (k_new, v_new) = self.self_attn.project_kv(g, h)?;
        cache.k.extend_from_slice(g.value(k_new));
        cache.v.extend_from_slice(g.value(v_new));
        let len = cache.k.len() / d;
        let k = g.constant_raw(len, d, cache.k.clone());
        let v = g.constant_raw(len, d, cache.v.clone());
        let a = self.self_attn.attend(g, h, k, v, true)?;
        let x = g.add(x, a)?;
        let kvs: Vec<(Var, Var)> = cross
            .iter()
            .map(|(k, v)| {
                let kk = g.constant_ref(k.rows(), k.cols(), k.data());
                let vv = g.constant_ref(v.rows(), v.cols(), v.data());
                (kk, vv)
            })
            .collect();
        let x = self.cross_block(g, x, &kvs, &mut Dropout::disabled())?;
        self.ffn_block(g, x, &mut Dropout::disabled())
    }
}

fn check_contexts(mode: CrossMode, got: usize) -> Result<()> {
    if got < mode.contexts() {
        return Err(Error::MissingContext(match mode {
            CrossMode::Single => "decoder layer needs one cross-attention context",
            _ => "parallel/sequential decoder layer needs two cross-attention contexts",
        }));
    }
    Ok(())
}

/// Decoder layers plus final layer norm, operating on embedded inputs.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    mode: CrossMode,
    d_model: usize,
}

impl DecoderStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        cfg: &BlockConfig,
        mode: CrossMode,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layers.{i}"), cfg, mode, rng))
            .collect();
        DecoderStack {
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), cfg.d_model),
            mode,
            d_model: cfg.d_model,
        }
    }

    pub fn mode(&self) -> CrossMode {
        self.mode
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, contexts: &[Var], drop: &mut Dropout) -> Result<Var> {
        check_contexts(self.mode, contexts.len())?;
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, h, contexts, drop)?;
        }
        self.final_norm.forward(g, h)
    }

    pub fn new_state(&self) -> IncrementalState {
        IncrementalState { layers: vec![LayerCache::default(); self.layers.len()], len: 0 }
    }

    /// Projects each context through every layer's cross-attention once.
    pub fn precompute_cross(&self, params: &ParamStore, contexts: &[&Tensor]) -> Result<CrossCache> {
        check_contexts(self.mode, contexts.len())?;
        let mut g = Graph::inference(params);
        let ctx: Vec<Var> = contexts.iter().map(|t| g.constant(t)).collect();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut kvs = Vec::new();
            for (attn, &c) in l.cross_attns().iter().zip(&ctx) {
                let (k, v) = attn.project_kv(&mut g, c)?;
                kvs.push((g.tensor(k), g.tensor(v)));
            }
            layers.push(kvs);
        }
        Ok(CrossCache { layers })
    }

    /// One incremental step on an already embedded `1×d` input.
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        state: &mut IncrementalState,
        cross: &'a CrossCache,
        x: Var,
    ) -> Result<Var> {
        if g.shape(x) != (1, self.d_model) {
            return Err(Error::shape(format!("decoder step input {:?}", g.shape(x))));
        }
        let mut h = x;
        for ((l, cache), kv) in self.layers.iter().zip(&mut state.layers).zip(&cross.layers) {
            h = l.step(g, cache, h, kv)?;
        }
        state.len += 1;
        self.final_norm.forward(g, h)
    }

    /// Parameters of every layer's feed-forward network.
    pub fn ffn_param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.ffn.param_ids()).collect()
    }
}

/// Token embedding, decoder stack and output projection.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub embed: ParamId,
    pub stack: DecoderStack,
    pub out: Linear,
    vocab: usize,
}

impl TokenDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        depth: usize,
        cfg: &BlockConfig,
        mode: CrossMode,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let embed = store.add_randn(format!("{name}.embed"), &[vocab, d], (1.0 / d as f64).sqrt(), rng);
        let stack = DecoderStack::new(store, name, depth, cfg, mode, rng);
        let out = Linear::new(store, &format!("{name}.out_proj"), d, vocab, Category::Projection, rng);
        TokenDecoder { embed, stack, out, vocab }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn embed_at(&self, g: &mut Graph, ids: &[usize], offset: usize) -> Result<Var> {
        let table = g.param(self.embed);
        let e = g.embedding(table, ids)?;
        add_positions(g, e, offset)
    }

    /// Teacher-forced forward. Returns pre-logit states and logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        input_ids: &[usize],
        contexts: &[Var],
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let x = self.embed_at(g, input_ids, 0)?;
        let x = drop.apply(g, x);
        let h = self.stack.forward(g, x, contexts, drop)?;
        let logits = self.out.forward(g, h)?;
        Ok((h, logits))
    }

    /// Consumes `token` at the next position. Returns pre-logit state and logits.
    pub fn step<'a>(
        &self,
        g: &mut Graph<'a>,
        state: &mut IncrementalState,
        cross: &'a CrossCache,
        token: usize,
    ) -> Result<(Var, Var)> {
        let x = self.embed_at(g, &[token], state.len())?;
        let h = self.stack.step(g, state, cross, x)?;
        let logits = self.out.forward(g, h)?;
        Ok((h, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BlockConfig {
        BlockConfig { d_model: 8, d_ff: 16, n_head: 2, conv_kernel: 3, dropout: 0.0 }
    }

    #[test]
    fn missing_context_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, "l", &cfg(), CrossMode::Parallel, &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.constant(&Tensor::zeros(&[2, 8]));
        let ctx = g.constant(&Tensor::zeros(&[3, 8]));
        assert!(matches!(
            layer.forward(&mut g, x, &[ctx], &mut Dropout::disabled()),
            Err(Error::MissingContext(_))
        ));
        assert!(layer.forward(&mut g, x, &[ctx, ctx], &mut Dropout::disabled()).is_ok());
    }

    #[test]
    fn self_only_decoder_accepts_no_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dec = TokenDecoder::new(&mut store, "d", 5, 2, &cfg(), CrossMode::None, &mut rng);
        let mut g = Graph::inference(&store);
        let (_, logits) = dec.forward(&mut g, &[0, 3, 4], &[], &mut Dropout::disabled()).unwrap();
        assert_eq!(g.shape(logits), (3, 5));
    }

    #[test]
    fn stepping_extends_every_cache_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dec = TokenDecoder::new(&mut store, "d", 5, 3, &cfg(), CrossMode::Single, &mut rng);
        let ctx = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let cross = dec.stack.precompute_cross(&store, &[&ctx]).unwrap();
        let mut st = dec.stack.new_state();
        for (i, tok) in [0, 2, 3].into_iter().enumerate() {
            let mut g = Graph::inference(&store);
            dec.step(&mut g, &mut st, &cross, tok).unwrap();
            assert_eq!(st.len(), i + 1);
            for l in &st.layers {
                assert_eq!(l.k.len(), (i + 1) * 8);
                assert_eq!(l.v.len(), (i + 1) * 8);
            }
        }
    }
}
