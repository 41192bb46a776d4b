use rand::Rng;

use super::Linear;
use crate::error::Result;
use crate::tensor::flops::Category;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), d, d, Category::Projection, rng);
        MultiHeadAttention { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o"), heads }
    }

    /// Projects a context into keys and values.
    pub fn project_kv(&self, g: &mut Graph, ctx: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, ctx)?, self.v.forward(g, ctx)?))
    }

    /// Attends `x` over already-projected keys and values.
    pub fn attend(&self, g: &mut Graph, x: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        self.o.forward(g, a)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Var, causal: bool) -> Result<Var> {
        let (k, v) = self.project_kv(g, ctx)?;
        self.attend(g, x, k, v, causal)
    }
}
