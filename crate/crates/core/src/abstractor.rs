//! Learnable-query visual abstractor: compresses `N_v` visual feature rows
//! into `K` rows in the language model's embedding space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_heads, fan_in_std, module_rng, normal, Attention, Linear, Mlp, NamedParam, Norm, NormKind, INIT_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbstractorConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub self_attention_on_queries: bool,
}

impl Default for AbstractorConfig {
    fn default() -> Self {
        AbstractorConfig {
            num_queries: 8,
            layers: 2,
            heads: 4,
            self_attention_on_queries: true,
        }
    }
}

impl AbstractorConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("abstractor.num_queries must be at least 1".into()));
        }
        check_heads("abstractor", dim, self.heads)
    }
}

#[derive(Debug, Clone)]
pub struct AbstractorLayer {
    pub self_norm: Option<Norm>,
    pub self_attn: Option<Attention>,
    pub query_norm: Norm,
    pub visual_norm: Norm,
    pub cross_attn: Attention,
    pub mlp_norm: Norm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Abstractor {
    pub cfg: AbstractorConfig,
    pub dim: usize,
    pub in_proj: Linear,
    pub queries: Tensor,
    pub layers: Vec<AbstractorLayer>,
    pub norm: Norm,
}

impl Abstractor {
    /// `visual_dim` is the encoder width; `dim` the language model width.
    pub fn new(cfg: &AbstractorConfig, visual_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate(dim)?;
        let mut rng = module_rng(seed, 2);
        let ln = NormKind::LayerNorm;
        let in_proj = Linear::new(&mut rng, visual_dim, dim, true, fan_in_std(visual_dim));
        let queries = normal(&mut rng, &[cfg.num_queries, dim], 1.0);
        let layers = (0..cfg.layers)
            .map(|_| {
                let sa = cfg.self_attention_on_queries;
                AbstractorLayer {
                    self_norm: sa.then(|| Norm::new(ln, dim)),
                    self_attn: sa.then(|| Attention::new(&mut rng, dim, dim, cfg.heads, true, fan_in_std(dim))),
                    query_norm: Norm::new(ln, dim),
                    visual_norm: Norm::new(ln, dim),
                    cross_attn: Attention::new(&mut rng, dim, dim, cfg.heads, true, fan_in_std(dim)),
                    mlp_norm: Norm::new(ln, dim),
                    mlp: Mlp::new(&mut rng, dim, true, fan_in_std(dim)),
                }
            })
            .collect();
        Ok(Abstractor {
            cfg: cfg.clone(),
            dim,
            in_proj,
            queries,
            layers,
            norm: Norm::new(ln, dim),
        })
    }

    /// `[N_v × d_v] → [K × dim]`.
    pub fn abstract_features(&self, visual: &Tensor) -> Result<Tensor> {
        let (n_v, d_v) = visual.dims2("abstract")?;
        if n_v == 0 || d_v != self.in_proj.d_in() {
            return Err(Error::dim(
                "abstract",
                format!("visual features {n_v}×{d_v}: axis 1 must equal {}", self.in_proj.d_in()),
            ));
        }
        let v = self.in_proj.forward(visual)?;
        let mut q = self.queries.clone();
        for layer in &self.layers {
            if let (Some(norm), Some(attn)) = (&layer.self_norm, &layer.self_attn) {
                let h = norm.forward(&q)?;
                q = q.add(&attn.forward(&h, &h, false)?)?;
            }
            let h = layer.query_norm.forward(&q)?;
            let kv = layer.visual_norm.forward(&v)?;
            q = q.add(&layer.cross_attn.forward(&h, &kv, false)?)?;
            let h = layer.mlp_norm.forward(&q)?;
            q = q.add(&layer.mlp.forward(&h)?)?;
        }
        self.norm.forward(&q)
    }

    pub fn params(&self, out: &mut Vec<NamedParam>) {
        self.in_proj.params("abstractor.in_proj", out);
        out.push(("abstractor.queries".into(), self.queries.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("abstractor.layers.{i}");
            if let (Some(norm), Some(attn)) = (&l.self_norm, &l.self_attn) {
                norm.params(&format!("{p}.self_norm"), out);
                attn.params(&format!("{p}.self_attn"), out);
            }
            l.query_norm.params(&format!("{p}.query_norm"), out);
            l.visual_norm.params(&format!("{p}.visual_norm"), out);
            l.cross_attn.params(&format!("{p}.cross_attn"), out);
            l.mlp_norm.params(&format!("{p}.mlp_norm"), out);
            l.mlp.params(&format!("{p}.mlp"), out);
        }
        self.norm.params("abstractor.norm", out);
    }
}
