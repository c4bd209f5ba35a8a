//! ViT-style image encoder producing one feature row per patch (plus an
//! optional CLS row).

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{check_heads, fan_in_std, module_rng, normal, Block, Linear, NamedParam, Norm, NormKind, INIT_STD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub use_cls: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 32,
            patch_size: 8,
            layers: 4,
            dim: 64,
            heads: 4,
            use_cls: true,
        }
    }
}

impl VisionConfig {
    /// ViT-L/14 at 224 pixels.
    pub fn nominal() -> Self {
        VisionConfig {
            image_size: 224,
            patch_size: 14,
            layers: 24,
            dim: 1024,
            heads: 16,
            use_cls: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "vision.image_size {} must be a positive multiple of vision.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        check_heads("vision", self.dim, self.heads)
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// `(N_v, dim)` of [`VisionEncoder::encode_image`].
    pub fn output_shape(&self) -> (usize, usize) {
        (self.num_patches() + usize::from(self.use_cls), self.dim)
    }
}

/// Splits an image into non-overlapping `p × p` patches in row-major patch
/// order; each row is the patch flattened as (row, column, channel).
pub fn patchify(img: &Image, p: usize) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(
            "patchify",
            format!("image {h}×{w} is not divisible by patch size {p} along axes 0/1"),
        ));
    }
    let (ph, pw) = (h / p, w / p);
    let row_len = p * p * 3;
    let mut out = Vec::with_capacity(ph * pw * row_len);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * w + px * p) * 3;
                out.extend(img.data()[start..start + p * 3].iter().map(|&v| v as f64));
            }
        }
    }
    Tensor::new(&[ph * pw, row_len], out)
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: VisionConfig,
    pub patch_embed: Linear,
    pub cls: Option<Tensor>,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

impl VisionEncoder {
    pub fn new(cfg: &VisionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = module_rng(seed, 1);
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let (n_v, dim) = cfg.output_shape();
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch_embed: Linear::new(&mut rng, patch_dim, dim, true, fan_in_std(patch_dim)),
            cls: cfg.use_cls.then(|| normal(&mut rng, &[1, dim], INIT_STD)),
            pos: normal(&mut rng, &[n_v, dim], INIT_STD),
            blocks: (0..cfg.layers)
                .map(|_| Block::new(&mut rng, dim, cfg.heads, NormKind::LayerNorm, true, fan_in_std(dim)))
                .collect(),
            norm: Norm::new(NormKind::LayerNorm, dim),
        })
    }

    /// Dense features `[N_v × dim]`; images of another size are resized
    /// (nearest neighbour) to the configured resolution first.
    pub fn encode_image(&self, img: &Image) -> Result<Tensor> {
        let size = self.cfg.image_size;
        let patches = if img.height() == size && img.width() == size {
            patchify(img, self.cfg.patch_size)?
        } else {
            patchify(&img.resize(size), self.cfg.patch_size)?
        };
        self.encode_patches(&patches)
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let mut x = self.patch_embed.forward(patches)?;
        if let Some(cls) = &self.cls {
            x = Tensor::concat(&[cls.clone(), x], 0)?;
        }
        x = x.add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x, false)?;
        }
        self.norm.forward(&x)
    }

    pub fn params(&self, out: &mut Vec<NamedParam>) {
        self.patch_embed.params("vision.patch_embed", out);
        if let Some(cls) = &self.cls {
            out.push(("vision.cls".into(), cls.clone()));
        }
        out.push(("vision.pos".into(), self.pos.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("vision.blocks.{i}"), out);
        }
        self.norm.params("vision.norm", out);
    }
}
