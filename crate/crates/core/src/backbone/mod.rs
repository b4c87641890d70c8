//! A small vision transformer whose classifier head can read the class token
//! after the final block or after any intermediate block.
//!
//! Blocks are pre-norm (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`). The class
//! token taken from block `i` goes through the same final layer norm and the
//! same linear head as the class token from the last block.

mod grad;
pub mod layers;

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Logits;
use crate::rng;

pub use grad::ForwardCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth < 2 {
            return fail(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }
}

/// Location of a tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct LinearIdx {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub inp: usize,
    pub out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct NormIdx {
    pub w: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIdx {
    pub norm1: NormIdx,
    pub qkv: LinearIdx,
    pub proj: LinearIdx,
    pub norm2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

/// Parameter layout. Gradients and optimizer moments share it.
#[derive(Debug, Clone)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    pub(crate) patch: LinearIdx,
    pub(crate) cls: Range<usize>,
    pub(crate) pos: Range<usize>,
    pub(crate) blocks: Vec<BlockIdx>,
    pub(crate) norm: NormIdx,
    pub(crate) head: LinearIdx,
    len: usize,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.len..self.len + n;
        self.len += n;
        self.entries.push(ParamEntry {
            name,
            shape,
            range: range.clone(),
        });
        range
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> LinearIdx {
        LinearIdx {
            w: self.add(format!("{prefix}.weight"), vec![out, inp]),
            b: self.add(format!("{prefix}.bias"), vec![out]),
            inp,
            out,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            w: self.add(format!("{prefix}.weight"), vec![d]),
            b: self.add(format!("{prefix}.bias"), vec![d]),
        }
    }
}

impl Layout {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let mut lb = LayoutBuilder {
            entries: Vec::new(),
            len: 0,
        };
        let patch = lb.linear("patch_embed", cfg.patch_dim(), d);
        let cls = lb.add("cls_token".into(), vec![d]);
        let pos = lb.add("pos_embed".into(), vec![cfg.seq_len(), d]);
        let blocks = (0..cfg.depth)
            .map(|k| {
                let p = format!("blocks.{k}");
                BlockIdx {
                    norm1: lb.norm(&format!("{p}.norm1"), d),
                    qkv: lb.linear(&format!("{p}.attn.qkv"), d, 3 * d),
                    proj: lb.linear(&format!("{p}.attn.proj"), d, d),
                    norm2: lb.norm(&format!("{p}.norm2"), d),
                    fc1: lb.linear(&format!("{p}.mlp.fc1"), d, cfg.mlp_hidden()),
                    fc2: lb.linear(&format!("{p}.mlp.fc2"), cfg.mlp_hidden(), d),
                }
            })
            .collect();
        let norm = lb.norm("norm", d);
        let head = lb.linear("head", d, cfg.num_classes);
        Layout {
            entries: lb.entries,
            patch,
            cls,
            pos,
            blocks,
            norm,
            head,
            len: lb.len,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Logits read from the last block and from one intermediate block of the
/// same forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapOutput {
    pub final_logits: Logits,
    pub tapped_logits: Logits,
    /// 1-based index of the tapped block, in `1..depth`.
    pub tapped_block_index: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: BackboneConfig,
    layout: Layout,
    params: Vec<f64>,
}

fn trunc_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl Model {
    /// Builds a model with deterministic parameters derived from `config.seed`.
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let mut rng = rng::rng_from(config.seed, &[rng::tag("backbone-init")]);
        for e in layout.entries() {
            let slot = &mut params[e.range.clone()];
            if e.name.ends_with(".bias") {
                continue;
            }
            if e.name.starts_with("norm") || e.name.contains(".norm") {
                slot.fill(1.0);
                continue;
            }
            for v in slot.iter_mut() {
                *v = trunc_normal(&mut rng, 0.02);
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    /// Reassembles a model from stored parameters.
    pub fn from_parts(config: BackboneConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.params[e.range.clone()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.entry(name)?.range.clone();
        Some(&mut self.params[r])
    }

    /// Range of the single classifier head inside the parameter vector. Every
    /// logit output, tapped or final, is produced from this range.
    pub fn head_range(&self) -> Range<usize> {
        self.layout.head.w.start..self.layout.head.b.end
    }

    /// Order-sensitive checksum of the parameter bits.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    pub(crate) fn batch_of(&self, images: &[f64]) -> Result<usize> {
        let per = self.config.image_len();
        if images.is_empty() {
            return Err(Error::Dimension("empty image batch".into()));
        }
        if images.len() % per != 0 {
            return Err(Error::Dimension(format!(
                "image buffer of {} values is not a multiple of {} (C x H x W = {} x {} x {})",
                images.len(),
                per,
                self.config.in_channels,
                self.config.image_size,
                self.config.image_size
            )));
        }
        Ok(images.len() / per)
    }

    fn check_tap(&self, block_index: usize) -> Result<()> {
        let n = self.config.depth;
        if block_index == 0 || block_index >= n {
            return Err(Error::Index(format!(
                "tap block index {block_index} outside 1..={}",
                n - 1
            )));
        }
        Ok(())
    }

    /// Logits from the last block for a `(batch, C, H, W)` buffer.
    pub fn forward_final(&self, images: &[f64]) -> Result<Logits> {
        let batch = self.batch_of(images)?;
        Ok(self.run(images, batch, None).final_logits().clone())
    }

    /// Logits from the last block and from block `block_index` (1-based) in a
    /// single pass.
    pub fn forward_with_tap(&self, images: &[f64], block_index: usize) -> Result<TapOutput> {
        self.check_tap(block_index)?;
        let batch = self.batch_of(images)?;
        let cache = self.run(images, batch, Some(block_index));
        Ok(TapOutput {
            final_logits: cache.final_logits().clone(),
            tapped_logits: cache.tapped_logits().cloned().expect("tap requested"),
            tapped_block_index: block_index,
        })
    }

    /// Forward pass that keeps every intermediate needed by [`Model::backward`].
    pub fn forward_recorded(&self, images: &[f64], tap: Option<usize>) -> Result<ForwardCache> {
        if let Some(i) = tap {
            self.check_tap(i)?;
        }
        let batch = self.batch_of(images)?;
        Ok(self.run(images, batch, tap))
    }

    /// Back-propagates upstream logit gradients through a recorded pass and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_final: &Logits,
        d_tap: Option<&Logits>,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "gradient buffer has {} entries, model has {}",
                grads.len(),
                self.params.len()
            )));
        }
        let c = self.config.num_classes;
        let check = |l: &Logits| {
            if l.rows() != cache.batch() || l.classes() != c {
                Err(Error::Dimension(format!(
                    "upstream gradient is {}x{}, expected {}x{}",
                    l.rows(),
                    l.classes(),
                    cache.batch(),
                    c
                )))
            } else {
                Ok(())
            }
        };
        check(d_final)?;
        if let Some(dt) = d_tap {
            check(dt)?;
            if cache.tap_index().is_none() {
                return Err(Error::Contract("tap gradient given for an untapped pass".into()));
            }
        }
        self.backward_impl(cache, d_final, d_tap, grads);
        Ok(())
    }

    pub(crate) fn random_index(rng: &mut rng::Rng, lo: usize, hi: usize) -> usize {
        rng.random_range(lo..=hi)
    }
}

/// Draws the tapped block uniformly from `1..depth`.
pub fn sample_block_index(rng: &mut rng::Rng, depth: usize) -> Result<usize> {
    if depth < 2 {
        return Err(Error::Config(format!("depth must be >= 2, got {depth}")));
    }
    Ok(Model::random_index(rng, 1, depth - 1))
}

/// Draws uniformly from an inclusive sub-range of eligible blocks.
pub fn sample_block_in(rng: &mut rng::Rng, depth: usize, lo: usize, hi: usize) -> Result<usize> {
    if depth < 2 || lo == 0 || lo > hi || hi >= depth {
        return Err(Error::Config(format!(
            "tap range {lo}..={hi} invalid for depth {depth}"
        )));
    }
    Ok(Model::random_index(rng, lo, hi))
}
