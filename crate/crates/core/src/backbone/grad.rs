//! Recorded forward pass and its reverse-mode gradient.

use super::layers::{self, NormCache};
use super::{LinearIdx, Model, NormIdx};
use crate::losses::Logits;

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    ln1: NormCache,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: NormCache,
    ln2_out: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_act: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    norm: NormCache,
    normed: Vec<f64>,
    logits: Logits,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_head: HeadCache,
    tap: Option<(usize, HeadCache)>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn final_logits(&self) -> &Logits {
        &self.final_head.logits
    }

    pub fn tapped_logits(&self) -> Option<&Logits> {
        self.tap.as_ref().map(|(_, h)| &h.logits)
    }

    pub fn tap_index(&self) -> Option<usize> {
        self.tap.as_ref().map(|(i, _)| *i)
    }
}

fn slice<'a>(p: &'a [f64], r: &std::ops::Range<usize>) -> &'a [f64] {
    &p[r.clone()]
}

impl Model {
    fn apply_linear(&self, x: &[f64], rows: usize, l: &LinearIdx) -> Vec<f64> {
        layers::linear(x, rows, l.inp, slice(&self.params, &l.w), slice(&self.params, &l.b), l.out)
    }

    fn apply_norm(&self, x: &[f64], rows: usize, n: &NormIdx) -> (Vec<f64>, NormCache) {
        layers::layer_norm(
            x,
            rows,
            self.config.embed_dim,
            slice(&self.params, &n.w),
            slice(&self.params, &n.b),
        )
    }

    fn extract_patches(&self, images: &[f64], batch: usize) -> Vec<f64> {
        let cfg = &self.config;
        let (c, s, ps, g) = (cfg.in_channels, cfg.image_size, cfg.patch_size, cfg.grid());
        let pd = cfg.patch_dim();
        let mut out = vec![0.0; batch * g * g * pd];
        for b in 0..batch {
            let img = &images[b * cfg.image_len()..(b + 1) * cfg.image_len()];
            for py in 0..g {
                for px in 0..g {
                    let row = &mut out[((b * g + py) * g + px) * pd..][..pd];
                    for ch in 0..c {
                        for dy in 0..ps {
                            let src = (ch * s + py * ps + dy) * s + px * ps;
                            let dst = (ch * ps + dy) * ps;
                            row[dst..dst + ps].copy_from_slice(&img[src..src + ps]);
                        }
                    }
                }
            }
        }
        out
    }

    fn head_forward(&self, cls: &[f64], batch: usize) -> HeadCache {
        let (normed, norm) = self.apply_norm(cls, batch, &self.layout.norm);
        let logits = self.apply_linear(&normed, batch, &self.layout.head);
        HeadCache {
            norm,
            normed,
            logits: Logits::from_vec(batch, self.config.num_classes, logits)
                .expect("head output shape"),
        }
    }

    pub(super) fn run(&self, images: &[f64], batch: usize, tap: Option<usize>) -> ForwardCache {
        let cfg = &self.config;
        let (d, t, np) = (cfg.embed_dim, cfg.seq_len(), cfg.num_patches());
        let rows = batch * t;
        let patches = self.extract_patches(images, batch);
        let emb = self.apply_linear(&patches, batch * np, &self.layout.patch);

        let cls = slice(&self.params, &self.layout.cls);
        let pos = slice(&self.params, &self.layout.pos);
        let mut h = vec![0.0; rows * d];
        for b in 0..batch {
            for tok in 0..t {
                let dst = &mut h[(b * t + tok) * d..][..d];
                let src = if tok == 0 {
                    cls
                } else {
                    &emb[(b * np + tok - 1) * d..][..d]
                };
                for j in 0..d {
                    dst[j] = src[j] + pos[tok * d + j];
                }
            }
        }

        let cls_rows = |h: &[f64]| -> Vec<f64> {
            (0..batch)
                .flat_map(|b| h[b * t * d..b * t * d + d].iter().copied())
                .collect()
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut tap_head = None;
        for (k, bi) in self.layout.blocks.iter().enumerate() {
            let (ln1_out, ln1) = self.apply_norm(&h, rows, &bi.norm1);
            let qkv = self.apply_linear(&ln1_out, rows, &bi.qkv);
            let (probs, ctx) = layers::attention(&qkv, batch, t, d, cfg.heads);
            let attn = self.apply_linear(&ctx, rows, &bi.proj);
            let mut mid = h.clone();
            for (m, a) in mid.iter_mut().zip(&attn) {
                *m += a;
            }
            let (ln2_out, ln2) = self.apply_norm(&mid, rows, &bi.norm2);
            let fc1_pre = self.apply_linear(&ln2_out, rows, &bi.fc1);
            let fc1_act: Vec<f64> = fc1_pre.iter().map(|&v| layers::gelu(v)).collect();
            let mlp = self.apply_linear(&fc1_act, rows, &bi.fc2);
            for (m, a) in mid.iter_mut().zip(&mlp) {
                *m += a;
            }
            let input = std::mem::replace(&mut h, mid);
            if tap == Some(k + 1) {
                tap_head = Some((k + 1, self.head_forward(&cls_rows(&h), batch)));
            }
            blocks.push(BlockCache {
                input,
                ln1,
                ln1_out,
                qkv,
                probs,
                ctx,
                ln2,
                ln2_out,
                fc1_pre,
                fc1_act,
            });
        }
        let final_head = self.head_forward(&cls_rows(&h), batch);
        ForwardCache {
            batch,
            patches,
            blocks,
            final_head,
            tap: tap_head,
        }
    }

    /// Gradient of the head (final norm + linear) for one class-token set;
    /// returns the gradient with respect to the class-token rows.
    fn head_backward(&self, hc: &HeadCache, dlogits: &Logits, batch: usize, grads: &mut [f64]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let head = &self.layout.head;
        let (gw, gb) = split_pair(grads, &head.w, &head.b);
        let dnormed = layers::linear_backward(
            dlogits.as_slice(),
            &hc.normed,
            batch,
            d,
            slice(&self.params, &head.w),
            head.out,
            gw,
            gb,
            true,
        )
        .expect("dx requested");
        let mut dcls = vec![0.0; batch * d];
        let norm = &self.layout.norm;
        let (gw, gb) = split_pair(grads, &norm.w, &norm.b);
        layers::layer_norm_backward(&dnormed, &hc.norm, slice(&self.params, &norm.w), batch, d, &mut dcls, gw, gb);
        dcls
    }

    pub(super) fn backward_impl(
        &self,
        cache: &ForwardCache,
        d_final: &Logits,
        d_tap: Option<&Logits>,
        grads: &mut [f64],
    ) {
        let cfg = &self.config;
        let (d, t, np, hidden) = (cfg.embed_dim, cfg.seq_len(), cfg.num_patches(), cfg.mlp_hidden());
        let batch = cache.batch;
        let rows = batch * t;

        let add_cls = |dh: &mut [f64], dcls: &[f64]| {
            for b in 0..batch {
                for j in 0..d {
                    dh[b * t * d + j] += dcls[b * d + j];
                }
            }
        };

        let mut dh = vec![0.0; rows * d];
        let dcls = self.head_backward(&cache.final_head, d_final, batch, grads);
        add_cls(&mut dh, &dcls);
        let tap_grad = match (&cache.tap, d_tap) {
            (Some((i, hc)), Some(dt)) => Some((*i, self.head_backward(hc, dt, batch, grads))),
            _ => None,
        };

        for (k, (bi, bc)) in self.layout.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some((i, dcls)) = &tap_grad {
                if *i == k + 1 {
                    add_cls(&mut dh, dcls);
                }
            }
            // mlp branch
            let (gw, gb) = split_pair(grads, &bi.fc2.w, &bi.fc2.b);
            let mut dact = layers::linear_backward(
                &dh, &bc.fc1_act, rows, hidden, slice(&self.params, &bi.fc2.w), d, gw, gb, true,
            )
            .expect("dx");
            for (g, &x) in dact.iter_mut().zip(&bc.fc1_pre) {
                *g *= layers::gelu_grad(x);
            }
            let (gw, gb) = split_pair(grads, &bi.fc1.w, &bi.fc1.b);
            let dln2 = layers::linear_backward(
                &dact, &bc.ln2_out, rows, d, slice(&self.params, &bi.fc1.w), hidden, gw, gb, true,
            )
            .expect("dx");
            let mut dmid = dh;
            let (gw, gb) = split_pair(grads, &bi.norm2.w, &bi.norm2.b);
            layers::layer_norm_backward(&dln2, &bc.ln2, slice(&self.params, &bi.norm2.w), rows, d, &mut dmid, gw, gb);

            // attention branch
            let (gw, gb) = split_pair(grads, &bi.proj.w, &bi.proj.b);
            let dctx = layers::linear_backward(
                &dmid, &bc.ctx, rows, d, slice(&self.params, &bi.proj.w), d, gw, gb, true,
            )
            .expect("dx");
            let dqkv = layers::attention_backward(&dctx, &bc.qkv, &bc.probs, batch, t, d, cfg.heads);
            let (gw, gb) = split_pair(grads, &bi.qkv.w, &bi.qkv.b);
            let dln1 = layers::linear_backward(
                &dqkv, &bc.ln1_out, rows, d, slice(&self.params, &bi.qkv.w), 3 * d, gw, gb, true,
            )
            .expect("dx");
            let mut dx = dmid;
            let (gw, gb) = split_pair(grads, &bi.norm1.w, &bi.norm1.b);
            layers::layer_norm_backward(&dln1, &bc.ln1, slice(&self.params, &bi.norm1.w), rows, d, &mut dx, gw, gb);
            debug_assert_eq!(bc.input.len(), dx.len());
            dh = dx;
        }

        // token assembly
        let mut dpatch = vec![0.0; batch * np * d];
        {
            let gcls = &mut grads[self.layout.cls.clone()];
            for b in 0..batch {
                for j in 0..d {
                    gcls[j] += dh[b * t * d + j];
                }
            }
        }
        {
            let gpos = &mut grads[self.layout.pos.clone()];
            for b in 0..batch {
                for (g, v) in gpos.iter_mut().zip(&dh[b * t * d..(b + 1) * t * d]) {
                    *g += v;
                }
            }
        }
        for b in 0..batch {
            dpatch[b * np * d..(b + 1) * np * d].copy_from_slice(&dh[(b * t + 1) * d..(b + 1) * t * d]);
        }
        let pl = &self.layout.patch;
        let (gw, gb) = split_pair(grads, &pl.w, &pl.b);
        layers::linear_backward(
            &dpatch,
            &cache.patches,
            batch * np,
            pl.inp,
            slice(&self.params, &pl.w),
            d,
            gw,
            gb,
            false,
        );
    }
}

/// Two disjoint mutable sub-slices of the gradient buffer, `a` before `b`.
fn split_pair<'a>(
    grads: &'a mut [f64],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grads.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
