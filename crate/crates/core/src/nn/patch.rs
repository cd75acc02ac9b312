use alloc::format;
use alloc::vec::Vec;

use super::{Ctx, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::autograd::Var;
use crate::rng::StreamRng;
use crate::{Error, Result, Scalar, Tensor};

/// Number of `p×p` patches in an `h×w` image.
pub fn num_patches(h: usize, w: usize, p: usize) -> Result<usize> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(
            "patch_embed",
            format!("image {h}x{w} is not divisible into {p}x{p} patches"),
        ));
    }
    Ok((h / p) * (w / p))
}

/// Splits `[C×H×W]` or `[B×C×H×W]` images into rows of flattened patches,
/// `[B·T × C·p·p]`. Patches run row-major over the grid; within a patch the
/// layout is channel, then row, then column.
pub fn extract_patches<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = match *images.shape() {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "extract_patches",
                shape: images.shape().to_vec(),
                reason: "expected [C, H, W] or [B, C, H, W]",
            })
        }
    };
    let t = num_patches(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for n in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for i in 0..p {
                        let base = ((n * c + ch) * h + gy * p + i) * w + gx * p;
                        out.extend_from_slice(&src[base..base + p]);
                    }
                }
            }
        }
    }
    Tensor::new([b * t, c * p * p], out)
}

/// Per-patch layer norm, linear projection to width `d` and learned
/// positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub norm: LayerNorm,
    pub proj: Linear,
    pub pos: ParamId,
    pub tokens: usize,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        image_hw: (usize, usize),
        patch_size: usize,
        dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let tokens = num_patches(image_hw.0, image_hw.1, patch_size)?;
        let patch_len = channels * patch_size * patch_size;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), patch_len);
        let proj = Linear::new(store, &format!("{name}.proj"), patch_len, dim, true, rng);
        let pos = store.add_trunc_normal(format!("{name}.pos"), &[tokens, dim], INIT_STD, rng);
        Ok(PatchEmbed {
            norm,
            proj,
            pos,
            tokens,
            patch_size,
        })
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params() + self.proj.num_params() + self.tokens * self.proj.out_dim
    }

    /// Embeds patch rows produced by [`extract_patches`].
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, patches: Var) -> Result<Var> {
        let rows = ctx.tape.value(patches).rows();
        if rows % self.tokens != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("{rows} patch rows do not split into images of {} patches", self.tokens),
            ));
        }
        let x = self.norm.forward(ctx, patches)?;
        let x = self.proj.forward(ctx, x)?;
        let idx: Vec<usize> = (0..rows).map(|r| r % self.tokens).collect();
        let pos = ctx.tape.gather_rows(ctx.p(self.pos), &idx)?;
        ctx.tape.add(x, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradient_check, Tape};
    use crate::rng::{standard_normal, SeedTree};

    #[test]
    fn token_counts() {
        assert_eq!(num_patches(32, 32, 16).unwrap(), 4);
        assert_eq!(num_patches(224, 224, 16).unwrap(), 196);
        assert!(num_patches(30, 32, 16).is_err());
    }

    #[test]
    fn patches_are_contiguous_blocks() {
        let img = Tensor::<f64>::from_fn([2, 4, 4], |i| i as f64);
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        // top-right patch: channel 0 rows 0..2 cols 2..4, then channel 1
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
        let batch = Tensor::<f64>::from_fn([3, 1, 2, 2], |i| i as f64);
        assert_eq!(extract_patches(&batch, 1).unwrap().shape(), &[12, 1]);
    }

    #[test]
    fn zero_image_gives_projection_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(1).stream("pe");
        let pe = PatchEmbed::new(&mut store, "pe", 3, (32, 32), 16, 8, &mut rng).unwrap();
        store.get_mut(pe.pos).data_mut().fill(0.0);
        let bias = Tensor::from_fn([8], |i| 0.1 * i as f64);
        *store.get_mut(pe.proj.bias.unwrap()) = bias.clone();
        let patches = extract_patches(&Tensor::zeros([3, 32, 32]), 16).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let x = ctx.tape.constant(patches);
        let y = pe.forward(&mut ctx, x).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[4, 8]);
        for r in 0..4 {
            assert_eq!(y.row(r), bias.data());
        }
    }

    #[test]
    fn gradient_check_passes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedTree::new(2).stream("pe");
        let pe = PatchEmbed::new(&mut store, "pe", 2, (4, 4), 2, 3, &mut rng).unwrap();
        let theta: Vec<Tensor<f64>> = store
            .tensors()
            .iter()
            .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| standard_normal::<f64, _>(&mut rng) * 0.5))
            .collect();
        let img = Tensor::from_fn([2, 2, 4, 4], |_| standard_normal(&mut rng));
        let patches = extract_patches(&img, 2).unwrap();
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let mut ctx = Ctx::on_leaves(tape, vars)?;
            let x = ctx.tape.constant(patches.clone());
            let y = pe.forward(&mut ctx, x)?;
            let y = ctx.tape.gelu(y)?;
            ctx.tape.sum(y)
        };
        let report = gradient_check(f, &theta, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
