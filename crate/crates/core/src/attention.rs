//! Global and region-based cross-attention.
//!
//! [`cross_attention`] is the usual scaled dot-product attention over token
//! matrices. [`region_cross_attention`] partitions the spatial latent into
//! non-overlapping regions and runs the same attention independently inside
//! each one, with projection weights shared across regions. Tokens never
//! attend across a region boundary, which is exactly the locality the
//! perturbation and masked-equivalence tests pin down.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Param, Tensor};

/// Query/key/value projections for one attention layer, shared across all
/// regions. Stored `[d_k, d]` and applied as `x . W^T`.
pub struct AttentionWeights {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
}

impl AttentionWeights {
    pub fn new(rng: &mut Rng, d: usize, d_k: usize) -> AttentionWeights {
        let std = 1.0 / libm::sqrtf(d as f32);
        AttentionWeights {
            w_q: Param::normal(rng, alloc::vec![d_k, d], std),
            w_k: Param::normal(rng, alloc::vec![d_k, d], std),
            w_v: Param::normal(rng, alloc::vec![d_k, d], std),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn d_k(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
    }

    pub fn params(&self) -> Vec<Param> {
        alloc::vec![self.w_q.clone(), self.w_k.clone(), self.w_v.clone()]
    }
}

/// Region extents in latent tokens. A `(rh, rw)` spec over an `H x W` grid
/// yields `(H/rh) * (W/rw)` regions of `rh * rw` tokens each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RegionSpec {
    pub region_height: usize,
    pub region_width: usize,
}

impl RegionSpec {
    pub fn new(region_height: usize, region_width: usize) -> Result<RegionSpec> {
        if region_height == 0 || region_width == 0 {
            return Err(Error::config("region extents must be positive"));
        }
        Ok(RegionSpec {
            region_height,
            region_width,
        })
    }

    /// Square regions of `side x side` tokens.
    pub fn square(side: usize) -> Result<RegionSpec> {
        RegionSpec::new(side, side)
    }

    /// Shrink the spec to fit a small grid (used when a feature level is
    /// smaller than the configured region).
    pub fn fit(self, h: usize, w: usize) -> RegionSpec {
        RegionSpec {
            region_height: self.region_height.min(h),
            region_width: self.region_width.min(w),
        }
    }
}

/// Token-index layout of a region partition over an `H x W` grid.
///
/// `regions[i]` lists the flat token indices of region `i` in row-major
/// order; regions themselves are in raster order. The partition is exact
/// and order-preserving: scattering the gathered regions back restores the
/// input bit-for-bit.
pub struct RegionPartition {
    pub h: usize,
    pub w: usize,
    pub tokens_per_region: usize,
    pub regions: Vec<Vec<usize>>,
}

/// Split an `H x W` token grid into non-overlapping regions.
pub fn partition_regions(h: usize, w: usize, spec: RegionSpec) -> Result<RegionPartition> {
    let (rh, rw) = (spec.region_height, spec.region_width);
    if rh == 0 || rw == 0 || h % rh != 0 || w % rw != 0 {
        return Err(Error::shape(format!(
            "region {rh}x{rw} does not divide grid {h}x{w}"
        )));
    }
    let mut regions = Vec::with_capacity((h / rh) * (w / rw));
    for ry in 0..h / rh {
        for rx in 0..w / rw {
            let mut idx = Vec::with_capacity(rh * rw);
            for y in 0..rh {
                for x in 0..rw {
                    idx.push((ry * rh + y) * w + rx * rw + x);
                }
            }
            regions.push(idx);
        }
    }
    Ok(RegionPartition {
        h,
        w,
        tokens_per_region: rh * rw,
        regions,
    })
}

impl RegionPartition {
    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    /// Flat element indices for gathering region `i` rows out of a
    /// `[H*W, d]` token matrix.
    pub fn element_indices(&self, i: usize, d: usize) -> Rc<Vec<usize>> {
        let mut idx = Vec::with_capacity(self.tokens_per_region * d);
        for &token in &self.regions[i] {
            for c in 0..d {
                idx.push(token * d + c);
            }
        }
        Rc::new(idx)
    }
}

/// Scaled dot-product cross-attention over token matrices:
/// queries from `z [N, d]`, keys and values from `c [M, d]`.
/// Returns the `[N, d_k]` update `A . V`.
pub fn cross_attention(
    g: &mut Graph,
    z: Tensor,
    c: Tensor,
    w: &AttentionWeights,
) -> Result<Tensor> {
    Ok(cross_attention_with_weights(g, z, c, w)?.1)
}

/// As [`cross_attention`], but also returns the attention matrix `A`
/// (each row sums to 1).
pub fn cross_attention_with_weights(
    g: &mut Graph,
    z: Tensor,
    c: Tensor,
    w: &AttentionWeights,
) -> Result<(Tensor, Tensor)> {
    let d = w.d_model();
    for (name, t) in [("query", z), ("condition", c)] {
        let s = g.shape(t);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape(format!(
                "{name} tokens must be [*, {d}], found {s:?}"
            )));
        }
    }
    let wq = g.param(&w.w_q);
    let wk = g.param(&w.w_k);
    let wv = g.param(&w.w_v);
    let wq_t = g.transpose(wq)?;
    let wk_t = g.transpose(wk)?;
    let wv_t = g.transpose(wv)?;
    let q = g.matmul(z, wq_t)?;
    let k = g.matmul(c, wk_t)?;
    let v = g.matmul(c, wv_t)?;
    let k_t = g.transpose(k)?;
    let scores = g.matmul(q, k_t)?;
    let scaled = g.scale(scores, 1.0 / libm::sqrtf(w.d_k() as f32));
    let attn = g.softmax_rows(scaled)?;
    let out = g.matmul(attn, v)?;
    Ok((attn, out))
}

/// Region-based cross-attention over token matrices.
///
/// `z` and `c` are `[H*W, d]` token matrices over the same `H x W` grid.
/// Each region attends only within itself; the shared projections come from
/// `w`. Returns the `[H*W, d_k]` update with every region scattered back in
/// place.
pub fn region_cross_attention_tokens(
    g: &mut Graph,
    z: Tensor,
    c: Tensor,
    h: usize,
    w_grid: usize,
    spec: RegionSpec,
    w: &AttentionWeights,
) -> Result<Tensor> {
    if g.shape(z) != g.shape(c) {
        return Err(Error::shape(format!(
            "latent tokens {:?} and condition tokens {:?} differ",
            g.shape(z),
            g.shape(c)
        )));
    }
    let d = w.d_model();
    let tokens = g.shape(z)[0];
    if tokens != h * w_grid || g.shape(z)[1] != d {
        return Err(Error::shape(format!(
            "token matrix {:?} does not cover a {h}x{w_grid} grid of {d}-dim tokens",
            g.shape(z)
        )));
    }
    let part = partition_regions(h, w_grid, spec)?;
    let d_k = w.d_k();
    let n_tok = part.tokens_per_region;
    let mut out: Option<Tensor> = None;
    for i in 0..part.region_count() {
        let in_idx = part.element_indices(i, d);
        let zr = g.gather(z, in_idx.clone(), alloc::vec![n_tok, d])?;
        let cr = g.gather(c, in_idx, alloc::vec![n_tok, d])?;
        let attended = cross_attention(g, zr, cr, w)?;
        let out_idx = part.element_indices(i, d_k);
        let placed = g.scatter(attended, out_idx, alloc::vec![tokens, d_k])?;
        out = Some(match out {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    Ok(out.expect("at least one region"))
}

/// Region-based cross-attention over spatial latents `[H, W, d]`.
pub fn region_cross_attention(
    g: &mut Graph,
    z: Tensor,
    c: Tensor,
    spec: RegionSpec,
    w: &AttentionWeights,
) -> Result<Tensor> {
    let s = g.shape(z).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "region attention expects [h, w, d], found {s:?}"
        )));
    }
    if g.shape(c) != s.as_slice() {
        return Err(Error::shape(format!(
            "latent {:?} and condition {:?} extents differ",
            s,
            g.shape(c)
        )));
    }
    let (h, w_grid, d) = (s[0], s[1], s[2]);
    let zt = g.reshape(z, alloc::vec![h * w_grid, d])?;
    let ct = g.reshape(c, alloc::vec![h * w_grid, d])?;
    let out = region_cross_attention_tokens(g, zt, ct, h, w_grid, spec, w)?;
    let d_k = w.d_k();
    g.reshape(out, alloc::vec![h, w_grid, d_k])
}
