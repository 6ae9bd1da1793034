//! The frequency branch: patch embedding onto a 2D token grid, a stack of
//! global-filter blocks (learnable frequency mask + MLP under one residual),
//! and global average pooling to the branch feature vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{trunc_normal, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::vit::{add_linear, add_norm, NormParams, LN_EPS};

/// Architecture of the frequency branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GfConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl GfConfig {
    /// 19 blocks at embedding width 512 on the 14x14 grid of a 224-pixel
    /// image with 16-pixel patches.
    pub fn full_scale() -> Self {
        GfConfig {
            image_h: 224,
            image_w: 224,
            patch: 16,
            channels: 1,
            embed_dim: 512,
            depth: 19,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::usage(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::usage("depth, embed dim and channels must be positive"));
        }
        Ok(())
    }

    /// Token grid extents (H/P, W/P).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn token_count(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }
}

/// One block: layer norms, the complex filter mask, and the MLP.
#[derive(Debug, Clone)]
pub struct GfBlockParams {
    pub norm1: NormParams,
    pub filter_re: ParamId,
    pub filter_im: ParamId,
    pub norm2: NormParams,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct GfParams {
    pub config: GfConfig,
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub blocks: Vec<GfBlockParams>,
    pub final_norm: NormParams,
}

impl GfParams {
    /// Filter masks start as small random complex values (sigma 0.01) with
    /// the DC bin pinned to 1+0i; linear layers follow the ViT init.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: GfConfig,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let m = config.embed_dim;
        let (gh, gw) = config.grid();
        let (proj, proj_bias) = add_linear(store, &format!("{prefix}.patch_embed"), config.patch_dim(), m, rng)?;
        let hidden = config.mlp_hidden();
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let base = format!("{prefix}.block{l}");
            let norm1 = add_norm(store, &format!("{base}.norm1"), m)?;
            let mut kre = trunc_normal::<T, R>(&[gh, gw, m], 0.01, rng);
            let mut kim = trunc_normal::<T, R>(&[gh, gw, m], 0.01, rng);
            for ch in 0..m {
                kre.data_mut()[ch] = T::one();
                kim.data_mut()[ch] = T::zero();
            }
            let filter_re = store.add(format!("{base}.filter.re"), kre)?;
            let filter_im = store.add(format!("{base}.filter.im"), kim)?;
            let norm2 = add_norm(store, &format!("{base}.norm2"), m)?;
            let (mlp_w1, mlp_b1) = add_linear(store, &format!("{base}.mlp.fc1"), m, hidden, rng)?;
            let (mlp_w2, mlp_b2) = add_linear(store, &format!("{base}.mlp.fc2"), hidden, m, rng)?;
            blocks.push(GfBlockParams {
                norm1,
                filter_re,
                filter_im,
                norm2,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let final_norm = add_norm(store, &format!("{prefix}.norm"), m)?;
        Ok(GfParams {
            config,
            proj,
            proj_bias,
            blocks,
            final_norm,
        })
    }
}

/// Patch embedding arranged on the 2D grid: same projection as the spatial
/// branch, no class token, position implicit in grid layout.
pub fn gf_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GfParams,
    image: &Tensor<T>,
) -> Result<Var> {
    let expected = [params.config.image_h, params.config.image_w, params.config.channels];
    if image.shape() != expected {
        return Err(Error::shape(format!(
            "gf_embed: image {:?}, config expects {:?}",
            image.shape(),
            expected
        )));
    }
    let patches = crate::vit::patchify(image, params.config.patch)?;
    let pv = g.input(&patches)?;
    gf_embed_patches(g, store, params, pv)
}

pub(crate) fn gf_embed_patches<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GfParams,
    patches: Var,
) -> Result<Var> {
    let proj = g.param(store, params.proj)?;
    let bias = g.param(store, params.proj_bias)?;
    let projected = g.matmul(patches, proj)?;
    let projected = g.add_bias(projected, bias)?;
    let (gh, gw) = params.config.grid();
    g.reshape(projected, vec![gh, gw, params.config.embed_dim])
}

/// One residual block: `tokens + MLP(LN2(filter(LN1(tokens))))`.
pub fn gf_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &GfConfig,
    block: &GfBlockParams,
    tokens: Var,
) -> Result<Var> {
    let (gh, gw) = config.grid();
    let m = config.embed_dim;
    if g.shape(tokens) != [gh, gw, m] {
        return Err(Error::shape(format!(
            "gf_block: tokens {:?}, config grid [{gh}, {gw}, {m}]",
            g.shape(tokens)
        )));
    }
    let gamma1 = g.param(store, block.norm1.gamma)?;
    let beta1 = g.param(store, block.norm1.beta)?;
    let normed = g.layer_norm(tokens, gamma1, beta1, LN_EPS)?;

    let kre = g.param(store, block.filter_re)?;
    let kim = g.param(store, block.filter_im)?;
    let filtered = g.global_filter(normed, kre, kim)?;

    let gamma2 = g.param(store, block.norm2.gamma)?;
    let beta2 = g.param(store, block.norm2.beta)?;
    let normed2 = g.layer_norm(filtered, gamma2, beta2, LN_EPS)?;

    let flat = g.reshape(normed2, vec![gh * gw, m])?;
    let w1 = g.param(store, block.mlp_w1)?;
    let b1 = g.param(store, block.mlp_b1)?;
    let w2 = g.param(store, block.mlp_w2)?;
    let b2 = g.param(store, block.mlp_b2)?;
    let h = g.matmul(flat, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    let out = g.add_bias(out, b2)?;
    let out = g.reshape(out, vec![gh, gw, m])?;

    g.add(tokens, out)
}

/// Full branch forward: embed, blocks, final norm, global average pooling.
pub fn gfnet_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GfParams,
    image: &Tensor<T>,
) -> Result<Var> {
    let tokens = gf_embed(g, store, params, image)?;
    gfnet_forward_tokens(g, store, params, tokens)
}

pub(crate) fn gfnet_forward_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GfParams,
    mut tokens: Var,
) -> Result<Var> {
    for block in &params.blocks {
        tokens = gf_block(g, store, &params.config, block, tokens)?;
    }
    let gamma = g.param(store, params.final_norm.gamma)?;
    let beta = g.param(store, params.final_norm.beta)?;
    let normed = g.layer_norm(tokens, gamma, beta, LN_EPS)?;
    let (gh, gw) = params.config.grid();
    let flat = g.reshape(normed, vec![gh * gw, params.config.embed_dim])?;
    g.mean_rows(flat)
}
