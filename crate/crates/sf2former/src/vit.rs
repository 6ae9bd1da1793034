//! The spatial branch: patch extraction, linear projection with class token
//! and learnable position embeddings, and a stack of pre-norm transformer
//! encoder layers. The class-token row of the final layer, layer-normalized,
//! is the branch's image representation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{trunc_normal, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Architecture of the spatial branch.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl VitConfig {
    /// ViT-Base partner of the 12-layer / 16-pixel-patch setup.
    pub fn full_scale() -> Self {
        VitConfig {
            image_h: 224,
            image_w: 224,
            patch: 16,
            channels: 1,
            embed_dim: 768,
            layers: 12,
            heads: 12,
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
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::usage(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.channels == 0 {
            return Err(Error::usage("layers and channels must be positive"));
        }
        Ok(())
    }

    /// Patch count N = H*W/P^2, excluding the class token.
    pub fn patch_count(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub norm1: NormParams,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm2: NormParams,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// Parameter handles of the whole branch.
#[derive(Debug, Clone)]
pub struct VitParams {
    pub config: VitConfig,
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub pos: ParamId,
    pub class_token: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub final_norm: NormParams,
}

pub(crate) fn add_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
) -> Result<NormParams> {
    let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], T::one()))?;
    let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
    Ok(NormParams { gamma, beta })
}

pub(crate) fn add_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = store.add(format!("{name}.weight"), trunc_normal(&[rows, cols], 0.02, rng))?;
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cols]))?;
    Ok((w, b))
}

impl VitParams {
    /// Registers all branch parameters under `prefix` with seeded truncated
    /// normal (sigma 0.02) weights, zero biases, identity layer norms.
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: VitConfig,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let (proj, proj_bias) = add_linear(store, &format!("{prefix}.patch_embed"), config.patch_dim(), d, rng)?;
        let pos = store.add(
            format!("{prefix}.pos_embed"),
            trunc_normal(&[config.tokens(), d], 0.02, rng),
        )?;
        let class_token = store.add(format!("{prefix}.class_token"), trunc_normal(&[1, d], 0.02, rng))?;
        let hidden = config.mlp_hidden();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let base = format!("{prefix}.layer{l}");
            let norm1 = add_norm(store, &format!("{base}.norm1"), d)?;
            let (wq, bq) = add_linear(store, &format!("{base}.attn.q"), d, d, rng)?;
            let (wk, bk) = add_linear(store, &format!("{base}.attn.k"), d, d, rng)?;
            let (wv, bv) = add_linear(store, &format!("{base}.attn.v"), d, d, rng)?;
            let (wo, bo) = add_linear(store, &format!("{base}.attn.out"), d, d, rng)?;
            let norm2 = add_norm(store, &format!("{base}.norm2"), d)?;
            let (mlp_w1, mlp_b1) = add_linear(store, &format!("{base}.mlp.fc1"), d, hidden, rng)?;
            let (mlp_w2, mlp_b2) = add_linear(store, &format!("{base}.mlp.fc2"), hidden, d, rng)?;
            layers.push(EncoderLayerParams {
                norm1,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                norm2,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let final_norm = add_norm(store, &format!("{prefix}.norm"), d)?;
        Ok(VitParams {
            config,
            proj,
            proj_bias,
            pos,
            class_token,
            layers,
            final_norm,
        })
    }
}

/// `[H, W, C] -> [N, P*P*C]` in row-major patch order (top-left to
/// bottom-right), each row the row-major flattening of one patch.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = match image.shape() {
        [h, w, c] => [*h, *w, *c],
        other => return Err(Error::shape(format!("patchify: image {other:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "patchify: image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = image.data();
    let mut out = vec![T::zero(); gh * gw * pd];
    for bi in 0..gh {
        for bj in 0..gw {
            let row = bi * gw + bj;
            for pr in 0..patch {
                for pc in 0..patch {
                    for ch in 0..c {
                        let sidx = ((bi * patch + pr) * w + bj * patch + pc) * c + ch;
                        out[row * pd + (pr * patch + pc) * c + ch] = src[sidx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Patch rows through the linear projection, class token prepended, position
/// embeddings added: the encoder's input sequence.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &VitParams,
    patches: Var,
) -> Result<Var> {
    let proj = g.param(store, params.proj)?;
    let bias = g.param(store, params.proj_bias)?;
    let projected = g.matmul(patches, proj)?;
    let projected = g.add_bias(projected, bias)?;
    let class = g.param(store, params.class_token)?;
    let seq = g.concat_rows(class, projected)?;
    let pos = g.param(store, params.pos)?;
    g.add(seq, pos)
}

/// One pre-norm encoder layer:
/// `z' = MSA(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &VitConfig,
    layer: &EncoderLayerParams,
    z: Var,
) -> Result<Var> {
    encoder_layer_probed(g, store, config, layer, z).map(|(out, _att)| out)
}

/// `encoder_layer` that also exposes the post-softmax attention tensor
/// `[heads, N+1, N+1]` for inspection.
pub fn encoder_layer_probed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &VitConfig,
    layer: &EncoderLayerParams,
    z: Var,
) -> Result<(Var, Var)> {
    let gamma1 = g.param(store, layer.norm1.gamma)?;
    let beta1 = g.param(store, layer.norm1.beta)?;
    let normed = g.layer_norm(z, gamma1, beta1, LN_EPS)?;

    let (att_out, att) = attention(g, store, config, layer, normed)?;
    let z_mid = g.add(att_out, z)?;

    let gamma2 = g.param(store, layer.norm2.gamma)?;
    let beta2 = g.param(store, layer.norm2.beta)?;
    let normed2 = g.layer_norm(z_mid, gamma2, beta2, LN_EPS)?;
    let mlp_out = mlp(g, store, layer, normed2)?;
    let out = g.add(mlp_out, z_mid)?;
    Ok((out, att))
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &VitConfig,
    layer: &EncoderLayerParams,
    x: Var,
) -> Result<(Var, Var)> {
    let heads = config.heads;
    let scale = T::from_f64(1.0 / (config.head_dim() as f64).sqrt());

    let project = |g: &mut Graph<T>, w, b| -> Result<Var> {
        let wv = g.param(store, w)?;
        let bv = g.param(store, b)?;
        let y = g.matmul(x, wv)?;
        g.add_bias(y, bv)
    };
    let q = project(g, layer.wq, layer.bq)?;
    let k = project(g, layer.wk, layer.bk)?;
    let v = project(g, layer.wv, layer.bv)?;

    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let kt = g.transpose_last(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, scale)?;
    let att = g.softmax(scores, 2)?;
    let ctx = g.matmul(att, vh)?;
    let merged = g.merge_heads(ctx)?;

    let wo = g.param(store, layer.wo)?;
    let bo = g.param(store, layer.bo)?;
    let out = g.matmul(merged, wo)?;
    let out = g.add_bias(out, bo)?;
    Ok((out, att))
}

fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layer: &EncoderLayerParams,
    x: Var,
) -> Result<Var> {
    let w1 = g.param(store, layer.mlp_w1)?;
    let b1 = g.param(store, layer.mlp_b1)?;
    let w2 = g.param(store, layer.mlp_w2)?;
    let b2 = g.param(store, layer.mlp_b2)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_bias(out, b2)
}

/// Full branch forward from an `[H, W, C]` image to the `[D]` representation.
pub fn vit_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &VitParams,
    image: &Tensor<T>,
) -> Result<Var> {
    let expected = [params.config.image_h, params.config.image_w, params.config.channels];
    if image.shape() != expected {
        return Err(Error::shape(format!(
            "vit_forward: image {:?}, config expects {:?}",
            image.shape(),
            expected
        )));
    }
    let patches = patchify(image, params.config.patch)?;
    let pv = g.input(&patches)?;
    vit_forward_patches(g, store, params, pv)
}

/// Forward from already-extracted patch rows (used by permutation tests).
pub fn vit_forward_patches<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &VitParams,
    patches: Var,
) -> Result<Var> {
    let mut z = embed(g, store, params, patches)?;
    for layer in &params.layers {
        z = encoder_layer(g, store, &params.config, layer, z)?;
    }
    let class_row = g.take_row(z, 0)?;
    let gamma = g.param(store, params.final_norm.gamma)?;
    let beta = g.param(store, params.final_norm.beta)?;
    g.layer_norm(class_row, gamma, beta, LN_EPS)
}
