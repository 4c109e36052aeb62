use super::layers::{
    gelu_backward, gelu_matrix, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_rows, softmax_rows_backward, LayerNormCache,
};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Matrix;

/// A `[cls]` feature followed by `N` patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub cls: Vec<f64>,
    pub patches: Matrix,
    /// Spatial layout of `patches`; `None` once tokens have been pooled.
    pub grid: Option<(usize, usize)>,
}

impl TokenSequence {
    pub fn new(cls: Vec<f64>, patches: Matrix, grid: Option<(usize, usize)>) -> Result<Self> {
        if patches.rows() == 0 || patches.cols() == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if cls.len() != patches.cols() {
            return Err(Error::shape(format!(
                "cls has {} features, patches have {}",
                cls.len(),
                patches.cols()
            )));
        }
        if let Some((h, w)) = grid {
            if h * w != patches.rows() {
                return Err(Error::shape(format!(
                    "grid {h}x{w} does not hold {} tokens",
                    patches.rows()
                )));
            }
        }
        Ok(TokenSequence { cls, patches, grid })
    }

    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.patches.cols()
    }
}

/// Final-block self-attention, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `(N+1) × (N+1)`, row-stochastic; index 0 is `[cls]`.
    pub full: Matrix,
    /// `[cls]` → patch attention renormalised to sum to one.
    pub cls_row: Vec<f64>,
    /// Patch-to-patch block `A_p`, `N × N`.
    pub patch_block: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub f_c: Vec<f64>,
    pub f_p: Matrix,
    pub attention: AttentionRecord,
    /// Head output `P(x)` (logits over `D′`).
    pub projection: Vec<f64>,
}

/// Upstream gradients on every differentiable output of [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub f_c: Vec<f64>,
    pub f_p: Matrix,
    pub projection: Vec<f64>,
    /// Gradient on [`AttentionRecord::cls_row`].
    pub cls_attention: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros_for(out: &EncoderOutput) -> Self {
        OutputGrad {
            f_c: vec![0.0; out.f_c.len()],
            f_p: Matrix::zeros(out.f_p.rows(), out.f_p.cols()),
            projection: vec![0.0; out.projection.len()],
            cls_attention: vec![0.0; out.attention.cls_row.len()],
        }
    }

    pub fn add_assign(&mut self, other: &OutputGrad) -> Result<()> {
        if self.f_c.len() != other.f_c.len()
            || self.projection.len() != other.projection.len()
            || self.cls_attention.len() != other.cls_attention.len()
        {
            return Err(Error::shape("output gradients differ in shape"));
        }
        add_into(&mut self.f_c, &other.f_c);
        self.f_p.add_assign(&other.f_p)?;
        add_into(&mut self.projection, &other.projection);
        add_into(&mut self.cls_attention, &other.cls_attention);
        Ok(())
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Gradient on the input tokens of [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrad {
    pub cls: Vec<f64>,
    pub patches: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosTable {
    Global,
    Local,
}

/// What [`patch_embed_backward`] needs from the embedding step.
pub struct EmbedCache {
    patches: Matrix,
    table: PosTable,
}

struct BlockCache {
    ln1: LayerNormCache,
    h1: Matrix,
    qkv: Matrix,
    attn: Vec<Matrix>,
    concat: Matrix,
    ln2: LayerNormCache,
    h2: Matrix,
    fc1_pre: Matrix,
    fc1_act: Matrix,
}

struct HeadCache {
    input: Matrix,
    z1: Matrix,
    a1: Matrix,
    z2: Matrix,
    a2: Matrix,
}

/// Intermediate state of one [`forward`] call.
pub struct ForwardCache {
    stamp: (u64, u64),
    tokens: usize,
    blocks: Vec<BlockCache>,
    head: HeadCache,
    cls_row_raw_sum: f64,
    cls_row: Vec<f64>,
}

/// Splits an image into `P × P` patches, embeds them linearly and adds the
/// positional table matching the resulting grid. The `[cls]` slot is `t_c`.
pub fn patch_embed(image: &Image, params: &ModelParams) -> Result<(TokenSequence, EmbedCache)> {
    let patch = params
        .config
        .patch
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("this transformer set has no patch embedding".into()))?;
    let embed = params.embed().expect("patch config implies embedding");
    let p = patch.patch_size;
    if image.width() % p != 0 || image.height() % p != 0 {
        return Err(Error::shape(format!(
            "{}x{} image is not divisible into {p}x{p} patches",
            image.width(),
            image.height()
        )));
    }
    if image.channels() != patch.channels {
        return Err(Error::shape(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            patch.channels
        )));
    }
    let grid = (image.height() / p, image.width() / p);
    let (table, pos) = if grid == patch.global_grid {
        (PosTable::Global, &embed.pos_global)
    } else if grid == patch.local_grid {
        (PosTable::Local, &embed.pos_local)
    } else {
        return Err(Error::shape(format!(
            "token grid {grid:?} matches neither the global {:?} nor the local {:?} table",
            patch.global_grid, patch.local_grid
        )));
    };

    let n = grid.0 * grid.1;
    let c = image.channels();
    let mut flat = Matrix::zeros(n, patch.patch_dim());
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let row = flat.row_mut(gy * grid.1 + gx);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    let pixel = image.pixel(gx * p + px, gy * p + py);
                    row[k..k + c].copy_from_slice(pixel);
                    k += c;
                }
            }
        }
    }
    let mut tokens = linear(&flat, &embed.patch_weight, &embed.patch_bias)?;
    tokens.add_assign(pos)?;
    let seq = TokenSequence::new(embed.cls_token.as_slice().to_vec(), tokens, Some(grid))?;
    Ok((seq, EmbedCache { patches: flat, table }))
}

/// Accumulates embedding gradients from a gradient on the embedded tokens.
pub fn patch_embed_backward(cache: &EmbedCache, grad: &TokenGrad, grads: &mut ModelParams) -> Result<()> {
    let e = grads
        .embed_mut()
        .ok_or_else(|| Error::InvalidArgument("gradient holder has no patch embedding".into()))?;
    e.patch_weight.add_assign(&cache.patches.t_matmul(&grad.patches)?)?;
    for (b, s) in e.patch_bias.as_mut_slice().iter_mut().zip(grad.patches.column_sums()) {
        *b += s;
    }
    match cache.table {
        PosTable::Global => e.pos_global.add_assign(&grad.patches)?,
        PosTable::Local => e.pos_local.add_assign(&grad.patches)?,
    }
    add_into(e.cls_token.as_mut_slice(), &grad.cls);
    Ok(())
}

/// Runs the pre-norm transformer blocks and the projection head.
pub fn forward(tokens: &TokenSequence, params: &ModelParams) -> Result<(EncoderOutput, ForwardCache)> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    if tokens.dim() != d {
        return Err(Error::shape(format!(
            "tokens have {} features, model expects {d}",
            tokens.dim()
        )));
    }
    if params.blocks().is_empty() {
        return Err(Error::InvalidArgument("encoder needs at least one block".into()));
    }
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n1 = tokens.len() + 1;

    let mut x = tokens.patches.prepend_row(&tokens.cls)?;
    let mut block_caches = Vec::with_capacity(params.blocks().len());
    for block in params.blocks() {
        let (h1, ln1) = layer_norm(&x, &block.ln1_gain, &block.ln1_bias);
        let qkv = linear(&h1, &block.qkv_weight, &block.qkv_bias)?;
        let mut concat = Matrix::zeros(n1, d);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice_cols(h * dh, (h + 1) * dh);
            let k = qkv.slice_cols(d + h * dh, d + (h + 1) * dh);
            let v = qkv.slice_cols(2 * d + h * dh, 2 * d + (h + 1) * dh);
            let mut a = q.matmul_t(&k)?;
            a.scale(scale);
            softmax_rows(&mut a);
            concat.set_cols(h * dh, &a.matmul(&v)?);
            attn.push(a);
        }
        let attn_out = linear(&concat, &block.proj_weight, &block.proj_bias)?;
        x.add_assign(&attn_out)?;

        let (h2, ln2) = layer_norm(&x, &block.ln2_gain, &block.ln2_bias);
        let fc1_pre = linear(&h2, &block.fc1_weight, &block.fc1_bias)?;
        let fc1_act = gelu_matrix(&fc1_pre);
        let mlp_out = linear(&fc1_act, &block.fc2_weight, &block.fc2_bias)?;
        x.add_assign(&mlp_out)?;

        block_caches.push(BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            concat,
            ln2,
            h2,
            fc1_pre,
            fc1_act,
        });
    }

    let last = block_caches.last().expect("at least one block");
    let mut full = Matrix::zeros(n1, n1);
    for a in &last.attn {
        full.add_assign(a)?;
    }
    full.scale(1.0 / heads as f64);
    let raw = &full.row(0)[1..];
    let raw_sum: f64 = raw.iter().sum();
    let cls_row: Vec<f64> = raw.iter().map(|v| v / raw_sum).collect();
    let patch_block = Matrix::from_fn(n1 - 1, n1 - 1, |i, j| full[(i + 1, j + 1)]);

    let f_c = x.row(0).to_vec();
    let f_p = x.slice_rows(1, n1);

    let hp = params.head();
    let input = Matrix::row_vector(&f_c);
    let z1 = linear(&input, &hp.fc1_weight, &hp.fc1_bias)?;
    let a1 = gelu_matrix(&z1);
    let z2 = linear(&a1, &hp.fc2_weight, &hp.fc2_bias)?;
    let a2 = gelu_matrix(&z2);
    let projection = linear(&a2, &hp.out_weight, &hp.out_bias)?.into_vec();

    let output = EncoderOutput {
        f_c,
        f_p,
        attention: AttentionRecord {
            full,
            cls_row: cls_row.clone(),
            patch_block,
        },
        projection,
    };
    let cache = ForwardCache {
        stamp: params.stamp(),
        tokens: n1 - 1,
        blocks: block_caches,
        head: HeadCache { input, z1, a1, z2, a2 },
        cls_row_raw_sum: raw_sum,
        cls_row,
    };
    Ok((output, cache))
}

/// Exact adjoint of [`forward`]: parameter gradients and input-token gradients.
pub fn backward(
    grad: &OutputGrad,
    cache: &ForwardCache,
    params: &ModelParams,
) -> Result<(ModelParams, TokenGrad)> {
    if cache.stamp != params.stamp() {
        return Err(Error::StaleCache);
    }
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n1 = cache.tokens + 1;
    if grad.f_c.len() != d
        || grad.f_p.shape() != (n1 - 1, d)
        || grad.projection.len() != cfg.proj_dim
        || grad.cls_attention.len() != n1 - 1
    {
        return Err(Error::shape("upstream gradient does not match the forward outputs"));
    }

    let mut grads = params.zeros_like();

    let (hp, hc) = (params.head(), &cache.head);
    let dproj = Matrix::row_vector(&grad.projection);
    let d_fc_from_head = {
        let gh = grads.head_mut();
        let da2 = linear_backward(&hc.a2, &hp.out_weight, &dproj, &mut gh.out_weight, &mut gh.out_bias)?;
        let dz2 = gelu_backward(&hc.z2, &da2);
        let da1 = linear_backward(&hc.a1, &hp.fc2_weight, &dz2, &mut gh.fc2_weight, &mut gh.fc2_bias)?;
        let dz1 = gelu_backward(&hc.z1, &da1);
        linear_backward(&hc.input, &hp.fc1_weight, &dz1, &mut gh.fc1_weight, &mut gh.fc1_bias)?
    };

    let mut dx = grad.f_p.prepend_row(&grad.f_c)?;
    for (o, g) in dx.row_mut(0).iter_mut().zip(d_fc_from_head.as_slice()) {
        *o += g;
    }

    // Pull the renormalised cls-row gradient back onto the head-averaged row.
    let inner: f64 = cache.cls_row.iter().zip(&grad.cls_attention).map(|(a, g)| a * g).sum();
    let d_raw: Vec<f64> = grad
        .cls_attention
        .iter()
        .map(|g| (g - inner) / cache.cls_row_raw_sum)
        .collect();

    let n_blocks = params.blocks().len();
    for (bi, (block, bc)) in params.blocks().iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grads.blocks_mut()[bi];

        let dact = linear_backward(&bc.fc1_act, &block.fc2_weight, &dx, &mut gb.fc2_weight, &mut gb.fc2_bias)?;
        let dpre = gelu_backward(&bc.fc1_pre, &dact);
        let dh2 = linear_backward(&bc.h2, &block.fc1_weight, &dpre, &mut gb.fc1_weight, &mut gb.fc1_bias)?;
        dx.add_assign(&layer_norm_backward(&bc.ln2, &block.ln2_gain, &dh2, &mut gb.ln2_gain, &mut gb.ln2_bias))?;

        let dconcat =
            linear_backward(&bc.concat, &block.proj_weight, &dx, &mut gb.proj_weight, &mut gb.proj_bias)?;
        let mut dqkv = Matrix::zeros(n1, 3 * d);
        for h in 0..heads {
            let q = bc.qkv.slice_cols(h * dh, (h + 1) * dh);
            let k = bc.qkv.slice_cols(d + h * dh, d + (h + 1) * dh);
            let v = bc.qkv.slice_cols(2 * d + h * dh, 2 * d + (h + 1) * dh);
            let a = &bc.attn[h];
            let dout = dconcat.slice_cols(h * dh, (h + 1) * dh);
            let mut da = dout.matmul_t(&v)?;
            if bi + 1 == n_blocks {
                for (j, g) in d_raw.iter().enumerate() {
                    da[(0, j + 1)] += g / heads as f64;
                }
            }
            let dv = a.t_matmul(&dout)?;
            let mut ds = softmax_rows_backward(a, &da);
            ds.scale(scale);
            let dq = ds.matmul(&k)?;
            let dk = ds.t_matmul(&q)?;
            dqkv.set_cols(h * dh, &dq);
            dqkv.set_cols(d + h * dh, &dk);
            dqkv.set_cols(2 * d + h * dh, &dv);
        }
        let dh1 = linear_backward(&bc.h1, &block.qkv_weight, &dqkv, &mut gb.qkv_weight, &mut gb.qkv_bias)?;
        dx.add_assign(&layer_norm_backward(&bc.ln1, &block.ln1_gain, &dh1, &mut gb.ln1_gain, &mut gb.ln1_bias))?;
    }

    let token_grad = TokenGrad {
        cls: dx.row(0).to_vec(),
        patches: dx.slice_rows(1, n1),
    };
    Ok((grads, token_grad))
}
