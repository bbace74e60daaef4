//! Vision-transformer encoder: patch tokenization, transformer blocks,
//! final-LN CLS feature, projection head, and per-head attention maps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::GrayImage;
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{BoundParams, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Projection-head output dimension K.
    pub head_output_dim: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// ViT-S/8 geometry at 224x224.
    pub fn paper() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 8,
            depth: 12,
            embed_dim: 384,
            heads: 6,
            head_output_dim: 4096,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            mlp_ratio: 4,
        }
    }

    /// Desk-scale profile used by tests: 64x64 input, 4 blocks, 96-d embed.
    /// Head widths follow the paper profile scaled by embed_dim ratio.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            embed_dim: 96,
            heads: 4,
            head_output_dim: 256,
            head_hidden_dim: 512,
            head_bottleneck_dim: 64,
            mlp_ratio: 4,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid("EncoderConfig", format!("unknown profile {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(
                "EncoderConfig",
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(
                "EncoderConfig",
                format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        Ok(())
    }

    /// Patch-grid side length at the configured image size.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_dim
    }

    /// Default local-crop side: half the image, rounded down to a patch
    /// multiple (minimum one patch).
    pub fn local_size(&self) -> usize {
        let half = self.image_size / 2;
        ((half / self.patch_size).max(1)) * self.patch_size
    }
}

/// Initialize encoder + projection-head parameters under `prefix`
/// (e.g. "student." or "teacher.").
pub fn init_params(cfg: &EncoderConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut s = ParamStore::new();
    let put =
        |s: &mut ParamStore, name: String, t: Tensor| s.insert(format!("{prefix}{name}"), t);
    put(&mut s, "patch_proj.weight".into(), Tensor::trunc_normal(&[p2, c], 0.02, rng));
    put(&mut s, "patch_proj.bias".into(), Tensor::zeros(&[c]));
    put(&mut s, "embed.cls".into(), Tensor::trunc_normal(&[1, c], 0.02, rng));
    put(&mut s, "embed.pos".into(), Tensor::trunc_normal(&[cfg.tokens(), c], 0.02, rng));
    for b in 0..cfg.depth {
        let p = format!("block{b}.");
        put(&mut s, format!("{p}ln1.ln_gain"), Tensor::full(&[c], 1.0));
        put(&mut s, format!("{p}ln1.ln_bias"), Tensor::zeros(&[c]));
        put(&mut s, format!("{p}qkv.weight"), Tensor::trunc_normal(&[c, 3 * c], 0.02, rng));
        put(&mut s, format!("{p}qkv.bias"), Tensor::zeros(&[3 * c]));
        put(&mut s, format!("{p}attn_proj.weight"), Tensor::trunc_normal(&[c, c], 0.02, rng));
        put(&mut s, format!("{p}attn_proj.bias"), Tensor::zeros(&[c]));
        put(&mut s, format!("{p}ln2.ln_gain"), Tensor::full(&[c], 1.0));
        put(&mut s, format!("{p}ln2.ln_bias"), Tensor::zeros(&[c]));
        let hidden = cfg.mlp_ratio * c;
        put(&mut s, format!("{p}mlp.fc1.weight"), Tensor::trunc_normal(&[c, hidden], 0.02, rng));
        put(&mut s, format!("{p}mlp.fc1.bias"), Tensor::zeros(&[hidden]));
        put(&mut s, format!("{p}mlp.fc2.weight"), Tensor::trunc_normal(&[hidden, c], 0.02, rng));
        put(&mut s, format!("{p}mlp.fc2.bias"), Tensor::zeros(&[c]));
    }
    put(&mut s, "norm.ln_gain".into(), Tensor::full(&[c], 1.0));
    put(&mut s, "norm.ln_bias".into(), Tensor::zeros(&[c]));
    // projection head: D -> hidden -> bottleneck (L2 normalized) -> K, no
    // bias on the final map
    put(&mut s, "head.fc1.weight".into(), Tensor::trunc_normal(&[c, cfg.head_hidden_dim], 0.02, rng));
    put(&mut s, "head.fc1.bias".into(), Tensor::zeros(&[cfg.head_hidden_dim]));
    put(
        &mut s,
        "head.fc2.weight".into(),
        Tensor::trunc_normal(&[cfg.head_hidden_dim, cfg.head_bottleneck_dim], 0.02, rng),
    );
    put(&mut s, "head.fc2.bias".into(), Tensor::zeros(&[cfg.head_bottleneck_dim]));
    put(
        &mut s,
        "head.out.weight".into(),
        Tensor::trunc_normal(&[cfg.head_bottleneck_dim, cfg.head_output_dim], 0.02, rng),
    );
    Ok(s)
}

/// Flatten an image into a [tokens, patch_size^2] patch matrix.
pub fn patchify(img: &GrayImage, patch_size: usize) -> Result<Tensor> {
    if img.width != img.height || img.width % patch_size != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{}x{} not square-divisible by patch {}", img.width, img.height, patch_size),
        ));
    }
    let g = img.width / patch_size;
    let p2 = patch_size * patch_size;
    let mut data = Vec::with_capacity(g * g * p2);
    for py in 0..g {
        for px in 0..g {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    data.push(img.at(px * patch_size + x, py * patch_size + y));
                }
            }
        }
    }
    Tensor::new(vec![g * g, p2], data)
}

/// Bilinear interpolation matrix mapping a g0 x g0 grid of positional
/// embeddings to a g x g grid (rows sum to 1).
fn pos_interp_matrix(g0: usize, g: usize) -> Tensor {
    let mut m = Tensor::zeros(&[g * g, g0 * g0]);
    for oy in 0..g {
        let fy = if g == 1 { 0.0 } else { oy as f32 * (g0 - 1) as f32 / (g - 1) as f32 };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(g0 - 1);
        let wy = fy - y0 as f32;
        for ox in 0..g {
            let fx = if g == 1 { 0.0 } else { ox as f32 * (g0 - 1) as f32 / (g - 1) as f32 };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(g0 - 1);
            let wx = fx - x0 as f32;
            let row = (oy * g + ox) * g0 * g0;
            let d = m.data_mut();
            d[row + y0 * g0 + x0] += (1.0 - wy) * (1.0 - wx);
            d[row + y0 * g0 + x1] += (1.0 - wy) * wx;
            d[row + y1 * g0 + x0] += wy * (1.0 - wx);
            d[row + y1 * g0 + x1] += wy * wx;
        }
    }
    m
}

pub struct EncoderOutput {
    /// [batch, D] final-LN CLS embeddings.
    pub features: Var,
    /// Captured attention probabilities: [batch][head] -> [T, T], present
    /// when a capture block was requested.
    pub attention: Option<Vec<Vec<Tensor>>>,
}

/// Forward a batch of same-sized square images through the backbone.
/// Image side may differ from the configured size (multi-crop locals);
/// positional embeddings are bilinearly interpolated to match.
pub fn forward_features(
    g: &Graph,
    params: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    images: &[GrayImage],
    capture_block: Option<usize>,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset("encoder forward on empty batch".into()));
    }
    let side = images[0].width;
    if images.iter().any(|i| i.width != side || i.height != side) {
        return Err(Error::invalid("encode", "batch images must share one size"));
    }
    if let Some(b) = capture_block {
        if b >= cfg.depth {
            return Err(Error::invalid(
                "attention_map",
                format!("block index {b} out of range for depth {}", cfg.depth),
            ));
        }
    }
    let c = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = c / heads;
    let grid = side / cfg.patch_size;
    if side % cfg.patch_size != 0 || grid == 0 {
        return Err(Error::invalid(
            "patchify",
            format!("image side {side} not divisible by patch {}", cfg.patch_size),
        ));
    }
    let tp = grid * grid;
    let t = tp + 1;
    let batch = images.len();
    let var = |name: String| params.var(&name);

    // patch projection for the whole batch at once
    let mut patch_data = Vec::with_capacity(batch * tp * cfg.patch_size * cfg.patch_size);
    for img in images {
        patch_data.extend_from_slice(patchify(img, cfg.patch_size)?.data());
    }
    let patches = g.constant(Tensor::new(
        vec![batch * tp, cfg.patch_size * cfg.patch_size],
        patch_data,
    )?);
    let w = var(format!("{prefix}patch_proj.weight"))?;
    let b = var(format!("{prefix}patch_proj.bias"))?;
    let projected = g.add(g.matmul(patches, w)?, b)?;

    // positional embeddings, interpolated when the crop grid differs
    let pos = var(format!("{prefix}embed.pos"))?;
    let pos_cls = g.slice_rows(pos, 0, 1)?;
    let g0 = cfg.grid();
    let mut pos_patch = g.slice_rows(pos, 1, g0 * g0 + 1)?;
    if grid != g0 {
        let m = g.constant(pos_interp_matrix(g0, grid));
        pos_patch = g.matmul(m, pos_patch)?;
    }
    let cls = var(format!("{prefix}embed.cls"))?;
    let cls_tok = g.add(cls, pos_cls)?;

    let mut rows = Vec::with_capacity(batch * 2);
    for bi in 0..batch {
        let xb = g.slice_rows(projected, bi * tp, (bi + 1) * tp)?;
        rows.push(cls_tok);
        rows.push(g.add(xb, pos_patch)?);
    }
    let mut x = g.concat(&rows, 0)?; // [batch * t, c]

    let mut captured: Option<Vec<Vec<Tensor>>> = None;
    for blk in 0..cfg.depth {
        let p = format!("{prefix}block{blk}.");
        let ln1 = g.layer_norm(
            x,
            var(format!("{p}ln1.ln_gain"))?,
            var(format!("{p}ln1.ln_bias"))?,
            1e-5,
        )?;
        let qkv = g.add(g.matmul(ln1, var(format!("{p}qkv.weight"))?)?, var(format!("{p}qkv.bias"))?)?;
        let mut capture_here =
            if capture_block == Some(blk) { Some(vec![Vec::with_capacity(heads); batch]) } else { None };
        let mut out_rows = Vec::with_capacity(batch);
        for bi in 0..batch {
            let qkv_b = g.slice_rows(qkv, bi * t, (bi + 1) * t)?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = g.slice_cols(qkv_b, h * dh, (h + 1) * dh)?;
                let k = g.slice_cols(qkv_b, c + h * dh, c + (h + 1) * dh)?;
                let v = g.slice_cols(qkv_b, 2 * c + h * dh, 2 * c + (h + 1) * dh)?;
                let scores = g.scale(g.matmul_nt(q, k)?, 1.0 / (dh as f32).sqrt())?;
                let attn = g.softmax_t(scores, 1.0)?;
                if let Some(cap) = capture_here.as_mut() {
                    cap[bi].push((*g.value(attn)).clone());
                }
                head_outs.push(g.matmul(attn, v)?);
            }
            out_rows.push(g.concat(&head_outs, 1)?);
        }
        if let Some(cap) = capture_here.take() {
            captured = Some(cap);
        }
        let attn_out = g.concat(&out_rows, 0)?;
        let attn_out = g.add(
            g.matmul(attn_out, var(format!("{p}attn_proj.weight"))?)?,
            var(format!("{p}attn_proj.bias"))?,
        )?;
        x = g.add(x, attn_out)?;
        let ln2 = g.layer_norm(
            x,
            var(format!("{p}ln2.ln_gain"))?,
            var(format!("{p}ln2.ln_bias"))?,
            1e-5,
        )?;
        let h1 = g.gelu(g.add(
            g.matmul(ln2, var(format!("{p}mlp.fc1.weight"))?)?,
            var(format!("{p}mlp.fc1.bias"))?,
        )?)?;
        let h2 = g.add(
            g.matmul(h1, var(format!("{p}mlp.fc2.weight"))?)?,
            var(format!("{p}mlp.fc2.bias"))?,
        )?;
        x = g.add(x, h2)?;
    }
    let x = g.layer_norm(
        x,
        var(format!("{prefix}norm.ln_gain"))?,
        var(format!("{prefix}norm.ln_bias"))?,
        1e-5,
    )?;
    let cls_rows: Vec<Var> = (0..batch)
        .map(|bi| g.slice_rows(x, bi * t, bi * t + 1))
        .collect::<Result<_>>()?;
    let features = g.concat(&cls_rows, 0)?;
    Ok(EncoderOutput { features, attention: captured })
}

/// Projection head on top of backbone features: MLP with a L2-normalized
/// bottleneck and a bias-free final map to K logits.
pub fn forward_head(
    g: &Graph,
    params: &BoundParams,
    prefix: &str,
    features: Var,
) -> Result<Var> {
    let h = g.add(
        g.matmul(features, params.var(&format!("{prefix}head.fc1.weight"))?)?,
        params.var(&format!("{prefix}head.fc1.bias"))?,
    )?;
    let h = g.gelu(h)?;
    let h = g.add(
        g.matmul(h, params.var(&format!("{prefix}head.fc2.weight"))?)?,
        params.var(&format!("{prefix}head.fc2.bias"))?,
    )?;
    let h = g.l2_normalize(h)?;
    g.matmul(h, params.var(&format!("{prefix}head.out.weight"))?)
}

/// Inference-only encode of one frame: (feature vector, head logits).
pub fn encode(
    cfg: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
    frame: &GrayImage,
) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, false);
    let out = forward_features(&g, &bound, prefix, cfg, std::slice::from_ref(frame), None)?;
    let logits = forward_head(&g, &bound, prefix, out.features)?;
    let feat = (*g.value(out.features)).clone().reshaped(vec![cfg.embed_dim])?;
    let k = g.value(logits).numel();
    Ok((feat, (*g.value(logits)).clone().reshaped(vec![k])?))
}

/// Batched inference-only feature extraction.
pub fn encode_batch(
    cfg: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
    frames: &[GrayImage],
) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, false);
    let out = forward_features(&g, &bound, prefix, cfg, frames, None)?;
    let feats = g.value(out.features);
    let d = cfg.embed_dim;
    Ok((0..frames.len())
        .map(|i| Tensor::from_vec(feats.data()[i * d..(i + 1) * d].to_vec()))
        .collect())
}

/// Per-head CLS-to-patch attention of one block, reshaped to the patch
/// grid, plus the CLS self-attention mass per head.
pub struct AttentionMaps {
    /// One G x G grid per head.
    pub grids: Vec<Tensor>,
    pub cls_self_mass: Vec<f32>,
    pub grid_side: usize,
}

pub fn attention_map(
    cfg: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
    frame: &GrayImage,
    block_index: usize,
) -> Result<AttentionMaps> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, false);
    let out =
        forward_features(&g, &bound, prefix, cfg, std::slice::from_ref(frame), Some(block_index))?;
    let attn = out.attention.expect("capture requested");
    let per_head = &attn[0];
    let side = frame.width / cfg.patch_size;
    let mut grids = Vec::with_capacity(per_head.len());
    let mut cls_mass = Vec::with_capacity(per_head.len());
    for a in per_head {
        let (t, _) = a.dims2()?;
        let row = &a.data()[0..t]; // CLS query row
        cls_mass.push(row[0]);
        grids.push(Tensor::new(vec![side, side], row[1..].to_vec())?);
    }
    Ok(AttentionMaps { grids, cls_self_mass: cls_mass, grid_side: side })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn tiny_params(seed: u64) -> (EncoderConfig, ParamStore) {
        let cfg = EncoderConfig::tiny();
        let mut rng = SeedStream::new(seed).stream("enc_test");
        let p = init_params(&cfg, "t.", &mut rng).unwrap();
        (cfg, p)
    }

    #[test]
    fn patch_counts_match_geometry() {
        let img = GrayImage::zeros(224, 224);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[784, 64]);
        let img = GrayImage::zeros(64, 64);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[64, 64]);
        let img = GrayImage::zeros(63, 63);
        assert!(patchify(&img, 8).is_err());
    }

    #[test]
    fn encode_shapes_at_tiny_profile() {
        let (cfg, p) = tiny_params(0);
        let frame = GrayImage::zeros(64, 64);
        let (feat, logits) = encode(&cfg, &p, "t.", &frame).unwrap();
        assert_eq!(feat.shape(), &[96]);
        assert_eq!(logits.shape(), &[256]);
    }

    #[test]
    fn encode_is_deterministic() {
        let (cfg, p) = tiny_params(1);
        let mut rng = SeedStream::new(9).stream("img");
        let img = GrayImage::new(
            64,
            64,
            Tensor::uniform(&[64 * 64], 0.0, 1.0, &mut rng).into_data(),
        )
        .unwrap();
        let (f1, l1) = encode(&cfg, &p, "t.", &img).unwrap();
        let (f2, l2) = encode(&cfg, &p, "t.", &img).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn batch_order_is_covariant() {
        let (cfg, p) = tiny_params(2);
        let mut rng = SeedStream::new(3).stream("img");
        let a = GrayImage::new(64, 64, Tensor::uniform(&[4096], 0.0, 1.0, &mut rng).into_data())
            .unwrap();
        let b = GrayImage::new(64, 64, Tensor::uniform(&[4096], 0.0, 1.0, &mut rng).into_data())
            .unwrap();
        let ab = encode_batch(&cfg, &p, "t.", &[a.clone(), b.clone()]).unwrap();
        let ba = encode_batch(&cfg, &p, "t.", &[b, a]).unwrap();
        assert!(ab[0].max_abs_diff(&ba[1]) < 1e-6);
        assert!(ab[1].max_abs_diff(&ba[0]) < 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one_and_shape_contract() {
        let (cfg, p) = tiny_params(3);
        let mut rng = SeedStream::new(5).stream("img");
        let img = GrayImage::new(64, 64, Tensor::uniform(&[4096], 0.0, 1.0, &mut rng).into_data())
            .unwrap();
        let maps = attention_map(&cfg, &p, "t.", &img, cfg.depth - 1).unwrap();
        assert_eq!(maps.grids.len(), 4);
        for (grid, cls) in maps.grids.iter().zip(&maps.cls_self_mass) {
            assert_eq!(grid.shape(), &[8, 8]);
            let total: f32 = grid.data().iter().sum::<f32>() + cls;
            assert!((total - 1.0).abs() < 1e-5, "attention row sums to {total}");
        }
        assert!(attention_map(&cfg, &p, "t.", &img, cfg.depth).is_err());
    }

    #[test]
    fn zeroed_qkv_gives_uniform_attention() {
        let (cfg, mut p) = tiny_params(4);
        for b in 0..cfg.depth {
            for t in [format!("t.block{b}.qkv.weight"), format!("t.block{b}.qkv.bias")] {
                let tensor = p.get_mut(&t).unwrap();
                for v in tensor.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut rng = SeedStream::new(6).stream("img");
        let img = GrayImage::new(64, 64, Tensor::uniform(&[4096], 0.0, 1.0, &mut rng).into_data())
            .unwrap();
        let maps = attention_map(&cfg, &p, "t.", &img, 0).unwrap();
        let uniform = 1.0 / (cfg.tokens()) as f32;
        for grid in &maps.grids {
            for &v in grid.data() {
                assert!((v - uniform).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn local_crop_sizes_forward_via_pos_interpolation() {
        let (cfg, p) = tiny_params(7);
        let img = GrayImage::zeros(32, 32);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let out = forward_features(&g, &bound, "t.", &cfg, &[img], None).unwrap();
        assert_eq!(g.value(out.features).shape(), &[1, 96]);
    }
}
