//! Dual-level VLAD aggregation: per-frame residual encoding against
//! learned centroids, a temperature-controlled frame-selection softmax,
//! intra-normalized pooling, and a linear video-level classifier. Also
//! the GlobMAX and NetVLAD baselines.

use rand::Rng;

use crate::data::Label;
use crate::distill::LossRecord;
use crate::error::{Error, Result};
use crate::finetune::NUM_CLASSES;
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{BoundParams, ParamStore};
use crate::rng::SeedStream;

/// Cluster count equals label count.
pub const NUM_CLUSTERS: usize = NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    /// Dual-level VLAD: cluster- and frame-level soft assignment.
    Dual,
    /// Uniform frame weights (plain NetVLAD pooling).
    NetVlad,
}

#[derive(Debug, Clone)]
pub struct VideoClsConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frame-selection temperature tau'.
    pub tau_frame: f32,
    /// Apply a final whole-vector L2 norm after per-block normalization.
    pub whole_norm: bool,
    pub kind: AggregatorKind,
}

impl VideoClsConfig {
    /// Table-1 VideoCls recipe.
    pub fn defaults() -> Self {
        VideoClsConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 200,
            batch_size: 32,
            tau_frame: 0.1,
            whole_norm: true,
            kind: AggregatorKind::Dual,
        }
    }
}

/// Hidden width of the frame-assigner MLP: ceil(|Y|*D / 4).
pub fn framer_hidden(feature_dim: usize) -> usize {
    (NUM_CLUSTERS * feature_dim).div_ceil(4)
}

/// k-means over frame features (k = NUM_CLUSTERS, multiple seeded
/// restarts); returns the best centroid set by within-cluster distance.
pub fn kmeans_centroids(features: &[Tensor], restarts: usize, seeds: &SeedStream) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::EmptyDataset("kmeans needs features".into()));
    }
    let d = features[0].numel();
    let n = features.len();
    let mut best: Option<(f32, Vec<f32>)> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = seeds.stream_indexed("kmeans", restart as u64);
        let mut centroids: Vec<Vec<f32>> = (0..NUM_CLUSTERS)
            .map(|_| features[rng.gen_range(0..n)].data().to_vec())
            .collect();
        let mut assign = vec![0usize; n];
        for _ in 0..50 {
            let mut changed = false;
            for (i, f) in features.iter().enumerate() {
                let mut best_j = 0;
                let mut best_d = f32::INFINITY;
                for (j, c) in centroids.iter().enumerate() {
                    let dist: f32 =
                        f.data().iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_d {
                        best_d = dist;
                        best_j = j;
                    }
                }
                if assign[i] != best_j {
                    assign[i] = best_j;
                    changed = true;
                }
            }
            for (j, c) in centroids.iter_mut().enumerate() {
                let members: Vec<&Tensor> = features
                    .iter()
                    .zip(&assign)
                    .filter(|(_, &a)| a == j)
                    .map(|(f, _)| f)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for (k, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m.data()[k]).sum::<f32>() / members.len() as f32;
                }
            }
            if !changed {
                break;
            }
        }
        let cost: f32 = features
            .iter()
            .zip(&assign)
            .map(|(f, &a)| {
                f.data().iter().zip(&centroids[a]).map(|(x, c)| (x - c) * (x - c)).sum::<f32>()
            })
            .sum();
        if best.as_ref().map(|(c, _)| cost < *c).unwrap_or(true) {
            best = Some((cost, centroids.concat()));
        }
    }
    Tensor::new(vec![NUM_CLUSTERS, d], best.unwrap().1)
}

/// Initialize aggregation parameters. Centroids come from k-means over
/// training features; assignment weights warm-start from the centroids
/// (w_j = 2 c_j / s^2, b_j = -|c_j|^2 / s^2, s = mean feature norm).
pub fn init_params(
    feature_dim: usize,
    train_features: &[Tensor],
    seeds: &SeedStream,
) -> Result<ParamStore> {
    let centroids = kmeans_centroids(train_features, 10, seeds)?;
    let mean_norm = train_features
        .iter()
        .map(|f| f.data().iter().map(|v| v * v).sum::<f32>().sqrt())
        .sum::<f32>()
        / train_features.len() as f32;
    let s2 = (mean_norm * mean_norm).max(1e-6);
    let mut assign_w = Tensor::zeros(&[feature_dim, NUM_CLUSTERS]);
    let mut assign_b = Tensor::zeros(&[NUM_CLUSTERS]);
    for j in 0..NUM_CLUSTERS {
        let c = &centroids.data()[j * feature_dim..(j + 1) * feature_dim];
        let norm2: f32 = c.iter().map(|v| v * v).sum();
        for (i, &ci) in c.iter().enumerate() {
            assign_w.data_mut()[i * NUM_CLUSTERS + j] = 2.0 * ci / s2;
        }
        assign_b.data_mut()[j] = -norm2 / s2;
    }
    let mut rng = seeds.stream("aggregate_init");
    let yd = NUM_CLUSTERS * feature_dim;
    let hidden = framer_hidden(feature_dim);
    let mut p = ParamStore::new();
    p.insert("centroids", centroids);
    p.insert("assign.weight", assign_w);
    p.insert("assign.bias", assign_b);
    p.insert("framer.fc1.weight", Tensor::trunc_normal(&[yd, hidden], 0.02, &mut rng));
    p.insert("framer.fc1.bias", Tensor::zeros(&[hidden]));
    p.insert("framer.out.weight", Tensor::trunc_normal(&[hidden, 1], 0.02, &mut rng));
    p.insert("framer.out.bias", Tensor::zeros(&[1]));
    p.insert("videocls.weight", Tensor::trunc_normal(&[yd, NUM_CLASSES], 0.02, &mut rng));
    p.insert("videocls.bias", Tensor::zeros(&[NUM_CLASSES]));
    Ok(p)
}

/// Cluster soft-assignment: softmax over per-cluster affine scores.
pub fn cluster_assign(g: &Graph, features: Var, bound: &BoundParams) -> Result<Var> {
    let scores = g.add(
        g.matmul(features, bound.var("assign.weight")?)?,
        bound.var("assign.bias")?,
    )?;
    g.softmax_t(scores, 1.0)
}

/// Per-frame VLAD descriptors: block j = alpha_c(f, j) * (f - c_j),
/// blocks concatenated in cluster order. Input [N, D], output [N, |Y|*D].
pub fn vlad_encode(g: &Graph, features: Var, bound: &BoundParams) -> Result<Var> {
    let (n, d) = g.value(features).dims2().map_err(|_| Error::ShapeMismatch {
        op: "vlad_encode",
        lhs: g.value(features).shape().to_vec(),
        rhs: vec![0, 0],
    })?;
    let centroids = bound.var("centroids")?;
    let (clusters, cd) = g.value(centroids).dims2()?;
    if cd != d || clusters != NUM_CLUSTERS {
        return Err(Error::ShapeMismatch {
            op: "vlad_encode",
            lhs: vec![n, d],
            rhs: g.value(centroids).shape().to_vec(),
        });
    }
    let alpha = cluster_assign(g, features, bound)?; // [N, |Y|]
    let ones_row = g.constant(Tensor::full(&[1, d], 1.0));
    let mut blocks = Vec::with_capacity(NUM_CLUSTERS);
    for j in 0..NUM_CLUSTERS {
        let cj = g.reshape(g.slice_rows(centroids, j, j + 1)?, vec![d])?;
        let residual = g.add(features, g.neg(cj)?)?; // [N, D]
        let aj = g.slice_cols(alpha, j, j + 1)?; // [N, 1]
        let aj_full = g.matmul(aj, ones_row)?; // [N, D]
        blocks.push(g.mul(aj_full, residual)?);
    }
    g.concat(&blocks, 1)
}

/// Intra-normalization: L2-normalize each D-block of each row, then
/// optionally the whole row. Zero blocks stay zero.
pub fn intra_normalize(g: &Graph, v: Var, feature_dim: usize, whole: bool) -> Result<Var> {
    let (rows, cols) = g.value(v).dims2()?;
    if cols != NUM_CLUSTERS * feature_dim {
        return Err(Error::ShapeMismatch {
            op: "intra_normalize",
            lhs: vec![rows, cols],
            rhs: vec![rows, NUM_CLUSTERS * feature_dim],
        });
    }
    let reshaped = g.reshape(v, vec![rows * NUM_CLUSTERS, feature_dim])?;
    let normed = g.l2_normalize(reshaped)?;
    let back = g.reshape(normed, vec![rows, cols])?;
    if whole {
        g.l2_normalize(back)
    } else {
        Ok(back)
    }
}

/// Frame-selection weights: scalar MLP score per descriptor, softmax
/// across frames at temperature tau'. Output [N, 1].
pub fn frame_assign(g: &Graph, descriptors: Var, bound: &BoundParams, tau: f32) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid("frame_assign", format!("tau' must be > 0, got {tau}")));
    }
    let (n, _) = g.value(descriptors).dims2()?;
    if n == 0 {
        return Err(Error::EmptyDataset("frame_assign on empty video".into()));
    }
    let h = g.tanh(g.add(
        g.matmul(descriptors, bound.var("framer.fc1.weight")?)?,
        bound.var("framer.fc1.bias")?,
    )?)?;
    let s = g.add(g.matmul(h, bound.var("framer.out.weight")?)?, bound.var("framer.out.bias")?)?;
    let row = g.reshape(s, vec![1, n])?;
    let w = g.softmax_t(row, tau)?;
    g.reshape(w, vec![n, 1])
}

/// Weighted sum of descriptors followed by intra-normalization.
/// `weights` is [N, 1]; output [1, |Y|*D].
pub fn aggregate_video(
    g: &Graph,
    descriptors: Var,
    weights: Var,
    feature_dim: usize,
    whole_norm: bool,
) -> Result<Var> {
    let (n, _) = g.value(descriptors).dims2()?;
    let (wn, _) = g.value(weights).dims2()?;
    if n != wn {
        return Err(Error::ShapeMismatch {
            op: "aggregate_video",
            lhs: g.value(descriptors).shape().to_vec(),
            rhs: g.value(weights).shape().to_vec(),
        });
    }
    let wt = g.reshape(weights, vec![1, n])?;
    let pooled = g.matmul(wt, descriptors)?; // [1, |Y|*D]
    intra_normalize(g, pooled, feature_dim, whole_norm)
}

/// Linear classifier + softmax over the video embedding.
pub fn classify_video(g: &Graph, embedding: Var, bound: &BoundParams) -> Result<Var> {
    let logits = g.add(
        g.matmul(embedding, bound.var("videocls.weight")?)?,
        bound.var("videocls.bias")?,
    )?;
    g.softmax_t(logits, 1.0)
}

/// Full aggregation forward: frame features [N, D] -> class probabilities.
pub fn forward_video(
    g: &Graph,
    features: Var,
    bound: &BoundParams,
    cfg: &VideoClsConfig,
) -> Result<Var> {
    let d = {
        let (_, d) = g.value(features).dims2()?;
        d
    };
    let descriptors = vlad_encode(g, features, bound)?;
    let weights = match cfg.kind {
        AggregatorKind::Dual => frame_assign(g, descriptors, bound, cfg.tau_frame)?,
        AggregatorKind::NetVlad => {
            let (n, _) = g.value(descriptors).dims2()?;
            g.constant(Tensor::full(&[n, 1], 1.0 / n as f32))
        }
    };
    let embedding = aggregate_video(g, descriptors, weights, d, cfg.whole_norm)?;
    classify_video(g, embedding, bound)
}

/// GlobMAX baseline over per-frame probability vectors: per-class max,
/// renormalized; ties in the argmax break toward the higher severity.
pub fn globmax_baseline(frame_probs: &[Tensor]) -> Result<Tensor> {
    if frame_probs.is_empty() {
        return Err(Error::EmptyDataset("globmax on empty video".into()));
    }
    let k = frame_probs[0].numel();
    let mut scores = vec![f32::NEG_INFINITY; k];
    for p in frame_probs {
        if p.numel() != k {
            return Err(Error::ShapeMismatch {
                op: "globmax_baseline",
                lhs: frame_probs[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (s, &v) in scores.iter_mut().zip(p.data()) {
            *s = s.max(v);
        }
    }
    let total: f32 = scores.iter().sum();
    Ok(Tensor::from_vec(scores.iter().map(|s| s / total).collect()))
}

/// Argmax with ties broken toward the higher severity class.
pub fn argmax_severity(scores: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate() {
        if v >= scores[best] {
            best = i;
        }
    }
    best
}

pub struct VideoClsResult {
    pub params: ParamStore,
    pub history: Vec<LossRecord>,
}

/// Train centroids, assigner, and classifier on frozen frame features.
pub fn train_videocls(
    videos: &[(Vec<Tensor>, Label)],
    feature_dim: usize,
    cfg: &VideoClsConfig,
    seeds: &SeedStream,
) -> Result<VideoClsResult> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("videocls needs labeled videos".into()));
    }
    for (_, y) in videos {
        if *y as usize >= NUM_CLASSES {
            return Err(Error::BadLabel(*y as i64));
        }
    }
    let all_features: Vec<Tensor> =
        videos.iter().flat_map(|(fs, _)| fs.iter().cloned()).collect();
    let mut params = init_params(feature_dim, &all_features, seeds)?;
    let mut opt = AdamW::new();
    let mut history = Vec::new();
    let steps_per_epoch = videos.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut rng = seeds.stream_indexed("videocls_shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &params, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &vi in batch {
                let (frames, label) = &videos[vi];
                let features = g.constant(stack_features(frames)?);
                let probs = forward_video(&g, features, &bound, cfg)?;
                let lp = g.log(probs)?;
                let mut target = Tensor::zeros(&[1, NUM_CLASSES]);
                target.data_mut()[*label as usize] = 1.0;
                let t = g.constant(target);
                losses.push(g.neg(g.sum_all(g.mul(t, lp)?)?)?);
            }
            let mut loss = losses[0];
            for &l in &losses[1..] {
                loss = g.add(loss, l)?;
            }
            let loss = g.scale(loss, 1.0 / losses.len() as f32)?;
            let loss_value = g.value(loss).scalar_value()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            g.backward(loss)?;
            let lr = cosine_lr(cfg.lr, global_step, total_steps);
            opt.step(&mut params, &bound.grads(), lr, cfg.weight_decay)?;
            history.push(LossRecord { epoch, step, loss: loss_value });
            global_step += 1;
        }
    }
    Ok(VideoClsResult { params, history })
}

/// Inference: frame features -> video probability vector.
pub fn predict_video(
    params: &ParamStore,
    frames: &[Tensor],
    cfg: &VideoClsConfig,
) -> Result<Tensor> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, false);
    let features = g.constant(stack_features(frames)?);
    let probs = forward_video(&g, features, &bound, cfg)?;
    let v = g.value(probs);
    Ok(Tensor::from_vec(v.data().to_vec()))
}

pub fn stack_features(frames: &[Tensor]) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("video with no frame features".into()));
    }
    let d = frames[0].numel();
    let mut data = Vec::with_capacity(frames.len() * d);
    for f in frames {
        if f.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "stack_features",
                lhs: frames[0].shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), d], data)
}

// ── feature import/export ────────────────────────────────────────────

/// Write frame features as a flat little-endian f32 binary: header
/// "MVFE", version, N, D, then N*D floats.
pub fn export_features(path: &std::path::Path, videos: &[(Vec<Tensor>, Label)]) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(b"MVFE");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(videos.len() as u32).to_le_bytes());
    let d = videos.first().and_then(|(f, _)| f.first()).map(|t| t.numel()).unwrap_or(0);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for (frames, label) in videos {
        out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
        out.push(*label);
        for f in frames {
            for v in f.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn import_features(path: &std::path::Path) -> Result<Vec<(Vec<Tensor>, Label)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() };
    if bytes.len() < 16 || &bytes[0..4] != b"MVFE" {
        return Err(bad("bad feature-file magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(4) != 1 {
        return Err(bad("unsupported feature-file version"));
    }
    let count = u32_at(8);
    let d = u32_at(12);
    let mut pos = 16;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 5 > bytes.len() {
            return Err(bad("truncated feature file"));
        }
        let n = u32_at(pos);
        let label = bytes[pos + 4];
        pos += 5;
        let need = n * d * 4;
        if pos + need > bytes.len() {
            return Err(bad("truncated feature file"));
        }
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            let base = pos + i * d * 4;
            let data: Vec<f32> = (0..d)
                .map(|j| {
                    f32::from_le_bytes(bytes[base + j * 4..base + j * 4 + 4].try_into().unwrap())
                })
                .collect();
            frames.push(Tensor::from_vec(data));
        }
        pos += need;
        out.push((frames, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const D: usize = 4;

    fn toy_params(seed: u64, d: usize) -> ParamStore {
        let seeds = SeedStream::new(seed);
        let mut rng = seeds.stream("feat");
        let feats: Vec<Tensor> = (0..20).map(|_| Tensor::uniform(&[d], -1.0, 1.0, &mut rng)).collect();
        init_params(d, &feats, &seeds).unwrap()
    }

    // scalar re-implementations used as oracles
    fn oracle_assign(f: &[f32], w: &Tensor, b: &Tensor, d: usize) -> Vec<f64> {
        let mut scores = vec![0.0f64; NUM_CLUSTERS];
        for j in 0..NUM_CLUSTERS {
            let mut s = b.data()[j] as f64;
            for i in 0..d {
                s += (w.data()[i * NUM_CLUSTERS + j] as f64) * (f[i] as f64);
            }
            scores[j] = s;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    fn oracle_vlad(f: &[f32], p: &ParamStore, d: usize) -> Vec<f64> {
        let alpha = oracle_assign(f, p.get("assign.weight").unwrap(), p.get("assign.bias").unwrap(), d);
        let c = p.get("centroids").unwrap();
        let mut out = vec![0.0f64; NUM_CLUSTERS * d];
        for j in 0..NUM_CLUSTERS {
            for i in 0..d {
                out[j * d + i] = alpha[j] * ((f[i] - c.data()[j * d + i]) as f64);
            }
        }
        out
    }

    fn oracle_sigma(v: &[f64], d: usize, whole: bool) -> Vec<f64> {
        let mut out = v.to_vec();
        for j in 0..NUM_CLUSTERS {
            let block = &mut out[j * d..(j + 1) * d];
            let n = (block.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            for x in block.iter_mut() {
                *x /= n;
            }
        }
        if whole {
            let n = (out.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            for x in out.iter_mut() {
                *x /= n;
            }
        }
        out
    }

    #[test]
    fn cluster_assign_is_simplex_and_matches_oracle() {
        let p = toy_params(0, D);
        let seeds = SeedStream::new(1);
        let mut rng = seeds.stream("t");
        for _ in 0..5 {
            let f = Tensor::uniform(&[1, D], -2.0, 2.0, &mut rng);
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(f.clone());
            let a = cluster_assign(&g, fv, &bound).unwrap();
            let av = g.value(a);
            let sum: f32 = av.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(av.data().iter().all(|&v| v >= 0.0));
            let oracle = oracle_assign(
                f.data(),
                p.get("assign.weight").unwrap(),
                p.get("assign.bias").unwrap(),
                D,
            );
            for (got, want) in av.data().iter().zip(&oracle) {
                assert!((*got as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_assignment_for_zero_weights() {
        let mut p = toy_params(2, D);
        for name in ["assign.weight", "assign.bias"] {
            for v in p.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let f = g.constant(Tensor::full(&[1, D], 0.3));
        let a = cluster_assign(&g, f, &bound).unwrap();
        for &v in g.value(a).data() {
            assert!((v - 1.0 / NUM_CLUSTERS as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn vlad_zero_residual_gives_zero_descriptor() {
        let mut p = toy_params(3, D);
        let c = Tensor::full(&[NUM_CLUSTERS, D], 0.7);
        p.insert("centroids", c);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let f = g.constant(Tensor::full(&[1, D], 0.7));
        let desc = vlad_encode(&g, f, &bound).unwrap();
        for &v in g.value(desc).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn vlad_descriptor_length_is_y_times_d() {
        let p = toy_params(4, 384);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let mut rng = SeedStream::new(5).stream("f");
        let f = g.constant(Tensor::uniform(&[1, 384], -1.0, 1.0, &mut rng));
        let desc = vlad_encode(&g, f, &bound).unwrap();
        assert_eq!(g.value(desc).shape(), &[1, 1152]);
    }

    #[test]
    fn vlad_matches_naive_loop_oracle() {
        let p = toy_params(6, D);
        let mut rng = SeedStream::new(7).stream("f");
        for _ in 0..10 {
            let f = Tensor::uniform(&[1, D], -2.0, 2.0, &mut rng);
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(f.clone());
            let desc = vlad_encode(&g, fv, &bound).unwrap();
            let oracle = oracle_vlad(f.data(), &p, D);
            for (got, want) in g.value(desc).data().iter().zip(&oracle) {
                assert!((*got as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_assign_simplex_and_temperature_limits() {
        let p = toy_params(8, D);
        let mut rng = SeedStream::new(9).stream("f");
        let n = 6;
        let feats = Tensor::uniform(&[n, D], -2.0, 2.0, &mut rng);
        let weights_at = |tau: f32| {
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(feats.clone());
            let desc = vlad_encode(&g, fv, &bound).unwrap();
            let w = frame_assign(&g, desc, &bound, tau).unwrap();
            g.value(w).data().to_vec()
        };
        let w = weights_at(0.1);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|&v| v >= 0.0));
        // flat limit
        let flat = weights_at(1e6);
        for &v in &flat {
            assert!((v - 1.0 / n as f32).abs() < 1e-4);
        }
        // argmax limit (scale up scorer weights so scores separate cleanly)
        let mut p = p;
        for v in p.get_mut("framer.out.weight").unwrap().data_mut() {
            *v *= 100.0;
        }
        let weights_at = |tau: f32| {
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(feats.clone());
            let desc = vlad_encode(&g, fv, &bound).unwrap();
            let w = frame_assign(&g, desc, &bound, tau).unwrap();
            g.value(w).data().to_vec()
        };
        let sharp = weights_at(1e-4);
        let mx = sharp.iter().cloned().fold(0.0f32, f32::max);
        assert!(mx >= 0.999, "sharp weights not concentrated: {mx}");
        // error for bad temperature
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let fv = g.constant(feats.clone());
        let desc = vlad_encode(&g, fv, &bound).unwrap();
        assert!(frame_assign(&g, desc, &bound, 0.0).is_err());
    }

    #[test]
    fn identical_descriptors_get_uniform_weights() {
        let p = toy_params(10, D);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let f = g.constant(Tensor::new(vec![4, D], vec![0.5; 4 * D]).unwrap());
        let desc = vlad_encode(&g, f, &bound).unwrap();
        let w = frame_assign(&g, desc, &bound, 0.1).unwrap();
        for &v in g.value(w).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregate_matches_naive_oracle_and_sigma_properties() {
        let p = toy_params(11, 5);
        let d = 5;
        let n = 4;
        let mut rng = SeedStream::new(12).stream("f");
        let feats = Tensor::uniform(&[n, d], -2.0, 2.0, &mut rng);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let fv = g.constant(feats.clone());
        let desc = vlad_encode(&g, fv, &bound).unwrap();
        let w = frame_assign(&g, desc, &bound, 0.5).unwrap();
        let v = aggregate_video(&g, desc, w, d, true).unwrap();
        let vv = g.value(v);

        // naive: weighted sum of per-frame oracle descriptors, then sigma
        let wv = g.value(w);
        let mut pooled = vec![0.0f64; NUM_CLUSTERS * d];
        for i in 0..n {
            let f: Vec<f32> = feats.data()[i * d..(i + 1) * d].to_vec();
            let desc_i = oracle_vlad(&f, &p, d);
            for (o, x) in pooled.iter_mut().zip(&desc_i) {
                *o += (wv.data()[i] as f64) * x;
            }
        }
        let want = oracle_sigma(&pooled, d, true);
        for (got, want) in vv.data().iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }

        // nonzero blocks have unit norm before the whole-vector norm
        let g2 = Graph::new();
        let bound2 = BoundParams::bind(&g2, &p, false);
        let fv2 = g2.constant(feats.clone());
        let desc2 = vlad_encode(&g2, fv2, &bound2).unwrap();
        let w2 = frame_assign(&g2, desc2, &bound2, 0.5).unwrap();
        let v2 = aggregate_video(&g2, desc2, w2, d, false).unwrap();
        for block in g2.value(v2).data().chunks(d) {
            let norm: f32 = block.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 1e-6 {
                assert!((norm - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sigma_is_idempotent() {
        let mut rng = SeedStream::new(13).stream("v");
        let v = Tensor::uniform(&[1, NUM_CLUSTERS * 6], -3.0, 3.0, &mut rng);
        let g = Graph::new();
        let x = g.constant(v);
        let once = intra_normalize(&g, x, 6, true).unwrap();
        let twice = intra_normalize(&g, once, 6, true).unwrap();
        assert!(g.value(once).max_abs_diff(&g.value(twice)) < 1e-6);
    }

    #[test]
    fn netvlad_equals_dual_with_uniform_weights() {
        let p = toy_params(14, D);
        let mut rng = SeedStream::new(15).stream("f");
        let feats: Vec<Tensor> = (0..5).map(|_| Tensor::uniform(&[D], -1.0, 1.0, &mut rng)).collect();
        let dual_uniform = {
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(stack_features(&feats).unwrap());
            let desc = vlad_encode(&g, fv, &bound).unwrap();
            let w = g.constant(Tensor::full(&[5, 1], 0.2));
            let v = aggregate_video(&g, desc, w, D, true).unwrap();
            (*g.value(v)).clone()
        };
        let netvlad = {
            let cfg = VideoClsConfig { kind: AggregatorKind::NetVlad, ..VideoClsConfig::defaults() };
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(stack_features(&feats).unwrap());
            let desc = vlad_encode(&g, fv, &bound).unwrap();
            let (n, _) = g.value(desc).dims2().unwrap();
            let w = g.constant(Tensor::full(&[n, 1], 1.0 / n as f32));
            let v = aggregate_video(&g, desc, w, D, cfg.whole_norm).unwrap();
            (*g.value(v)).clone()
        };
        assert!(dual_uniform.max_abs_diff(&netvlad) < 1e-6);
    }

    #[test]
    fn single_frame_video_is_sigma_of_its_descriptor() {
        let p = toy_params(16, D);
        let mut rng = SeedStream::new(17).stream("f");
        let f = Tensor::uniform(&[1, D], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let fv = g.constant(f);
        let desc = vlad_encode(&g, fv, &bound).unwrap();
        let w = g.constant(Tensor::full(&[1, 1], 1.0));
        let v = aggregate_video(&g, desc, w, D, true).unwrap();
        let direct = intra_normalize(&g, desc, D, true).unwrap();
        assert!(g.value(v).max_abs_diff(&g.value(direct)) < 1e-6);
    }

    #[test]
    fn classify_video_uniform_at_zero_weights() {
        let mut p = toy_params(18, D);
        for name in ["videocls.weight", "videocls.bias"] {
            for v in p.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, false);
        let mut rng = SeedStream::new(19).stream("v");
        let v = g.constant(Tensor::uniform(&[1, NUM_CLUSTERS * D], -1.0, 1.0, &mut rng));
        let probs = classify_video(&g, v, &bound).unwrap();
        for &x in g.value(probs).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn globmax_cases() {
        // identical frames
        let p = Tensor::from_vec(vec![0.2, 0.3, 0.5]);
        let out = globmax_baseline(&[p.clone(), p.clone()]).unwrap();
        assert!(out.max_abs_diff(&p) < 1e-6);

        // per-class max then argmax
        let a = Tensor::from_vec(vec![0.9, 0.05, 0.05]);
        let b = Tensor::from_vec(vec![0.1, 0.1, 0.8]);
        let out = globmax_baseline(&[a, b]).unwrap();
        let scores: Vec<f32> = out.data().iter().map(|v| v * (0.9 + 0.1 + 0.8)).collect();
        assert!((scores[0] - 0.9).abs() < 1e-6);
        assert!((scores[1] - 0.1).abs() < 1e-6);
        assert!((scores[2] - 0.8).abs() < 1e-6);
        assert_eq!(argmax_severity(out.data()), 0);

        // severity tie-break
        let c0 = Tensor::from_vec(vec![1.0, 0.0, 0.0]);
        let c2 = Tensor::from_vec(vec![0.0, 0.0, 1.0]);
        let out = globmax_baseline(&[c0, c2]).unwrap();
        assert_eq!(argmax_severity(out.data()), 2);

        assert!(globmax_baseline(&[]).is_err());
    }

    #[test]
    fn globmax_is_frame_permutation_invariant() {
        let mut rng = SeedStream::new(20).stream("p");
        let frames: Vec<Tensor> = (0..6)
            .map(|_| {
                let raw = Tensor::uniform(&[3], 0.01, 1.0, &mut rng);
                let s: f32 = raw.data().iter().sum();
                Tensor::from_vec(raw.data().iter().map(|v| v / s).collect())
            })
            .collect();
        let fwd = globmax_baseline(&frames).unwrap();
        let mut rev = frames.clone();
        rev.reverse();
        let bwd = globmax_baseline(&rev).unwrap();
        assert!(fwd.max_abs_diff(&bwd) < 1e-7);
        assert_eq!(argmax_severity(fwd.data()), argmax_severity(bwd.data()));
    }

    #[test]
    fn scale_invariance_of_sigma_with_fixed_weights() {
        let p = toy_params(21, D);
        let mut rng = SeedStream::new(22).stream("f");
        let feats = Tensor::uniform(&[4, D], -1.0, 1.0, &mut rng);
        let embed = |scale: f32| {
            let g = Graph::new();
            let bound = BoundParams::bind(&g, &p, false);
            let fv = g.constant(feats.clone());
            let desc = vlad_encode(&g, fv, &bound).unwrap();
            let scaled = g.scale(desc, scale).unwrap();
            let w = g.constant(Tensor::full(&[4, 1], 0.25));
            let v = aggregate_video(&g, scaled, w, D, true).unwrap();
            (*g.value(v)).clone()
        };
        assert!(embed(1.0).max_abs_diff(&embed(7.5)) < 1e-5);
    }

    #[test]
    fn gradient_reaches_every_aggregation_parameter() {
        let p = toy_params(23, D);
        let mut rng = SeedStream::new(24).stream("f");
        let feats = Tensor::uniform(&[5, D], -1.0, 1.0, &mut rng);
        let cfg = VideoClsConfig::defaults();
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &p, true);
        let fv = g.constant(feats);
        let probs = forward_video(&g, fv, &bound, &cfg).unwrap();
        let lp = g.log(probs).unwrap();
        let t = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap());
        let loss = g.neg(g.sum_all(g.mul(t, lp).unwrap()).unwrap()).unwrap();
        g.backward(loss).unwrap();
        let grads = bound.grads();
        for name in [
            "centroids",
            "assign.weight",
            "framer.fc1.weight",
            "framer.out.weight",
            "videocls.weight",
        ] {
            let nonzero = grads.get(name).unwrap().data().iter().any(|&v| v != 0.0);
            assert!(nonzero, "no gradient on {name}");
        }
    }

    #[test]
    fn feature_file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeedStream::new(25).stream("f");
        let videos: Vec<(Vec<Tensor>, Label)> = (0..3)
            .map(|i| {
                let frames = (0..4).map(|_| Tensor::uniform(&[D], -1.0, 1.0, &mut rng)).collect();
                (frames, (i % 3) as Label)
            })
            .collect();
        let path = dir.path().join("features.bin");
        export_features(&path, &videos).unwrap();
        let back = import_features(&path).unwrap();
        assert_eq!(back.len(), 3);
        for ((fa, la), (fb, lb)) in videos.iter().zip(&back) {
            assert_eq!(la, lb);
            for (a, b) in fa.iter().zip(fb) {
                assert_eq!(a, b);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(import_features(&path).is_err());
    }
}
