//! Feature-quality evaluation: cosine k-NN, a linear probe on frozen
//! features, one-vs-all ROC-AUC, confusion matrices, and attention-map
//! export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::argmax_severity;
use crate::data::Label;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::finetune::NUM_CLASSES;
use crate::frame::GrayImage;
use crate::numerics::{Graph, Tensor};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{BoundParams, ParamStore};
use crate::rng::SeedStream;

pub const DEFAULT_KNN_K: usize = 20;

fn l2_normed(t: &Tensor) -> Vec<f32> {
    let norm: f32 = t.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-12 {
        return t.data().to_vec();
    }
    t.data().iter().map(|v| v / norm).collect()
}

/// Cosine k-NN class scores: for each query, the per-class sum of
/// similarities over the k nearest training features.
pub fn knn_scores(
    train: &[(Tensor, Label)],
    queries: &[Tensor],
    k: usize,
) -> Result<Vec<[f32; NUM_CLASSES]>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("knn needs training features".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::invalid(
            "knn_scores",
            format!("k = {k} out of range for {} training features", train.len()),
        ));
    }
    for (_, y) in train {
        if *y as usize >= NUM_CLASSES {
            return Err(Error::BadLabel(*y as i64));
        }
    }
    let bank: Vec<(Vec<f32>, Label)> = train.iter().map(|(t, y)| (l2_normed(t), *y)).collect();
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let qn = l2_normed(q);
        let mut sims: Vec<(f32, Label)> = bank
            .iter()
            .map(|(f, y)| (f.iter().zip(&qn).map(|(a, b)| a * b).sum::<f32>(), *y))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut scores = [0.0f32; NUM_CLASSES];
        for (sim, y) in sims.into_iter().take(k) {
            scores[y as usize] += sim;
        }
        out.push(scores);
    }
    Ok(out)
}

/// k-NN predictions; ties break toward the higher severity class.
pub fn knn_predict(train: &[(Tensor, Label)], queries: &[Tensor], k: usize) -> Result<Vec<Label>> {
    Ok(knn_scores(train, queries, k)?
        .iter()
        .map(|s| argmax_severity(s) as Label)
        .collect())
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1e-2, weight_decay: 1e-4, epochs: 100 }
    }
}

/// Multinomial logistic regression on frozen features (full-batch AdamW).
/// Errors when the training set covers fewer than two classes.
pub fn linear_probe(
    train: &[(Tensor, Label)],
    cfg: &ProbeConfig,
    seeds: &SeedStream,
) -> Result<ParamStore> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("linear probe needs features".into()));
    }
    let mut seen = [false; NUM_CLASSES];
    for (_, y) in train {
        if *y as usize >= NUM_CLASSES {
            return Err(Error::BadLabel(*y as i64));
        }
        seen[*y as usize] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("linear_probe", "training set covers a single class"));
    }
    let d = train[0].0.numel();
    let mut rng = seeds.stream("probe_init");
    let mut params = ParamStore::new();
    params.insert("probe.weight", Tensor::trunc_normal(&[d, NUM_CLASSES], 0.02, &mut rng));
    params.insert("probe.bias", Tensor::zeros(&[NUM_CLASSES]));

    let mut x = Vec::with_capacity(train.len() * d);
    let mut target = Tensor::zeros(&[train.len(), NUM_CLASSES]);
    for (i, (f, y)) in train.iter().enumerate() {
        x.extend_from_slice(f.data());
        target.data_mut()[i * NUM_CLASSES + *y as usize] = 1.0;
    }
    let x = Tensor::new(vec![train.len(), d], x)?;

    let mut opt = AdamW::new();
    for step in 0..cfg.epochs {
        let g = Graph::new();
        let bound = BoundParams::bind(&g, &params, true);
        let xv = g.constant(x.clone());
        let logits =
            g.add(g.matmul(xv, bound.var("probe.weight")?)?, bound.var("probe.bias")?)?;
        let lp = g.log(g.softmax_t(logits, 1.0)?)?;
        let t = g.constant(target.clone());
        let nll = g.neg(g.sum_all(g.mul(t, lp)?)?)?;
        let loss = g.scale(nll, 1.0 / train.len() as f32)?;
        if !g.value(loss).scalar_value()?.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, step });
        }
        g.backward(loss)?;
        let lr = cosine_lr(cfg.lr, step, cfg.epochs);
        opt.step(&mut params, &bound.grads(), lr, cfg.weight_decay)?;
    }
    Ok(params)
}

/// Probe class scores (softmax probabilities) for each query.
pub fn probe_scores(params: &ParamStore, queries: &[Tensor]) -> Result<Vec<[f32; NUM_CLASSES]>> {
    let w = params.get("probe.weight")?;
    let (d, _) = w.dims2()?;
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, false);
    let mut x = Vec::with_capacity(queries.len() * d);
    for q in queries {
        if q.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "probe_scores",
                lhs: vec![d],
                rhs: q.shape().to_vec(),
            });
        }
        x.extend_from_slice(q.data());
    }
    let xv = g.constant(Tensor::new(vec![queries.len(), d], x)?);
    let logits = g.add(g.matmul(xv, bound.var("probe.weight")?)?, bound.var("probe.bias")?)?;
    let probs = g.softmax_t(logits, 1.0)?;
    let v = g.value(probs);
    Ok((0..queries.len())
        .map(|i| {
            let mut row = [0.0f32; NUM_CLASSES];
            row.copy_from_slice(&v.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
            row
        })
        .collect())
}

/// Binary ROC-AUC by rank sum; ties contribute 0.5. Returns None when
/// either class is absent.
pub fn roc_auc_binary(scores: &[f32], positives: &[bool]) -> Option<f64> {
    let pos = positives.iter().filter(|&&p| p).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // average ranks over tie groups (1-based)
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positives
        .iter()
        .enumerate()
        .filter(|(_, &p)| p)
        .map(|(idx, _)| rank[idx])
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// One-vs-all macro ROC-AUC. Classes without positives (or without
/// negatives) are skipped; errors when no class is evaluable.
pub fn roc_auc_ova(scores: &[[f32; NUM_CLASSES]], labels: &[Label]) -> Result<(f64, Vec<Option<f64>>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid(
            "roc_auc_ova",
            format!("{} score rows vs {} labels", scores.len(), labels.len()),
        ));
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let s: Vec<f32> = scores.iter().map(|row| row[c]).collect();
        let p: Vec<bool> = labels.iter().map(|&y| y as usize == c).collect();
        per_class.push(roc_auc_binary(&s, &p));
    }
    let usable: Vec<f64> = per_class.iter().flatten().copied().collect();
    if usable.is_empty() {
        return Err(Error::invalid("roc_auc_ova", "no class has both positives and negatives"));
    }
    Ok((usable.iter().sum::<f64>() / usable.len() as f64, per_class))
}

pub fn accuracy(pred: &[Label], truth: &[Label]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

pub fn confusion_matrix(pred: &[Label], truth: &[Label]) -> [[usize; NUM_CLASSES]; NUM_CLASSES] {
    let mut m = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t as usize][p as usize] += 1;
    }
    m
}

/// Serializable evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Which feature source produced the scores: knn, linear, or finetuned.
    pub provenance: String,
    pub sample_count: usize,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub per_class_auc: Vec<Option<f64>>,
    /// Rows are true labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_scores(
        provenance: &str,
        scores: &[[f32; NUM_CLASSES]],
        truth: &[Label],
    ) -> Result<EvalReport> {
        let pred: Vec<Label> = scores.iter().map(|s| argmax_severity(s) as Label).collect();
        let (macro_auc, per_class) = match roc_auc_ova(scores, truth) {
            Ok((m, per)) => (Some(m), per),
            Err(_) => (None, vec![None; NUM_CLASSES]),
        };
        let confusion = confusion_matrix(&pred, truth).iter().map(|r| r.to_vec()).collect();
        Ok(EvalReport {
            provenance: provenance.into(),
            sample_count: truth.len(),
            accuracy: accuracy(&pred, truth),
            macro_auc,
            per_class_auc: per_class,
            confusion,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid("eval_report", e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json).map_err(|e| Error::invalid("eval_report", e.to_string()))
    }
}

// ── attention export ─────────────────────────────────────────────────

/// Mean over heads of the CLS-to-patch grids.
pub fn mean_attention(maps: &encoder::AttentionMaps) -> Result<Tensor> {
    if maps.grids.is_empty() {
        return Err(Error::EmptyDataset("attention maps have no heads".into()));
    }
    let side = maps.grid_side;
    let mut acc = vec![0.0f32; side * side];
    for g in &maps.grids {
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a += v;
        }
    }
    let n = maps.grids.len() as f32;
    Tensor::new(vec![side, side], acc.into_iter().map(|v| v / n).collect())
}

/// Fraction of a map's total mass falling inside a pixel-space region
/// (x0, y0, w, h). Patch cells count when their center lies inside.
pub fn region_mass(
    map: &Tensor,
    grid_side: usize,
    image_size: usize,
    region: (usize, usize, usize, usize),
) -> f32 {
    let (x0, y0, w, h) = region;
    let cell = image_size as f32 / grid_side as f32;
    let total: f32 = map.data().iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0f32;
    for gy in 0..grid_side {
        for gx in 0..grid_side {
            let cx = (gx as f32 + 0.5) * cell;
            let cy = (gy as f32 + 0.5) * cell;
            if cx >= x0 as f32
                && cx < (x0 + w) as f32
                && cy >= y0 as f32
                && cy < (y0 + h) as f32
            {
                inside += map.data()[gy * grid_side + gx];
            }
        }
    }
    inside / total
}

/// Uniform-attention mass a region would receive: its cell share.
pub fn uniform_region_mass(
    grid_side: usize,
    image_size: usize,
    region: (usize, usize, usize, usize),
) -> f32 {
    region_mass(&Tensor::full(&[grid_side, grid_side], 1.0), grid_side, image_size, region)
}

fn grid_to_image(map: &Tensor, grid_side: usize, out_size: usize) -> Result<GrayImage> {
    let img = GrayImage::new(grid_side, grid_side, map.data().to_vec())?;
    Ok(img.resize_nearest(out_size, out_size))
}

fn write_map_png(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes = img.to_u8_minmax();
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| Error::invalid("attention_png", e.to_string()))
}

/// Export per-head and head-mean CLS attention maps for one frame as
/// nearest-upsampled, min-max normalized PNGs. Returns the mean grid.
pub fn export_attention(
    cfg: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
    frame: &GrayImage,
    block_index: usize,
    out_dir: &Path,
    stem: &str,
) -> Result<Tensor> {
    let maps = encoder::attention_map(cfg, params, prefix, frame, block_index)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (h, grid) in maps.grids.iter().enumerate() {
        let img = grid_to_image(grid, maps.grid_side, frame.width)?;
        write_map_png(&out_dir.join(format!("{stem}_head{h}.png")), &img)?;
    }
    let mean = mean_attention(&maps)?;
    let img = grid_to_image(&mean, maps.grid_side, frame.width)?;
    write_map_png(&out_dir.join(format!("{stem}_mean.png")), &img)?;
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clustered_features(seed: u64, per_class: usize, d: usize) -> Vec<(Tensor, Label)> {
        let mut rng = SeedStream::new(seed).stream("feat");
        let mut out = Vec::new();
        for c in 0..NUM_CLASSES {
            for _ in 0..per_class {
                let data: Vec<f32> = (0..d)
                    .map(|i| {
                        let center = if i % NUM_CLASSES == c { 1.0 } else { 0.0 };
                        center + rng.gen_range(-0.2..0.2)
                    })
                    .collect();
                out.push((Tensor::from_vec(data), c as Label));
            }
        }
        out
    }

    #[test]
    fn knn_recovers_clustered_labels() {
        let train = clustered_features(0, 12, 9);
        let test = clustered_features(1, 6, 9);
        let queries: Vec<Tensor> = test.iter().map(|(t, _)| t.clone()).collect();
        let truth: Vec<Label> = test.iter().map(|(_, y)| *y).collect();
        let pred = knn_predict(&train, &queries, 5).unwrap();
        assert_eq!(pred, truth);
    }

    #[test]
    fn knn_k_bounds_and_scale_invariance() {
        let train = clustered_features(2, 3, 6);
        let q = vec![train[0].0.clone()];
        assert!(knn_predict(&train, &q, 0).is_err());
        assert!(knn_predict(&train, &q, train.len() + 1).is_err());

        // cosine similarity ignores query and bank scaling
        let scaled: Vec<(Tensor, Label)> = train
            .iter()
            .map(|(t, y)| (Tensor::from_vec(t.data().iter().map(|v| v * 37.0).collect()), *y))
            .collect();
        let a = knn_scores(&train, &q, 4).unwrap();
        let b = knn_scores(&scaled, &q, 4).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn knn_single_neighbor_matches_nearest_label() {
        let train = clustered_features(3, 8, 6);
        let queries: Vec<Tensor> = train.iter().map(|(t, _)| t.clone()).collect();
        // k = 1 with the query present in the bank returns its own label
        let pred = knn_predict(&train, &queries, 1).unwrap();
        let truth: Vec<Label> = train.iter().map(|(_, y)| *y).collect();
        assert_eq!(pred, truth);
    }

    #[test]
    fn probe_separates_clusters_and_rejects_single_class() {
        let train = clustered_features(4, 15, 9);
        let seeds = SeedStream::new(5);
        let params = linear_probe(&train, &ProbeConfig::default(), &seeds).unwrap();
        let test = clustered_features(6, 8, 9);
        let queries: Vec<Tensor> = test.iter().map(|(t, _)| t.clone()).collect();
        let scores = probe_scores(&params, &queries).unwrap();
        let pred: Vec<Label> = scores.iter().map(|s| argmax_severity(s) as Label).collect();
        let truth: Vec<Label> = test.iter().map(|(_, y)| *y).collect();
        let acc = accuracy(&pred, &truth);
        assert!(acc > 0.9, "probe accuracy {acc}");

        let single: Vec<(Tensor, Label)> =
            train.iter().take(10).map(|(t, _)| (t.clone(), 1)).collect();
        assert!(linear_probe(&single, &ProbeConfig::default(), &seeds).is_err());
    }

    fn auc_oracle(scores: &[f32], pos: &[bool]) -> f64 {
        // O(n^2) pair counting
        let mut num = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &pi) in pos.iter().enumerate() {
            if !pi {
                continue;
            }
            for (j, &pj) in pos.iter().enumerate() {
                if pj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = SeedStream::new(7).stream("auc");
        for _ in 0..20 {
            let n = rng.gen_range(4..40);
            // quantized scores force ties
            let scores: Vec<f32> =
                (0..n).map(|_| (rng.gen_range(0..8) as f32) / 8.0).collect();
            let pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
                continue;
            }
            let got = roc_auc_binary(&scores, &pos).unwrap();
            let want = auc_oracle(&scores, &pos);
            assert!((got - want).abs() < 1e-9, "got {got} want {want}");
        }
    }

    #[test]
    fn auc_known_values() {
        // perfect separation
        let s = [0.1, 0.2, 0.8, 0.9];
        let p = [false, false, true, true];
        assert!((roc_auc_binary(&s, &p).unwrap() - 1.0).abs() < 1e-12);
        // reversed
        let p = [true, true, false, false];
        assert!(roc_auc_binary(&s, &p).unwrap().abs() < 1e-12);
        // all tied
        let s = [0.5, 0.5, 0.5, 0.5];
        let p = [true, false, true, false];
        assert!((roc_auc_binary(&s, &p).unwrap() - 0.5).abs() < 1e-12);
        // degenerate class
        assert!(roc_auc_binary(&s, &[true; 4]).is_none());
    }

    #[test]
    fn macro_auc_skips_absent_classes() {
        let scores = vec![
            [0.9, 0.05, 0.05],
            [0.8, 0.1, 0.1],
            [0.2, 0.7, 0.1],
            [0.1, 0.8, 0.1],
        ];
        let labels = vec![0, 0, 1, 1];
        let (macro_auc, per_class) = roc_auc_ova(&scores, &labels).unwrap();
        assert!(per_class[0].is_some());
        assert!(per_class[1].is_some());
        assert!(per_class[2].is_none(), "class 2 has no positives");
        assert!((macro_auc - 1.0).abs() < 1e-12);

        let one_class = vec![0, 0, 0, 0];
        assert!(roc_auc_ova(&scores, &one_class).is_err());
    }

    #[test]
    fn confusion_matrix_counts() {
        let pred = vec![0, 1, 2, 2, 0];
        let truth = vec![0, 1, 1, 2, 2];
        let m = confusion_matrix(&pred, &truth);
        assert_eq!(m[0][0], 1);
        assert_eq!(m[1][1], 1);
        assert_eq!(m[1][2], 1);
        assert_eq!(m[2][2], 1);
        assert_eq!(m[2][0], 1);
        let total: usize = m.iter().flatten().sum();
        assert_eq!(total, 5);
        assert!((accuracy(&pred, &truth) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_as_json() {
        let scores = vec![[0.7, 0.2, 0.1], [0.1, 0.2, 0.7], [0.2, 0.6, 0.2]];
        let labels = vec![0, 2, 1];
        let report = EvalReport::from_scores("knn", &scores, &labels).unwrap();
        assert!((report.accuracy - 1.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let back = EvalReport::load(&path).unwrap();
        assert_eq!(back.provenance, "knn");
        assert_eq!(back.confusion, report.confusion);
        assert_eq!(back.macro_auc, report.macro_auc);
    }

    #[test]
    fn region_mass_oracle() {
        // 4x4 grid on a 64px image; all mass in the top-left cell
        let mut m = Tensor::zeros(&[4, 4]);
        m.data_mut()[0] = 1.0;
        assert!((region_mass(&m, 4, 64, (0, 0, 16, 16)) - 1.0).abs() < 1e-6);
        assert!(region_mass(&m, 4, 64, (32, 32, 32, 32)).abs() < 1e-6);
        // uniform map: region share equals cell share
        let u = uniform_region_mass(4, 64, (0, 0, 32, 32));
        assert!((u - 0.25).abs() < 1e-6);
        assert!((uniform_region_mass(4, 64, (0, 0, 64, 64)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_export_writes_normalized_maps() {
        let cfg = EncoderConfig::tiny();
        let mut rng = SeedStream::new(8).stream("enc");
        let params = encoder::init_params(&cfg, "", &mut rng).unwrap();
        let mut frame = GrayImage::zeros(cfg.image_size, cfg.image_size);
        for y in 0..cfg.image_size {
            for x in 0..cfg.image_size {
                frame.set(x, y, ((x + y) % 7) as f32 / 7.0);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let mean =
            export_attention(&cfg, &params, "", &frame, cfg.depth - 1, dir.path(), "f0").unwrap();
        assert_eq!(mean.shape(), &[cfg.image_size / cfg.patch_size; 2]);
        for h in 0..cfg.heads {
            assert!(dir.path().join(format!("f0_head{h}.png")).exists());
        }
        let mean_path = dir.path().join("f0_mean.png");
        assert!(mean_path.exists());
        let img = crate::data::load_gray(&mean_path).unwrap();
        assert_eq!(img.width, cfg.image_size);
        let mx = img.data.iter().cloned().fold(0.0f32, f32::max);
        let mn = img.data.iter().cloned().fold(1.0f32, f32::min);
        assert!(mx > 0.99 && mn < 0.01, "export not min-max normalized");
    }
}
