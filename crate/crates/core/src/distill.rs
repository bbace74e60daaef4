//! Label-free self-distillation pretraining: a student encoder chases an
//! EMA teacher across multi-crop views, the student seeing small local
//! crops and the teacher large global ones.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::frame::GrayImage;
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{cosine_lr, linear_wd, AdamW};
use crate::params::{BoundParams, ParamStore};
use crate::rng::SeedStream;

#[derive(Debug, Clone)]
pub struct MultiCropConfig {
    /// Global crop count m (teacher stream).
    pub globals: usize,
    /// Local crop count n (student stream).
    pub locals: usize,
    /// Area fraction range for global crops.
    pub global_scale: (f32, f32),
    /// Area fraction range for local crops.
    pub local_scale: (f32, f32),
    pub local_size: usize,
    pub flip: bool,
    /// Max brightness shift and contrast deviation; zero disables jitter.
    pub brightness: f32,
    pub contrast: f32,
    pub blur_prob: f32,
    pub blur_sigma: f32,
}

impl MultiCropConfig {
    pub fn defaults(local_size: usize) -> Self {
        MultiCropConfig {
            globals: 2,
            locals: 1,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            local_size,
            flip: true,
            brightness: 0.1,
            contrast: 0.2,
            blur_prob: 0.3,
            blur_sigma: 0.8,
        }
    }

    /// All stochastic augmentation off; crops still drawn from the ranges.
    pub fn no_jitter(mut self) -> Self {
        self.flip = false;
        self.brightness = 0.0;
        self.contrast = 0.0;
        self.blur_prob = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.globals == 0 || self.locals == 0 {
            return Err(Error::invalid("multi_crop", "need at least one global and one local crop"));
        }
        for (name, (lo, hi)) in
            [("global", self.global_scale), ("local", self.local_scale)]
        {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(
                    "multi_crop",
                    format!("{name} scale range [{lo}, {hi}] empty or inverted"),
                ));
            }
        }
        if self.global_scale.1 < self.local_scale.1 {
            return Err(Error::invalid(
                "multi_crop",
                "global crops must cover a larger area fraction than local crops",
            ));
        }
        Ok(())
    }
}

/// Draw m global and n local augmented crops of one frame.
pub fn multi_crop(
    frame: &GrayImage,
    cfg: &MultiCropConfig,
    image_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<GrayImage>, Vec<GrayImage>)> {
    cfg.validate()?;
    let draw = |scale: (f32, f32), out: usize, rng: &mut ChaCha8Rng| -> Result<GrayImage> {
        let mut img = frame.random_resized_crop(scale, out, rng)?;
        if cfg.flip && rng.gen_bool(0.5) {
            img = img.hflip();
        }
        if cfg.brightness > 0.0 || cfg.contrast > 0.0 {
            let b = if cfg.brightness > 0.0 {
                rng.gen_range(-cfg.brightness..cfg.brightness)
            } else {
                0.0
            };
            let c = if cfg.contrast > 0.0 {
                1.0 + rng.gen_range(-cfg.contrast..cfg.contrast)
            } else {
                1.0
            };
            img = img.jitter(b, c);
        }
        if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob as f64) {
            img = img.gaussian_blur(cfg.blur_sigma);
        }
        Ok(img)
    };
    let globals = (0..cfg.globals)
        .map(|_| draw(cfg.global_scale, image_size, rng))
        .collect::<Result<_>>()?;
    let locals = (0..cfg.locals)
        .map(|_| draw(cfg.local_scale, cfg.local_size, rng))
        .collect::<Result<_>>()?;
    Ok((globals, locals))
}

/// Temperature-sharpened softmax over a logit vector, with an optional
/// center subtracted first (teacher path).
pub fn sharpen(logits: &Tensor, tau: f32, center: Option<&Tensor>) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::invalid("sharpen", format!("temperature must be > 0, got {tau}")));
    }
    let mut z = logits.clone();
    if let Some(c) = center {
        if c.numel() != z.numel() {
            return Err(Error::ShapeMismatch {
                op: "sharpen",
                lhs: z.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        for (zi, ci) in z.data_mut().iter_mut().zip(c.data()) {
            *zi -= ci;
        }
    }
    let mx = z.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / tau));
    let mut sum = 0.0f32;
    for v in z.data_mut() {
        *v = (*v / tau - mx).exp();
        sum += *v;
    }
    for v in z.data_mut() {
        *v /= sum;
    }
    Ok(z)
}

/// Eq. 1 pairing: which crops run through the student stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Teacher globals paired with student locals only (verbatim form).
    GlobalsToLocals,
    /// Student additionally sees the globals; same-view pairs skipped.
    Conventional,
}

/// Cross-entropy of constant teacher distributions against in-graph
/// student logit rows: mean over all (teacher, student) pairs of
/// H(P_t, P_s) with H(a, b) = -sum_k a_k log b_k.
pub fn dino_loss(
    g: &Graph,
    teacher_probs: &[Tensor],
    student_logit_rows: &[Var],
    tau_s: f32,
    skip_same_index: bool,
) -> Result<Var> {
    if teacher_probs.is_empty() || student_logit_rows.is_empty() {
        return Err(Error::invalid("dino_loss", "need at least one crop on each stream"));
    }
    let k = teacher_probs[0].numel();
    let mut terms = Vec::new();
    for (si, &s) in student_logit_rows.iter().enumerate() {
        if g.value(s).numel() != k {
            return Err(Error::ShapeMismatch {
                op: "dino_loss",
                lhs: teacher_probs[0].shape().to_vec(),
                rhs: g.value(s).shape().to_vec(),
            });
        }
        let log_p = g.log(g.softmax_t(s, tau_s)?)?;
        for (ti, t) in teacher_probs.iter().enumerate() {
            if skip_same_index && ti == si {
                continue;
            }
            let tv = g.constant(t.clone().reshaped(g.value(log_p).shape().to_vec())?);
            let h = g.neg(g.sum_all(g.mul(tv, log_p)?)?)?;
            terms.push(h);
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("dino_loss", "pairing skipped every (teacher, student) pair"));
    }
    let n = terms.len() as f32;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / n)
}

/// Scalar recomputation of the same loss, independent of the graph path.
pub fn dino_loss_value(
    teacher_logits: &[Tensor],
    student_logits: &[Tensor],
    tau_t: f32,
    tau_s: f32,
    center: Option<&Tensor>,
) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in student_logits {
        let ps = sharpen(s, tau_s, None)?;
        for t in teacher_logits {
            let pt = sharpen(t, tau_t, center)?;
            let mut h = 0.0f64;
            for (a, b) in pt.data().iter().zip(ps.data()) {
                h -= (*a as f64) * (b.max(crate::numerics::EPS) as f64).ln();
            }
            total += h;
            count += 1;
        }
    }
    Ok((total / count as f64) as f32)
}

/// EMA teacher update: theta_t <- lambda * theta_t + (1 - lambda) * theta_s.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, lambda: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("ema_update", format!("lambda {lambda} outside [0, 1]")));
    }
    if !teacher.shapes_match(student) {
        return Err(Error::invalid("ema_update", "teacher/student parameter shapes differ"));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if lambda == 0.0 {
            t.data_mut().copy_from_slice(s.data());
        } else {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = lambda * *tv + (1.0 - lambda) * sv;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub lr: f32,
    pub weight_decay_start: f32,
    pub weight_decay_end: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_teacher: f32,
    pub tau_student: f32,
    pub ema_lambda: f32,
    pub centering: bool,
    pub center_momentum: f32,
    pub pairing: Pairing,
    pub crop: MultiCropConfig,
}

impl PretrainConfig {
    /// Table-1 pretraining recipe at a given encoder profile.
    pub fn defaults(enc: &EncoderConfig) -> Self {
        PretrainConfig {
            lr: 1.25e-4,
            weight_decay_start: 0.1,
            weight_decay_end: 0.5,
            epochs: 30,
            batch_size: 64,
            tau_teacher: 0.5,
            tau_student: 0.1,
            ema_lambda: 0.996,
            centering: true,
            center_momentum: 0.9,
            pairing: Pairing::GlobalsToLocals,
            crop: MultiCropConfig::defaults(enc.local_size()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
}

pub struct PretrainResult {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub center: Tensor,
    pub history: Vec<LossRecord>,
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut text = String::from("epoch,step,loss\n");
    for r in history {
        writeln!(text, "{},{},{}", r.epoch, r.step, r.loss).expect("string write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run self-distillation pretraining over unlabeled frames. The teacher
/// starts as an exact copy of the student, only the student takes
/// optimizer steps, and the teacher trails it by EMA.
pub fn pretrain(
    frames: &[GrayImage],
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    seeds: &SeedStream,
) -> Result<PretrainResult> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset("pretrain needs at least one unlabeled frame".into()));
    }
    cfg.crop.validate()?;
    if cfg.tau_teacher <= 0.0 || cfg.tau_student <= 0.0 {
        return Err(Error::invalid("pretrain", "temperatures must be > 0"));
    }
    if !(0.0..=1.0).contains(&cfg.ema_lambda) {
        return Err(Error::invalid("pretrain", "ema lambda outside [0, 1]"));
    }
    let mut init_rng = seeds.stream("pretrain_init");
    let mut student = encoder::init_params(enc, "", &mut init_rng)?;
    let mut teacher = student.clone();
    let mut center = Tensor::zeros(&[enc.head_output_dim]);
    let mut opt = AdamW::new();
    let mut history = Vec::new();

    let steps_per_epoch = frames.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut shuffle_rng = seeds.stream_indexed("pretrain_shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut crop_rng = seeds.stream_indexed("pretrain_crops", epoch as u64);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut globals = Vec::new();
            let mut locals = Vec::new();
            let mut per_image = Vec::new(); // (global idx range, local idx range)
            for &fi in batch {
                let (gs, ls) = multi_crop(&frames[fi], &cfg.crop, enc.image_size, &mut crop_rng)?;
                let g0 = globals.len();
                let l0 = locals.len();
                globals.extend(gs);
                locals.extend(ls);
                per_image.push((g0..globals.len(), l0..locals.len()));
            }

            // teacher forward, gradient-free; logits become constants
            let teacher_logits = {
                let tg = Graph::new();
                let bound = BoundParams::bind(&tg, &teacher, false);
                let out = encoder::forward_features(&tg, &bound, "", enc, &globals, None)?;
                let logits = encoder::forward_head(&tg, &bound, "", out.features)?;
                (*tg.value(logits)).clone()
            };
            let k = enc.head_output_dim;
            let teacher_rows: Vec<Tensor> = (0..globals.len())
                .map(|i| Tensor::from_vec(teacher_logits.data()[i * k..(i + 1) * k].to_vec()))
                .collect();
            let centered = cfg.centering;
            let teacher_probs: Vec<Tensor> = teacher_rows
                .iter()
                .map(|r| sharpen(r, cfg.tau_teacher, centered.then_some(&center)))
                .collect::<Result<_>>()?;

            // student forward/backward
            let sg = Graph::new();
            let bound = BoundParams::bind(&sg, &student, true);
            let student_local = encoder::forward_features(&sg, &bound, "", enc, &locals, None)?;
            let local_logits = encoder::forward_head(&sg, &bound, "", student_local.features)?;
            let global_logits = if cfg.pairing == Pairing::Conventional {
                let f = encoder::forward_features(&sg, &bound, "", enc, &globals, None)?;
                Some(encoder::forward_head(&sg, &bound, "", f.features)?)
            } else {
                None
            };

            let mut image_losses = Vec::with_capacity(per_image.len());
            for (grange, lrange) in &per_image {
                let probs: Vec<Tensor> = grange.clone().map(|i| teacher_probs[i].clone()).collect();
                match cfg.pairing {
                    Pairing::GlobalsToLocals => {
                        let rows: Vec<Var> = lrange
                            .clone()
                            .map(|i| sg.slice_rows(local_logits, i, i + 1))
                            .collect::<Result<_>>()?;
                        image_losses.push(dino_loss(&sg, &probs, &rows, cfg.tau_student, false)?);
                    }
                    Pairing::Conventional => {
                        // student sees globals then locals; pair index i
                        // matches teacher global i, those pairs are skipped
                        let gl = global_logits.expect("conventional pairing");
                        let mut rows: Vec<Var> = grange
                            .clone()
                            .enumerate()
                            .map(|(_, i)| sg.slice_rows(gl, i, i + 1))
                            .collect::<Result<_>>()?;
                        let locals_rows: Vec<Var> = lrange
                            .clone()
                            .map(|i| sg.slice_rows(local_logits, i, i + 1))
                            .collect::<Result<_>>()?;
                        rows.extend(locals_rows);
                        image_losses.push(dino_loss(&sg, &probs, &rows, cfg.tau_student, true)?);
                    }
                }
            }
            let mut loss = image_losses[0];
            for &l in &image_losses[1..] {
                loss = sg.add(loss, l)?;
            }
            let loss = sg.scale(loss, 1.0 / image_losses.len() as f32)?;
            let loss_value = sg.value(loss).scalar_value()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            sg.backward(loss)?;
            let grads = bound.grads();
            let lr = cosine_lr(cfg.lr, global_step, total_steps);
            let wd = linear_wd(cfg.weight_decay_start, cfg.weight_decay_end, global_step, total_steps);
            opt.step(&mut student, &grads, lr, wd)?;
            ema_update(&mut teacher, &student, cfg.ema_lambda)?;

            // running center over batch-mean teacher logits
            if cfg.centering {
                let rows = globals.len() as f32;
                for (ci, c) in center.data_mut().iter_mut().enumerate() {
                    let mean: f32 = (0..globals.len())
                        .map(|r| teacher_logits.data()[r * k + ci])
                        .sum::<f32>()
                        / rows;
                    *c = cfg.center_momentum * *c + (1.0 - cfg.center_momentum) * mean;
                }
            }
            history.push(LossRecord { epoch, step, loss: loss_value });
            global_step += 1;
        }
    }
    Ok(PretrainResult { student, teacher, center, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_frame(seed: u64) -> GrayImage {
        let mut rng = SeedStream::new(seed).stream("toy");
        GrayImage::new(64, 64, Tensor::uniform(&[4096], 0.0, 1.0, &mut rng).into_data()).unwrap()
    }

    #[test]
    fn multi_crop_counts_and_determinism() {
        let frame = toy_frame(0);
        let cfg = MultiCropConfig::defaults(32);
        let mut r1 = SeedStream::new(1).stream("crop");
        let mut r2 = SeedStream::new(1).stream("crop");
        let (g1, l1) = multi_crop(&frame, &cfg, 64, &mut r1).unwrap();
        let (g2, l2) = multi_crop(&frame, &cfg, 64, &mut r2).unwrap();
        assert_eq!(g1.len(), 2);
        assert_eq!(l1.len(), 1);
        assert_eq!(g1[0].width, 64);
        assert_eq!(l1[0].width, 32);
        assert_eq!(g1, g2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn degenerate_global_crop_is_the_resized_original() {
        let frame = toy_frame(2);
        let mut cfg = MultiCropConfig::defaults(32).no_jitter();
        cfg.global_scale = (1.0, 1.0);
        let mut rng = SeedStream::new(0).stream("crop");
        let (globals, _) = multi_crop(&frame, &cfg, 64, &mut rng).unwrap();
        assert_eq!(globals[0], frame);
    }

    #[test]
    fn inverted_scale_range_errors() {
        let mut cfg = MultiCropConfig::defaults(32);
        cfg.local_scale = (0.5, 0.2);
        let mut rng = SeedStream::new(0).stream("crop");
        assert!(multi_crop(&toy_frame(3), &cfg, 64, &mut rng).is_err());
    }

    #[test]
    fn sharpen_uniform_on_zero_logits() {
        let z = Tensor::zeros(&[8]);
        for tau in [0.1, 0.5, 2.0] {
            let p = sharpen(&z, tau, None).unwrap();
            for &v in p.data() {
                assert!((v - 0.125).abs() < 1e-6);
            }
        }
        assert!(sharpen(&z, 0.0, None).is_err());
    }

    #[test]
    fn sharpen_approaches_argmax_at_low_temperature() {
        let z = Tensor::from_vec(vec![1.0, 0.0]);
        let p = sharpen(&z, 1e-3, None).unwrap();
        assert!(p.data()[0] > 0.999);
    }

    #[test]
    fn dino_loss_uniform_is_log_k() {
        let k = 16;
        let g = Graph::new();
        let t = Tensor::full(&[k], 1.0 / k as f32);
        let s = g.leaf(Tensor::zeros(&[1, k]), true);
        let loss = dino_loss(&g, &[t], &[s], 0.1, false).unwrap();
        let v = g.value(loss).scalar_value().unwrap();
        assert!((v - (k as f32).ln()).abs() < 1e-5, "{v}");
    }

    #[test]
    fn dino_loss_one_hot_closed_form() {
        // teacher one-hot at index 1; student assigns softmax prob b there
        let g = Graph::new();
        let t = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let s = g.leaf(Tensor::new(vec![1, 2], vec![0.3, 0.9]).unwrap(), true);
        let loss = dino_loss(&g, &[t], &[s], 1.0, false).unwrap();
        let b = sharpen(&Tensor::from_vec(vec![0.3, 0.9]), 1.0, None).unwrap().data()[1];
        assert!((g.value(loss).scalar_value().unwrap() + b.ln()).abs() < 1e-6);
    }

    #[test]
    fn dino_loss_matches_scalar_oracle() {
        let mut rng = SeedStream::new(4).stream("loss");
        let teachers: Vec<Tensor> =
            (0..2).map(|_| Tensor::uniform(&[4], -2.0, 2.0, &mut rng)).collect();
        let students: Vec<Tensor> =
            (0..2).map(|_| Tensor::uniform(&[4], -2.0, 2.0, &mut rng)).collect();
        let (tau_t, tau_s) = (0.5, 0.1);
        let teacher_probs: Vec<Tensor> =
            teachers.iter().map(|t| sharpen(t, tau_t, None).unwrap()).collect();
        let g = Graph::new();
        let rows: Vec<Var> = students
            .iter()
            .map(|s| g.leaf(s.clone().reshaped(vec![1, 4]).unwrap(), true))
            .collect();
        let loss = dino_loss(&g, &teacher_probs, &rows, tau_s, false).unwrap();
        let oracle = dino_loss_value(&teachers, &students, tau_t, tau_s, None).unwrap();
        assert!((g.value(loss).scalar_value().unwrap() - oracle).abs() < 1e-5);
    }

    #[test]
    fn dino_loss_teacher_shift_invariance() {
        let mut rng = SeedStream::new(5).stream("loss");
        let teacher = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let mut shifted = teacher.clone();
        for v in shifted.data_mut() {
            *v += 3.7;
        }
        let student = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let a = dino_loss_value(&[teacher], std::slice::from_ref(&student), 0.5, 0.1, None).unwrap();
        let b = dino_loss_value(&[shifted], &[student], 0.5, 0.1, None).unwrap();
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn dino_loss_rejects_k_mismatch() {
        let g = Graph::new();
        let t = Tensor::zeros(&[4]);
        let s = g.leaf(Tensor::zeros(&[1, 5]), true);
        assert!(dino_loss(&g, &[t], &[s], 0.1, false).is_err());
    }

    #[test]
    fn ema_closed_forms() {
        let mut teacher = ParamStore::new();
        teacher.insert("w", Tensor::from_vec(vec![2.0, 2.0]));
        let mut student = ParamStore::new();
        student.insert("w", Tensor::from_vec(vec![4.0, 8.0]));

        let snapshot = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.get("w").unwrap(), snapshot.get("w").unwrap());

        ema_update(&mut teacher, &student, 0.5).unwrap();
        assert_eq!(teacher.get("w").unwrap().data(), &[3.0, 5.0]);

        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.get("w").unwrap().data(), &[4.0, 8.0]);

        assert!(ema_update(&mut teacher, &student, 1.5).is_err());
        student.insert("extra", Tensor::zeros(&[1]));
        assert!(ema_update(&mut teacher, &student, 0.5).is_err());
    }

    #[test]
    fn no_gradient_reaches_the_teacher() {
        let enc = EncoderConfig::tiny();
        let seeds = SeedStream::new(0);
        let mut rng = seeds.stream("init");
        let student = encoder::init_params(&enc, "", &mut rng).unwrap();
        let teacher = student.clone();
        let frame = toy_frame(7);
        let cfg = PretrainConfig::defaults(&enc);

        let g = Graph::new();
        let sb = BoundParams::bind(&g, &student, true);
        let tb = BoundParams::bind(&g, &teacher, false);
        let t_out = encoder::forward_features(&g, &tb, "", &enc, &[frame.clone()], None).unwrap();
        let t_logits = encoder::forward_head(&g, &tb, "", t_out.features).unwrap();
        let t_row = Tensor::from_vec(g.value(t_logits).data().to_vec());
        let t_prob = sharpen(&t_row, cfg.tau_teacher, None).unwrap();

        let local = frame.resize_bilinear(32, 32);
        let s_out = encoder::forward_features(&g, &sb, "", &enc, &[local], None).unwrap();
        let s_logits = encoder::forward_head(&g, &sb, "", s_out.features).unwrap();
        let loss = dino_loss(&g, &[t_prob], &[s_logits], cfg.tau_student, false).unwrap();
        g.backward(loss).unwrap();

        let t_grads = tb.grads();
        for (name, grad) in t_grads.iter() {
            assert!(grad.data().iter().all(|&v| v == 0.0), "teacher grad nonzero on {name}");
        }
        let s_grads = sb.grads();
        let any_nonzero = s_grads.iter().any(|(_, g)| g.data().iter().any(|&v| v != 0.0));
        assert!(any_nonzero, "student received no gradient");
    }

    #[test]
    fn pretrain_with_lambda_one_keeps_teacher_frozen() {
        let enc = EncoderConfig::tiny();
        let mut cfg = PretrainConfig::defaults(&enc);
        cfg.epochs = 1;
        cfg.batch_size = 1;
        cfg.ema_lambda = 1.0;
        let seeds = SeedStream::new(11);
        let frames = vec![toy_frame(8)];
        let result = pretrain(&frames, &enc, &cfg, &seeds).unwrap();
        let mut init_rng = seeds.stream("pretrain_init");
        let init = encoder::init_params(&enc, "", &mut init_rng).unwrap();
        for (name, t) in result.teacher.iter() {
            assert_eq!(t, init.get(name).unwrap(), "teacher drifted on {name}");
        }
        // the student did step
        let moved = result.student.iter().any(|(n, t)| t != init.get(n).unwrap());
        assert!(moved);
        assert_eq!(result.history.len(), 1);
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let enc = EncoderConfig::tiny();
        let cfg = PretrainConfig::defaults(&enc);
        assert!(pretrain(&[], &enc, &cfg, &SeedStream::new(0)).is_err());
    }

    #[test]
    fn center_converges_geometrically_for_frozen_teacher_logits() {
        // the running center c <- rho c + (1-rho) mu converges to mu
        let rho = 0.9f32;
        let mu = 3.0f32;
        let mut c = 0.0f32;
        let mut prev_gap = mu;
        for _ in 0..50 {
            c = rho * c + (1.0 - rho) * mu;
            let gap = (mu - c).abs();
            assert!(gap <= prev_gap * rho + 1e-6);
            prev_gap = gap;
        }
        assert!((mu - c).abs() < mu * rho.powi(49) + 1e-4);
    }
}
