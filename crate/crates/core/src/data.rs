//! Dataset ingestion, preprocessing, labeling, fold construction, and a
//! synthetic lung-ultrasound-like generator for desk-scale runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::GrayImage;
use crate::rng::SeedStream;

/// Frames per video after temporal resampling.
pub const FRAMES_PER_VIDEO: usize = 15;

/// Three-level severity label.
pub type Label = u8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub video_id: String,
    pub source: String,
    pub patient: String,
    pub dir: PathBuf,
    /// Raw i-LUS score in {0,1,2,3}, absent for unlabeled videos.
    pub ilus_label: Option<u8>,
    pub split_hint: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, Clone)]
pub struct VideoSample {
    pub video_id: String,
    pub frames: Vec<GrayImage>,
    pub label: Option<Label>,
}

/// Collapse the 4-level i-LUS score to the 3-level system:
/// 0 -> 0, 1 -> 1, 2 -> 1, 3 -> 2.
pub fn map_label(ilus: u8) -> Result<Label> {
    match ilus {
        0 => Ok(0),
        1 | 2 => Ok(1),
        3 => Ok(2),
        other => Err(Error::BadIlusScore(other as i64)),
    }
}

/// Index pattern for resampling a length-T frame sequence to length N:
/// output k takes input round(k * (T-1) / (N-1)). Handles both uniform
/// downsampling (T > N) and nearest-neighbor upsampling (T < N).
pub fn temporal_resample_indices(t: usize, n: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::EmptyDataset("video has no frames".into()));
    }
    if n == 1 || t == 1 {
        return Ok(vec![0; n.max(1)]);
    }
    Ok((0..n)
        .map(|k| ((k as f64) * ((t - 1) as f64) / ((n - 1) as f64)).round() as usize)
        .collect())
}

pub fn temporal_resample<T: Clone>(frames: &[T], n: usize) -> Result<Vec<T>> {
    let idx = temporal_resample_indices(frames.len(), n)?;
    Ok(idx.into_iter().map(|i| frames[i].clone()).collect())
}

/// Decode + luminance convert + bilinear resize to `image_size`, scaled
/// to [0, 1]. Accepts PNG (any bit layout the decoder handles) and PGM.
pub fn preprocess_frame(path: &Path, image_size: usize) -> Result<GrayImage> {
    let raw = load_gray(path)?;
    Ok(raw.resize_bilinear(image_size, image_size))
}

/// Load an image file as grayscale in [0, 1] without resizing.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "pgm" {
        return read_pgm(path);
    }
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for p in rgb.pixels() {
        // fixed luminance constants keep outputs bit-comparable
        let y = 0.299 * p.0[0] as f32 + 0.587 * p.0[1] as f32 + 0.114 * p.0[2] as f32;
        data.push(y / 255.0);
    }
    GrayImage::new(w, h, data)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::ImageDecode { path: path.to_path_buf(), msg })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" && magic != "P2" {
        return Err(format!("unsupported magic {magic}"));
    }
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: f32 = token()?.parse().map_err(|_| "bad maxval")?;
    if magic == "P2" {
        let mut data = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            let v: f32 = token()?.parse().map_err(|_| "bad pixel")?;
            data.push(v / maxval);
        }
        return GrayImage::new(w, h, data).map_err(|e| e.to_string());
    }
    // P5: one whitespace byte after maxval, then raw pixels
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| b as f32 / maxval).collect();
    GrayImage::new(w, h, data).map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).expect("vec write");
    for &p in &img.data {
        out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 5 {
                return Err(Error::Manifest(format!("line {}: expected 5+ columns", i + 1)));
            }
            let label = match cols[4].trim() {
                "" => None,
                s => Some(
                    s.parse::<u8>()
                        .map_err(|_| Error::Manifest(format!("line {}: bad label {s}", i + 1)))?,
                ),
            };
            rows.push(ManifestRow {
                video_id: cols[0].trim().to_string(),
                source: cols[1].trim().to_string(),
                patient: cols[2].trim().to_string(),
                dir: root.join(cols[3].trim()),
                ilus_label: label,
                split_hint: cols.get(5).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &rows {
            if !seen.insert(r.video_id.clone()) {
                return Err(Error::Manifest(format!("duplicate video_id {}", r.video_id)));
            }
        }
        Ok(Manifest { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("video_id,source,patient,dir,label\n");
        for r in &self.rows {
            let label = r.ilus_label.map(|l| l.to_string()).unwrap_or_default();
            let dir = r.dir.file_name().and_then(|d| d.to_str()).unwrap_or("");
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.video_id, r.source, r.patient, dir, label
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load one video: decode every frame file in its directory (sorted by
    /// name), preprocess, and temporally resample to N frames.
    pub fn load_video(&self, row: &ManifestRow, image_size: usize) -> Result<VideoSample> {
        let mut files: Vec<PathBuf> = fs::read_dir(&row.dir)
            .map_err(|e| Error::io(&row.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("pgm")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyDataset(format!("no frames in {}", row.dir.display())));
        }
        let frames: Vec<GrayImage> = files
            .iter()
            .map(|p| preprocess_frame(p, image_size))
            .collect::<Result<_>>()?;
        let frames = temporal_resample(&frames, FRAMES_PER_VIDEO)?;
        let label = row.ilus_label.map(map_label).transpose()?;
        Ok(VideoSample { video_id: row.video_id.clone(), frames, label })
    }
}

/// Group-aware fold assignment: all videos sharing a source_tag land in
/// the same fold; fold sizes balanced greedily by video count.
pub fn make_folds(manifest: &Manifest, fold_count: usize, seed: u64) -> Result<Vec<usize>> {
    if fold_count == 0 {
        return Err(Error::invalid("make_folds", "fold_count must be >= 1"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        groups.entry(row.source.as_str()).or_default().push(i);
    }
    if groups.len() < fold_count {
        return Err(Error::invalid(
            "make_folds",
            format!("{} source groups cannot fill {} folds", groups.len(), fold_count),
        ));
    }
    let mut order: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    // seeded shuffle breaks ties among equal-sized groups, then a stable
    // sort by size makes the greedy assignment balanced
    let mut rng = SeedStream::new(seed).stream("folds");
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.sort_by_key(|(_, v)| std::cmp::Reverse(v.len()));
    let mut fold_sizes = vec![0usize; fold_count];
    let mut assignment = vec![0usize; manifest.rows.len()];
    for (_, members) in order {
        let fold = fold_sizes
            .iter()
            .enumerate()
            .min_by_key(|(i, &s)| (s, *i))
            .map(|(i, _)| i)
            .unwrap();
        fold_sizes[fold] += members.len();
        for m in members {
            assignment[m] = fold;
        }
    }
    Ok(assignment)
}

// ── synthetic generator ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub videos_per_class: usize,
    pub image_size: usize,
    pub frames_per_video: usize,
    /// Number of frames per video that carry the class pattern (k <= N).
    pub informative_frames: usize,
    pub noise: f32,
    pub source_tags: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos_per_class: 10,
            image_size: 64,
            frames_per_video: FRAMES_PER_VIDEO,
            informative_frames: FRAMES_PER_VIDEO,
            noise: 0.02,
            source_tags: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub image: GrayImage,
    pub label: Label,
    /// Bounding box (x0, y0, w, h) of the class pattern, when localized.
    pub pattern_region: Option<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub video_id: String,
    pub source: String,
    pub patient: String,
    pub label: Label,
    pub frames: Vec<SynthFrame>,
}

/// Generate a desk-scale stand-in dataset. Class 0 frames carry bright
/// horizontal bands (A-line analogue), class 1 vertical streaks (B-line
/// analogue), class 2 a filled blob (consolidation analogue). Each video
/// shows its class pattern on exactly k of N frames and the class-0
/// pattern elsewhere; the video label is the max frame label.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthVideo>> {
    if spec.informative_frames > spec.frames_per_video {
        return Err(Error::invalid(
            "synth_dataset",
            format!(
                "informative_frames {} > frames_per_video {}",
                spec.informative_frames, spec.frames_per_video
            ),
        ));
    }
    if spec.videos_per_class == 0 {
        return Err(Error::EmptyDataset("videos_per_class is zero".into()));
    }
    let seeds = SeedStream::new(seed);
    let mut videos = Vec::new();
    for class in 0..3u8 {
        for v in 0..spec.videos_per_class {
            let idx = class as usize * spec.videos_per_class + v;
            let mut rng = seeds.stream_indexed("synth_video", idx as u64);
            let informative: Vec<usize> = if class == 0 {
                (0..spec.frames_per_video).collect()
            } else {
                let mut picked =
                    sample(&mut rng, spec.frames_per_video, spec.informative_frames).into_vec();
                picked.sort_unstable();
                picked
            };
            let mut frames = Vec::with_capacity(spec.frames_per_video);
            for f in 0..spec.frames_per_video {
                let label = if informative.contains(&f) { class } else { 0 };
                frames.push(synth_frame(spec.image_size, label, spec.noise, &mut rng));
            }
            videos.push(SynthVideo {
                video_id: format!("vid_{idx:04}"),
                source: format!("src{:02}", idx % spec.source_tags.max(1)),
                patient: format!("pat{idx:04}"),
                label: class,
                frames,
            });
        }
    }
    Ok(videos)
}

fn synth_frame(size: usize, label: Label, noise: f32, rng: &mut ChaCha8Rng) -> SynthFrame {
    let mut img = GrayImage::zeros(size, size);
    // dim background with a vertical falloff, loosely ultrasound-like
    for y in 0..size {
        let base = 0.12 + 0.06 * (1.0 - y as f32 / size as f32);
        for x in 0..size {
            img.set(x, y, base);
        }
    }
    let mut region = None;
    match label {
        0 => {
            // horizontal bands at regular depths with small jitter
            let n_bands = 3;
            for b in 0..n_bands {
                let y0 = size * (b + 1) / (n_bands + 1);
                let jitter = rng.gen_range(0..3);
                let y = (y0 + jitter).min(size - 2);
                for x in 0..size {
                    img.set(x, y, 0.85);
                    img.set(x, y + 1, 0.6);
                }
            }
        }
        1 => {
            // vertical streaks spanning the full depth
            let n_streaks = 3;
            for s in 0..n_streaks {
                let x0 = size * (s + 1) / (n_streaks + 1);
                let jitter = rng.gen_range(0..3);
                let x = (x0 + jitter).min(size - 2);
                for y in 0..size {
                    img.set(x, y, 0.9);
                    img.set(x + 1, y, 0.65);
                }
            }
        }
        _ => {
            // filled elliptical blob in the lower half
            let w = size / 3 + rng.gen_range(0..size / 8);
            let h = size / 4 + rng.gen_range(0..size / 8);
            let cx = rng.gen_range(w / 2..size - w / 2);
            let cy = rng.gen_range(size / 2..size - h / 2);
            for y in cy.saturating_sub(h / 2)..(cy + h / 2).min(size) {
                for x in cx.saturating_sub(w / 2)..(cx + w / 2).min(size) {
                    let dx = (x as f32 - cx as f32) / (w as f32 / 2.0);
                    let dy = (y as f32 - cy as f32) / (h as f32 / 2.0);
                    if dx * dx + dy * dy <= 1.0 {
                        img.set(x, y, 0.8);
                    }
                }
            }
            region = Some((cx.saturating_sub(w / 2), cy.saturating_sub(h / 2), w, h));
        }
    }
    if noise > 0.0 {
        for p in img.data.iter_mut() {
            *p = (*p + rng.gen_range(-noise..noise)).clamp(0.0, 1.0);
        }
    }
    SynthFrame { image: img, label, pattern_region: region }
}

/// Write a synthetic dataset in the on-disk layout the loader expects:
/// one directory per video of zero-padded PGM frames plus manifest.csv.
pub fn write_synth_dataset(videos: &[SynthVideo], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for v in videos {
        let vdir = out_dir.join(&v.video_id);
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (i, f) in v.frames.iter().enumerate() {
            write_pgm(&vdir.join(format!("frame_{i:04}.pgm")), &f.image)?;
        }
        // store the label in raw i-LUS form (3-level 2 maps back to 3)
        let ilus = match v.label {
            0 => 0,
            1 => 1,
            _ => 3,
        };
        manifest.rows.push(ManifestRow {
            video_id: v.video_id.clone(),
            source: v.source.clone(),
            patient: v.patient.clone(),
            dir: vdir,
            ilus_label: Some(ilus),
            split_hint: None,
        });
    }
    manifest.save(&out_dir.join("manifest.csv"))
}
