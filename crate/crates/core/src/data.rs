//! Deterministic synthetic datasets: images and videos of moving geometric
//! shapes with tight bounding-box labels.
//!
//! Every pixel is a pure function of the scene spec and the image/clip
//! index (ChaCha streams keyed by index), and pixel values are quantized to
//! the 8-bit grid at generation time so disk round-trips are lossless.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   annotations.jsonl          {"file":"images/img_00000.pgm","boxes":[...]}
//!   images/img_00000.pgm       binary P5 (P6 for the color variant)
//!   videos/clip_000/manifest.json   {"frames":[{"file":"frame_000.pgm","boxes":[...]}]}
//!   videos/clip_000/frame_000.pgm
//! ```

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BBox;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape extent range in pixels; floors at 6 px.
    pub min_size: f64,
    pub max_size: f64,
    /// Log-uniform width/height imbalance; 0 keeps shapes square.
    pub aspect_jitter: f64,
    /// Per-axis speed range in px/frame for videos.
    pub min_speed: f64,
    pub max_speed: f64,
    pub allow_occlusion: bool,
    /// Amplitude of additive uniform noise.
    pub noise: f64,
    /// Render three channels (P6) instead of grayscale (P5).
    pub color: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            canvas: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 10.0,
            max_size: 28.0,
            aspect_jitter: 0.3,
            min_speed: 0.5,
            max_speed: 2.0,
            allow_occlusion: true,
            noise: 0.02,
            color: false,
        }
    }
}

impl SceneSpec {
    fn validate(&self) {
        assert!(self.canvas >= 16, "canvas too small");
        assert!(self.min_objects <= self.max_objects, "empty object count range");
        assert!(self.min_size >= 6.0, "boxes must be at least 6 px");
        assert!(self.min_size <= self.max_size, "empty size range");
        assert!(self.max_size <= self.canvas as f64 - 2.0, "shapes must fit the canvas");
        assert!(self.min_speed <= self.max_speed, "empty speed range");
        assert!((0.0..=1.0).contains(&self.noise), "noise level in [0,1]");
    }

    pub fn channels(&self) -> usize {
        if self.color {
            3
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SceneObject {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    brightness: f64,
}

/// Elastic reflection between `lo` and `hi` as a closed form of time.
fn reflect(c0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let range = hi - lo;
    if range <= 0.0 {
        return lo.max(hi);
    }
    let period = 2.0 * range;
    let u = (c0 - lo + v * t).rem_euclid(period);
    lo + if u <= range { u } else { period - u }
}

fn sample_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let s = spec.canvas as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _attempt in 0..50 {
            let base = rng.gen_range(spec.min_size..=spec.max_size);
            let ratio = if spec.aspect_jitter > 0.0 {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                (u * (1.0 + spec.aspect_jitter).ln()).exp()
            } else {
                1.0
            };
            let w = (base * ratio).clamp(6.0, s - 2.0);
            let h = (base / ratio).clamp(6.0, s - 2.0);
            let cx = rng.gen_range(0.5 * w..=s - 0.5 * w);
            let cy = rng.gen_range(0.5 * h..=s - 0.5 * h);
            let class = rng.gen_range(0..CLASS_NAMES.len());
            let speed_x = rng.gen_range(spec.min_speed..=spec.max_speed);
            let speed_y = rng.gen_range(spec.min_speed..=spec.max_speed);
            let vx = if rng.gen_bool(0.5) { speed_x } else { -speed_x };
            let vy = if rng.gen_bool(0.5) { speed_y } else { -speed_y };
            let brightness = rng.gen_range(0.55..=0.95);
            let candidate = SceneObject { class, cx, cy, w, h, vx, vy, brightness };
            let collides = !spec.allow_occlusion
                && objects.iter().any(|o| {
                    crate::boxes::jaccard(
                        &BBox::new(o.cx, o.cy, o.w, o.h),
                        &BBox::new(cx, cy, w, h),
                    ) > 0.05
                });
            if !collides {
                placed = Some(candidate);
                break;
            }
        }
        if let Some(obj) = placed {
            objects.push(obj);
        }
    }
    objects
}

fn inside(obj: &SceneObject, px: f64, py: f64) -> bool {
    let dx = px - obj.cx;
    let dy = py - obj.cy;
    let (hw, hh) = (0.5 * obj.w, 0.5 * obj.h);
    match obj.class {
        // ellipse inscribed in the box
        0 => (dx / hw) * (dx / hw) + (dy / hh) * (dy / hh) <= 1.0,
        // the box itself
        1 => dx.abs() <= hw && dy.abs() <= hh,
        // isoceles triangle, apex up: widest at the bottom edge
        2 => {
            if dy.abs() > hh {
                return false;
            }
            let frac = (dy + hh) / (2.0 * hh); // 0 at apex row, 1 at base
            dx.abs() <= hw * frac
        }
        _ => unreachable!(),
    }
}

fn class_color(class: usize, brightness: f64) -> [f64; 3] {
    // distinct dominant channel per class
    match class {
        0 => [brightness, 0.35 * brightness, 0.35 * brightness],
        1 => [0.35 * brightness, brightness, 0.35 * brightness],
        _ => [0.35 * brightness, 0.35 * brightness, brightness],
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(spec: &SceneSpec, objects: &[SceneObject], positions: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Tensor {
    let s = spec.canvas;
    let c = spec.channels();
    let mut img = Tensor::zeros(vec![1, c, s, s]);
    let data = img.data_mut();
    let background = 0.1;
    for ch in 0..c {
        for py in 0..s {
            for px in 0..s {
                let noise = if spec.noise > 0.0 {
                    rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                data[(ch * s + py) * s + px] = background + noise;
            }
        }
    }
    for (obj, &(cx, cy)) in objects.iter().zip(positions) {
        let moved = SceneObject { cx, cy, ..*obj };
        let (x0, y0, x1, y1) = BBox::new(cx, cy, obj.w, obj.h).corners();
        let colors = class_color(obj.class, obj.brightness);
        for py in y0.floor().max(0.0) as usize..(y1.ceil() as usize).min(s) {
            for px in x0.floor().max(0.0) as usize..(x1.ceil() as usize).min(s) {
                if inside(&moved, px as f64 + 0.5, py as f64 + 0.5) {
                    for ch in 0..c {
                        let v = if spec.color { colors[ch] } else { obj.brightness };
                        data[(ch * s + py) * s + px] = v;
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = quantize(*v);
    }
    img
}

fn image_rng(spec: &SceneSpec, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic labeled image: pixels and ground truth depend only on
/// (spec, index). Ground-truth boxes are the exact placement boxes of the
/// rendered shapes.
pub fn generate_image(spec: &SceneSpec, index: u64) -> (Tensor, Vec<(BBox, usize)>) {
    spec.validate();
    let mut rng = image_rng(spec, index);
    let objects = sample_objects(spec, &mut rng);
    let positions: Vec<(f64, f64)> = objects.iter().map(|o| (o.cx, o.cy)).collect();
    let img = render(spec, &objects, &positions, &mut rng);
    let gts = objects
        .iter()
        .map(|o| (BBox::new(o.cx, o.cy, o.w, o.h), o.class))
        .collect();
    (img, gts)
}

/// One frame of a video with per-object identities (diagnostics only).
#[derive(Debug, Clone)]
pub struct VideoFrame {
    pub image: Tensor,
    pub gts: Vec<(BBox, usize)>,
    pub object_ids: Vec<usize>,
}

/// An ordered frame sequence with per-frame ground truth.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub frames: Vec<VideoFrame>,
}

/// Objects move at constant velocity and reflect elastically off the
/// canvas walls; sizes, classes, and identities persist across frames.
pub fn generate_video(spec: &SceneSpec, clip_index: u64, frames: usize) -> VideoSequence {
    spec.validate();
    assert!(frames >= 1, "a video needs at least one frame");
    let mut rng = image_rng(spec, (1 << 32) | clip_index);
    let objects = sample_objects(spec, &mut rng);
    let s = spec.canvas as f64;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let positions: Vec<(f64, f64)> = objects
            .iter()
            .map(|o| {
                (
                    reflect(o.cx, o.vx, t as f64, 0.5 * o.w, s - 0.5 * o.w),
                    reflect(o.cy, o.vy, t as f64, 0.5 * o.h, s - 0.5 * o.h),
                )
            })
            .collect();
        let image = render(spec, &objects, &positions, &mut rng);
        let gts = objects
            .iter()
            .zip(&positions)
            .map(|(o, &(cx, cy))| (BBox::new(cx, cy, o.w, o.h), o.class))
            .collect();
        out.push(VideoFrame {
            image,
            gts,
            object_ids: (0..objects.len()).collect(),
        });
    }
    VideoSequence { frames: out }
}

// ── Portable graymap / pixmap ───────────────────────────────────────────

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
    #[error("annotation line {line}: {msg}")]
    BadAnnotation { line: usize, msg: String },
    #[error("manifest {path}: {msg}")]
    BadManifest { path: PathBuf, msg: String },
    #[error("video frame listed in manifest but missing on disk: {0}")]
    MissingFrame(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Writes `[1,1,H,W]` as binary P5 or `[1,3,H,W]` as binary P6.
pub fn write_image(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (_, c, h, w) = image.dims4();
    assert!(c == 1 || c == 3, "images are grayscale or 3-channel");
    let mut bytes = Vec::with_capacity(32 + c * h * w);
    let magic = if c == 1 { "P5" } else { "P6" };
    bytes.extend_from_slice(format!("{}\n{} {}\n255\n", magic, w, h).as_bytes());
    for py in 0..h {
        for px in 0..w {
            for ch in 0..c {
                let v = image.at4(0, ch, py, px);
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a binary P5/P6 file into `[1,C,H,W]` with values on the 8-bit
/// grid in `[0,1]`.
pub fn read_image(path: &Path) -> Result<Tensor, DataError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(path))?;
    let bad = |msg: &str| DataError::BadImage { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 2 {
        return Err(bad("truncated header"));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("expected binary P5 or P6")),
    };
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header field"))?;
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let expected = w * h * channels;
    if bytes.len() < pos + expected {
        return Err(bad("pixel payload truncated"));
    }
    let mut img = Tensor::zeros(vec![1, channels, h, w]);
    let data = img.data_mut();
    for py in 0..h {
        for px in 0..w {
            for ch in 0..channels {
                let v = bytes[pos + (py * w + px) * channels + ch] as f64 / 255.0;
                data[(ch * h + py) * w + px] = v;
            }
        }
    }
    Ok(img)
}

// ── Annotations and manifests ───────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct BoxDto {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    file: String,
    boxes: Vec<BoxDto>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    frames: Vec<AnnotationLine>,
}

fn to_dtos(gts: &[(BBox, usize)]) -> Vec<BoxDto> {
    gts.iter()
        .map(|(b, c)| BoxDto { cx: b.cx, cy: b.cy, w: b.w, h: b.h, class: *c })
        .collect()
}

fn from_dtos(dtos: &[BoxDto]) -> Vec<(BBox, usize)> {
    dtos.iter()
        .map(|d| (BBox::new(d.cx, d.cy, d.w, d.h), d.class))
        .collect()
}

/// A labeled image loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub file: String,
    pub image: Tensor,
    pub gts: Vec<(BBox, usize)>,
}

/// Generates `images` labeled stills under `dir`.
pub fn write_image_dataset(dir: &Path, spec: &SceneSpec, images: usize) -> Result<(), DataError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut jsonl = String::new();
    for i in 0..images {
        let (img, gts) = generate_image(spec, i as u64);
        let ext = if spec.color { "ppm" } else { "pgm" };
        let rel = format!("images/img_{:05}.{}", i, ext);
        write_image(&dir.join(&rel), &img)?;
        let line = AnnotationLine { file: rel, boxes: to_dtos(&gts) };
        jsonl.push_str(&serde_json::to_string(&line).expect("annotation serializes"));
        jsonl.push('\n');
    }
    let ann = dir.join("annotations.jsonl");
    fs::write(&ann, jsonl).map_err(io_err(&ann))
}

/// Reads a still-image dataset in annotation order.
pub fn read_image_dataset(dir: &Path) -> Result<Vec<LoadedImage>, DataError> {
    let ann = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ann).map_err(io_err(&ann))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine = serde_json::from_str(line).map_err(|e| {
            DataError::BadAnnotation { line: lineno + 1, msg: e.to_string() }
        })?;
        let image = read_image(&dir.join(&parsed.file))?;
        out.push(LoadedImage {
            file: parsed.file,
            image,
            gts: from_dtos(&parsed.boxes),
        });
    }
    Ok(out)
}

/// Generates `clips` videos of `frames` frames each under `dir/videos`.
pub fn write_video_dataset(
    dir: &Path,
    spec: &SceneSpec,
    clips: usize,
    frames: usize,
) -> Result<(), DataError> {
    for clip in 0..clips {
        let clip_dir = dir.join("videos").join(format!("clip_{:03}", clip));
        fs::create_dir_all(&clip_dir).map_err(io_err(&clip_dir))?;
        let video = generate_video(spec, clip as u64, frames);
        let mut manifest = Manifest { frames: Vec::with_capacity(frames) };
        for (t, frame) in video.frames.iter().enumerate() {
            let ext = if spec.color { "ppm" } else { "pgm" };
            let rel = format!("frame_{:03}.{}", t, ext);
            write_image(&clip_dir.join(&rel), &frame.image)?;
            manifest.frames.push(AnnotationLine { file: rel, boxes: to_dtos(&frame.gts) });
        }
        let mpath = clip_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, text).map_err(io_err(&mpath))?;
    }
    Ok(())
}

/// A video loaded from disk (no identities; those are generation-side
/// diagnostics).
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub name: String,
    pub frames: Vec<LoadedImage>,
}

/// Reads every clip under `dir/videos` in sorted directory order.
pub fn read_video_dataset(dir: &Path) -> Result<Vec<LoadedVideo>, DataError> {
    let vdir = dir.join("videos");
    let mut clip_dirs: Vec<PathBuf> = fs::read_dir(&vdir)
        .map_err(io_err(&vdir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let mut out = Vec::with_capacity(clip_dirs.len());
    for clip_dir in clip_dirs {
        let mpath = clip_dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            DataError::BadManifest { path: mpath.clone(), msg: e.to_string() }
        })?;
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for entry in &manifest.frames {
            let fpath = clip_dir.join(&entry.file);
            if !fpath.is_file() {
                return Err(DataError::MissingFrame(fpath));
            }
            frames.push(LoadedImage {
                file: entry.file.clone(),
                image: read_image(&fpath)?,
                gts: from_dtos(&entry.boxes),
            });
        }
        out.push(LoadedVideo {
            name: clip_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            frames,
        });
    }
    Ok(out)
}
