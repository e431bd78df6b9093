//! Datasets and image ingestion.
//!
//! The default data source is procedural: each class is a parameterized
//! pattern family with its own color palette, so both reconstruction and
//! class-conditional generation are learnable at desk scale. Real images
//! come in as binary P6 PPM files only (convert anything else externally,
//! e.g. `magick in.png -resize 32x32^ -gravity center -extent 32x32 out.ppm`).
//!
//! Pixels are `f32` in [-1,1] throughout. PPM bytes map in as x/127.5 - 1
//! and out as round((x+1)*127.5) clamped to [0,255].

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// [N, 3, H, W] in [-1, 1].
    pub images: Tensor<f32>,
    /// Class label per image, in [0, num_classes).
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// One image as a [1,3,H,W] view copy.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let (_, c, h, w) = self.images.dims4();
        let stride = c * h * w;
        Tensor::new(vec![1, c, h, w], self.images.data()[i * stride..(i + 1) * stride].to_vec())
    }

    /// Stack the given indices into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (_, c, h, w) = self.images.dims4();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), c, h, w], data), labels)
    }

    /// Deterministic train/eval split: seeded shuffle, last `holdout` fraction
    /// held out (at least one image on each side).
    pub fn split(&self, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(seed).derive("split", 0).shuffle(&mut order);
        let n_eval = ((n as f64 * holdout) as usize).clamp(1, n - 1);
        let eval = order.split_off(n - n_eval);
        (order, eval)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

/// Class palette: golden-angle hue spacing keeps any number of classes
/// well separated.
fn class_colors(class: usize, jitter: f64) -> ([f64; 3], [f64; 3]) {
    let hue = (class as f64 * 0.618_034) + jitter;
    let fg = hsv_to_rgb(hue, 0.9, 0.9);
    let bg = hsv_to_rgb(hue + 0.5, 0.7, 0.45);
    (fg, bg)
}

/// Procedural dataset: class selects a pattern family and palette, the seed
/// selects per-instance geometry and slight color jitter.
pub fn synth_generate(n: usize, size: usize, num_classes: usize, seed: u64) -> ImageDataset {
    assert!(num_classes >= 1 && n >= 1 && size >= 8);
    let mut images = Tensor::zeros(vec![n, 3, size, size]);
    let mut labels = Vec::with_capacity(n);
    let base = Rng::new(seed);
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        let mut rng = base.derive("image", i as u64);
        let (fg, bg) = class_colors(class, rng.uniform_range(-0.02, 0.02));
        let pattern = class % 8;
        let cx = rng.uniform_range(0.3, 0.7);
        let cy = rng.uniform_range(0.3, 0.7);
        let scale = rng.uniform_range(0.5, 0.9);
        let phase = rng.uniform_range(0.0, 1.0);
        let freq = rng.uniform_range(3.0, 9.0);
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let (sin_a, cos_a) = angle.sin_cos();
        let gain = rng.uniform_range(0.85, 1.0);
        let stride = 3 * size * size;
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64;
                let v = (y as f64 + 0.5) / size as f64;
                // Rotated coordinate for oriented patterns.
                let r = (u - cx) * cos_a + (v - cy) * sin_a;
                // Mix in [0,1]: how much foreground at this pixel.
                let m = match pattern {
                    0 => v,
                    1 => u,
                    2 => {
                        let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                        if d < 0.3 * scale { 1.0 } else { 0.0 }
                    }
                    3 => {
                        let c = ((u * freq + phase).floor() + (v * freq + phase).floor()) as i64;
                        if c % 2 == 0 { 1.0 } else { 0.0 }
                    }
                    4 => {
                        if ((r * freq + phase).fract() + 1.0).fract() < 0.5 { 1.0 } else { 0.0 }
                    }
                    5 => {
                        if (((u + v) * freq + phase).fract()) < 0.5 { 1.0 } else { 0.0 }
                    }
                    6 => {
                        let half = 0.22 * scale;
                        if (u - cx).abs() < half && (v - cy).abs() < half { 1.0 } else { 0.0 }
                    }
                    _ => {
                        let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                        if ((d * freq + phase).fract()) < 0.5 { 1.0 } else { 0.0 }
                    }
                };
                for ch in 0..3 {
                    let val = (fg[ch] * m + bg[ch] * (1.0 - m)) * gain;
                    let noise = rng.uniform_range(-0.05, 0.05);
                    let px = (2.0 * val - 1.0 + noise).clamp(-1.0, 1.0);
                    images.data_mut()[i * stride + ch * size * size + y * size + x] = px as f32;
                }
            }
        }
    }
    ImageDataset { images, labels, num_classes }
}

/// Parse a binary P6 PPM with maxval 255. Header tokens may be separated by
/// whitespace and `#` comments.
pub fn parse_ppm(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Format(format!("{origin}: {msg}"));
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(bad("not a P6 ppm (bad magic)"));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            if pos >= bytes.len() {
                return Err(bad("truncated header"));
            }
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf-8");
        *field = text.parse().map_err(|_| bad("header field out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (only 255)")));
    }
    // Exactly one whitespace byte after maxval.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad(&format!(
            "pixel payload truncated: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Center-crop to square then nearest-neighbor resize to `size`, mapping
/// bytes to [-1,1]. Nearest sampling uses src = floor((i + 0.5) * src/dst).
pub fn ppm_to_image(w: usize, h: usize, pixels: &[u8], size: usize) -> Tensor<f32> {
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let mut out = Tensor::zeros(vec![1, 3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let sy = y0 + ((y as f64 + 0.5) * side as f64 / size as f64) as usize;
            let sx = x0 + ((x as f64 + 0.5) * side as f64 / size as f64) as usize;
            let sy = sy.min(y0 + side - 1);
            let sx = sx.min(x0 + side - 1);
            for c in 0..3 {
                let byte = pixels[(sy * w + sx) * 3 + c];
                out.data_mut()[c * size * size + y * size + x] = byte as f32 / 127.5 - 1.0;
            }
        }
    }
    out
}

/// Load every `.ppm` in a directory (sorted by filename for determinism).
/// Class labels come from leading `<digits>_` filename prefixes when every
/// file has one, else all zeros with a single class.
pub fn load_ppm_folder(path: &Path, size: usize) -> Result<ImageDataset> {
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .ppm files in {}", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file).map_err(|e| Error::io(file, e))?;
        let name = file.file_name().unwrap_or_default().to_string_lossy().to_string();
        let (w, h, pixels) = parse_ppm(&bytes, &name)?;
        let img = ppm_to_image(w, h, &pixels, size);
        data.extend_from_slice(img.data());
        let label = name
            .split('_')
            .next()
            .and_then(|prefix| prefix.parse::<usize>().ok());
        labels.push(label);
    }
    let classes: Vec<usize> = if labels.iter().all(|l| l.is_some()) {
        labels.iter().map(|l| l.unwrap()).collect()
    } else {
        vec![0; labels.len()]
    };
    let num_classes = classes.iter().max().map_or(1, |m| m + 1);
    Ok(ImageDataset {
        images: Tensor::new(vec![files.len(), 3, size, size], data),
        labels: classes,
        num_classes,
    })
}

/// Write one [1,3,H,W] or [3,H,W] image in [-1,1] as binary P6.
pub fn save_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match image.rank() {
        4 => {
            let (b, c, h, w) = image.dims4();
            assert_eq!(b, 1, "save_ppm expects a single image");
            (c, h, w)
        }
        3 => (image.shape()[0], image.shape()[1], image.shape()[2]),
        other => panic!("save_ppm expects rank 3 or 4, got {other}"),
    };
    assert_eq!(c, 3, "save_ppm expects 3 channels");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.data()[ch * h * w + y * w + x];
                let byte = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                out.push(byte);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
