//! On-disk stream layout: `frames/`, `labels/` and `flow/` directories of
//! zero-padded frame indices.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use conjflow_core::stream::{Frame, FrameSource, GroundTruth, SyntheticSpec, SyntheticStream};
use conjflow_core::Tensor;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};

pub const FLOW_MAGIC: [u8; 4] = *b"PIEH";

pub fn frame_name(t: u64) -> String {
    format!("{t:06}")
}

pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let (c, h, w) = flow.chw();
    if c != 2 {
        return Err(format_err(path, "flow must have two channels"));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&FLOW_MAGIC)?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for i in 0..h * w {
        out.write_all(&(flow.plane(0)[i] as f32).to_le_bytes())?;
        out.write_all(&(flow.plane(1)[i] as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || bytes[..4] != FLOW_MAGIC {
        return Err(format_err(path, "missing flow magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != 12 + 8 * h * w {
        return Err(format_err(path, format!("expected {} bytes of flow for {h}x{w}", 8 * h * w)));
    }
    let mut flow = Tensor::zeros(&[2, h, w]);
    for i in 0..h * w {
        let f = |k: usize| f32::from_le_bytes(bytes[12 + 8 * i + 4 * k..16 + 8 * i + 4 * k].try_into().unwrap()) as f64;
        let (u, v) = (f(0), f(1));
        if !u.is_finite() || !v.is_finite() {
            return Err(format_err(path, "non-finite flow value"));
        }
        flow.plane_mut(0)[i] = u;
        flow.plane_mut(1)[i] = v;
    }
    Ok(flow)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1|3, H, W]` frame; single-channel frames go to PGM.
pub fn write_frame(path: &Path, pixels: &Tensor) -> Result<()> {
    let (c, h, w) = pixels.chw();
    let img = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_byte(pixels.plane(0)[y as usize * w + x as usize])])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([to_byte(pixels.plane(0)[i]), to_byte(pixels.plane(1)[i]), to_byte(pixels.plane(2)[i])])
        })),
        _ => return Err(format_err(path, "frames need 1 or 3 channels")),
    };
    let format = if c == 1 { ImageFormat::Pnm } else { ImageFormat::Png };
    img.save_with_format(path, format).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_));
    let planes: Vec<f64> = if gray {
        img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect()
    } else {
        let rgb = img.to_rgb8();
        (0..3).flat_map(|c| rgb.pixels().map(move |p| p[c] as f64 / 255.0).collect::<Vec<_>>()).collect()
    };
    Ok(Tensor::from_vec(&[if gray { 1 } else { 3 }, h, w], planes)?)
}

/// Labels are 8-bit grey PNGs whose value is the class id.
pub fn write_labels(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| format_err(path, "label grid does not match the resolution"))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.to_luma8().into_raw(), h, w))
}

/// A stream read from a frame directory.
#[derive(Debug)]
pub struct DirectoryStream {
    root: PathBuf,
    files: Vec<PathBuf>,
    height: usize,
    width: usize,
    channels: usize,
    cursor: u64,
}

impl DirectoryStream {
    pub fn open(root: &Path) -> Result<Self> {
        let frames = root.join("frames");
        if !frames.is_dir() {
            return Err(Error::MissingDirectory(frames));
        }
        let mut indices = Vec::new();
        for entry in fs::read_dir(&frames)? {
            let path = entry?.path();
            let ext = path.extension().and_then(|e| e.to_str());
            if !matches!(ext, Some("png" | "pgm")) {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let index: u64 = stem
                .parse()
                .ok()
                .filter(|_| stem.len() == 6)
                .ok_or_else(|| format_err(&path, "frame names must be six decimal digits"))?;
            indices.push((index, path));
        }
        indices.sort();
        for (k, (index, path)) in indices.iter().enumerate() {
            if *index != k as u64 {
                return Err(format_err(path, format!("frame indices must be contiguous from 0, expected {k}")));
            }
        }
        if indices.len() < 2 {
            return Err(format_err(&frames, "a stream needs at least two frames"));
        }
        let files: Vec<PathBuf> = indices.into_iter().map(|(_, p)| p).collect();
        let (c, h, w) = read_frame(&files[0])?.chw();
        for (k, f) in files.iter().enumerate().skip(1) {
            let (fw, fh) = image::image_dimensions(f).map_err(|source| Error::Image {
                path: f.clone(),
                source,
            })?;
            if (fh as usize, fw as usize) != (h, w) {
                return Err(Error::Resolution {
                    index: k as u64,
                    expected: (h, w, c),
                    found: (fh as usize, fw as usize, c),
                });
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            files,
            height: h,
            width: w,
            channels: c,
            cursor: 0,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FrameSource for DirectoryStream {
    fn next_frame(&mut self) -> conjflow_core::Result<Frame> {
        let t = self.cursor;
        let Some(path) = self.files.get(t as usize) else {
            return Err(conjflow_core::Error::EndOfStream {
                frames: self.files.len() as u64,
            });
        };
        let pixels = read_frame(path).map_err(source_err)?;
        if pixels.chw() != (self.channels, self.height, self.width) {
            let (c, h, w) = pixels.chw();
            return Err(conjflow_core::Error::Shape {
                op: "frame",
                expected: vec![self.channels, self.height, self.width],
                found: vec![c, h, w],
            });
        }
        self.cursor += 1;
        Ok(Frame { pixels, t })
    }

    fn len(&self) -> Option<u64> {
        Some(self.files.len() as u64)
    }

    fn position(&self) -> u64 {
        self.cursor
    }

    fn height(&self) -> usize {
        self.height
    }

    fn width(&self) -> usize {
        self.width
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn seek(&mut self, t: u64) -> conjflow_core::Result<()> {
        if t > self.files.len() as u64 {
            return Err(conjflow_core::Error::EndOfStream {
                frames: self.files.len() as u64,
            });
        }
        self.cursor = t;
        Ok(())
    }

    fn ground_truth(&self, t: u64) -> conjflow_core::Result<Option<GroundTruth>> {
        let bad = |what: &str| conjflow_core::Error::Source(format!("frame {t}: {what} do not match the stream resolution"));
        let label_path = self.root.join("labels").join(format!("{}.png", frame_name(t)));
        if !label_path.is_file() {
            return Ok(None);
        }
        let (labels, h, w) = read_labels(&label_path).map_err(source_err)?;
        if (h, w) != (self.height, self.width) {
            return Err(bad("labels"));
        }
        let flow_path = self.root.join("flow").join(format!("{}.flo", frame_name(t)));
        let flow = if t > 0 && flow_path.is_file() {
            let flow = read_flo(&flow_path).map_err(source_err)?;
            if flow.chw() != (2, self.height, self.width) {
                return Err(bad("flow"));
            }
            Some(flow)
        } else {
            None
        };
        Ok(Some(GroundTruth { labels, flow }))
    }
}

fn source_err(e: Error) -> conjflow_core::Error {
    conjflow_core::Error::Source(e.to_string())
}

/// Summary of a generated stream directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub frames: u64,
    pub flows: u64,
    pub classes: Vec<String>,
}

/// Writes frames, labels and true flows of a synthetic stream under `out`.
pub fn generate_toy_stream(spec: &SyntheticSpec, out: &Path) -> Result<GenerateSummary> {
    let stream = SyntheticStream::new(spec.clone())?;
    for sub in ["frames", "labels", "flow"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let ext = if spec.channels == 1 { "pgm" } else { "png" };
    let n = spec.frames() as u64;
    for t in 0..n {
        let name = frame_name(t);
        write_frame(&out.join("frames").join(format!("{name}.{ext}")), &stream.render(t as usize))?;
        write_labels(&out.join("labels").join(format!("{name}.png")), &stream.labels(t as usize), spec.height, spec.width)?;
        if t > 0 {
            write_flo(&out.join("flow").join(format!("{name}.flo")), &stream.flow(t as usize))?;
        }
    }
    let mut classes = vec![String::from("background")];
    classes.extend(spec.objects.iter().map(|o| o.name.clone()));
    Ok(GenerateSummary {
        frames: n,
        flows: n.saturating_sub(1),
        classes,
    })
}
