use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape { context: "frame", expected: vec![height, width], got: vec![data.len()] });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Border-replicated read at integer coordinates.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with border replication.
    pub fn sample(&self, y: f32, x: f32) -> f32 {
        bilinear(&self.data, self.height, self.width, 1, 0, y, x)
    }

    /// Translates the content by `(dx, dy)`, filling uncovered pixels with `fill`.
    pub fn shifted(&self, dx: isize, dy: isize, fill: f32) -> Frame {
        let mut out = Frame::filled(self.height, self.width, fill);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sx >= 0 && sy < self.height as isize && sx < self.width as isize {
                    out.set(y as usize, x as usize, self.get(sy as usize, sx as usize));
                }
            }
        }
        out
    }
}

/// Bilinear sample of channel `ch` of an interleaved `[h][w][stride]` buffer.
pub(crate) fn bilinear(data: &[f32], h: usize, w: usize, stride: usize, ch: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let at = |yy: usize, xx: usize| data[(yy * w + xx) * stride + ch];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// An ordered grayscale clip from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub video_id: String,
    pub frames: Vec<Frame>,
}

impl VideoSequence {
    pub fn new(video_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let video_id = video_id.into();
        if let Some(first) = frames.first() {
            for (i, f) in frames.iter().enumerate() {
                if (f.height, f.width) != (first.height, first.width) {
                    return Err(Error::Data(format!(
                        "video {video_id}: frame {i} is {}x{}, expected {}x{}",
                        f.height, f.width, first.height, first.width
                    )));
                }
                if f.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!("video {video_id}: frame {i} has values outside [0,1]")));
                }
            }
        }
        Ok(Self { video_id, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the frames; `None` for an empty video.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height, f.width))
    }
}

pub fn frame_path(root: &Path, video_id: &str, index: usize) -> PathBuf {
    root.join(video_id).join(format!("{index:06}.png"))
}

/// Loads `<root>/<video_id>/%06d.png`, converting colour images to grayscale.
pub fn load_video(root: &Path, video_id: &str) -> Result<VideoSequence> {
    let dir = root.join(video_id);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    for path in files {
        let img = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        frames.push(Frame::new(h as usize, w as usize, data)?);
    }
    VideoSequence::new(video_id, frames)
}

/// Lists video ids (subdirectory names) under `root`, sorted.
pub fn list_videos(root: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_owned))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn load_videos(root: &Path) -> Result<Vec<VideoSequence>> {
    list_videos(root)?.iter().map(|id| load_video(root, id)).collect()
}

/// Writes frames as 8-bit grayscale PNGs.
pub fn save_video(root: &Path, video: &VideoSequence) -> Result<()> {
    let dir = root.join(&video.video_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        let mut img = GrayImage::new(f.width as u32, f.height as u32);
        for (p, &v) in img.pixels_mut().zip(&f.data) {
            *p = Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
        }
        let path = frame_path(root, &video.video_id, i);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}
