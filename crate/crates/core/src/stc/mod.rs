//! Video ingestion, RoI extraction, optical flow and spatio-temporal cube construction.

mod cube;
pub mod flow;
pub mod roi;
pub mod synth;
pub mod video;

pub use cube::{build_stc, crop_flow, crop_frame, square_window, StClip};
pub use flow::{compute_flow, BlockMatchParams, FlowBackend, FlowField, FramePair};
pub use roi::{extract_rois, load_rois, ForegroundParams, RoiBox};
pub use synth::{generate_synthetic_dataset, SpriteKind, SpriteTrack, SynthConfig, SyntheticDataset};
pub use video::{Frame, VideoSequence};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of every cube crop.
pub const CLIP_SIZE: usize = 32;

/// Flow maps for every consecutive pair of `video` (`len - 1` fields).
pub fn video_flows(video: &VideoSequence, backend: &FlowBackend) -> Result<Vec<FlowField>> {
    video
        .frames
        .windows(2)
        .enumerate()
        .map(|(k, pair)| compute_flow(&pair[0], &pair[1], backend, FramePair { video_id: &video.video_id, index: k }))
        .collect()
}

/// Cubes for every box of `video` that has enough history.
pub fn video_clips(video: &VideoSequence, flows: &[FlowField], boxes: &[RoiBox], t: usize) -> Result<Vec<StClip>> {
    let mut out = Vec::new();
    for b in boxes.iter().filter(|b| b.video_id == video.video_id) {
        if let Some(clip) = build_stc(video, flows, b, t)? {
            out.push(clip);
        }
    }
    Ok(out)
}

/// Cubes of one split plus the frame universe `(video_id, frame_count)` they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    pub t: usize,
    pub videos: Vec<(String, usize)>,
    pub clips: Vec<StClip>,
}

impl ClipSet {
    /// Every `(video_id, frame_index)` of the source videos, in order.
    pub fn frames_universe(&self) -> Vec<(String, usize)> {
        self.videos.iter().flat_map(|(id, n)| (0..*n).map(move |i| (id.clone(), i))).collect()
    }
}

const CACHE_MAGIC: &[u8; 8] = b"AMSRCSTC";
const CACHE_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!("{}: truncated clip cache", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: invalid utf-8 in clip cache", self.path.display())))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let data = self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::from_vec(shape, data)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_clips(path: &Path, set: &ClipSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.t as u32).to_le_bytes());
    buf.extend_from_slice(&(set.videos.len() as u32).to_le_bytes());
    for (id, n) in &set.videos {
        put_str(&mut buf, id);
        buf.extend_from_slice(&(*n as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(set.clips.len() as u32).to_le_bytes());
    for c in &set.clips {
        c.validate(set.t)?;
        put_str(&mut buf, &c.video_id);
        buf.extend_from_slice(&(c.frame_index as u32).to_le_bytes());
        put_str(&mut buf, &c.object_id);
        put_tensor(&mut buf, &c.input_frames);
        put_tensor(&mut buf, &c.target_frame);
        put_tensor(&mut buf, &c.input_flows);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_clips(path: &Path) -> Result<ClipSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != CACHE_MAGIC || r.u32()? != CACHE_VERSION {
        return Err(Error::Data(format!("{}: not a clip cache", path.display())));
    }
    let t = r.u32()? as usize;
    let n_videos = r.u32()? as usize;
    let mut videos = Vec::with_capacity(n_videos);
    for _ in 0..n_videos {
        let id = r.string()?;
        videos.push((id, r.u32()? as usize));
    }
    let n = r.u32()? as usize;
    let s = CLIP_SIZE;
    let mut clips = Vec::with_capacity(n);
    for _ in 0..n {
        let video_id = r.string()?;
        let frame_index = r.u32()? as usize;
        let object_id = r.string()?;
        clips.push(StClip {
            input_frames: r.tensor(&[t, s, s])?,
            target_frame: r.tensor(&[1, s, s])?,
            input_flows: r.tensor(&[t, 2, s, s])?,
            video_id,
            frame_index,
            object_id,
        });
    }
    Ok(ClipSet { t, videos, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { train_videos: 1, test_videos: 0, train_frames: 8, ..SynthConfig::default() };
        let data = generate_synthetic_dataset(0, &cfg);
        let video = &data.train[0];
        let flows = video_flows(video, &FlowBackend::Classical(BlockMatchParams::default())).unwrap();
        let boxes = extract_rois(video, &ForegroundParams::default()).unwrap();
        let clips = video_clips(video, &flows, &boxes, 4).unwrap();
        assert!(!clips.is_empty());
        let set = ClipSet { t: 4, videos: vec![(video.video_id.clone(), video.len())], clips };
        let path = dir.path().join("c.stc");
        save_clips(&path, &set).unwrap();
        assert_eq!(load_clips(&path).unwrap(), set);
        assert_eq!(set.frames_universe().len(), 8);
    }
}
