use super::flow::FlowField;
use super::roi::RoiBox;
use super::video::{Frame, VideoSequence};
use super::CLIP_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Object-centric spatio-temporal cube: `t` input crops, the target crop, and the
/// `t` flow crops leading up to the target. All crops are `CLIP_SIZE` square.
#[derive(Debug, Clone, PartialEq)]
pub struct StClip {
    /// `[t, 32, 32]`
    pub input_frames: Tensor<f32>,
    /// `[1, 32, 32]`
    pub target_frame: Tensor<f32>,
    /// `[t, 2, 32, 32]`; entry k is the flow from input k to input k+1, the last one
    /// from the final input to the target. Units: pixels at clip scale.
    pub input_flows: Tensor<f32>,
    pub video_id: String,
    /// Index of the target frame in the source video.
    pub frame_index: usize,
    pub object_id: String,
}

impl StClip {
    pub fn t(&self) -> usize {
        self.input_frames.shape()[0]
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        let s = CLIP_SIZE;
        self.input_frames.expect_shape("clip input_frames", &[t, s, s])?;
        self.target_frame.expect_shape("clip target_frame", &[1, s, s])?;
        self.input_flows.expect_shape("clip input_flows", &[t, 2, s, s])
    }
}

/// Square crop window `(x0, y0, side)` for a box: expanded to `max(w, h)` around the box
/// centre, then shifted (and if needed shrunk) to lie inside the frame.
pub fn square_window(b: &RoiBox, height: usize, width: usize) -> (i64, i64, i64) {
    let side = (b.w.max(b.h) as i64).min(height as i64).min(width as i64).max(1);
    let cx2 = 2 * b.x + b.w as i64;
    let cy2 = 2 * b.y + b.h as i64;
    let x0 = ((cx2 - side) / 2).clamp(0, width as i64 - side);
    let y0 = ((cy2 - side) / 2).clamp(0, height as i64 - side);
    (x0, y0, side)
}

/// Source coordinate of output pixel `o` when resampling `side` pixels to `CLIP_SIZE`.
#[inline]
fn src_coord(origin: i64, side: i64, o: usize) -> f32 {
    origin as f32 + (o as f32 + 0.5) * side as f32 / CLIP_SIZE as f32 - 0.5
}

/// Bilinear crop-and-resize of a frame region to `CLIP_SIZE x CLIP_SIZE`.
pub fn crop_frame(frame: &Frame, x0: i64, y0: i64, side: i64) -> Vec<f32> {
    let s = CLIP_SIZE;
    let mut out = Vec::with_capacity(s * s);
    for oy in 0..s {
        let sy = src_coord(y0, side, oy);
        for ox in 0..s {
            out.push(frame.sample(sy, src_coord(x0, side, ox)));
        }
    }
    out
}

/// Bilinear crop-and-resize of a flow region; displacements are rescaled by the
/// resize factor. Returns planar `[2, 32, 32]`.
pub fn crop_flow(flow: &FlowField, x0: i64, y0: i64, side: i64) -> Vec<f32> {
    let s = CLIP_SIZE;
    let scale = s as f32 / side as f32;
    let mut out = vec![0.0; 2 * s * s];
    for oy in 0..s {
        let sy = src_coord(y0, side, oy);
        for ox in 0..s {
            let (dx, dy) = flow.sample(sy, src_coord(x0, side, ox));
            out[oy * s + ox] = dx * scale;
            out[s * s + oy * s + ox] = dy * scale;
        }
    }
    out
}

/// Builds the cube ending at `roi.frame_index`. `flows[k]` is the flow from frame k to
/// k+1. Returns `Ok(None)` when the box lacks `t` frames of history.
pub fn build_stc(video: &VideoSequence, flows: &[FlowField], roi: &RoiBox, t: usize) -> Result<Option<StClip>> {
    let fi = roi.frame_index;
    if fi < t {
        return Ok(None);
    }
    if fi >= video.len() {
        return Err(Error::Data(format!("box frame {fi} beyond video {} of {} frames", video.video_id, video.len())));
    }
    if flows.len() < fi {
        return Err(Error::MissingFlow { video_id: video.video_id.clone(), from: flows.len(), to: flows.len() + 1 });
    }
    let (h, w) = video.dims().ok_or(Error::EmptyInput)?;
    let (x0, y0, side) = square_window(roi, h, w);
    let s = CLIP_SIZE;

    let mut frames = Vec::with_capacity(t * s * s);
    for k in fi - t..fi {
        frames.extend(crop_frame(&video.frames[k], x0, y0, side));
    }
    let target = crop_frame(&video.frames[fi], x0, y0, side);
    let mut flow_data = Vec::with_capacity(t * 2 * s * s);
    for flow in &flows[fi - t..fi] {
        if (flow.height, flow.width) != (h, w) {
            return Err(Error::Shape { context: "flow map", expected: vec![h, w], got: vec![flow.height, flow.width] });
        }
        flow_data.extend(crop_flow(flow, x0, y0, side));
    }
    Ok(Some(StClip {
        input_frames: Tensor::from_vec(&[t, s, s], frames)?,
        target_frame: Tensor::from_vec(&[1, s, s], target)?,
        input_flows: Tensor::from_vec(&[t, 2, s, s], flow_data)?,
        video_id: video.video_id.clone(),
        frame_index: fi,
        object_id: roi.object_id.clone(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(frame_index: usize, x: i64, y: i64, w: u32, h: u32) -> RoiBox {
        RoiBox { video_id: "v".into(), frame_index, x, y, w, h, object_id: "o0".into() }
    }

    fn indexed_video(n: usize) -> VideoSequence {
        let frames = (0..n).map(|i| Frame::filled(40, 40, i as f32 / 10.0)).collect();
        VideoSequence::new("v", frames).unwrap()
    }

    #[test]
    fn window_covers_the_documented_frames() {
        let v = indexed_video(6);
        let flows = vec![FlowField::zeros(40, 40); 5];
        let clip = build_stc(&v, &flows, &roi(4, 5, 5, 10, 10), 4).unwrap().unwrap();
        for k in 0..4 {
            assert!((clip.input_frames[k * 1024] - k as f32 / 10.0).abs() < 1e-6);
        }
        assert!((clip.target_frame[0] - 0.4).abs() < 1e-6);
        assert_eq!(clip.frame_index, 4);
        clip.validate(4).unwrap();
    }

    #[test]
    fn insufficient_history_is_skipped() {
        let v = indexed_video(6);
        let flows = vec![FlowField::zeros(40, 40); 5];
        assert!(build_stc(&v, &flows, &roi(3, 0, 0, 8, 8), 4).unwrap().is_none());
    }

    #[test]
    fn flow_displacement_scales_with_resize() {
        let frames = vec![Frame::filled(64, 64, 0.5); 5];
        let v = VideoSequence::new("v", frames).unwrap();
        let flows = vec![FlowField::uniform(64, 64, 4.0, 0.0); 4];
        let clip = build_stc(&v, &flows, &roi(4, 0, 0, 64, 64), 4).unwrap().unwrap();
        let s2 = CLIP_SIZE * CLIP_SIZE;
        for k in 0..4 {
            let dx = &clip.input_flows.data()[k * 2 * s2..k * 2 * s2 + s2];
            let dy = &clip.input_flows.data()[k * 2 * s2 + s2..(k + 1) * 2 * s2];
            assert!(dx.iter().all(|&v| (v - 2.0).abs() < 1e-6));
            assert!(dy.iter().all(|&v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn boxes_are_squared_and_clamped() {
        assert_eq!(square_window(&roi(0, 10, 10, 4, 8), 64, 64), (8, 10, 8));
        assert_eq!(square_window(&roi(0, -5, 60, 10, 10), 64, 64), (0, 54, 10));
        assert_eq!(square_window(&roi(0, 0, 0, 100, 20), 64, 80), (16, 0, 64));
    }
}
