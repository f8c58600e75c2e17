//! Dense optical flow: a coarse-to-fine block matcher and a reader for
//! precomputed flow files.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::video::{bilinear, Frame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel displacement `(dx, dy)` in pixels, stored interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 2] }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let mut f = Self::zeros(height, width);
        for px in f.data.chunks_exact_mut(2) {
            px[0] = dx;
            px[1] = dy;
        }
        f
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, d: (f32, f32)) {
        let i = (y * self.width + x) * 2;
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    /// Bilinear sample of `(dx, dy)` with border replication.
    pub fn sample(&self, y: f32, x: f32) -> (f32, f32) {
        (
            bilinear(&self.data, self.height, self.width, 2, 0, y, x),
            bilinear(&self.data, self.height, self.width, 2, 1, y, x),
        )
    }

    /// Planar `[2, H, W]` view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let hw = self.height * self.width;
        let mut planar = vec![0.0; 2 * hw];
        for (i, px) in self.data.chunks_exact(2).enumerate() {
            planar[i] = px[0];
            planar[hw + i] = px[1];
        }
        Tensor::from_vec(&[2, self.height, self.width], planar).expect("consistent dims")
    }

    pub fn max_magnitude(&self) -> f32 {
        self.data.chunks_exact(2).map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).fold(0.0, f32::max)
    }
}

/// Settings of the classical block-matching estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatchParams {
    /// Side of the square matching window (odd).
    pub window: usize,
    /// Integer search radius at every pyramid level.
    pub radius: i32,
    /// Maximum number of pyramid levels (1 = no pyramid).
    pub levels: usize,
    /// Add a half-pixel refinement pass at full resolution.
    pub half_pixel: bool,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self { window: 7, radius: 2, levels: 3, half_pixel: true }
    }
}

/// Source of optical flow between consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowBackend {
    /// Files at `<root>/<video_id>/%06d.flo`, file k holding flow from frame k to k+1.
    Precomputed {
        root: PathBuf,
    },
    Classical(BlockMatchParams),
}

impl FlowBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowBackend::Precomputed { .. } => "precomputed",
            FlowBackend::Classical(_) => "classical",
        }
    }
}

/// Identifies a consecutive frame pair `(index, index + 1)` of a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramePair<'a> {
    pub video_id: &'a str,
    pub index: usize,
}

/// Flow from `frame_a` to `frame_b`. The precomputed backend returns the stored field verbatim.
pub fn compute_flow(frame_a: &Frame, frame_b: &Frame, backend: &FlowBackend, pair: FramePair<'_>) -> Result<FlowField> {
    if (frame_a.height, frame_a.width) != (frame_b.height, frame_b.width) {
        return Err(Error::Shape {
            context: "compute_flow frames",
            expected: vec![frame_a.height, frame_a.width],
            got: vec![frame_b.height, frame_b.width],
        });
    }
    match backend {
        FlowBackend::Classical(params) => Ok(block_match(frame_a, frame_b, params)),
        FlowBackend::Precomputed { root } => {
            let path = flow_path(root, pair.video_id, pair.index);
            if !path.exists() {
                return Err(Error::MissingFlow {
                    video_id: pair.video_id.to_string(),
                    from: pair.index,
                    to: pair.index + 1,
                });
            }
            let flow = read_flow(&path)?;
            if (flow.height, flow.width) != (frame_a.height, frame_a.width) {
                return Err(Error::Shape {
                    context: "precomputed flow",
                    expected: vec![frame_a.height, frame_a.width],
                    got: vec![flow.height, flow.width],
                });
            }
            Ok(flow)
        }
    }
}

fn downsample(f: &Frame) -> Frame {
    let (h, w) = (f.height.div_ceil(2), f.width.div_ceil(2));
    let mut out = Frame::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                acc += f.get_clamped((2 * y + dy) as isize, (2 * x + dx) as isize);
            }
            out.set(y, x, acc * 0.25);
        }
    }
    out
}

/// Sum of squared differences between the window around `(y, x)` in `a` and the window
/// displaced by `(dx, dy)` in `b`. Integer displacements only.
fn ssd_int(a: &Frame, b: &Frame, y: usize, x: usize, dx: i32, dy: i32, half: isize) -> f32 {
    let (h, w) = (a.height as isize, a.width as isize);
    let (y, x, dx, dy) = (y as isize, x as isize, dx as isize, dy as isize);
    let inside = |cy: isize, cx: isize| cy - half >= 0 && cx - half >= 0 && cy + half < h && cx + half < w;
    let mut acc = 0.0;
    if inside(y, x) && inside(y + dy, x + dx) {
        let side = (2 * half + 1) as usize;
        for wy in -half..=half {
            let ra = ((y + wy) * w + x - half) as usize;
            let rb = ((y + wy + dy) * w + x + dx - half) as usize;
            for (p, q) in a.data[ra..ra + side].iter().zip(&b.data[rb..rb + side]) {
                let d = p - q;
                acc += d * d;
            }
        }
        return acc;
    }
    for wy in -half..=half {
        let ay = y + wy;
        for wx in -half..=half {
            let ax = x + wx;
            let d = a.get_clamped(ay, ax) - b.get_clamped(ay + dy, ax + dx);
            acc += d * d;
        }
    }
    acc
}

/// `b` resampled on a half-pixel lattice: entry `(2i + r, 2j + c)` is the bilinear sample
/// at `(i + r/2, j + c/2)`.
fn half_pixel_lattice(b: &Frame) -> Frame {
    let (h2, w2) = (2 * b.height - 1, 2 * b.width - 1);
    let mut out = Frame::filled(h2, w2, 0.0);
    for y in 0..h2 {
        for x in 0..w2 {
            out.set(y, x, b.sample(y as f32 * 0.5, x as f32 * 0.5));
        }
    }
    out
}

/// Like [`ssd_int`] with the displacement `(dx2 / 2, dy2 / 2)` given in half pixels,
/// reading `b` through its half-pixel lattice.
fn ssd_half(a: &Frame, lattice: &Frame, y: usize, x: usize, dx2: i32, dy2: i32, half: isize) -> f32 {
    let mut acc = 0.0;
    for wy in -half..=half {
        let ay = y as isize + wy;
        let ly = 2 * ay.clamp(0, a.height as isize - 1) + dy2 as isize;
        for wx in -half..=half {
            let ax = x as isize + wx;
            let lx = 2 * ax.clamp(0, a.width as isize - 1) + dx2 as isize;
            let d = a.get_clamped(ay, ax) - lattice.get_clamped(ly, lx);
            acc += d * d;
        }
    }
    acc
}

// Small bias toward short displacements so texture-less regions resolve to zero motion.
const MOTION_PENALTY: f32 = 1e-4;

/// Coarse-to-fine integer block matching with optional half-pixel refinement.
pub fn block_match(a: &Frame, b: &Frame, params: &BlockMatchParams) -> FlowField {
    let half = (params.window / 2) as isize;
    let mut pyr = vec![(a.clone(), b.clone())];
    while pyr.len() < params.levels.max(1) {
        let (pa, pb) = pyr.last().expect("non-empty");
        if pa.height < 2 * params.window || pa.width < 2 * params.window {
            break;
        }
        let next = (downsample(pa), downsample(pb));
        pyr.push(next);
    }

    let mut flow: Option<FlowField> = None;
    for (fa, fb) in pyr.iter().rev() {
        let (h, w) = (fa.height, fa.width);
        let mut level = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = match &flow {
                    Some(prev) => {
                        let (px, py) = prev.get((y / 2).min(prev.height - 1), (x / 2).min(prev.width - 1));
                        ((px * 2.0).round() as i32, (py * 2.0).round() as i32)
                    }
                    None => (0, 0),
                };
                let mut best = (f32::INFINITY, cx, cy);
                for dy in cy - params.radius..=cy + params.radius {
                    for dx in cx - params.radius..=cx + params.radius {
                        let cost = ssd_int(fa, fb, y, x, dx, dy, half) + MOTION_PENALTY * (dx * dx + dy * dy) as f32;
                        if cost < best.0 {
                            best = (cost, dx, dy);
                        }
                    }
                }
                level.set(y, x, (best.1 as f32, best.2 as f32));
            }
        }
        flow = Some(level);
    }
    let mut flow = flow.expect("at least one level");

    if params.half_pixel {
        let lattice = half_pixel_lattice(b);
        let mut refined = flow.clone();
        for y in 0..a.height {
            for x in 0..a.width {
                let (dx, dy) = flow.get(y, x);
                let (bx, by) = ((2.0 * dx) as i32, (2.0 * dy) as i32);
                let cost = |ox: i32, oy: i32| {
                    let (ddx, ddy) = (bx + ox, by + oy);
                    ssd_half(a, &lattice, y, x, ddx, ddy, half) + MOTION_PENALTY * 0.25 * (ddx * ddx + ddy * ddy) as f32
                };
                let mut best = (cost(0, 0), 0, 0);
                for (ox, oy) in [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)] {
                    let c = cost(ox, oy);
                    if c < best.0 {
                        best = (c, ox, oy);
                    }
                }
                refined.set(y, x, ((bx + best.1) as f32 * 0.5, (by + best.2) as f32 * 0.5));
            }
        }
        flow = refined;
    }
    flow
}

pub fn flow_path(root: &Path, video_id: &str, index: usize) -> PathBuf {
    root.join(video_id).join(format!("{index:06}.flo"))
}

/// Raw little-endian flow file: `u32 height, u32 width`, then `(dx, dy)` f32 pairs row-major.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(8 + flow.data.len() * 4);
    bytes.extend_from_slice(&(flow.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(flow.width as u32).to_le_bytes());
    for v in &flow.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{}: truncated flow header", path.display())));
    }
    let height = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + height * width * 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {height}x{width} flow, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(FlowField { height, width, data })
}
