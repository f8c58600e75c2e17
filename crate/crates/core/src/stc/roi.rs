use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use super::video::{Frame, VideoSequence};
use crate::error::{Error, Result};

/// Axis-aligned foreground box in frame pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiBox {
    pub video_id: String,
    pub frame_index: usize,
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
    pub object_id: String,
}

impl RoiBox {
    pub fn right(&self) -> i64 {
        self.x + self.w as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h as i64
    }

    pub fn intersects(&self, x: i64, y: i64, w: i64, h: i64) -> bool {
        self.x < x + w && x < self.right() && self.y < y + h && y < self.bottom()
    }
}

/// Background-subtraction settings for [`extract_rois`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundParams {
    /// Minimum absolute difference from the median background.
    pub threshold: f32,
    /// Components smaller than this many pixels are dropped.
    pub min_area: usize,
    /// Boxes closer than this many pixels are merged.
    pub merge_gap: u32,
    /// Margin added around each final box (clamped to the frame).
    pub pad: u32,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        Self { threshold: 0.15, min_area: 4, merge_gap: 1, pad: 2 }
    }
}

/// Per-pixel temporal median.
pub fn median_background(video: &VideoSequence) -> Result<Frame> {
    let (h, w) = video.dims().ok_or(Error::EmptyInput)?;
    let mut column = Vec::with_capacity(video.len());
    let mut bg = Frame::filled(h, w, 0.0);
    for i in 0..h * w {
        column.clear();
        column.extend(video.frames.iter().map(|f| f.data[i]));
        column.sort_by(f32::total_cmp);
        let n = column.len();
        bg.data[i] = if n % 2 == 1 { column[n / 2] } else { 0.5 * (column[n / 2 - 1] + column[n / 2]) };
    }
    Ok(bg)
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn near(&self, o: &Rect, gap: i64) -> bool {
        self.x0 - gap < o.x1 && o.x0 - gap < self.x1 && self.y0 - gap < o.y1 && o.y0 - gap < self.y1
    }

    fn union(&self, o: &Rect) -> Rect {
        Rect { x0: self.x0.min(o.x0), y0: self.y0.min(o.y0), x1: self.x1.max(o.x1), y1: self.y1.max(o.y1) }
    }
}

/// Bounding rectangles of 8-connected components of `mask`.
fn components(mask: &[bool], h: usize, w: usize, min_area: usize) -> Vec<Rect> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut area = 0;
        let mut r = Rect { x0: i64::MAX, y0: i64::MAX, x1: i64::MIN, y1: i64::MIN };
        while let Some(p) = queue.pop_front() {
            area += 1;
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            r.x0 = r.x0.min(x);
            r.y0 = r.y0.min(y);
            r.x1 = r.x1.max(x + 1);
            r.y1 = r.y1.max(y + 1);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if area >= min_area {
            out.push(r);
        }
    }
    out
}

fn merge(mut rects: Vec<Rect>, gap: i64) -> Vec<Rect> {
    loop {
        let mut merged = false;
        'outer: for i in 0..rects.len() {
            for j in i + 1..rects.len() {
                if rects[i].near(&rects[j], gap) {
                    let u = rects[i].union(&rects[j]);
                    rects[i] = u;
                    rects.swap_remove(j);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    rects.sort_by_key(|r| (r.y0, r.x0));
    rects
}

/// Foreground boxes from median-background subtraction, thresholding, connected
/// components and proximity merging. Deterministic.
pub fn extract_rois(video: &VideoSequence, params: &ForegroundParams) -> Result<Vec<RoiBox>> {
    let bg = median_background(video)?;
    let (h, w) = (bg.height, bg.width);
    let mut boxes = Vec::new();
    for (fi, frame) in video.frames.iter().enumerate() {
        let mask: Vec<bool> =
            frame.data.iter().zip(&bg.data).map(|(&a, &b)| (a - b).abs() > params.threshold).collect();
        let rects = merge(components(&mask, h, w, params.min_area), params.merge_gap as i64);
        for (k, r) in rects.iter().enumerate() {
            let pad = params.pad as i64;
            let x0 = (r.x0 - pad).max(0);
            let y0 = (r.y0 - pad).max(0);
            let x1 = (r.x1 + pad).min(w as i64);
            let y1 = (r.y1 + pad).min(h as i64);
            boxes.push(RoiBox {
                video_id: video.video_id.clone(),
                frame_index: fi,
                x: x0,
                y: y0,
                w: (x1 - x0) as u32,
                h: (y1 - y0) as u32,
                object_id: format!("o{k}"),
            });
        }
    }
    Ok(boxes)
}

/// Parses `video_id frame_index x y w h object_id` lines.
pub fn parse_rois(text: &str, source: &str) -> Result<Vec<RoiBox>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: source.to_string(), line: lineno + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let int = |i: usize, name: &str| -> Result<i64> {
            fields[i].parse::<i64>().map_err(|_| err(format!("{name} is not an integer: {:?}", fields[i])))
        };
        let frame_index = int(1, "frame_index")?;
        let (x, y, w, h) = (int(2, "x")?, int(3, "y")?, int(4, "w")?, int(5, "h")?);
        if frame_index < 0 {
            return Err(err("frame_index must be >= 0".into()));
        }
        if w < 1 || h < 1 || w > u32::MAX as i64 || h > u32::MAX as i64 {
            return Err(err(format!("box size must be >= 1, got {w}x{h}")));
        }
        out.push(RoiBox {
            video_id: fields[0].to_string(),
            frame_index: frame_index as usize,
            x,
            y,
            w: w as u32,
            h: h as u32,
            object_id: fields[6].to_string(),
        });
    }
    Ok(out)
}

pub fn load_rois(path: &Path) -> Result<Vec<RoiBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rois(&text, &path.display().to_string())
}

pub fn format_rois(boxes: &[RoiBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{} {} {} {} {} {} {}", b.video_id, b.frame_index, b.x, b.y, b.w, b.h, b.object_id);
    }
    s
}

pub fn save_rois(path: &Path, boxes: &[RoiBox]) -> Result<()> {
    std::fs::write(path, format_rois(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_line() {
        let boxes = parse_rois("vid1 7 12 20 16 16 obj3\n", "mem").unwrap();
        assert_eq!(
            boxes,
            vec![RoiBox {
                video_id: "vid1".into(),
                frame_index: 7,
                x: 12,
                y: 20,
                w: 16,
                h: 16,
                object_id: "obj3".into(),
            }]
        );
    }

    #[test]
    fn empty_file_gives_no_boxes() {
        assert!(parse_rois("", "mem").unwrap().is_empty());
    }

    #[test]
    fn zero_width_reports_line_number() {
        let err = parse_rois("v 0 0 0 4 4 a\nv 1 0 0 0 4 b\n", "rois.txt").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_field_is_an_error() {
        assert!(parse_rois("v x 0 0 4 4 a", "mem").is_err());
        assert!(parse_rois("v 0 0 0 4 4", "mem").is_err());
    }

    #[test]
    fn format_round_trips() {
        let text = "a 3 -2 5 7 9 o0\nb 0 0 0 1 1 x\n";
        let boxes = parse_rois(text, "mem").unwrap();
        assert_eq!(format_rois(&boxes), text);
    }

    #[test]
    fn empty_video_is_an_error() {
        let v = VideoSequence::new("v", vec![]).unwrap();
        assert!(matches!(extract_rois(&v, &ForegroundParams::default()), Err(Error::EmptyInput)));
    }

    #[test]
    fn static_black_video_has_no_rois() {
        let v = VideoSequence::new("v", vec![Frame::filled(16, 16, 0.0); 5]).unwrap();
        assert!(extract_rois(&v, &ForegroundParams::default()).unwrap().is_empty());
    }
}
