//! Procedural surveillance-like benchmark: textured sprites drifting over a static
//! background, with appearance and motion anomalies injected into test videos.

use std::f32::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::video::{Frame, VideoSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Normal sprites per video.
    pub normal_sprites: usize,
    pub sprite_size: usize,
    /// Fraction of each test video's frames that show an anomaly.
    pub anomaly_rate: f64,
    /// Earliest frame at which an anomaly may appear.
    pub min_anomaly_start: usize,
    /// Inclusive range of the per-axis speed bound (pixels/frame) of normal sprites.
    pub normal_speed: (i32, i32),
    /// Inclusive speed range of motion anomalies.
    pub anomaly_speed: (i32, i32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            train_videos: 8,
            test_videos: 6,
            train_frames: 60,
            test_frames: 100,
            normal_sprites: 2,
            sprite_size: 10,
            anomaly_rate: 0.3,
            min_anomaly_start: 8,
            normal_speed: (1, 2),
            anomaly_speed: (5, 6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpriteKind {
    Normal,
    /// Unseen shape moving at normal speed.
    AppearanceAnomaly,
    /// Familiar shape moving too fast.
    MotionAnomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Square,
    Disk,
    Cross,
}

impl Shape {
    fn covers(self, lx: usize, ly: usize, size: usize) -> bool {
        match self {
            Shape::Square => true,
            Shape::Disk => {
                let c = size as f32 / 2.0;
                let (dx, dy) = (lx as f32 + 0.5 - c, ly as f32 + 0.5 - c);
                dx * dx + dy * dy <= c * c
            }
            Shape::Cross => {
                let (x, y, s) = (lx as i64, ly as i64, size as i64);
                (x - y).abs() <= 1 || (x + y - (s - 1)).abs() <= 1
            }
        }
    }
}

/// Where one sprite was drawn in each frame (`None` when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteTrack {
    pub kind: SpriteKind,
    /// `(x, y, size)` of the sprite's bounding square per frame.
    pub boxes: Vec<Option<(i64, i64, usize)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<VideoSequence>,
    pub test: Vec<VideoSequence>,
    /// Per test video, one 0/1 label per frame.
    pub labels: Vec<Vec<u8>>,
    /// Generator ground truth per test video.
    pub tracks: Vec<Vec<SpriteTrack>>,
}

impl SyntheticDataset {
    /// SHA-256 over every frame, label and video id.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.train.iter().chain(&self.test) {
            h.update(v.video_id.as_bytes());
            for f in &v.frames {
                h.update((f.height as u64).to_le_bytes());
                h.update((f.width as u64).to_le_bytes());
                for p in &f.data {
                    h.update(p.to_le_bytes());
                }
            }
        }
        for l in &self.labels {
            h.update(l);
        }
        hex::encode(h.finalize())
    }
}

struct Sprite {
    shape: Shape,
    kind: SpriteKind,
    size: usize,
    base: f32,
    x: i64,
    y: i64,
    vx: i64,
    vy: i64,
    start: usize,
    end: usize,
}

impl Sprite {
    fn step(&mut self, h: usize, w: usize) {
        let bounce = |p: &mut i64, v: &mut i64, max: i64| {
            *p += *v;
            if *p < 0 {
                *p = -*p;
                *v = -*v;
            } else if *p > max {
                *p = 2 * max - *p;
                *v = -*v;
            }
        };
        bounce(&mut self.x, &mut self.vx, (w - self.size) as i64);
        bounce(&mut self.y, &mut self.vy, (h - self.size) as i64);
    }

    fn draw(&self, frame: &mut Frame) {
        for ly in 0..self.size {
            for lx in 0..self.size {
                if !self.shape.covers(lx, ly, self.size) {
                    continue;
                }
                let stripe = ((lx + ly) / 2) % 2;
                let v = self.base * if stripe == 0 { 1.0 } else { 0.75 };
                frame.set(self.y as usize + ly, self.x as usize + lx, v);
            }
        }
    }
}

fn velocity(rng: &mut ChaCha8Rng, speed: (i32, i32)) -> (i64, i64) {
    let s = rng.gen_range(speed.0..=speed.1) as i64;
    loop {
        let (dx, dy) = (rng.gen_range(-1i64..=1), rng.gen_range(-1i64..=1));
        if dx != 0 || dy != 0 {
            // one axis runs at the full speed, the other at any speed up to it
            let other = rng.gen_range(0..=s);
            return if dx != 0 && (dy == 0 || rng.gen_bool(0.5)) { (dx * s, dy * other) } else { (dx * other, dy * s) };
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    let (p1, p2) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            quantize(0.1 + 0.06 * (0.35 * x + p1).sin() * (0.27 * y + p2).cos())
        })
        .collect();
    Frame::new(h, w, data).expect("consistent dims")
}

fn normal_sprite(rng: &mut ChaCha8Rng, cfg: &SynthConfig, frames: usize) -> Sprite {
    let size = cfg.sprite_size;
    let (vx, vy) = velocity(rng, cfg.normal_speed);
    Sprite {
        shape: if rng.gen_bool(0.5) { Shape::Square } else { Shape::Disk },
        kind: SpriteKind::Normal,
        size,
        base: rng.gen_range(0.75..1.0),
        x: rng.gen_range(0..=(cfg.width - size) as i64),
        y: rng.gen_range(0..=(cfg.height - size) as i64),
        vx,
        vy,
        start: 0,
        end: frames,
    }
}

fn render(
    id: String,
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    frames: usize,
    mut sprites: Vec<Sprite>,
) -> (VideoSequence, Vec<SpriteTrack>) {
    let bg = background(rng, cfg.height, cfg.width);
    let mut tracks: Vec<SpriteTrack> =
        sprites.iter().map(|s| SpriteTrack { kind: s.kind, boxes: vec![None; frames] }).collect();
    let mut out = Vec::with_capacity(frames);
    for fi in 0..frames {
        let mut frame = bg.clone();
        for (s, track) in sprites.iter_mut().zip(&mut tracks) {
            if fi >= s.start && fi < s.end {
                s.draw(&mut frame);
                track.boxes[fi] = Some((s.x, s.y, s.size));
                s.step(cfg.height, cfg.width);
            }
        }
        for v in &mut frame.data {
            *v = quantize(*v);
        }
        out.push(frame);
    }
    (VideoSequence::new(id, out).expect("generator emits valid frames"), tracks)
}

/// Deterministic in `seed`. Test video `i` carries an appearance anomaly when `i` is
/// even and a motion anomaly when odd.
pub fn generate_synthetic_dataset(seed: u64, cfg: &SynthConfig) -> SyntheticDataset {
    assert!(cfg.sprite_size + 2 < cfg.height.min(cfg.width), "sprite must fit the frame");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(cfg.train_videos);
    for i in 0..cfg.train_videos {
        let sprites = (0..cfg.normal_sprites).map(|_| normal_sprite(&mut rng, cfg, cfg.train_frames)).collect();
        train.push(render(format!("train_{i:03}"), &mut rng, cfg, cfg.train_frames, sprites).0);
    }

    let mut test = Vec::with_capacity(cfg.test_videos);
    let mut labels = Vec::with_capacity(cfg.test_videos);
    let mut all_tracks = Vec::with_capacity(cfg.test_videos);
    let frames = cfg.test_frames;
    for i in 0..cfg.test_videos {
        let mut sprites: Vec<Sprite> = (0..cfg.normal_sprites).map(|_| normal_sprite(&mut rng, cfg, frames)).collect();
        let n_anom = ((cfg.anomaly_rate * frames as f64).round() as usize).min(frames);
        if n_anom > 0 {
            let latest = frames - n_anom;
            let start =
                if latest > cfg.min_anomaly_start { rng.gen_range(cfg.min_anomaly_start..=latest) } else { latest };
            let mut s = normal_sprite(&mut rng, cfg, frames);
            s.start = start;
            s.end = start + n_anom;
            if i % 2 == 0 {
                s.kind = SpriteKind::AppearanceAnomaly;
                s.shape = Shape::Cross;
            } else {
                s.kind = SpriteKind::MotionAnomaly;
                let (vx, vy) = velocity(&mut rng, cfg.anomaly_speed);
                s.vx = vx;
                s.vy = vy;
            }
            sprites.push(s);
        }
        let (video, tracks) = render(format!("test_{i:03}"), &mut rng, cfg, frames, sprites);
        let label = (0..frames)
            .map(|fi| tracks.iter().any(|t| t.kind != SpriteKind::Normal && t.boxes[fi].is_some()) as u8)
            .collect();
        test.push(video);
        labels.push(label);
        all_tracks.push(tracks);
    }
    SyntheticDataset { train, test, labels, tracks: all_tracks }
}
