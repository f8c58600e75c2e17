//! Per-object anomaly scores, normalization statistics, weighted fusion and
//! frame-level aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::BnMode;
use crate::model::{forward_batch, Ablation, BatchInput, ModelParameters};
use crate::objectives::{cosine_distance, mean_squared_error};
use crate::stc::StClip;

/// Floor applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-12;

/// Inconsistency (`s_f`) and prediction error (`s_p`) of one object cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub video_id: String,
    pub frame_index: usize,
    pub object_id: String,
    pub s_f: f64,
    pub s_p: f64,
}

/// Means and (population) standard deviations of normal training scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub u_f: f64,
    pub delta_f: f64,
    pub u_p: f64,
    pub delta_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_f: f64,
    pub w_p: f64,
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_f >= 0.0 && self.w_p >= 0.0) || (self.w_f == 0.0 && self.w_p == 0.0) {
            return Err(Error::Config(format!(
                "score weights must be >= 0 and not both zero, got ({}, {})",
                self.w_f, self.w_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video_id: String,
    pub frame_index: usize,
    pub s: f64,
    pub n_objects: usize,
    pub s_f_max: f64,
    pub s_p_max: f64,
}

/// Scores one clip in evaluation mode.
pub fn object_scores(clip: &StClip, params: &ModelParameters<f32>, ablation: Ablation) -> Result<ObjectScore> {
    Ok(score_clips(std::slice::from_ref(clip), params, ablation, 1)?.remove(0))
}

/// Scores many clips, `batch` at a time. Results do not depend on `batch`.
pub fn score_clips(
    clips: &[StClip],
    params: &ModelParameters<f32>,
    ablation: Ablation,
    batch: usize,
) -> Result<Vec<ObjectScore>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch.max(1)) {
        let refs: Vec<&StClip> = chunk.iter().collect();
        let input = BatchInput::<f32>::from_clips(&refs)?;
        let fwd = forward_batch(params, &input, ablation, BnMode::Eval)?;
        for (i, clip) in chunk.iter().enumerate() {
            let s_p = mean_squared_error(&fwd.pred.sample(i), &input.target.sample(i));
            let s_f = match &fwd.fea_flow {
                Some(flow) => cosine_distance(&fwd.fea_frame.sample(i), &flow.sample(i)),
                None => 0.0,
            };
            out.push(ObjectScore {
                video_id: clip.video_id.clone(),
                frame_index: clip.frame_index,
                object_id: clip.object_id.clone(),
                s_f: s_f as f64,
                s_p: s_p as f64,
            });
        }
    }
    Ok(out)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

pub fn fit_norm_stats(train_scores: &[ObjectScore]) -> Result<NormStats> {
    if train_scores.len() < 2 {
        return Err(Error::Data(format!("normalization needs at least 2 training scores, got {}", train_scores.len())));
    }
    let (u_f, delta_f) = mean_std(train_scores.iter().map(|s| s.s_f));
    let (u_p, delta_p) = mean_std(train_scores.iter().map(|s| s.s_p));
    Ok(NormStats { u_f, delta_f, u_p, delta_p })
}

/// `w_f (s_f - u_f) / delta_f + w_p (s_p - u_p) / delta_p`
pub fn fuse_scores(obj: &ObjectScore, stats: &NormStats, weights: &ScoreWeights) -> f64 {
    weights.w_f * (obj.s_f - stats.u_f) / stats.delta_f + weights.w_p * (obj.s_p - stats.u_p) / stats.delta_p
}

/// Max-over-objects frame scores for exactly the frames in `universe`. Frames without
/// objects get the smallest fused score seen in their video.
pub fn frame_scores(
    object_scores: &[ObjectScore],
    stats: &NormStats,
    weights: &ScoreWeights,
    universe: &[(String, usize)],
) -> Result<Vec<FrameScore>> {
    if universe.is_empty() {
        return Err(Error::EmptyInput);
    }
    // (s, n, s_f_max, s_p_max) per frame
    let mut per_frame: BTreeMap<(&str, usize), (f64, usize, f64, f64)> = BTreeMap::new();
    let mut video_min: BTreeMap<&str, f64> = BTreeMap::new();
    for o in object_scores {
        let s = fuse_scores(o, stats, weights);
        let e = per_frame.entry((o.video_id.as_str(), o.frame_index)).or_insert((
            f64::NEG_INFINITY,
            0,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ));
        e.0 = e.0.max(s);
        e.1 += 1;
        e.2 = e.2.max(o.s_f);
        e.3 = e.3.max(o.s_p);
        let m = video_min.entry(o.video_id.as_str()).or_insert(f64::INFINITY);
        *m = m.min(s);
    }
    let global_min = video_min.values().copied().fold(f64::INFINITY, f64::min);
    let fallback_global = if global_min.is_finite() { global_min } else { 0.0 };
    Ok(universe
        .iter()
        .map(|(vid, fi)| match per_frame.get(&(vid.as_str(), *fi)) {
            Some(&(s, n, sf, sp)) => {
                FrameScore { video_id: vid.clone(), frame_index: *fi, s, n_objects: n, s_f_max: sf, s_p_max: sp }
            }
            None => FrameScore {
                video_id: vid.clone(),
                frame_index: *fi,
                s: video_min.get(vid.as_str()).copied().unwrap_or(fallback_global),
                n_objects: 0,
                s_f_max: 0.0,
                s_p_max: 0.0,
            },
        })
        .collect())
}

pub fn save_stats(path: &Path, stats: &NormStats, config_hash: &str) -> Result<()> {
    let text = format!(
        "u_f={}\ndelta_f={}\nu_p={}\ndelta_p={}\nconfig_hash={}\n",
        stats.u_f, stats.delta_f, stats.u_p, stats.delta_p, config_hash
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a stats file; returns the statistics and the recorded config hash.
pub fn load_stats(path: &Path) -> Result<(NormStats, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |k: &str| -> Result<f64> {
        kv.get(k)
            .ok_or_else(|| Error::Data(format!("{}: missing {k}", path.display())))?
            .parse()
            .map_err(|_| Error::Data(format!("{}: {k} is not a number", path.display())))
    };
    Ok((
        NormStats { u_f: num("u_f")?, delta_f: num("delta_f")?, u_p: num("u_p")?, delta_p: num("delta_p")? },
        kv.get("config_hash").cloned().unwrap_or_default(),
    ))
}

pub const SCORE_HEADER: &str = "video_id,frame_index,score,n_objects,s_f_max,s_p_max";

pub fn format_frame_scores(scores: &[FrameScore]) -> String {
    let mut s = String::from(SCORE_HEADER);
    s.push('\n');
    for f in scores {
        let _ = writeln!(s, "{},{},{},{},{},{}", f.video_id, f.frame_index, f.s, f.n_objects, f.s_f_max, f.s_p_max);
    }
    s
}

pub fn parse_frame_scores(text: &str, source: &str) -> Result<Vec<FrameScore>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == SCORE_HEADER || line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { path: source.to_string(), line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err("expected 6 comma-separated fields"));
        }
        out.push(FrameScore {
            video_id: f[0].to_string(),
            frame_index: f[1].parse().map_err(|_| err("bad frame_index"))?,
            s: f[2].parse().map_err(|_| err("bad score"))?,
            n_objects: f[3].parse().map_err(|_| err("bad n_objects"))?,
            s_f_max: f[4].parse().map_err(|_| err("bad s_f_max"))?,
            s_p_max: f[5].parse().map_err(|_| err("bad s_p_max"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(video: &str, frame: usize, s_f: f64, s_p: f64) -> ObjectScore {
        ObjectScore { video_id: video.into(), frame_index: frame, object_id: "o".into(), s_f, s_p }
    }

    #[test]
    fn population_std_of_two_points() {
        let st = fit_norm_stats(&[obj("v", 0, 0.5, 0.0), obj("v", 1, 0.5, 2.0)]).unwrap();
        assert_eq!((st.u_p, st.delta_p), (1.0, 1.0));
        assert_eq!(st.delta_f, STD_FLOOR);
    }

    #[test]
    fn three_point_stats() {
        let scores = [obj("v", 0, 0.1, 1.0), obj("v", 1, 0.2, 1.0), obj("v", 2, 0.3, 1.0)];
        let st = fit_norm_stats(&scores).unwrap();
        assert!((st.u_f - 0.2).abs() < 1e-12);
        assert!((st.delta_f - (1.0f64 / 150.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn too_few_scores() {
        assert!(fit_norm_stats(&[obj("v", 0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn fusion_examples() {
        let st = NormStats { u_f: 0.3, delta_f: 0.1, u_p: 0.02, delta_p: 0.005 };
        let w = ScoreWeights { w_f: 1.0, w_p: 0.01 };
        assert!(fuse_scores(&obj("v", 0, 0.3, 0.02), &st, &w).abs() < 1e-12);
        let only_f = ScoreWeights { w_f: 1.0, w_p: 0.0 };
        assert!((fuse_scores(&obj("v", 0, 0.4, 0.0), &st, &only_f) - 1.0).abs() < 1e-12);
        let s = fuse_scores(&obj("v", 0, 0.3 + 2.0 * 0.1, 0.02 + 5.0 * 0.005), &st, &w);
        assert!((s - 2.05).abs() < 1e-12);
    }

    #[test]
    fn frame_max_and_objectless_fallback() {
        let st = NormStats { u_f: 0.0, delta_f: 1.0, u_p: 0.0, delta_p: 1.0 };
        let w = ScoreWeights { w_f: 1.0, w_p: 0.0 };
        let objs = [obj("v", 1, -0.2, 0.0), obj("v", 1, 1.7, 0.0), obj("v", 1, 0.3, 0.0), obj("v", 2, -0.5, 0.0)];
        let universe: Vec<_> = (0..4).map(|i| ("v".to_string(), i)).collect();
        let fs = frame_scores(&objs, &st, &w, &universe).unwrap();
        assert_eq!(fs.len(), 4);
        assert_eq!(fs[1].s, 1.7);
        assert_eq!(fs[1].n_objects, 3);
        assert_eq!(fs[2].s, -0.5);
        assert_eq!(fs[0].s, -0.5);
        assert_eq!(fs[3].n_objects, 0);
        assert!(frame_scores(&objs, &st, &w, &[]).is_err());
    }

    #[test]
    fn stats_and_scores_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let st = NormStats { u_f: 0.1234567890123, delta_f: 1e-12, u_p: 3.0, delta_p: 0.25 };
        let p = dir.path().join("stats.txt");
        save_stats(&p, &st, "abc").unwrap();
        assert_eq!(load_stats(&p).unwrap(), (st, "abc".to_string()));

        let fs = vec![FrameScore {
            video_id: "v".into(),
            frame_index: 3,
            s: -0.1 / 3.0,
            n_objects: 2,
            s_f_max: 0.2,
            s_p_max: 0.01,
        }];
        assert_eq!(parse_frame_scores(&format_frame_scores(&fs), "mem").unwrap(), fs);
    }
}
