//! Frame-level AUROC and anomaly-curve export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scoring::FrameScore;

/// Parallel score and 0/1 label lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Mann-Whitney AUROC with half credit for ties, computed from mid-ranks.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    if data.scores.len() != data.labels.len() {
        return Err(Error::Shape {
            context: "auroc inputs",
            expected: vec![data.scores.len()],
            got: vec![data.labels.len()],
        });
    }
    let n_pos = data.labels.iter().filter(|&&l| l != 0).count();
    let n_neg = data.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined);
    }
    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));
    // twice the rank sum of positives, kept integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && data.scores[order[j + 1]] == data.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let positives = order[i..=j].iter().filter(|&&k| data.labels[k] != 0).count() as u64;
        rank_sum2 += positives * (i + j + 2) as u64;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    // U = R - P(P+1)/2, AUC = U / (P N)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Per-video 0/1 labels in `video_id l0 l1 ...` line format.
pub fn parse_labels(text: &str, source: &str) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(id) = it.next() else { continue };
        let labels = it
            .map(|tok| match tok {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(id.to_string(), labels);
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, &path.display().to_string())
}

pub fn format_labels<'a>(labels: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut s = String::new();
    for (id, l) in labels {
        s.push_str(id);
        for v in l {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

/// Aligns frame scores with labels (by video id and frame index) into one global list.
pub fn align(scores: &[FrameScore], labels: &BTreeMap<String, Vec<u8>>) -> Result<LabeledScores> {
    let mut out = LabeledScores::default();
    for f in scores {
        let l = labels.get(&f.video_id).ok_or_else(|| Error::Data(format!("no labels for video {}", f.video_id)))?;
        let v = l.get(f.frame_index).ok_or_else(|| {
            Error::Data(format!("video {}: frame {} beyond {} labels", f.video_id, f.frame_index, l.len()))
        })?;
        out.scores.push(f.s);
        out.labels.push(*v);
    }
    Ok(out)
}

pub const CURVE_HEADER: &str = "frame_index,score,label";

/// Writes `<out>/<video_id>.csv` with `frame_index,score,label` rows for every video.
pub fn export_curves(frame_scores: &[FrameScore], labels: &BTreeMap<String, Vec<u8>>, out: &Path) -> Result<()> {
    let mut per_video: BTreeMap<&str, Vec<&FrameScore>> = BTreeMap::new();
    for f in frame_scores {
        per_video.entry(&f.video_id).or_default().push(f);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (vid, rows) in per_video {
        let l = labels.get(vid).ok_or_else(|| Error::Data(format!("no labels for video {vid}")))?;
        if l.len() != rows.len() {
            return Err(Error::Data(format!("video {vid}: {} scores but {} labels", rows.len(), l.len())));
        }
        let mut text = String::from(CURVE_HEADER);
        text.push('\n');
        for f in rows {
            let label = l
                .get(f.frame_index)
                .ok_or_else(|| Error::Data(format!("video {vid}: frame {} has no label", f.frame_index)))?;
            let _ = writeln!(text, "{},{},{}", f.frame_index, f.s, label);
        }
        let path = out.join(format!("{vid}.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a curve file back as `(frame_index, score, label)` rows.
pub fn read_curve(path: &Path) -> Result<Vec<(usize, f64, u8)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = || Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected frame_index,score,label".into(),
        };
        let mut f = line.split(',');
        let (Some(a), Some(b), Some(c), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(err());
        };
        rows.push((a.parse().map_err(|_| err())?, b.parse().map_err(|_| err())?, c.parse().map_err(|_| err())?));
    }
    Ok(rows)
}
