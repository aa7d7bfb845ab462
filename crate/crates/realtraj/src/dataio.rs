//! Trajectory data model, TSV interchange, sliding windows, target
//! centering and identity stripping.
//!
//! File format: one detection per line, `frame_id ped_id x y` separated by
//! single spaces, coordinates printed with up to six fractional digits
//! (trailing zeros trimmed), `\n` line endings. Files written by
//! [`TrajectorySequence::save_tsv`] round-trip byte-identically.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// `(frame_id, [(ped_id, position)])`, entries sorted by ped id.
pub type Frame = (i64, Vec<(i64, [f64; 2])>);

/// Identity-annotated positions per frame: ground truth and simulator output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySequence {
    frames: Vec<Frame>,
    /// Tag used to derive window seeds and id-embedding keys.
    pub id: u64,
}

impl TrajectorySequence {
    /// Builds a sequence from frames in any order; sorts by
    /// `(frame_id, ped_id)` and validates uniqueness and finiteness.
    pub fn from_frames(frames: Vec<Frame>) -> Result<TrajectorySequence> {
        let mut by_frame: BTreeMap<i64, Vec<(i64, [f64; 2])>> = BTreeMap::new();
        for (frame_id, entries) in frames {
            by_frame.entry(frame_id).or_default().extend(entries);
        }
        let mut out = Vec::with_capacity(by_frame.len());
        for (frame_id, mut entries) in by_frame {
            entries.sort_by_key(|e| e.0);
            for pair in entries.windows(2) {
                if pair[0].0 == pair[1].0 {
                    return Err(Error::Invalid(format!(
                        "duplicate (frame {frame_id}, ped {}) entry",
                        pair[0].0
                    )));
                }
            }
            for (ped, pos) in &entries {
                if !(pos[0].is_finite() && pos[1].is_finite()) {
                    return Err(Error::Invalid(format!(
                        "non-finite position for ped {ped} at frame {frame_id}"
                    )));
                }
            }
            out.push((frame_id, entries));
        }
        Ok(TrajectorySequence { frames: out, id: 0 })
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Position of `ped_id` at frame index `idx`, if present.
    pub fn position_at(&self, idx: usize, ped_id: i64) -> Option<[f64; 2]> {
        let entries = &self.frames[idx].1;
        entries
            .binary_search_by_key(&ped_id, |e| e.0)
            .ok()
            .map(|i| entries[i].1)
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<TrajectorySequence> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut frames: Vec<Frame> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected 4 fields `frame_id ped_id x y`, got {}", fields.len()),
                });
            }
            let parse_err = |what: &str| Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad {what}: {line:?}"),
            };
            let frame_id: i64 = fields[0].parse().map_err(|_| parse_err("frame_id"))?;
            let ped_id: i64 = fields[1].parse().map_err(|_| parse_err("ped_id"))?;
            let x: f64 = fields[2].parse().map_err(|_| parse_err("x"))?;
            let y: f64 = fields[3].parse().map_err(|_| parse_err("y"))?;
            frames.push((frame_id, vec![(ped_id, [x, y])]));
        }
        if frames.is_empty() {
            return Err(Error::EmptySequence {
                path: path.to_path_buf(),
            });
        }
        let id = derive_seed(0, &path.file_stem().unwrap_or_default().to_string_lossy());
        Ok(TrajectorySequence::from_frames(frames)?.with_id(id))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (frame_id, entries) in &self.frames {
            for (ped_id, pos) in entries {
                let _ = writeln!(
                    out,
                    "{frame_id} {ped_id} {} {}",
                    fmt_coord(pos[0]),
                    fmt_coord(pos[1])
                );
            }
        }
        out
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Canonical coordinate formatting: up to six fractional digits,
/// trailing zeros trimmed.
pub fn fmt_coord(v: f64) -> String {
    let v = v + 0.0; // normalize -0.0
    let mut s = format!("{v:.6}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

/// Whether full ground-truth futures are required when building windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    /// Target must be present at the last observed frame and every future frame.
    Full,
    /// Target must be present at the last observed frame only.
    Weak,
}

/// One model input: identity-free detection sets over `t_obs` frames plus
/// target metadata and future targets.
#[derive(Debug, Clone)]
pub struct DetectionWindow {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Observed detections per frame (index 0 is time 1), ids retained as a
    /// side channel for pretext supervision only.
    pub past: Vec<Vec<(i64, [f64; 2])>>,
    pub target_id: i64,
    /// The target's detection at the last observed frame.
    pub target_last_position: [f64; 2],
    /// Ground-truth future of the target; `None` for weak-only windows.
    pub target_future: Option<Vec<[f64; 2]>>,
    /// Identity-free future detection sets, one per predicted step.
    pub future_detections: Vec<Vec<[f64; 2]>>,
    /// World offset already subtracted from all coordinates.
    pub offset: [f64; 2],
    /// Per-window seed for shuffling and corruption.
    pub seed: u64,
    pub sequence_id: u64,
}

/// One window per (start frame, target pedestrian). The observed part
/// contains all pedestrians present in those frames, targets included.
pub fn make_windows(
    seq: &TrajectorySequence,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
    mode: Supervision,
) -> Vec<DetectionWindow> {
    assert!(t_obs >= 1 && t_pred >= 1 && stride >= 1);
    let n = seq.n_frames();
    let span = t_obs + t_pred;
    if n < span {
        return Vec::new();
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + span <= n {
        let last_obs = start + t_obs - 1;
        let candidates: Vec<i64> = seq.frames[last_obs].1.iter().map(|e| e.0).collect();
        for target_id in candidates {
            let future: Vec<Option<[f64; 2]>> = (0..t_pred)
                .map(|k| seq.position_at(last_obs + 1 + k, target_id))
                .collect();
            let fully_observed = future.iter().all(|p| p.is_some());
            if mode == Supervision::Full && !fully_observed {
                continue;
            }
            let past: Vec<Vec<(i64, [f64; 2])>> = (start..=last_obs)
                .map(|idx| seq.frames[idx].1.clone())
                .collect();
            let future_detections: Vec<Vec<[f64; 2]>> = (0..t_pred)
                .map(|k| {
                    seq.frames[last_obs + 1 + k]
                        .1
                        .iter()
                        .map(|e| e.1)
                        .collect()
                })
                .collect();
            let target_last_position = seq
                .position_at(last_obs, target_id)
                .expect("target present at last observed frame");
            let target_future = if fully_observed {
                Some(future.into_iter().map(|p| p.unwrap()).collect())
            } else {
                None
            };
            windows.push(DetectionWindow {
                t_obs,
                t_pred,
                past,
                target_id,
                target_last_position,
                target_future,
                future_detections,
                offset: [0.0, 0.0],
                seed: derive_seed_indexed(
                    seq.id,
                    "window",
                    ((start as u64) << 32) ^ (target_id as u64),
                ),
                sequence_id: seq.id,
            });
        }
        start += stride;
    }
    windows
}

/// Translates every coordinate so the target's last observed detection
/// lands at the origin. The applied offset accumulates in `offset`.
pub fn center_on_target(window: &DetectionWindow) -> DetectionWindow {
    let [cx, cy] = window.target_last_position;
    let shift = |p: [f64; 2]| [p[0] - cx, p[1] - cy];
    let mut out = window.clone();
    for frame in &mut out.past {
        for (_, pos) in frame.iter_mut() {
            *pos = shift(*pos);
        }
    }
    for frame in &mut out.future_detections {
        for pos in frame.iter_mut() {
            *pos = shift(*pos);
        }
    }
    if let Some(future) = &mut out.target_future {
        for pos in future.iter_mut() {
            *pos = shift(*pos);
        }
    }
    out.target_last_position = [0.0, 0.0];
    out.offset = [window.offset[0] + cx, window.offset[1] + cy];
    out
}

/// Identity-free view of a window: the tokens the model actually sees.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// One entry per detection: (1-based time index, position), frames in
    /// temporal order, order within a frame shuffled.
    pub tokens: Vec<(usize, [f64; 2])>,
    /// Id labels aligned with `tokens`; pretext supervision only, never
    /// visible to the model path.
    pub ids: Vec<i64>,
    /// Index into `tokens` of the target's last-frame detection.
    pub target_token: usize,
    pub t_obs: usize,
}

impl ModelInput {
    /// Detection positions grouped per frame, preserving token order.
    pub fn positions_by_frame(&self) -> Vec<Vec<[f64; 2]>> {
        let mut frames = vec![Vec::new(); self.t_obs];
        for &(t, pos) in &self.tokens {
            frames[t - 1].push(pos);
        }
        frames
    }

    /// Replaces token positions from congruent per-frame sets.
    pub fn with_positions(&self, frames: &[Vec<[f64; 2]>]) -> ModelInput {
        let mut out = self.clone();
        let mut cursor = vec![0usize; self.t_obs];
        for (t, pos) in out.tokens.iter_mut() {
            *pos = frames[*t - 1][cursor[*t - 1]];
            cursor[*t - 1] += 1;
        }
        out
    }
}

/// Strips identities: flattens the window into (time index, position)
/// tokens, randomizing within-frame order with the window's seed. The id
/// labels ride along in a side channel, aligned index-for-index.
pub fn strip_ids(window: &DetectionWindow) -> ModelInput {
    let mut rng = rng_from_seed(derive_seed(window.seed, "shuffle"));
    let mut tokens = Vec::new();
    let mut ids = Vec::new();
    let mut target_token = 0;
    for (frame_idx, frame) in window.past.iter().enumerate() {
        let mut order: Vec<usize> = (0..frame.len()).collect();
        order.shuffle(&mut rng);
        for slot in order {
            let (ped_id, pos) = frame[slot];
            if frame_idx == window.t_obs - 1 && ped_id == window.target_id {
                target_token = tokens.len();
            }
            tokens.push((frame_idx + 1, pos));
            ids.push(ped_id);
        }
    }
    ModelInput {
        tokens,
        ids,
        target_token,
        t_obs: window.t_obs,
    }
}

/// Train/val/test file lists plus the labeled fraction used during
/// fine-tuning.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub few_shot_frac: f64,
}

impl DatasetSplit {
    /// Lists `*.tsv` under `dir` in sorted order and splits deterministically:
    /// the last `val_count + test_count` files become val and test.
    pub fn from_dir(
        dir: impl AsRef<Path>,
        val_count: usize,
        test_count: usize,
        few_shot_frac: f64,
    ) -> Result<DatasetSplit> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
            .collect();
        files.sort();
        if files.len() < val_count + test_count + 1 {
            return Err(Error::Invalid(format!(
                "need more than {} sequences in {}, found {}",
                val_count + test_count,
                dir.display(),
                files.len()
            )));
        }
        let train_end = files.len() - val_count - test_count;
        let val_end = train_end + val_count;
        Ok(DatasetSplit {
            train: files[..train_end].to_vec(),
            val: files[train_end..val_end].to_vec(),
            test: files[val_end..].to_vec(),
            few_shot_frac: few_shot_frac.clamp(0.0, 1.0),
        })
    }
}

/// Seeded uniform sampling of `frac` of the items (window granularity),
/// keeping at least one and preserving the original relative order.
pub fn few_shot_sample<T>(items: Vec<T>, frac: f64, seed: u64) -> Vec<T> {
    if frac >= 1.0 || items.is_empty() {
        return items;
    }
    let keep = ((items.len() as f64 * frac).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, "few-shot")));
    let mut selected: Vec<usize> = order.into_iter().take(keep).collect();
    selected.sort_unstable();
    let mut keep_flags = vec![false; items.len()];
    for i in selected {
        keep_flags[i] = true;
    }
    items
        .into_iter()
        .zip(keep_flags)
        .filter_map(|(item, keep)| keep.then_some(item))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight_line_seq(n_frames: usize, n_peds: usize) -> TrajectorySequence {
        let frames = (0..n_frames)
            .map(|f| {
                (
                    f as i64,
                    (0..n_peds)
                        .map(|p| (p as i64, [f as f64 * 0.4 + p as f64, p as f64 * 2.0]))
                        .collect(),
                )
            })
            .collect();
        TrajectorySequence::from_frames(frames).unwrap().with_id(99)
    }

    #[test]
    fn parses_two_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.tsv");
        std::fs::write(&path, "0 1 0.0 0.0\n1 1 0.4 0.0\n").unwrap();
        let seq = TrajectorySequence::load_tsv(&path).unwrap();
        assert_eq!(seq.n_frames(), 2);
        assert_eq!(seq.frames()[1].1, vec![(1, [0.4, 0.0])]);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        std::fs::write(&path, "").unwrap();
        let err = TrajectorySequence::load_tsv(&path).unwrap_err();
        assert!(matches!(err, Error::EmptySequence { .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "0 1 0.0 0.0\n1 1 oops 0.0\n").unwrap();
        let err = TrajectorySequence::load_tsv(&path).unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unsorted_input_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.tsv");
        std::fs::write(&path, "1 2 1 1\n0 1 0 0\n1 1 0.5 0\n").unwrap();
        let seq = TrajectorySequence::load_tsv(&path).unwrap();
        assert_eq!(seq.frames()[0].0, 0);
        assert_eq!(seq.frames()[1].1[0].0, 1);
        assert_eq!(seq.frames()[1].1[1].0, 2);
    }

    #[test]
    fn exact_length_sequence_yields_one_window() {
        let seq = straight_line_seq(21, 1);
        let windows = make_windows(&seq, 9, 12, 1, Supervision::Full);
        assert_eq!(windows.len(), 1);
    }

    #[test]
    fn window_count_by_enumeration() {
        let seq = straight_line_seq(25, 1);
        let windows = make_windows(&seq, 9, 12, 1, Supervision::Full);
        assert_eq!(windows.len(), 5);
    }

    #[test]
    fn short_sequence_yields_empty_list() {
        let seq = straight_line_seq(20, 2);
        assert!(make_windows(&seq, 9, 12, 1, Supervision::Full).is_empty());
    }

    #[test]
    fn absent_target_gets_no_window() {
        // Ped 7 exists only in the first frames, never at a last-observed slot.
        let mut frames: Vec<Frame> = (0..21)
            .map(|f| (f as i64, vec![(1, [f as f64, 0.0])]))
            .collect();
        frames[0].1.push((7, [5.0, 5.0]));
        let seq = TrajectorySequence::from_frames(frames).unwrap();
        let windows = make_windows(&seq, 9, 12, 1, Supervision::Full);
        assert_eq!(windows.len(), 1);
        assert!(windows.iter().all(|w| w.target_id != 7));
    }

    #[test]
    fn weak_mode_keeps_targets_with_missing_futures() {
        // Ped 2 visible through the observed frames, gone afterwards.
        let frames: Vec<Frame> = (0..21)
            .map(|f| {
                let mut entries = vec![(1, [f as f64, 0.0])];
                if f < 9 {
                    entries.push((2, [0.0, f as f64]));
                }
                (f as i64, entries)
            })
            .collect();
        let seq = TrajectorySequence::from_frames(frames).unwrap();
        let full = make_windows(&seq, 9, 12, 1, Supervision::Full);
        assert_eq!(full.len(), 1);
        let weak = make_windows(&seq, 9, 12, 1, Supervision::Weak);
        assert_eq!(weak.len(), 2);
        let w2 = weak.iter().find(|w| w.target_id == 2).unwrap();
        assert!(w2.target_future.is_none());
        assert_eq!(w2.future_detections.len(), 12);
    }

    #[test]
    fn centering_moves_target_to_origin() {
        let seq = straight_line_seq(21, 2);
        let w = &make_windows(&seq, 9, 12, 1, Supervision::Full)[0];
        let c = center_on_target(w);
        assert_eq!(c.target_last_position, [0.0, 0.0]);
        let moved = strip_ids(&c);
        let tpos = moved.tokens[moved.target_token].1;
        assert_eq!(tpos, [0.0, 0.0]);
        assert_eq!(c.offset, w.target_last_position);
        // Centering an already-centered window is the identity.
        let cc = center_on_target(&c);
        assert_eq!(cc.past, c.past);
    }

    #[test]
    fn strip_ids_hides_ids_and_keeps_positions() {
        let seq = straight_line_seq(21, 3);
        let w = &make_windows(&seq, 9, 12, 1, Supervision::Full)[0];
        let a = strip_ids(w);
        let mut b_window = w.clone();
        b_window.seed ^= 0xdead_beef;
        let b = strip_ids(&b_window);
        let key = |m: &ModelInput| {
            let mut v: Vec<(usize, u64, u64)> = m
                .tokens
                .iter()
                .map(|&(t, p)| (t, p[0].to_bits(), p[1].to_bits()))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(key(&a), key(&b), "same multiset of (t, position)");
        assert_eq!(a.tokens.len(), 9 * 3);
        assert_eq!(a.ids.len(), a.tokens.len());
        assert_eq!(a.tokens[a.target_token].0, 9);
    }

    #[test]
    fn few_shot_sampling_is_deterministic_and_sized() {
        let items: Vec<usize> = (0..100).collect();
        let a = few_shot_sample(items.clone(), 0.25, 7);
        let b = few_shot_sample(items.clone(), 0.25, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
        let tiny = few_shot_sample(items, 0.001, 7);
        assert_eq!(tiny.len(), 1);
    }

    proptest! {
        /// Window count equals brute-force enumeration over (start, target).
        #[test]
        fn window_count_matches_bruteforce(
            n_frames in 1usize..40,
            t_obs in 1usize..6,
            t_pred in 1usize..6,
            stride in 1usize..4,
            presence in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 3), 40)
        ) {
            let frames: Vec<Frame> = (0..n_frames).map(|f| {
                let entries: Vec<(i64, [f64;2])> = (0..3)
                    .filter(|&p| presence[f][p] || p == 0)
                    .map(|p| (p as i64, [f as f64, p as f64]))
                    .collect();
                (f as i64, entries)
            }).collect();
            let seq = TrajectorySequence::from_frames(frames).unwrap();
            let got = make_windows(&seq, t_obs, t_pred, stride, Supervision::Full).len();

            let mut expected = 0;
            if n_frames >= t_obs + t_pred {
                let mut start = 0;
                while start + t_obs + t_pred <= n_frames {
                    let last = start + t_obs - 1;
                    for ped in 0..3i64 {
                        let present = |idx: usize| seq.position_at(idx, ped).is_some();
                        if present(last) && (1..=t_pred).all(|k| present(last + k)) {
                            expected += 1;
                        }
                    }
                    start += stride;
                }
            }
            prop_assert_eq!(got, expected);
        }

        /// Centering preserves all pairwise distances to 1e-12.
        #[test]
        fn centering_is_an_isometry(
            coords in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4..30)
        ) {
            let n = coords.len();
            let frames: Vec<Frame> = (0..4).map(|f| {
                let entries: Vec<(i64, [f64;2])> = coords.iter().enumerate()
                    .map(|(p, &(x, y))| (p as i64, [x + f as f64 * 0.1, y]))
                    .collect();
                (f as i64, entries)
            }).collect();
            let seq = TrajectorySequence::from_frames(frames).unwrap();
            let windows = make_windows(&seq, 2, 2, 1, Supervision::Full);
            let w = &windows[0];
            let c = center_on_target(w);
            let all = |w: &DetectionWindow| -> Vec<[f64;2]> {
                let mut v: Vec<[f64;2]> = w.past.iter().flatten().map(|e| e.1).collect();
                v.extend(w.future_detections.iter().flatten().cloned());
                v
            };
            let (a, b) = (all(w), all(&c));
            prop_assert_eq!(a.len(), n * 2 + n * 2);
            for i in 0..a.len() {
                for j in (i+1)..a.len() {
                    let da = ((a[i][0]-a[j][0]).powi(2) + (a[i][1]-a[j][1]).powi(2)).sqrt();
                    let db = ((b[i][0]-b[j][0]).powi(2) + (b[i][1]-b[j][1]).powi(2)).sqrt();
                    prop_assert!((da - db).abs() <= 1e-12);
                }
            }
        }

        /// Canonical files survive a load/save round trip byte-for-byte.
        #[test]
        fn tsv_round_trip_is_stable(
            vals in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)
        ) {
            let frames: Vec<Frame> = vals.iter().enumerate()
                .map(|(i, &(x, y))| (i as i64, vec![(0i64, [x, y])]))
                .collect();
            let seq = TrajectorySequence::from_frames(frames).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("round.tsv");
            seq.save_tsv(&path).unwrap();
            let bytes1 = std::fs::read(&path).unwrap();
            let loaded = TrajectorySequence::load_tsv(&path).unwrap();
            loaded.save_tsv(&path).unwrap();
            let bytes2 = std::fs::read(&path).unwrap();
            prop_assert_eq!(bytes1, bytes2);
        }
    }
}
