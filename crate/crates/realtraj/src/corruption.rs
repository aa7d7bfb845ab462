//! Synthetic perception errors: miss-detections (coordinates zeroed),
//! localization noise (Gaussian), and identity switches (id labels swapped
//! with a nearby pedestrian). Used both for training-time corruption and
//! for evaluation sweeps.

use crate::dataio::Frame;
use crate::rng::rng_from_seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Detection sets, per frame: the shape corruption operates on.
pub type DetectionSets = Vec<Vec<[f64; 2]>>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorruptionParams {
    pub p_mask: f64,
    pub p_noise: f64,
    pub sigma: f64,
    pub switch_ratio: f64,
    pub switch_radius: f64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams {
            p_mask: 0.0,
            p_noise: 0.0,
            sigma: 0.5,
            switch_ratio: 0.0,
            switch_radius: 5.0,
        }
    }
}

/// Corrupted detections plus the bookkeeping the pretext losses need.
/// `mask` and `noise` are congruent with the input sets; a masked detection
/// is (0,0) with zero recorded noise.
#[derive(Debug, Clone)]
pub struct CorruptionRecord {
    pub x_corrupt: DetectionSets,
    pub mask: Vec<Vec<bool>>,
    pub noise: Vec<Vec<[f64; 2]>>,
    pub params: CorruptionParams,
}

impl CorruptionRecord {
    fn identity(x: &DetectionSets, params: CorruptionParams) -> CorruptionRecord {
        CorruptionRecord {
            x_corrupt: x.clone(),
            mask: x.iter().map(|f| vec![false; f.len()]).collect(),
            noise: x.iter().map(|f| vec![[0.0, 0.0]; f.len()]).collect(),
            params,
        }
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    pub fn n_noised(&self) -> usize {
        self.noise
            .iter()
            .flatten()
            .filter(|n| n[0] != 0.0 || n[1] != 0.0)
            .count()
    }

    /// Translates unmasked corrupted detections by `-offset`; masked slots
    /// stay at the (0,0) sentinel. This is what makes masking and centering
    /// commute.
    pub fn recenter(&self, offset: [f64; 2]) -> CorruptionRecord {
        let mut out = self.clone();
        for (frame, masks) in out.x_corrupt.iter_mut().zip(&out.mask) {
            for (pos, &masked) in frame.iter_mut().zip(masks) {
                if !masked {
                    pos[0] -= offset[0];
                    pos[1] -= offset[1];
                }
            }
        }
        out
    }
}

/// Independently masks each detection with probability `ratio`, replacing
/// its coordinates with (0,0).
pub fn mask_detections(x: &DetectionSets, ratio: f64, rng: &mut ChaCha8Rng) -> CorruptionRecord {
    assert!((0.0..=1.0).contains(&ratio));
    let mut record = CorruptionRecord::identity(
        x,
        CorruptionParams {
            p_mask: ratio,
            ..CorruptionParams::default()
        },
    );
    for (frame_idx, frame) in x.iter().enumerate() {
        for slot in 0..frame.len() {
            if rng.gen::<f64>() < ratio {
                record.mask[frame_idx][slot] = true;
                record.x_corrupt[frame_idx][slot] = [0.0, 0.0];
            }
        }
    }
    record
}

/// Adds i.i.d. zero-mean Gaussian noise with std `sigma` per coordinate to
/// each detection selected with probability `ratio`. The drawn noise is
/// recorded, so `x_corrupt - x == noise` exactly.
pub fn add_localization_noise(
    x: &DetectionSets,
    ratio: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> CorruptionRecord {
    assert!(sigma >= 0.0);
    let mut record = CorruptionRecord::identity(
        x,
        CorruptionParams {
            p_noise: ratio,
            sigma,
            ..CorruptionParams::default()
        },
    );
    if sigma == 0.0 || ratio == 0.0 {
        return record;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    for (frame_idx, frame) in x.iter().enumerate() {
        for (slot, orig) in frame.iter().enumerate() {
            if rng.gen::<f64>() < ratio {
                let n = [normal.sample(rng), normal.sample(rng)];
                let moved = [orig[0] + n[0], orig[1] + n[1]];
                record.x_corrupt[frame_idx][slot] = moved;
                // Record the representable delta so x_corrupt - x == noise
                // holds bitwise.
                record.noise[frame_idx][slot] = [moved[0] - orig[0], moved[1] - orig[1]];
            }
        }
    }
    record
}

/// Tracking-error injection on id-carrying frames: per timestep, each
/// pedestrian is selected with probability `ratio`; if its nearest neighbor
/// lies within `radius`, the two id labels are exchanged from that timestep
/// onward. Positions never change, only labels.
pub fn switch_identities(
    frames: &[Frame],
    ratio: f64,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Frame> {
    use std::collections::BTreeMap;
    assert!(radius > 0.0);

    // `label` maps original id -> currently displayed label; always a
    // permutation with finite support.
    let mut label: BTreeMap<i64, i64> = BTreeMap::new();
    let displayed_of = |label: &BTreeMap<i64, i64>, orig: i64| *label.get(&orig).unwrap_or(&orig);
    let carrier_of = |label: &BTreeMap<i64, i64>, l: i64| {
        label
            .iter()
            .find(|&(_, &v)| v == l)
            .map(|(&k, _)| k)
            .unwrap_or(l)
    };

    let mut out: Vec<Frame> = frames.to_vec();
    for (_, entries) in out.iter_mut() {
        let displayed: Vec<(i64, [f64; 2])> = entries
            .iter()
            .map(|&(orig, pos)| (displayed_of(&label, orig), pos))
            .collect();
        // A pedestrian already swapped this timestep is consumed: its own
        // draw is skipped, otherwise two mutual draws would cancel out.
        let mut consumed = vec![false; displayed.len()];
        for (slot, &(lbl, pos)) in displayed.iter().enumerate() {
            if consumed[slot] || rng.gen::<f64>() >= ratio {
                continue;
            }
            // Swap with the nearest unconsumed neighbor within the radius.
            let nearest = displayed
                .iter()
                .enumerate()
                .filter(|&(other_slot, _)| other_slot != slot && !consumed[other_slot])
                .map(|(other_slot, &(other_lbl, opos))| {
                    let d = ((pos[0] - opos[0]).powi(2) + (pos[1] - opos[1]).powi(2)).sqrt();
                    (other_slot, other_lbl, d)
                })
                .filter(|&(_, _, d)| d <= radius)
                .min_by(|a, b| a.2.total_cmp(&b.2));
            if let Some((other_slot, other_lbl, _)) = nearest {
                let a = carrier_of(&label, lbl);
                let b = carrier_of(&label, other_lbl);
                label.insert(a, other_lbl);
                label.insert(b, lbl);
                consumed[slot] = true;
                consumed[other_slot] = true;
            }
        }
        for (ped, _) in entries.iter_mut() {
            *ped = displayed_of(&label, *ped);
        }
        entries.sort_by_key(|e| e.0);
    }
    out
}

/// Combined detection corruption: noise applied first, then masking, so a
/// masked detection is (0,0) with zero recorded noise (masking wins).
/// Identity switches act only on id-carrying representations and are
/// therefore not part of this record.
pub fn corrupt_combined(
    x: &DetectionSets,
    params: &CorruptionParams,
    rng: &mut ChaCha8Rng,
) -> CorruptionRecord {
    let noised = add_localization_noise(x, params.p_noise, params.sigma, rng);
    let masked = mask_detections(&noised.x_corrupt, params.p_mask, rng);
    merge_noise_then_mask(noised, masked, *params)
}

fn merge_noise_then_mask(
    noised: CorruptionRecord,
    masked: CorruptionRecord,
    params: CorruptionParams,
) -> CorruptionRecord {
    let mut record = CorruptionRecord {
        x_corrupt: masked.x_corrupt,
        mask: masked.mask,
        noise: noised.noise,
        params,
    };
    for (frame_idx, masks) in record.mask.iter().enumerate() {
        for (slot, &m) in masks.iter().enumerate() {
            if m {
                record.noise[frame_idx][slot] = [0.0, 0.0];
            }
        }
    }
    record
}

/// Training-time corruption: with probability `p_c` a detection is
/// corrupted, then a fair coin picks miss-detection (zeroed) or
/// localization noise. The detection at `protect` (frame, slot) is never
/// masked so the window keeps its origin anchor.
pub fn corrupt_for_pretraining(
    x: &DetectionSets,
    p_c: f64,
    sigma: f64,
    protect: Option<(usize, usize)>,
    seed: u64,
) -> CorruptionRecord {
    let mut rng = rng_from_seed(seed);
    let mut record = CorruptionRecord::identity(
        x,
        CorruptionParams {
            p_mask: p_c / 2.0,
            p_noise: p_c / 2.0,
            sigma,
            ..CorruptionParams::default()
        },
    );
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma > 0");
    for (frame_idx, frame) in x.iter().enumerate() {
        for slot in 0..frame.len() {
            if rng.gen::<f64>() >= p_c {
                continue;
            }
            let mask_it = rng.gen_bool(0.5) && protect != Some((frame_idx, slot));
            if mask_it {
                record.mask[frame_idx][slot] = true;
                record.x_corrupt[frame_idx][slot] = [0.0, 0.0];
            } else if sigma > 0.0 {
                let n = [normal.sample(&mut rng), normal.sample(&mut rng)];
                record.noise[frame_idx][slot] = n;
                record.x_corrupt[frame_idx][slot][0] += n[0];
                record.x_corrupt[frame_idx][slot][1] += n[1];
            }
        }
    }
    record
}

/// Linear interpolation of missing detections in an id-keyed sequence, for
/// comparison models that need gap-free trajectories. Gaps strictly inside
/// a pedestrian's observed span are filled; leading/trailing absences stay.
pub fn interpolate_missing(frames: &[Frame]) -> Vec<Frame> {
    use std::collections::BTreeMap;
    let mut by_ped: BTreeMap<i64, Vec<(usize, [f64; 2])>> = BTreeMap::new();
    for (idx, (_, entries)) in frames.iter().enumerate() {
        for &(ped, pos) in entries {
            by_ped.entry(ped).or_default().push((idx, pos));
        }
    }
    let mut out: Vec<Frame> = frames.to_vec();
    for (ped, obs) in by_ped {
        for pair in obs.windows(2) {
            let (i0, p0) = pair[0];
            let (i1, p1) = pair[1];
            if i1 > i0 + 1 {
                for idx in (i0 + 1)..i1 {
                    let a = (idx - i0) as f64 / (i1 - i0) as f64;
                    let pos = [p0[0] + a * (p1[0] - p0[0]), p0[1] + a * (p1[1] - p0[1])];
                    out[idx].1.push((ped, pos));
                }
            }
        }
    }
    for (_, entries) in out.iter_mut() {
        entries.sort_by_key(|e| e.0);
    }
    out
}
