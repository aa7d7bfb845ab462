//! Forecast metrics, the constant-velocity oracle baseline, and
//! robustness sweeps over injected perception errors.
//!
//! Report CSV columns:
//! `error_type,ratio,ADE,FDE,minADE20,minFDE20,n_windows,seed`
//! (the min-metric columns hold the minimum over however many heads the
//! model has; with one head they equal ADE/FDE).

use crate::corruption::{self, CorruptionParams};
use crate::dataio::{center_on_target, strip_ids, DetectionWindow};
use crate::error::{Error, Result};
use crate::model::Det2TrajFormer;
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::vec2::Vec2;
use std::fmt::Write as _;

/// Average displacement error: mean Euclidean distance over timesteps.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "ade length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (Vec2::from(*p) - Vec2::from(*t)).norm())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Final displacement error: Euclidean distance at the last timestep.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Invalid("fde on empty or mismatched inputs".into()));
    }
    let (p, t) = (pred[pred.len() - 1], truth[truth.len() - 1]);
    Ok((Vec2::from(p) - Vec2::from(t)).norm())
}

/// Minimum ADE and FDE over the prediction heads, each minimized
/// independently.
pub fn min_metrics(preds: &[Vec<[f64; 2]>], truth: &[[f64; 2]]) -> Result<(f64, f64)> {
    assert!(!preds.is_empty());
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for p in preds {
        best_ade = best_ade.min(ade(p, truth)?);
        best_fde = best_fde.min(fde(p, truth)?);
    }
    Ok((best_ade, best_fde))
}

/// Oracle baseline: extrapolates the target's last observed velocity. Uses
/// ground-truth identity, so it degrades under identity switches, unlike a
/// detection-input model. Fewer than two observations fall back to a
/// zero-velocity hold.
pub fn constant_velocity_baseline(target_past: &[[f64; 2]], t_pred: usize) -> Vec<[f64; 2]> {
    let last = *target_past.last().expect("needs at least one position");
    let vel = if target_past.len() >= 2 {
        let prev = target_past[target_past.len() - 2];
        [last[0] - prev[0], last[1] - prev[1]]
    } else {
        [0.0, 0.0]
    };
    (1..=t_pred)
        .map(|k| [last[0] + vel[0] * k as f64, last[1] + vel[1] * k as f64])
        .collect()
}

/// The target's past positions keyed by ground-truth id, oldest first.
pub fn target_past_of(window: &DetectionWindow) -> Vec<[f64; 2]> {
    window
        .past
        .iter()
        .filter_map(|frame| {
            frame
                .iter()
                .find(|(id, _)| *id == window.target_id)
                .map(|e| e.1)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorType {
    Miss,
    Localization,
    IdSwitch,
    Combined,
}

impl ErrorType {
    pub fn parse(s: &str) -> Result<ErrorType> {
        match s {
            "miss" => Ok(ErrorType::Miss),
            "loc" => Ok(ErrorType::Localization),
            "idswitch" => Ok(ErrorType::IdSwitch),
            "combined" => Ok(ErrorType::Combined),
            other => Err(Error::Invalid(format!(
                "unknown error type {other:?}; expected miss|loc|idswitch|combined"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ErrorType::Miss => "miss",
            ErrorType::Localization => "loc",
            ErrorType::IdSwitch => "idswitch",
            ErrorType::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub error_type: &'static str,
    pub ratio: f64,
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub n_windows: usize,
    pub seed: u64,
}

/// Mean metrics of the model over fully-observed windows, with inputs
/// corrupted at `ratio` by `error_type`. Ratio 0 reproduces the clean
/// evaluation exactly. Identity switches relabel the id side channel
/// before stripping; the model path never sees ids, so its curve is flat
/// by construction.
pub fn evaluate_windows(
    model: &Det2TrajFormer,
    windows: &[DetectionWindow],
    error_type: ErrorType,
    ratio: f64,
    sigma: f64,
    switch_radius: f64,
    seed: u64,
) -> Result<SweepPoint> {
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    let mut sum_min_ade = 0.0;
    let mut sum_min_fde = 0.0;
    let mut n = 0usize;
    for (idx, window) in windows.iter().enumerate() {
        let Some(truth) = window.target_future.clone() else {
            continue;
        };
        let centered = center_on_target(window);
        let truth: Vec<[f64; 2]> = {
            // Shift truth into the centered frame.
            let [cx, cy] = window.target_last_position;
            truth.iter().map(|p| [p[0] - cx, p[1] - cy]).collect()
        };
        let mut centered = centered;
        let window_seed = derive_seed_indexed(seed, "sweep-window", idx as u64);
        let wants_switches = matches!(error_type, ErrorType::IdSwitch | ErrorType::Combined);
        if wants_switches && ratio > 0.0 {
            // Apply tracking errors on the id-carrying frames, before the
            // ids are stripped.
            let frames: Vec<(i64, Vec<(i64, [f64; 2])>)> = centered
                .past
                .iter()
                .enumerate()
                .map(|(i, f)| (i as i64, f.clone()))
                .collect();
            let switched = corruption::switch_identities(
                &frames,
                ratio,
                switch_radius,
                &mut rng_from_seed(derive_seed(window_seed, "idswitch")),
            );
            centered.past = switched.into_iter().map(|(_, f)| f).collect();
        }
        let input = strip_ids(&centered);
        let corrupted_input = match error_type {
            ErrorType::IdSwitch => input.clone(),
            _ if ratio == 0.0 => input.clone(),
            _ => {
                let nested = input.positions_by_frame();
                let mut rng = rng_from_seed(derive_seed(window_seed, "detect-err"));
                let record = match error_type {
                    ErrorType::Miss => corruption::mask_detections(&nested, ratio, &mut rng),
                    ErrorType::Localization => {
                        corruption::add_localization_noise(&nested, ratio, sigma, &mut rng)
                    }
                    ErrorType::Combined => corruption::corrupt_combined(
                        &nested,
                        &CorruptionParams {
                            p_mask: ratio,
                            p_noise: ratio,
                            sigma,
                            ..CorruptionParams::default()
                        },
                        &mut rng,
                    ),
                    ErrorType::IdSwitch => unreachable!(),
                };
                input.with_positions(&record.x_corrupt)
            }
        };
        let preds = model.predict_values(&corrupted_input.tokens)?;
        sum_ade += ade(&preds[0], &truth)?;
        sum_fde += fde(&preds[0], &truth)?;
        let (ma, mf) = min_metrics(&preds, &truth)?;
        sum_min_ade += ma;
        sum_min_fde += mf;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("no fully-observed windows to evaluate".into()));
    }
    let k = n as f64;
    Ok(SweepPoint {
        error_type: error_type.name(),
        ratio,
        ade: sum_ade / k,
        fde: sum_fde / k,
        min_ade: sum_min_ade / k,
        min_fde: sum_min_fde / k,
        n_windows: n,
        seed,
    })
}

/// One sweep point per ratio, in input order, under a fixed seed.
pub fn robustness_sweep(
    model: &Det2TrajFormer,
    windows: &[DetectionWindow],
    error_type: ErrorType,
    ratios: &[f64],
    sigma: f64,
    switch_radius: f64,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    ratios
        .iter()
        .map(|&ratio| {
            evaluate_windows(model, windows, error_type, ratio, sigma, switch_radius, seed)
        })
        .collect()
}

pub const REPORT_HEADER: &str = "error_type,ratio,ADE,FDE,minADE20,minFDE20,n_windows,seed";

pub fn report_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.error_type, p.ratio, p.ade, p.fde, p.min_ade, p.min_fde, p.n_windows, p.seed
        );
    }
    out
}
