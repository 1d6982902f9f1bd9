//! Evaluation metrics: Dice, 95th-percentile Hausdorff distance over
//! six-connected boundary voxels, expected calibration error, negative
//! log-likelihood and uncertainty-error ranking AUC.

use crate::error::{Error, Result};

/// Aggregated metrics for one (scenario, region) cell of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scenario: String,
    pub region: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Empty when every case had an undefined surface distance.
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub ece: f64,
    pub nll: f64,
    /// Empty for deterministic predictors (no variance signal).
    pub unc_auc: Option<f64>,
    pub n_cases: usize,
}

/// Overlap score `2|P∩G| / (|P|+|G|)`; 1.0 when both masks are empty.
pub fn dice_score(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.iter().zip(gt) {
        if *a {
            p += 1;
        }
        if *b {
            g += 1;
        }
        if *a && *b {
            inter += 1;
        }
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Foreground voxels with at least one six-connected background neighbor
/// (out-of-volume counts as background).
pub fn boundary_voxels(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let (h, w, d) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
    let at = |x: i64, y: i64, z: i64| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= h || y >= w || z >= d {
            return false;
        }
        mask[((x * w + y) * d + z) as usize]
    };
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if !at(x, y, z) {
                    continue;
                }
                let is_boundary = !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
                if is_boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn nearest_sq(p: [i64; 3], set: &[[i64; 3]]) -> f64 {
    let mut best = i64::MAX;
    for q in set {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dz = p[2] - q[2];
        let d = dx * dx + dy * dy + dz * dz;
        if d < best {
            best = d;
        }
    }
    best as f64
}

/// Nearest-rank percentile of an unsorted sample (p in (0, 1]).
fn nearest_rank_percentile(values: &mut Vec<f64>, p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries,
/// in voxel units: max of the two directed nearest-rank 95th percentiles.
/// Both masks empty yields 0; exactly one empty is undefined (`None`).
pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3]) -> Option<f64> {
    let pb = boundary_voxels(pred, dims);
    let gb = boundary_voxels(gt, dims);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let mut fwd: Vec<f64> = pb.iter().map(|p| nearest_sq(*p, &gb).sqrt()).collect();
    let mut bwd: Vec<f64> = gb.iter().map(|q| nearest_sq(*q, &pb).sqrt()).collect();
    let d_fwd = nearest_rank_percentile(&mut fwd, 0.95);
    let d_bwd = nearest_rank_percentile(&mut bwd, 0.95);
    Some(d_fwd.max(d_bwd))
}

/// Expected calibration error over `bins` equal-width confidence bins on
/// [0.5, 1]. Confidence is `max(p, 1-p)`, correctness compares the
/// 0.5-thresholded prediction with the label.
pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::config("ece needs bins >= 1".to_string()));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("ece", format!("{} probs vs {} labels", probs.len(), labels.len())));
    }
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::domain("ece", format!("probability {bad} outside [0,1]")));
    }
    let n = probs.len();
    if n == 0 {
        return Ok(0.0);
    }
    let width = 0.5 / bins as f64;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let conf = p.max(1.0 - p);
        let pred = p > 0.5;
        let b = (((conf - 0.5) / width) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += count[b] as f64 / n as f64 * (acc - conf).abs();
    }
    Ok(total)
}

/// Mean binary negative log-likelihood with probabilities clamped to
/// [1e-7, 1-1e-7].
pub fn nll(probs: &[f64], labels: &[bool]) -> f64 {
    debug_assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    total / probs.len() as f64
}

/// Area under the ROC curve treating `scores` as a predictor of the error
/// voxels, with tied scores receiving averaged ranks.
pub fn uncertainty_error_auc(scores: &[f64], errors: &[bool]) -> Result<f64> {
    if scores.len() != errors.len() {
        return Err(Error::shape("uncertainty_error_auc", format!("{} scores vs {} flags", scores.len(), errors.len())));
    }
    let n_pos = errors.iter().filter(|e| **e).count();
    let n_neg = errors.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain(
            "uncertainty_error_auc",
            format!("degenerate labels: {n_pos} error vs {n_neg} correct voxels"),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups (1-based ranks)
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            rank[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = errors.iter().zip(&rank).filter(|(e, _)| **e).map(|(_, r)| r).sum();
    Ok((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}
