//! Brute-force detection evaluation: exhaustive search for the matching
//! that score-ordered greedy semantics prescribe, and AP by integrating
//! the precision envelope over its recall breakpoints.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Det {
    pub image: String,
    pub rect: [f64; 4],
    pub class: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gt {
    pub image: String,
    pub rect: [f64; 4],
    pub class: u32,
}

pub fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

/// Per-detection choice: `None` (false positive) or `Some((iou, gt))`.
type Choice = Option<(f64, usize)>;

/// Orders choices the way a score-ordered greedy matcher prefers them:
/// any match beats none, higher IoU wins, then the lower index.
fn prefer(a: &Choice, b: &Choice) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some((ia, ga)), Some((ib, gb))) => ia.partial_cmp(ib).unwrap().then(gb.cmp(ga)),
    }
}

fn lex_cmp(a: &[Choice], b: &[Choice]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = prefer(x, y);
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

fn best_sequence(
    i: usize,
    used: u64,
    dets: &[[f64; 4]],
    gts: &[[f64; 4]],
    thr: f64,
    memo: &mut HashMap<(usize, u64), Vec<Choice>>,
) -> Vec<Choice> {
    if i == dets.len() {
        return Vec::new();
    }
    if let Some(v) = memo.get(&(i, used)) {
        return v.clone();
    }
    let mut options: Vec<(Choice, u64)> = vec![(None, used)];
    for (j, g) in gts.iter().enumerate() {
        let v = overlap(&dets[i], g);
        if used & (1 << j) == 0 && v >= thr {
            options.push((Some((v, j)), used | (1 << j)));
        }
    }
    let mut best: Option<Vec<Choice>> = None;
    for (choice, next) in options {
        let mut seq = vec![choice];
        seq.extend(best_sequence(i + 1, next, dets, gts, thr, memo));
        if best.as_ref().is_none_or(|b| lex_cmp(&seq, b) == Ordering::Greater) {
            best = Some(seq);
        }
    }
    let best = best.unwrap();
    memo.insert((i, used), best.clone());
    best
}

/// TP flags for detections (already in score order) against one image's
/// boxes of one class.
pub fn exhaustive_flags(dets: &[[f64; 4]], gts: &[[f64; 4]], thr: f64) -> Vec<bool> {
    assert!(gts.len() <= 64);
    best_sequence(0, 0, dets, gts, thr, &mut HashMap::new())
        .into_iter()
        .map(|c| c.is_some())
        .collect()
}

/// `(recall, precision)` after each detection.
pub fn pr_points(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0;
    let mut out = Vec::new();
    for (k, f) in flags.iter().enumerate() {
        if *f {
            tp += 1;
        }
        out.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    out
}

fn envelope_at(points: &[(f64, f64)], r: f64) -> f64 {
    points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
}

pub fn ap_all_point(points: &[(f64, f64)]) -> f64 {
    let mut breaks: Vec<f64> = points.iter().map(|p| p.0).filter(|r| *r > 0.0).collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in breaks {
        area += (r - prev) * envelope_at(points, r);
        prev = r;
    }
    area
}

pub fn ap_eleven_point(points: &[(f64, f64)]) -> f64 {
    (0..=10).map(|t| envelope_at(points, t as f64 / 10.0)).sum::<f64>() / 11.0
}

/// Per-class AP and their mean. Detections are taken in descending score,
/// ties in input order; classes without ground truth are left out.
pub fn brute_force_map(dets: &[Det], gts: &[Gt], thresholds: &[f64], eleven_point: bool) -> (BTreeMap<u32, f64>, f64) {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut per_class = BTreeMap::new();
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    for class in classes {
        let num_gt = gts.iter().filter(|g| g.class == class).count();
        let order: Vec<&Det> = idx.iter().map(|&i| &dets[i]).filter(|d| d.class == class).collect();
        let mut total = 0.0;
        for &thr in thresholds {
            let mut flags = vec![false; order.len()];
            let mut images: Vec<&str> = order.iter().map(|d| d.image.as_str()).collect();
            images.sort();
            images.dedup();
            for image in images {
                let pos: Vec<usize> = (0..order.len()).filter(|&k| order[k].image == image).collect();
                let drects: Vec<[f64; 4]> = pos.iter().map(|&k| order[k].rect).collect();
                let grects: Vec<[f64; 4]> = gts.iter().filter(|g| g.class == class && g.image == image).map(|g| g.rect).collect();
                for (k, f) in pos.iter().zip(exhaustive_flags(&drects, &grects, thr)) {
                    flags[*k] = f;
                }
            }
            let points = pr_points(&flags, num_gt);
            total += if eleven_point { ap_eleven_point(&points) } else { ap_all_point(&points) };
        }
        per_class.insert(class, total / thresholds.len() as f64);
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    (per_class, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp_then_tp_is_half() {
        let p = pr_points(&[false, true], 1);
        assert_eq!(ap_all_point(&p), 0.5);
        assert_eq!(ap_eleven_point(&p), 0.5);
    }

    #[test]
    fn taken_ground_truth_is_skipped() {
        let g = [[0.0, 0.0, 1.0, 1.0]];
        assert_eq!(exhaustive_flags(&[[0.0, 0.0, 0.8, 1.0], [0.0, 0.0, 1.0, 1.0]], &g, 0.5), [true, false]);
    }
}
