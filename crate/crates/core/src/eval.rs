//! Instance-level evaluation: tIoU, average precision with all-point
//! interpolation, mAP over tIoU thresholds, and average early detection time.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{HatError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    /// Seconds per feature step, for AEDT.
    pub step_seconds: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tiou_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            step_seconds: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if self.tiou_thresholds.is_empty() {
            v.push(("eval.tiou_thresholds", "at least one threshold is required".into()));
        }
        if self.tiou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            v.push(("eval.tiou_thresholds", "thresholds must lie in (0, 1]".into()));
        }
        if self.tiou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            v.push(("eval.tiou_thresholds", "thresholds must be strictly increasing".into()));
        }
        if !(self.step_seconds > 0.0) {
            v.push(("eval.step_seconds", "must be positive".into()));
        }
        v
    }
}

/// `|a ∩ b| / |a ∪ b|` for segments `(start, end)`.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub emission_time: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

/// Ranking order: score descending, then earlier emission, then earlier start.
pub fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&dets[a], &dets[b]);
        y.score
            .total_cmp(&x.score)
            .then(x.emission_time.cmp(&y.emission_time))
            .then(x.start.total_cmp(&y.start))
    });
    order
}

/// Greedy matching in ranking order. Returns, per ranked detection, the index of
/// the ground truth it claimed (highest tIoU among unmatched, same video, ≥ `thr`).
pub fn match_detections(dets: &[Detection], gt: &[GroundTruth], thr: f64) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gt.len()];
    ranking(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (k, g) in gt.iter().enumerate() {
                if taken[k] || g.video != d.video || g.class != d.class {
                    continue;
                }
                let iou = tiou((d.start, d.end), (g.start, g.end));
                if iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, k));
                }
            }
            if let Some((_, k)) = best {
                taken[k] = true;
            }
            (i, best.map(|b| b.1))
        })
        .collect()
}

/// AP of one class with all-point interpolation; `None` when there is no ground truth.
pub fn average_precision(dets: &[Detection], gt: &[GroundTruth], thr: f64) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let matches = match_detections(dets, gt, thr);
    let n_gt = gt.len() as f64;
    let mut tp = 0.0;
    let mut precision = Vec::with_capacity(matches.len());
    let mut recall = Vec::with_capacity(matches.len());
    for (k, (_, m)) in matches.iter().enumerate() {
        if m.is_some() {
            tp += 1.0;
        }
        precision.push(tp / (k + 1) as f64);
        recall.push(tp / n_gt);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    /// mAP ×100 per threshold.
    pub map: Vec<f64>,
    pub average: f64,
}

/// Mean AP over classes with at least one ground-truth instance, per threshold.
pub fn map_at(dets: &[Detection], gt: &[GroundTruth], thresholds: &[f64]) -> MapTable {
    let classes: BTreeSet<usize> = gt.iter().map(|g| g.class).collect();
    let by_class = |c: usize| {
        (
            dets.iter().filter(|d| d.class == c).cloned().collect::<Vec<_>>(),
            gt.iter().filter(|g| g.class == c).cloned().collect::<Vec<_>>(),
        )
    };
    let split: Vec<_> = classes.iter().map(|&c| by_class(c)).collect();
    let map: Vec<f64> = thresholds
        .iter()
        .map(|&thr| {
            if split.is_empty() {
                return 0.0;
            }
            let total: f64 = split
                .iter()
                .filter_map(|(d, g)| average_precision(d, g, thr))
                .sum();
            100.0 * total / split.len() as f64
        })
        .collect();
    let average = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    MapTable {
        thresholds: thresholds.to_vec(),
        map,
        average,
    }
}

/// Mean `(emission_time − gt_end) · step_seconds` over true positives at `thr`.
/// `None` when nothing matches.
pub fn aedt(dets: &[Detection], gt: &[GroundTruth], thr: f64, step_seconds: f64) -> Option<f64> {
    let classes: BTreeSet<usize> = dets.iter().map(|d| d.class).collect();
    let mut gaps = Vec::new();
    for c in classes {
        let d: Vec<Detection> = dets.iter().filter(|d| d.class == c).cloned().collect();
        let g: Vec<GroundTruth> = gt.iter().filter(|g| g.class == c).cloned().collect();
        for (i, m) in match_detections(&d, &g, thr) {
            if let Some(k) = m {
                gaps.push((d[i].emission_time as f64 - g[k].end) * step_seconds);
            }
        }
    }
    if gaps.is_empty() {
        None
    } else {
        Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: BTreeMap<String, f64>,
    pub avg_map: f64,
    pub aedt: Option<f64>,
}

pub fn evaluate(dets: &[Detection], gt: &[GroundTruth], config: &EvalConfig) -> Metrics {
    let table = map_at(dets, gt, &config.tiou_thresholds);
    let aedt_thr = config.tiou_thresholds.first().copied().unwrap_or(0.5);
    Metrics {
        map: table
            .thresholds
            .iter()
            .zip(&table.map)
            .map(|(t, m)| (format!("{t}"), *m))
            .collect(),
        avg_map: table.average,
        aedt: aedt(dets, gt, aedt_thr, config.step_seconds),
    }
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HatError::Config(e.to_string()))
    }

    /// `metric,value` rows: one per threshold, then `avg`, then `aedt` (empty when absent).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.map {
            s.push_str(&format!("map@{k},{v}\n"));
        }
        s.push_str(&format!("avg_map,{}\n", self.avg_map));
        match self.aedt {
            Some(a) => s.push_str(&format!("aedt,{a}\n")),
            None => s.push_str("aedt,\n"),
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class: usize, s: f64, e: f64, score: f64, t: u32) -> Detection {
        Detection {
            video: "v".into(),
            class,
            start: s,
            end: e,
            score,
            emission_time: t,
        }
    }

    fn gt(class: usize, s: f64, e: f64) -> GroundTruth {
        GroundTruth {
            video: "v".into(),
            class,
            start: s,
            end: e,
        }
    }

    /// Recounts precision/recall for every prefix independently, then integrates
    /// the interpolated precision `max{p_j : r_j ≥ r}` over each recall step.
    fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
        let order = ranking(dets);
        let n = order.len();
        let mut points = Vec::new();
        for k in 1..=n {
            let prefix: Vec<Detection> = order[..k].iter().map(|&i| dets[i].clone()).collect();
            let tp = match_detections(&prefix, gts, thr)
                .iter()
                .filter(|(_, m)| m.is_some())
                .count() as f64;
            points.push((tp / gts.len() as f64, tp / k as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            if r <= 0.0 {
                continue;
            }
            let p = points
                .iter()
                .filter(|q| q.0 >= r)
                .map(|q| q.1)
                .fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((3.0, 9.0), (3.0, 9.0)), 1.0);
        assert_eq!(tiou((0.0, 2.0), (5.0, 9.0)), 0.0);
        assert!((tiou((7.0, 10.0), (8.0, 12.0)) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_single_match() {
        assert_eq!(
            average_precision(&[det(0, 2.0, 6.0, 0.9, 6)], &[gt(0, 2.0, 6.0)], 0.5),
            Some(1.0)
        );
        assert_eq!(average_precision(&[], &[], 0.5), None);
    }

    #[test]
    fn ap_matches_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..50 {
            let n_gt = rng.random_range(1..5);
            let gts: Vec<GroundTruth> = (0..n_gt)
                .map(|_| {
                    let s = rng.random_range(0.0..30.0);
                    gt(0, s, s + rng.random_range(1.0..8.0))
                })
                .collect();
            let n_det = rng.random_range(0..8);
            let dets: Vec<Detection> = (0..n_det)
                .map(|_| {
                    let s = rng.random_range(0.0..30.0);
                    // Coarse scores make ties common.
                    let score = (rng.random_range(0..5) as f64) / 4.0;
                    det(0, s, s + rng.random_range(1.0..8.0), score, rng.random_range(0..40))
                })
                .collect();
            for thr in [0.1, 0.3, 0.5] {
                let ap = average_precision(&dets, &gts, thr).unwrap();
                let oracle = ap_oracle(&dets, &gts, thr);
                assert!((ap - oracle).abs() < 1e-9, "case {case} thr {thr}: {ap} vs {oracle}");
            }
        }
    }

    #[test]
    fn map_bounds() {
        let gts = vec![gt(0, 0.0, 4.0), gt(1, 5.0, 9.0), gt(1, 10.0, 14.0)];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|g| det(g.class, g.start, g.end, 0.9, g.end as u32))
            .collect();
        let t = map_at(&perfect, &gts, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        assert!(t.map.iter().all(|&m| m == 100.0));
        assert_eq!(t.average, 100.0);
        let t = map_at(&[], &gts, &[0.1, 0.5]);
        assert!(t.map.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let gts = vec![gt(0, 0.0, 4.0)];
        let dets = vec![det(0, 0.0, 4.0, 0.9, 4), det(3, 0.0, 4.0, 0.95, 4)];
        assert_eq!(map_at(&dets, &gts, &[0.5]).map, vec![100.0]);
    }

    #[test]
    fn map_is_nonincreasing_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let thresholds = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        for _ in 0..100 {
            let gts: Vec<GroundTruth> = (0..rng.random_range(1..6))
                .map(|_| {
                    let s = rng.random_range(0.0..40.0);
                    gt(rng.random_range(0..3), s, s + rng.random_range(1.0..10.0))
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.random_range(0..12))
                .map(|_| {
                    let s = rng.random_range(0.0..40.0);
                    det(
                        rng.random_range(0..3),
                        s,
                        s + rng.random_range(1.0..10.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0..50),
                    )
                })
                .collect();
            let t = map_at(&dets, &gts, &thresholds);
            assert!(t.map.windows(2).all(|w| w[0] >= w[1] - 1e-12), "{:?}", t.map);
        }
    }

    #[test]
    fn aedt_examples() {
        let gts = [gt(0, 0.0, 10.0)];
        assert_eq!(aedt(&[det(0, 0.0, 10.0, 0.9, 10)], &gts, 0.5, 0.5), Some(0.0));
        // Two steps early at two steps per second.
        assert_eq!(aedt(&[det(0, 0.0, 10.0, 0.9, 8)], &gts, 0.5, 0.5), Some(-1.0));
        assert_eq!(aedt(&[det(0, 20.0, 30.0, 0.9, 30)], &gts, 0.5, 0.5), None);
    }

    #[test]
    fn metrics_json_shape() {
        let gts = vec![gt(0, 0.0, 4.0)];
        let dets = vec![det(0, 0.0, 4.0, 0.9, 4)];
        let m = evaluate(&dets, &gts, &EvalConfig::default());
        let json: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(json["avg_map"], 100.0);
        assert_eq!(json["map"]["0.3"], 100.0);
        assert_eq!(json["aedt"], 0.0);
        let none = evaluate(&[], &gts, &EvalConfig::default());
        assert!(none.to_json().unwrap().contains("\"aedt\": null"));
    }
}
