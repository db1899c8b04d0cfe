//! Quantities of interest and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::graph::GrainId;
use crate::raster::IndexImage;

/// Per-run quantities of interest in physical units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QoIReport {
    /// Grain volumes in μm³: survivors accumulate their cross-section
    /// history times the layer spacing plus their final excess volume;
    /// eliminated grains keep the history accumulated while alive.
    pub volumes: Vec<(GrainId, f64)>,
    /// Volume-equivalent diameters in μm for the reported grains.
    pub sizes: Vec<(GrainId, f64)>,
    /// Cumulative eliminated-grain count per layer height (μm, count).
    pub eliminated: Vec<(f64, usize)>,
    /// Volume-weighted misorientation per layer height (μm, degrees).
    pub misorientation: Vec<(f64, f64)>,
    /// Whether eliminated grains are included in `volumes`/`sizes`.
    pub include_eliminated: bool,
}

impl QoIReport {
    /// Sorted grain sizes, the sample behind the size distribution.
    pub fn size_sample(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.sizes.iter().map(|(_, d)| *d).collect();
        s.sort_by(|a, b| a.total_cmp(b));
        s
    }
}

/// Compute the quantities of interest of a trajectory. With
/// `include_eliminated` false (the default reading), sizes cover the grains
/// present in the final layer only.
pub fn qoi_from_trajectory(traj: &Trajectory, include_eliminated: bool) -> Result<QoIReport> {
    if traj.layers.len() < 2 {
        return Err(Error::input(
            "quantities of interest need at least 2 layers",
        ));
    }
    let first = &traj.layers[0].graph;
    let domain = *first.domain();
    let a0 = domain.l0x * domain.l0y;
    let v0 = a0 * domain.l0z;
    let dz = traj.dz;

    // Accumulate each grain's cross-section history.
    let mut area_sum: std::collections::BTreeMap<GrainId, f64> = std::collections::BTreeMap::new();
    let mut theta_z: std::collections::BTreeMap<GrainId, f64> = std::collections::BTreeMap::new();
    let mut misorientation = Vec::with_capacity(traj.layers.len());
    let mut eliminated = Vec::with_capacity(traj.layers.len());
    let n0 = first.grain_count();

    for (l, layer) in traj.layers.iter().enumerate() {
        let graph = &layer.graph;
        for grain in graph.grains() {
            *area_sum.entry(grain.id).or_insert(0.0) += grain.area;
            theta_z.entry(grain.id).or_insert(grain.theta_z);
        }
        let last = l + 1 == traj.layers.len();
        // Volume-weighted misorientation over everything solidified so far;
        // survivors contribute their excess volume at the final layer.
        let mut vol_total = 0.0;
        let mut vol_weighted = 0.0;
        for (&g, &sum) in &area_sum {
            let mut vol = dz * sum * a0;
            if last {
                if let Some(grain) = graph.grain(g) {
                    vol += grain.excess_volume * v0;
                }
            }
            vol_total += vol;
            vol_weighted += vol * theta_z[&g];
        }
        let z = graph.z_layer();
        misorientation.push((z, (vol_weighted / vol_total).to_degrees()));
        eliminated.push((z, n0 - graph.grain_count()));
    }

    let final_graph = &traj.layers.last().expect("nonempty").graph;
    let mut volumes = Vec::new();
    for (&g, &sum) in &area_sum {
        let survivor = final_graph.grain(g).is_some();
        if !include_eliminated && !survivor {
            continue;
        }
        let mut vol = dz * sum * a0;
        if let Some(grain) = final_graph.grain(g) {
            vol += grain.excess_volume * v0;
        }
        volumes.push((g, vol));
    }
    let sizes = volumes
        .iter()
        .map(|&(g, v)| (g, (6.0 * v / std::f64::consts::PI).cbrt()))
        .collect();

    Ok(QoIReport {
        volumes,
        sizes,
        eliminated,
        misorientation,
        include_eliminated,
    })
}

/// Fraction of pixels carrying different grain indices.
pub fn misclassification_rate(a: &IndexImage, b: &IndexImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::input(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let wrong = a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
    Ok(wrong as f64 / a.data.len() as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// empirical CDFs, evaluated across all sample points.
pub fn ks_statistic(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::input("KS statistic needs non-empty samples"));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut ks = 0.0f64;
    while ia < a.len() || ib < b.len() {
        let x = match (a.get(ia), b.get(ib)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => break,
        };
        while ia < a.len() && a[ia] <= x {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= x {
            ib += 1;
        }
        let gap = (ia as f64 / na - ib as f64 / nb).abs();
        if gap > ks {
            ks = gap;
        }
    }
    Ok(ks)
}

/// Critical KS value: the null hypothesis that two samples of sizes `m` and
/// `n` share a distribution is rejected at confidence `alpha` when the
/// statistic exceeds sqrt(-ln(alpha/2) * (1 + n/m) / (2n)).
pub fn ks_critical(alpha: f64, m: usize, n: usize) -> Result<f64> {
    if !(0.0 < alpha && alpha < 2.0) || m == 0 || n == 0 {
        return Err(Error::input(
            "ks_critical needs alpha in (0,2) and non-empty samples",
        ));
    }
    let (m, n) = (m as f64, n as f64);
    Ok((-(alpha / 2.0).ln() * (1.0 + n / m) / (2.0 * n)).sqrt())
}

/// Relative root mean square error in percent: 100 sqrt(sum (x - x~)^2 / sum x^2).
pub fn rrmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::input("rrmse needs equal-length inputs"));
    }
    let denom: f64 = truth.iter().map(|x| x * x).sum();
    if denom <= 0.0 {
        return Err(Error::Numeric(
            "rrmse is undefined for all-zero truth".into(),
        ));
    }
    let num: f64 = truth.iter().zip(pred).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(100.0 * (num / denom).sqrt())
}

/// Precision-recall curve over every distinct score threshold, descending.
/// A sample is predicted positive when its score is >= the threshold.
pub fn pr_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    if labels.len() != scores.len() {
        return Err(Error::input("pr_curve needs equal-length inputs"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::input("pr_curve needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut curve = Vec::new();
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a point.
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            predicted += 1;
            if labels[order[i]] {
                tp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / predicted as f64, tp as f64 / positives as f64));
    }
    Ok(curve)
}

/// Area under the precision-recall curve by trapezoid over recall, anchored
/// at (precision of the top-scored group, recall 0).
pub fn pr_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let curve = pr_curve(labels, scores)?;
    let mut auc = 0.0;
    let mut prev = (curve[0].0, 0.0);
    for &(p, r) in &curve {
        auc += 0.5 * (p + prev.0) * (r - prev.1);
        prev = (p, r);
    }
    Ok(auc)
}

/// F1 score at a fixed threshold (predicted positive when score >= threshold).
pub fn f1_at(labels: &[bool], scores: &[f64], threshold: f64) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::input("f1_at needs equal-length inputs"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&l, &s) in labels.iter().zip(scores) {
        let predicted = s >= threshold;
        match (l, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Squared-error loss of the regression targets, averaged per junction and
/// per grain over unmasked entries. Masked entries leave both the sums and
/// the counts. All-masked input yields 0 and bumps the warning counter.
#[allow(clippy::too_many_arguments)]
pub fn l2_loss(
    truth_dx: &[f64],
    truth_dy: &[f64],
    pred_dx: &[f64],
    pred_dy: &[f64],
    junction_mask: &[bool],
    truth_ds: &[f64],
    truth_v: &[f64],
    pred_ds: &[f64],
    pred_v: &[f64],
    grain_mask: &[bool],
    warnings: &mut usize,
) -> Result<f64> {
    let n_j = truth_dx.len();
    if [
        truth_dy.len(),
        pred_dx.len(),
        pred_dy.len(),
        junction_mask.len(),
    ]
    .iter()
    .any(|&l| l != n_j)
    {
        return Err(Error::input("junction arrays disagree in length"));
    }
    let n_g = truth_ds.len();
    if [truth_v.len(), pred_ds.len(), pred_v.len(), grain_mask.len()]
        .iter()
        .any(|&l| l != n_g)
    {
        return Err(Error::input("grain arrays disagree in length"));
    }

    let mut junction_sum = 0.0;
    let mut junction_count = 0usize;
    for i in 0..n_j {
        if junction_mask[i] {
            continue;
        }
        junction_sum += (truth_dx[i] - pred_dx[i]).powi(2) + (truth_dy[i] - pred_dy[i]).powi(2);
        junction_count += 1;
    }
    let mut grain_sum = 0.0;
    let mut grain_count = 0usize;
    for i in 0..n_g {
        if grain_mask[i] {
            continue;
        }
        grain_sum += (truth_ds[i] - pred_ds[i]).powi(2) + (truth_v[i] - pred_v[i]).powi(2);
        grain_count += 1;
    }
    if junction_count == 0 && grain_count == 0 {
        *warnings += 1;
        return Ok(0.0);
    }
    let mut loss = 0.0;
    if junction_count > 0 {
        loss += junction_sum / junction_count as f64;
    } else {
        *warnings += 1;
    }
    if grain_count > 0 {
        loss += grain_sum / grain_count as f64;
    } else {
        *warnings += 1;
    }
    Ok(loss)
}

/// Binary cross-entropy over unmasked edges; probabilities clamp into
/// [1e-12, 1 - 1e-12] before the logs, counting a warning per clamp.
pub fn bce_loss(
    labels: &[bool],
    probabilities: &[f64],
    mask: &[bool],
    warnings: &mut usize,
) -> Result<f64> {
    if labels.len() != probabilities.len() || labels.len() != mask.len() {
        return Err(Error::input("bce arrays disagree in length"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&y, &p), &m) in labels.iter().zip(probabilities).zip(mask) {
        if m {
            continue;
        }
        let clamped = p.clamp(1e-12, 1.0 - 1e-12);
        if clamped != p {
            *warnings += 1;
        }
        sum -= if y {
            clamped.ln()
        } else {
            (1.0 - clamped).ln()
        };
        count += 1;
    }
    if count == 0 {
        *warnings += 1;
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainSpec;
    use crate::engine::{rollout, IdentityPredictor, Thresholds};
    use crate::rng::Rng;
    use crate::substrate;

    fn domain_40() -> DomainSpec {
        DomainSpec::new(40.0, 40.0, 50.0, 10.0, 2.0, 10.0, 2.0)
    }

    fn identity_trajectory(seed: u64, n: usize, n_l: usize) -> Trajectory {
        let mut rng = Rng::from_seed(seed);
        let seeds = substrate::uniform_seeds(n, &mut rng).unwrap();
        let orientations = substrate::sample_orientations(n, &mut rng);
        let graph = substrate::periodic_voronoi(&seeds, &orientations, &domain_40()).unwrap();
        rollout(graph, &IdentityPredictor, &Thresholds::default(), n_l, 2.5)
            .unwrap()
            .trajectory
    }

    #[test]
    fn diameter_formula_inverts_at_unit_size() {
        // A volume of pi/6 μm³ has equivalent diameter 1 μm.
        let v = std::f64::consts::PI / 6.0;
        let d = (6.0 * v / std::f64::consts::PI).cbrt();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_trajectory_has_constant_curves() {
        let traj = identity_trajectory(70, 25, 8);
        let report = qoi_from_trajectory(&traj, false).unwrap();
        assert!(report.eliminated.iter().all(|&(_, n)| n == 0));
        let first = report.misorientation[0].1;
        for &(_, m) in &report.misorientation {
            assert!((m - first).abs() < 1e-9, "misorientation drifted");
        }
        assert_eq!(report.sizes.len(), 25);
    }

    #[test]
    fn uniform_misorientation_is_reported_exactly() {
        // All grains at theta_z = 10 degrees.
        let mut rng = Rng::from_seed(71);
        let seeds = substrate::uniform_seeds(12, &mut rng).unwrap();
        let theta = 10.0f64.to_radians();
        let orientations = vec![[theta.sin(), 0.0, theta.cos()]; 12];
        let graph = substrate::periodic_voronoi(&seeds, &orientations, &domain_40()).unwrap();
        let traj = rollout(graph, &IdentityPredictor, &Thresholds::default(), 5, 2.5)
            .unwrap()
            .trajectory;
        let report = qoi_from_trajectory(&traj, false).unwrap();
        for &(_, m) in &report.misorientation {
            assert!((m - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_single_grain_volume_sums_layers() {
        // Identity rollout: every grain's volume is dz * n_l * s_phys since
        // excess volumes are zero.
        let traj = identity_trajectory(72, 10, 6);
        let report = qoi_from_trajectory(&traj, false).unwrap();
        let a0 = 1600.0; // 40 x 40 reference cross-section
        for (g, vol) in &report.volumes {
            let s = traj.layers[0].graph.grain(*g).unwrap().area;
            let expect = 2.5 * s * a0 * 6.0;
            assert!((vol - expect).abs() < 1e-9 * expect.max(1.0));
        }
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let mut traj = identity_trajectory(73, 10, 2);
        traj.layers.truncate(1);
        assert!(matches!(
            qoi_from_trajectory(&traj, false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn mr_counts_mismatched_pixels() {
        let d = domain_40();
        let a = IndexImage::new(8, 8, vec![1; 64], d, 0.0).unwrap();
        let b = IndexImage::new(8, 8, vec![2; 64], d, 0.0).unwrap();
        assert_eq!(misclassification_rate(&a, &a).unwrap(), 0.0);
        assert_eq!(misclassification_rate(&a, &b).unwrap(), 1.0);
        let mut half = vec![1u32; 64];
        for v in half.iter_mut().take(32) {
            *v = 2;
        }
        let h = IndexImage::new(8, 8, half, d, 0.0).unwrap();
        assert_eq!(misclassification_rate(&a, &h).unwrap(), 0.5);
        assert_eq!(
            misclassification_rate(&a, &h).unwrap(),
            misclassification_rate(&h, &a).unwrap()
        );
        let wide = IndexImage::new(16, 8, vec![1; 128], d, 0.0).unwrap();
        assert!(misclassification_rate(&a, &wide).is_err());
    }

    #[test]
    fn ks_matches_a_brute_force_oracle() {
        // Oracle: evaluate both empirical CDFs at every sample point by a
        // double loop.
        fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
            let mut points: Vec<f64> = a.iter().chain(b).copied().collect();
            points.sort_by(|x, y| x.total_cmp(y));
            let ecdf =
                |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
            points
                .iter()
                .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
                .fold(0.0, f64::max)
        }
        let mut rng = Rng::from_seed(74);
        for _ in 0..20 {
            let n = 5 + rng.below(195);
            let m = 5 + rng.below(195);
            let a: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gaussian() * 1.3 + 0.2).collect();
            let fast = ks_statistic(&a, &b).unwrap();
            let slow = ks_brute(&a, &b);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ks_endpoints_and_symmetry() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        let b = vec![10.0, 11.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), 1.0);
        let c = vec![0.5, 1.5, 2.5, 3.5];
        assert_eq!(ks_statistic(&a, &c).unwrap(), ks_statistic(&c, &a).unwrap());
        assert!(ks_statistic(&a, &[]).is_err());
    }

    #[test]
    fn ks_critical_reproduces_the_reference_value() {
        let c = ks_critical(0.95, 120, 120).unwrap();
        assert!((c - 0.079).abs() < 0.0005, "critical {c}");
    }

    #[test]
    fn rrmse_endpoints() {
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(rrmse(&x, &x).unwrap(), 0.0);
        let zero = vec![0.0; 3];
        assert!((rrmse(&x, &zero).unwrap() - 100.0).abs() < 1e-12);
        assert!(rrmse(&zero, &x).is_err());
    }

    #[test]
    fn perfect_classifier_has_unit_area_and_f1() {
        let labels = vec![true, true, false, false, false];
        let scores = vec![0.9, 0.8, 0.3, 0.2, 0.1];
        assert!((pr_auc(&labels, &scores).unwrap() - 1.0).abs() < 1e-12);
        assert!((f1_at(&labels, &scores, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_scores_approach_the_positive_rate() {
        let mut rng = Rng::from_seed(75);
        let n = 10_000;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let auc = pr_auc(&labels, &scores).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
    }

    #[test]
    fn losses_match_closed_forms() {
        let mut warnings = 0;
        // Perfect prediction: zero loss.
        let t = vec![0.1, -0.2];
        let mask = vec![false, false];
        let loss = l2_loss(&t, &t, &t, &t, &mask, &t, &t, &t, &t, &mask, &mut warnings).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(warnings, 0);

        // P = 0.5 everywhere: ln 2 regardless of labels.
        let labels = vec![true, false, true];
        let p = vec![0.5; 3];
        let m = vec![false; 3];
        let bce = bce_loss(&labels, &p, &m, &mut warnings).unwrap();
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);

        // Hard labels under clamping go to zero loss with warnings counted.
        let hard = vec![1.0, 0.0];
        let bce = bce_loss(&[true, false], &hard, &[false, false], &mut warnings).unwrap();
        assert!(bce < 1e-10);
        assert_eq!(warnings, 2);

        // Fully masked input: defined as zero, flagged.
        let mut w2 = 0;
        let bce = bce_loss(&labels, &p, &[true; 3], &mut w2).unwrap();
        assert_eq!(bce, 0.0);
        assert_eq!(w2, 1);
    }
}
