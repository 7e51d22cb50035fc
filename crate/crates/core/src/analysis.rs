//! Internal-state analysis: PCA projections, instruction-phase attractor
//! convergence and cluster structure of context states.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::mtrnn::StateTrace;
use crate::numerics::{sigmoid_scalar, Tensor};
use crate::taskworld::{InstructionSignal, PhaseLabel, StepCounts, SubtaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D x k`, orthonormal columns sorted by explained variance.
    pub components: Tensor,
    /// Variance along each component (sample covariance eigenvalues).
    pub variances: Vec<f64>,
    /// `variance_k / total variance`.
    pub ratios: Vec<f64>,
}

impl PcaModel {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.ratios.len()
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.dims()).map(|d| self.components.data()[d * self.n_components() + k]).collect()
    }

    /// Coordinates of `x` on the first `k` components.
    pub fn project(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        if x.len() != self.dims() {
            return Err(shape_mismatch("pca project", &[self.dims()], &[x.len()]));
        }
        let k = k.min(self.n_components());
        let nc = self.n_components();
        let c = self.components.data();
        Ok((0..k)
            .map(|j| (0..self.dims()).map(|d| (x[d] - self.mean[d]) * c[d * nc + j]).sum())
            .collect())
    }

    /// Maps coordinates on the leading components back to state space.
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() > self.n_components() {
            return Err(shape_mismatch("pca reconstruct", &[self.n_components()], &[coords.len()]));
        }
        let nc = self.n_components();
        let c = self.components.data();
        Ok((0..self.dims())
            .map(|d| self.mean[d] + coords.iter().enumerate().map(|(j, v)| v * c[d * nc + j]).sum::<f64>())
            .collect())
    }
}

/// PCA of the rows of `states` via the eigendecomposition of their covariance.
///
/// Component signs are fixed so the largest-magnitude entry is positive.
pub fn fit_pca(states: &[Vec<f64>]) -> Result<PcaModel> {
    let n = states.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {n}")));
    }
    let d = states[0].len();
    if d == 0 {
        return Err(Error::Empty("PCA state dimension"));
    }
    if let Some(bad) = states.iter().find(|r| r.len() != d) {
        return Err(shape_mismatch("pca sample", &[d], &[bad.len()]));
    }
    let mut mean = vec![0.0; d];
    for r in states {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| states[i][j] - mean[j]);
    let total: f64 = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    let scale: f64 = mean.iter().map(|m| m.abs()).fold(1.0, f64::max);
    if total <= 1e-24 * scale * scale {
        return Err(Error::InvalidArgument("PCA input has zero variance".into()));
    }
    // nalgebra's SVD is inaccurate on rank-deficient input, which centered
    // data always is when n <= d; the symmetric eigensolver is not.
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let k = d;
    let mut components = vec![0.0; d * k];
    let mut variances = Vec::with_capacity(k);
    for (j, &src) in order.iter().enumerate() {
        let mut col: Vec<f64> = eigen.eigenvectors.column(src).iter().copied().collect();
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        for (r, v) in col.into_iter().enumerate() {
            components[r * k + j] = v;
        }
        variances.push(eigen.eigenvalues[src].max(0.0));
    }
    let ratios = variances.iter().map(|v| v / total).collect();
    Ok(PcaModel {
        mean,
        components: Tensor::new(vec![d, k], components)?,
        variances,
        ratios,
    })
}

/// Which context group to read from a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Cf,
    Cs,
}

/// Internal values `u` or activations `sigmoid(u)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    #[default]
    Internal,
    Activation,
}

pub fn context_states(trace: &StateTrace, group: Context, kind: StateKind) -> Vec<Vec<f64>> {
    let src = match group {
        Context::Cf => &trace.cf,
        Context::Cs => &trace.cs,
    };
    match kind {
        StateKind::Internal => src.clone(),
        StateKind::Activation => src
            .iter()
            .map(|r| r.iter().map(|v| sigmoid_scalar(*v)).collect())
            .collect(),
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn centroid(points: &[&[f64]]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for p in points {
        for (a, v) in c.iter_mut().zip(*p) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|a| *a /= points.len() as f64);
    c
}

fn subtask_count(trace: &StateTrace, steps: StepCounts) -> Result<usize> {
    let len = steps.subtask_len();
    if trace.is_empty() || !trace.len().is_multiple_of(len) {
        return Err(Error::InvalidArgument(format!(
            "trace length {} is not a whole number of {len}-step subtasks",
            trace.len()
        )));
    }
    Ok(trace.len() / len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractorReport {
    pub ratio: f64,
    /// Mean pairwise distance between the anchor states.
    pub anchor_spread: f64,
    /// Mean distance of behaviour-phase states from the anchors' mean.
    pub behavior_excursion: f64,
    /// The same ratio with anchors at the first instruction-phase step of
    /// every subtask after the first, before the instruction has acted.
    /// `None` with fewer than two such anchors.
    pub onset_ratio: Option<f64>,
}

/// Point-attractor strength of the Cf states at instruction phases.
///
/// Anchors are the Cf internal values at the final instruction-phase step of
/// every subtask. The ratio divides their mean pairwise distance by the mean
/// excursion of behaviour-phase states away from the anchors' mean.
pub fn attractor_convergence(trace: &StateTrace, steps: StepCounts) -> Result<AttractorReport> {
    attractor_convergence_multi(&[trace], steps)
}

/// As [`attractor_convergence`], pooling anchors and excursions over traces.
pub fn attractor_convergence_multi(traces: &[&StateTrace], steps: StepCounts) -> Result<AttractorReport> {
    let len = steps.subtask_len();
    let mut anchors: Vec<&[f64]> = Vec::new();
    let mut onsets: Vec<&[f64]> = Vec::new();
    let mut behavior: Vec<&[f64]> = Vec::new();
    for trace in traces {
        let subtasks = subtask_count(trace, steps)?;
        for k in 0..subtasks {
            anchors.push(&trace.cf[k * len + steps.instruction - 1]);
            if k > 0 {
                onsets.push(&trace.cf[k * len]);
            }
            for t in k * len + steps.instruction..(k + 1) * len {
                behavior.push(&trace.cf[t]);
            }
        }
    }
    if anchors.len() < 2 {
        return Err(Error::InvalidArgument("attractor convergence needs at least 2 subtasks".into()));
    }
    // (ratio, spread, excursion) for one anchor set.
    let measure = |anchors: &[&[f64]]| {
        let mut pair_sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..anchors.len() {
            for j in i + 1..anchors.len() {
                pair_sum += distance(anchors[i], anchors[j]);
                pairs += 1;
            }
        }
        let spread = pair_sum / pairs as f64;
        let home = centroid(anchors);
        let excursion = behavior.iter().map(|s| distance(s, &home)).sum::<f64>() / behavior.len() as f64;
        (spread / excursion, spread, excursion)
    };
    let (ratio, anchor_spread, behavior_excursion) = measure(&anchors);
    if behavior_excursion <= 0.0 {
        return Err(Error::InvalidArgument("behaviour phases never leave the anchor state".into()));
    }
    Ok(AttractorReport {
        ratio,
        anchor_spread,
        behavior_excursion,
        onset_ratio: (onsets.len() >= 2).then(|| measure(&onsets).0),
    })
}

/// Mean context state over each subtask segment of a trace.
pub fn subtask_means(trace: &StateTrace, steps: StepCounts, group: Context, kind: StateKind) -> Result<Vec<Vec<f64>>> {
    let subtasks = subtask_count(trace, steps)?;
    let states = context_states(trace, group, kind);
    let len = steps.subtask_len();
    Ok((0..subtasks)
        .map(|k| {
            let rows: Vec<&[f64]> = states[k * len..(k + 1) * len].iter().map(Vec::as_slice).collect();
            centroid(&rows)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub groups: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    /// Mean silhouette over all points, in [-1, 1].
    pub silhouette: f64,
    /// `groups x groups` centroid distances.
    pub distances: Vec<Vec<f64>>,
    /// Mean distance of each group's members to their centroid.
    pub spreads: Vec<f64>,
}

impl ClusterReport {
    pub fn distance(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.groups.iter().position(|g| g == a)?;
        let j = self.groups.iter().position(|g| g == b)?;
        Some(self.distances[i][j])
    }

    pub fn min_between(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.groups.len() {
            for j in i + 1..self.groups.len() {
                best = best.min(self.distances[i][j]);
            }
        }
        best
    }

    pub fn mean_spread(&self) -> f64 {
        self.spreads.iter().sum::<f64>() / self.spreads.len() as f64
    }

    /// Every pair of centroids is farther apart than the mean within-group spread.
    pub fn distinct(&self) -> bool {
        self.min_between() > self.mean_spread()
    }
}

/// Centroids, silhouette and centroid distances for labelled points.
///
/// `groups` lists every expected label; a label with no points is an error.
pub fn cluster_structure(points: &[Vec<f64>], labels: &[String], groups: &[String]) -> Result<ClusterReport> {
    if points.len() != labels.len() {
        return Err(shape_mismatch("cluster labels", &[points.len()], &[labels.len()]));
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("cluster structure needs at least 2 groups".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    for (i, l) in labels.iter().enumerate() {
        let g = groups
            .iter()
            .position(|g| g == l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l:?} is not one of the groups")))?;
        members[g].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("group {:?} has no members", groups[empty])));
    }
    let centroids: Vec<Vec<f64>> = members
        .iter()
        .map(|m| centroid(&m.iter().map(|&i| points[i].as_slice()).collect::<Vec<_>>()))
        .collect();
    let spreads = members
        .iter()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|&i| distance(&points[i], c)).sum::<f64>() / m.len() as f64)
        .collect();
    let distances = centroids
        .iter()
        .map(|a| centroids.iter().map(|b| distance(a, b)).collect())
        .collect();
    let group_of: Vec<usize> = labels
        .iter()
        .map(|l| groups.iter().position(|g| g == l).expect("checked"))
        .collect();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = group_of[i];
        if members[own].len() == 1 {
            continue; // silhouette of a singleton is 0
        }
        let mean_to = |g: usize| {
            let others: Vec<usize> = members[g].iter().copied().filter(|&j| j != i).collect();
            others.iter().map(|&j| distance(p, &points[j])).sum::<f64>() / others.len() as f64
        };
        let a = mean_to(own);
        let b = (0..groups.len())
            .filter(|&g| g != own)
            .map(mean_to)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(ClusterReport {
        groups: groups.to_vec(),
        centroids,
        silhouette: total / points.len() as f64,
        distances,
        spreads,
    })
}

/// One labelled 2-D trajectory for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSeries {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    pub phases: Vec<PhaseLabel>,
    /// Indices where an instruction phase begins.
    pub instruction_onsets: Vec<usize>,
    /// Subtask executed in each segment, when known.
    pub subtasks: Vec<SubtaskId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub group: Context,
    pub ratios: [f64; 2],
    pub series: Vec<ProjectedSeries>,
}

impl PlotData {
    pub fn rows(&self) -> usize {
        self.series.iter().map(|s| s.points.len()).sum()
    }
}

/// Projects traces onto the first two components of `pca`.
pub fn export_projection(
    traces: &[(String, &StateTrace, Vec<SubtaskId>)],
    pca: &PcaModel,
    group: Context,
    kind: StateKind,
) -> Result<PlotData> {
    if pca.n_components() < 2 {
        return Err(Error::InvalidArgument("projection needs at least 2 components".into()));
    }
    let mut series = Vec::with_capacity(traces.len());
    for (label, trace, subtasks) in traces {
        let states = context_states(trace, group, kind);
        let points = states
            .iter()
            .map(|s| pca.project(s, 2).map(|p| [p[0], p[1]]))
            .collect::<Result<Vec<_>>>()?;
        let phases = if trace.phases.len() == trace.len() {
            trace.phases.clone()
        } else {
            Vec::new()
        };
        let instruction_onsets = phases
            .iter()
            .enumerate()
            .filter(|(i, p)| **p == PhaseLabel::Instruction && (*i == 0 || phases[i - 1] != PhaseLabel::Instruction))
            .map(|(i, _)| i)
            .collect();
        series.push(ProjectedSeries {
            label: label.clone(),
            points,
            phases,
            instruction_onsets,
            subtasks: subtasks.clone(),
        });
    }
    Ok(PlotData {
        group,
        ratios: [pca.ratios[0], pca.ratios[1]],
        series,
    })
}

/// Mean context state of one subtask segment, in a PC1-PC2 plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedMean {
    pub label: String,
    pub subtask: SubtaskId,
    pub instruction: InstructionSignal,
    pub point: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kind: StateKind,
    pub traces: usize,
    pub attractor: AttractorReport,
    pub cf_ratios: [f64; 2],
    pub cs_ratios: [f64; 2],
    pub cf_by_instruction: ClusterReport,
    pub cf_by_subtask: ClusterReport,
    pub cs_by_subtask: ClusterReport,
}

impl AnalysisReport {
    /// Cf instruction clusters separate and B sits nearer E than A.
    pub fn cf_integrates_signals(&self) -> bool {
        let be = self.cf_by_subtask.distance("B", "E");
        let ba = self.cf_by_subtask.distance("B", "A");
        self.cf_by_instruction.silhouette > 0.2 && matches!((be, ba), (Some(be), Some(ba)) if be < ba)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPlots {
    pub cf: PlotData,
    pub cs: PlotData,
    pub cf_means: Vec<ProjectedMean>,
    pub cs_means: Vec<ProjectedMean>,
}

/// Full analysis of a set of traces.
///
/// Each context group gets its own PCA fit on every timestep of every trace.
/// Per-subtask means are projected onto the first two components of that fit
/// and the cluster metrics are computed in that plane.
pub fn analyze(traces: &[(String, &StateTrace, Vec<SubtaskId>)], steps: StepCounts, kind: StateKind) -> Result<(AnalysisReport, AnalysisPlots)> {
    if traces.is_empty() {
        return Err(Error::Empty("analysis traces"));
    }
    for (label, trace, subtasks) in traces {
        if subtask_count(trace, steps)? != subtasks.len() {
            return Err(Error::InvalidArgument(format!(
                "trace {label:?} has {} subtask segments but {} subtask labels",
                trace.len() / steps.subtask_len(),
                subtasks.len()
            )));
        }
    }
    let plain: Vec<&StateTrace> = traces.iter().map(|(_, t, _)| *t).collect();
    let attractor = attractor_convergence_multi(&plain, steps)?;

    let fit = |group: Context| -> Result<(PcaModel, PlotData, Vec<ProjectedMean>)> {
        let all: Vec<Vec<f64>> = plain.iter().flat_map(|t| context_states(t, group, kind)).collect();
        let pca = fit_pca(&all)?;
        let plot = export_projection(traces, &pca, group, kind)?;
        let mut means = Vec::new();
        for (label, trace, subtasks) in traces {
            for (m, &s) in subtask_means(trace, steps, group, kind)?.iter().zip(subtasks) {
                let p = pca.project(m, 2)?;
                means.push(ProjectedMean {
                    label: label.clone(),
                    subtask: s,
                    instruction: s.instruction(),
                    point: [p[0], p[1]],
                });
            }
        }
        Ok((pca, plot, means))
    };
    let (cf_pca, cf_plot, cf_means) = fit(Context::Cf)?;
    let (cs_pca, cs_plot, cs_means) = fit(Context::Cs)?;

    let clusters = |means: &[ProjectedMean], by_instruction: bool| {
        let label = |m: &ProjectedMean| {
            if by_instruction {
                format!("{:?}", m.instruction).to_lowercase()
            } else {
                m.subtask.to_string()
            }
        };
        let points: Vec<Vec<f64>> = means.iter().map(|m| m.point.to_vec()).collect();
        let labels: Vec<String> = means.iter().map(label).collect();
        let mut groups = labels.clone();
        groups.sort();
        groups.dedup();
        cluster_structure(&points, &labels, &groups)
    };
    let report = AnalysisReport {
        kind,
        traces: traces.len(),
        attractor,
        cf_ratios: [cf_pca.ratios[0], cf_pca.ratios.get(1).copied().unwrap_or(0.0)],
        cs_ratios: [cs_pca.ratios[0], cs_pca.ratios.get(1).copied().unwrap_or(0.0)],
        cf_by_instruction: clusters(&cf_means, true)?,
        cf_by_subtask: clusters(&cf_means, false)?,
        cs_by_subtask: clusters(&cs_means, false)?,
    };
    Ok((
        report,
        AnalysisPlots {
            cf: cf_plot,
            cs: cs_plot,
            cf_means,
            cs_means,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    /// Cyclic Jacobi eigen-solver for a symmetric matrix, used as an
    /// independent check on the SVD route.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = x.len() as f64;
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect()
    }

    fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect()
    }

    #[test]
    fn ratios_match_covariance_eigenvalues() {
        let x = random_rows(&mut Rng::new(3), 5, 3);
        let pca = fit_pca(&x).unwrap();
        let ev = jacobi_eigenvalues(covariance(&x));
        let total: f64 = ev.iter().sum();
        for (k, e) in ev.iter().enumerate() {
            assert!((pca.ratios[k] - e / total).abs() < 1e-10, "{k}");
            assert!((pca.variances[k] - e).abs() < 1e-10);
        }
    }

    #[test]
    fn line_data_has_one_component() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let pca = fit_pca(&x).unwrap();
        assert!((pca.ratios[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(fit_pca(&[vec![1.0, 2.0]]).is_err());
        assert!(fit_pca(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
        assert!(fit_pca(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn projection_identities() {
        let x = random_rows(&mut Rng::new(8), 20, 4);
        let pca = fit_pca(&x).unwrap();
        let origin = pca.project(&pca.mean, 4).unwrap();
        assert!(origin.iter().all(|v| v.abs() < 1e-12));
        // Residual of a 2-component reconstruction equals the dropped variance.
        let mut sse = 0.0;
        for r in &x {
            let back = pca.reconstruct(&pca.project(r, 2).unwrap()).unwrap();
            sse += back.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let dropped: f64 = pca.variances[2..].iter().sum();
        assert!((sse / 19.0 - dropped).abs() < 1e-10);
        assert!(pca.project(&[1.0], 2).is_err());
    }

    fn trace_from(cf: Vec<Vec<f64>>) -> StateTrace {
        let n = cf.len();
        StateTrace {
            cs: vec![vec![0.0]; n],
            outputs: vec![vec![0.0]; n],
            phases: (0..n).map(|t| StepCounts { instruction: 2, behavior: 10 }.phase_at(t)).collect(),
            cf,
        }
    }

    #[test]
    fn identical_anchors_give_zero_ratio() {
        let steps = StepCounts { instruction: 2, behavior: 10 };
        let cf: Vec<Vec<f64>> = (0..36)
            .map(|t| {
                let local = t % 12;
                if local < 2 {
                    vec![0.0, 0.0]
                } else {
                    vec![local as f64, (t / 12) as f64]
                }
            })
            .collect();
        let r = attractor_convergence(&trace_from(cf), steps).unwrap();
        assert_eq!(r.ratio, 0.0);
        let single = trace_from(vec![vec![0.0, 1.0]; 12]);
        assert!(attractor_convergence(&single, steps).is_err());
        let ragged = trace_from(vec![vec![0.0, 1.0]; 13]);
        assert!(attractor_convergence(&ragged, steps).is_err());
    }

    #[test]
    fn cluster_basics() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let labels: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let groups = vec!["a".to_string(), "b".to_string()];
        let r = cluster_structure(&pts, &labels, &groups).unwrap();
        assert!(r.silhouette > 0.9);
        assert!(r.distinct());
        // Two identical groups are indistinguishable.
        let pts2 = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let r2 = cluster_structure(&pts2, &labels, &groups).unwrap();
        assert!(r2.silhouette <= 0.0);
        let three = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert!(cluster_structure(&pts, &labels, &three).is_err());
        assert!(cluster_structure(&pts, &labels, &groups[..1]).is_err());
    }

    #[test]
    fn export_covers_every_step() {
        let mut rng = Rng::new(2);
        let t1 = trace_from(random_rows(&mut rng, 24, 3));
        let t2 = trace_from(random_rows(&mut rng, 12, 3));
        let all: Vec<Vec<f64>> = t1.cf.iter().chain(&t2.cf).cloned().collect();
        let pca = fit_pca(&all).unwrap();
        let plot = export_projection(
            &[("one".into(), &t1, vec![]), ("two".into(), &t2, vec![])],
            &pca,
            Context::Cf,
            StateKind::Internal,
        )
        .unwrap();
        assert_eq!(plot.rows(), 36);
        assert_eq!(plot.series[0].instruction_onsets, vec![0, 12]);
    }

    #[test]
    fn analyze_recovers_planted_groups() {
        let steps = StepCounts { instruction: 2, behavior: 10 };
        let order = vec![SubtaskId::B, SubtaskId::A, SubtaskId::C, SubtaskId::E];
        let mut rng = Rng::new(5);
        let owned: Vec<StateTrace> = (0..3)
            .map(|_| {
                let mut cf = Vec::new();
                let mut cs = Vec::new();
                for s in &order {
                    let i = s.instruction().vector();
                    let k = s.index() as f64;
                    for _ in 0..steps.subtask_len() {
                        cf.push(vec![3.0 * i[0] + rng.normal(0.0, 0.2), 3.0 * i[1] + rng.normal(0.0, 0.2), 3.0 * i[2]]);
                        cs.push(vec![k.cos() * 4.0 + rng.normal(0.0, 0.2), k.sin() * 4.0 + rng.normal(0.0, 0.2)]);
                    }
                }
                let mut t = trace_from(cf);
                t.cs = cs;
                t
            })
            .collect();
        let traces: Vec<(String, &StateTrace, Vec<SubtaskId>)> = owned.iter().enumerate().map(|(i, t)| (format!("p{i}"), t, order.clone())).collect();
        let (report, plots) = analyze(&traces, steps, StateKind::Internal).unwrap();
        assert!(report.cf_integrates_signals(), "{report:?}");
        assert_eq!(report.cf_by_instruction.groups, vec!["left", "right", "up"]);
        assert_eq!(report.cs_by_subtask.groups.len(), 4);
        assert!(report.cs_by_subtask.distinct());
        assert_eq!(plots.cf_means.len(), 12);
        assert_eq!(plots.cs.rows(), 3 * 48);

        let short = vec![(traces[0].0.clone(), traces[0].1, order[..3].to_vec())];
        assert!(analyze(&short, steps, StateKind::Internal).is_err());
        assert!(analyze(&[], steps, StateKind::Internal).is_err());
    }

    proptest! {
        #[test]
        fn pca_invariants(seed in 0u64..500, n in 3usize..12, d in 1usize..5) {
            let mut rng = Rng::new(seed);
            let x = random_rows(&mut rng, n, d);
            let pca = fit_pca(&x).unwrap();
            let k = pca.n_components();
            for a in 0..k {
                for b in 0..k {
                    let dot: f64 = pca.component(a).iter().zip(pca.component(b)).map(|(p, q)| p * q).sum();
                    let expected = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((dot - expected).abs() < 1e-10);
                }
            }
            prop_assert!(pca.ratios.iter().all(|r| *r >= -1e-15));
            prop_assert!(pca.ratios.iter().sum::<f64>() <= 1.0 + 1e-10);
            prop_assert!(pca.ratios.windows(2).all(|w| w[0] >= w[1] - 1e-15));
            // Row order does not matter.
            let mut shuffled = x.clone();
            rng.shuffle(&mut shuffled);
            let other = fit_pca(&shuffled).unwrap();
            for (a, b) in pca.ratios.iter().zip(&other.ratios) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn silhouette_is_bounded(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let pts = random_rows(&mut rng, 9, 2);
            let labels: Vec<String> = (0..9).map(|i| ["x", "y", "z"][i % 3].to_string()).collect();
            let groups: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
            let r = cluster_structure(&pts, &labels, &groups).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r.silhouette));
        }
    }
}
