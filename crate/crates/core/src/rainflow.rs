//! Rainflow cycle counting and its matrix forms.
//!
//! A SoC trajectory `x` of length `T + 1` is reduced to its switching points
//! (alternating peaks and valleys), full cycles are extracted with the
//! four-point rule, and whatever is left is read off as residual half-cycles.
//! Every half-cycle is an edge between two nodes of the trajectory, oriented
//! from the higher to the lower SoC node. The edge list gives
//!
//! * the incidence matrix `M` ((T+1) x T) with `M'x = nu`, and
//! * the rate-to-depth matrix `N` (T x T) with `N u = nu`, where each row is
//!   `+-(1/E)` times the indicator of the slots spanned by the half-cycle.
//!
//! Depths are listed in extraction order (full cycles first, residual
//! half-cycles after) and padded with zeros up to length `T`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::storage::{self, ModelError, RateProfile};

/// Tolerance on the `[0, 1]` SoC range.
pub const SOC_TOL: f64 = 1e-9;
/// Two SoC values closer than this are tied; a slot moving less than this is flat.
pub const TIE_TOL: f64 = 1e-9;
/// Upper bound on the number of enumerated rate-to-depth matrices.
pub const MAX_VARIANTS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RainflowError {
    #[error("SoC profile needs at least 2 points, got {0}")]
    InvalidHorizon(usize),
    #[error("SoC value {value} at node {node} is outside [0, 1]")]
    OutOfRange { node: usize, value: f64 },
    #[error("capacity must be positive, got {0}")]
    InvalidCapacity(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Normalized state-of-charge trajectory, `T + 1` points in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocProfile(Vec<f64>);

impl SocProfile {
    pub fn new(values: Vec<f64>) -> Result<Self, RainflowError> {
        if values.len() < 2 {
            return Err(RainflowError::InvalidHorizon(values.len()));
        }
        if let Some(node) = values
            .iter()
            .position(|v| !v.is_finite() || *v < -SOC_TOL || *v > 1.0 + SOC_TOL)
        {
            return Err(RainflowError::OutOfRange {
                node,
                value: values[node],
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Number of slots `T`.
    pub fn horizon(&self) -> usize {
        self.0.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HalfCycleKind {
    /// One of the two halves of an extracted full cycle.
    FullCycle,
    /// Left over after full-cycle extraction.
    Residual,
}

/// A half-cycle between SoC nodes `high` and `low` (`x_high >= x_low`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HalfCycle {
    pub high: usize,
    pub low: usize,
    pub kind: HalfCycleKind,
}

impl HalfCycle {
    fn same_edge(&self, other: &HalfCycle) -> bool {
        self.high == other.high && self.low == other.low
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainflowDecomposition {
    /// Half-cycle depths, zero padded to length `T`.
    pub depths: Vec<f64>,
    /// One entry per identified half-cycle, in the same order as `depths`.
    pub pairings: Vec<HalfCycle>,
    /// Incidence matrix `M`, `(T+1) x T`.
    pub incidence: DMatrix<f64>,
}

/// All rate-to-depth matrices associated with one rate profile.
#[derive(Debug, Clone, PartialEq)]
pub struct RateToDepthOperator {
    /// `N_k`, each `T x T`. Rows of the non-canonical matrices are aligned to
    /// the canonical rows carrying the same half-cycle.
    pub matrices: Vec<DMatrix<f64>>,
    pub canonical_index: usize,
    /// False when the enumeration stopped at [`MAX_VARIANTS`].
    pub enumeration_complete: bool,
}

impl RateToDepthOperator {
    pub fn canonical(&self) -> &DMatrix<f64> {
        &self.matrices[self.canonical_index]
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Extremum {
    Peak,
    Valley,
    Flat,
}

fn slot_direction(x: &[f64], slot: usize) -> i8 {
    let delta = x[slot] - x[slot - 1];
    if delta > TIE_TOL {
        1
    } else if delta < -TIE_TOL {
        -1
    } else {
        0
    }
}

fn end_of_run(direction: i8) -> Extremum {
    if direction > 0 {
        Extremum::Peak
    } else {
        Extremum::Valley
    }
}

/// Alternating peaks and valleys of the trajectory, endpoints included.
///
/// A flat stretch between runs of opposite direction collapses onto its first
/// node. A flat stretch inside a monotone run becomes a degenerate
/// peak/valley pair at its two ends, which later extracts as a zero-depth
/// full cycle.
fn switching_points(x: &[f64]) -> Vec<(usize, Extremum)> {
    let horizon = x.len() - 1;
    let Some(first) = (1..=horizon).find(|&t| slot_direction(x, t) != 0) else {
        return vec![(0, Extremum::Flat)];
    };
    let mut direction = slot_direction(x, first);
    let mut points = vec![(0, end_of_run(-direction))];
    let mut plateau_start: Option<usize> = None;
    for slot in first + 1..=horizon {
        let s = slot_direction(x, slot);
        if s == 0 {
            plateau_start.get_or_insert(slot - 1);
            continue;
        }
        if let Some(start) = plateau_start.take() {
            points.push((start, end_of_run(direction)));
            if s == direction {
                points.push((slot - 1, end_of_run(-direction)));
            }
        } else if s != direction {
            points.push((slot - 1, end_of_run(direction)));
        }
        direction = s;
    }
    points.push((horizon, end_of_run(direction)));
    points
}

fn orient(x: &[f64], a: (usize, Extremum), b: (usize, Extremum), kind: HalfCycleKind) -> HalfCycle {
    let a_high = if x[a.0] != x[b.0] {
        x[a.0] > x[b.0]
    } else {
        a.1 == Extremum::Peak
    };
    let (high, low) = if a_high { (a.0, b.0) } else { (b.0, a.0) };
    HalfCycle { high, low, kind }
}

/// Half-cycles of a raw trajectory (no range check).
pub(crate) fn half_cycles(x: &[f64]) -> Vec<HalfCycle> {
    let mut points = switching_points(x);
    let mut cycles = Vec::new();
    'extract: loop {
        for k in 0..points.len().saturating_sub(3) {
            let v = |i: usize| x[points[k + i].0];
            let outer_left = (v(0) - v(1)).abs();
            let inner = (v(1) - v(2)).abs();
            let outer_right = (v(2) - v(3)).abs();
            if inner <= outer_left + TIE_TOL && inner <= outer_right + TIE_TOL {
                let edge = orient(x, points[k + 1], points[k + 2], HalfCycleKind::FullCycle);
                cycles.push(edge);
                cycles.push(edge);
                points.drain(k + 1..k + 3);
                continue 'extract;
            }
        }
        break;
    }
    cycles.extend(
        points
            .windows(2)
            .map(|w| orient(x, w[0], w[1], HalfCycleKind::Residual)),
    );
    cycles
}

fn depths_of_cycles(x: &[f64], cycles: &[HalfCycle]) -> Vec<f64> {
    let horizon = x.len() - 1;
    let mut depths = vec![0.0; horizon];
    for (d, c) in depths.iter_mut().zip(cycles) {
        *d = x[c.high] - x[c.low];
    }
    depths
}

/// Depth vector of a raw trajectory (no range check).
pub(crate) fn depths_of_path(x: &[f64]) -> Vec<f64> {
    depths_of_cycles(x, &half_cycles(x))
}

fn incidence_from_cycles(horizon: usize, cycles: &[HalfCycle]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(horizon + 1, horizon);
    for (col, c) in cycles.iter().enumerate() {
        m[(c.high, col)] += 1.0;
        m[(c.low, col)] -= 1.0;
    }
    m
}

/// Runs the Rainflow algorithm on a SoC profile.
pub fn count_cycles(x: &SocProfile) -> RainflowDecomposition {
    let cycles = half_cycles(x.values());
    RainflowDecomposition {
        depths: depths_of_cycles(x.values(), &cycles),
        incidence: incidence_from_cycles(x.horizon(), &cycles),
        pairings: cycles,
    }
}

/// Incidence matrix `M(x)` with `M(x)'x = nu`.
pub fn incidence_matrix(x: &SocProfile) -> DMatrix<f64> {
    count_cycles(x).incidence
}

fn fill_row(n: &mut DMatrix<f64>, row: usize, cycle: &HalfCycle, capacity: f64) {
    // x_high - x_low expressed through the rates between the two nodes.
    let (from, to, sign) = if cycle.high < cycle.low {
        (cycle.high, cycle.low, 1.0)
    } else {
        (cycle.low, cycle.high, -1.0)
    };
    for slot in from..to {
        n[(row, slot)] = sign / capacity;
    }
}

fn depth_matrix(horizon: usize, rows: &[Option<HalfCycle>], capacity: f64) -> DMatrix<f64> {
    let mut n = DMatrix::zeros(horizon, horizon);
    for (r, cycle) in rows.iter().enumerate() {
        if let Some(c) = cycle {
            fill_row(&mut n, r, c, capacity);
        }
    }
    n
}

/// Places `variant` half-cycles on the rows of `canonical` carrying the same
/// edge, then on rows whose depth on `x` is the same; the remaining ones fill
/// the free rows, padding rows first.
fn align_rows(x: &[f64], canonical: &[HalfCycle], variant: &[HalfCycle]) -> Vec<Option<HalfCycle>> {
    let horizon = x.len() - 1;
    let depth = |c: &HalfCycle| (x[c.high] - x[c.low]).abs();
    let mut rows: Vec<Option<HalfCycle>> = vec![None; horizon];
    let mut taken = vec![false; horizon];
    let mut unmatched = Vec::new();
    for v in variant {
        match (0..canonical.len()).find(|&r| !taken[r] && canonical[r].same_edge(v)) {
            Some(r) => {
                taken[r] = true;
                rows[r] = Some(*v);
            }
            None => unmatched.push(*v),
        }
    }
    let mut leftovers = Vec::new();
    for v in unmatched {
        match (0..canonical.len()).find(|&r| !taken[r] && (depth(&canonical[r]) - depth(&v)).abs() <= TIE_TOL) {
            Some(r) => {
                taken[r] = true;
                rows[r] = Some(v);
            }
            None => leftovers.push(v),
        }
    }
    let free = (canonical.len()..horizon).chain(0..canonical.len().min(horizon));
    let mut free = free.filter(|&r| !taken[r]).collect::<Vec<_>>().into_iter();
    for v in leftovers {
        let r = free.next().expect("a trajectory has at most T half-cycles");
        rows[r] = Some(v);
    }
    rows
}

fn same_rows(a: &[Option<HalfCycle>], b: &[Option<HalfCycle>]) -> bool {
    a.iter().zip(b).all(|(p, q)| match (p, q) {
        (None, None) => true,
        (Some(p), Some(q)) => p.same_edge(q),
        _ => false,
    })
}

/// Perturbation size for tie resolution: below every genuine gap between SoC
/// values, above the tie tolerance.
fn perturbation(x: &[f64]) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d = (x[i] - x[j]).abs();
            if d > TIE_TOL && d < gap {
                gap = d;
            }
        }
    }
    (gap / 4.0).clamp(100.0 * TIE_TOL, 1e-6)
}

/// Row layouts of all associated matrices: the canonical one first, then one
/// per distinct layout reached by nudging a single tied node up or down.
pub(crate) fn row_layouts(x: &[f64]) -> (Vec<Vec<Option<HalfCycle>>>, bool) {
    let canonical = half_cycles(x);
    let mut layouts = vec![align_rows(x, &canonical, &canonical)];
    let tied: Vec<usize> = (0..x.len())
        .filter(|&t| (0..x.len()).any(|s| s != t && (x[s] - x[t]).abs() <= TIE_TOL))
        .collect();
    if tied.is_empty() {
        return (layouts, true);
    }
    let eps = perturbation(x);
    let mut nudged = x.to_vec();
    for &node in &tied {
        for sign in [1.0, -1.0] {
            nudged[node] = x[node] + sign * eps;
            let rows = align_rows(x, &canonical, &half_cycles(&nudged));
            nudged[node] = x[node];
            if layouts.iter().any(|l| same_rows(l, &rows)) {
                continue;
            }
            if layouts.len() == MAX_VARIANTS {
                return (layouts, false);
            }
            layouts.push(rows);
        }
    }
    (layouts, true)
}

/// Associated matrices of a raw trajectory (no range check).
pub(crate) fn operator_for_path(x: &[f64], capacity: f64) -> RateToDepthOperator {
    let horizon = x.len() - 1;
    let (layouts, complete) = row_layouts(x);
    RateToDepthOperator {
        matrices: layouts.iter().map(|l| depth_matrix(horizon, l, capacity)).collect(),
        canonical_index: 0,
        enumeration_complete: complete,
    }
}

/// Copy of `x` with every cluster of values within `tol` of each other
/// replaced by the cluster mean, so that near ties become exact ties.
pub(crate) fn snap_near_ties(x: &[f64], tol: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = x.to_vec();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] - x[order[end - 1]] <= tol {
            end += 1;
        }
        if end - start > 1 {
            let mean = order[start..end].iter().map(|&i| x[i]).sum::<f64>() / (end - start) as f64;
            for &i in &order[start..end] {
                out[i] = mean;
            }
        }
        start = end;
    }
    out
}

/// Canonical `N` of a raw trajectory.
pub(crate) fn canonical_matrix(x: &[f64], capacity: f64) -> DMatrix<f64> {
    let horizon = x.len() - 1;
    let cycles = half_cycles(x);
    let rows: Vec<Option<HalfCycle>> = (0..horizon).map(|r| cycles.get(r).copied()).collect();
    depth_matrix(horizon, &rows, capacity)
}

fn checked_path(u: &RateProfile, capacity: f64, x0: f64) -> Result<Vec<f64>, RainflowError> {
    if !(capacity > 0.0) {
        return Err(RainflowError::InvalidCapacity(capacity));
    }
    let x = storage::soc_path(u.values(), capacity, x0);
    let profile = SocProfile::new(x)?;
    Ok(profile.0)
}

/// All matrices `N_k(u)` with `N_k u = nu` for the profile induced by `u`.
pub fn rate_to_depth_operator(u: &RateProfile, capacity: f64, x0: f64) -> Result<RateToDepthOperator, RainflowError> {
    let x = checked_path(u, capacity, x0)?;
    Ok(operator_for_path(&x, capacity))
}

/// `nu = N(u) u`, computed through the canonical rate-to-depth matrix.
pub fn depths_from_rates(u: &RateProfile, capacity: f64, x0: f64) -> Result<Vec<f64>, RainflowError> {
    let x = checked_path(u, capacity, x0)?;
    let n = canonical_matrix(&x, capacity);
    Ok((n * DVector::from_column_slice(u.values())).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn profile(v: &[f64]) -> SocProfile {
        SocProfile::new(v.to_vec()).unwrap()
    }

    fn rates(v: &[f64]) -> RateProfile {
        RateProfile::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(*x, *y, epsilon = tol);
        }
    }

    #[test]
    fn rejects_short_profiles() {
        assert_eq!(SocProfile::new(vec![0.5]), Err(RainflowError::InvalidHorizon(1)));
        assert!(matches!(
            SocProfile::new(vec![0.5, 1.2]),
            Err(RainflowError::OutOfRange { node: 1, .. })
        ));
    }

    #[test]
    fn counts_the_reference_profile() {
        let d = count_cycles(&profile(&[0.2, 0.5, 0.4, 0.8, 0.3]));
        assert_close(&d.depths, &[0.1, 0.1, 0.6, 0.5], 1e-12);
        let edges: Vec<_> = d.pairings.iter().map(|c| (c.high, c.low, c.kind)).collect();
        use HalfCycleKind::*;
        assert_eq!(
            edges,
            vec![(1, 2, FullCycle), (1, 2, FullCycle), (3, 0, Residual), (3, 4, Residual)]
        );
    }

    #[test]
    fn constant_and_single_swing() {
        let d = count_cycles(&profile(&[0.5, 0.5, 0.5]));
        assert_eq!(d.depths, vec![0.0, 0.0]);
        assert!(d.pairings.is_empty());
        assert_eq!(d.incidence, DMatrix::zeros(3, 2));

        let d = count_cycles(&profile(&[0.0, 1.0, 0.0]));
        assert_eq!(d.depths, vec![1.0, 1.0]);
        let m = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 1.0, 1.0, 0.0, -1.0]);
        assert_eq!(d.incidence, m);
    }

    #[test]
    fn incidence_matches_reference_edges() {
        let m = incidence_matrix(&profile(&[0.2, 0.5, 0.4, 0.8, 0.3]));
        let e = |t: usize| DVector::from_fn(5, |i, _| if i == t { 1.0 } else { 0.0 });
        let expected = [e(1) - e(2), e(1) - e(2), e(3) - e(0), e(3) - e(4)];
        for (k, col) in expected.iter().enumerate() {
            assert_eq!(m.column(k), col.column(0));
        }
    }

    #[test]
    fn reference_rate_operator() {
        let e = 10.0;
        let u = rates(&[-0.3 * e, 0.1 * e, -0.4 * e, 0.5 * e]);
        let op = rate_to_depth_operator(&u, e, 0.2).unwrap();
        assert_eq!(op.len(), 1);
        let n = op.canonical() * e;
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[0., 1., 0., 0., 0., 1., 0., 0., -1., -1., -1., 0., 0., 0., 0., 1.],
        );
        assert_eq!(n, expected);
        let nu = depths_from_rates(&u, e, 0.2).unwrap();
        assert_close(&nu, &[0.1, 0.1, 0.6, 0.5], 1e-12);
    }

    #[test]
    fn tied_profile_has_two_matrices() {
        let e = 1.0;
        let u = rates(&[-0.3, 0.0, -0.3, 0.5]);
        let op = rate_to_depth_operator(&u, e, 0.2).unwrap();
        assert!(op.enumeration_complete);
        assert_eq!(op.len(), 2);
        let n1 = DMatrix::from_row_slice(
            4,
            4,
            &[0., 1., 0., 0., 0., 1., 0., 0., -1., -1., -1., 0., 0., 0., 0., 1.],
        );
        let n2 = DMatrix::from_row_slice(
            4,
            4,
            &[0., 0., 0., 0., 0., 0., 0., 0., -1., -1., -1., 0., 0., 0., 0., 1.],
        );
        assert_eq!(op.matrices[0], n1);
        assert_eq!(op.matrices[1], n2);
        let uv = DVector::from_column_slice(u.values());
        for n in &op.matrices {
            assert_close((n * &uv).as_slice(), &[0.0, 0.0, 0.6, 0.5], 1e-12);
        }
    }

    #[test]
    fn flat_slot_variants_keep_depth_rows() {
        let u = rates(&[-0.3, 0.0, 0.1]);
        let op = rate_to_depth_operator(&u, 1.0, 0.5).unwrap();
        assert!(op.len() > 1);
        let uv = DVector::from_column_slice(u.values());
        for n in &op.matrices {
            assert_close((n * &uv).as_slice(), &[0.3, 0.1, 0.0], 1e-12);
        }
    }

    #[test]
    fn zero_rates() {
        let u = RateProfile::zeros(5);
        let op = rate_to_depth_operator(&u, 2.0, 0.5).unwrap();
        let zero = DVector::zeros(5);
        for n in &op.matrices {
            assert_eq!(n * &zero, zero);
        }
        assert_eq!(depths_from_rates(&u, 2.0, 0.5).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn depths_are_positively_homogeneous() {
        let e = 1.0;
        let u0 = rates(&[-0.15, 0.05, -0.2, 0.25]);
        let base = depths_from_rates(&u0, e, 0.4).unwrap();
        for beta in [0.5, 2.0] {
            let scaled = depths_from_rates(&u0.scaled(beta), e, 0.4).unwrap();
            let expect: Vec<f64> = base.iter().map(|v| v * beta).collect();
            assert_close(&scaled, &expect, 1e-12);
        }
    }

    #[test]
    fn infeasible_rates_are_rejected() {
        let u = rates(&[2.0, -2.0]);
        assert!(matches!(
            rate_to_depth_operator(&u, 1.0, 0.5),
            Err(RainflowError::OutOfRange { node: 1, .. })
        ));
    }

    #[test]
    fn flat_peak_merges_into_one_extremum() {
        // rise, hold, fall: no zero-depth cycle on the canonical path
        let d = count_cycles(&profile(&[0.2, 0.6, 0.6, 0.1]));
        assert_close(&d.depths, &[0.4, 0.5, 0.0], 1e-12);
        assert_eq!((d.pairings[0].high, d.pairings[0].low), (1, 0));
        assert_eq!((d.pairings[1].high, d.pairings[1].low), (1, 3));
        // the hold slot is a genuine kink: the peak may sit on node 1 or 2
        let (layouts, complete) = row_layouts(&[0.2, 0.6, 0.6, 0.1]);
        assert!(complete);
        assert_eq!(layouts.len(), 2);
    }

    #[test]
    fn snapping_merges_close_values_only() {
        let x = [0.2, 0.5 + 1e-8, 0.5, 0.8, 0.3];
        assert_eq!(snap_near_ties(&x, 1e-7), vec![0.2, 0.5 + 5e-9, 0.5 + 5e-9, 0.8, 0.3]);
        assert_eq!(snap_near_ties(&x, 1e-9), x.to_vec());
    }

    #[test]
    fn full_cycles_come_in_equal_pairs() {
        let x = [0.5, 0.9, 0.3, 0.7, 0.4, 0.8, 0.1, 0.5];
        let d = count_cycles(&profile(&x));
        let mut k = 0;
        while k < d.pairings.len() && d.pairings[k].kind == HalfCycleKind::FullCycle {
            assert_eq!(d.depths[k], d.depths[k + 1]);
            k += 2;
        }
        assert!(k > 0);
        let mtx = d.incidence.transpose() * DVector::from_column_slice(&x);
        assert_close(mtx.as_slice(), &d.depths, 1e-12);
    }
}
