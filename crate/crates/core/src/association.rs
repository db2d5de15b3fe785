//! UAV–user assignment.
//!
//! The relaxed problem has a totally unimodular constraint matrix, so a
//! vertex optimum is integral and a rectangular assignment solver returns
//! an LP optimum directly.

use crate::channel::{rate_table_from_sinr, sinr_table, ChannelRealization, PhaseTensor, TransferSet};
use crate::error::{Error, Result};
use crate::scenario::{AssociationMatrix, AssociationMode, Scenario};

pub const MAX_SOLVER_STEPS: usize = 10_000;
pub const BRUTE_FORCE_MAX_UAVS: usize = 4;
pub const BRUTE_FORCE_MAX_USERS: usize = 8;

/// `R[m][k]` for the current phases and positions.
pub fn rate_table(
    scenario: &Scenario,
    phases: &PhaseTensor,
    transfers: &TransferSet,
    channels: &ChannelRealization,
) -> Vec<Vec<f64>> {
    rate_table_from_sinr(&sinr_table(scenario, phases, transfers, channels))
}

/// Maximizes `Σ S r` with row and column sums at most one.
pub fn solve_m_auuop(rates: &[Vec<f64>]) -> Result<AssociationMatrix> {
    let m = rates.len();
    let k = rates.first().map_or(0, Vec::len);
    if rates.iter().flatten().any(|r| !r.is_finite() || *r < 0.0) || rates.iter().any(|r| r.len() != k) {
        return Err(Error::SolverFailure("rate table must be rectangular, finite and nonnegative".into()));
    }
    let mut s = AssociationMatrix::zeros(m, k, AssociationMode::Continuous);
    if m == 0 || k == 0 {
        return Ok(s);
    }
    if m <= k {
        let cost: Vec<Vec<f64>> = rates.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        for (row, col) in hungarian(&cost)?.into_iter().enumerate() {
            s.set(row, col, 1.0);
        }
    } else {
        let cost: Vec<Vec<f64>> = (0..k).map(|j| (0..m).map(|i| -rates[i][j]).collect()).collect();
        for (col, row) in hungarian(&cost)?.into_iter().enumerate() {
            s.set(row, col, 1.0);
        }
    }
    Ok(s)
}

/// Minimum-cost assignment of every row of an `n × m` table (`n ≤ m`) to a
/// distinct column, using the shortest augmenting path method with dual
/// potentials. Returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (1-based, 0 = free); column 0 is the root.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut steps = 0usize;
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            steps += 1;
            if steps > MAX_SOLVER_STEPS {
                return Err(Error::SolverFailure(format!("assignment exceeded {MAX_SOLVER_STEPS} steps")));
            }
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Keeps the largest share per UAV (lowest user index on ties), then
/// resolves users claimed by several UAVs in favour of the larger rate
/// (lowest UAV index on ties).
pub fn binarize(s: &AssociationMatrix, rates: &[Vec<f64>]) -> AssociationMatrix {
    let mut claim: Vec<Option<usize>> = vec![None; s.uavs];
    for (m, c) in claim.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, &v) in s.row(m).iter().enumerate() {
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        *c = best.map(|(k, _)| k);
    }
    let mut served = vec![None; s.uavs];
    for k in 0..s.users {
        let mut winner: Option<usize> = None;
        for m in 0..s.uavs {
            if claim[m] == Some(k) && winner.is_none_or(|w| rates[m][k] > rates[w][k]) {
                winner = Some(m);
            }
        }
        if let Some(m) = winner {
            served[m] = Some(k);
        }
    }
    AssociationMatrix::from_served(s.users, &served)
}

/// Exhaustive maximum over injective partial assignments.
pub fn brute_force_assignment(rates: &[Vec<f64>]) -> Result<(AssociationMatrix, f64)> {
    let m = rates.len();
    let k = rates.first().map_or(0, Vec::len);
    if m > BRUTE_FORCE_MAX_UAVS || k > BRUTE_FORCE_MAX_USERS {
        return Err(Error::SizeLimit { uavs: m, users: k });
    }
    let mut current = vec![None; m];
    let mut best = (vec![None; m], 0.0);
    let mut taken = vec![false; k];
    search(rates, 0, &mut current, &mut taken, 0.0, &mut best);
    Ok((AssociationMatrix::from_served(k, &best.0), best.1))
}

fn search(
    rates: &[Vec<f64>],
    m: usize,
    current: &mut Vec<Option<usize>>,
    taken: &mut Vec<bool>,
    value: f64,
    best: &mut (Vec<Option<usize>>, f64),
) {
    if m == rates.len() {
        if value > best.1 {
            *best = (current.clone(), value);
        }
        return;
    }
    current[m] = None;
    search(rates, m + 1, current, taken, value, best);
    for k in 0..taken.len() {
        if !taken[k] {
            taken[k] = true;
            current[m] = Some(k);
            search(rates, m + 1, current, taken, value + rates[m][k], best);
            taken[k] = false;
        }
    }
    current[m] = None;
}
