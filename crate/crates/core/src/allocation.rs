//! Per-sharing decision of how many points from each watermark-count bucket
//! receive a new watermark.
//!
//! Two strategies live here. `solve_allocation` minimizes the cross-copy
//! inference objective outright (exhaustive search when the candidate count
//! permits, steepest-descent local search otherwise). `schedule_allocation`
//! implements the damped re-marking schedule the sharing pipeline uses: each
//! already-marked bucket is re-marked at a rate that decays with the number
//! of completed sharings, the remainder goes to fresh points. The schedule
//! keeps successive patterns well separated, which the owner-side attribution
//! depends on, while still re-marking enough points to confound cross-copy
//! comparison.

use serde::{Deserialize, Serialize};

use crate::data::CountHistogram;
use crate::error::{Result, SeqmarkError};

/// Picks per bucket (`y`), leave-alone counts (`y_hat`), the resulting
/// histogram, and the inference objective it yields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    pub y: Vec<u64>,
    pub y_hat: Vec<u64>,
    pub next_counts: CountHistogram,
    pub log10_objective: f64,
}

impl AllocationSolution {
    fn from_picks(hist: &CountHistogram, y: Vec<u64>) -> Self {
        let y_hat: Vec<u64> = hist.n.iter().zip(&y).map(|(n, y)| n - y).collect();
        let next_counts = apply_picks(hist, &y);
        let log10_objective = objective_log10(&next_counts);
        AllocationSolution {
            y,
            y_hat,
            next_counts,
            log10_objective,
        }
    }

    pub fn w(&self) -> u64 {
        self.y.iter().sum()
    }
}

/// Histogram after one more sharing with picks `y`:
/// fresh bucket keeps what was skipped, every pick moves up one bucket.
pub fn apply_picks(hist: &CountHistogram, y: &[u64]) -> CountHistogram {
    let h = hist.h;
    debug_assert_eq!(y.len(), h + 1);
    let mut n = vec![0u64; h + 2];
    n[0] = hist.n[0] - y[0];
    for i in 1..=h {
        n[i] = y[i - 1] + (hist.n[i] - y[i]);
    }
    n[h + 1] = y[h];
    CountHistogram { h: h + 1, n }
}

/// Log10 of the product over buckets of (n_i / (n_i + n_{H-i}))^{n_i}.
///
/// Empty buckets contribute nothing; a pair of empty buckets counts as a
/// factor of one.
pub fn objective_log10(hist: &CountHistogram) -> f64 {
    let cap = hist.h;
    let mut total = 0.0;
    for (i, &ni) in hist.n.iter().enumerate() {
        if ni == 0 {
            continue;
        }
        let pair = hist.n[cap - i];
        total += ni as f64 * ((ni as f64) / ((ni + pair) as f64)).log10();
    }
    total
}

fn check_feasible(hist: &CountHistogram, w: u64) -> Result<()> {
    let total = hist.len_total();
    if w == 0 {
        return Err(SeqmarkError::Infeasible("watermark length must be positive".into()));
    }
    if w > total {
        return Err(SeqmarkError::Infeasible(format!(
            "watermark length {w} exceeds data length {total}"
        )));
    }
    if hist.n[0] == 0 {
        return Err(SeqmarkError::Infeasible(
            "no never-watermarked points left, pattern uniqueness cannot be maintained".into(),
        ));
    }
    Ok(())
}

/// Number of integer pick vectors with the given sum and per-bucket caps.
/// Saturates at `limit`; used to decide between exhaustive and heuristic search.
fn candidate_count(hist: &CountHistogram, w: u64, limit: u128) -> u128 {
    // dp over buckets of "ways to spend exactly s"
    let w = w as usize;
    let mut ways = vec![0u128; w + 1];
    ways[0] = 1;
    for (i, &cap) in hist.n.iter().enumerate() {
        let lo = if i == 0 { 1usize } else { 0usize };
        let cap = cap.min(w as u64) as usize;
        if lo > cap {
            return 0;
        }
        let mut next = vec![0u128; w + 1];
        for (s, &v) in ways.iter().enumerate() {
            if v == 0 {
                continue;
            }
            for pick in lo..=cap {
                if s + pick > w {
                    break;
                }
                next[s + pick] = (next[s + pick] + v).min(limit);
            }
        }
        ways = next;
    }
    ways[w]
}

const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// Feasible picks minimizing the inference objective.
///
/// Exhaustive when at most a million candidates exist, otherwise
/// steepest-descent local search over unit transfers from a greedy start
/// plus 32 seeded random restarts. Ties break toward the lexicographically
/// smallest pick vector.
pub fn solve_allocation(hist: &CountHistogram, w: u64) -> Result<AllocationSolution> {
    check_feasible(hist, w)?;
    if hist.h == 0 {
        return Ok(AllocationSolution::from_picks(hist, vec![w]));
    }
    if candidate_count(hist, w, EXHAUSTIVE_LIMIT) < EXHAUSTIVE_LIMIT {
        exhaustive_minimum(hist, w, EXHAUSTIVE_LIMIT)
    } else {
        Ok(local_search_minimum(hist, w))
    }
}

/// Exhaustively enumerates every feasible pick vector and returns the global
/// optimum. Used both as the small-instance branch of the solver and, via
/// [`brute_force_allocation`], as the independent test oracle.
fn exhaustive_minimum(hist: &CountHistogram, w: u64, guard: u128) -> Result<AllocationSolution> {
    let h = hist.h;
    let mut best: Option<(f64, Vec<u64>)> = None;
    let mut y = vec![0u64; h + 1];
    let mut visited: u128 = 0;

    // depth-first over buckets, pruning on remaining capacity
    fn rec(
        hist: &CountHistogram,
        y: &mut Vec<u64>,
        bucket: usize,
        remaining: u64,
        suffix_cap: &[u64],
        best: &mut Option<(f64, Vec<u64>)>,
        visited: &mut u128,
        guard: u128,
    ) -> Result<()> {
        let h = hist.h;
        if bucket > h {
            if remaining == 0 {
                *visited += 1;
                if *visited > guard {
                    return Err(SeqmarkError::InstanceTooLarge(format!(
                        "more than {guard} feasible pick vectors"
                    )));
                }
                let cand = apply_picks(hist, y);
                let obj = objective_log10(&cand);
                let better = match best {
                    None => true,
                    Some((b, by)) => obj < *b - 1e-12 || (obj < *b + 1e-12 && y[..] < by[..]),
                };
                if better {
                    *best = Some((obj, y.clone()));
                }
            }
            return Ok(());
        }
        let lo = if bucket == 0 { 1 } else { 0 };
        let hi = hist.n[bucket].min(remaining);
        let tail = if bucket + 1 <= h { suffix_cap[bucket + 1] } else { 0 };
        for pick in lo..=hi {
            if remaining - pick > tail {
                continue; // later buckets cannot absorb the rest
            }
            y[bucket] = pick;
            rec(hist, y, bucket + 1, remaining - pick, suffix_cap, best, visited, guard)?;
        }
        y[bucket] = 0;
        Ok(())
    }

    // suffix_cap[i] = total capacity of buckets i..=h
    let mut suffix_cap = vec![0u64; h + 2];
    for i in (0..=h).rev() {
        suffix_cap[i] = suffix_cap[i + 1] + hist.n[i];
    }
    rec(hist, &mut y, 0, w, &suffix_cap, &mut best, &mut visited, guard)?;
    let (_, y) = best.ok_or_else(|| SeqmarkError::Infeasible("no feasible pick vector".into()))?;
    Ok(AllocationSolution::from_picks(hist, y))
}

/// Steepest-descent local search over unit transfers, greedy start plus
/// seeded random restarts, deterministic best-then-lexicographic reduction.
fn local_search_minimum(hist: &CountHistogram, w: u64) -> AllocationSolution {
    use rand::prelude::*;
    let h = hist.h;
    let descend = |mut y: Vec<u64>| -> (f64, Vec<u64>) {
        let mut obj = objective_log10(&apply_picks(hist, &y));
        loop {
            let mut best_move: Option<(f64, usize, usize)> = None;
            for from in 0..=h {
                let lo: u64 = if from == 0 { 1 } else { 0 };
                if y[from] <= lo {
                    continue;
                }
                for to in 0..=h {
                    if to == from || y[to] >= hist.n[to] {
                        continue;
                    }
                    y[from] -= 1;
                    y[to] += 1;
                    let cand = objective_log10(&apply_picks(hist, &y));
                    y[from] += 1;
                    y[to] -= 1;
                    if cand < obj - 1e-12
                        && best_move.map(|(b, _, _)| cand < b - 1e-12).unwrap_or(true)
                    {
                        best_move = Some((cand, from, to));
                    }
                }
            }
            match best_move {
                Some((cand, from, to)) => {
                    y[from] -= 1;
                    y[to] += 1;
                    obj = cand;
                }
                None => return (obj, y),
            }
        }
    };

    // greedy start: fill buckets from the top down (re-mark the most-marked points first)
    let mut greedy = vec![0u64; h + 1];
    let mut rem = w - 1;
    greedy[0] = 1;
    for i in (0..=h).rev() {
        let cap = hist.n[i] - greedy[i];
        let take = cap.min(rem);
        greedy[i] += take;
        rem -= take;
        if rem == 0 {
            break;
        }
    }
    let mut best = descend(greedy);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5e9_a11c);
    for _ in 0..32 {
        let mut y = vec![0u64; h + 1];
        let mut rem = w;
        y[0] = 1;
        rem -= 1;
        // random feasible completion
        let mut order: Vec<usize> = (0..=h).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            if rem == 0 {
                break;
            }
            let cap = hist.n[i] - y[i];
            if cap == 0 {
                continue;
            }
            let take = rng.random_range(0..=cap.min(rem));
            y[i] += take;
            rem -= take;
        }
        // dump any remainder into whatever still has room
        if rem > 0 {
            for i in 0..=h {
                let cap = hist.n[i] - y[i];
                let take = cap.min(rem);
                y[i] += take;
                rem -= take;
                if rem == 0 {
                    break;
                }
            }
        }
        let cand = descend(y);
        if cand.0 < best.0 - 1e-12 || ((cand.0 - best.0).abs() <= 1e-12 && cand.1 < best.1) {
            best = cand;
        }
    }
    AllocationSolution::from_picks(hist, best.1)
}

/// Exhaustive oracle: global optimum by full enumeration, refusing instances
/// with more than ten million candidates.
pub fn brute_force_allocation(hist: &CountHistogram, w: u64) -> Result<AllocationSolution> {
    const GUARD: u128 = 10_000_000;
    check_feasible(hist, w)?;
    if candidate_count(hist, w, GUARD + 1) >= GUARD {
        return Err(SeqmarkError::InstanceTooLarge(format!(
            "brute force refused, more than {GUARD} candidates"
        )));
    }
    exhaustive_minimum(hist, w, GUARD)
}

const REMARK_BASE: f64 = 0.27;
const REMARK_DECAY: f64 = 0.65;
const REMARK_FLOOR: f64 = 0.085;

fn round_half_up(v: f64) -> u64 {
    (v + 0.5).floor().max(0.0) as u64
}

/// Damped re-marking schedule used by the sharing pipeline.
///
/// At the h-th re-sharing every already-marked bucket is re-marked at rate
/// `max(0.085, 0.27 / h^0.65)`; whatever remains of the budget goes to fresh
/// points. Integer rounding is repaired round-robin so the budget is met
/// exactly and at least one fresh point is always marked.
pub fn schedule_allocation(hist: &CountHistogram, w: u64) -> Result<AllocationSolution> {
    check_feasible(hist, w)?;
    let h = hist.h;
    if h == 0 {
        return Ok(AllocationSolution::from_picks(hist, vec![w]));
    }
    let q = REMARK_FLOOR.max(REMARK_BASE / (h as f64).powf(REMARK_DECAY));
    let mut yf: Vec<f64> = vec![0.0; h + 1];
    for i in 1..=h {
        yf[i] = q * hist.n[i] as f64;
    }
    let remark_sum: f64 = yf.iter().skip(1).sum();
    let rest = w as f64 - remark_sum;
    if rest < 1.0 {
        // budget smaller than the scheduled re-marks: scale them down,
        // keeping one fresh point
        let scale = (w as f64 - 1.0) / remark_sum.max(1e-12);
        for v in yf.iter_mut().skip(1) {
            *v *= scale;
        }
        yf[0] = 1.0;
    } else {
        yf[0] = rest;
    }
    // Never spend more than half the remaining fresh pool on one sharing, so
    // pattern uniqueness survives long sharing histories on short data. When
    // the cap binds, the re-marking budget is placed unit by unit wherever it
    // lowers the inference objective most.
    let fresh_cap = (hist.n[0] / 2).max(1);
    if yf[0] > fresh_cap as f64 {
        let mut y = vec![0u64; h + 1];
        y[0] = fresh_cap;
        let mut units = w - fresh_cap;
        while units > 0 {
            let mut best: Option<(f64, usize)> = None;
            for i in 1..=h {
                if y[i] < hist.n[i] {
                    y[i] += 1;
                    let obj = objective_log10(&apply_picks(hist, &y));
                    y[i] -= 1;
                    if best.map(|(b, _)| obj < b - 1e-12).unwrap_or(true) {
                        best = Some((obj, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    y[i] += 1;
                    units -= 1;
                }
                None => {
                    return Err(SeqmarkError::Infeasible(format!(
                        "only {} of {w} watermarks placeable",
                        w - units
                    )))
                }
            }
        }
        return Ok(AllocationSolution::from_picks(hist, y));
    }
    let mut y: Vec<u64> = yf
        .iter()
        .enumerate()
        .map(|(i, &v)| round_half_up(v).min(hist.n[i]))
        .collect();
    if hist.n[0] >= 1 && y[0] < 1 {
        y[0] = 1;
    }
    // round-robin repair to hit the budget exactly
    let mut diff: i64 = w as i64 - y.iter().sum::<u64>() as i64;
    let mut idx = 1usize;
    let mut guard = 0u32;
    while diff != 0 {
        guard += 1;
        if guard > 100_000 {
            return Err(SeqmarkError::Infeasible(
                "schedule repair failed to meet the budget".into(),
            ));
        }
        let i = idx % (h + 1);
        idx += 1;
        if diff > 0 && y[i] < hist.n[i] {
            y[i] += 1;
            diff -= 1;
        } else if diff < 0 && y[i] > if i == 0 { 1 } else { 0 } {
            y[i] -= 1;
            diff += 1;
        }
    }
    Ok(AllocationSolution::from_picks(hist, y))
}

/// Iterate the pipeline schedule from an unmarked sequence of length `l`,
/// returning the histogram after each of the first `h_max` sharings.
pub fn iterate_schedule(l: u64, w: u64, h_max: usize) -> Result<Vec<CountHistogram>> {
    let mut hist = CountHistogram { h: 0, n: vec![l] };
    let mut out = Vec::with_capacity(h_max);
    for _ in 0..h_max {
        let sol = schedule_allocation(&hist, w)?;
        hist = sol.next_counts.clone();
        out.push(hist.clone());
    }
    Ok(out)
}

/// Joint choice of watermark length and allocation minimizing
/// `beta * inference_probability + (1 - beta) * w` over `w in [1, w_max)`.
pub fn solve_allocation_weighted(
    hist: &CountHistogram,
    beta: f64,
    w_max: u64,
) -> Result<(u64, AllocationSolution)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(SeqmarkError::Config(format!("beta {beta} outside [0, 1]")));
    }
    if w_max < 2 {
        return Err(SeqmarkError::Infeasible(
            "w_max must leave room for at least w = 1".into(),
        ));
    }
    let total = hist.len_total();
    let mut best: Option<(f64, u64, AllocationSolution)> = None;
    for w in 1..w_max.min(total + 1) {
        let sol = solve_allocation(hist, w)?;
        let score = beta * 10f64.powf(sol.log10_objective) + (1.0 - beta) * w as f64;
        let better = match &best {
            None => true,
            Some((b, bw, _)) => score < *b - 1e-15 || (score <= *b + 1e-15 && w < *bw),
        };
        if better {
            best = Some((score, w, sol));
        }
    }
    best.map(|(_, w, sol)| (w, sol))
        .ok_or_else(|| SeqmarkError::Infeasible("no feasible watermark length".into()))
}
