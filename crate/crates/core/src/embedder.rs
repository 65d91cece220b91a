//! Selection of concrete watermark positions and replacement states for the
//! next sharing. Independent data gets uniform seeded picks within each
//! count bucket; correlated data is marked by presence probability with
//! recursive propagation through correlated partners so the inserted marks
//! respect the pairwise structure of the data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationSolution;
use crate::data::{Sequence, SharingLedger, SpId, WatermarkEntry, WatermarkPattern};
use crate::error::{Result, SeqmarkError};

/// One thresholded conditional: Pr(x_i = a | x_j = b) = p.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub i: usize,
    pub a: u8,
    pub j: usize,
    pub b: u8,
    pub p: f64,
}

/// Pairwise conditional probabilities above an inclusion threshold.
///
/// Asymmetric by design: storing Pr(x_i=a | x_j=b) says nothing about the
/// reverse direction.
#[derive(Debug, Clone, Default)]
pub struct CorrelationModel {
    pub tau: f64,
    entries: Vec<CorrelationEntry>,
    // (target, target state) -> [(source, source state, p)]
    by_target: BTreeMap<(usize, u8), Vec<(usize, u8, f64)>>,
    // (source, source state) -> [(target, target state, p)]
    by_source: BTreeMap<(usize, u8), Vec<(usize, u8, f64)>>,
}

impl CorrelationModel {
    pub fn new(tau: f64, entries: Vec<CorrelationEntry>) -> Result<Self> {
        for e in &entries {
            if e.p <= tau || e.p > 1.0 {
                return Err(SeqmarkError::Config(format!(
                    "correlation Pr(x_{}={} | x_{}={}) = {} outside ({tau}, 1]",
                    e.i, e.a, e.j, e.b, e.p
                )));
            }
            if e.i == e.j {
                return Err(SeqmarkError::Config(format!(
                    "self correlation at position {}",
                    e.i
                )));
            }
        }
        let mut by_target: BTreeMap<(usize, u8), Vec<(usize, u8, f64)>> = BTreeMap::new();
        let mut by_source: BTreeMap<(usize, u8), Vec<(usize, u8, f64)>> = BTreeMap::new();
        for e in &entries {
            by_target.entry((e.i, e.a)).or_default().push((e.j, e.b, e.p));
            by_source.entry((e.j, e.b)).or_default().push((e.i, e.a, e.p));
        }
        for v in by_target.values_mut() {
            v.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        }
        for v in by_source.values_mut() {
            v.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        }
        Ok(Self {
            tau,
            entries,
            by_target,
            by_source,
        })
    }

    pub fn entries(&self) -> &[CorrelationEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sources supporting (or contradicting) `state` at `target`.
    pub fn sources_for(&self, target: usize, state: u8) -> &[(usize, u8, f64)] {
        self.by_target
            .get(&(target, state))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Targets whose desired state follows from `source` being in `state`.
    pub fn targets_of(&self, source: usize, state: u8) -> &[(usize, u8, f64)] {
        self.by_source
            .get(&(source, state))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &ModelFile {
            tau: self.tau,
            entries: self.entries.clone(),
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let parsed: ModelFile = serde_json::from_reader(file)?;
        CorrelationModel::new(parsed.tau, parsed.entries)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    tau: f64,
    entries: Vec<CorrelationEntry>,
}

/// Empirical conditional frequencies Pr(x_i=a | x_j=b) over the corpus,
/// kept when they exceed `tau` and the conditioning count is positive.
pub fn estimate_correlations(corpus: &[Sequence], tau: f64) -> Result<CorrelationModel> {
    if corpus.len() < 2 {
        return Err(SeqmarkError::EmptyCorpus);
    }
    let l = corpus[0].len();
    let m = corpus[0].m() as usize;
    for rec in corpus {
        if rec.len() != l {
            return Err(SeqmarkError::RaggedCorpus(l, rec.len()));
        }
    }
    // marginal[j][b] and joint[(i,j)][a][b] counts
    let mut marginal = vec![vec![0u32; m]; l];
    for rec in corpus {
        for (j, &b) in rec.points().iter().enumerate() {
            marginal[j][b as usize] += 1;
        }
    }
    let mut entries = Vec::new();
    let mut joint = vec![0u32; m * m];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            joint.iter_mut().for_each(|v| *v = 0);
            for rec in corpus {
                let a = rec.get(i) as usize;
                let b = rec.get(j) as usize;
                joint[a * m + b] += 1;
            }
            for b in 0..m {
                let cond = marginal[j][b];
                if cond == 0 {
                    continue;
                }
                for a in 0..m {
                    let p = joint[a * m + b] as f64 / cond as f64;
                    if p > tau && p <= 1.0 {
                        entries.push(CorrelationEntry {
                            i,
                            a: a as u8,
                            j,
                            b: b as u8,
                            p,
                        });
                    }
                }
            }
        }
    }
    CorrelationModel::new(tau, entries)
}

/// Product of Pr(x_index = state | x_j = current state of j) over every
/// stored source whose conditioning state matches the sequence right now.
/// No matching sources means an empty product, i.e. 1.
pub fn presence_probability(
    seq: &Sequence,
    index: usize,
    state: u8,
    model: &CorrelationModel,
) -> f64 {
    let mut p = 1.0;
    for &(j, b, pr) in model.sources_for(index, state) {
        if seq.get(j) == b {
            p *= pr;
        }
    }
    p
}

/// Fixed replacement state used when a point is watermarked.
/// Binary data flips; three-state data maps 0->1, 1->2, 2->1; anything wider
/// steps to the next state.
pub fn predetermined_target(m: u8, state: u8) -> u8 {
    match m {
        2 => 1 - state,
        3 => [1u8, 2, 1][state as usize],
        _ => (state + 1) % m,
    }
}

fn bucket_of(ledger: &SharingLedger, pos: usize) -> usize {
    ledger.per_point_counts()[pos] as usize
}

fn validate_alloc(
    ledger: &SharingLedger,
    index_set: &[usize],
    y: &[u64],
) -> Result<Vec<Vec<usize>>> {
    let h = ledger.h();
    if y.len() != h + 1 {
        return Err(SeqmarkError::Infeasible(format!(
            "allocation has {} buckets, ledger has {} sharings",
            y.len(),
            h + 1
        )));
    }
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); h + 1];
    let mut seen = BTreeSet::new();
    for &pos in index_set {
        if pos >= ledger.base().len() {
            return Err(SeqmarkError::IndexOutOfRange {
                index: pos,
                len: ledger.base().len(),
            });
        }
        if seen.insert(pos) {
            buckets[bucket_of(ledger, pos)].push(pos);
        }
    }
    for (i, &need) in y.iter().enumerate() {
        if buckets[i].len() < need as usize {
            return Err(SeqmarkError::Infeasible(format!(
                "bucket {i} holds {} shared points, allocation wants {need}",
                buckets[i].len()
            )));
        }
    }
    Ok(buckets)
}

/// Uniform seeded choice of `y_i` points from each bucket; every chosen
/// point is moved to `target_rule(current)`.
pub fn embed_uncorrelated(
    ledger: &SharingLedger,
    index_set: &[usize],
    alloc: &AllocationSolution,
    target_rule: &dyn Fn(u8) -> u8,
    sp_id: SpId,
    rng_seed: u64,
) -> Result<(Sequence, WatermarkPattern)> {
    let mut buckets = validate_alloc(ledger, index_set, &alloc.y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let base = ledger.base();
    let mut entries = Vec::with_capacity(alloc.w() as usize);
    for (i, bucket) in buckets.iter_mut().enumerate() {
        bucket.sort_unstable();
        bucket.shuffle(&mut rng);
        for &pos in bucket.iter().take(alloc.y[i] as usize) {
            let from = base.get(pos);
            let to = target_rule(from);
            if to == from {
                return Err(SeqmarkError::InvalidPattern(format!(
                    "target rule keeps state {from} at position {pos}"
                )));
            }
            if to >= base.m() {
                return Err(SeqmarkError::StateOutOfRange {
                    state: to as i64,
                    m: base.m(),
                    at: None,
                });
            }
            entries.push(WatermarkEntry {
                index: pos,
                from,
                to,
            });
        }
    }
    let pattern = WatermarkPattern::new(sp_id, entries)?;
    let marked = base.with_changes(pattern.entries().iter().map(|e| (e.index, e.to)));
    Ok((marked, pattern))
}

/// Correlation-preserving embedding.
///
/// Buckets are visited in increasing multiplicity. Within a bucket, points
/// are processed by ascending presence probability of their current state
/// (ties by position). Each processed point is moved to the state with the
/// highest presence probability; the change then propagates depth-first to
/// every partner whose desired state follows from the new value, budget and
/// index set permitting. If a full pass leaves budget unspent, a second pass
/// uses the runner-up state instead. Budget still left after that is an
/// error rather than a silently short pattern.
pub fn embed_correlated(
    ledger: &SharingLedger,
    index_set: &[usize],
    y: &[u64],
    model: &CorrelationModel,
    w: u64,
    sp_id: SpId,
) -> Result<(Sequence, WatermarkPattern)> {
    let buckets = validate_alloc(ledger, index_set, y)?;
    if y.iter().sum::<u64>() != w {
        return Err(SeqmarkError::Infeasible(format!(
            "bucket picks sum to {}, want watermark length {w}",
            y.iter().sum::<u64>()
        )));
    }
    let base = ledger.base();
    let m = base.m();
    let in_set: BTreeSet<usize> = index_set.iter().copied().collect();

    let mut work = base.clone();
    let mut budget: Vec<u64> = y.to_vec();
    let mut remaining = w;
    let mut changed: BTreeSet<usize> = BTreeSet::new();

    // A state only competes when at least one stored correlation currently
    // fires for it; an empty product is no evidence, not certainty. States
    // are ordered by (presence desc, state asc).
    let supported_states = |work: &Sequence, pos: usize| -> Vec<(f64, u8)> {
        let mut scored: Vec<(f64, u8)> = (0..m)
            .filter(|&s| {
                model
                    .sources_for(pos, s)
                    .iter()
                    .any(|&(j, b, _)| work.get(j) == b)
            })
            .map(|s| (presence_probability(work, pos, s, model), s))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored
    };
    // First pass moves points to their best-supported state. The second pass
    // spends leftover budget: runner-up supported state when one exists,
    // otherwise the plain predetermined flip (whose cascade still drags
    // correlated partners along).
    let desired_state = |work: &Sequence, pos: usize, rank: usize| -> Option<u8> {
        let scored = supported_states(work, pos);
        if rank == 0 {
            scored.first().map(|&(_, s)| s)
        } else {
            let current = work.get(pos);
            scored
                .iter()
                .map(|&(_, s)| s)
                .find(|&s| s != current)
                .or(Some(predetermined_target(m, current)))
        }
    };

    fn insert_watermark(
        pos: usize,
        desired: u8,
        work: &mut Sequence,
        ledger: &SharingLedger,
        model: &CorrelationModel,
        in_set: &BTreeSet<usize>,
        budget: &mut [u64],
        remaining: &mut u64,
        changed: &mut BTreeSet<usize>,
    ) {
        if *remaining == 0 || changed.contains(&pos) || !in_set.contains(&pos) {
            return;
        }
        if work.get(pos) == desired {
            return;
        }
        let t = ledger.per_point_counts()[pos] as usize;
        if budget[t] == 0 {
            return;
        }
        *work = work.with_changes([(pos, desired)]);
        budget[t] -= 1;
        *remaining -= 1;
        changed.insert(pos);
        // partners of the new state, ascending position
        let partners: Vec<(usize, u8, f64)> = model.targets_of(pos, desired).to_vec();
        for (c, want, _) in partners {
            if *remaining == 0 {
                return;
            }
            insert_watermark(c, want, work, ledger, model, in_set, budget, remaining, changed);
        }
    }

    for rank in 0..2usize {
        if remaining == 0 {
            break;
        }
        for (t, bucket) in buckets.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            if budget[t] == 0 {
                continue;
            }
            // snapshot ordering by current presence
            let mut ordered: Vec<(f64, usize)> = bucket
                .iter()
                .filter(|p| !changed.contains(p))
                .map(|&p| (presence_probability(&work, p, work.get(p), model), p))
                .collect();
            ordered.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for (_, pos) in ordered {
                if remaining == 0 || budget[t] == 0 {
                    break;
                }
                if changed.contains(&pos) {
                    continue;
                }
                let Some(target) = desired_state(&work, pos, rank) else {
                    continue;
                };
                insert_watermark(
                    pos,
                    target,
                    &mut work,
                    ledger,
                    model,
                    &in_set,
                    &mut budget,
                    &mut remaining,
                    &mut changed,
                );
            }
        }
    }

    if remaining > 0 {
        return Err(SeqmarkError::InsufficientWatermarkablePoints {
            requested: w,
            placed: w - remaining,
        });
    }

    let entries: Vec<WatermarkEntry> = changed
        .iter()
        .map(|&pos| WatermarkEntry {
            index: pos,
            from: base.get(pos),
            to: work.get(pos),
        })
        .collect();
    let pattern = WatermarkPattern::new(sp_id, entries)?;
    Ok((work, pattern))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{schedule_allocation, solve_allocation};
    use crate::data::counts;

    fn uniform_ledger(l: usize, m: u8, seed: u64) -> SharingLedger {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Sequence::new((0..l).map(|_| rng.random_range(0..m)).collect(), m).unwrap();
        SharingLedger::new(base)
    }

    #[test]
    fn presence_empty_model_is_one() {
        let seq = Sequence::new(vec![0, 1, 2], 3).unwrap();
        let model = CorrelationModel::new(0.9, vec![]).unwrap();
        assert_eq!(presence_probability(&seq, 0, 2, &model), 1.0);
    }

    #[test]
    fn presence_is_product_of_matching_sources() {
        let seq = Sequence::new(vec![0, 1, 2], 3).unwrap();
        let model = CorrelationModel::new(
            0.9,
            vec![
                CorrelationEntry { i: 0, a: 2, j: 1, b: 1, p: 0.95 },
                CorrelationEntry { i: 0, a: 2, j: 2, b: 2, p: 0.92 },
                CorrelationEntry { i: 0, a: 2, j: 2, b: 0, p: 0.99 }, // source mismatch
            ],
        )
        .unwrap();
        let p = presence_probability(&seq, 0, 2, &model);
        assert!((p - 0.95 * 0.92).abs() < 1e-12);
        assert!((p - 0.874).abs() < 5e-4);
    }

    #[test]
    fn presence_matches_full_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = 40;
        let seq = Sequence::new((0..l).map(|_| rng.random_range(0..3u8)).collect(), 3).unwrap();
        let mut entries = Vec::new();
        for _ in 0..60 {
            let i = rng.random_range(0..l);
            let mut j = rng.random_range(0..l);
            if j == i {
                j = (j + 1) % l;
            }
            entries.push(CorrelationEntry {
                i,
                a: rng.random_range(0..3),
                j,
                b: rng.random_range(0..3),
                p: 0.9 + rng.random_range(0.0..0.1),
            });
        }
        // deduplicate on (i,a,j,b) so the model is a function
        entries.sort_by(|x, y| (x.i, x.a, x.j, x.b).partial_cmp(&(y.i, y.a, y.j, y.b)).unwrap());
        entries.dedup_by_key(|e| (e.i, e.a, e.j, e.b));
        let model = CorrelationModel::new(0.89, entries.clone()).unwrap();
        for pos in 0..l {
            for s in 0..3u8 {
                let fast = presence_probability(&seq, pos, s, &model);
                let slow: f64 = entries
                    .iter()
                    .filter(|e| e.i == pos && e.a == s && seq.get(e.j) == e.b)
                    .map(|e| e.p)
                    .product();
                assert!((fast - slow).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimate_finds_perfect_column_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut corpus = Vec::new();
        for _ in 0..50 {
            let mut points: Vec<u8> = (0..8).map(|_| rng.random_range(0..3)).collect();
            points[2] = points[5];
            corpus.push(Sequence::new(points, 3).unwrap());
        }
        let model = estimate_correlations(&corpus, 0.9).unwrap();
        for b in 0..3u8 {
            let sources = model.sources_for(2, b);
            assert!(
                sources.iter().any(|&(j, sb, p)| j == 5 && sb == b && p == 1.0),
                "missing Pr(x_2={b} | x_5={b}) = 1"
            );
        }
    }

    #[test]
    fn estimate_with_impossible_threshold_is_empty() {
        let corpus: Vec<Sequence> = (0..5)
            .map(|k| Sequence::new(vec![k as u8 % 2, 1, 0, 1], 2).unwrap())
            .collect();
        let model = estimate_correlations(&corpus, 1.1).unwrap();
        assert!(model.is_empty());
    }

    #[test]
    fn estimate_matches_hand_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corpus: Vec<Sequence> = (0..99)
            .map(|_| {
                Sequence::new((0..20).map(|_| rng.random_range(0..3u8)).collect(), 3).unwrap()
            })
            .collect();
        let tau = 0.3;
        let model = estimate_correlations(&corpus, tau).unwrap();
        // oracle: recount a handful of pairs directly
        for (i, j) in [(0usize, 1usize), (3, 17), (9, 2), (14, 14), (5, 19)] {
            if i == j {
                continue;
            }
            for a in 0..3u8 {
                for b in 0..3u8 {
                    let cond = corpus.iter().filter(|r| r.get(j) == b).count();
                    if cond == 0 {
                        continue;
                    }
                    let both = corpus
                        .iter()
                        .filter(|r| r.get(j) == b && r.get(i) == a)
                        .count();
                    let p = both as f64 / cond as f64;
                    let stored = model
                        .sources_for(i, a)
                        .iter()
                        .find(|&&(src, sb, _)| src == j && sb == b)
                        .map(|&(_, _, p)| p);
                    if p > tau {
                        assert!((stored.unwrap() - p).abs() < 1e-12);
                    } else {
                        assert!(stored.is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn uncorrelated_binary_flip_changes_exactly_w() {
        let ledger = uniform_ledger(60, 2, 1);
        let all: Vec<usize> = (0..60).collect();
        let alloc = solve_allocation(&counts(&ledger), 7).unwrap();
        let (marked, pattern) =
            embed_uncorrelated(&ledger, &all, &alloc, &|s| 1 - s, 1, 42).unwrap();
        assert_eq!(pattern.w(), 7);
        let dist = marked
            .points()
            .iter()
            .zip(ledger.base().points())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(dist, 7);
    }

    #[test]
    fn uncorrelated_same_seed_same_pattern() {
        let ledger = uniform_ledger(50, 3, 2);
        let all: Vec<usize> = (0..50).collect();
        let alloc = solve_allocation(&counts(&ledger), 5).unwrap();
        let rule = |s: u8| predetermined_target(3, s);
        let (_, p1) = embed_uncorrelated(&ledger, &all, &alloc, &rule, 1, 7).unwrap();
        let (_, p2) = embed_uncorrelated(&ledger, &all, &alloc, &rule, 1, 7).unwrap();
        assert_eq!(p1, p2);
        let (_, p3) = embed_uncorrelated(&ledger, &all, &alloc, &rule, 1, 8).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn uncorrelated_recount_matches_next_counts() {
        let mut ledger = uniform_ledger(80, 3, 3);
        let all: Vec<usize> = (0..80).collect();
        let rule = |s: u8| predetermined_target(3, s);
        for sp in 1..=4u32 {
            let hist = counts(&ledger);
            let alloc = schedule_allocation(&hist, 9).unwrap();
            let (_, pattern) =
                embed_uncorrelated(&ledger, &all, &alloc, &rule, sp, sp as u64).unwrap();
            ledger.record_sharing(sp, all.clone(), pattern).unwrap();
            assert_eq!(counts(&ledger), alloc.next_counts);
        }
    }

    #[test]
    fn uncorrelated_rejects_identity_rule() {
        let ledger = uniform_ledger(20, 2, 4);
        let all: Vec<usize> = (0..20).collect();
        let alloc = solve_allocation(&counts(&ledger), 2).unwrap();
        assert!(embed_uncorrelated(&ledger, &all, &alloc, &|s| s, 1, 0).is_err());
    }

    #[test]
    fn correlated_empty_model_places_exactly_w() {
        let ledger = uniform_ledger(40, 3, 6);
        let all: Vec<usize> = (0..40).collect();
        let model = CorrelationModel::new(0.9, vec![]).unwrap();
        let (marked, pattern) = embed_correlated(&ledger, &all, &[6], &model, 6, 1).unwrap();
        assert_eq!(pattern.w(), 6);
        for e in pattern.entries() {
            assert_ne!(e.from, e.to);
            assert_eq!(marked.get(e.index), e.to);
        }
    }

    #[test]
    fn correlated_cascade_follows_toy_example() {
        // five binary points, change of x_0 pulls x_1 along, x_2 already sits
        // right, x_1's change pulls x_4, x_3 already sits right
        let base = Sequence::new(vec![0, 0, 1, 1, 0], 2).unwrap();
        let ledger = SharingLedger::new(base);
        let entries = vec![
            CorrelationEntry { i: 0, a: 0, j: 3, b: 1, p: 0.91 },
            CorrelationEntry { i: 0, a: 1, j: 3, b: 1, p: 0.99 },
            CorrelationEntry { i: 1, a: 1, j: 0, b: 1, p: 0.95 },
            CorrelationEntry { i: 2, a: 1, j: 0, b: 1, p: 0.95 },
            CorrelationEntry { i: 3, a: 1, j: 1, b: 1, p: 0.95 },
            CorrelationEntry { i: 4, a: 1, j: 1, b: 1, p: 0.95 },
        ];
        let model = CorrelationModel::new(0.9, entries).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let (marked, pattern) = embed_correlated(&ledger, &all, &[3], &model, 3, 1).unwrap();
        let changed: Vec<usize> = pattern.entries().iter().map(|e| e.index).collect();
        assert_eq!(changed, vec![0, 1, 4]);
        assert_eq!(marked.points(), &[1, 1, 1, 1, 1]);
    }

    #[test]
    fn correlated_bucket_decrements_sum_to_w() {
        let mut ledger = uniform_ledger(60, 3, 8);
        let all: Vec<usize> = (0..60).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut entries = Vec::new();
        for k in 0..10usize {
            let (i, j) = (2 * k, 2 * k + 1);
            for b in 0..3u8 {
                entries.push(CorrelationEntry {
                    i,
                    a: predetermined_target(3, b),
                    j,
                    b,
                    p: 0.93 + 0.01 * (rng.random_range(0..5) as f64),
                });
            }
        }
        let model = CorrelationModel::new(0.9, entries).unwrap();
        for sp in 1..=3u32 {
            let hist = counts(&ledger);
            let alloc = schedule_allocation(&hist, 8).unwrap();
            let (_, pattern) =
                embed_correlated(&ledger, &all, &alloc.y, &model, 8, sp).unwrap();
            assert_eq!(pattern.w(), 8);
            ledger.record_sharing(sp, all.clone(), pattern).unwrap();
            assert_eq!(counts(&ledger), alloc.next_counts);
        }
    }

    #[test]
    fn model_roundtrip() {
        let model = CorrelationModel::new(
            0.9,
            vec![CorrelationEntry { i: 1, a: 0, j: 4, b: 2, p: 0.97 }],
        )
        .unwrap();
        let dir = std::env::temp_dir().join("seqmark-embed-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        model.save(&path).unwrap();
        let loaded = CorrelationModel::load(&path).unwrap();
        assert_eq!(loaded.tau, model.tau);
        assert_eq!(loaded.entries(), model.entries());
    }
}
