//! The attack suite: cross-copy collusion inference with exact or partial
//! knowledge of the sharing count, correlation-based single-copy inference,
//! the combination of both, and the watermark-damaging modifications
//! (majority vote, random noise, partial sharing).

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::objective_log10;
use crate::data::{CountHistogram, Sequence};
use crate::embedder::CorrelationModel;
use crate::error::{Result, SeqmarkError};

/// The states one position shows across the colluders' copies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnObservation {
    pub values: Vec<u8>,
}

impl ColumnObservation {
    /// Copies grouped by displayed value, descending group size,
    /// ties by smaller value.
    pub fn classes(&self) -> Vec<(u8, Vec<usize>)> {
        let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (copy, &v) in self.values.iter().enumerate() {
            groups.entry(v).or_default().push(copy);
        }
        let mut out: Vec<(u8, Vec<usize>)> = groups.into_iter().collect();
        out.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        out
    }
}

/// One claimed watermark point. `detected` marks claims backed by positive
/// correlation evidence as opposed to sampled or blind guesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub copy: usize,
    pub position: usize,
    pub confidence: f64,
    pub detected: bool,
}

/// Attacker output: claimed points in descending confidence order plus
/// truth-referenced tallies when ground truth was supplied.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttackResult {
    pub claims: Vec<Claim>,
    pub success_fraction: Option<f64>,
    pub columns_correct: Option<usize>,
    pub all_columns_correct: Option<bool>,
    /// Count of confidently detected points that are actually watermarked
    /// (correlation attacks only).
    pub correct_detections: Option<usize>,
}

/// Posterior that a position showing a k / (h-k) split carries k watermarks,
/// and the complementary posterior.
pub fn collusion_posterior(k: usize, hist: &CountHistogram) -> (f64, f64) {
    let h = hist.h;
    assert!(k <= h, "split size {k} exceeds sharing count {h}");
    let nk = hist.n[k] as f64;
    let nhk = hist.n[h - k] as f64;
    if nk + nhk == 0.0 {
        return (0.5, 0.5);
    }
    (nk / (nk + nhk), nhk / (nk + nhk))
}

/// One hidden-count hypothesis in the partial-knowledge attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenTerm {
    pub u: usize,
    /// Probability that the hidden sharings contain u marks on this side.
    pub p_u: f64,
    /// Conditional probability of k+u total marks given u.
    pub p_low: f64,
    /// Conditional probability of h+t-k-u total marks given u.
    pub p_high: f64,
}

/// Distribution over hidden-mark counts and count hypotheses when the
/// attackers assume t sharings they cannot see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialPosterior {
    pub k: usize,
    pub h: usize,
    pub t: usize,
    pub terms: Vec<HiddenTerm>,
}

impl PartialPosterior {
    /// Joint weight of (u, low-side) and (u, high-side) hypotheses; sums to one.
    pub fn joint_weights(&self) -> Vec<(usize, f64, f64)> {
        self.terms
            .iter()
            .map(|t| (t.u, t.p_u * t.p_low, t.p_u * t.p_high))
            .collect()
    }

    /// Marginal probability that the observed k-group is the watermarked one.
    pub fn low_side_marginal(&self) -> f64 {
        self.terms.iter().map(|t| t.p_u * t.p_low).sum()
    }
}

/// Weights over hidden-count hypotheses for a column with k observed marks
/// out of h held copies, assuming t further unseen sharings.
pub fn partial_knowledge_posterior(
    k: usize,
    h: usize,
    t: usize,
    hist_ht: &CountHistogram,
) -> Result<PartialPosterior> {
    if hist_ht.h != h + t {
        return Err(SeqmarkError::Config(format!(
            "histogram covers {} sharings, attack assumes {}",
            hist_ht.h,
            h + t
        )));
    }
    if k > h {
        return Err(SeqmarkError::Config(format!("k {k} exceeds h {h}")));
    }
    let n = &hist_ht.n;
    let denom: f64 = (0..=t)
        .map(|j| (n[k + j] + n[h + t - k - j]) as f64)
        .sum();
    let mut terms = Vec::with_capacity(t + 1);
    for u in 0..=t {
        let low = n[k + u] as f64;
        let high = n[h + t - k - u] as f64;
        let (p_u, p_low, p_high) = if denom == 0.0 {
            // nothing observed anywhere: uniform over hypotheses
            (1.0 / (t + 1) as f64, 0.5, 0.5)
        } else if low + high == 0.0 {
            (0.0, 0.5, 0.5)
        } else {
            ((low + high) / denom, low / (low + high), high / (low + high))
        };
        terms.push(HiddenTerm {
            u,
            p_u,
            p_low,
            p_high,
        });
    }
    Ok(PartialPosterior { k, h, t, terms })
}

/// How much the attackers know about the total number of sharings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// The histogram matches the number of copies exactly.
    Exact,
    /// The histogram covers `t` additional sharings the attackers cannot see.
    Partial { t: usize },
}

/// Ground truth handed to an attack for scoring: per copy, the watermarked
/// positions.
pub type CopyTruth = [std::collections::BTreeSet<usize>];

/// Cross-copy collusion attack.
///
/// Every column is grouped into agreement classes; the attacker samples the
/// watermarked class proportionally to the bucket posterior (the published
/// product-form success probability is exactly the chance that every such
/// sample is right). Claims are emitted in descending confidence order until
/// w points are claimed.
pub fn collusion_attack(
    copies: &[Sequence],
    hist: &CountHistogram,
    w: u64,
    mode: AttackMode,
    seed: u64,
    truth: Option<&CopyTruth>,
) -> Result<AttackResult> {
    if copies.is_empty() {
        return Err(SeqmarkError::EmptyCorpus);
    }
    let h = copies.len();
    let l = copies[0].len();
    for c in copies {
        if c.len() != l {
            return Err(SeqmarkError::LengthMismatch {
                left: l,
                right: c.len(),
            });
        }
    }
    let t = match mode {
        AttackMode::Exact => {
            if hist.h != h {
                return Err(SeqmarkError::Config(format!(
                    "exact mode: histogram covers {} sharings, {} copies held",
                    hist.h, h
                )));
            }
            0
        }
        AttackMode::Partial { t } => {
            if hist.h != h + t {
                return Err(SeqmarkError::Config(format!(
                    "partial mode: histogram covers {} sharings, want {}",
                    hist.h,
                    h + t
                )));
            }
            t
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (confidence, position, claimed copies) per column
    let mut column_guesses: Vec<(f64, usize, Vec<usize>)> = Vec::with_capacity(l);
    let mut columns_correct = 0usize;
    let mut all_correct = true;

    for pos in 0..l {
        let obs = ColumnObservation {
            values: copies.iter().map(|c| c.get(pos)).collect(),
        };
        let classes = obs.classes();
        // classes beyond the two largest cannot occur without modification;
        // they are treated as certainly watermarked
        let mut forced: Vec<usize> = Vec::new();
        for (_, members) in classes.iter().skip(2) {
            forced.extend(members.iter().copied());
        }
        let (big, small) = match classes.len() {
            1 => (classes[0].1.clone(), Vec::new()),
            _ => (classes[0].1.clone(), classes[1].1.clone()),
        };
        // hypothesis pair: the small side has k marks, or the big side has h-k
        let k = small.len();
        let (claimed, confidence) = if t == 0 {
            let (p_k, p_hk) = collusion_posterior(k, hist);
            // sample: with probability p_k the k-group is the watermarked one
            if rng.random::<f64>() < p_k {
                (small.clone(), p_k)
            } else {
                (big.clone(), p_hk)
            }
        } else {
            let post = partial_knowledge_posterior(k, h, t, hist)?;
            let p_low = post.low_side_marginal();
            if rng.random::<f64>() < p_low {
                (small.clone(), p_low)
            } else {
                (big.clone(), 1.0 - p_low)
            }
        };

        if let Some(truth) = truth {
            let true_marked: Vec<usize> = (0..h)
                .filter(|&c| truth[c].contains(&pos))
                .collect();
            let mut claimed_sorted = claimed.clone();
            claimed_sorted.sort_unstable();
            let correct = claimed_sorted == true_marked;
            if correct {
                columns_correct += 1;
            } else {
                all_correct = false;
            }
        }

        for copy in forced {
            column_guesses.push((1.0, pos, vec![copy]));
        }
        if !claimed.is_empty() {
            column_guesses.push((confidence, pos, claimed));
        }
    }

    column_guesses.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut claims = Vec::new();
    'outer: for (confidence, pos, copies_claimed) in column_guesses {
        for copy in copies_claimed {
            if claims.len() as u64 >= w {
                break 'outer;
            }
            claims.push(Claim {
                copy,
                position: pos,
                confidence,
                detected: false,
            });
        }
    }

    let mut result = AttackResult {
        claims,
        ..Default::default()
    };
    if let Some(truth) = truth {
        let total: usize = truth.iter().map(|s| s.len()).sum();
        let hits = result
            .claims
            .iter()
            .filter(|c| truth[c.copy].contains(&c.position))
            .count();
        result.success_fraction = Some(if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        });
        result.columns_correct = Some(columns_correct);
        result.all_columns_correct = Some(all_correct);
    }
    Ok(result)
}

/// Log10 of the probability that the collusion attack recovers the complete
/// watermark configuration.
pub fn whole_watermark_probability(hist: &CountHistogram) -> f64 {
    objective_log10(hist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FractionMethod {
    Exact,
    MonteCarlo { trials: u64, seed: u64 },
}

/// Probability that the collusion attack correctly claims at least a
/// fraction `f` of the watermarked positions.
///
/// The attack claims the highest-confidence marked columns first and claims
/// at most w positions (w recovered from the histogram's total mark mass).
/// Each claimed column succeeds independently with its true-side posterior;
/// the exact method evaluates the Poisson-binomial tail, the Monte Carlo
/// method samples it. `f >= 1` asks for the complete configuration, which
/// also pins down every unmarked position.
pub fn fraction_inference_probability(
    hist: &CountHistogram,
    f: f64,
    method: FractionMethod,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(SeqmarkError::Config(format!("fraction {f} outside [0, 1]")));
    }
    let h = hist.h;
    if h == 0 {
        return Ok(if f == 0.0 { 1.0 } else { 0.0 });
    }
    let l = hist.len_total();
    if matches!(method, FractionMethod::Exact) && l > 10_000 {
        return Err(SeqmarkError::InstanceTooLarge(format!(
            "exact fraction inference refused for {l} points"
        )));
    }
    if f == 0.0 {
        return Ok(1.0);
    }
    let mark_mass: u64 = hist.n.iter().enumerate().map(|(i, &n)| i as u64 * n).sum();
    let w = ((mark_mass as f64) / h as f64).round() as u64;
    if f >= 1.0 {
        // complete configuration: every column, marked or not
        let log10 = objective_log10(hist);
        return Ok(match method {
            FractionMethod::Exact => 10f64.powf(log10),
            FractionMethod::MonteCarlo { trials, seed } => {
                monte_carlo_whole(hist, trials, seed)
            }
        });
    }

    // per-bucket true-side posterior and claim confidence
    let marked: u64 = hist.marked_total();
    if marked == 0 {
        return Ok(0.0);
    }
    let need = (f * marked as f64).ceil() as u64;
    let cap = w.min(marked);
    if need > cap {
        return Ok(0.0); // the claim budget cannot reach the requested fraction
    }
    // columns ordered by claim confidence, descending; ties by bucket index
    let mut by_conf: Vec<(f64, usize, u64, f64)> = (1..=h)
        .filter(|&i| hist.n[i] > 0)
        .map(|i| {
            let (p_true, p_other) = collusion_posterior(i, hist);
            let conf = p_true.max(p_other);
            (conf, i, hist.n[i], p_true)
        })
        .collect();
    by_conf.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut probs: Vec<f64> = Vec::with_capacity(cap as usize);
    'fill: for (_, _, count, p_true) in by_conf {
        for _ in 0..count {
            if probs.len() as u64 >= cap {
                break 'fill;
            }
            probs.push(p_true);
        }
    }

    match method {
        FractionMethod::Exact => Ok(poisson_binomial_tail(&probs, need)),
        FractionMethod::MonteCarlo { trials, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ok = 0u64;
            for _ in 0..trials {
                let mut successes = 0u64;
                for &p in &probs {
                    if rng.random::<f64>() < p {
                        successes += 1;
                        if successes >= need {
                            break;
                        }
                    }
                }
                if successes >= need {
                    ok += 1;
                }
            }
            Ok(ok as f64 / trials as f64)
        }
    }
}

fn monte_carlo_whole(hist: &CountHistogram, trials: u64, seed: u64) -> f64 {
    let h = hist.h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0u64;
    for _ in 0..trials {
        let mut all = true;
        'buckets: for i in 0..=h {
            let (p, _) = collusion_posterior(i, hist);
            for _ in 0..hist.n[i] {
                if rng.random::<f64>() >= p {
                    all = false;
                    break 'buckets;
                }
            }
        }
        if ok < u64::MAX && all {
            ok += 1;
        }
    }
    ok as f64 / trials as f64
}

/// P(X >= need) for X a sum of independent Bernoulli(probs).
pub fn poisson_binomial_tail(probs: &[f64], need: u64) -> f64 {
    if need == 0 {
        return 1.0;
    }
    let n = probs.len();
    if (need as usize) > n {
        return 0.0;
    }
    let mut dist = vec![0.0f64; n + 1];
    dist[0] = 1.0;
    for (idx, &p) in probs.iter().enumerate() {
        for k in (0..=idx + 1).rev() {
            let stay = if k <= idx { dist[k] * (1.0 - p) } else { 0.0 };
            let up = if k > 0 { dist[k - 1] * p } else { 0.0 };
            dist[k] = stay + up;
        }
    }
    dist[need as usize..].iter().sum()
}

/// Correlation attack on a single copy: points whose current state is
/// contradicted by a stronger correlation than supports it are flagged.
/// Claims are padded with blind guesses when fewer than w points score
/// positive; pads carry the blind per-point confidence and are not counted
/// as detections.
pub fn correlation_attack(copy: &Sequence, model: &CorrelationModel, w: u64) -> AttackResult {
    let l = copy.len();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(l);
    for pos in 0..l {
        let current = copy.get(pos);
        let mut p_w: f64 = 0.0;
        for state in 0..copy.m() {
            if state == current {
                continue;
            }
            for &(j, b, p) in model.sources_for(pos, state) {
                if j != pos && copy.get(j) == b {
                    p_w = p_w.max(p);
                }
            }
        }
        let mut p_n: f64 = 0.0;
        for &(j, b, p) in model.sources_for(pos, current) {
            if j != pos && copy.get(j) == b {
                p_n = p_n.max(p);
            }
        }
        let score = (p_w - p_n).max(0.0);
        scored.push((score, pos));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut claims = Vec::new();
    let positives = scored.iter().filter(|(s, _)| *s > 0.0).count();
    let blind_pool = l - positives;
    let blind_need = (w as usize).saturating_sub(positives);
    let blind_conf = if blind_pool == 0 {
        0.0
    } else {
        blind_need as f64 / blind_pool as f64
    };
    for &(score, pos) in scored.iter().take(w as usize) {
        claims.push(Claim {
            copy: 0,
            position: pos,
            confidence: if score > 0.0 { score } else { blind_conf },
            detected: score > 0.0,
        });
    }
    AttackResult {
        claims,
        ..Default::default()
    }
}

/// Count of positively scored claims, i.e. actual correlation detections.
pub fn positive_detections(result: &AttackResult) -> usize {
    result.claims.iter().filter(|c| c.detected).count()
}

/// Outcome of the correlation-then-collusion combination.
#[derive(Debug, Clone)]
pub struct CombinedOutcome {
    pub best_copy: usize,
    /// Correct detections granted to the strongest correlation attacker.
    pub m_correct: usize,
    pub correlation: AttackResult,
    pub collusion: AttackResult,
}

/// Each colluder runs the correlation attack on its own copy; the one with
/// the most correct detections (ground truth supplied by the harness) keeps
/// those points and the rest of the budget goes to the collusion attack.
pub fn combined_attack(
    copies: &[Sequence],
    model: &CorrelationModel,
    hist: &CountHistogram,
    w: u64,
    seed: u64,
    truth: &CopyTruth,
) -> Result<CombinedOutcome> {
    if copies.len() < 2 {
        return Err(SeqmarkError::Config(
            "combined attack needs at least two copies".into(),
        ));
    }
    let mut best: Option<(usize, usize, AttackResult)> = None;
    for (idx, copy) in copies.iter().enumerate() {
        let res = correlation_attack(copy, model, w);
        let correct = res
            .claims
            .iter()
            .filter(|c| c.detected && truth[idx].contains(&c.position))
            .count();
        let better = match &best {
            None => true,
            Some((_, bc, _)) => correct > *bc,
        };
        if better {
            best = Some((idx, correct, res));
        }
    }
    let (best_copy, m_correct, mut correlation) = best.unwrap();
    correlation.correct_detections = Some(m_correct);
    let m_correct_capped = m_correct.min(w as usize);
    let rest = w - m_correct_capped as u64;
    let collusion = if rest > 0 {
        collusion_attack(copies, hist, rest, AttackMode::Exact, seed, Some(truth))?
    } else {
        AttackResult::default()
    };
    Ok(CombinedOutcome {
        best_copy,
        m_correct: m_correct_capped,
        correlation,
        collusion,
    })
}

/// Column-wise majority vote across copies; ties resolve to the first copy's
/// value when it participates in the tie, otherwise to the smallest value.
pub fn modify_majority(copies: &[Sequence]) -> Result<Sequence> {
    if copies.is_empty() {
        return Err(SeqmarkError::EmptyCorpus);
    }
    let l = copies[0].len();
    for c in copies {
        if c.len() != l {
            return Err(SeqmarkError::LengthMismatch {
                left: l,
                right: c.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(l);
    for pos in 0..l {
        let obs = ColumnObservation {
            values: copies.iter().map(|c| c.get(pos)).collect(),
        };
        let classes = obs.classes();
        if classes.len() == 1 {
            out.push(classes[0].0);
            continue;
        }
        let top = classes[0].1.len();
        let tied: Vec<u8> = classes
            .iter()
            .filter(|(_, m)| m.len() == top)
            .map(|(v, _)| *v)
            .collect();
        let first_val = copies[0].get(pos);
        if tied.contains(&first_val) {
            out.push(first_val);
        } else {
            out.push(tied.into_iter().min().unwrap());
        }
    }
    Sequence::new(out, copies[0].m())
}

/// Change `count` distinct uniformly chosen positions to a uniformly chosen
/// different state.
pub fn add_noise(seq: &Sequence, count: u64, rng_seed: u64) -> Result<Sequence> {
    let l = seq.len();
    if count as usize > l {
        return Err(SeqmarkError::Config(format!(
            "cannot noise {count} positions of {l}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..l).collect();
    order.shuffle(&mut rng);
    let m = seq.m();
    let changes: Vec<(usize, u8)> = order
        .into_iter()
        .take(count as usize)
        .map(|pos| {
            let current = seq.get(pos);
            let offset = rng.random_range(1..m);
            (pos, (current + offset) % m)
        })
        .collect();
    Ok(seq.with_changes(changes))
}

/// Uniformly random floor(fraction * len) positions and their values.
pub fn partial_share(
    seq: &Sequence,
    fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<usize>, Vec<u8>)> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(SeqmarkError::Config(format!(
            "share fraction {fraction} outside (0, 1]"
        )));
    }
    let l = seq.len();
    let take = ((fraction * l as f64).floor() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..l).collect();
    order.shuffle(&mut rng);
    let mut indices: Vec<usize> = order.into_iter().take(take).collect();
    indices.sort_unstable();
    let values = indices.iter().map(|&i| seq.get(i)).collect();
    Ok((indices, values))
}
