//! Data ingestion, synthetic correlated-data generation, and seeded
//! experiment campaigns. Every campaign is deterministic in (config, seed):
//! trial k always derives its randomness from `seed + k`, so adding trials
//! never disturbs earlier ones and reruns are byte-identical.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    collusion_attack, correlation_attack, modify_majority, partial_knowledge_posterior,
    partial_share,AttackMode,
};
use crate::allocation::schedule_allocation;
use crate::data::{counts, utility, Sequence, SharingLedger, SpId};
use crate::detector::{
    detect_combination, detect_single, extract_leak_pattern, partial_leak_candidates,
};
use crate::embedder::{
    embed_correlated, embed_uncorrelated, estimate_correlations, predetermined_target,
    CorrelationEntry, CorrelationModel,
};
use crate::error::{Result, SeqmarkError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Collusion,
    PartialKnowledge,
    Correlation,
    Combined,
    PartialShare,
    ModificationSingle,
    ModificationCollusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// CSV of integers, one record per row.
    File { path: String },
    /// Synthetic records; `spec` lists forced conditionals (i,a,j,b,p).
    Synthetic {
        n_records: usize,
        #[serde(default)]
        spec: Vec<CorrelationEntry>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n_records: 1,
            spec: Vec::new(),
        }
    }
}

fn default_m() -> u8 {
    3
}
fn default_trials() -> u64 {
    1000
}
fn default_tau() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub l: usize,
    #[serde(default = "default_m")]
    pub m: u8,
    /// Watermark ratio; ignored when `w` is set.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub w: Option<u64>,
    pub h: usize,
    /// Partial knowledge: hidden sharings beyond the colluders' copies.
    #[serde(default)]
    pub t: Option<usize>,
    /// Noise multiplier: floor(pi * w) points are randomized.
    #[serde(default)]
    pub pi: Option<f64>,
    /// Shared fractions to sweep in partial-share runs.
    #[serde(default)]
    pub fractions: Option<Vec<f64>>,
    /// Watermark fractions to sweep in inference runs.
    #[serde(default)]
    pub f_grid: Option<Vec<f64>>,
    /// Actual colluder count in modification runs.
    #[serde(default)]
    pub phi: Option<usize>,
    /// Owner's guess of the colluder count.
    #[serde(default)]
    pub phi_hat: Option<usize>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl ExperimentConfig {
    pub fn watermark_length(&self) -> Result<u64> {
        if let Some(w) = self.w {
            if w == 0 || w as usize > self.l {
                return Err(SeqmarkError::Config(format!(
                    "watermark length {w} outside 1..={}",
                    self.l
                )));
            }
            return Ok(w);
        }
        let r = self
            .r
            .ok_or_else(|| SeqmarkError::Config("need either r or w".into()))?;
        if !(0.0..=1.0).contains(&r) || r == 0.0 {
            return Err(SeqmarkError::Config(format!("ratio {r} outside (0, 1]")));
        }
        Ok(((r * self.l as f64) + 0.5).floor().max(1.0) as u64)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Rectangular result table with stable column order and formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ResultTable {
    pub fn new(headers: &[&str]) -> Self {
        ResultTable {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.headers.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Long format for plotting: first column is the x value, every other
    /// column becomes a (x, series, y) row.
    pub fn to_long_csv_string(&self) -> String {
        let mut out = String::from("x,series,y\n");
        for row in &self.rows {
            for (col, val) in self.headers.iter().zip(row).skip(1) {
                out.push_str(&format!("{},{},{}\n", row[0], col, val));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    LongCsv,
}

pub fn emit_results(table: &ResultTable, format: EmitFormat, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let text = match format {
        EmitFormat::Csv => table.to_csv_string(),
        EmitFormat::LongCsv => table.to_long_csv_string(),
    };
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Campaign output: aggregates plus the per-trial rows behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub aggregate: ResultTable,
    pub per_trial: ResultTable,
}

/// CSV of integers in [0, m), one record per row.
pub fn load_matrix(path: &Path, m: u8) -> Result<Vec<Sequence>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut points = Vec::new();
        for (col, cell) in line.split(',').enumerate() {
            let value: i64 = cell.trim().parse().map_err(|_| SeqmarkError::Parse {
                row: row + 1,
                col: col + 1,
                msg: format!("not an integer: {:?}", cell.trim()),
            })?;
            if value < 0 || value >= m as i64 {
                return Err(SeqmarkError::StateOutOfRange {
                    state: value,
                    m,
                    at: Some((row + 1, col + 1)),
                });
            }
            points.push(value as u8);
        }
        records.push(Sequence::new(points, m)?);
    }
    if records.is_empty() {
        return Err(SeqmarkError::EmptyCorpus);
    }
    Ok(records)
}

pub fn save_matrix(records: &[Sequence], path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        let cells: Vec<String> = rec.points().iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Synthetic records: columns start i.i.d. uniform, then each spec entry
/// (i,a,j,b,p) forces x_i = a with probability p (and away from a otherwise)
/// whenever x_j = b. Deterministic cycles (p = 1) are rejected.
pub fn generate_synthetic(
    l: usize,
    m: u8,
    n_records: usize,
    spec: &[CorrelationEntry],
    seed: u64,
) -> Result<Vec<Sequence>> {
    for e in spec {
        if e.i >= l || e.j >= l {
            return Err(SeqmarkError::IndexOutOfRange {
                index: e.i.max(e.j),
                len: l,
            });
        }
        if e.i == e.j {
            return Err(SeqmarkError::ContradictorySpec(format!(
                "self loop at position {}",
                e.i
            )));
        }
        if e.a >= m || e.b >= m {
            return Err(SeqmarkError::StateOutOfRange {
                state: e.a.max(e.b) as i64,
                m,
                at: None,
            });
        }
        if !(0.0..=1.0).contains(&e.p) || e.p == 0.0 {
            return Err(SeqmarkError::ContradictorySpec(format!(
                "probability {} outside (0, 1]",
                e.p
            )));
        }
    }
    // deterministic forcing cycles cannot all be satisfied
    let hard: Vec<(usize, usize)> = spec
        .iter()
        .filter(|e| e.p == 1.0)
        .map(|e| (e.j, e.i))
        .collect();
    if has_cycle(l, &hard) {
        return Err(SeqmarkError::ContradictorySpec(
            "deterministic forcing cycle".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let mut points: Vec<u8> = (0..l).map(|_| rng.random_range(0..m)).collect();
        for e in spec {
            if points[e.j] == e.b {
                if rng.random::<f64>() < e.p {
                    points[e.i] = e.a;
                } else {
                    // land anywhere but a, keeping the conditional exactly p
                    let offset = rng.random_range(1..m);
                    points[e.i] = (e.a + offset) % m;
                }
            }
        }
        records.push(Sequence::new(points, m)?);
    }
    Ok(records)
}

fn has_cycle(l: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); l];
    for &(from, to) in edges {
        adj[from].push(to);
    }
    // 0 unvisited, 1 in progress, 2 done
    let mut state = vec![0u8; l];
    fn visit(node: usize, adj: &[Vec<usize>], state: &mut [u8]) -> bool {
        match state[node] {
            1 => return true,
            2 => return false,
            _ => {}
        }
        state[node] = 1;
        for &next in &adj[node] {
            if visit(next, adj, state) {
                return true;
            }
        }
        state[node] = 2;
        false
    }
    (0..l).any(|n| state[n] == 0 && visit(n, &adj, &mut state))
}

/// Spec for groups of three mutually agreeing columns: positions 3k+1 and
/// 3k+2 copy position 3k with probability p. The estimated model then links
/// every ordered pair inside each group.
pub fn clique_spec(l: usize, m: u8, p: f64) -> Vec<CorrelationEntry> {
    let mut spec = Vec::new();
    let mut k = 0;
    while 3 * k + 2 < l {
        let root = 3 * k;
        for b in 0..m {
            spec.push(CorrelationEntry { i: root + 1, a: b, j: root, b, p });
            spec.push(CorrelationEntry { i: root + 2, a: b, j: root, b, p });
        }
        k += 1;
    }
    spec
}

fn trial_seed(base: u64, trial: u64) -> u64 {
    base.wrapping_add(trial)
}

fn uniform_sequence(l: usize, m: u8, rng: &mut ChaCha8Rng) -> Sequence {
    Sequence::new((0..l).map(|_| rng.random_range(0..m)).collect(), m).unwrap()
}

/// Owner-side sharing loop: allocate with the pipeline schedule, embed, record.
fn build_ledger(
    base: Sequence,
    w: u64,
    h: usize,
    model: Option<&CorrelationModel>,
    seed: u64,
) -> Result<SharingLedger> {
    let l = base.len();
    let m = base.m();
    let all: Vec<usize> = (0..l).collect();
    let mut ledger = SharingLedger::new(base);
    let rule = move |s: u8| predetermined_target(m, s);
    for sp in 1..=h as u32 {
        let hist = counts(&ledger);
        let alloc = schedule_allocation(&hist, w)?;
        let pattern = match model {
            None => {
                let (_, p) = embed_uncorrelated(
                    &ledger,
                    &all,
                    &alloc,
                    &rule,
                    sp,
                    seed.wrapping_mul(1000).wrapping_add(sp as u64),
                )?;
                p
            }
            Some(model) => {
                let (_, p) = embed_correlated(&ledger, &all, &alloc.y, model, w, sp)?;
                p
            }
        };
        ledger.record_sharing(sp, all.clone(), pattern)?;
    }
    Ok(ledger)
}

fn pattern_positions(ledger: &SharingLedger, sp: SpId) -> BTreeSet<usize> {
    ledger
        .sharings()
        .iter()
        .find(|s| s.sp_id == sp)
        .map(|s| s.pattern.entries().iter().map(|e| e.index).collect())
        .unwrap_or_default()
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    match cfg.scenario {
        Scenario::Collusion => run_collusion(cfg),
        Scenario::PartialKnowledge => run_partial_knowledge(cfg),
        Scenario::Correlation => run_correlation(cfg),
        Scenario::Combined => run_combined(cfg),
        Scenario::PartialShare => run_partial_share(cfg),
        Scenario::ModificationSingle => run_modification_single(cfg),
        Scenario::ModificationCollusion => run_modification_collusion(cfg),
    }
}

/// Corpus for correlation scenarios plus the attacker-visible model.
fn correlated_world(cfg: &ExperimentConfig) -> Result<(Vec<Sequence>, CorrelationModel)> {
    let corpus = match &cfg.data {
        DataSource::File { path } => load_matrix(Path::new(path), cfg.m)?,
        DataSource::Synthetic { n_records, spec } => {
            let spec = if spec.is_empty() {
                clique_spec(cfg.l, cfg.m, 0.97)
            } else {
                spec.clone()
            };
            generate_synthetic(cfg.l, cfg.m, (*n_records).max(2), &spec, cfg.seed)?
        }
    };
    for rec in &corpus {
        if rec.len() != cfg.l {
            return Err(SeqmarkError::RaggedCorpus(cfg.l, rec.len()));
        }
    }
    let model = estimate_correlations(&corpus, cfg.tau)?;
    Ok((corpus, model))
}

fn run_collusion(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let hists = crate::allocation::iterate_schedule(cfg.l as u64, w, cfg.h)?;
    let mut per_trial = ResultTable::new(&["trial", "whole_correct", "columns_correct"]);
    let outcomes: Vec<Result<(bool, usize)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(cfg.seed, trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = uniform_sequence(cfg.l, cfg.m, &mut rng);
            let ledger = build_ledger(base, w, cfg.h, None, seed)?;
            let copies: Vec<Sequence> = (1..=cfg.h as u32)
                .map(|sp| ledger.watermarked_copy(sp).unwrap())
                .collect();
            let truth: Vec<BTreeSet<usize>> = (1..=cfg.h as u32)
                .map(|sp| pattern_positions(&ledger, sp))
                .collect();
            let hist = counts(&ledger);
            let res = collusion_attack(
                &copies,
                &hist,
                w,
                AttackMode::Exact,
                seed ^ 0xa77ac,
                Some(&truth),
            )?;
            Ok((
                res.all_columns_correct.unwrap_or(false),
                res.columns_correct.unwrap_or(0),
            ))
        })
        .collect();
    let mut whole = 0u64;
    for (trial, out) in outcomes.into_iter().enumerate() {
        let (correct, cols) = out.map_err(|e| e.in_trial(trial))?;
        if correct {
            whole += 1;
        }
        per_trial.push(vec![trial.to_string(), correct.to_string(), cols.to_string()]);
    }
    let mut aggregate = ResultTable::new(&[
        "h",
        "r",
        "w",
        "log10_objective",
        "mc_whole_rate",
        "trials",
    ]);
    for (idx, hist) in hists.iter().enumerate() {
        let h = idx + 1;
        let row_rate = if h == cfg.h {
            fmt(whole as f64 / cfg.trials as f64)
        } else {
            String::new()
        };
        aggregate.push(vec![
            h.to_string(),
            fmt(w as f64 / cfg.l as f64),
            w.to_string(),
            fmt(crate::allocation::objective_log10(hist)),
            row_rate,
            cfg.trials.to_string(),
        ]);
    }
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

fn run_partial_knowledge(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let t_max = cfg.t.unwrap_or(0);
    let true_total = cfg.h + t_max;
    // the attackers recompute the public pipeline histograms
    let pipeline = crate::allocation::iterate_schedule(cfg.l as u64, w, true_total)?;
    let outcomes: Vec<Result<Vec<f64>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(cfg.seed, trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = uniform_sequence(cfg.l, cfg.m, &mut rng);
            let ledger = build_ledger(base, w, true_total, None, seed)?;
            // h random colluders among the recipients
            let mut sps: Vec<u32> = (1..=true_total as u32).collect();
            sps.shuffle(&mut rng);
            let colluders: Vec<u32> = {
                let mut c = sps[..cfg.h].to_vec();
                c.sort_unstable();
                c
            };
            let truths: Vec<BTreeSet<usize>> = colluders
                .iter()
                .map(|&sp| pattern_positions(&ledger, sp))
                .collect();
            let mut per_assumed = Vec::new();
            for assumed in cfg.h..=true_total {
                let t = assumed - cfg.h;
                let hist = &pipeline[assumed - 1];
                let mut log10 = 0.0;
                for pos in 0..cfg.l {
                    let marked: Vec<bool> =
                        truths.iter().map(|t| t.contains(&pos)).collect();
                    let k_marked = marked.iter().filter(|&&b| b).count();
                    let k = k_marked.min(cfg.h - k_marked);
                    let post = partial_knowledge_posterior(k, cfg.h, t, hist)?;
                    let p_low = post.low_side_marginal();
                    // probability mass the attackers put on the true side
                    let p_true = if k_marked <= cfg.h - k_marked {
                        p_low
                    } else {
                        1.0 - p_low
                    };
                    log10 += p_true.max(1e-300).log10();
                }
                per_assumed.push(log10);
            }
            Ok(per_assumed)
        })
        .collect();
    let span = true_total - cfg.h + 1;
    let mut sums = vec![0.0f64; span];
    let mut per_trial = ResultTable::new(&["trial", "assumed", "log10_true_side"]);
    for (trial, out) in outcomes.into_iter().enumerate() {
        let vals = out.map_err(|e| e.in_trial(trial))?;
        for (idx, v) in vals.iter().enumerate() {
            sums[idx] += v;
            per_trial.push(vec![
                trial.to_string(),
                (cfg.h + idx).to_string(),
                fmt(*v),
            ]);
        }
    }
    let mut aggregate = ResultTable::new(&["assumed_sharings", "mean_log10_inference", "trials"]);
    for (idx, sum) in sums.iter().enumerate() {
        aggregate.push(vec![
            (cfg.h + idx).to_string(),
            fmt(sum / cfg.trials as f64),
            cfg.trials.to_string(),
        ]);
    }
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

/// Probability that the attack correctly identifies at least `need` marked
/// points: detections count for certain, the rest multiplies in the success
/// chance of the best remaining claims.
fn identification_probability(
    need: usize,
    correct_detections: usize,
    extra_probs: &[f64],
) -> f64 {
    if correct_detections >= need {
        return 1.0;
    }
    let missing = need - correct_detections;
    if extra_probs.len() < missing {
        return 0.0;
    }
    extra_probs.iter().take(missing).product()
}

fn run_correlation(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let (corpus, model) = correlated_world(cfg)?;
    let f_grid = cfg
        .f_grid
        .clone()
        .unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.5, 0.8, 1.0]);
    let mut aggregate = ResultTable::new(&["defense", "f", "mean_identification", "trials"]);
    let mut per_trial = ResultTable::new(&["trial", "defense", "detections", "correct_detections"]);

    for (defense, use_model) in [("uncorrelated", false), ("correlated", true)] {
        let outcomes: Vec<Result<(usize, usize, Vec<f64>)>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let seed = trial_seed(cfg.seed, trial);
                let base = corpus[trial as usize % corpus.len()].clone();
                let ledger = build_ledger(
                    base,
                    w,
                    1,
                    if use_model { Some(&model) } else { None },
                    seed,
                )?;
                let copy = ledger.watermarked_copy(1).unwrap();
                let truth = pattern_positions(&ledger, 1);
                let res = correlation_attack(&copy, &model, w);
                let detections: Vec<&crate::adversary::Claim> =
                    res.claims.iter().filter(|c| c.detected).collect();
                let correct = detections
                    .iter()
                    .filter(|c| truth.contains(&c.position))
                    .count();
                // blind pads: probability each is a hit
                let blind: Vec<f64> = res
                    .claims
                    .iter()
                    .filter(|c| !c.detected)
                    .map(|c| c.confidence)
                    .collect();
                Ok((detections.len(), correct, blind))
            })
            .collect();
        let mut collected = Vec::with_capacity(cfg.trials as usize);
        for (trial, out) in outcomes.into_iter().enumerate() {
            let v = out.map_err(|e| e.in_trial(trial))?;
            per_trial.push(vec![
                trial.to_string(),
                defense.to_string(),
                v.0.to_string(),
                v.1.to_string(),
            ]);
            collected.push(v);
        }
        for &f in &f_grid {
            let need = (f * w as f64).ceil() as usize;
            let mean: f64 = collected
                .iter()
                .map(|(_, correct, blind)| identification_probability(need, *correct, blind))
                .sum::<f64>()
                / cfg.trials as f64;
            aggregate.push(vec![
                defense.to_string(),
                fmt(f),
                fmt(mean),
                cfg.trials.to_string(),
            ]);
        }
    }
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

fn run_combined(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let (corpus, model) = correlated_world(cfg)?;
    let f_grid = cfg
        .f_grid
        .clone()
        .unwrap_or_else(|| vec![0.2, 0.5, 0.8, 1.0]);
    let mut aggregate = ResultTable::new(&["defense", "f", "mean_identification", "trials"]);
    let mut per_trial =
        ResultTable::new(&["trial", "defense", "best_copy", "correct_detections"]);

    for (defense, use_model) in [("uncorrelated", false), ("correlated", true)] {
        let outcomes: Vec<Result<(usize, usize, Vec<f64>)>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let seed = trial_seed(cfg.seed, trial);
                let base = corpus[trial as usize % corpus.len()].clone();
                let ledger = build_ledger(
                    base,
                    w,
                    cfg.h,
                    if use_model { Some(&model) } else { None },
                    seed,
                )?;
                let hist = counts(&ledger);
                // every recipient colludes; each runs the correlation attack
                // on its own copy, the strongest detector is granted its hits
                let mut best: Option<(usize, usize)> = None; // (copy idx, correct)
                for sp in 1..=cfg.h as u32 {
                    let copy = ledger.watermarked_copy(sp).unwrap();
                    let truth = pattern_positions(&ledger, sp);
                    let res = correlation_attack(&copy, &model, w);
                    let correct = res
                        .claims
                        .iter()
                        .filter(|c| c.detected && truth.contains(&c.position))
                        .count();
                    if best.map(|(_, bc)| correct > bc).unwrap_or(true) {
                        best = Some((sp as usize, correct));
                    }
                }
                let (best_sp, m_correct) = best.unwrap();
                // collusion success odds on the best copy's undetected points
                let truth = pattern_positions(&ledger, best_sp as u32);
                let copy = ledger.watermarked_copy(best_sp as u32).unwrap();
                let detected: BTreeSet<usize> = {
                    let res = correlation_attack(&copy, &model, w);
                    res.claims
                        .iter()
                        .filter(|c| c.detected && truth.contains(&c.position))
                        .map(|c| c.position)
                        .collect()
                };
                let counts_vec = ledger.per_point_counts();
                let mut probs: Vec<f64> = truth
                    .iter()
                    .filter(|pos| !detected.contains(pos))
                    .map(|&pos| {
                        let c = counts_vec[pos] as usize;
                        let (p_c, _) = crate::adversary::collusion_posterior(c, &hist);
                        p_c
                    })
                    .collect();
                probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
                Ok((best_sp, m_correct.min(w as usize), probs))
            })
            .collect();
        let mut collected = Vec::with_capacity(cfg.trials as usize);
        for (trial, out) in outcomes.into_iter().enumerate() {
            let v = out.map_err(|e| e.in_trial(trial))?;
            per_trial.push(vec![
                trial.to_string(),
                defense.to_string(),
                v.0.to_string(),
                v.1.to_string(),
            ]);
            collected.push(v);
        }
        for &f in &f_grid {
            let need = (f * w as f64).ceil() as usize;
            let mean: f64 = collected
                .iter()
                .map(|(_, correct, probs)| identification_probability(need, *correct, probs))
                .sum::<f64>()
                / cfg.trials as f64;
            aggregate.push(vec![
                defense.to_string(),
                fmt(f),
                fmt(mean),
                cfg.trials.to_string(),
            ]);
        }
    }
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

fn run_partial_share(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let fractions = cfg
        .fractions
        .clone()
        .unwrap_or_else(|| vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]);
    let mut aggregate = ResultTable::new(&[
        "fraction",
        "mean_precision",
        "mean_recall",
        "mean_entropy_bits",
        "trials",
    ]);
    let mut per_trial = ResultTable::new(&[
        "trial",
        "fraction",
        "precision",
        "recall",
        "entropy_bits",
        "candidates",
    ]);
    for &fraction in &fractions {
        let outcomes: Vec<Result<(f64, f64, f64, usize)>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let seed = trial_seed(cfg.seed, trial);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
                let base = uniform_sequence(cfg.l, cfg.m, &mut rng);
                let ledger = build_ledger(base, w, cfg.h, None, seed)?;
                let leaker: u32 = rng.random_range(1..=cfg.h as u32);
                let copy = ledger.watermarked_copy(leaker).unwrap();
                let (indices, values) = partial_share(&copy, fraction, seed ^ 0x51ab)?;
                let mut report = partial_leak_candidates(&indices, &values, &ledger)?;
                let truth: BTreeSet<SpId> = [leaker].into_iter().collect();
                let all: BTreeSet<SpId> = (1..=cfg.h as u32).collect();
                report.score_against(&truth, &all);
                Ok((
                    report.precision.unwrap(),
                    report.recall.unwrap(),
                    report.entropy_bits.unwrap(),
                    report.suspects.len(),
                ))
            })
            .collect();
        let mut sums = (0.0, 0.0, 0.0);
        for (trial, out) in outcomes.into_iter().enumerate() {
            let (p, r, e, cand) = out.map_err(|e| e.in_trial(trial))?;
            sums.0 += p;
            sums.1 += r;
            sums.2 += e;
            per_trial.push(vec![
                trial.to_string(),
                fmt(fraction),
                fmt(p),
                fmt(r),
                fmt(e),
                cand.to_string(),
            ]);
        }
        aggregate.push(vec![
            fmt(fraction),
            fmt(sums.0 / cfg.trials as f64),
            fmt(sums.1 / cfg.trials as f64),
            fmt(sums.2 / cfg.trials as f64),
            cfg.trials.to_string(),
        ]);
    }
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

fn run_modification_single(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let pi = cfg.pi.unwrap_or(0.0);
    let phi_hat = cfg.phi_hat.unwrap_or(1);
    let noise_count = (pi * w as f64).floor() as u64;
    let outcomes: Vec<Result<(f64, f64, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(cfg.seed, trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517e);
            let base = uniform_sequence(cfg.l, cfg.m, &mut rng);
            let ledger = build_ledger(base, w, cfg.h, None, seed)?;
            let leaker: u32 = rng.random_range(1..=cfg.h as u32);
            let copy = ledger.watermarked_copy(leaker).unwrap();
            let leaked = crate::adversary::add_noise(&copy, noise_count, seed ^ 0x4011)?;
            let covered: Vec<usize> = (0..cfg.l).collect();
            let z = extract_leak_pattern(leaked.points(), ledger.base(), &covered)?;
            let mut report = if phi_hat == 1 {
                detect_single(&z, &ledger)?
            } else {
                detect_combination(&z, &ledger, phi_hat)?
            };
            let truth: BTreeSet<SpId> = [leaker].into_iter().collect();
            let all: BTreeSet<SpId> = (1..=cfg.h as u32).collect();
            report.score_against(&truth, &all);
            let loss = 1.0 - utility(ledger.base(), &leaked)?;
            Ok((report.precision.unwrap(), report.recall.unwrap(), loss))
        })
        .collect();
    let mut per_trial =
        ResultTable::new(&["trial", "precision", "recall", "utility_loss"]);
    let mut sums = (0.0, 0.0, 0.0);
    for (trial, out) in outcomes.into_iter().enumerate() {
        let (p, r, l) = out.map_err(|e| e.in_trial(trial))?;
        sums.0 += p;
        sums.1 += r;
        sums.2 += l;
        per_trial.push(vec![trial.to_string(), fmt(p), fmt(r), fmt(l)]);
    }
    let mut aggregate = ResultTable::new(&[
        "pi",
        "h",
        "phi_hat",
        "mean_precision",
        "mean_recall",
        "mean_utility_loss",
        "trials",
    ]);
    aggregate.push(vec![
        fmt(pi),
        cfg.h.to_string(),
        phi_hat.to_string(),
        fmt(sums.0 / cfg.trials as f64),
        fmt(sums.1 / cfg.trials as f64),
        fmt(sums.2 / cfg.trials as f64),
        cfg.trials.to_string(),
    ]);
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

fn run_modification_collusion(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let w = cfg.watermark_length()?;
    let pi = cfg.pi.unwrap_or(0.0);
    let phi = cfg
        .phi
        .ok_or_else(|| SeqmarkError::Config("collusion modification needs phi".into()))?;
    let phi_hat = cfg.phi_hat.unwrap_or(phi);
    if phi < 1 || phi > cfg.h {
        return Err(SeqmarkError::Config(format!(
            "phi {phi} outside 1..={}",
            cfg.h
        )));
    }
    let noise_count = (pi * w as f64).floor() as u64;
    let outcomes: Vec<Result<(f64, f64, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = trial_seed(cfg.seed, trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0111d);
            let base = uniform_sequence(cfg.l, cfg.m, &mut rng);
            let ledger = build_ledger(base, w, cfg.h, None, seed)?;
            let mut sps: Vec<u32> = (1..=cfg.h as u32).collect();
            sps.shuffle(&mut rng);
            let colluders: BTreeSet<u32> = sps[..phi].iter().copied().collect();
            let copies: Vec<Sequence> = colluders
                .iter()
                .map(|&sp| ledger.watermarked_copy(sp).unwrap())
                .collect();
            let merged = modify_majority(&copies)?;
            let leaked = crate::adversary::add_noise(&merged, noise_count, seed ^ 0x4012)?;
            let covered: Vec<usize> = (0..cfg.l).collect();
            let z = extract_leak_pattern(leaked.points(), ledger.base(), &covered)?;
            let mut report = detect_combination(&z, &ledger, phi_hat)?;
            let all: BTreeSet<SpId> = (1..=cfg.h as u32).collect();
            report.score_against(&colluders, &all);
            let loss = 1.0 - utility(ledger.base(), &leaked)?;
            Ok((report.precision.unwrap(), report.recall.unwrap(), loss))
        })
        .collect();
    let mut per_trial =
        ResultTable::new(&["trial", "precision", "recall", "utility_loss"]);
    let mut sums = (0.0, 0.0, 0.0);
    for (trial, out) in outcomes.into_iter().enumerate() {
        let (p, r, l) = out.map_err(|e| e.in_trial(trial))?;
        sums.0 += p;
        sums.1 += r;
        sums.2 += l;
        per_trial.push(vec![trial.to_string(), fmt(p), fmt(r), fmt(l)]);
    }
    let mut aggregate = ResultTable::new(&[
        "pi",
        "phi",
        "phi_hat",
        "h",
        "mean_precision",
        "mean_recall",
        "mean_utility_loss",
        "noise_utility_loss",
        "trials",
    ]);
    aggregate.push(vec![
        fmt(pi),
        phi.to_string(),
        phi_hat.to_string(),
        cfg.h.to_string(),
        fmt(sums.0 / cfg.trials as f64),
        fmt(sums.1 / cfg.trials as f64),
        fmt(sums.2 / cfg.trials as f64),
        fmt(noise_count as f64 / cfg.l as f64),
        cfg.trials.to_string(),
    ]);
    Ok(ExperimentOutput {
        aggregate,
        per_trial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_matrix_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join("seqmark-harness-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        std::fs::write(&path, "0,1,2\n2,1,0\n").unwrap();
        let recs = load_matrix(&path, 3).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].points(), &[0, 1, 2]);
        save_matrix(&recs, &path).unwrap();
        assert_eq!(load_matrix(&path, 3).unwrap(), recs);

        std::fs::write(&path, "0,1\n0,4\n").unwrap();
        match load_matrix(&path, 3) {
            Err(SeqmarkError::StateOutOfRange {
                state: 4,
                at: Some((2, 2)),
                ..
            }) => {}
            other => panic!("expected out-of-range at (2,2), got {other:?}"),
        }
        std::fs::write(&path, "0,x\n").unwrap();
        match load_matrix(&path, 3) {
            Err(SeqmarkError::Parse { row: 1, col: 2, .. }) => {}
            other => panic!("expected parse error at (1,2), got {other:?}"),
        }
    }

    #[test]
    fn single_row_file() {
        let dir = std::env::temp_dir().join("seqmark-harness-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("one.csv");
        std::fs::write(&path, "1,0,1,1\n").unwrap();
        let recs = load_matrix(&path, 2).unwrap();
        assert_eq!(recs.len(), 1);
    }

    #[test]
    fn synthetic_empty_spec_is_iid() {
        let recs = generate_synthetic(50, 3, 200, &[], 7).unwrap();
        assert_eq!(recs.len(), 200);
        // uniformity smoke check on one column
        let ones = recs.iter().filter(|r| r.get(10) == 1).count();
        assert!(ones > 30 && ones < 110, "ones = {ones}");
    }

    #[test]
    fn synthetic_deterministic_pair() {
        let spec: Vec<CorrelationEntry> = (0..3u8)
            .map(|b| CorrelationEntry { i: 1, a: b, j: 0, b, p: 1.0 })
            .collect();
        let recs = generate_synthetic(4, 3, 100, &spec, 1).unwrap();
        for r in recs {
            assert_eq!(r.get(0), r.get(1));
        }
    }

    #[test]
    fn synthetic_conditional_recovery() {
        let spec = vec![CorrelationEntry { i: 1, a: 2, j: 0, b: 0, p: 0.95 }];
        let recs = generate_synthetic(3, 3, 10_000, &spec, 3).unwrap();
        let cond = recs.iter().filter(|r| r.get(0) == 0).count();
        let hit = recs
            .iter()
            .filter(|r| r.get(0) == 0 && r.get(1) == 2)
            .count();
        let p = hit as f64 / cond as f64;
        assert!((p - 0.95).abs() < 0.01, "recovered {p}");
    }

    #[test]
    fn synthetic_rejects_deterministic_cycle() {
        let spec = vec![
            CorrelationEntry { i: 1, a: 0, j: 0, b: 0, p: 1.0 },
            CorrelationEntry { i: 0, a: 0, j: 1, b: 0, p: 1.0 },
        ];
        assert!(matches!(
            generate_synthetic(3, 3, 10, &spec, 1),
            Err(SeqmarkError::ContradictorySpec(_))
        ));
        // soft cycles are allowed
        let soft = vec![
            CorrelationEntry { i: 1, a: 0, j: 0, b: 0, p: 0.9 },
            CorrelationEntry { i: 0, a: 0, j: 1, b: 0, p: 0.9 },
        ];
        assert!(generate_synthetic(3, 3, 10, &soft, 1).is_ok());
    }

    #[test]
    fn clique_spec_recovers_dense_model() {
        let spec = clique_spec(9, 3, 0.97);
        let recs = generate_synthetic(9, 3, 2000, &spec, 11).unwrap();
        let model = estimate_correlations(&recs, 0.9).unwrap();
        // every ordered pair inside a group of three should be linked
        for root in [0usize, 3, 6] {
            for a in root..root + 3 {
                for b in root..root + 3 {
                    if a == b {
                        continue;
                    }
                    let linked = (0..3u8).any(|s| {
                        model
                            .sources_for(a, s)
                            .iter()
                            .any(|&(j, sb, _)| j == b && sb == s)
                    });
                    assert!(linked, "no link {a} <- {b}");
                }
            }
        }
    }

    #[test]
    fn identification_probability_accounting() {
        assert_eq!(identification_probability(5, 5, &[]), 1.0);
        assert_eq!(identification_probability(5, 7, &[]), 1.0);
        assert_eq!(identification_probability(3, 1, &[0.5]), 0.0);
        let p = identification_probability(3, 1, &[0.5, 0.4, 0.3]);
        assert!((p - 0.2).abs() < 1e-12);
    }

    #[test]
    fn result_table_csv_and_long() {
        let mut t = ResultTable::new(&["x", "a", "b"]);
        t.push(vec!["1".into(), "0.5".into(), "0.25".into()]);
        assert_eq!(t.to_csv_string(), "x,a,b\n1,0.5,0.25\n");
        assert_eq!(t.to_long_csv_string(), "x,series,y\n1,a,0.5\n1,b,0.25\n");
        let empty = ResultTable::new(&["x", "y"]);
        assert_eq!(empty.to_csv_string(), "x,y\n");
    }

    #[test]
    fn experiment_rerun_is_byte_identical() {
        let cfg = ExperimentConfig {
            scenario: Scenario::PartialShare,
            l: 200,
            m: 3,
            r: Some(0.1),
            w: None,
            h: 3,
            t: None,
            pi: None,
            fractions: Some(vec![0.3]),
            f_grid: None,
            phi: None,
            phi_hat: None,
            trials: 5,
            seed: 42,
            data: DataSource::default(),
            tau: 0.9,
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.aggregate.to_csv_string(), b.aggregate.to_csv_string());
        assert_eq!(a.per_trial.to_csv_string(), b.per_trial.to_csv_string());
    }

    #[test]
    fn trial_seeds_are_position_stable() {
        let mk = |trials: u64| ExperimentConfig {
            scenario: Scenario::ModificationSingle,
            l: 150,
            m: 3,
            r: Some(0.05),
            w: None,
            h: 3,
            t: None,
            pi: Some(1.0),
            fractions: None,
            f_grid: None,
            phi: None,
            phi_hat: Some(1),
            trials,
            seed: 9,
            data: DataSource::default(),
            tau: 0.9,
        };
        let small = run_experiment(&mk(3)).unwrap();
        let big = run_experiment(&mk(6)).unwrap();
        for (row_small, row_big) in small.per_trial.rows.iter().zip(&big.per_trial.rows) {
            assert_eq!(row_small, row_big);
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let text = r#"{
            "scenario": "collusion",
            "l": 100, "r": 0.1, "h": 2, "trials": 3, "seed": 1,
            "data": {"kind": "synthetic", "n_records": 1}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.scenario, Scenario::Collusion);
        assert_eq!(cfg.watermark_length().unwrap(), 10);
        assert_eq!(cfg.m, 3);
        assert_eq!(cfg.tau, 0.9);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.aggregate.rows.len(), 2);
    }
}
