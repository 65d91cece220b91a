//! Data model shared by every other module: sequences over a small discrete
//! alphabet, per-recipient watermark patterns, and the owner's append-only
//! ledger of past sharings together with its per-point watermark counts.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeqmarkError};

/// Identifier of a receiving service provider.
pub type SpId = u32;

/// An ordered sequence of data points, each a state in `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    points: Vec<u8>,
    m: u8,
}

impl Sequence {
    pub fn new(points: Vec<u8>, m: u8) -> Result<Self> {
        if points.is_empty() {
            return Err(SeqmarkError::Config(
                "sequence must contain at least one point".into(),
            ));
        }
        if m < 2 {
            return Err(SeqmarkError::Config("alphabet size must be at least 2".into()));
        }
        for (i, &p) in points.iter().enumerate() {
            if p >= m {
                return Err(SeqmarkError::StateOutOfRange {
                    state: p as i64,
                    m,
                    at: Some((0, i)),
                });
            }
        }
        Ok(Self { points, m })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn m(&self) -> u8 {
        self.m
    }

    pub fn points(&self) -> &[u8] {
        &self.points
    }

    pub fn get(&self, index: usize) -> u8 {
        self.points[index]
    }

    /// Copy with the given (index, state) substitutions applied.
    pub fn with_changes<'a, I>(&self, changes: I) -> Sequence
    where
        I: IntoIterator<Item = (usize, u8)>,
    {
        let mut points = self.points.clone();
        for (i, s) in changes {
            points[i] = s;
        }
        Sequence {
            points,
            m: self.m,
        }
    }
}

/// Fraction of positions left untouched: 1 - hamming/len.
pub fn utility(original: &Sequence, released: &Sequence) -> Result<f64> {
    if original.len() != released.len() {
        return Err(SeqmarkError::LengthMismatch {
            left: original.len(),
            right: released.len(),
        });
    }
    let changed = original
        .points
        .iter()
        .zip(&released.points)
        .filter(|(a, b)| a != b)
        .count();
    Ok(1.0 - changed as f64 / original.len() as f64)
}

/// One watermarked data point: position, original state, replacement state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkEntry {
    pub index: usize,
    pub from: u8,
    pub to: u8,
}

/// The set of points modified for one recipient, unique per sharing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkPattern {
    pub sp_id: SpId,
    entries: Vec<WatermarkEntry>,
}

impl WatermarkPattern {
    /// Entries are sorted by index; indices must be unique and every entry
    /// must actually change the state.
    pub fn new(sp_id: SpId, mut entries: Vec<WatermarkEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        for pair in entries.windows(2) {
            if pair[0].index == pair[1].index {
                return Err(SeqmarkError::InvalidPattern(format!(
                    "duplicate index {}",
                    pair[0].index
                )));
            }
        }
        for e in &entries {
            if e.from == e.to {
                return Err(SeqmarkError::InvalidPattern(format!(
                    "entry at index {} does not change the state",
                    e.index
                )));
            }
        }
        Ok(Self { sp_id, entries })
    }

    pub fn entries(&self) -> &[WatermarkEntry] {
        &self.entries
    }

    /// Watermark length of this sharing.
    pub fn w(&self) -> usize {
        self.entries.len()
    }

    pub fn contains_index(&self, index: usize) -> bool {
        self.entries.binary_search_by_key(&index, |e| e.index).is_ok()
    }

    pub fn entry_at(&self, index: usize) -> Option<&WatermarkEntry> {
        self.entries
            .binary_search_by_key(&index, |e| e.index)
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// One recorded sharing: recipient, shared index set, watermark pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sharing {
    pub sp_id: SpId,
    pub indices: Vec<usize>,
    pub pattern: WatermarkPattern,
}

/// Histogram over watermark multiplicities after `h` completed sharings:
/// `n[i]` is the number of positions watermarked exactly `i` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountHistogram {
    pub h: usize,
    pub n: Vec<u64>,
}

impl CountHistogram {
    pub fn new(h: usize, n: Vec<u64>) -> Result<Self> {
        if n.len() != h + 1 {
            return Err(SeqmarkError::Config(format!(
                "histogram for {h} sharings needs {} buckets, got {}",
                h + 1,
                n.len()
            )));
        }
        Ok(Self { h, n })
    }

    pub fn len_total(&self) -> u64 {
        self.n.iter().sum()
    }

    /// Number of positions carrying at least one watermark.
    pub fn marked_total(&self) -> u64 {
        self.n.iter().skip(1).sum()
    }
}

/// Append-only record of an owner's sharings of one base sequence.
#[derive(Debug, Clone)]
pub struct SharingLedger {
    base: Sequence,
    sharings: Vec<Sharing>,
    per_point_counts: Vec<u32>,
}

impl SharingLedger {
    pub fn new(base: Sequence) -> Self {
        let len = base.len();
        Self {
            base,
            sharings: Vec::new(),
            per_point_counts: vec![0; len],
        }
    }

    pub fn base(&self) -> &Sequence {
        &self.base
    }

    pub fn sharings(&self) -> &[Sharing] {
        &self.sharings
    }

    pub fn h(&self) -> usize {
        self.sharings.len()
    }

    pub fn per_point_counts(&self) -> &[u32] {
        &self.per_point_counts
    }

    pub fn record_sharing(
        &mut self,
        sp_id: SpId,
        indices: Vec<usize>,
        pattern: WatermarkPattern,
    ) -> Result<()> {
        if pattern.sp_id != sp_id {
            return Err(SeqmarkError::InvalidPattern(format!(
                "pattern carries sp_id {}, sharing records {}",
                pattern.sp_id, sp_id
            )));
        }
        if self.sharings.iter().any(|s| s.sp_id == sp_id) {
            return Err(SeqmarkError::DuplicateSpId(sp_id));
        }
        let len = self.base.len();
        let index_set: BTreeSet<usize> = indices.iter().copied().collect();
        for &i in &index_set {
            if i >= len {
                return Err(SeqmarkError::IndexOutOfRange { index: i, len });
            }
        }
        for e in pattern.entries() {
            if e.index >= len {
                return Err(SeqmarkError::IndexOutOfRange { index: e.index, len });
            }
            if !index_set.contains(&e.index) {
                return Err(SeqmarkError::IndexOutsideShared { index: e.index });
            }
            if e.from != self.base.get(e.index) {
                return Err(SeqmarkError::BaseStateMismatch {
                    index: e.index,
                    expected: self.base.get(e.index),
                    found: e.from,
                });
            }
            if e.to >= self.base.m() {
                return Err(SeqmarkError::StateOutOfRange {
                    state: e.to as i64,
                    m: self.base.m(),
                    at: None,
                });
            }
        }
        for e in pattern.entries() {
            self.per_point_counts[e.index] += 1;
        }
        let mut sorted = indices;
        sorted.sort_unstable();
        sorted.dedup();
        self.sharings.push(Sharing {
            sp_id,
            indices: sorted,
            pattern,
        });
        Ok(())
    }

    /// The watermarked copy sent to one recipient: base with the pattern applied.
    pub fn watermarked_copy(&self, sp_id: SpId) -> Option<Sequence> {
        let sharing = self.sharings.iter().find(|s| s.sp_id == sp_id)?;
        Some(
            self.base
                .with_changes(sharing.pattern.entries().iter().map(|e| (e.index, e.to))),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &LedgerFile::from(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let parsed: LedgerFile = serde_json::from_reader(file)?;
        parsed.try_into()
    }
}

/// Histogram of watermark multiplicities derived from the per-point counts.
pub fn counts(ledger: &SharingLedger) -> CountHistogram {
    let h = ledger.h();
    let mut n = vec![0u64; h + 1];
    for &c in ledger.per_point_counts() {
        n[c as usize] += 1;
    }
    CountHistogram { h, n }
}

/// On-disk ledger layout.
#[derive(Debug, Serialize, Deserialize)]
struct LedgerFile {
    length: usize,
    m: u8,
    base: Vec<u8>,
    sharings: Vec<SharingFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SharingFile {
    sp_id: SpId,
    indices: Vec<usize>,
    pattern: Vec<WatermarkEntry>,
}

impl From<&SharingLedger> for LedgerFile {
    fn from(l: &SharingLedger) -> Self {
        LedgerFile {
            length: l.base.len(),
            m: l.base.m(),
            base: l.base.points().to_vec(),
            sharings: l
                .sharings
                .iter()
                .map(|s| SharingFile {
                    sp_id: s.sp_id,
                    indices: s.indices.clone(),
                    pattern: s.pattern.entries().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<LedgerFile> for SharingLedger {
    type Error = SeqmarkError;

    fn try_from(f: LedgerFile) -> Result<Self> {
        if f.base.len() != f.length {
            return Err(SeqmarkError::Config(format!(
                "ledger file declares length {} but stores {} points",
                f.length,
                f.base.len()
            )));
        }
        let base = Sequence::new(f.base, f.m)?;
        let mut ledger = SharingLedger::new(base);
        for s in f.sharings {
            let pattern = WatermarkPattern::new(s.sp_id, s.pattern)?;
            ledger.record_sharing(s.sp_id, s.indices, pattern)?;
        }
        Ok(ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(points: &[u8], m: u8) -> Sequence {
        Sequence::new(points.to_vec(), m).unwrap()
    }

    fn pattern(sp_id: SpId, entries: &[(usize, u8, u8)]) -> WatermarkPattern {
        WatermarkPattern::new(
            sp_id,
            entries
                .iter()
                .map(|&(index, from, to)| WatermarkEntry { index, from, to })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn counts_empty_ledger() {
        let ledger = SharingLedger::new(seq(&[0, 1, 0, 1, 0], 2));
        let hist = counts(&ledger);
        assert_eq!(hist.h, 0);
        assert_eq!(hist.n, vec![5]);
    }

    #[test]
    fn counts_matches_toy_per_point_counts() {
        // length 5, four sharings driving per-point counts to {2,1,3,0,2}
        let base = seq(&[0, 0, 0, 0, 0], 2);
        let mut ledger = SharingLedger::new(base);
        let all: Vec<usize> = (0..5).collect();
        let plans: [&[usize]; 4] = [&[0, 2], &[2, 4], &[0, 2, 4], &[1]];
        for (i, plan) in plans.iter().enumerate() {
            let entries: Vec<(usize, u8, u8)> = plan.iter().map(|&j| (j, 0, 1)).collect();
            ledger
                .record_sharing(i as u32 + 1, all.clone(), pattern(i as u32 + 1, &entries))
                .unwrap();
        }
        assert_eq!(ledger.per_point_counts(), &[2, 1, 3, 0, 2]);
        let hist = counts(&ledger);
        assert_eq!(hist.h, 4);
        assert_eq!(hist.n, vec![1, 1, 2, 1, 0]);
    }

    #[test]
    fn counts_random_ledger_matches_recount() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let l = 30usize;
        let base = Sequence::new((0..l).map(|_| rng.random_range(0..2) as u8).collect(), 2).unwrap();
        let mut ledger = SharingLedger::new(base.clone());
        let all: Vec<usize> = (0..l).collect();
        for sp in 1..=3u32 {
            let mut picked: Vec<usize> = (0..l).collect();
            picked.shuffle(&mut rng);
            picked.truncate(5);
            let entries: Vec<WatermarkEntry> = picked
                .iter()
                .map(|&j| WatermarkEntry {
                    index: j,
                    from: base.get(j),
                    to: 1 - base.get(j),
                })
                .collect();
            ledger
                .record_sharing(sp, all.clone(), WatermarkPattern::new(sp, entries).unwrap())
                .unwrap();
        }
        // independent recount straight from the stored patterns
        let mut recount = vec![0u32; l];
        for s in ledger.sharings() {
            for e in s.pattern.entries() {
                recount[e.index] += 1;
            }
        }
        assert_eq!(ledger.per_point_counts(), recount.as_slice());
        let hist = counts(&ledger);
        let mut expect = vec![0u64; 4];
        for &c in &recount {
            expect[c as usize] += 1;
        }
        assert_eq!(hist.n, expect);
        assert_eq!(hist.len_total(), l as u64);
    }

    #[test]
    fn utility_basics() {
        let a = seq(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2);
        assert_eq!(utility(&a, &a).unwrap(), 1.0);
        let mut pts = a.points().to_vec();
        for slot in pts.iter_mut().take(5) {
            *slot = 1 - *slot;
        }
        let b = Sequence::new(pts, 2).unwrap();
        assert_eq!(utility(&a, &b).unwrap(), 0.5);
        assert_eq!(utility(&a, &b).unwrap(), utility(&b, &a).unwrap());
    }

    #[test]
    fn utility_large_scale_fraction() {
        let l = 7690usize;
        let a = Sequence::new(vec![0; l], 3).unwrap();
        let b = a.with_changes((0..200).map(|i| (i, 1u8)));
        let u = utility(&a, &b).unwrap();
        assert!((u - (1.0 - 200.0 / 7690.0)).abs() < 1e-12);
        assert!(u > 0.97);
    }

    #[test]
    fn utility_length_mismatch() {
        let a = seq(&[0, 1], 2);
        let b = seq(&[0, 1, 1], 2);
        assert!(matches!(
            utility(&a, &b),
            Err(SeqmarkError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn record_sharing_first_histogram() {
        let l = 20usize;
        let base = Sequence::new(vec![0; l], 2).unwrap();
        let mut ledger = SharingLedger::new(base);
        let w = 4usize;
        let entries: Vec<(usize, u8, u8)> = (0..w).map(|j| (j, 0, 1)).collect();
        ledger
            .record_sharing(1, (0..l).collect(), pattern(1, &entries))
            .unwrap();
        let hist = counts(&ledger);
        assert_eq!(hist.n, vec![(l - w) as u64, w as u64]);
    }

    #[test]
    fn record_sharing_rejects_outside_index_set() {
        let base = Sequence::new(vec![0; 10], 2).unwrap();
        let mut ledger = SharingLedger::new(base);
        let err = ledger
            .record_sharing(1, vec![0, 1, 2], pattern(1, &[(5, 0, 1)]))
            .unwrap_err();
        assert!(matches!(err, SeqmarkError::IndexOutsideShared { index: 5 }));
    }

    #[test]
    fn record_sharing_rejects_duplicate_sp() {
        let base = Sequence::new(vec![0; 10], 2).unwrap();
        let mut ledger = SharingLedger::new(base);
        let all: Vec<usize> = (0..10).collect();
        ledger
            .record_sharing(1, all.clone(), pattern(1, &[(0, 0, 1)]))
            .unwrap();
        let err = ledger
            .record_sharing(1, all, pattern(1, &[(1, 0, 1)]))
            .unwrap_err();
        assert!(matches!(err, SeqmarkError::DuplicateSpId(1)));
    }

    #[test]
    fn record_sharing_rejects_base_mismatch() {
        let base = Sequence::new(vec![0; 4], 2).unwrap();
        let mut ledger = SharingLedger::new(base);
        let err = ledger
            .record_sharing(1, vec![0, 1], pattern(1, &[(0, 1, 0)]))
            .unwrap_err();
        assert!(matches!(err, SeqmarkError::BaseStateMismatch { .. }));
    }

    #[test]
    fn pattern_rejects_no_change_and_duplicates() {
        assert!(WatermarkPattern::new(
            1,
            vec![WatermarkEntry {
                index: 0,
                from: 1,
                to: 1
            }]
        )
        .is_err());
        assert!(WatermarkPattern::new(
            1,
            vec![
                WatermarkEntry {
                    index: 2,
                    from: 0,
                    to: 1
                },
                WatermarkEntry {
                    index: 2,
                    from: 0,
                    to: 1
                }
            ]
        )
        .is_err());
    }

    #[test]
    fn ledger_roundtrip_is_lossless() {
        let base = seq(&[0, 1, 2, 1, 0, 2, 2, 1], 3);
        let mut ledger = SharingLedger::new(base);
        ledger
            .record_sharing(3, (0..8).collect(), pattern(3, &[(1, 1, 2), (4, 0, 1)]))
            .unwrap();
        ledger
            .record_sharing(7, (0..8).collect(), pattern(7, &[(0, 0, 1)]))
            .unwrap();
        let dir = std::env::temp_dir().join("seqmark-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ledger.json");
        ledger.save(&path).unwrap();
        let loaded = SharingLedger::load(&path).unwrap();
        assert_eq!(loaded.base(), ledger.base());
        assert_eq!(loaded.per_point_counts(), ledger.per_point_counts());
        assert_eq!(loaded.sharings().len(), 2);
        assert_eq!(loaded.sharings()[0].pattern, ledger.sharings()[0].pattern);
        assert_eq!(
            loaded.watermarked_copy(3).unwrap(),
            ledger.watermarked_copy(3).unwrap()
        );
    }
}
