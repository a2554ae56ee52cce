//! Hamming-space matching of binary descriptors.
//!
//! [`BinaryIndex`] hashes every descriptor into `T` tables, each keyed by 16
//! fixed bit positions. A query probes its own bucket and the 16 buckets one
//! key bit away in every table, then ranks the union exactly. Distances are
//! never approximated, only the candidate set is.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Descriptor256, FeatureSet};
use crate::par;

pub const KEY_BITS: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchError {
    #[error("train set is empty")]
    EmptyTrainSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatchPair {
    pub query_idx: usize,
    pub train_idx: usize,
    pub distance: u32,
}

/// Best and optional second-best neighbour of one query.
pub type Knn2 = (Option<MatchPair>, Option<MatchPair>);

#[inline]
pub fn hamming(a: &Descriptor256, b: &Descriptor256) -> u32 {
    (a.0[0] ^ b.0[0]).count_ones()
        + (a.0[1] ^ b.0[1]).count_ones()
        + (a.0[2] ^ b.0[2]).count_ones()
        + (a.0[3] ^ b.0[3]).count_ones()
}

/// Keeps the two smallest `(distance, index)` entries.
#[derive(Default)]
struct Top2 {
    best: Option<(u32, usize)>,
    second: Option<(u32, usize)>,
}

impl Top2 {
    #[inline]
    fn push(&mut self, d: u32, idx: usize) {
        let cand = (d, idx);
        match self.best {
            None => self.best = Some(cand),
            Some(b) if cand < b => {
                self.second = self.best;
                self.best = Some(cand);
            }
            _ => match self.second {
                Some(s) if cand >= s => {}
                _ => self.second = Some(cand),
            },
        }
    }

    fn into_pairs(self, query_idx: usize) -> Knn2 {
        let mk = |(distance, train_idx): (u32, usize)| MatchPair {
            query_idx,
            train_idx,
            distance,
        };
        (self.best.map(mk), self.second.map(mk))
    }
}

/// Exact nearest and second-nearest; ties go to the lower train index.
pub fn brute_force_knn2(
    query: &Descriptor256,
    train: &[Descriptor256],
) -> Result<(MatchPair, Option<MatchPair>), MatchError> {
    let (best, second) = brute_force_top2(query, train, 0);
    best.map(|b| (b, second)).ok_or(MatchError::EmptyTrainSet)
}

fn brute_force_top2(query: &Descriptor256, train: &[Descriptor256], query_idx: usize) -> Knn2 {
    let mut top = Top2::default();
    for (i, t) in train.iter().enumerate() {
        top.push(hamming(query, t), i);
    }
    top.into_pairs(query_idx)
}

#[derive(Debug, Clone, PartialEq)]
struct HashTable {
    bits: [u8; KEY_BITS],
    buckets: HashMap<u16, Vec<u32>>,
}

impl HashTable {
    #[inline]
    fn key(&self, d: &Descriptor256) -> u16 {
        let mut k = 0u16;
        for (j, &b) in self.bits.iter().enumerate() {
            if d.bit(b as usize) {
                k |= 1 << j;
            }
        }
        k
    }
}

/// Multi-table hashed index over a fixed descriptor set. Immutable once
/// built, so concurrent queries are fine.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryIndex {
    descriptors: Vec<Descriptor256>,
    tables: Vec<HashTable>,
}

impl BinaryIndex {
    pub fn build(descs: &[Descriptor256], n_tables: usize, seed: u64) -> Self {
        assert!(n_tables >= 1, "index needs at least one table");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = (0..n_tables)
            .map(|_| {
                let mut bits = [0u8; KEY_BITS];
                for (slot, b) in bits.iter_mut().zip(sample(&mut rng, 256, KEY_BITS)) {
                    *slot = b as u8;
                }
                let mut table = HashTable {
                    bits,
                    buckets: HashMap::new(),
                };
                for (i, d) in descs.iter().enumerate() {
                    let k = table.key(d);
                    table.buckets.entry(k).or_default().push(i as u32);
                }
                table
            })
            .collect();
        Self {
            descriptors: descs.to_vec(),
            tables,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn descriptors(&self) -> &[Descriptor256] {
        &self.descriptors
    }

    /// Bit positions keying table `t`.
    pub fn table_bits(&self, t: usize) -> &[u8] {
        &self.tables[t].bits
    }

    /// Number of buckets across all tables containing descriptor `i`.
    pub fn occurrences(&self, i: usize) -> usize {
        self.tables
            .iter()
            .flat_map(|t| t.buckets.values())
            .map(|b| b.iter().filter(|&&j| j as usize == i).count())
            .sum()
    }

    /// Distinct candidate indices for `query`, in ascending order.
    pub fn candidates(&self, query: &Descriptor256) -> Vec<usize> {
        let mut seen = vec![false; self.descriptors.len()];
        let mut out = Vec::new();
        for table in &self.tables {
            let key = table.key(query);
            let probes = std::iter::once(key).chain((0..KEY_BITS).map(|b| key ^ (1 << b)));
            for probe in probes {
                if let Some(bucket) = table.buckets.get(&probe) {
                    for &i in bucket {
                        let i = i as usize;
                        if !seen[i] {
                            seen[i] = true;
                            out.push(i);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Approximate two nearest neighbours with exact distances; falls back to
    /// a full scan when fewer than two candidates turn up.
    pub fn knn2(&self, query: &Descriptor256, query_idx: usize) -> Knn2 {
        if self.descriptors.is_empty() {
            return (None, None);
        }
        let cands = self.candidates(query);
        if cands.len() < 2 {
            return brute_force_top2(query, &self.descriptors, query_idx);
        }
        let mut top = Top2::default();
        for i in cands {
            top.push(hamming(query, &self.descriptors[i]), i);
        }
        top.into_pairs(query_idx)
    }
}

/// Lowe ratio test. A pair with best and second both at distance 0 is an
/// ambiguous duplicate and is dropped.
pub fn ratio_filter(pairs: &[Knn2], ratio: f64) -> Vec<MatchPair> {
    pairs
        .iter()
        .filter_map(|(best, second)| {
            let best = (*best)?;
            match second {
                None => Some(best),
                Some(s) if best.distance == 0 && s.distance == 0 => None,
                Some(s) if (best.distance as f64) < ratio * s.distance as f64 => Some(best),
                Some(_) => None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct MatchConfig {
    pub n_tables: usize,
    /// Fixed at 16; present so configs can state it explicitly.
    pub key_bits: usize,
    pub ratio: f64,
    pub cross_check: bool,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            n_tables: 8,
            key_bits: KEY_BITS,
            ratio: 0.75,
            cross_check: true,
            seed: 7,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=64).contains(&self.n_tables) {
            return Err(format!("nTables {} outside [1, 64]", self.n_tables));
        }
        if self.key_bits != KEY_BITS {
            return Err(format!("keyBits must be {KEY_BITS}"));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(format!("ratio {} outside (0, 1)", self.ratio));
        }
        Ok(())
    }
}

/// A feature set paired with its search index, built once per frame and
/// reused as match target and for the reverse cross-check.
#[derive(Debug, Clone)]
pub struct IndexedFeatures {
    pub features: FeatureSet,
    pub index: BinaryIndex,
}

impl IndexedFeatures {
    pub fn new(features: FeatureSet, cfg: &MatchConfig) -> Self {
        let index = BinaryIndex::build(&features.descriptors, cfg.n_tables, cfg.seed);
        Self { features, index }
    }
}

/// Ratio-tested, optionally cross-checked matches from `query` into
/// `train`, sorted by ascending distance.
pub fn match_indexed(
    query: &IndexedFeatures,
    train: &IndexedFeatures,
    cfg: &MatchConfig,
) -> Vec<MatchPair> {
    let qd = &query.features.descriptors;
    if qd.is_empty() || train.index.is_empty() {
        return Vec::new();
    }
    let knn: Vec<Knn2> = par::map_range(qd.len(), |i| train.index.knn2(&qd[i], i));
    let mut kept = ratio_filter(&knn, cfg.ratio);
    if cfg.cross_check {
        let td = &train.features.descriptors;
        kept.retain(|m| {
            let (back, _) = query.index.knn2(&td[m.train_idx], m.train_idx);
            back.is_some_and(|b| b.train_idx == m.query_idx)
        });
    }
    kept.sort_by_key(|m| (m.distance, m.query_idx));
    kept
}

/// Convenience wrapper that builds both indexes.
pub fn match_frames(query: &FeatureSet, train: &FeatureSet, cfg: &MatchConfig) -> Vec<MatchPair> {
    let q = IndexedFeatures::new(query.clone(), cfg);
    let t = IndexedFeatures::new(train.clone(), cfg);
    match_indexed(&q, &t, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;
    use rand::Rng;

    fn random_descs(n: usize, seed: u64) -> Vec<Descriptor256> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Descriptor256([rng.random(), rng.random(), rng.random(), rng.random()]))
            .collect()
    }

    fn feature_set(descs: Vec<Descriptor256>) -> FeatureSet {
        let keypoints = (0..descs.len())
            .map(|i| Keypoint {
                x: i as f32,
                y: 0.0,
                level: 0,
                score: 1,
                angle: 0.0,
            })
            .collect();
        FeatureSet {
            frame_id: 0,
            keypoints,
            descriptors: descs,
        }
    }

    #[test]
    fn hamming_cases() {
        let a = random_descs(1, 1)[0];
        assert_eq!(hamming(&a, &a), 0);
        assert_eq!(hamming(&Descriptor256::ZERO, &Descriptor256::ONES), 256);
        let mut b = a;
        b.flip_bit(7);
        assert_eq!(hamming(&a, &b), 1);
    }

    #[test]
    fn brute_force_cases() {
        let q = random_descs(1, 2)[0];
        let (best, second) = brute_force_knn2(&q, &[q]).unwrap();
        assert_eq!((best.train_idx, best.distance), (0, 0));
        assert!(second.is_none());

        let (best, second) = brute_force_knn2(&q, &[q, q.not()]).unwrap();
        assert_eq!((best.train_idx, best.distance), (0, 0));
        let second = second.unwrap();
        assert_eq!((second.train_idx, second.distance), (1, 256));

        let mut a = q;
        a.flip_bit(0);
        a.flip_bit(1);
        a.flip_bit(2);
        let mut b = q;
        b.flip_bit(10);
        b.flip_bit(11);
        b.flip_bit(12);
        let far = q.not();
        let (best, second) = brute_force_knn2(&q, &[far, b, a]).unwrap();
        assert_eq!((best.train_idx, best.distance), (1, 3));
        assert_eq!(second.unwrap().train_idx, 2);

        assert_eq!(brute_force_knn2(&q, &[]), Err(MatchError::EmptyTrainSet));
    }

    #[test]
    fn index_build_cases() {
        let empty = BinaryIndex::build(&[], 8, 1);
        let q = random_descs(1, 3)[0];
        assert_eq!(empty.knn2(&q, 0), (None, None));
        assert!(empty.candidates(&q).is_empty());

        let one = BinaryIndex::build(&[q], 8, 1);
        assert_eq!(one.occurrences(0), 8);

        let descs = random_descs(100, 4);
        let a = BinaryIndex::build(&descs, 8, 99);
        let b = BinaryIndex::build(&descs, 8, 99);
        assert_eq!(a, b);
        for t in 0..a.n_tables() {
            let mut bits = a.table_bits(t).to_vec();
            bits.sort();
            bits.dedup();
            assert_eq!(bits.len(), KEY_BITS);
        }
        for i in 0..descs.len() {
            assert_eq!(a.occurrences(i), 8);
        }
    }

    #[test]
    fn index_exact_hit() {
        let descs = random_descs(300, 5);
        let idx = BinaryIndex::build(&descs, 8, 11);
        for (i, d) in descs.iter().enumerate().step_by(17) {
            let (best, _) = idx.knn2(d, 0);
            let best = best.unwrap();
            assert_eq!((best.train_idx, best.distance), (i, 0));
        }
    }

    #[test]
    fn ratio_cases() {
        let mp = |d| {
            Some(MatchPair {
                query_idx: 0,
                train_idx: 0,
                distance: d,
            })
        };
        assert_eq!(ratio_filter(&[(mp(10), mp(40))], 0.75).len(), 1);
        assert_eq!(ratio_filter(&[(mp(30), mp(32))], 0.75).len(), 0);
        assert_eq!(ratio_filter(&[(mp(0), None)], 0.75).len(), 1);
        assert_eq!(ratio_filter(&[(mp(0), mp(0))], 0.75).len(), 0);
        assert_eq!(ratio_filter(&[(None, None)], 0.75).len(), 0);
    }

    #[test]
    fn self_matching_drops_duplicates() {
        let mut descs = random_descs(50, 6);
        descs[10] = descs[3];
        let fs = feature_set(descs);
        let matches = match_frames(&fs, &fs, &MatchConfig::default());
        for m in &matches {
            assert_eq!(m.query_idx, m.train_idx);
            assert_eq!(m.distance, 0);
        }
        assert!(!matches
            .iter()
            .any(|m| m.query_idx == 3 || m.query_idx == 10));
        assert_eq!(matches.len(), 48);
    }

    #[test]
    fn random_sets_rarely_match() {
        let q = feature_set(random_descs(300, 7));
        let t = feature_set(random_descs(300, 8));
        let m = match_frames(&q, &t, &MatchConfig::default());
        assert!(m.len() as f64 <= 0.05 * 300.0, "{} survived", m.len());
    }

    #[test]
    fn empty_inputs() {
        let e = FeatureSet::default();
        let f = feature_set(random_descs(10, 9));
        let cfg = MatchConfig::default();
        assert!(match_frames(&e, &f, &cfg).is_empty());
        assert!(match_frames(&f, &e, &cfg).is_empty());
        assert!(match_frames(&e, &e, &cfg).is_empty());
    }

    #[test]
    fn matches_are_injective_and_sorted() {
        // perturbed copies so that most queries have a clear partner
        let train = random_descs(200, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let query: Vec<_> = train
            .iter()
            .map(|d| {
                let mut d = *d;
                for _ in 0..rng.random_range(0..30) {
                    d.flip_bit(rng.random_range(0..256));
                }
                d
            })
            .collect();
        let m = match_frames(
            &feature_set(query),
            &feature_set(train),
            &MatchConfig::default(),
        );
        assert!(m.len() > 150);
        let mut q: Vec<_> = m.iter().map(|p| p.query_idx).collect();
        let mut t: Vec<_> = m.iter().map(|p| p.train_idx).collect();
        q.sort();
        q.dedup();
        t.sort();
        t.dedup();
        assert_eq!(q.len(), m.len());
        assert_eq!(t.len(), m.len());
        for w in m.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_desc() -> impl Strategy<Value = Descriptor256> {
            any::<[u64; 4]>().prop_map(Descriptor256)
        }

        proptest! {
            #[test]
            fn hamming_is_a_metric(a in arb_desc(), b in arb_desc(), c in arb_desc()) {
                prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
                prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
                prop_assert_eq!(hamming(&a, &b) == 0, a == b);
                prop_assert!(hamming(&a, &b) <= 256);
            }

            #[test]
            fn index_distances_are_exact(seed in 0u64..1000, q in arb_desc()) {
                let descs = random_descs(120, seed);
                let idx = BinaryIndex::build(&descs, 4, seed);
                let (best, second) = idx.knn2(&q, 0);
                let (bf, _) = brute_force_knn2(&q, &descs).unwrap();
                let best = best.unwrap();
                prop_assert_eq!(best.distance, hamming(&q, &descs[best.train_idx]));
                prop_assert!(best.distance >= bf.distance);
                if let Some(s) = second {
                    prop_assert_eq!(s.distance, hamming(&q, &descs[s.train_idx]));
                    prop_assert!(s.train_idx != best.train_idx);
                    prop_assert!(s.distance >= best.distance);
                }
            }
        }
    }
}
