//! Uniform samples from the population at the horizon and the coalescent
//! record of their ancestry: split times, split types, offspring vectors and
//! coloured partitions of the sample marks.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use thiserror::Error;

use crate::forest::GenealogyTree;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenealogyError {
    #[error("insufficient population: {n} alive, {k} requested")]
    InsufficientPopulation { n: usize, k: usize },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("sampled individual {0} is not alive at the horizon")]
    NotAlive(u32),
}

/// Block sizes a_{m,q}: for each type, the multiset of sizes of the blocks
/// following children of that type, kept in non-increasing order.
pub type BlockSizes = Vec<Vec<u32>>;

pub fn canonical_sizes(mut sizes: BlockSizes) -> BlockSizes {
    for s in &mut sizes {
        s.sort_unstable_by(|a, b| b.cmp(a));
    }
    sizes
}

/// Marks (1-based) grouped into blocks, the blocks grouped by child type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColouredPartition {
    pub blocks: Vec<Vec<Vec<u8>>>,
}

impl ColouredPartition {
    /// Canonical form: marks sorted within blocks, blocks sorted by their
    /// smallest mark within each type.
    pub fn new(mut blocks: Vec<Vec<Vec<u8>>>) -> Self {
        for per_type in &mut blocks {
            for b in per_type.iter_mut() {
                b.sort_unstable();
            }
            per_type.retain(|b| !b.is_empty());
            per_type.sort_by_key(|b| b[0]);
        }
        ColouredPartition { blocks }
    }

    pub fn d(&self) -> usize {
        self.blocks.len()
    }

    /// Number of blocks per type.
    pub fn g(&self) -> Vec<u32> {
        self.blocks.iter().map(|b| b.len() as u32).collect()
    }

    /// Marks per type.
    pub fn abar(&self) -> Vec<u32> {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|x| x.len() as u32).sum())
            .collect()
    }

    pub fn sizes(&self) -> BlockSizes {
        canonical_sizes(
            self.blocks
                .iter()
                .map(|b| b.iter().map(|x| x.len() as u32).collect())
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.abar().iter().sum::<u32>() as usize
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn marks(&self) -> Vec<u8> {
        let mut all: Vec<u8> = self.blocks.iter().flatten().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// `type:block|block;…` with 1-based types and comma-joined marks.
    pub fn encode(&self) -> String {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(|(m, b)| {
                let inner: Vec<String> = b
                    .iter()
                    .map(|blk| blk.iter().map(u8::to_string).collect::<Vec<_>>().join(","))
                    .collect();
                format!("{}:{}", m + 1, inner.join("|"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// ∏_{m: g_m ≠ 0} (ξ_m / ℓ·ξ)^{ā_m} ℓ_m^{⌊g_m⌋}: the law of the coloured
/// partition when every mark independently follows a child, choosing type m
/// with probability ℓ_m ξ_m / ℓ·ξ and then a uniform child of that type.
pub fn coloured_partition_probability(partition: &ColouredPartition, ell: &[u32], xi: &[f64]) -> f64 {
    let g = partition.g();
    let abar = partition.abar();
    if g.iter().zip(ell).any(|(&gm, &lm)| gm > lm) {
        return 0.0;
    }
    let lxi: f64 = ell.iter().zip(xi).map(|(&l, &x)| l as f64 * x).sum();
    let mut p = 1.0;
    for m in 0..ell.len() {
        if g[m] == 0 {
            continue;
        }
        p *= (xi[m] / lxi).powi(abar[m] as i32) * falling(ell[m], g[m]);
    }
    p
}

/// ℓ^{⌊g⌋} = ℓ(ℓ−1)…(ℓ−g+1).
pub fn falling(l: u32, g: u32) -> f64 {
    if g > l {
        return 0.0;
    }
    (0..g).map(|i| (l - i) as f64).product()
}

/// ∏_m ℓ_m^{⌊g_m⌋}.
pub fn falling_vec(ell: &[u32], g: &[u32]) -> f64 {
    ell.iter().zip(g).map(|(&l, &gm)| falling(l, gm)).product()
}

fn factorial_u128(n: u32) -> u128 {
    (1..=n as u128).product()
}

/// Number of coloured partitions of k labelled marks with the given block
/// sizes: k!/∏ā_m! · ∏_m [ā_m!/∏_q a_{m,q}! · 1/∏_n d_{m,n}!] where d_{m,n}
/// counts the blocks of type m with size n.
pub fn partition_count(sizes: &BlockSizes) -> u128 {
    let k: u32 = sizes.iter().flatten().sum();
    let mut num = factorial_u128(k);
    let mut den: u128 = 1;
    for per_type in sizes {
        let abar: u32 = per_type.iter().sum();
        num *= factorial_u128(abar);
        den *= factorial_u128(abar);
        for &a in per_type {
            den *= factorial_u128(a);
        }
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for &a in per_type {
            *counts.entry(a).or_default() += 1;
        }
        for &c in counts.values() {
            den *= factorial_u128(c);
        }
    }
    num / den
}

/// All set partitions of `marks`, as lists of blocks.
pub fn set_partitions(marks: &[u8]) -> Vec<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    let mut current: Vec<Vec<u8>> = Vec::new();
    fn rec(marks: &[u8], i: usize, current: &mut Vec<Vec<u8>>, out: &mut Vec<Vec<Vec<u8>>>) {
        if i == marks.len() {
            out.push(current.clone());
            return;
        }
        for b in 0..current.len() {
            current[b].push(marks[i]);
            rec(marks, i + 1, current, out);
            current[b].pop();
        }
        current.push(vec![marks[i]]);
        rec(marks, i + 1, current, out);
        current.pop();
    }
    rec(marks, 0, &mut current, &mut out);
    out
}

/// Every coloured partition of `marks` into blocks over `d` types.
pub fn enumerate_coloured_partitions(marks: &[u8], d: usize) -> Vec<ColouredPartition> {
    let mut out = Vec::new();
    for sp in set_partitions(marks) {
        let nb = sp.len();
        let total = d.pow(nb as u32);
        for code in 0..total {
            let mut blocks = vec![Vec::new(); d];
            let mut c = code;
            for b in &sp {
                blocks[c % d].push(b.clone());
                c /= d;
            }
            out.push(ColouredPartition::new(blocks));
        }
    }
    out
}

/// Integer partitions of n in non-increasing order.
pub fn integer_partitions(n: u32) -> Vec<Vec<u32>> {
    fn rec(n: u32, max: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if n == 0 {
            out.push(cur.clone());
            return;
        }
        for a in (1..=n.min(max)).rev() {
            cur.push(a);
            rec(n - a, a, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, n, &mut Vec::new(), &mut out);
    out
}

/// Weak compositions of n into d parts.
pub fn compositions(n: u32, d: usize) -> Vec<Vec<u32>> {
    if d == 0 {
        return if n == 0 { vec![vec![]] } else { vec![] };
    }
    if d == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in compositions(n - first, d - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Every block-size family with total k over d types.
pub fn enumerate_block_families(k: u32, d: usize) -> Vec<BlockSizes> {
    let mut out = Vec::new();
    for abar in compositions(k, d) {
        let mut acc: Vec<BlockSizes> = vec![Vec::new()];
        for &a in &abar {
            let parts = if a == 0 { vec![vec![]] } else { integer_partitions(a) };
            let mut next = Vec::new();
            for prefix in &acc {
                for p in &parts {
                    let mut f = prefix.clone();
                    f.push(p.clone());
                    next.push(f);
                }
            }
            acc = next;
        }
        out.extend(acc);
    }
    out
}

/// Ordered sample of k distinct individuals alive at the horizon, uniform
/// over the N^{⌊k⌋} ordered k-tuples.
pub fn uniform_sample<R: Rng + ?Sized>(
    tree: &GenealogyTree,
    k: usize,
    rng: &mut R,
) -> Result<Vec<u32>, GenealogyError> {
    let mut alive = tree.alive();
    let n = alive.len();
    if n < k {
        return Err(GenealogyError::InsufficientPopulation { n, k });
    }
    for i in 0..k {
        let j = rng.random_range(i..n);
        alive.swap(i, j);
    }
    alive.truncate(k);
    Ok(alive)
}

fn ancestor_at(tree: &GenealogyTree, mut v: u32, t: f64) -> u32 {
    while tree.get(v).birth > t {
        v = tree.get(v).parent;
    }
    v
}

/// Blocks of marks (1-based) that share a time-t ancestor.
pub fn partition_process(
    tree: &GenealogyTree,
    sample: &[u32],
    t: f64,
) -> Result<Vec<Vec<u8>>, GenealogyError> {
    if !(0.0..=tree.horizon).contains(&t) {
        return Err(GenealogyError::TimeOutOfRange { t, horizon: tree.horizon });
    }
    let mut groups: Vec<(u32, Vec<u8>)> = Vec::new();
    for (i, &leaf) in sample.iter().enumerate() {
        let a = ancestor_at(tree, leaf, t);
        match groups.iter_mut().find(|(v, _)| *v == a) {
            Some((_, b)) => b.push(i as u8 + 1),
            None => groups.push((a, vec![i as u8 + 1])),
        }
    }
    let mut blocks: Vec<Vec<u8>> = groups.into_iter().map(|(_, b)| b).collect();
    blocks.sort_by_key(|b| b[0]);
    Ok(blocks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvent {
    pub time: f64,
    pub type_before: usize,
    pub offspring: Vec<u32>,
    pub partition: ColouredPartition,
    pub vertex: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecords {
    pub events: Vec<SplitEvent>,
    /// Number of split events.
    pub m: usize,
}

/// Mark sets carried by every ancestor of the sample.
pub(crate) fn ancestral_marks(tree: &GenealogyTree, sample: &[u32]) -> HashMap<u32, u64> {
    let mut marks: HashMap<u32, u64> = HashMap::new();
    for (i, &leaf) in sample.iter().enumerate() {
        let bit = 1u64 << i;
        let mut v = leaf;
        loop {
            let e = marks.entry(v).or_insert(0);
            let fresh = *e == 0;
            *e |= bit;
            let _ = fresh;
            if v == 0 {
                break;
            }
            v = tree.get(v).parent;
        }
    }
    marks
}

fn mask_marks(mask: u64) -> Vec<u8> {
    (0..64u8).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect()
}

/// Split events of the sample genealogy in time order.
///
/// Panics when two split events share a time stamp: with continuous clocks
/// this signals corrupted input.
pub fn split_records(tree: &GenealogyTree, sample: &[u32]) -> Result<SplitRecords, GenealogyError> {
    for &s in sample {
        if !tree.get(s).death.is_infinite() {
            return Err(GenealogyError::NotAlive(s));
        }
    }
    let marks = ancestral_marks(tree, sample);
    let mut events = Vec::new();
    for &v in marks.keys() {
        let ind = tree.get(v);
        if ind.death.is_infinite() {
            continue;
        }
        let carrying: Vec<u32> = ind.children().filter(|c| marks.contains_key(c)).collect();
        if carrying.len() < 2 {
            continue;
        }
        let mut blocks = vec![Vec::new(); tree.d];
        for c in carrying {
            blocks[tree.get(c).ty as usize].push(mask_marks(marks[&c]));
        }
        events.push(SplitEvent {
            time: ind.death,
            type_before: ind.ty as usize,
            offspring: tree.offspring_vector(v).expect("dead vertex"),
            partition: ColouredPartition::new(blocks),
            vertex: v,
        });
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    assert!(
        events.windows(2).all(|w| w[0].time < w[1].time),
        "split events with identical times"
    );
    let created: usize = events.iter().map(|e| e.partition.n_blocks() - 1).sum();
    debug_assert_eq!(created + 1, sample.len().max(1));
    let m = events.len();
    Ok(SplitRecords { events, m })
}

pub const SPLIT_CSV_HEADER: &str = "replicate_id,h,time,type_before,offspring_vector,partition,M";

/// One CSV row per split event.
pub fn write_split_rows<W: Write>(mut w: W, replicate_id: u64, records: &SplitRecords) -> std::io::Result<()> {
    for (h, e) in records.events.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},\"{}\",{}",
            replicate_id,
            h + 1,
            e.time,
            e.type_before + 1,
            e.offspring.iter().map(u32::to_string).collect::<Vec<_>>().join(";"),
            e.partition.encode(),
            records.m
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{simulate_tree, stream};
    use crate::model::load_model;

    fn fixture() -> GenealogyTree {
        // root -> (A, X) at t = 1; X -> (B, C) at t = 2
        let mut tree = GenealogyTree::new(1, 0, 3.0);
        tree.branch(0, 1.0, &[2]);
        tree.branch(2, 2.0, &[2]);
        tree
    }

    #[test]
    fn hand_built_splits() {
        let tree = fixture();
        let sample = [1, 3, 4];
        let rec = split_records(&tree, &sample).unwrap();
        assert_eq!(rec.m, 2);
        assert_eq!(rec.events[0].time, 1.0);
        assert_eq!(rec.events[0].partition.blocks, vec![vec![vec![1], vec![2, 3]]]);
        assert_eq!(rec.events[1].time, 2.0);
        assert_eq!(rec.events[1].partition.blocks, vec![vec![vec![2], vec![3]]]);
        assert_eq!(partition_process(&tree, &sample, 0.0).unwrap(), vec![vec![1, 2, 3]]);
        assert_eq!(partition_process(&tree, &sample, 1.5).unwrap(), vec![vec![1], vec![2, 3]]);
        assert_eq!(partition_process(&tree, &sample, 3.0).unwrap(), vec![vec![1], vec![2], vec![3]]);
        let single = split_records(&tree, &[3]).unwrap();
        assert_eq!(single.m, 0);
        let pair = split_records(&tree, &[3, 4]).unwrap();
        assert_eq!(pair.m, 1);
        assert_eq!(pair.events[0].partition.n_blocks(), 2);
    }

    #[test]
    fn csv_rows() {
        let tree = fixture();
        let rec = split_records(&tree, &[1, 3, 4]).unwrap();
        let mut buf = Vec::new();
        write_split_rows(&mut buf, 7, &rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "7,1,1,1,2,\"1:1|2,3\",2");
    }

    #[test]
    fn paper_style_example_probability() {
        let p = ColouredPartition::new(vec![vec![vec![8, 7], vec![1, 3, 4]], vec![vec![2], vec![5], vec![6]]]);
        let v = coloured_partition_probability(&p, &[2, 4], &[0.5, 0.5]);
        assert!((v - 48.0 / 6f64.powi(8)).abs() < 1e-18);
        let all = ColouredPartition::new(vec![vec![vec![1, 2, 3]]]);
        assert_eq!(coloured_partition_probability(&all, &[1], &[1.0]), 1.0);
        let infeasible = ColouredPartition::new(vec![vec![vec![1], vec![2]], vec![]]);
        assert_eq!(coloured_partition_probability(&infeasible, &[1, 3], &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn partition_probabilities_sum_to_one() {
        let xi = [0.3, 0.7];
        for k in 1..=4u8 {
            let marks: Vec<u8> = (1..=k).collect();
            let all = enumerate_coloured_partitions(&marks, 2);
            for ell in [[1, 0], [0, 2], [1, 1], [2, 2], [1, 3], [3, 1]] {
                let s: f64 = all.iter().map(|p| coloured_partition_probability(p, &ell, &xi)).sum();
                assert!((s - 1.0).abs() < 1e-12, "k={k} ell={ell:?} s={s}");
            }
        }
    }

    #[test]
    fn partition_count_examples() {
        assert_eq!(partition_count(&vec![vec![1, 1]]), 1);
        assert_eq!(partition_count(&vec![vec![1], vec![1]]), 2);
        assert_eq!(partition_count(&vec![vec![2, 1]]), 3);
    }

    #[test]
    fn partition_count_totals() {
        for d in 1..=2usize {
            for k in 1..=5u32 {
                let marks: Vec<u8> = (1..=k as u8).collect();
                let total = enumerate_coloured_partitions(&marks, d).len() as u128;
                let by_family: u128 = enumerate_block_families(k, d).iter().map(partition_count).sum();
                assert_eq!(total, by_family);
                let mut tally: HashMap<BlockSizes, u128> = HashMap::new();
                for p in enumerate_coloured_partitions(&marks, d) {
                    *tally.entry(p.sizes()).or_default() += 1;
                }
                for (fam, n) in tally {
                    assert_eq!(partition_count(&fam), n);
                }
            }
        }
    }

    #[test]
    fn sampling_frequencies() {
        let mut tree = GenealogyTree::new(1, 0, 2.0);
        tree.branch(0, 1.0, &[3]);
        let n = 60_000;
        let mut single = [0u32; 4];
        let mut pairs: HashMap<(u32, u32), u32> = HashMap::new();
        for r in 0..n {
            let mut rng = stream(2, r);
            single[uniform_sample(&tree, 1, &mut rng).unwrap()[0] as usize] += 1;
            let s = uniform_sample(&tree, 2, &mut rng).unwrap();
            *pairs.entry((s[0], s[1])).or_default() += 1;
        }
        for &c in &single[1..] {
            let p = 1.0 / 3.0;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * se);
        }
        assert_eq!(pairs.len(), 6);
        for &c in pairs.values() {
            let p = 1.0 / 6.0;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * se);
        }
        let mut rng = stream(2, 0);
        let full = uniform_sample(&tree, 3, &mut rng).unwrap();
        let mut sorted = full.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 2, 3]);
        assert!(matches!(
            uniform_sample(&tree, 4, &mut rng),
            Err(GenealogyError::InsufficientPopulation { n: 3, k: 4 })
        ));
    }

    #[test]
    fn random_genealogies_are_consistent() {
        let model = load_model(include_str!("../../../models/asym2.json")).unwrap();
        let mut checked = 0;
        for r in 0..3000 {
            let mut rng = stream(17, r);
            let tree = simulate_tree(&model, 8.0, 0, &mut rng).unwrap();
            let k = 4;
            let Ok(sample) = uniform_sample(&tree, k, &mut rng) else { continue };
            checked += 1;
            let rec = split_records(&tree, &sample).unwrap();
            let created: usize = rec.events.iter().map(|e| e.partition.n_blocks() - 1).sum();
            assert_eq!(created, k - 1);
            for e in &rec.events {
                let g = e.partition.g();
                assert!(g.iter().zip(&e.offspring).all(|(a, b)| a <= b));
                let before = partition_process(&tree, &sample, e.time - 1e-9).unwrap();
                let after = partition_process(&tree, &sample, e.time).unwrap();
                assert_eq!(after.len(), before.len() + e.partition.n_blocks() - 1);
            }
            let mut prev = partition_process(&tree, &sample, 0.0).unwrap();
            assert_eq!(prev.len(), 1);
            for step in 1..=16 {
                let cur = partition_process(&tree, &sample, step as f64 * 0.5).unwrap();
                for b in &cur {
                    assert!(prev.iter().any(|p| b.iter().all(|x| p.contains(x))));
                }
                prev = cur;
            }
            assert_eq!(prev.len(), k);
        }
        assert!(checked > 50);
    }
}
