//! Forward simulation of the branching process with full genealogy.
//!
//! Individuals are stored append-only in birth order. The children of an
//! individual are appended together at its death, sorted by type, so they
//! form a contiguous block. Ulam-Harris labels are rebuilt on demand from
//! parent links.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::model::OffspringModel;

pub const DEFAULT_CAP: usize = 10_000_000;
pub const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForestError {
    #[error("population cap of {cap} individuals exceeded at t = {time}")]
    PopulationCap { cap: usize, time: f64 },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("root type {0} out of range")]
    BadRootType(usize),
}

/// Reproducible per-replicate random stream.
pub fn stream(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Individual {
    pub parent: u32,
    /// 1-based position among siblings.
    pub rank: u32,
    pub ty: u16,
    pub birth: f64,
    /// `f64::INFINITY` while alive at the horizon.
    pub death: f64,
    pub first_child: u32,
    pub n_children: u32,
}

impl Individual {
    pub fn is_alive_at(&self, t: f64) -> bool {
        self.birth <= t && t < self.death
    }

    pub fn children(&self) -> std::ops::Range<u32> {
        self.first_child..self.first_child + self.n_children
    }
}

#[derive(Debug, Clone)]
pub struct GenealogyTree {
    pub d: usize,
    pub root_type: usize,
    pub horizon: f64,
    pub individuals: Vec<Individual>,
}

impl GenealogyTree {
    pub fn new(d: usize, root_type: usize, horizon: f64) -> Self {
        let mut tree = GenealogyTree {
            d,
            root_type,
            horizon,
            individuals: Vec::new(),
        };
        tree.reset(root_type, horizon);
        tree
    }

    pub(crate) fn reset(&mut self, root_type: usize, horizon: f64) {
        self.root_type = root_type;
        self.horizon = horizon;
        self.individuals.clear();
        self.individuals.push(Individual {
            parent: NO_PARENT,
            rank: 0,
            ty: root_type as u16,
            birth: 0.0,
            death: f64::INFINITY,
            first_child: 0,
            n_children: 0,
        });
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn get(&self, idx: u32) -> &Individual {
        &self.individuals[idx as usize]
    }

    /// Records the death of `idx` at time `t` with children of the given
    /// types (in order). Returns the index of the first child.
    pub(crate) fn branch(&mut self, idx: u32, t: f64, ell: &[u32]) -> u32 {
        let first = self.individuals.len() as u32;
        let mut rank = 0;
        for (m, &count) in ell.iter().enumerate() {
            for _ in 0..count {
                rank += 1;
                self.individuals.push(Individual {
                    parent: idx,
                    rank,
                    ty: m as u16,
                    birth: t,
                    death: f64::INFINITY,
                    first_child: 0,
                    n_children: 0,
                });
            }
        }
        let ind = &mut self.individuals[idx as usize];
        ind.death = t;
        ind.first_child = first;
        ind.n_children = rank;
        first
    }

    fn check_time(&self, t: f64) -> Result<(), ForestError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ForestError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Offspring vector of a dead individual.
    pub fn offspring_vector(&self, idx: u32) -> Option<Vec<u32>> {
        let ind = self.get(idx);
        if ind.death.is_infinite() {
            return None;
        }
        let mut ell = vec![0u32; self.d];
        for c in ind.children() {
            ell[self.get(c).ty as usize] += 1;
        }
        Some(ell)
    }

    /// Ulam-Harris path: child ranks from the root down.
    pub fn label(&self, idx: u32) -> Vec<u32> {
        let mut path = Vec::new();
        let mut v = idx;
        while v != 0 {
            let ind = self.get(v);
            path.push(ind.rank);
            v = ind.parent;
        }
        path.reverse();
        path
    }

    pub fn label_string(&self, idx: u32) -> String {
        let mut s = String::from("r");
        for r in self.label(idx) {
            s.push('.');
            s.push_str(&r.to_string());
        }
        s
    }

    /// Individuals alive at time t in lexicographic label order.
    pub fn alive_at(&self, t: f64) -> Result<Vec<u32>, ForestError> {
        self.check_time(t)?;
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(v) = stack.pop() {
            let ind = self.get(v);
            if ind.birth > t {
                continue;
            }
            if t < ind.death {
                out.push(v);
            } else {
                stack.extend(ind.children().rev());
            }
        }
        Ok(out)
    }

    /// Individuals alive at the horizon, in lexicographic label order.
    pub fn alive(&self) -> Vec<u32> {
        self.alive_at(self.horizon).expect("horizon is in range")
    }

    pub fn population_at(&self, t: f64) -> Result<Vec<u64>, ForestError> {
        self.check_time(t)?;
        let mut z = vec![0u64; self.d];
        for ind in &self.individuals {
            if ind.is_alive_at(t) {
                z[ind.ty as usize] += 1;
            }
        }
        Ok(z)
    }

    /// Population at the horizon, counted from the open records.
    pub fn final_population(&self) -> Vec<u64> {
        let mut z = vec![0u64; self.d];
        for ind in &self.individuals {
            if ind.death.is_infinite() {
                z[ind.ty as usize] += 1;
            }
        }
        z
    }

    /// Newline-delimited records `label,type,birth,death,offspring_vector`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "label,type,birth,death,offspring_vector")?;
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        order.sort_by_cached_key(|&i| self.label(i));
        for i in order {
            let ind = self.get(i);
            let death = if ind.death.is_infinite() {
                String::new()
            } else {
                ind.death.to_string()
            };
            let off = self
                .offspring_vector(i)
                .map(|v| v.iter().map(u32::to_string).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                self.label_string(i),
                ind.ty + 1,
                ind.birth,
                death,
                off
            )?;
        }
        Ok(())
    }
}

/// Cumulative offspring tables for inverse-transform draws.
#[derive(Debug, Clone)]
pub struct OffspringSampler {
    tables: Vec<Vec<(f64, Vec<u32>)>>,
}

impl OffspringSampler {
    pub fn new(model: &OffspringModel) -> Self {
        let tables = model
            .offspring
            .iter()
            .map(|t| {
                let mut acc = 0.0;
                t.iter()
                    .filter(|o| o.p > 0.0)
                    .map(|o| {
                        acc += o.p;
                        (acc, o.ell.clone())
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        OffspringSampler { tables }
    }

    pub fn sample<R: Rng + ?Sized>(&self, ty: usize, rng: &mut R) -> &[u32] {
        let table = &self.tables[ty];
        let u = rng.random::<f64>() * table.last().map_or(1.0, |e| e.0);
        for (c, ell) in table {
            if u < *c {
                return ell;
            }
        }
        &table[table.len() - 1].1
    }
}

/// Reusable Gillespie engine.
pub struct TreeSimulator<'a> {
    model: &'a OffspringModel,
    sampler: OffspringSampler,
    alive: Vec<Vec<u32>>,
    pos: Vec<u32>,
    pub cap: usize,
}

impl<'a> TreeSimulator<'a> {
    pub fn new(model: &'a OffspringModel) -> Self {
        TreeSimulator {
            model,
            sampler: OffspringSampler::new(model),
            alive: vec![Vec::new(); model.d],
            pos: Vec::new(),
            cap: DEFAULT_CAP,
        }
    }

    /// Simulates into `tree`, reusing its storage.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        tree: &mut GenealogyTree,
        horizon: f64,
        root_type: usize,
        rng: &mut R,
    ) -> Result<(), ForestError> {
        let d = self.model.d;
        if root_type >= d {
            return Err(ForestError::BadRootType(root_type));
        }
        tree.d = d;
        tree.reset(root_type, horizon);
        for a in &mut self.alive {
            a.clear();
        }
        self.pos.clear();
        self.pos.push(0);
        self.alive[root_type].push(0);
        let alpha = &self.model.alpha;
        let mut t = 0.0;
        loop {
            let rate: f64 = (0..d).map(|i| alpha[i] * self.alive[i].len() as f64).sum();
            if rate <= 0.0 {
                break;
            }
            let e: f64 = rng.sample(Exp1);
            t += e / rate;
            if t > horizon {
                break;
            }
            let mut u = rng.random::<f64>() * rate;
            let mut ty = d - 1;
            for i in 0..d {
                let r = alpha[i] * self.alive[i].len() as f64;
                if u < r && !self.alive[i].is_empty() {
                    ty = i;
                    break;
                }
                u -= r;
            }
            if self.alive[ty].is_empty() {
                ty = (0..d).rev().find(|&i| !self.alive[i].is_empty()).expect("rate > 0");
            }
            let j = rng.random_range(0..self.alive[ty].len());
            let idx = self.alive[ty].swap_remove(j);
            if j < self.alive[ty].len() {
                let moved = self.alive[ty][j];
                self.pos[moved as usize] = j as u32;
            }
            let ell = self.sampler.sample(ty, rng);
            let first = tree.branch(idx, t, ell);
            let n = tree.individuals.len() as u32;
            for c in first..n {
                let cty = tree.individuals[c as usize].ty as usize;
                self.pos.push(self.alive[cty].len() as u32);
                self.alive[cty].push(c);
            }
            if tree.individuals.len() > self.cap {
                return Err(ForestError::PopulationCap { cap: self.cap, time: t });
            }
        }
        Ok(())
    }
}

pub fn simulate_tree<R: Rng + ?Sized>(
    model: &OffspringModel,
    horizon: f64,
    root_type: usize,
    rng: &mut R,
) -> Result<GenealogyTree, ForestError> {
    let mut tree = GenealogyTree::new(model.d, root_type, horizon);
    TreeSimulator::new(model).run(&mut tree, horizon, root_type, rng)?;
    Ok(tree)
}

/// Type counts Z_t only, without genealogy.
pub fn simulate_population<R: Rng + ?Sized>(
    model: &OffspringModel,
    sampler: &OffspringSampler,
    t_end: f64,
    root_type: usize,
    cap: u64,
    rng: &mut R,
) -> Result<Vec<u64>, ForestError> {
    let d = model.d;
    let mut z = vec![0u64; d];
    z[root_type] = 1;
    let mut t = 0.0;
    loop {
        let rate: f64 = (0..d).map(|i| model.alpha[i] * z[i] as f64).sum();
        if rate <= 0.0 {
            break;
        }
        let e: f64 = rng.sample(Exp1);
        t += e / rate;
        if t > t_end {
            break;
        }
        let mut u = rng.random::<f64>() * rate;
        let mut ty = d - 1;
        for i in 0..d {
            let r = model.alpha[i] * z[i] as f64;
            if u < r && z[i] > 0 {
                ty = i;
                break;
            }
            u -= r;
        }
        if z[ty] == 0 {
            ty = (0..d).rev().find(|&i| z[i] > 0).expect("rate > 0");
        }
        z[ty] -= 1;
        for (m, &c) in sampler.sample(ty, rng).iter().enumerate() {
            z[m] += c as u64;
        }
        if z.iter().sum::<u64>() > cap {
            return Err(ForestError::PopulationCap {
                cap: cap as usize,
                time: t,
            });
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_model, Outcome};

    fn sym2() -> OffspringModel {
        load_model(include_str!("../../../models/sym2.json")).unwrap()
    }

    fn check_structure(tree: &GenealogyTree) {
        for (i, ind) in tree.individuals.iter().enumerate() {
            if ind.parent != NO_PARENT {
                let p = tree.get(ind.parent);
                assert_eq!(p.death, ind.birth);
                let lp = tree.label(ind.parent);
                let l = tree.label(i as u32);
                assert_eq!(l.len(), lp.len() + 1);
                assert_eq!(&l[..lp.len()], &lp[..]);
            }
            if let Some(ell) = tree.offspring_vector(i as u32) {
                assert_eq!(ell.iter().sum::<u32>(), ind.n_children);
            } else {
                assert!(ind.death.is_infinite());
            }
        }
    }

    #[test]
    fn zero_horizon_keeps_root() {
        let mut rng = stream(1, 0);
        let tree = simulate_tree(&sym2(), 0.0, 1, &mut rng).unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.alive(), vec![0]);
        assert_eq!(tree.population_at(0.0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn structure_and_ordering() {
        let model = sym2();
        for rep in 0..200 {
            let mut rng = stream(7, rep);
            let tree = simulate_tree(&model, 6.0, 0, &mut rng).unwrap();
            check_structure(&tree);
            for &t in &[0.0, 1.3, 4.0, 6.0] {
                let alive = tree.alive_at(t).unwrap();
                let labels: Vec<_> = alive.iter().map(|&i| tree.label(i)).collect();
                assert!(labels.windows(2).all(|w| w[0] < w[1]));
                let z = tree.population_at(t).unwrap();
                assert_eq!(z.iter().sum::<u64>() as usize, alive.len());
            }
            assert_eq!(tree.population_at(6.0).unwrap(), tree.final_population());
        }
        assert!(tree_time_error());
    }

    fn tree_time_error() -> bool {
        let tree = GenealogyTree::new(2, 0, 1.0);
        matches!(tree.alive_at(2.0), Err(ForestError::TimeOutOfRange { .. }))
    }

    #[test]
    fn hand_built_bookkeeping() {
        let mut tree = GenealogyTree::new(2, 0, 2.0);
        tree.branch(0, 1.0, &[1, 1]);
        assert_eq!(tree.population_at(1.5).unwrap(), vec![1, 1]);
        assert_eq!(tree.alive_at(1.5).unwrap(), vec![1, 2]);
        assert_eq!(tree.label_string(2), "r.2");
        let mut buf = Vec::new();
        tree.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("label,type,birth,death,offspring_vector\nr,1,0,1,1;1\n"));
    }

    #[test]
    fn pure_death_law() {
        let model = OffspringModel {
            d: 1,
            alpha: vec![1.0],
            offspring: vec![vec![Outcome { ell: vec![0], p: 1.0 }]],
        };
        let n = 200_000u64;
        let t = 0.7;
        let sampler = OffspringSampler::new(&model);
        let dead = (0..n)
            .filter(|&r| {
                let mut rng = stream(3, r);
                simulate_population(&model, &sampler, t, 0, u64::MAX, &mut rng).unwrap()[0] == 0
            })
            .count() as f64;
        let p = 1.0 - (-t).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((dead / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn critical_mean_is_conserved() {
        let model = sym2();
        let sampler = OffspringSampler::new(&model);
        let n = 200_000u64;
        let (mut s, mut s2) = (0.0, 0.0);
        for r in 0..n {
            let mut rng = stream(11, r);
            let z = simulate_population(&model, &sampler, 10.0, 0, u64::MAX, &mut rng).unwrap();
            let x = (z[0] + z[1]) as f64;
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn cap_is_reported() {
        let model = sym2();
        let mut sim = TreeSimulator::new(&model);
        sim.cap = 3;
        let mut tree = GenealogyTree::new(2, 0, 50.0);
        let mut hit = false;
        for r in 0..100 {
            let mut rng = stream(5, r);
            if let Err(ForestError::PopulationCap { .. }) = sim.run(&mut tree, 50.0, 0, &mut rng) {
                hit = true;
                break;
            }
        }
        assert!(hit);
    }
}
