//! Histogram-stratified train/val/test splitting with group constraints.
//!
//! Units (animals or slides) carry per-class pixel counts and belong to one
//! group (study). Test takes whole groups; train and val share no unit. A
//! best-improvement local search moves single units between train and val
//! and whole groups in and out of test, minimizing
//! `Σ pairwise W1 + RATIO_WEIGHT · Σ |achieved − target|`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const RATIO_WEIGHT: f64 = 1.0;
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitUnit {
    pub id: String,
    pub group: String,
    pub counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// First Wasserstein distance between two class-index histograms after
/// normalizing each to unit mass.
///
/// Depends on the class ordering: it is a transport cost along the index
/// axis, so permuting classes changes the value in general.
pub fn w1_histograms(a: &[u64], b: &[u64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "histograms have {} and {} bins",
            a.len(),
            b.len()
        )));
    }
    let sa: u128 = a.iter().map(|&v| v as u128).sum();
    let sb: u128 = b.iter().map(|&v| v as u128).sum();
    if sa == 0 || sb == 0 {
        return Err(Error::InvalidArgument("histogram has zero total mass".into()));
    }
    // Σ_j |CA_j/Sa − CB_j/Sb| = Σ_j |CA_j·Sb − CB_j·Sa| / (Sa·Sb), summed exactly
    let (mut ca, mut cb, mut num) = (0u128, 0u128, 0u128);
    for (&x, &y) in a.iter().zip(b) {
        ca += x as u128;
        cb += y as u128;
        num += (ca * sb).abs_diff(cb * sa);
    }
    Ok(num as f64 / (sa as f64 * sb as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub splits: Vec<Split>,
    pub ratios: [f64; 3],
    pub objective: f64,
    /// Objective after initialization and after every accepted move.
    pub trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub max_iterations: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: 0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

struct Problem<'a> {
    units: &'a [SplitUnit],
    groups: Vec<Vec<usize>>,
    bins: usize,
    total: f64,
    ratios: [f64; 3],
}

#[derive(Clone, Copy, Debug)]
enum Move {
    Unit(usize, Split),
    Group(usize, Split),
}

impl Problem<'_> {
    fn histograms(&self, splits: &[Split]) -> [Vec<u64>; 3] {
        let mut h = [vec![0u64; self.bins], vec![0u64; self.bins], vec![0u64; self.bins]];
        for (u, &s) in self.units.iter().zip(splits) {
            for (acc, &c) in h[s.index()].iter_mut().zip(&u.counts) {
                *acc += c;
            }
        }
        h
    }

    /// `None` when a split is empty.
    fn evaluate(&self, splits: &[Split]) -> Option<(f64, [f64; 3])> {
        let h = self.histograms(splits);
        let mass: Vec<u64> = h.iter().map(|v| v.iter().sum()).collect();
        if mass.contains(&0) {
            return None;
        }
        let mut w = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                w += w1_histograms(&h[i], &h[j]).ok()?;
            }
        }
        let achieved = [
            mass[0] as f64 / self.total,
            mass[1] as f64 / self.total,
            mass[2] as f64 / self.total,
        ];
        let dev: f64 = achieved.iter().zip(&self.ratios).map(|(a, t)| (a - t).abs()).sum();
        Some((w + RATIO_WEIGHT * dev, achieved))
    }

    fn apply(&self, splits: &mut [Split], mv: Move) {
        match mv {
            Move::Unit(u, s) => splits[u] = s,
            Move::Group(g, s) => {
                for &u in &self.groups[g] {
                    splits[u] = s;
                }
            }
        }
    }

    fn candidate_moves(&self, splits: &[Split]) -> Vec<Move> {
        let mut moves = Vec::new();
        for (u, &s) in splits.iter().enumerate() {
            match s {
                Split::Train => moves.push(Move::Unit(u, Split::Val)),
                Split::Val => moves.push(Move::Unit(u, Split::Train)),
                Split::Test => {}
            }
        }
        for (g, members) in self.groups.iter().enumerate() {
            if splits[members[0]] == Split::Test {
                moves.push(Move::Group(g, Split::Train));
                moves.push(Move::Group(g, Split::Val));
            } else {
                moves.push(Move::Group(g, Split::Test));
            }
        }
        moves
    }
}

/// Checks that test groups are whole and disjoint from train and val.
pub fn check_constraints(units: &[SplitUnit], splits: &[Split]) -> Result<()> {
    if units.len() != splits.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} units but {} assignments",
            units.len(),
            splits.len()
        )));
    }
    let mut in_test: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for (u, &s) in units.iter().zip(splits) {
        let e = in_test.entry(u.group.as_str()).or_default();
        if s == Split::Test {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    if let Some((g, _)) = in_test.iter().find(|(_, &(t, o))| t && o) {
        return Err(Error::InfeasibleSplit(format!("group {g} is split between test and train/val")));
    }
    Ok(())
}

fn validate_units(units: &[SplitUnit]) -> Result<usize> {
    let bins = units
        .first()
        .map(|u| u.counts.len())
        .ok_or_else(|| Error::InfeasibleSplit("no units".into()))?;
    let mut ids = std::collections::BTreeSet::new();
    for u in units {
        if u.counts.len() != bins {
            return Err(Error::DimensionMismatch(format!(
                "unit {} has {} counts, expected {bins}",
                u.id,
                u.counts.len()
            )));
        }
        if u.counts.iter().all(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!("unit {} has no pixels", u.id)));
        }
        if !ids.insert(u.id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate unit id {}", u.id)));
        }
    }
    Ok(bins)
}

pub fn stratified_split(units: &[SplitUnit], cfg: &SplitConfig) -> Result<SplitAssignment> {
    let bins = validate_units(units)?;
    if cfg.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (cfg.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("target ratios {:?} must be positive and sum to 1", cfg.ratios)));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in units.iter().enumerate() {
        by_group.entry(u.group.as_str()).or_default().push(i);
    }
    if by_group.len() < 3 {
        return Err(Error::InfeasibleSplit(format!(
            "need at least 3 groups, found {}",
            by_group.len()
        )));
    }
    let groups: Vec<Vec<usize>> = by_group.into_values().collect();
    let total: u64 = units.iter().flat_map(|u| &u.counts).sum();
    let problem = Problem {
        units,
        groups,
        bins,
        total: total as f64,
        ratios: cfg.ratios,
    };

    let mut splits = initial_assignment(&problem, cfg)?;
    let (mut objective, mut ratios) = problem
        .evaluate(&splits)
        .ok_or_else(|| Error::InfeasibleSplit("initial assignment leaves a split empty".into()))?;
    let mut trace = vec![objective];

    for _ in 0..cfg.max_iterations {
        let mut best: Option<(f64, [f64; 3], Move)> = None;
        for mv in problem.candidate_moves(&splits) {
            let mut trial = splits.clone();
            problem.apply(&mut trial, mv);
            if let Some((obj, r)) = problem.evaluate(&trial) {
                if obj < objective && best.as_ref().is_none_or(|b| obj < b.0) {
                    best = Some((obj, r, mv));
                }
            }
        }
        let Some((obj, r, mv)) = best else { break };
        problem.apply(&mut splits, mv);
        objective = obj;
        ratios = r;
        trace.push(objective);
        log::debug!("split move {mv:?} -> objective {objective:.6}");
    }
    check_constraints(units, &splits)?;
    Ok(SplitAssignment {
        splits,
        ratios,
        objective,
        trace,
    })
}

fn initial_assignment(problem: &Problem<'_>, cfg: &SplitConfig) -> Result<Vec<Split>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mass = |u: usize| problem.units[u].counts.iter().sum::<u64>() as f64;
    let mut order: Vec<usize> = (0..problem.groups.len()).collect();
    order.shuffle(&mut rng);

    let mut splits = vec![Split::Train; problem.units.len()];
    let mut test_mass = 0.0;
    let mut test_groups = 0;
    let test_target = cfg.ratios[2] * problem.total;
    for &g in &order[..order.len() - 1] {
        if test_groups > 0 && test_mass >= test_target {
            break;
        }
        let remaining: usize = splits.iter().filter(|&&s| s != Split::Test).count() - problem.groups[g].len();
        if remaining < 2 {
            continue;
        }
        for &u in &problem.groups[g] {
            splits[u] = Split::Test;
            test_mass += mass(u);
        }
        test_groups += 1;
    }
    if test_groups == 0 {
        return Err(Error::InfeasibleSplit(
            "no group can go to test while leaving units for train and val".into(),
        ));
    }

    let mut rest: Vec<usize> = (0..splits.len()).filter(|&u| splits[u] != Split::Test).collect();
    rest.shuffle(&mut rng);
    let rest_mass: f64 = rest.iter().map(|&u| mass(u)).sum();
    let val_target = rest_mass * cfg.ratios[1] / (cfg.ratios[0] + cfg.ratios[1]);
    let mut val_mass = 0.0;
    for (i, &u) in rest.iter().enumerate() {
        let must_fill = i == 0;
        let last = i + 1 == rest.len();
        if (must_fill || val_mass < val_target) && !last {
            splits[u] = Split::Val;
            val_mass += mass(u);
        }
    }
    Ok(splits)
}

pub fn read_units_csv(path: &Path) -> Result<Vec<SplitUnit>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "group" {
        return Err(Error::Parse(format!(
            "{}: expected header id,group,<class counts...>",
            path.display()
        )));
    }
    let mut units = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let counts = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        units.push(SplitUnit {
            id: rec[0].to_string(),
            group: rec[1].to_string(),
            counts,
        });
    }
    Ok(units)
}

pub fn write_assignment_csv(path: &Path, units: &[SplitUnit], assignment: &SplitAssignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "group", "split"])?;
    for (u, s) in units.iter().zip(&assignment.splits) {
        w.write_record([u.id.as_str(), u.group.as_str(), s.tag()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn trace_text(assignment: &SplitAssignment) -> String {
    let mut out = String::from("iteration,objective\n");
    for (i, v) in assignment.trace.iter().enumerate() {
        writeln!(out, "{i},{v:?}").unwrap();
    }
    out
}
