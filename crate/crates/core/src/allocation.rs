//! Covariate-constrained selection of villages into the two arms.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::census::{largest_remainder, CensusTable, Group};
use crate::error::{Error, Result};
use crate::glmfit::mean_sd;
use crate::rng::{substream, text_key};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// Every covariate SMD at or below the threshold.
    #[default]
    AllBelow,
    /// Mean of the three SMDs at or below the threshold.
    MeanBelow,
}

impl AcceptanceRule {
    pub fn as_str(self) -> &'static str {
        match self {
            AcceptanceRule::AllBelow => "AllBelow",
            AcceptanceRule::MeanBelow => "MeanBelow",
        }
    }
}

impl std::str::FromStr for AcceptanceRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AllBelow" | "all-below" | "all_below" => Ok(AcceptanceRule::AllBelow),
            "MeanBelow" | "mean-below" | "mean_below" => Ok(AcceptanceRule::MeanBelow),
            _ => Err(Error::Parse(format!("unknown acceptance rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationSpec {
    pub villages_per_arm: usize,
    pub smd_threshold: f64,
    pub max_draws: u64,
    pub acceptance_rule: AcceptanceRule,
}

pub const DEFAULT_SMD_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MAX_DRAWS: u64 = 1_000_000;

impl AllocationSpec {
    pub fn new(villages_per_arm: usize) -> Self {
        Self {
            villages_per_arm,
            smd_threshold: DEFAULT_SMD_THRESHOLD,
            max_draws: DEFAULT_MAX_DRAWS,
            acceptance_rule: AcceptanceRule::AllBelow,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.villages_per_arm == 0 || self.max_draws == 0 {
            return Err(Error::Spec("villages_per_arm and max_draws must be positive".into()));
        }
        if !(self.smd_threshold >= 0.0) {
            return Err(Error::Spec(format!("smd_threshold must be >= 0, got {}", self.smd_threshold)));
        }
        Ok(())
    }

    /// Quantity compared with the threshold: max SMD or mean SMD.
    pub fn criterion(&self, smds: [f64; 3]) -> f64 {
        match self.acceptance_rule {
            AcceptanceRule::AllBelow => smds[0].max(smds[1]).max(smds[2]),
            AcceptanceRule::MeanBelow => (smds[0] + smds[1] + smds[2]) / 3.0,
        }
    }

    pub fn accepts(&self, smds: [f64; 3]) -> bool {
        self.criterion(smds) <= self.smd_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceReport {
    pub smd_population: f64,
    pub smd_distance: f64,
    pub smd_penta0: f64,
    pub accepted: bool,
}

impl BalanceReport {
    pub fn smds(&self) -> [f64; 3] {
        [self.smd_population, self.smd_distance, self.smd_penta0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub draw_index: u64,
    /// Sorted ascending.
    pub control_ids: Vec<u32>,
    /// Sorted ascending.
    pub intervention_ids: Vec<u32>,
    pub balance: BalanceReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPool {
    pub spec: AllocationSpec,
    pub seed: u64,
    pub accepted: Vec<Allocation>,
    pub draws_attempted: u64,
    pub acceptance_rate: f64,
    /// Threshold originally requested when `spec.smd_threshold` was raised
    /// by [`build_pool_relaxed`].
    pub requested_threshold: Option<f64>,
}

/// Standardized mean difference |m₁ − m₀| / sqrt((s₀² + s₁²)/2) with sample SDs.
pub fn smd(arm0: &[f64], arm1: &[f64]) -> f64 {
    let (m0, s0) = mean_sd(arm0);
    let (m1, s1) = mean_sd(arm1);
    let diff = (m1 - m0).abs();
    let pooled = ((s0 * s0 + s1 * s1) / 2.0).sqrt();
    if pooled == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    diff / pooled
}

/// Per-area quotas for one arm: `(area index, villages in area, quota)` in
/// health-area name order.
pub fn area_quotas(census: &CensusTable, group: Group, n: usize) -> Result<Vec<(usize, Vec<usize>, usize)>> {
    let mut members: Vec<(usize, Vec<usize>)> = Vec::new();
    for a in 0..census.area_names.len() {
        let rows: Vec<usize> = (0..census.len()).filter(|&i| census.area[i] == a && census.group[i] == group).collect();
        if !rows.is_empty() {
            members.push((a, rows));
        }
    }
    if members.is_empty() {
        return Err(Error::Spec(format!("census has no villages in {}", group.as_str())));
    }
    let sizes: Vec<f64> = members.iter().map(|m| m.1.len() as f64).collect();
    let quotas = largest_remainder(&sizes, n);
    members
        .into_iter()
        .zip(quotas)
        .map(|((a, rows), q)| {
            if q > rows.len() {
                Err(Error::Spec(format!(
                    "health area `{}` needs {q} villages but has only {}",
                    census.area_names[a],
                    rows.len()
                )))
            } else {
                Ok((a, rows, q))
            }
        })
        .collect()
}

/// Balance of an allocation given sorted id lists.
pub fn balance_report(census: &CensusTable, control_ids: &[u32], intervention_ids: &[u32], spec: &AllocationSpec) -> Result<BalanceReport> {
    let rows = |ids: &[u32]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| census.position(*id).ok_or_else(|| Error::Pool(format!("village id {id} not in census"))))
            .collect()
    };
    let r0 = rows(control_ids)?;
    let r1 = rows(intervention_ids)?;
    let col = |rows: &[usize], f: &dyn Fn(usize) -> f64| rows.iter().map(|&i| f(i)).collect::<Vec<f64>>();
    let pop = |i: usize| census.population[i];
    let dist = |i: usize| census.distance[i];
    let rate = |i: usize| census.baseline_rate(i);
    let smds = [
        smd(&col(&r0, &pop), &col(&r1, &pop)),
        smd(&col(&r0, &dist), &col(&r1, &dist)),
        smd(&col(&r0, &rate), &col(&r1, &rate)),
    ];
    Ok(BalanceReport { smd_population: smds[0], smd_distance: smds[1], smd_penta0: smds[2], accepted: spec.accepts(smds) })
}

/// Quotas for both arms, computed once per pool.
pub struct Sampler {
    arms: [Vec<(usize, Vec<usize>, usize)>; 2],
}

impl Sampler {
    pub fn new(census: &CensusTable, spec: &AllocationSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            arms: [
                area_quotas(census, Group::Control, spec.villages_per_arm)?,
                area_quotas(census, Group::Intervention, spec.villages_per_arm)?,
            ],
        })
    }

    /// Draws one allocation: within each health area, `quota` villages
    /// without replacement.
    pub fn draw<R: Rng>(&self, census: &CensusTable, spec: &AllocationSpec, draw_index: u64, rng: &mut R) -> Result<Allocation> {
        let mut ids: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
        for (arm, quotas) in self.arms.iter().enumerate() {
            for (_, rows, q) in quotas {
                for k in sample(rng, rows.len(), *q) {
                    ids[arm].push(census.ids[rows[k]]);
                }
            }
            ids[arm].sort_unstable();
        }
        let balance = balance_report(census, &ids[0], &ids[1], spec)?;
        let [control_ids, intervention_ids] = ids;
        Ok(Allocation { draw_index, control_ids, intervention_ids, balance })
    }
}

fn draw_stream(seed: u64, n: usize, draw_index: u64) -> rand_chacha::ChaCha8Rng {
    substream(&[text_key("allocation"), seed, n as u64, draw_index])
}

/// Single allocation drawn from the substream keyed by (seed, n, draw_index).
pub fn draw_allocation(census: &CensusTable, spec: &AllocationSpec, seed: u64, draw_index: u64) -> Result<Allocation> {
    let sampler = Sampler::new(census, spec)?;
    sampler.draw(census, spec, draw_index, &mut draw_stream(seed, spec.villages_per_arm, draw_index))
}

/// Attempts `max_draws` draws (in parallel, one substream per draw) and keeps
/// the accepted ones in draw order.
pub fn build_pool(census: &CensusTable, spec: &AllocationSpec, seed: u64) -> Result<AllocationPool> {
    let sampler = Sampler::new(census, spec)?;
    let n = spec.villages_per_arm;
    let drawn: Vec<Option<Allocation>> = (0..spec.max_draws)
        .into_par_iter()
        .map(|i| {
            let a = sampler.draw(census, spec, i, &mut draw_stream(seed, n, i))?;
            Ok(a.balance.accepted.then_some(a))
        })
        .collect::<Result<_>>()?;
    let accepted: Vec<Allocation> = drawn.into_iter().flatten().collect();
    if accepted.is_empty() {
        return Err(Error::Pool(format!(
            "no allocation of {n} villages per arm met {} at SMD threshold {} in {} draws; relax the threshold or use MeanBelow",
            spec.acceptance_rule.as_str(),
            spec.smd_threshold,
            spec.max_draws
        )));
    }
    let rate = accepted.len() as f64 / spec.max_draws as f64;
    Ok(AllocationPool { spec: *spec, seed, accepted, draws_attempted: spec.max_draws, acceptance_rate: rate, requested_threshold: None })
}

/// Like [`build_pool`], but when fewer than `min_accepted` draws meet the
/// threshold it is raised to the smallest value that admits `min_accepted`
/// of the same draws. The pool's spec carries the effective threshold and
/// `requested_threshold` the original one.
pub fn build_pool_relaxed(census: &CensusTable, spec: &AllocationSpec, seed: u64, min_accepted: usize) -> Result<AllocationPool> {
    let sampler = Sampler::new(census, spec)?;
    let n = spec.villages_per_arm;
    let criteria: Vec<f64> = (0..spec.max_draws)
        .into_par_iter()
        .map(|i| Ok(spec.criterion(sampler.draw(census, spec, i, &mut draw_stream(seed, n, i))?.balance.smds())))
        .collect::<Result<_>>()?;
    let meeting = criteria.iter().filter(|&&c| c <= spec.smd_threshold).count();
    if meeting >= min_accepted.max(1) || criteria.len() < min_accepted.max(1) {
        return build_pool(census, spec, seed);
    }
    let mut sorted = criteria;
    sorted.sort_by(f64::total_cmp);
    let relaxed = AllocationSpec { smd_threshold: sorted[min_accepted.max(1) - 1], ..*spec };
    let mut pool = build_pool(census, &relaxed, seed)?;
    pool.requested_threshold = Some(spec.smd_threshold);
    Ok(pool)
}

impl AllocationPool {
    /// Recomputes every stored balance report from its ids.
    pub fn verify(&self, census: &CensusTable) -> Result<()> {
        for a in &self.accepted {
            let b = balance_report(census, &a.control_ids, &a.intervention_ids, &self.spec)?;
            if b != a.balance || !b.accepted {
                return Err(Error::Pool(format!("draw {} does not reproduce its balance report", a.draw_index)));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pool file

const POOL_MAGIC: &str = "# clustersim allocation pool v1";
const POOL_COLUMNS: &str = "draw_index,smd_population,smd_distance,smd_penta0,control_ids,intervention_ids";

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_pool<W: Write>(pool: &AllocationPool, mut out: W) -> Result<()> {
    let s = &pool.spec;
    let mut text = String::new();
    writeln!(text, "{POOL_MAGIC}").unwrap();
    writeln!(text, "villages_per_arm={}", s.villages_per_arm).unwrap();
    writeln!(text, "smd_threshold={}", s.smd_threshold).unwrap();
    writeln!(text, "max_draws={}", s.max_draws).unwrap();
    writeln!(text, "acceptance_rule={}", s.acceptance_rule.as_str()).unwrap();
    writeln!(text, "seed={}", pool.seed).unwrap();
    writeln!(text, "draws_attempted={}", pool.draws_attempted).unwrap();
    writeln!(text, "requested_threshold={}", pool.requested_threshold.map(|t| t.to_string()).unwrap_or_default()).unwrap();
    writeln!(text, "{POOL_COLUMNS}").unwrap();
    out.write_all(text.as_bytes())?;
    for a in &pool.accepted {
        let b = &a.balance;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            a.draw_index,
            b.smd_population,
            b.smd_distance,
            b.smd_penta0,
            join_ids(&a.control_ids),
            join_ids(&a.intervention_ids)
        )?;
    }
    Ok(())
}

pub fn read_pool<R: BufRead>(input: R) -> Result<AllocationPool> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(Error::Parse(format!("pool file ends before {what}"))),
        }
    };
    let (_, magic) = next("header")?;
    if magic.trim() != POOL_MAGIC {
        return Err(Error::Schema("not an allocation pool file".into()));
    }
    let mut kv = |key: &str| -> Result<String> {
        let (line, l) = next(key)?;
        l.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| Error::Parse(format!("line {line}: expected `{key}=`")))
    };
    let bad = |k: &str| Error::Parse(format!("bad value for {k}"));
    let villages_per_arm = kv("villages_per_arm")?.parse().map_err(|_| bad("villages_per_arm"))?;
    let smd_threshold = kv("smd_threshold")?.parse().map_err(|_| bad("smd_threshold"))?;
    let max_draws = kv("max_draws")?.parse().map_err(|_| bad("max_draws"))?;
    let acceptance_rule = kv("acceptance_rule")?.parse()?;
    let seed = kv("seed")?.parse().map_err(|_| bad("seed"))?;
    let draws_attempted: u64 = kv("draws_attempted")?.parse().map_err(|_| bad("draws_attempted"))?;
    let requested = kv("requested_threshold")?;
    let requested_threshold = if requested.is_empty() { None } else { Some(requested.parse().map_err(|_| bad("requested_threshold"))?) };
    let (_, cols) = next("column header")?;
    if cols.trim() != POOL_COLUMNS {
        return Err(Error::Schema(format!("expected pool columns `{POOL_COLUMNS}`")));
    }
    let spec = AllocationSpec { villages_per_arm, smd_threshold, max_draws, acceptance_rule };
    let mut accepted = Vec::new();
    for (i, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("line {line}: expected 6 fields")));
        }
        let perr = || Error::Parse(format!("line {line}: malformed pool row"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr());
        let ids = |s: &str| s.split_whitespace().map(|t| t.parse::<u32>().map_err(|_| perr())).collect::<Result<Vec<u32>>>();
        let smds = [num(f[1])?, num(f[2])?, num(f[3])?];
        accepted.push(Allocation {
            draw_index: f[0].parse().map_err(|_| perr())?,
            control_ids: ids(f[4])?,
            intervention_ids: ids(f[5])?,
            balance: BalanceReport {
                smd_population: smds[0],
                smd_distance: smds[1],
                smd_penta0: smds[2],
                accepted: spec.accepts(smds),
            },
        });
    }
    let acceptance_rate = accepted.len() as f64 / draws_attempted as f64;
    Ok(AllocationPool { spec, seed, accepted, draws_attempted, acceptance_rate, requested_threshold })
}
