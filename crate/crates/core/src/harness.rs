//! Simulation runner: scenario × method × replicate, with Monte Carlo error,
//! resumable on-disk results and sample-size search.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{build_pool, build_pool_relaxed, read_pool, write_pool, AcceptanceRule, AllocationPool, AllocationSpec};
use crate::census::CensusTable;
use crate::dgm::{calibrate_intercept, generate_outcomes, CalibratedDgm, CalibrationOptions, FollowUpSize, ScenarioSpec};
use crate::error::{Error, Result};
use crate::estimators::{analyze, AnalysisInput, AnalysisOptions, HcFlavor, IptwMean, Method, NaiveForm, IPTW_CRITICAL_VALUE};
use crate::rng::{mix_seed, substream, text_key};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

pub const RESULTS_HEADER: &str =
    "scenario_id,delta_r,pi0,n,coef_set,icc,method,n_rep,rejection_rate,mcse,ci_low,ci_high,nonconverged";

/// sqrt(p̂(1 − p̂)/n_rep).
pub fn mcse(p_hat: f64, n_rep: usize) -> f64 {
    (p_hat * (1.0 - p_hat) / n_rep as f64).sqrt()
}

/// Normal-approximation Monte Carlo interval, clipped to [0, 1].
pub fn mc_ci(p_hat: f64, n_rep: usize, level: f64) -> (f64, f64) {
    let z = if level == 0.95 {
        Z_95
    } else {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0)
    };
    let h = z * mcse(p_hat, n_rep);
    ((p_hat - h).max(0.0), (p_hat + h).min(1.0))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub delta_r: Vec<f64>,
    pub pi0: Vec<f64>,
    pub n: Vec<usize>,
    pub coef_set: Vec<u8>,
    pub icc: Vec<f64>,
    pub reps_null: usize,
    pub reps_power: usize,
    pub methods: Vec<Method>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            delta_r: vec![0.0, 0.15, 0.25, 0.375, 0.5],
            pi0: vec![0.15, 0.2, 0.25, 0.3],
            n: vec![50, 75, 80, 100, 110, 126],
            coef_set: vec![1, 2, 3],
            icc: vec![0.22, 1.0 / 3.0],
            reps_null: 10_000,
            reps_power: 1_000,
            methods: Method::ALL.to_vec(),
        }
    }
}

impl Grid {
    /// π₀ = 0.2, coefficient set 1, ICC 0.22 at the given n and effect sizes.
    pub fn base_case(n: Vec<usize>, delta_r: Vec<f64>) -> Self {
        Self { delta_r, pi0: vec![0.2], n, coef_set: vec![1], icc: vec![0.22], ..Self::default() }
    }

    /// All scenarios in axis order (δ_r slowest, ICC fastest).
    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        let mut out = Vec::new();
        for &delta_r in &self.delta_r {
            for &pi0 in &self.pi0 {
                for &n_per_arm in &self.n {
                    for &coef_set in &self.coef_set {
                        for &icc in &self.icc {
                            out.push(ScenarioSpec { delta_r, pi0, n_per_arm, coef_set, icc });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn reps_for(&self, s: &ScenarioSpec) -> usize {
        if s.delta_r == 0.0 {
            self.reps_null
        } else {
            self.reps_power
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.delta_r.len(), self.pi0.len(), self.n.len(), self.coef_set.len(), self.icc.len(), self.methods.len()].contains(&0) {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if self.reps_null == 0 || self.reps_power == 0 {
            return Err(Error::Config("replicate counts must be positive".into()));
        }
        for s in self.scenarios() {
            s.validate().map_err(|e| Error::Config(format!("scenario {}: {e}", s.id())))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSettings {
    pub smd_threshold: f64,
    pub max_draws: u64,
    pub acceptance_rule: AcceptanceRule,
    /// When fewer draws than this meet the threshold, the threshold is
    /// raised until this many do; 0 keeps the threshold fixed.
    pub min_pool_size: usize,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { smd_threshold: 0.2, max_draws: 1_000_000, acceptance_rule: AcceptanceRule::AllBelow, min_pool_size: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSettings {
    pub alpha: f64,
    pub iptw_critical_value: f64,
    pub iptw_mean: IptwMean,
    pub iptw_variance: HcFlavor,
    pub naive_form: NaiveForm,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        let o = AnalysisOptions::default();
        Self {
            alpha: o.alpha,
            iptw_critical_value: IPTW_CRITICAL_VALUE,
            iptw_mean: o.iptw_mean,
            iptw_variance: o.iptw_variance,
            naive_form: o.naive_form,
        }
    }
}

impl AnalysisSettings {
    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            alpha: self.alpha,
            iptw_critical_value: self.iptw_critical_value,
            iptw_mean: self.iptw_mean,
            iptw_variance: self.iptw_variance,
            naive_form: self.naive_form,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub village_draws: usize,
    pub tolerance: f64,
    pub follow_up_size: FollowUpSize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let o = CalibrationOptions::default();
        Self { village_draws: o.village_draws, tolerance: o.tolerance, follow_up_size: o.follow_up_size }
    }
}

impl CalibrationSettings {
    pub fn options(&self) -> CalibrationOptions {
        CalibrationOptions { village_draws: self.village_draws, tolerance: self.tolerance, follow_up_size: self.follow_up_size }
    }
}

/// Everything besides the grid and census that determines a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub seed: u64,
    pub pool: PoolSettings,
    pub calibration: CalibrationSettings,
    pub analysis: AnalysisSettings,
}

impl RunSettings {
    pub fn allocation_spec(&self, n: usize) -> AllocationSpec {
        AllocationSpec {
            villages_per_arm: n,
            smd_threshold: self.pool.smd_threshold,
            max_draws: self.pool.max_draws,
            acceptance_rule: self.pool.acceptance_rule,
        }
    }

    pub fn pool_seed(&self, n: usize) -> u64 {
        mix_seed(&[self.seed, text_key("pool"), n as u64])
    }

    pub fn calibration_seed(&self, s: &ScenarioSpec) -> u64 {
        mix_seed(&[self.seed, text_key("calibrate"), text_key(&s.dgm_key()), s.n_per_arm as u64])
    }
}

// ---------------------------------------------------------------------------
// Cells

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub scenario: ScenarioSpec,
    pub scenario_id: String,
    pub method: Method,
    pub n_rep: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub mcse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub nonconverged: usize,
    pub wall_time: Duration,
    /// Per-replicate rejection indicators in replicate order.
    pub indicators: Vec<bool>,
}

impl CellResult {
    fn from_indicators(scenario: ScenarioSpec, method: Method, indicators: Vec<bool>, nonconverged: usize, wall_time: Duration) -> Self {
        let n_rep = indicators.len();
        let rejections = indicators.iter().filter(|&&b| b).count();
        let rate = rejections as f64 / n_rep as f64;
        let (lo, hi) = mc_ci(rate, n_rep, 0.95);
        Self {
            scenario,
            scenario_id: scenario.id(),
            method,
            n_rep,
            rejections,
            rejection_rate: rate,
            mcse: mcse(rate, n_rep),
            ci_low: lo,
            ci_high: hi,
            nonconverged,
            wall_time,
            indicators,
        }
    }

    pub fn csv_row(&self) -> String {
        let s = &self.scenario;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario_id,
            s.delta_r,
            s.pi0,
            s.n_per_arm,
            s.coef_set,
            s.icc,
            self.method,
            self.n_rep,
            self.rejection_rate,
            self.mcse,
            self.ci_low,
            self.ci_high,
            self.nonconverged
        )
    }
}

/// Replicate stream keyed by (base seed, scenario, method, replicate).
pub fn replicate_stream(base_seed: u64, scenario: &ScenarioSpec, method: Method, r: usize) -> rand_chacha::ChaCha8Rng {
    substream(&[base_seed, text_key(&scenario.id()), text_key(method.as_str()), r as u64])
}

/// Outcome of one replicate: (rejected, converged).
pub fn run_replicate(
    scenario: &ScenarioSpec,
    method: Method,
    r: usize,
    pool: &AllocationPool,
    census: &CensusTable,
    dgm: &CalibratedDgm,
    base_seed: u64,
    opts: &AnalysisOptions,
) -> Result<(bool, bool)> {
    let mut rng = replicate_stream(base_seed, scenario, method, r);
    let alloc = &pool.accepted[rng.random_range(0..pool.accepted.len())];
    let records = generate_outcomes(alloc, census, dgm, &mut rng)?;
    let input = AnalysisInput::from_records(&records, census)?;
    let res = analyze(method, &input, opts)?;
    Ok((res.rejected, res.diagnostics.failure.is_none()))
}

#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    scenario: &ScenarioSpec,
    method: Method,
    n_rep: usize,
    pool: &AllocationPool,
    census: &CensusTable,
    dgm: &CalibratedDgm,
    base_seed: u64,
    opts: &AnalysisOptions,
) -> Result<CellResult> {
    if n_rep == 0 {
        return Err(Error::Argument("n_rep must be positive".into()));
    }
    if pool.accepted.is_empty() {
        return Err(Error::Cell(format!("{}: allocation pool is empty", scenario.id())));
    }
    if pool.spec.villages_per_arm != scenario.n_per_arm {
        return Err(Error::Cell(format!(
            "{}: pool holds {} villages per arm, scenario needs {}",
            scenario.id(),
            pool.spec.villages_per_arm,
            scenario.n_per_arm
        )));
    }
    let start = Instant::now();
    let outcomes: Vec<(bool, bool)> = (0..n_rep)
        .into_par_iter()
        .map(|r| run_replicate(scenario, method, r, pool, census, dgm, base_seed, opts))
        .collect::<Result<_>>()
        .map_err(|e| Error::Cell(format!("{} {method}: {e}", scenario.id())))?;
    let nonconverged = outcomes.iter().filter(|o| !o.1).count();
    let indicators = outcomes.into_iter().map(|o| o.0).collect();
    Ok(CellResult::from_indicators(*scenario, method, indicators, nonconverged, start.elapsed()))
}

// ---------------------------------------------------------------------------
// Indicator logs

/// Run-length encoding `v*k` of a bit sequence, e.g. `0*37 1*1 0*12`.
pub fn rle_encode(bits: &[bool]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        let mut j = i;
        while j < bits.len() && bits[j] == bits[i] {
            j += 1;
        }
        out.push(format!("{}*{}", u8::from(bits[i]), j - i));
        i = j;
    }
    out.join(" ")
}

pub fn rle_decode(text: &str) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        let (v, k) = tok.split_once('*').ok_or_else(|| Error::Parse(format!("bad run `{tok}`")))?;
        let bit = match v {
            "0" => false,
            "1" => true,
            _ => return Err(Error::Parse(format!("bad run value `{v}`"))),
        };
        let k: usize = k.parse().map_err(|_| Error::Parse(format!("bad run length `{k}`")))?;
        out.extend(std::iter::repeat_n(bit, k));
    }
    Ok(out)
}

fn cell_file_name(scenario: &ScenarioSpec, method: Method) -> String {
    format!("{}__{}.cell", scenario.id(), method)
}

fn write_cell_file(path: &Path, cell: &CellResult) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let text = format!(
        "scenario_id={}\nmethod={}\nn_rep={}\nrejections={}\nnonconverged={}\nindicators={}\n",
        cell.scenario_id,
        cell.method,
        cell.n_rep,
        cell.rejections,
        cell.nonconverged,
        rle_encode(&cell.indicators)
    );
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_cell_file(path: &Path, scenario: &ScenarioSpec, method: Method, n_rep: usize) -> Result<CellResult> {
    let text = fs::read_to_string(path)?;
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Parse(format!("{}: missing `{k}`", path.display())));
    if get("scenario_id")? != scenario.id() || get("method")? != method.as_str() {
        return Err(Error::Parse(format!("{} belongs to another cell", path.display())));
    }
    let indicators = rle_decode(get("indicators")?)?;
    let rejections: usize = get("rejections")?.parse().map_err(|_| Error::Parse("bad rejections".into()))?;
    let nonconverged: usize = get("nonconverged")?.parse().map_err(|_| Error::Parse("bad nonconverged".into()))?;
    if indicators.len() != n_rep || indicators.iter().filter(|&&b| b).count() != rejections {
        return Err(Error::Parse(format!("{}: indicator log disagrees with its totals", path.display())));
    }
    Ok(CellResult::from_indicators(*scenario, method, indicators, nonconverged, Duration::ZERO))
}

// ---------------------------------------------------------------------------
// Grid runs

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub base_seed: u64,
    /// FNV-1a hash of the grid, settings and census.
    pub grid_hash: String,
    pub pools: Vec<String>,
    pub timestamp: u64,
}

#[derive(Serialize)]
struct HashInput<'a> {
    grid: &'a Grid,
    settings: &'a RunSettings,
}

pub fn run_hash(grid: &Grid, settings: &RunSettings, census: &CensusTable) -> String {
    let mut text = toml::to_string(&HashInput { grid, settings }).expect("grid serializes");
    for i in 0..census.len() {
        text.push_str(&format!(
            "\n{},{},{},{},{},{},{}",
            census.ids[i],
            census.area_names[census.area[i]],
            census.group[i].as_str(),
            census.population[i],
            census.distance[i],
            census.children[i],
            census.penta0[i]
        ));
    }
    format!("{:016x}", text_key(&text))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub scenario_id: String,
    pub method: Option<Method>,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub manifest: RunManifest,
    pub resumed_cells: usize,
}

pub fn write_results<W: Write>(cells: &[CellResult], mut out: W) -> Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for c in cells {
        writeln!(out, "{}", c.csv_row())?;
    }
    Ok(())
}

/// A results-file row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario_id: String,
    pub scenario: ScenarioSpec,
    pub method: Method,
    pub n_rep: usize,
    pub rejection_rate: f64,
    pub mcse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub nonconverged: usize,
}

pub fn read_results<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = RESULTS_HEADER.split(',').collect();
    let mut idx = Vec::new();
    for col in &expected {
        idx.push(
            header
                .iter()
                .position(|h| h == *col)
                .ok_or_else(|| Error::Schema(format!("results file has no `{col}` column")))?,
        );
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |k: usize| rec.get(idx[k]).unwrap_or("");
        let bad = |k: usize| Error::Parse(format!("line {}: bad {}", line + 2, expected[k]));
        let num = |k: usize| f(k).parse::<f64>().map_err(|_| bad(k));
        let int = |k: usize| f(k).parse::<usize>().map_err(|_| bad(k));
        rows.push(ResultRow {
            scenario_id: f(0).to_string(),
            scenario: ScenarioSpec {
                delta_r: num(1)?,
                pi0: num(2)?,
                n_per_arm: int(3)?,
                coef_set: f(4).parse().map_err(|_| bad(4))?,
                icc: num(5)?,
            },
            method: f(6).parse().map_err(|_| bad(6))?,
            n_rep: int(7)?,
            rejection_rate: num(8)?,
            mcse: num(9)?,
            ci_low: num(10)?,
            ci_high: num(11)?,
            nonconverged: int(12)?,
        });
    }
    Ok(rows)
}

fn now_secs() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn obtain_pool(census: &CensusTable, settings: &RunSettings, n: usize, dir: Option<&Path>) -> Result<AllocationPool> {
    let spec = settings.allocation_spec(n);
    let seed = settings.pool_seed(n);
    let path = dir.map(|d| d.join("pools").join(format!("pool_n{n}.txt")));
    if let Some(p) = &path {
        if p.exists() {
            let pool = read_pool(BufReader::new(fs::File::open(p)?))?;
            let requested = AllocationSpec { smd_threshold: pool.requested_threshold.unwrap_or(pool.spec.smd_threshold), ..pool.spec };
            if requested == spec && pool.seed == seed {
                pool.verify(census)?;
                return Ok(pool);
            }
            warn!("{} does not match the current settings; rebuilding", p.display());
        }
    }
    let pool = if settings.pool.min_pool_size == 0 {
        build_pool(census, &spec, seed)?
    } else {
        build_pool_relaxed(census, &spec, seed, settings.pool.min_pool_size)?
    };
    if let Some(t) = pool.requested_threshold {
        warn!("pool n={n}: fewer than {} draws met {} at {t}; threshold raised to {:.4}", settings.pool.min_pool_size, spec.acceptance_rule.as_str(), pool.spec.smd_threshold);
    }
    info!("pool n={n}: {} of {} draws accepted", pool.accepted.len(), pool.draws_attempted);
    if let Some(p) = &path {
        fs::create_dir_all(p.parent().unwrap())?;
        let tmp = p.with_extension("tmp");
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_pool(&pool, &mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, p)?;
    }
    Ok(pool)
}

/// Runs every cell of the grid. With an output directory, results, manifest,
/// pools and per-cell indicator logs are written there and cells already on
/// disk for the same run hash are reused.
pub fn run_grid(grid: &Grid, census: &CensusTable, settings: &RunSettings, out_dir: Option<&Path>) -> Result<GridOutcome> {
    grid.validate()?;
    let hash = run_hash(grid, settings, census);
    let cell_dir: Option<PathBuf> = out_dir.map(|d| d.join("cells"));
    if let Some(d) = out_dir {
        let manifest_path = d.join("manifest.toml");
        if manifest_path.exists() {
            let old: RunManifest = toml::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| Error::Parse(e.to_string()))?;
            if old.grid_hash != hash || old.base_seed != settings.seed || old.engine_version != ENGINE_VERSION {
                return Err(Error::Config(format!(
                    "{} holds a different run (hash {}); use a fresh output directory",
                    d.display(),
                    old.grid_hash
                )));
            }
        }
        fs::create_dir_all(cell_dir.as_ref().unwrap())?;
    }

    let opts = settings.analysis.options();
    let cal = settings.calibration.options();
    let mut pools: BTreeMap<usize, std::result::Result<AllocationPool, String>> = BTreeMap::new();
    let mut dgms: BTreeMap<String, std::result::Result<CalibratedDgm, String>> = BTreeMap::new();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut resumed = 0;

    for scenario in grid.scenarios() {
        let sid = scenario.id();
        let n_rep = grid.reps_for(&scenario);
        let pool = pools
            .entry(scenario.n_per_arm)
            .or_insert_with(|| obtain_pool(census, settings, scenario.n_per_arm, out_dir).map_err(|e| e.to_string()));
        let pool = match pool {
            Ok(p) => &*p,
            Err(msg) => {
                failures.push(CellFailure { scenario_id: sid, method: None, message: msg.clone() });
                continue;
            }
        };
        let key = format!("{}_n{}", scenario.dgm_key(), scenario.n_per_arm);
        let base = dgms.entry(key).or_insert_with(|| {
            let null = ScenarioSpec { delta_r: 0.0, ..scenario };
            calibrate_intercept(census, pool, &null, settings.calibration_seed(&scenario), &cal).map_err(|e| e.to_string())
        });
        let dgm = match base.as_ref().map_err(Clone::clone).and_then(|d| d.with_delta(scenario.delta_r, scenario.pi0).map_err(|e| e.to_string())) {
            Ok(d) => d,
            Err(msg) => {
                failures.push(CellFailure { scenario_id: sid, method: None, message: msg });
                continue;
            }
        };
        for &method in &grid.methods {
            let path = cell_dir.as_ref().map(|d| d.join(cell_file_name(&scenario, method)));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                match read_cell_file(p, &scenario, method, n_rep) {
                    Ok(c) => {
                        cells.push(c);
                        resumed += 1;
                        continue;
                    }
                    Err(e) => warn!("ignoring {}: {e}", p.display()),
                }
            }
            match run_cell(&scenario, method, n_rep, pool, census, &dgm, settings.seed, &opts) {
                Ok(c) => {
                    info!("{sid} {method}: {:.4} ({} reps, {:.1?})", c.rejection_rate, c.n_rep, c.wall_time);
                    if let Some(p) = &path {
                        write_cell_file(p, &c)?;
                    }
                    cells.push(c);
                }
                Err(e) => failures.push(CellFailure { scenario_id: sid.clone(), method: Some(method), message: e.to_string() }),
            }
        }
    }

    let pool_ids = pools
        .iter()
        .map(|(n, p)| match p {
            Ok(p) => format!(
                "n={n} seed={} rule={} threshold={}{} draws={} accepted={}",
                p.seed,
                p.spec.acceptance_rule.as_str(),
                p.spec.smd_threshold,
                p.requested_threshold.map(|t| format!(" (raised from {t})")).unwrap_or_default(),
                p.draws_attempted,
                p.accepted.len()
            ),
            Err(e) => format!("n={n} failed: {e}"),
        })
        .collect();
    let manifest = RunManifest {
        engine_version: ENGINE_VERSION.to_string(),
        base_seed: settings.seed,
        grid_hash: hash,
        pools: pool_ids,
        timestamp: now_secs(),
    };
    if let Some(d) = out_dir {
        let mut buf = Vec::new();
        write_results(&cells, &mut buf)?;
        fs::write(d.join("results.csv"), buf)?;
        fs::write(d.join("manifest.toml"), toml::to_string(&manifest).expect("manifest serializes"))?;
        if !failures.is_empty() {
            let text: String = failures
                .iter()
                .map(|f| format!("{},{},{}\n", f.scenario_id, f.method.map(|m| m.as_str()).unwrap_or("*"), f.message.replace('\n', " ")))
                .collect();
            fs::write(d.join("failures.csv"), format!("scenario_id,method,message\n{text}"))?;
        }
    }
    Ok(GridOutcome { cells, failures, manifest, resumed_cells: resumed })
}

// ---------------------------------------------------------------------------
// Sample size

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub n: usize,
    pub power: f64,
    pub mcse: f64,
}

/// Smallest n on an ascending curve whose power reaches the target.
pub fn min_n_from_curve(curve: &[PowerPoint], target_power: f64) -> Option<usize> {
    curve.iter().find(|p| p.power >= target_power).map(|p| p.n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinN {
    pub curve: Vec<PowerPoint>,
    pub n: Option<usize>,
}

/// Power of `method` for each candidate n (ascending) with the other
/// scenario factors held at `family`, and the smallest adequate n.
pub fn find_min_n(
    census: &CensusTable,
    settings: &RunSettings,
    method: Method,
    family: &ScenarioSpec,
    candidate_ns: &[usize],
    n_rep: usize,
    target_power: f64,
) -> Result<MinN> {
    if candidate_ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("candidate sample sizes must be strictly ascending".into()));
    }
    let grid = Grid {
        delta_r: vec![family.delta_r],
        pi0: vec![family.pi0],
        n: candidate_ns.to_vec(),
        coef_set: vec![family.coef_set],
        icc: vec![family.icc],
        reps_null: n_rep,
        reps_power: n_rep,
        methods: vec![method],
    };
    let outcome = run_grid(&grid, census, settings, None)?;
    if let Some(f) = outcome.failures.first() {
        return Err(Error::Cell(format!("{}: {}", f.scenario_id, f.message)));
    }
    let curve: Vec<PowerPoint> =
        outcome.cells.iter().map(|c| PowerPoint { n: c.scenario.n_per_arm, power: c.rejection_rate, mcse: c.mcse }).collect();
    let n = min_n_from_curve(&curve, target_power);
    Ok(MinN { curve, n })
}
