//! Stage orchestration with a content-addressed artifact cache.

use std::collections::HashMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cr3bp::{correct_periodic, ReferenceOrbit, SystemConstants};
use crate::error::{Error, Result};
use crate::mon::{build_g_coefficients, GCoefficients};
use crate::montecarlo::{simulate_closed_loop, MonteCarloReport};
use crate::report::{emit_report, write_json};
use crate::scenario::Scenario;
use crate::steering::{
    assemble_blocks, build_program, kalman_schedule, solve, BlockOperators, FilterSchedule, ObjectiveKind, SolverConfig,
    SteeringSolution,
};
use crate::stt::{discretize_reference, DiscretizedPlan};
use crate::tensors::NormConfig;

/// Overrides the cache directory when `--cache` is not given.
pub const CACHE_ENV: &str = "NLSTEER_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".nlsteer-cache";

/// Newton tolerance for the periodic-orbit correction.
const CORRECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    CorrectOrbit,
    Precompute,
    Solve,
    MonteCarlo,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::CorrectOrbit, Stage::Precompute, Stage::Solve, Stage::MonteCarlo, Stage::Report];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::CorrectOrbit => "correct-orbit",
            Stage::Precompute => "precompute",
            Stage::Solve => "solve",
            Stage::MonteCarlo => "montecarlo",
            Stage::Report => "report",
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cached artifacts are stored as `<key> <payload sha256>\n<payload json>`;
/// any mismatch invalidates the entry.
pub struct Cache {
    dir: PathBuf,
    key: String,
    _lock: File,
}

impl Cache {
    /// Opens (creating) the directory and takes its advisory lock.
    pub fn open(dir: &Path, key: String) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let lock = File::create(dir.join(".lock"))?;
        lock.try_lock().map_err(|e| {
            Error::invalid(format!("cache directory {} is in use by another pipeline ({e})", dir.display()))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            key,
            _lock: lock,
        })
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}-{}.json", &self.key[..16]))
    }

    pub fn load<T: DeserializeOwned>(&self, name: &str) -> Option<T> {
        let path = self.path(name);
        let text = fs::read_to_string(&path).ok()?;
        let parsed = text.split_once('\n').and_then(|(header, payload)| {
            let (key, sum) = header.split_once(' ')?;
            if key != self.key || sum != sha256_hex(payload.as_bytes()) {
                return None;
            }
            serde_json::from_str(payload).ok()
        });
        if parsed.is_none() {
            log::warn!("cache entry {} is corrupted or stale; recomputing", path.display());
        }
        parsed
    }

    pub fn store<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let payload = serde_json::to_string(value)?;
        let text = format!("{} {}\n{payload}", self.key, sha256_hex(payload.as_bytes()));
        let path = self.path(name);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Solution artifact tagged with the scenario it was solved for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub scenario_hash: String,
    pub solution: SteeringSolution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloFile {
    pub scenario_hash: String,
    pub report: MonteCarloReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitSummary {
    pub initial_state: [f64; 6],
    pub period: f64,
    pub period_days: f64,
    pub tau_revs: f64,
    pub monodromy_dominant_modulus: f64,
}

/// Machine-readable failure record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub stage: String,
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl ErrorRecord {
    pub fn new(stage: &str, e: &Error) -> Self {
        let (kind, exit_code) = classify(e);
        Self {
            stage: stage.into(),
            kind: kind.into(),
            message: e.to_string(),
            exit_code,
        }
    }
}

/// Error category and process exit code.
pub fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Validation { .. } | Error::Parse(_) | Error::InvalidArgument(_) => ("validation", 2),
        Error::Solver { .. } | Error::Factorization { .. } => ("solver", 3),
        Error::Simulation(_) | Error::Integration(_) | Error::SingularPosition { .. } | Error::NotConverged { .. } => {
            ("simulation", 4)
        }
        _ => ("io", 1),
    }
}

pub struct Pipeline {
    pub scenario: Scenario,
    pub solver: SolverConfig,
    scenario_hash: String,
    cache: Cache,
    out: PathBuf,
    orbit: Option<ReferenceOrbit>,
    plan: Option<DiscretizedPlan>,
    g: Option<GCoefficients>,
    filter: Option<FilterSchedule>,
    blocks: Option<BlockOperators>,
    solutions: HashMap<ObjectiveKind, SteeringSolution>,
    reports: HashMap<ObjectiveKind, MonteCarloReport>,
}

impl Pipeline {
    pub fn new(scenario: Scenario, cache_dir: &Path, out_dir: &Path) -> Result<Self> {
        scenario.validate()?;
        let key = sha256_hex(scenario.dynamics_fingerprint().as_bytes());
        let scenario_hash = sha256_hex(serde_json::to_string(&scenario)?.as_bytes());
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            scenario,
            solver: SolverConfig::default(),
            scenario_hash,
            cache: Cache::open(cache_dir, key)?,
            out: out_dir.to_path_buf(),
            orbit: None,
            plan: None,
            g: None,
            filter: None,
            blocks: None,
            solutions: HashMap::new(),
            reports: HashMap::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn constants(&self) -> SystemConstants {
        self.scenario.constants()
    }

    pub fn orbit(&mut self) -> Result<&ReferenceOrbit> {
        if self.orbit.is_none() {
            let orbit = match self.cache.load::<ReferenceOrbit>("orbit") {
                Some(o) => o,
                None => {
                    let s = &self.scenario;
                    let o = correct_periodic(&s.initial_guess(), s.orbit.period_guess, &self.constants(), CORRECTION_TOL)?;
                    self.cache.store("orbit", &o)?;
                    o
                }
            };
            self.orbit = Some(orbit);
        }
        Ok(self.orbit.as_ref().expect("set above"))
    }

    pub fn plan(&mut self) -> Result<&DiscretizedPlan> {
        if self.plan.is_none() {
            let plan = match self.cache.load::<DiscretizedPlan>("plan") {
                Some(p) => p,
                None => {
                    let orbit = self.orbit()?.clone();
                    let s = &self.scenario;
                    let p = discretize_reference(&orbit, s.orbit.segments_per_rev, s.orbit.revs, &self.constants())?;
                    self.cache.store("plan", &p)?;
                    p
                }
            };
            self.plan = Some(plan);
        }
        Ok(self.plan.as_ref().expect("set above"))
    }

    pub fn g(&mut self) -> Result<&GCoefficients> {
        if self.g.is_none() {
            let g = match self.cache.load::<GCoefficients>("g") {
                Some(g) => g,
                None => {
                    let m_star = self.scenario.tuning.m_star;
                    let g = build_g_coefficients(self.plan()?, m_star, &NormConfig::default())?;
                    self.cache.store("g", &g)?;
                    g
                }
            };
            self.g = Some(g);
        }
        Ok(self.g.as_ref().expect("set above"))
    }

    pub fn filter(&mut self) -> Result<&FilterSchedule> {
        if self.filter.is_none() {
            let (model, p0) = (self.scenario.measurement_model(), self.scenario.p_tilde0());
            let f = kalman_schedule(self.plan()?, &model, &p0)?;
            self.filter = Some(f);
        }
        Ok(self.filter.as_ref().expect("set above"))
    }

    pub fn blocks(&mut self) -> Result<&BlockOperators> {
        if self.blocks.is_none() {
            let filter = self.filter()?.clone();
            let p_hat0 = self.scenario.p_hat0();
            let b = assemble_blocks(self.plan()?, &filter, &p_hat0)?;
            self.blocks = Some(b);
        }
        Ok(self.blocks.as_ref().expect("set above"))
    }

    fn solution_path(&self, kind: ObjectiveKind) -> PathBuf {
        self.out.join(format!("solution.{}.json", kind.tag()))
    }

    fn mc_path(&self, kind: ObjectiveKind) -> PathBuf {
        self.out.join(format!("mc_report.{}.json", kind.tag()))
    }

    /// Solves `kind` afresh and writes the solution file.
    pub fn solve(&mut self, kind: ObjectiveKind) -> Result<&SteeringSolution> {
        self.g()?;
        self.blocks()?;
        let cfg = self.scenario.steering_config();
        let (blocks, filter, g) = (
            self.blocks.as_ref().expect("built"),
            self.filter.as_ref().expect("built"),
            self.g.as_ref().expect("built"),
        );
        let problem = build_program(kind, blocks, filter, g, &cfg)?;
        let sol = solve(&problem, &self.solver)?;
        log::info!(
            "{kind}: status {}, objective {:e}, {} iterations",
            sol.status,
            sol.objective_value,
            sol.iterations
        );
        write_json(
            &self.solution_path(kind),
            &SolutionFile {
                scenario_hash: self.scenario_hash.clone(),
                solution: sol.clone(),
            },
        )?;
        self.solutions.insert(kind, sol);
        Ok(&self.solutions[&kind])
    }

    /// Solution from memory, the output directory (if it matches this
    /// scenario), or a fresh solve.
    pub fn solution(&mut self, kind: ObjectiveKind) -> Result<&SteeringSolution> {
        if !self.solutions.contains_key(&kind) {
            let file: Option<SolutionFile> = fs::read_to_string(self.solution_path(kind))
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .filter(|f: &SolutionFile| f.scenario_hash == self.scenario_hash);
            match file {
                Some(f) => {
                    self.solutions.insert(kind, f.solution);
                }
                None => {
                    self.solve(kind)?;
                }
            }
        }
        Ok(&self.solutions[&kind])
    }

    /// Runs the closed-loop Monte Carlo for `kind`; `None` when the scenario
    /// asks for no samples.
    pub fn monte_carlo(&mut self, kind: ObjectiveKind) -> Result<Option<&MonteCarloReport>> {
        let cfg = self.scenario.monte_carlo_config();
        if cfg.n_samples == 0 {
            return Ok(None);
        }
        self.solution(kind)?;
        self.filter()?;
        self.plan()?;
        let report = simulate_closed_loop(
            &self.solutions[&kind],
            self.plan.as_ref().expect("built"),
            self.filter.as_ref().expect("built"),
            &cfg,
        )?;
        if !report.excluded.is_empty() {
            log::warn!("{kind}: {} samples excluded", report.excluded.len());
        }
        write_json(
            &self.mc_path(kind),
            &MonteCarloFile {
                scenario_hash: self.scenario_hash.clone(),
                report: report.clone(),
            },
        )?;
        self.reports.insert(kind, report);
        Ok(self.reports.get(&kind))
    }

    fn mc_report(&mut self, kind: ObjectiveKind) -> Result<Option<MonteCarloReport>> {
        if let Some(r) = self.reports.get(&kind) {
            return Ok(Some(r.clone()));
        }
        if self.scenario.run.n_samples == 0 {
            return Ok(None);
        }
        let file: Option<MonteCarloFile> = fs::read_to_string(self.mc_path(kind))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .filter(|f: &MonteCarloFile| f.scenario_hash == self.scenario_hash);
        match file {
            Some(f) => Ok(Some(f.report)),
            None => Ok(self.monte_carlo(kind)?.cloned()),
        }
    }

    pub fn report(&mut self, kind: ObjectiveKind) -> Result<Vec<PathBuf>> {
        let mc = self.mc_report(kind)?;
        let sol = self.solution(kind)?.clone();
        self.plan()?;
        emit_report(&sol, mc.as_ref(), self.plan.as_ref().expect("built"), &self.out)
    }

    pub fn correct_orbit(&mut self) -> Result<OrbitSummary> {
        let c = self.constants();
        let o = self.orbit()?;
        let summary = OrbitSummary {
            initial_state: o.initial_state.to_vec6().into(),
            period: o.period,
            period_days: o.period * c.time_unit / 86400.0,
            tau_revs: o.tau,
            monodromy_dominant_modulus: crate::cr3bp::dominant_eigenvalue(&o.monodromy).norm(),
        };
        write_json(&self.out.join("orbit.json"), &summary)?;
        Ok(summary)
    }

    /// Runs one stage for the given objectives.
    pub fn run_stage(&mut self, stage: Stage, kinds: &[ObjectiveKind]) -> Result<()> {
        match stage {
            Stage::CorrectOrbit => {
                self.correct_orbit()?;
            }
            Stage::Precompute => {
                self.plan()?;
                self.g()?;
            }
            Stage::Solve => {
                for &k in kinds {
                    self.solve(k)?;
                }
            }
            Stage::MonteCarlo => {
                for &k in kinds {
                    self.monte_carlo(k)?;
                }
            }
            Stage::Report => {
                for &k in kinds {
                    self.report(k)?;
                }
            }
        }
        Ok(())
    }
}

/// Runs `stages` in dependency order. On failure the error record is also
/// written to `error.json` in the output directory.
pub fn run_pipeline(
    scenario: Scenario,
    stages: &[Stage],
    cache_dir: &Path,
    out_dir: &Path,
) -> std::result::Result<(), ErrorRecord> {
    let mut p = Pipeline::new(scenario, cache_dir, out_dir).map_err(|e| ErrorRecord::new("setup", &e))?;
    let kinds = p.scenario.run.objective.kinds();
    let _ = fs::remove_file(out_dir.join("error.json"));
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    for stage in ordered {
        log::info!("stage {}", stage.name());
        if let Err(e) = p.run_stage(stage, &kinds) {
            let record = ErrorRecord::new(stage.name(), &e);
            let _ = write_json(&out_dir.join("error.json"), &record);
            return Err(record);
        }
    }
    Ok(())
}

/// Cache directory from the flag, the environment, or the default.
pub fn resolve_cache_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::open(dir.path(), sha256_hex(b"k")).unwrap();
        assert_eq!(cache.load::<Vec<f64>>("x"), None);
        cache.store("x", &vec![1.0, 0.1, 1e-300]).unwrap();
        assert_eq!(cache.load::<Vec<f64>>("x"), Some(vec![1.0, 0.1, 1e-300]));
        let path = cache.path("x");
        let text = fs::read_to_string(&path).unwrap().replace("0.1", "0.2");
        fs::write(&path, text).unwrap();
        assert_eq!(cache.load::<Vec<f64>>("x"), None);
        fs::write(&path, "garbage").unwrap();
        assert_eq!(cache.load::<Vec<f64>>("x"), None);
    }

    #[test]
    fn second_pipeline_cannot_share_a_cache() {
        let dir = tempfile::tempdir().unwrap();
        let _held = Cache::open(dir.path(), sha256_hex(b"a")).unwrap();
        assert!(Cache::open(dir.path(), sha256_hex(b"a")).is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(classify(&Error::Parse("x".into())).1, 2);
        assert_eq!(classify(&Error::Solver { status: "Infeasible".into() }).1, 3);
        assert_eq!(classify(&Error::Simulation("x".into())).1, 4);
    }

    #[test]
    fn stages_run_in_dependency_order() {
        let mut s = vec![Stage::Report, Stage::CorrectOrbit, Stage::Solve, Stage::Solve];
        s.sort();
        s.dedup();
        assert_eq!(s, vec![Stage::CorrectOrbit, Stage::Solve, Stage::Report]);
    }
}
