//! INI configuration: `[map]`, `[small_terms]`, `[example]`, `[solver]`, `[run]`.
//! Every section and key is optional; unknown ones are rejected.

use std::path::Path;

use ini::Ini;
use serde::Serialize;
use thiserror::Error;

use crate::flow_sim::{ExampleParams, FSpec, IntegratorOptions};
use crate::homoclinic::{HeteroOptions, PipelineOptions, SurvivalConstants};
use crate::return_map::{ReturnMapParams, SmallTermKind, SmallTermModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not valid UTF-8")]
    Encoding,
    #[error("malformed INI: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {key} in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("bad value for {key} in [{section}]: {message}")]
    Value { section: String, key: String, message: String },
    #[error("inconsistent parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub t_max: f64,
    pub splitting_level: f64,
    pub c1: f64,
    pub c2: f64,
    pub hetero_slack: f64,
    pub p_k: i64,
    pub j1_min: i64,
    pub j1_max: i64,
    pub max_rho_shift: f64,
    pub qt_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let pipe = PipelineOptions::default();
        SolverConfig {
            rtol: 1e-10,
            atol: 1e-12,
            t_max: 100.0,
            splitting_level: 4.0,
            c1: pipe.survival.c1,
            c2: pipe.survival.c2,
            hetero_slack: pipe.hetero.slack,
            p_k: pipe.hetero.p_k,
            j1_min: pipe.j1_min,
            j1_max: pipe.j1_max,
            max_rho_shift: pipe.max_rho_shift,
            qt_threshold: pipe.qt_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub k_min: i64,
    pub k_max: i64,
    pub j0_min: i64,
    pub j0_max: i64,
    pub hetero_k_min: i64,
    pub hetero_k_max: i64,
    pub loop_sign: f64,
    pub loop_m: u8,
    pub jobs: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_min: 10,
            k_max: 20,
            j0_min: 4,
            j0_max: 8,
            hetero_k_min: 3,
            hetero_k_max: 10,
            loop_sign: 1.0,
            loop_m: 0,
            jobs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabConfig {
    pub map: ReturnMapParams,
    pub example: ExampleParams,
    pub solver: SolverConfig,
    pub run: RunConfig,
    /// Exact bytes of the file the config came from.
    pub snapshot: Vec<u8>,
}

impl LabConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes =
            std::fs::read(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ConfigError> {
        let text = std::str::from_utf8(&bytes).map_err(|_| ConfigError::Encoding)?;
        let mut cfg = Self::parse(text)?;
        cfg.snapshot = bytes;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = LabConfig::default();
        let mut map_n: Option<usize> = None;
        for (section, props) in ini.iter() {
            let name = section.unwrap_or("");
            for (key, value) in props.iter() {
                let r = Reader { section: name, key, value };
                match name {
                    "map" => match key {
                        "a" => cfg.map.a = r.float()?,
                        "a_side" => cfg.map.a_side = r.list()?,
                        "theta" => cfg.map.theta = r.float()?,
                        "theta_side" => cfg.map.theta_side = r.list()?,
                        "mu" => cfg.map.mu = r.float()?,
                        "rho" => cfg.map.rho = r.float()?,
                        "omega" => cfg.map.omega = r.float()?,
                        "z_plus" => cfg.map.z_plus = r.list()?,
                        "involution" => cfg.map.involution = r.list()?,
                        "n" => map_n = Some(r.int::<usize>()?),
                        "delta" => cfg.map.delta = r.float()?,
                        _ => return Err(r.unknown()),
                    },
                    "small_terms" => match key {
                        "kind" => {
                            cfg.map.small_terms.kind = match value.trim() {
                                "zero" => SmallTermKind::Zero,
                                "scaled_bump" => SmallTermKind::ScaledBump,
                                other => return Err(r.bad(format!("expected zero or scaled_bump, got {other:?}"))),
                            }
                        }
                        "amplitude" => cfg.map.small_terms.amplitude = r.float()?,
                        "eps0" => cfg.map.small_terms.eps0 = r.float()?,
                        _ => return Err(r.unknown()),
                    },
                    "example" => match key {
                        "sigma" => cfg.example.sigma = r.float()?,
                        "b" => cfg.example.b = r.float()?,
                        "r" => cfg.example.r = r.float()?,
                        "eps" => cfg.example.eps = r.float()?,
                        "f_c" => cfg.example.f.c = r.float()?,
                        "f_r0" => cfg.example.f.r0 = Some(r.float()?),
                        _ => return Err(r.unknown()),
                    },
                    "solver" => match key {
                        "rtol" => cfg.solver.rtol = r.float()?,
                        "atol" => cfg.solver.atol = r.float()?,
                        "t_max" => cfg.solver.t_max = r.float()?,
                        "splitting_level" => cfg.solver.splitting_level = r.float()?,
                        "c1" => cfg.solver.c1 = r.float()?,
                        "c2" => cfg.solver.c2 = r.float()?,
                        "hetero_slack" => cfg.solver.hetero_slack = r.float()?,
                        "p_k" => cfg.solver.p_k = r.int()?,
                        "j1_min" => cfg.solver.j1_min = r.int()?,
                        "j1_max" => cfg.solver.j1_max = r.int()?,
                        "max_rho_shift" => cfg.solver.max_rho_shift = r.float()?,
                        "qt_threshold" => cfg.solver.qt_threshold = r.float()?,
                        _ => return Err(r.unknown()),
                    },
                    "run" => match key {
                        "k_min" => cfg.run.k_min = r.int()?,
                        "k_max" => cfg.run.k_max = r.int()?,
                        "j0_min" => cfg.run.j0_min = r.int()?,
                        "j0_max" => cfg.run.j0_max = r.int()?,
                        "hetero_k_min" => cfg.run.hetero_k_min = r.int()?,
                        "hetero_k_max" => cfg.run.hetero_k_max = r.int()?,
                        "loop_sign" => cfg.run.loop_sign = r.float()?,
                        "loop_m" => cfg.run.loop_m = r.int()?,
                        "jobs" => cfg.run.jobs = r.int()?,
                        "seed" => cfg.run.seed = r.int()?,
                        _ => return Err(r.unknown()),
                    },
                    "" => return Err(ConfigError::UnknownKey { section: "(top level)".into(), key: key.into() }),
                    other => return Err(ConfigError::UnknownSection(other.into())),
                }
            }
            if !matches!(name, "" | "map" | "small_terms" | "example" | "solver" | "run") {
                return Err(ConfigError::UnknownSection(name.into()));
            }
        }
        cfg.map.n = map_n.unwrap_or(cfg.map.z_plus.len() + 3);
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.map.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.solver.rtol > 0.0 && self.solver.atol > 0.0 && self.solver.t_max > 0.0) {
            return bad("tolerances and t_max must be positive");
        }
        if !(self.solver.c1 > 0.0 && self.solver.c2 > 0.0) {
            return bad("survival constants must be positive");
        }
        if self.run.loop_sign != 1.0 && self.run.loop_sign != -1.0 {
            return bad("loop_sign must be 1 or -1");
        }
        if self.run.loop_m > 1 {
            return bad("loop_m must be 0 or 1");
        }
        if self.example.f.r0.is_some_and(|r| !(r > 0.0)) {
            return bad("f_r0 must be positive");
        }
        Ok(())
    }

    pub fn integrator(&self) -> IntegratorOptions {
        IntegratorOptions { rtol: self.solver.rtol, atol: self.solver.atol, ..IntegratorOptions::default() }
    }

    pub fn survival(&self) -> SurvivalConstants {
        SurvivalConstants { c1: self.solver.c1, c2: self.solver.c2 }
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            m: self.run.loop_m,
            sign: self.run.loop_sign,
            hetero: HeteroOptions { p_k: self.solver.p_k, slack: self.solver.hetero_slack },
            j1_min: self.solver.j1_min,
            j1_max: self.solver.j1_max,
            max_rho_shift: self.solver.max_rho_shift,
            survival: self.survival(),
            qt_threshold: self.solver.qt_threshold,
            ..PipelineOptions::default()
        }
    }
}

struct Reader<'a> {
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

impl Reader<'_> {
    fn bad(&self, message: String) -> ConfigError {
        ConfigError::Value { section: self.section.into(), key: self.key.into(), message }
    }

    fn unknown(&self) -> ConfigError {
        ConfigError::UnknownKey { section: self.section.into(), key: self.key.into() }
    }

    fn float(&self) -> Result<f64, ConfigError> {
        parse_float(self.value).map_err(|m| self.bad(m))
    }

    fn int<T: std::str::FromStr>(&self) -> Result<T, ConfigError> {
        self.value.trim().parse().map_err(|_| self.bad(format!("expected an integer, got {:?}", self.value)))
    }

    fn list(&self) -> Result<Vec<f64>, ConfigError> {
        self.value.split(',').map(parse_float).collect::<Result<_, _>>().map_err(|m| self.bad(m))
    }
}

/// Accepts plain floats plus `pi`, `pi/2`, `-pi/2`.
fn parse_float(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, t),
    };
    let v = match body {
        "pi" => std::f64::consts::PI,
        "pi/2" => std::f64::consts::FRAC_PI_2,
        _ => {
            let v: f64 = t.parse().map_err(|_| format!("expected a number, got {s:?}"))?;
            if !v.is_finite() {
                return Err(format!("value {s:?} is not finite"));
            }
            return Ok(v);
        }
    };
    Ok(if neg { -v } else { v })
}

/// The built-in defaults written out as an INI file.
pub fn default_config_text() -> String {
    let m = ReturnMapParams::default();
    let e = ExampleParams::default();
    let s = SolverConfig::default();
    let r = RunConfig::default();
    let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ");
    let st = SmallTermModel::zero();
    let f = FSpec::zero();
    format!(
        "[map]\na = {}\na_side = {}\ntheta = {}\ntheta_side = {}\nmu = {}\nrho = {}\nomega = {}\nz_plus = {}\ninvolution = {}\nn = {}\ndelta = {}\n\n\
         [small_terms]\nkind = zero\namplitude = {}\neps0 = {}\n\n\
         [example]\nsigma = {}\nb = {}\nr = {}\neps = {}\nf_c = {}\n\n\
         [solver]\nrtol = {:e}\natol = {:e}\nt_max = {}\nsplitting_level = {}\nc1 = {}\nc2 = {}\nhetero_slack = {}\np_k = {}\nj1_min = {}\nj1_max = {}\nmax_rho_shift = {}\nqt_threshold = {:e}\n\n\
         [run]\nk_min = {}\nk_max = {}\nj0_min = {}\nj0_max = {}\nhetero_k_min = {}\nhetero_k_max = {}\nloop_sign = {}\nloop_m = {}\njobs = {}\nseed = {}\n",
        m.a, list(&m.a_side), m.theta, list(&m.theta_side), m.mu, m.rho, m.omega, list(&m.z_plus), list(&m.involution), m.n, m.delta,
        st.amplitude, st.eps0,
        e.sigma, e.b, e.r, e.eps, f.c,
        s.rtol, s.atol, s.t_max, s.splitting_level, s.c1, s.c2, s.hetero_slack, s.p_k, s.j1_min, s.j1_max, s.max_rho_shift, s.qt_threshold,
        r.k_min, r.k_max, r.j0_min, r.j0_max, r.hetero_k_min, r.hetero_k_max, r.loop_sign, r.loop_m, r.jobs, r.seed,
    )
}
