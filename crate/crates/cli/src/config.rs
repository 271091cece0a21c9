//! Run configuration: a flat key-value file, then command line overrides.

use sbrenorm::error::{Error, Result};
use sbrenorm::kv::{KvDoc, Section};
use std::path::{Path, PathBuf};

pub const DEMO_MODEL: &str = include_str!("../data/demo.model");
pub const DESK_MODEL: &str = include_str!("../data/desk.model");
pub const DEMO_CONFIG: &str = include_str!("../data/demo.conf");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Verify,
    Flow,
    Sweep,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "verify" => Ok(Mode::Verify),
            "flow" => Ok(Mode::Flow),
            "sweep" => Ok(Mode::Sweep),
            other => Err(Error::Config(format!("mode must be verify, flow or sweep, got {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Verify => "verify",
            Mode::Flow => "flow",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    Builtin(&'static str),
    File(PathBuf),
}

impl ModelSource {
    fn parse(s: &str, base: &Path) -> Result<ModelSource> {
        match s {
            "builtin:demo" => Ok(ModelSource::Builtin("demo")),
            "builtin:desk" => Ok(ModelSource::Builtin("desk")),
            b if b.starts_with("builtin:") => Err(Error::Config(format!("unknown builtin model {b:?}"))),
            path => Ok(ModelSource::File(base.join(path))),
        }
    }

    pub fn text(&self) -> Result<String> {
        match self {
            ModelSource::Builtin("demo") => Ok(DEMO_MODEL.to_string()),
            ModelSource::Builtin(_) => Ok(DESK_MODEL.to_string()),
            ModelSource::File(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read model file {}: {e}", p.display()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSpec {
    pub rho0: Vec<f64>,
    /// None means μ/4.
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub delta0: f64,
    pub xi: f64,
    pub l_max: usize,
    pub mn_max: usize,
    /// arg g of the annulus midpoint.
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepRange {
    /// Six magnitudes over [g_lo, 5 g_lo] with g_lo²‖Z_at‖ = level.
    Auto { level: f64 },
    Geometric { gmin: f64, gmax: f64, steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub angle: f64,
    pub range: Option<SweepRange>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelSource,
    pub n_max: Option<usize>,
    pub shells: Option<usize>,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub draws: usize,
    pub flow: FlowSpec,
    pub sweep: SweepSpec,
}

/// Values given on the command line; each replaces its config key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub rho0: Option<f64>,
    pub gmin: Option<f64>,
    pub gmax: Option<f64>,
    pub gsteps: Option<usize>,
    pub angle: Option<f64>,
}

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["mode", "model", "seed", "jobs", "out"]),
    ("model", &["n_max", "shells"]),
    ("verify", &["draws"]),
    ("flow", &["rho0", "epsilon", "alpha", "delta0", "xi", "l_max", "mn_max", "angle"]),
    ("sweep", &["angle", "window", "level", "gmin", "gmax", "gsteps"]),
];

impl RunConfig {
    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, ov: &Overrides) -> Result<RunConfig> {
        let doc = KvDoc::parse(text)?;
        doc.check_keys(KEYS)?;
        let run = Section::of(&doc, "run");
        let mode = Mode::parse(match ov.mode.as_deref() {
            Some(m) => m,
            None => run.str_or("mode", "verify")?,
        })?;
        let model = ModelSource::parse(run.str_or("model", "builtin:demo")?, base)?;
        let seed = match ov.seed {
            Some(s) => s,
            None => run.u64_opt("seed")?.unwrap_or(0),
        };
        let jobs = match ov.jobs {
            Some(j) => j,
            None => run.usize_or("jobs", 1)?,
        };
        let out = match &ov.out {
            Some(p) => p.clone(),
            None => base.join(run.str_or("out", "out")?),
        };
        let m = Section::of(&doc, "model");
        let n_max = m.usize_opt("n_max")?;
        let shells = m.usize_opt("shells")?;
        let draws = Section::of(&doc, "verify").usize_or("draws", 20)?;

        let f = Section::of(&doc, "flow");
        let rho0 = match ov.rho0 {
            Some(r) => vec![r],
            None if f.has("rho0") => f.f64_list("rho0")?,
            None => vec![0.15],
        };
        let flow = FlowSpec {
            rho0,
            epsilon: f.f64_opt("epsilon")?,
            alpha: f.f64_opt("alpha")?,
            delta0: f.f64_or("delta0", std::f64::consts::PI / 6.0)?,
            xi: f.f64_or("xi", 0.25)?,
            l_max: f.usize_or("l_max", 4)?,
            mn_max: f.usize_or("mn_max", 2)?,
            angle: ov.angle.map(Ok).unwrap_or_else(|| f.f64_or("angle", 0.0))?,
        };

        let s = Section::of(&doc, "sweep");
        let gmin = ov.gmin.or(s.f64_opt("gmin")?);
        let gmax = ov.gmax.or(s.f64_opt("gmax")?);
        let gsteps = ov.gsteps.or(s.usize_opt("gsteps")?);
        let range = match (gmin, gmax, gsteps) {
            (None, None, None) => match s.str_opt("window")? {
                Some("auto") => Some(SweepRange::Auto { level: s.f64_or("level", 1e-5)? }),
                Some(other) => return Err(Error::Config(format!("[sweep] window must be auto, got {other:?}"))),
                None => None,
            },
            (Some(gmin), Some(gmax), Some(steps)) => {
                let from_cli = ov.gmin.is_some() || ov.gmax.is_some() || ov.gsteps.is_some();
                if s.has("window") && !from_cli {
                    return Err(Error::Config("[sweep] give either window or gmin/gmax/gsteps, not both".into()));
                }
                Some(SweepRange::Geometric { gmin, gmax, steps })
            }
            _ => return Err(Error::Config("sweep needs all of gmin, gmax and gsteps".into())),
        };
        let sweep = SweepSpec { angle: ov.angle.map(Ok).unwrap_or_else(|| s.f64_or("angle", 0.0))?, range };
        let cfg = RunConfig { mode, model, n_max, shells, seed, jobs, out, draws, flow, sweep };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that can be made before the model is built.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        if self.draws == 0 {
            return bad("[verify] draws must be at least 1");
        }
        if self.flow.rho0.is_empty() {
            return bad("[flow] rho0 is empty");
        }
        if self.flow.rho0.iter().any(|&r| !(r > 0.0 && r < 0.25)) {
            return bad("[flow] rho0 values must lie in (0, 1/4)");
        }
        let d0 = self.flow.delta0;
        if !(d0 > 0.0 && d0 < std::f64::consts::FRAC_PI_2) {
            return bad("[flow] delta0 must lie in (0, π/2)");
        }
        if !(self.flow.xi > 0.0 && self.flow.xi <= 0.25) {
            return bad("[flow] xi must lie in (0, 1/4]");
        }
        if self.flow.l_max == 0 || self.flow.mn_max == 0 {
            return bad("[flow] l_max and mn_max must be positive");
        }
        for (name, a) in [("[flow] angle", self.flow.angle), ("[sweep] angle", self.sweep.angle)] {
            if !sbrenorm::flow::in_cone(sbrenorm::fock::C64::from_polar(1.0, a), d0) {
                return Err(Error::Config(format!("{name} {a} lies outside the cone of half-angle delta0 = {d0}")));
            }
        }
        if self.mode == Mode::Sweep {
            match &self.sweep.range {
                None => return bad("empty sweep: give [sweep] window = \"auto\" or gmin, gmax, gsteps"),
                Some(SweepRange::Geometric { gmin, gmax, steps }) => {
                    if *steps == 0 {
                        return bad("empty sweep: gsteps = 0");
                    }
                    if *steps < 5 {
                        return bad("sweep needs at least 5 magnitudes for the fit");
                    }
                    if !(*gmin > 0.0 && gmax > gmin) {
                        return bad("sweep needs 0 < gmin < gmax");
                    }
                }
                Some(SweepRange::Auto { level }) => {
                    if !(*level > 0.0) {
                        return bad("[sweep] level must be positive");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Geometric magnitudes from `gmin` to `gmax` inclusive.
pub fn geometric(gmin: f64, gmax: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![gmin];
    }
    (0..steps).map(|i| gmin * (gmax / gmin).powf(i as f64 / (steps - 1) as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/tmp/x"), &Overrides::default())
    }

    #[test]
    fn defaults_and_builtin() {
        let c = parse("").unwrap();
        assert_eq!(c.mode, Mode::Verify);
        assert_eq!(c.model, ModelSource::Builtin("demo"));
        assert_eq!(c.out, PathBuf::from("/tmp/x/out"));
        assert_eq!(c.flow.rho0, vec![0.15]);
        assert!(parse(DEMO_CONFIG).is_ok());
    }

    #[test]
    fn rejected_keys() {
        assert!(matches!(parse("[run]\ncolour = \"red\"\n"), Err(Error::Config(_))));
        assert!(matches!(parse("[plot]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn empty_sweep_is_config_error() {
        let e = parse("[run]\nmode = \"sweep\"\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("empty sweep")), "{e}");
        let e = parse("[run]\nmode = \"sweep\"\n[sweep]\ngmin = 1\ngmax = 2\ngsteps = 0\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(parse("[run]\nmode = \"sweep\"\n[sweep]\ngmin = 1\n").is_err());
        assert!(parse("[run]\nmode = \"sweep\"\n[sweep]\nwindow = \"auto\"\n").is_ok());
    }

    #[test]
    fn ranges_checked_up_front() {
        assert!(parse("[flow]\nrho0 = 0.3\n").is_err());
        assert!(parse("[flow]\nangle = 1.2\n").is_err());
        assert!(parse("[flow]\nangle = 3.0\n").is_ok());
        assert!(parse("[run]\njobs = 0\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let ov = Overrides { mode: Some("sweep".into()), gmin: Some(1.0), gmax: Some(2.0), gsteps: Some(6), rho0: Some(0.1), ..Default::default() };
        let c = RunConfig::parse("[run]\nmode = \"flow\"\n", Path::new("."), &ov).unwrap();
        assert_eq!(c.mode, Mode::Sweep);
        assert_eq!(c.flow.rho0, vec![0.1]);
        assert_eq!(c.sweep.range, Some(SweepRange::Geometric { gmin: 1.0, gmax: 2.0, steps: 6 }));
        let c = RunConfig::parse("[sweep]\nwindow = \"auto\"\n", Path::new("."), &ov).unwrap();
        assert_eq!(c.sweep.range, Some(SweepRange::Geometric { gmin: 1.0, gmax: 2.0, steps: 6 }));
    }

    #[test]
    fn bundled_models_parse() {
        use sbrenorm::model::{desk_spec, ModelSpec};
        assert_eq!(ModelSpec::parse(DESK_MODEL).unwrap(), desk_spec());
        assert!(ModelSpec::parse(DEMO_MODEL).unwrap().build().is_ok());
        for text in [include_str!("../data/desk_flow.conf"), include_str!("../data/desk_sweep.conf")] {
            assert!(RunConfig::parse(text, Path::new("."), &Overrides::default()).is_ok());
        }
    }

    #[test]
    fn geometric_endpoints() {
        let g = geometric(1.0, 4.0, 3);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 2.0).abs() < 1e-15 && (g[2] - 4.0).abs() < 1e-15);
    }
}
