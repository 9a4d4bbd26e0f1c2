//! Experiment configuration: TOML with one table per pipeline stage.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rdctl::feasibility::{AlphaMode, SearchOptions, SectorSpec, TheoremId};
use rdctl::nonlinearity::{linear_phi, make_default_phi, rescale_sector, SectorNonlinearity};
use rdctl::simulator::{InitialProfile, SimConfig};
use rdctl::synthesis::{select_qc, Pole, SynthesisOptions};
use rdctl::{Coefficient, OperatorSpec};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// An angle given in radians or as `"pi"`, `"pi/4"`, `"3*pi/8"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Angle {
    Radians(f64),
    Text(String),
}

impl Angle {
    pub fn radians(&self) -> Result<f64> {
        match self {
            Angle::Radians(v) => Ok(*v),
            Angle::Text(s) => parse_angle(s).with_context(|| format!("cannot read angle {s:?}")),
        }
    }
}

fn parse_angle(s: &str) -> Result<f64> {
    let t: String = s
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_lowercase();
    if let Ok(v) = t.parse::<f64>() {
        return Ok(v);
    }
    let (num, den) = match t.split_once('/') {
        Some((a, b)) => (a.to_string(), b.parse::<f64>()?),
        None => (t.clone(), 1.0),
    };
    let factor = match num.as_str() {
        "pi" => 1.0,
        other => match other.strip_suffix("*pi") {
            Some(c) => c.parse::<f64>()?,
            None => bail!("expected a number or a multiple of pi"),
        },
    };
    Ok(factor * PI / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub theta1: Angle,
    pub theta2: Angle,
    pub p: Coefficient,
    pub q_tilde: Coefficient,
    /// Reaction split; chosen automatically when absent.
    pub q_c: Option<f64>,
    pub n_modes: usize,
    pub tail_modes: usize,
    /// Samples per eigenfunction; the library default when absent.
    pub resolution: Option<usize>,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            theta1: Angle::Text("pi/2".into()),
            theta2: Angle::Radians(0.0),
            p: Coefficient::Constant(1.0),
            q_tilde: Coefficient::Constant(-3.0),
            q_c: None,
            n_modes: 60,
            tail_modes: 1 << 16,
            resolution: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub poles: Vec<f64>,
    pub observer_poles: Option<Vec<f64>>,
    pub delta: f64,
    pub k_phi: f64,
    pub n0: Option<usize>,
    pub n: usize,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            poles: vec![-1.3],
            observer_poles: None,
            delta: 0.3,
            k_phi: 1.0,
            n0: None,
            n: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Default,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SectorSection {
    pub shape: Shape,
    pub dk_phi: f64,
    /// Bound on `|φ′|` used by the certificates; measured when absent.
    pub phi_deriv_bound: Option<f64>,
}

impl Default for SectorSection {
    fn default() -> Self {
        SectorSection {
            shape: Shape::Default,
            dk_phi: 0.5,
            phi_deriv_bound: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Fixed(f64),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateSection {
    pub theorem: String,
    pub n_max: usize,
    pub alpha: AlphaSetting,
}

impl Default for CertificateSection {
    fn default() -> Self {
        CertificateSection {
            theorem: "t3".into(),
            n_max: 20,
            alpha: AlphaSetting::Named("free".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initial {
    Default,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub mesh_nodes: usize,
    pub t_final: f64,
    pub dt: f64,
    pub record_stride: usize,
    pub profile_stride: usize,
    pub initial: Initial,
    /// Scale factor on the default initial profile.
    pub amplitude: f64,
    /// Rescale the sector of `φ` for this run only.
    pub dk_phi: Option<f64>,
    pub fit_window: [f64; 2],
    pub divergence_factor: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        SimulationSection {
            mesh_nodes: d.mesh_nodes,
            t_final: d.t_final,
            dt: d.dt,
            record_stride: d.record_stride,
            profile_stride: d.profile_stride,
            initial: Initial::Default,
            amplitude: 1.0,
            dk_phi: None,
            fit_window: [1.0, 8.0],
            divergence_factor: d.divergence_factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    QTilde,
    N,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Observer dimension for the `q_tilde` axis.
    pub n: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            axis: SweepAxis::QTilde,
            values: vec![-3.0, -5.0, -7.0, -9.0],
            n: 15,
        }
    }
}

/// Settings of the full reproduction run; the defaults are the reference case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproSection {
    /// Dimension at which the H¹ sector certificate is expected.
    pub t3_n: usize,
    /// Largest dimension tried before the H¹ sector check fails.
    pub t3_n_max: usize,
    pub c4_n: usize,
    pub c4_n_max: usize,
    pub diverge_dk_phi: f64,
    pub diverge_t_final: f64,
    /// Published sector sizes for the sweep values, in order.
    pub sweep_reference: Vec<f64>,
    pub sweep_band: f64,
    pub min_decay_rate: f64,
}

impl Default for ReproSection {
    fn default() -> Self {
        ReproSection {
            t3_n: 3,
            t3_n_max: 6,
            c4_n: 16,
            c4_n_max: 20,
            diverge_dk_phi: 0.72,
            diverge_t_final: 20.0,
            sweep_reference: vec![0.54, 0.24, 0.12, 0.03],
            sweep_band: 0.15,
            min_decay_rate: 0.27,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: Option<u32>,
    pub plant: PlantSection,
    pub synthesis: SynthesisSection,
    pub sector: SectorSection,
    pub certificate: CertificateSection,
    pub simulation: SimulationSection,
    pub sweep: SweepSection,
    pub repro: ReproSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub theorem: Option<String>,
    pub n: Option<usize>,
    pub poles: Option<Vec<f64>>,
    pub delta: Option<f64>,
    pub dk_phi: Option<f64>,
    pub n_max: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
        };
        if let Some(v) = cfg.schema_version {
            if v != SCHEMA_VERSION {
                bail!("config schema_version {v} is not supported (expected {SCHEMA_VERSION})");
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(t) = &o.theorem {
            self.certificate.theorem = t.clone();
        }
        if let Some(n) = o.n {
            self.synthesis.n = n;
        }
        if let Some(p) = &o.poles {
            self.synthesis.poles = p.clone();
        }
        if let Some(d) = o.delta {
            self.synthesis.delta = d;
        }
        if let Some(dk) = o.dk_phi {
            self.sector.dk_phi = dk;
        }
        if let Some(m) = o.n_max {
            self.certificate.n_max = m;
        }
    }

    pub fn operator(&self) -> Result<OperatorSpec> {
        let pl = &self.plant;
        let (t1, t2) = (pl.theta1.radians()?, pl.theta2.radians()?);
        let q_c = match pl.q_c {
            Some(v) => v,
            None => select_qc(&pl.q_tilde).1,
        };
        let mut spec = OperatorSpec::new(t1, t2, pl.p.clone(), pl.q_tilde.clone(), q_c)?;
        if let Some(r) = pl.resolution {
            spec = spec.with_grid(r)?;
        }
        Ok(spec)
    }

    pub fn synthesis_options(&self) -> Result<SynthesisOptions> {
        let s = &self.synthesis;
        if s.poles.is_empty() {
            bail!("synthesis.poles must not be empty");
        }
        Ok(SynthesisOptions {
            poles: Some(s.poles.iter().map(|&p| Pole::real(p)).collect()),
            observer_poles: s
                .observer_poles
                .as_ref()
                .map(|v| v.iter().map(|&p| Pole::real(p)).collect()),
            delta: s.delta,
            k_phi: s.k_phi,
            n0: s.n0,
            n: s.n,
        })
    }

    pub fn theorem(&self) -> Result<TheoremId> {
        self.certificate
            .theorem
            .parse::<TheoremId>()
            .map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn phi(&self) -> Result<SectorNonlinearity> {
        let k = self.synthesis.k_phi;
        let mut phi = match self.sector.shape {
            Shape::Default => make_default_phi(k, self.sector.dk_phi)?,
            Shape::Linear => {
                let mut l = linear_phi(k)?;
                l.sector = SectorSpec::new(k, self.sector.dk_phi, k)?;
                l
            }
        };
        if let Some(b) = self.sector.phi_deriv_bound {
            if b < phi.deriv_sup() {
                bail!(
                    "sector.phi_deriv_bound = {b} is below the measured sup |phi'| = {}",
                    phi.deriv_sup()
                );
            }
            phi.sector.phi_deriv_bound = b;
        }
        Ok(phi)
    }

    /// The nonlinearity used by `simulate`, with the optional run-only rescale.
    pub fn simulation_phi(&self) -> Result<SectorNonlinearity> {
        let phi = self.phi()?;
        match self.simulation.dk_phi {
            Some(dk) if self.sector.shape == Shape::Default => Ok(rescale_sector(&phi, dk)?),
            Some(_) => bail!("simulation.dk_phi only applies to the default shape"),
            None => Ok(phi),
        }
    }

    pub fn sector(&self) -> Result<Option<SectorSpec>> {
        if self.theorem()?.includes_psi() {
            Ok(Some(self.phi()?.sector))
        } else {
            Ok(None)
        }
    }

    pub fn search_options(&self) -> Result<SearchOptions> {
        let alpha = match &self.certificate.alpha {
            AlphaSetting::Fixed(a) => AlphaMode::Fixed(*a),
            AlphaSetting::Named(s) if s == "free" => AlphaMode::Free,
            AlphaSetting::Named(s) => {
                bail!("certificate.alpha must be \"free\" or a number, got {s:?}")
            }
        };
        Ok(SearchOptions {
            alpha,
            ..SearchOptions::default()
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.simulation;
        let z0 = match s.initial {
            Initial::Zero => InitialProfile::Zero,
            Initial::Default if s.amplitude == 1.0 => InitialProfile::Default,
            Initial::Default => {
                // Same shape as the default, amplitude relative to unit H¹ norm.
                let k = std::f64::consts::FRAC_PI_2;
                let h1 = ((1.0 + k * k) / 2.0_f64).sqrt();
                InitialProfile::Cosine {
                    amplitude: s.amplitude / h1,
                    wavenumber: k,
                }
            }
        };
        let cfg = SimConfig {
            mesh_nodes: s.mesh_nodes,
            t_final: s.t_final,
            dt: s.dt,
            z0,
            record_stride: s.record_stride,
            profile_stride: s.profile_stride,
            divergence_factor: s.divergence_factor,
            ..SimConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angles() {
        assert_eq!(parse_angle("pi/2").unwrap(), PI / 2.0);
        assert_eq!(parse_angle("3*pi/8").unwrap(), 3.0 * PI / 8.0);
        assert_eq!(parse_angle(" 0.25 ").unwrap(), 0.25);
        assert!(parse_angle("tau").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[plant]\ntheta3 = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("theta3"));
        assert!(toml::from_str::<ExperimentConfig>("[plants]\n").is_err());
    }

    #[test]
    fn defaults_build_reference_plant() {
        let cfg = ExperimentConfig::default();
        let spec = cfg.operator().unwrap();
        assert_eq!(spec.q_c, 4.0);
        assert_eq!(cfg.theorem().unwrap(), TheoremId::T3H1Sector);
        assert_eq!(cfg.phi().unwrap().sector.phi_deriv_bound, 9.02);
        let linear = ExperimentConfig {
            sector: SectorSection {
                shape: Shape::Linear,
                ..SectorSection::default()
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(linear.phi().unwrap().eval(2.0), 2.0);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            theorem: Some("c4".into()),
            n: Some(16),
            poles: Some(vec![-2.0]),
            delta: Some(0.2),
            dk_phi: Some(0.4),
            n_max: Some(25),
        });
        assert_eq!(cfg.theorem().unwrap(), TheoremId::C4L2Sector);
        assert_eq!(cfg.synthesis.n, 16);
        assert_eq!(cfg.synthesis_options().unwrap().poles.unwrap()[0].re, -2.0);
        assert_eq!(cfg.sector.dk_phi, 0.4);
        assert_eq!(cfg.certificate.n_max, 25);
    }
}
