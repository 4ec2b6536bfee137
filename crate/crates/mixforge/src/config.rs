//! Flat experiment configuration: one line-oriented `key = value` file with
//! bracketed sections covers every pipeline, so a run is reproducible from
//! the file and a seed alone. Unknown keys are rejected (with their line
//! number) rather than silently ignored; missing keys take the documented
//! defaults below.

use std::fmt::Write as _;
use std::path::Path;

use crate::coupling::CalibrationOptions;
use crate::error::{Error, Result};
use crate::haar::NoiseSpec;
use crate::mixing::{EnsembleOptions, StationaryOptions};
use crate::models::{FlowConfig, ModelKind};

/// `[model]` section: which equation, at what resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    /// "nse" or "cgl".
    pub kind: String,
    pub viscosity: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub damping: f64,
    pub power: u32,
    pub grid_size: usize,
    pub substeps: usize,
    pub sobolev_index: f64,
}

/// `[noise]` section: the driving process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSection {
    pub spatial_modes: usize,
    pub level_max: i32,
    /// Mode amplitudes b_i = amplitude_base * i^(-amplitude_decay).
    pub amplitude_base: f64,
    pub amplitude_decay: f64,
    /// Level weights c_j = 2^(-time_decay * j) for wavelet levels j >= 0;
    /// the scaling level always carries weight 1.
    pub time_decay: f64,
    pub density_slope: f64,
    pub kick_mode: bool,
}

/// `[calibration]` section: sample sizes for the coupling constants.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSection {
    pub base_radius: f64,
    pub defect_fraction: f64,
    pub test_directions: usize,
    pub gain_pairs: usize,
    pub squeeze_samples: usize,
    pub squeeze_quantile: f64,
    pub max_halvings: usize,
    pub glue_trials: usize,
    pub shell_trials: usize,
    pub shells: usize,
    pub diss_samples: usize,
    pub delta_init_fraction: f64,
}

/// `[ensemble]` section: the coupled-pair experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSection {
    pub pairs: usize,
    pub horizon: usize,
    /// Zero selects the calibrated working radius.
    pub radius: f64,
    /// Comma-separated initial distances; empty selects the built-in
    /// schedule spanning both coupling branches.
    pub distance_schedule: Vec<f64>,
    pub functionals: usize,
    pub resamples: usize,
}

/// `[stationary]` section: the long-run moment estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct StationarySection {
    pub chains: usize,
    pub samples: usize,
    /// Zero derives the burn-in from the fitted decay rate.
    pub burn_in: usize,
    pub shells: usize,
    /// Zero selects the calibrated working radius.
    pub radius_high: f64,
    pub resamples: usize,
}

/// `[run]` section: execution plumbing.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    /// Zero lets the runtime pick; MIXFORGE_THREADS caps it either way.
    pub threads: usize,
}

/// Every section together: the full experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct FullConfig {
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub calibration: CalibrationSection,
    pub ensemble: EnsembleSection,
    pub stationary: StationarySection,
    pub run: RunSection,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            model: ModelSection {
                kind: "nse".to_string(),
                viscosity: 0.5,
                nu1: 0.5,
                nu2: 0.5,
                damping: 0.4,
                power: 1,
                grid_size: 32,
                substeps: 16,
                sobolev_index: 1.0,
            },
            noise: NoiseSection {
                spatial_modes: 8,
                level_max: 1,
                amplitude_base: 0.4,
                amplitude_decay: 2.0,
                time_decay: 1.0,
                density_slope: 0.5,
                kick_mode: false,
            },
            calibration: CalibrationSection {
                base_radius: 0.0,
                defect_fraction: 0.25,
                test_directions: 16,
                gain_pairs: 100,
                squeeze_samples: 64,
                squeeze_quantile: 0.99,
                max_halvings: 12,
                glue_trials: 100,
                shell_trials: 100,
                shells: 8,
                diss_samples: 32,
                delta_init_fraction: 0.5,
            },
            ensemble: EnsembleSection {
                pairs: 256,
                horizon: 40,
                radius: 0.0,
                distance_schedule: Vec::new(),
                functionals: 64,
                resamples: 100,
            },
            stationary: StationarySection {
                chains: 16,
                samples: 64,
                burn_in: 0,
                shells: 4,
                radius_high: 0.0,
                resamples: 100,
            },
            run: RunSection { threads: 0 },
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    section: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::Validation(format!(
            "line {line}: [{section}] {key} = {value:?} is not a valid {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(section: &str, key: &str, value: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Validation(format!(
            "line {line}: [{section}] {key} = {other:?} must be true or false"
        ))),
    }
}

fn parse_schedule(value: &str, line: usize) -> Result<Vec<f64>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| {
            part.trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!(
                    "line {line}: distance_schedule entry {part:?} is not a number"
                ))
            })
        })
        .collect()
}

impl FullConfig {
    /// Apply one `key = value` pair. `kind_explicit` records whether the
    /// model kind was set by the file (kind-dependent defaults resolve
    /// afterwards).
    fn apply(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        line: usize,
        touched: &mut Vec<(String, String)>,
    ) -> Result<()> {
        touched.push((section.to_string(), key.to_string()));
        match (section, key) {
            ("model", "kind") => {
                let v = value.trim();
                if v != "nse" && v != "cgl" {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] kind = {v:?} must be nse or cgl"
                    )));
                }
                self.model.kind = v.to_string();
            }
            ("model", "viscosity") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v <= 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] viscosity must be positive, got {v}"
                    )));
                }
                self.model.viscosity = v;
            }
            ("model", "nu1") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v <= 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] nu1 must be positive, got {v}"
                    )));
                }
                self.model.nu1 = v;
            }
            ("model", "nu2") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] nu2 must be non-negative, got {v}"
                    )));
                }
                self.model.nu2 = v;
            }
            ("model", "damping") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v <= 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] damping must be positive, got {v}"
                    )));
                }
                self.model.damping = v;
            }
            ("model", "power") => {
                let v: u32 = parse_num(section, key, value, line)?;
                if v == 0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] power must be at least 1"
                    )));
                }
                self.model.power = v;
            }
            ("model", "grid_size") => {
                let v: usize = parse_num(section, key, value, line)?;
                if v < 8 || !v.is_power_of_two() {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] grid_size must be a power of two >= 8, got {v}"
                    )));
                }
                self.model.grid_size = v;
            }
            ("model", "substeps") => {
                let v: usize = parse_num(section, key, value, line)?;
                if v == 0 || !v.is_power_of_two() {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] substeps must be a power of two, got {v}"
                    )));
                }
                self.model.substeps = v;
            }
            ("model", "sobolev_index") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [model] sobolev_index must be non-negative, got {v}"
                    )));
                }
                self.model.sobolev_index = v;
            }
            ("noise", "spatial_modes") => {
                let v: usize = parse_num(section, key, value, line)?;
                if v == 0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [noise] spatial_modes must be at least 1"
                    )));
                }
                self.noise.spatial_modes = v;
            }
            ("noise", "level_max") => {
                let v: i32 = parse_num(section, key, value, line)?;
                if v < 0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [noise] level_max must be non-negative, got {v}"
                    )));
                }
                self.noise.level_max = v;
            }
            ("noise", "amplitude_base") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v <= 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [noise] amplitude_base must be positive, got {v}"
                    )));
                }
                self.noise.amplitude_base = v;
            }
            ("noise", "amplitude_decay") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [noise] amplitude_decay must be non-negative, got {v}"
                    )));
                }
                self.noise.amplitude_decay = v;
            }
            ("noise", "time_decay") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [noise] time_decay must be non-negative, got {v}"
                    )));
                }
                self.noise.time_decay = v;
            }
            ("noise", "density_slope") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "line {line}: [noise] density_slope must lie in [0, 1), got {v}"
                    )));
                }
                self.noise.density_slope = v;
            }
            ("noise", "kick_mode") => {
                self.noise.kick_mode = parse_bool(section, key, value, line)?;
            }
            ("calibration", "base_radius") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [calibration] base_radius must be non-negative, got {v}"
                    )));
                }
                self.calibration.base_radius = v;
            }
            ("calibration", "defect_fraction") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if !(0.0..1.0).contains(&v) || v == 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [calibration] defect_fraction must lie in (0, 1), got {v}"
                    )));
                }
                self.calibration.defect_fraction = v;
            }
            ("calibration", "test_directions") => {
                self.calibration.test_directions =
                    parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "gain_pairs") => {
                self.calibration.gain_pairs = parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "squeeze_samples") => {
                self.calibration.squeeze_samples =
                    parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "squeeze_quantile") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "line {line}: [calibration] squeeze_quantile must lie in [0, 1], got {v}"
                    )));
                }
                self.calibration.squeeze_quantile = v;
            }
            ("calibration", "max_halvings") => {
                self.calibration.max_halvings = parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "glue_trials") => {
                self.calibration.glue_trials = parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "shell_trials") => {
                self.calibration.shell_trials = parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "shells") => {
                self.calibration.shells = parse_positive_usize(section, key, value, line)?;
            }
            ("calibration", "diss_samples") => {
                let v = parse_positive_usize(section, key, value, line)?;
                if v < 2 {
                    return Err(Error::Validation(format!(
                        "line {line}: [calibration] diss_samples must be at least 2"
                    )));
                }
                self.calibration.diss_samples = v;
            }
            ("calibration", "delta_init_fraction") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if !(0.0..=1.0).contains(&v) || v == 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [calibration] delta_init_fraction must lie in (0, 1], got {v}"
                    )));
                }
                self.calibration.delta_init_fraction = v;
            }
            ("ensemble", "pairs") => {
                self.ensemble.pairs = parse_positive_usize(section, key, value, line)?;
            }
            ("ensemble", "horizon") => {
                self.ensemble.horizon = parse_positive_usize(section, key, value, line)?;
            }
            ("ensemble", "radius") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [ensemble] radius must be non-negative, got {v}"
                    )));
                }
                self.ensemble.radius = v;
            }
            ("ensemble", "distance_schedule") => {
                self.ensemble.distance_schedule = parse_schedule(value, line)?;
            }
            ("ensemble", "functionals") => {
                self.ensemble.functionals = parse_positive_usize(section, key, value, line)?;
            }
            ("ensemble", "resamples") => {
                self.ensemble.resamples = parse_positive_usize(section, key, value, line)?;
            }
            ("stationary", "chains") => {
                let v = parse_positive_usize(section, key, value, line)?;
                if v < 2 {
                    return Err(Error::Validation(format!(
                        "line {line}: [stationary] chains must be at least 2"
                    )));
                }
                self.stationary.chains = v;
            }
            ("stationary", "samples") => {
                self.stationary.samples = parse_positive_usize(section, key, value, line)?;
            }
            ("stationary", "burn_in") => {
                self.stationary.burn_in = parse_num(section, key, value, line)?;
            }
            ("stationary", "shells") => {
                self.stationary.shells = parse_positive_usize(section, key, value, line)?;
            }
            ("stationary", "radius_high") => {
                let v: f64 = parse_num(section, key, value, line)?;
                if v < 0.0 {
                    return Err(Error::Validation(format!(
                        "line {line}: [stationary] radius_high must be non-negative, got {v}"
                    )));
                }
                self.stationary.radius_high = v;
            }
            ("stationary", "resamples") => {
                self.stationary.resamples = parse_positive_usize(section, key, value, line)?;
            }
            ("run", "threads") => {
                self.run.threads = parse_num(section, key, value, line)?;
            }
            _ => {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("unknown key {key:?} in section [{section}]"),
                });
            }
        }
        Ok(())
    }

    /// Kind-dependent defaults: keys the file did not set move to the other
    /// model's documented value when the kind is cgl.
    fn resolve_kind_defaults(&mut self, touched: &[(String, String)]) {
        let was_set =
            |s: &str, k: &str| touched.iter().any(|(ts, tk)| ts == s && tk == k);
        if self.model.kind == "cgl" {
            if !was_set("model", "sobolev_index") {
                self.model.sobolev_index = 2.0;
            }
            if !was_set("noise", "spatial_modes") {
                self.noise.spatial_modes = 10;
            }
        }
    }

    /// Cross-section consistency not expressible per key.
    fn validate(&self) -> Result<()> {
        let cells = 1usize << (self.noise.level_max + 1);
        if self.model.substeps % cells != 0 {
            return Err(Error::Validation(format!(
                "[model] substeps = {} must be a multiple of 2^(level_max+1) = {} so the \
                 driving process is constant on every substep",
                self.model.substeps, cells
            )));
        }
        Ok(())
    }

    /// The flat solver configuration this file describes.
    pub fn flow_config(&self) -> Result<FlowConfig> {
        let model = match self.model.kind.as_str() {
            "nse" => ModelKind::Nse { nu: self.model.viscosity },
            "cgl" => ModelKind::Cgl {
                nu1: self.model.nu1,
                nu2: self.model.nu2,
                gamma: self.model.damping,
                r: self.model.power,
            },
            other => {
                return Err(Error::Validation(format!("unknown model kind {other:?}")));
            }
        };
        let cfg = FlowConfig {
            model,
            grid_n: self.model.grid_size,
            substeps: self.model.substeps,
            index: self.model.sobolev_index,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The driving-noise description this file describes.
    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        let b: Vec<f64> = (1..=self.noise.spatial_modes)
            .map(|i| self.noise.amplitude_base * (i as f64).powf(-self.noise.amplitude_decay))
            .collect();
        let levels = (self.noise.level_max + 2) as usize;
        let c: Vec<Vec<f64>> = (0..self.noise.spatial_modes)
            .map(|_| {
                (0..levels)
                    .map(|col| {
                        if col == 0 {
                            1.0
                        } else {
                            2f64.powf(-self.noise.time_decay * (col - 1) as f64)
                        }
                    })
                    .collect()
            })
            .collect();
        NoiseSpec::new(
            self.noise.spatial_modes,
            self.noise.level_max,
            b,
            c,
            self.noise.density_slope,
            self.noise.kick_mode,
        )
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            base_radius: if self.calibration.base_radius > 0.0 {
                Some(self.calibration.base_radius)
            } else {
                None
            },
            defect_fraction: self.calibration.defect_fraction,
            test_directions: self.calibration.test_directions,
            gain_pairs: self.calibration.gain_pairs,
            squeeze_samples: self.calibration.squeeze_samples,
            squeeze_quantile: self.calibration.squeeze_quantile,
            max_halvings: self.calibration.max_halvings,
            glue_trials: self.calibration.glue_trials,
            shell_trials: self.calibration.shell_trials,
            shells: self.calibration.shells,
            diss_samples: self.calibration.diss_samples,
            delta_init_fraction: self.calibration.delta_init_fraction,
        }
    }

    pub fn ensemble_options(&self, seed: u64) -> EnsembleOptions {
        EnsembleOptions {
            pairs: self.ensemble.pairs,
            horizon: self.ensemble.horizon,
            radius: self.ensemble.radius,
            distance_schedule: self.ensemble.distance_schedule.clone(),
            functionals: self.ensemble.functionals,
            resamples: self.ensemble.resamples,
            seed,
        }
    }

    pub fn stationary_options(&self, seed: u64, burn_in: usize, radius_high: f64) -> StationaryOptions {
        StationaryOptions {
            chains: self.stationary.chains,
            samples: self.stationary.samples,
            burn_in: if self.stationary.burn_in > 0 { self.stationary.burn_in } else { burn_in },
            shells: self.stationary.shells,
            radius_high: if self.stationary.radius_high > 0.0 {
                self.stationary.radius_high
            } else {
                radius_high
            },
            resamples: self.stationary.resamples,
            seed,
        }
    }

    /// Every key with its current value, reloadable by `parse_config`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "kind = {}", self.model.kind);
        let _ = writeln!(s, "viscosity = {}", self.model.viscosity);
        let _ = writeln!(s, "nu1 = {}", self.model.nu1);
        let _ = writeln!(s, "nu2 = {}", self.model.nu2);
        let _ = writeln!(s, "damping = {}", self.model.damping);
        let _ = writeln!(s, "power = {}", self.model.power);
        let _ = writeln!(s, "grid_size = {}", self.model.grid_size);
        let _ = writeln!(s, "substeps = {}", self.model.substeps);
        let _ = writeln!(s, "sobolev_index = {}", self.model.sobolev_index);
        let _ = writeln!(s, "\n[noise]");
        let _ = writeln!(s, "spatial_modes = {}", self.noise.spatial_modes);
        let _ = writeln!(s, "level_max = {}", self.noise.level_max);
        let _ = writeln!(s, "amplitude_base = {}", self.noise.amplitude_base);
        let _ = writeln!(s, "amplitude_decay = {}", self.noise.amplitude_decay);
        let _ = writeln!(s, "time_decay = {}", self.noise.time_decay);
        let _ = writeln!(s, "density_slope = {}", self.noise.density_slope);
        let _ = writeln!(s, "kick_mode = {}", self.noise.kick_mode);
        let _ = writeln!(s, "\n[calibration]");
        let _ = writeln!(s, "base_radius = {}", self.calibration.base_radius);
        let _ = writeln!(s, "defect_fraction = {}", self.calibration.defect_fraction);
        let _ = writeln!(s, "test_directions = {}", self.calibration.test_directions);
        let _ = writeln!(s, "gain_pairs = {}", self.calibration.gain_pairs);
        let _ = writeln!(s, "squeeze_samples = {}", self.calibration.squeeze_samples);
        let _ = writeln!(s, "squeeze_quantile = {}", self.calibration.squeeze_quantile);
        let _ = writeln!(s, "max_halvings = {}", self.calibration.max_halvings);
        let _ = writeln!(s, "glue_trials = {}", self.calibration.glue_trials);
        let _ = writeln!(s, "shell_trials = {}", self.calibration.shell_trials);
        let _ = writeln!(s, "shells = {}", self.calibration.shells);
        let _ = writeln!(s, "diss_samples = {}", self.calibration.diss_samples);
        let _ = writeln!(s, "delta_init_fraction = {}", self.calibration.delta_init_fraction);
        let _ = writeln!(s, "\n[ensemble]");
        let _ = writeln!(s, "pairs = {}", self.ensemble.pairs);
        let _ = writeln!(s, "horizon = {}", self.ensemble.horizon);
        let _ = writeln!(s, "radius = {}", self.ensemble.radius);
        let schedule = self
            .ensemble
            .distance_schedule
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(s, "distance_schedule = {schedule}");
        let _ = writeln!(s, "functionals = {}", self.ensemble.functionals);
        let _ = writeln!(s, "resamples = {}", self.ensemble.resamples);
        let _ = writeln!(s, "\n[stationary]");
        let _ = writeln!(s, "chains = {}", self.stationary.chains);
        let _ = writeln!(s, "samples = {}", self.stationary.samples);
        let _ = writeln!(s, "burn_in = {}", self.stationary.burn_in);
        let _ = writeln!(s, "shells = {}", self.stationary.shells);
        let _ = writeln!(s, "radius_high = {}", self.stationary.radius_high);
        let _ = writeln!(s, "resamples = {}", self.stationary.resamples);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "threads = {}", self.run.threads);
        s
    }
}

fn parse_positive_usize(section: &str, key: &str, value: &str, line: usize) -> Result<usize> {
    let v: usize = parse_num(section, key, value, line)?;
    if v == 0 {
        return Err(Error::Validation(format!(
            "line {line}: [{section}] {key} must be at least 1"
        )));
    }
    Ok(v)
}

/// Parse configuration text. Empty text yields the full default
/// configuration; every recognized key overrides its default after passing
/// its constraint.
pub fn parse_config(text: &str) -> Result<FullConfig> {
    let mut cfg = FullConfig::default();
    let mut section = String::new();
    let mut touched = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::ConfigParse {
                line: line_no,
                msg: format!("unterminated section header {raw:?}"),
            })?;
            let name = name.trim();
            if !matches!(
                name,
                "model" | "noise" | "calibration" | "ensemble" | "stationary" | "run"
            ) {
                return Err(Error::ConfigParse {
                    line: line_no,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
            line: line_no,
            msg: format!("expected `key = value`, got {raw:?}"),
        })?;
        let key = key.trim();
        if section.is_empty() {
            return Err(Error::ConfigParse {
                line: line_no,
                msg: format!("key {key:?} appears before any [section] header"),
            });
        }
        cfg.apply(&section, key, value, line_no, &mut touched)?;
    }
    cfg.resolve_kind_defaults(&touched);
    cfg.validate()?;
    Ok(cfg)
}

/// Load and validate a configuration file.
pub fn load_config(path: &Path) -> Result<FullConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Validation(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config(&text)
}
