use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{PipelineError, Result, Stage};
use crate::estimation::Tolerances;
use crate::physics::{
    EsrSensitivityInputs, GasConditions, ZfsPolynomial, TOYLI_A0, TOYLI_A1, TOYLI_A2, TOYLI_A3,
};

/// One measurement condition of a particle: trapping intensity, gas
/// pressure and the ESR spectrum recorded there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSpec {
    pub intensity_w_m2: f64,
    pub pressure_hpa: f64,
    pub esr_file: PathBuf,
}

/// Every tunable of a run. Defaults describe the nominal experiment; a
/// config file only needs to list what it overrides.
///
/// File format: one `key = value` per line, `#` starts a comment, unknown
/// keys are errors. List values are comma separated. `condition = I, p_hpa,
/// path` may be repeated; relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    // Gas, particle and optics.
    pub t0_k: f64,
    pub c_bar_m_s: f64,
    pub gamma: f64,
    pub alpha_acc: f64,
    pub density_kg_m3: f64,
    pub molar_mass_kg_mol: f64,
    pub wavelength_m: f64,
    pub eps_real: f64,

    // Thermometer.
    pub zfs_a0_hz: f64,
    pub zfs_a1_hz_k: f64,
    pub zfs_a2_hz_k2: f64,
    pub zfs_a3_hz_k3: f64,
    pub zfs_t_min_k: f64,
    pub zfs_t_max_k: f64,

    pub seed: u64,
    pub noise: bool,

    // Ensemble synthesis.
    pub n_particles: usize,
    pub radius_min_m: f64,
    pub radius_max_m: f64,
    pub a_h_true: f64,
    pub sigma_log: f64,
    pub d_strain_spread_hz: f64,
    pub histogram_bins: usize,
    pub band_points: usize,

    // Single synthetic particle.
    pub synth_sigma_abs_m2: f64,
    pub synth_r_hydro_m: f64,
    pub synth_d_strain_hz: f64,

    // ESR acquisition.
    pub esr_points: usize,
    pub esr_span_hz: f64,
    pub esr_dwell_s: f64,
    pub esr_contrast: f64,
    pub esr_width_hz: f64,
    pub esr_count_rate: f64,
    pub esr_e_split_hz: f64,

    // Motional PSD acquisition.
    pub psd_averages: usize,
    pub trap_frequency_hz: f64,
    pub psd_pressure_hpa: f64,
    pub psd_f_min_hz: f64,
    pub psd_f_max_hz: f64,
    pub psd_df_hz: f64,

    // Heating design and its stability guards.
    pub pressures_hpa: Vec<f64>,
    pub intensity_fractions: Vec<f64>,
    pub max_intensity_w_m2: f64,
    pub max_temperature_k: f64,
    pub min_pressure_hpa: f64,

    pub fit_step_tol: f64,
    pub fit_gradient_tol: f64,
    pub fit_max_iterations: usize,

    // Measured particle inputs.
    pub particle_id: String,
    pub conditions: Vec<ConditionSpec>,
    pub psd_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tol = Tolerances::default();
        Self {
            t0_k: 294.0,
            c_bar_m_s: 503.0,
            gamma: 1.4,
            alpha_acc: 1.0,
            density_kg_m3: 3500.0,
            molar_mass_kg_mol: 0.02897,
            wavelength_m: 1550e-9,
            eps_real: 5.7,
            zfs_a0_hz: TOYLI_A0,
            zfs_a1_hz_k: TOYLI_A1,
            zfs_a2_hz_k2: TOYLI_A2,
            zfs_a3_hz_k3: TOYLI_A3,
            zfs_t_min_k: 150.0,
            zfs_t_max_k: 1000.0,
            seed: 7,
            noise: true,
            n_particles: 46,
            radius_min_m: 40e-9,
            radius_max_m: 160e-9,
            a_h_true: 4e3,
            sigma_log: 1.27,
            d_strain_spread_hz: 1e6,
            histogram_bins: 12,
            band_points: 41,
            synth_sigma_abs_m2: 4e-18,
            synth_r_hydro_m: 100e-9,
            synth_d_strain_hz: 0.0,
            esr_points: 200,
            esr_span_hz: 80e6,
            esr_dwell_s: 1.5,
            esr_contrast: 0.07,
            esr_width_hz: 10e6,
            esr_count_rate: 2e5,
            esr_e_split_hz: 5e6,
            psd_averages: 200,
            trap_frequency_hz: 50e3,
            psd_pressure_hpa: 30.0,
            psd_f_min_hz: 1e3,
            psd_f_max_hz: 250e3,
            psd_df_hz: 100.0,
            pressures_hpa: vec![20.0, 30.0, 50.0],
            intensity_fractions: vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
            max_intensity_w_m2: 1e11,
            max_temperature_k: 550.0,
            min_pressure_hpa: 15.0,
            fit_step_tol: tol.step,
            fit_gradient_tol: tol.gradient,
            fit_max_iterations: tol.max_iterations,
            particle_id: "p0".into(),
            conditions: Vec::new(),
            psd_file: None,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> std::result::Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{key}` must be finite"))
    }
}

fn parse_usize(key: &str, value: &str) -> std::result::Result<usize, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a non-negative integer, got `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<f64>, String> {
    value.split(',').map(|s| parse_f64(key, s.trim())).collect()
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside it resolve against its
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("cannot read config: {e}")).with_file(path))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|e| e.with_file(path))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PipelineError::new(Stage::Config, format!("expected `key = value`, got `{line}`"))
                    .at(line_no, None));
            };
            let (key, value) = (key.trim(), value.trim());
            let column = raw.find(value).map(|c| c + 1);
            cfg.set(key, value, base_dir)
                .map_err(|msg| PipelineError::new(Stage::Config, msg).at(line_no, column))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
        let f = |v: &str| parse_f64(key, v);
        let u = |v: &str| parse_usize(key, v);
        match key {
            "t0_k" => self.t0_k = f(value)?,
            "c_bar_m_s" => self.c_bar_m_s = f(value)?,
            "gamma" => self.gamma = f(value)?,
            "alpha_acc" => self.alpha_acc = f(value)?,
            "density_kg_m3" => self.density_kg_m3 = f(value)?,
            "molar_mass_kg_mol" => self.molar_mass_kg_mol = f(value)?,
            "wavelength_m" => self.wavelength_m = f(value)?,
            "eps_real" => self.eps_real = f(value)?,
            "zfs_a0_hz" => self.zfs_a0_hz = f(value)?,
            "zfs_a1_hz_k" => self.zfs_a1_hz_k = f(value)?,
            "zfs_a2_hz_k2" => self.zfs_a2_hz_k2 = f(value)?,
            "zfs_a3_hz_k3" => self.zfs_a3_hz_k3 = f(value)?,
            "zfs_t_min_k" => self.zfs_t_min_k = f(value)?,
            "zfs_t_max_k" => self.zfs_t_max_k = f(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| format!("`seed` expects an unsigned integer, got `{value}`"))?
            }
            "noise" => self.noise = parse_bool(key, value)?,
            "n_particles" => self.n_particles = u(value)?,
            "radius_min_m" => self.radius_min_m = f(value)?,
            "radius_max_m" => self.radius_max_m = f(value)?,
            "a_h_true" => self.a_h_true = f(value)?,
            "sigma_log" => self.sigma_log = f(value)?,
            "d_strain_spread_hz" => self.d_strain_spread_hz = f(value)?,
            "histogram_bins" => self.histogram_bins = u(value)?,
            "band_points" => self.band_points = u(value)?,
            "synth_sigma_abs_m2" => self.synth_sigma_abs_m2 = f(value)?,
            "synth_r_hydro_m" => self.synth_r_hydro_m = f(value)?,
            "synth_d_strain_hz" => self.synth_d_strain_hz = f(value)?,
            "esr_points" => self.esr_points = u(value)?,
            "esr_span_hz" => self.esr_span_hz = f(value)?,
            "esr_dwell_s" => self.esr_dwell_s = f(value)?,
            "esr_contrast" => self.esr_contrast = f(value)?,
            "esr_width_hz" => self.esr_width_hz = f(value)?,
            "esr_count_rate" => self.esr_count_rate = f(value)?,
            "esr_e_split_hz" => self.esr_e_split_hz = f(value)?,
            "psd_averages" => self.psd_averages = u(value)?,
            "trap_frequency_hz" => self.trap_frequency_hz = f(value)?,
            "psd_pressure_hpa" => self.psd_pressure_hpa = f(value)?,
            "psd_f_min_hz" => self.psd_f_min_hz = f(value)?,
            "psd_f_max_hz" => self.psd_f_max_hz = f(value)?,
            "psd_df_hz" => self.psd_df_hz = f(value)?,
            "pressures_hpa" => self.pressures_hpa = parse_list(key, value)?,
            "intensity_fractions" => self.intensity_fractions = parse_list(key, value)?,
            "max_intensity_w_m2" => self.max_intensity_w_m2 = f(value)?,
            "max_temperature_k" => self.max_temperature_k = f(value)?,
            "min_pressure_hpa" => self.min_pressure_hpa = f(value)?,
            "fit_step_tol" => self.fit_step_tol = f(value)?,
            "fit_gradient_tol" => self.fit_gradient_tol = f(value)?,
            "fit_max_iterations" => self.fit_max_iterations = u(value)?,
            "particle_id" => {
                if value.is_empty() || value.contains(',') {
                    return Err("`particle_id` must be non-empty and contain no commas".into());
                }
                self.particle_id = value.to_string()
            }
            "psd_file" => self.psd_file = Some(base.join(value)),
            "condition" => {
                let parts: Vec<&str> = value.splitn(3, ',').map(str::trim).collect();
                if parts.len() != 3 || parts[2].is_empty() {
                    return Err("`condition` expects `intensity_w_m2, pressure_hpa, esr_file`".into());
                }
                self.conditions.push(ConditionSpec {
                    intensity_w_m2: f(parts[0])?,
                    pressure_hpa: f(parts[1])?,
                    esr_file: base.join(parts[2]),
                });
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Renders the fully resolved config in the file format; parsing the
    /// output gives back an identical config.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        let mut lines = vec![
            format!("t0_k = {}", self.t0_k),
            format!("c_bar_m_s = {}", self.c_bar_m_s),
            format!("gamma = {}", self.gamma),
            format!("alpha_acc = {}", self.alpha_acc),
            format!("density_kg_m3 = {}", self.density_kg_m3),
            format!("molar_mass_kg_mol = {}", self.molar_mass_kg_mol),
            format!("wavelength_m = {}", self.wavelength_m),
            format!("eps_real = {}", self.eps_real),
            format!("zfs_a0_hz = {}", self.zfs_a0_hz),
            format!("zfs_a1_hz_k = {}", self.zfs_a1_hz_k),
            format!("zfs_a2_hz_k2 = {}", self.zfs_a2_hz_k2),
            format!("zfs_a3_hz_k3 = {}", self.zfs_a3_hz_k3),
            format!("zfs_t_min_k = {}", self.zfs_t_min_k),
            format!("zfs_t_max_k = {}", self.zfs_t_max_k),
            format!("seed = {}", self.seed),
            format!("noise = {}", self.noise),
            format!("n_particles = {}", self.n_particles),
            format!("radius_min_m = {}", self.radius_min_m),
            format!("radius_max_m = {}", self.radius_max_m),
            format!("a_h_true = {}", self.a_h_true),
            format!("sigma_log = {}", self.sigma_log),
            format!("d_strain_spread_hz = {}", self.d_strain_spread_hz),
            format!("histogram_bins = {}", self.histogram_bins),
            format!("band_points = {}", self.band_points),
            format!("synth_sigma_abs_m2 = {}", self.synth_sigma_abs_m2),
            format!("synth_r_hydro_m = {}", self.synth_r_hydro_m),
            format!("synth_d_strain_hz = {}", self.synth_d_strain_hz),
            format!("esr_points = {}", self.esr_points),
            format!("esr_span_hz = {}", self.esr_span_hz),
            format!("esr_dwell_s = {}", self.esr_dwell_s),
            format!("esr_contrast = {}", self.esr_contrast),
            format!("esr_width_hz = {}", self.esr_width_hz),
            format!("esr_count_rate = {}", self.esr_count_rate),
            format!("esr_e_split_hz = {}", self.esr_e_split_hz),
            format!("psd_averages = {}", self.psd_averages),
            format!("trap_frequency_hz = {}", self.trap_frequency_hz),
            format!("psd_pressure_hpa = {}", self.psd_pressure_hpa),
            format!("psd_f_min_hz = {}", self.psd_f_min_hz),
            format!("psd_f_max_hz = {}", self.psd_f_max_hz),
            format!("psd_df_hz = {}", self.psd_df_hz),
            format!("pressures_hpa = {}", list(&self.pressures_hpa)),
            format!("intensity_fractions = {}", list(&self.intensity_fractions)),
            format!("max_intensity_w_m2 = {}", self.max_intensity_w_m2),
            format!("max_temperature_k = {}", self.max_temperature_k),
            format!("min_pressure_hpa = {}", self.min_pressure_hpa),
            format!("fit_step_tol = {}", self.fit_step_tol),
            format!("fit_gradient_tol = {}", self.fit_gradient_tol),
            format!("fit_max_iterations = {}", self.fit_max_iterations),
            format!("particle_id = {}", self.particle_id),
        ];
        for c in &self.conditions {
            lines.push(format!(
                "condition = {}, {}, {}",
                c.intensity_w_m2,
                c.pressure_hpa,
                c.esr_file.display()
            ));
        }
        if let Some(p) = &self.psd_file {
            lines.push(format!("psd_file = {}", p.display()));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(PipelineError::new(Stage::Config, msg));
        self.gas(self.psd_pressure_pa()).map_err(|e| PipelineError::new(Stage::Config, e))?;
        self.polynomial().map_err(|e| PipelineError::new(Stage::Config, e))?;
        if !(self.radius_min_m > 0.0 && self.radius_max_m >= self.radius_min_m) {
            return err("need 0 < radius_min_m <= radius_max_m".into());
        }
        if !(self.sigma_log >= 0.0 && self.a_h_true > 0.0) {
            return err("need sigma_log >= 0 and a_h_true > 0".into());
        }
        if self.esr_points < 2 || !(self.esr_span_hz > 0.0 && self.esr_dwell_s > 0.0) {
            return err("ESR scan needs at least 2 points, positive span and dwell".into());
        }
        if self.psd_averages == 0
            || !(self.psd_f_min_hz > 0.0 && self.psd_f_max_hz > self.psd_f_min_hz && self.psd_df_hz > 0.0)
        {
            return err("PSD grid needs 0 < f_min < f_max, positive step and at least one average".into());
        }
        if self.pressures_hpa.is_empty() || self.intensity_fractions.is_empty() {
            return err("heating design needs at least one pressure and one intensity fraction".into());
        }
        if let Some(p) = self.pressures_hpa.iter().find(|&&p| p < self.min_pressure_hpa) {
            return err(format!(
                "design pressure {p} hPa is below the stability limit {} hPa",
                self.min_pressure_hpa
            ));
        }
        if self.intensity_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return err("intensity fractions must lie in (0, 1]".into());
        }
        if !(self.max_intensity_w_m2 > 0.0 && self.max_temperature_k > self.t0_k) {
            return err("need max_intensity_w_m2 > 0 and max_temperature_k > t0_k".into());
        }
        if self.histogram_bins == 0 || self.band_points < 2 {
            return err("need histogram_bins >= 1 and band_points >= 2".into());
        }
        Ok(())
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            step: self.fit_step_tol,
            gradient: self.fit_gradient_tol,
            max_iterations: self.fit_max_iterations,
        }
    }

    pub fn gas(&self, pressure_pa: f64) -> crate::physics::Result<GasConditions> {
        GasConditions::new(
            self.t0_k,
            self.c_bar_m_s,
            self.gamma,
            self.alpha_acc,
            pressure_pa,
            self.molar_mass_kg_mol,
        )
    }

    pub fn polynomial(&self) -> crate::physics::Result<ZfsPolynomial> {
        ZfsPolynomial::new(
            [self.zfs_a0_hz, self.zfs_a1_hz_k, self.zfs_a2_hz_k2, self.zfs_a3_hz_k3],
            0.0,
            (self.zfs_t_min_k, self.zfs_t_max_k),
        )
    }

    pub fn psd_pressure_pa(&self) -> f64 {
        self.psd_pressure_hpa * 100.0
    }

    pub fn psd_grid(&self) -> Vec<f64> {
        let n = ((self.psd_f_max_hz - self.psd_f_min_hz) / self.psd_df_hz).floor() as usize + 1;
        (0..n).map(|i| self.psd_f_min_hz + self.psd_df_hz * i as f64).collect()
    }
}

/// Inputs of the `sensitivity` command, read from a `key = value` file with
/// keys `linewidth_hz`, `contrast`, `count_rate_hz`, `dwell_s` and either
/// `slope_hz_k` or `temperature_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityParams {
    pub inputs: EsrSensitivityInputs,
    pub slope_hz_k: Option<f64>,
    pub temperature_k: Option<f64>,
}

impl SensitivityParams {
    pub fn parse(text: &str) -> Result<Self> {
        let mut linewidth = None;
        let mut contrast = None;
        let mut rate = None;
        let mut dwell = 1.0;
        let mut slope = None;
        let mut temperature = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| PipelineError::new(Stage::Config, msg).at(idx + 1, None);
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let v = parse_f64(key, value).map_err(bad)?;
            match key {
                "linewidth_hz" => linewidth = Some(v),
                "contrast" => contrast = Some(v),
                "count_rate_hz" => rate = Some(v),
                "dwell_s" => dwell = v,
                "slope_hz_k" => slope = Some(v),
                "temperature_k" => temperature = Some(v),
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        let need = |v: Option<f64>, k: &str| {
            v.ok_or_else(|| PipelineError::new(Stage::Config, format!("missing key `{k}`")))
        };
        if slope.is_none() && temperature.is_none() {
            return Err(PipelineError::new(Stage::Config, "need `slope_hz_k` or `temperature_k`"));
        }
        Ok(Self {
            inputs: EsrSensitivityInputs {
                linewidth: need(linewidth, "linewidth_hz")?,
                contrast: need(contrast, "contrast")?,
                count_rate: need(rate, "count_rate_hz")?,
                dwell_per_point: dwell,
            },
            slope_hz_k: slope,
            temperature_k: temperature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("# nothing\n\n", Path::new(".")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn overrides_and_conditions() {
        let text = "seed = 11\nnoise = false  # quiet\npressures_hpa = 20, 40\n\
                    condition = 1e10, 20, esr/a.csv\npsd_file = psd.csv\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.seed, 11);
        assert!(!cfg.noise);
        assert_eq!(cfg.pressures_hpa, vec![20.0, 40.0]);
        assert_eq!(cfg.conditions[0].esr_file, PathBuf::from("/data/esr/a.csv"));
        assert_eq!(cfg.conditions[0].intensity_w_m2, 1e10);
        assert_eq!(cfg.psd_file, Some(PathBuf::from("/data/psd.csv")));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig {
            seed: 99,
            sigma_log: 0.3,
            ..ExperimentConfig::default()
        };
        cfg.conditions.push(ConditionSpec {
            intensity_w_m2: 1.234e10,
            pressure_hpa: 20.0,
            esr_file: PathBuf::from("esr_00.csv"),
        });
        cfg.psd_file = Some(PathBuf::from("psd.csv"));
        let back = ExperimentConfig::parse(&cfg.to_text(), Path::new("")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("seed = 1\nbogus = 2\n", Path::new(".")).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert_eq!(err.line, Some(2));
        assert!(err.message.contains("bogus"));
    }

    #[test]
    fn pressure_guard() {
        let err = ExperimentConfig::parse("pressures_hpa = 10, 30\n", Path::new(".")).unwrap_err();
        assert!(err.message.contains("stability"));
    }

    #[test]
    fn bad_number_reports_column() {
        let err = ExperimentConfig::parse("t0_k = warm\n", Path::new(".")).unwrap_err();
        assert_eq!((err.line, err.column), (Some(1), Some(8)));
    }

    #[test]
    fn psd_grid_spans_range() {
        let g = ExperimentConfig::default().psd_grid();
        assert_eq!(g.first(), Some(&1e3));
        assert!((g.last().unwrap() - 250e3).abs() < 1e-6);
    }

    #[test]
    fn sensitivity_params() {
        let p = SensitivityParams::parse(
            "linewidth_hz = 10e6\ncontrast = 0.07\ncount_rate_hz = 2e5\ndwell_s = 1.5\nslope_hz_k = -74e3\n",
        )
        .unwrap();
        assert_eq!(p.inputs.linewidth, 10e6);
        assert_eq!(p.slope_hz_k, Some(-74e3));
        assert!(SensitivityParams::parse("contrast = 0.1\n").is_err());
    }
}
