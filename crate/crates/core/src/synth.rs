//! Synthetic drive cycles from a zero-order equivalent circuit
//! (`V = OCV(soc) - I R`), used to exercise the whole pipeline without the
//! public datasets. Two presets with different OCV curves, resistances and
//! capacities stand in for two cell chemistries.

use std::path::{Path, PathBuf};

use crate::data::{self, dataset_dir, write_cycle_csv, CycleRef, DatasetKind, DriveCycle, Record, RecipeManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// SoC floor the load profile is clipped to.
pub const MIN_SOC: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentProfile {
    /// DC discharge current (A).
    pub offset_a: f64,
    pub amplitudes_a: Vec<f64>,
    pub frequencies_hz: Vec<f64>,
    pub phases: Vec<f64>,
    /// Half-width of the uniform per-sample jitter (A).
    pub jitter_a: f64,
}

impl CurrentProfile {
    pub fn idle() -> Self {
        Self {
            offset_a: 0.0,
            amplitudes_a: Vec::new(),
            frequencies_hz: Vec::new(),
            phases: Vec::new(),
            jitter_a: 0.0,
        }
    }

    fn at(&self, t: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        self.offset_a
            + self
                .amplitudes_a
                .iter()
                .zip(&self.frequencies_hz)
                .zip(&self.phases)
                .map(|((a, f), p)| a * (tau * f * t + p).sin())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempProfile {
    pub base_c: f64,
    /// Linear drift in degrees C per hour.
    pub drift_c_per_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCellSpec {
    pub capacity_ah: f64,
    pub internal_resistance_ohm: f64,
    /// Ascending polynomial coefficients of OCV(soc) in volts.
    pub ocv_coeffs: Vec<f64>,
    pub temp_profile: TempProfile,
    pub current_profile: CurrentProfile,
    pub seed: u64,
}

impl SynthCellSpec {
    pub fn preset(kind: DatasetKind) -> Option<Self> {
        let (capacity_ah, internal_resistance_ohm, ocv_coeffs) = match kind {
            DatasetKind::SynthA => (2.9, 0.025, vec![3.0, 1.2, -0.9, 0.9]),
            DatasetKind::SynthB => (3.0, 0.045, vec![2.8, 1.6, -1.5, 1.25]),
            _ => return None,
        };
        Some(Self {
            capacity_ah,
            internal_resistance_ohm,
            ocv_coeffs,
            temp_profile: TempProfile {
                base_c: 25.0,
                drift_c_per_h: 3.0,
            },
            current_profile: CurrentProfile::idle(),
            seed: 0,
        })
    }

    pub fn ocv(&self, soc: f64) -> f64 {
        self.ocv_coeffs.iter().rev().fold(0.0, |acc, c| acc * soc + c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_ah > 0.0) {
            return Err(Error::InvalidArgument(format!("capacity {} Ah", self.capacity_ah)));
        }
        if !(self.internal_resistance_ohm >= 0.0) {
            return Err(Error::InvalidArgument(format!("resistance {} ohm", self.internal_resistance_ohm)));
        }
        if self.ocv_coeffs.is_empty() {
            return Err(Error::InvalidArgument("empty OCV polynomial".into()));
        }
        let grid: Vec<f64> = (0..=1000).map(|i| self.ocv(i as f64 / 1000.0)).collect();
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("OCV curve is not strictly increasing on [0, 1]".into()));
        }
        let p = &self.current_profile;
        if p.amplitudes_a.len() != p.frequencies_hz.len() || p.amplitudes_a.len() != p.phases.len() || p.jitter_a < 0.0 {
            return Err(Error::InvalidArgument("inconsistent current profile".into()));
        }
        Ok(())
    }

    /// A drive-cycle-like load for `cycle_name`: about 0.8 C average with
    /// three superposed oscillations and uniform jitter, all fixed by the
    /// cycle name and `seed`.
    pub fn with_cycle_profile(&self, cycle_name: &str, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(fnv1a(cycle_name));
        let c = self.capacity_ah;
        let n = 3;
        let current_profile = CurrentProfile {
            offset_a: c * rng.uniform(0.75, 0.9),
            amplitudes_a: (0..n).map(|_| c * rng.uniform(0.1, 0.45)).collect(),
            frequencies_hz: (0..n).map(|_| 1.0 / rng.uniform(15.0, 600.0)).collect(),
            phases: (0..n).map(|_| rng.uniform(0.0, std::f64::consts::TAU)).collect(),
            jitter_a: c * 0.15,
        };
        Self {
            current_profile,
            seed: rng.derive_seed(1),
            ..self.clone()
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Simulates `duration_s` seconds at `sampling_hz`. SoC starts at 1 and
/// follows exact coulomb counting of the (clipped) current.
pub fn synth_generate(spec: &SynthCellSpec, duration_s: f64, sampling_hz: f64) -> Result<DriveCycle> {
    spec.validate()?;
    let steps = (duration_s * sampling_hz).floor();
    if !(steps >= 1.0) || !(sampling_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{duration_s} s at {sampling_hz} Hz yields no samples"
        )));
    }
    let steps = steps as usize;
    let dt = 1.0 / sampling_hz;
    let soc0 = 1.0;
    let mut rng = Rng::new(spec.seed);
    let profile = &spec.current_profile;

    let mut currents = Vec::with_capacity(steps);
    let mut charge_as = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let jitter = if profile.jitter_a > 0.0 {
            rng.uniform(-profile.jitter_a, profile.jitter_a)
        } else {
            0.0
        };
        let mut i = profile.at(t) + jitter;
        // keep soc inside [MIN_SOC, soc0]
        let max_i = (data::soc_after(soc0, charge_as, spec.capacity_ah) - MIN_SOC) * 3600.0 * spec.capacity_ah / dt;
        let min_i = -charge_as / dt;
        i = i.min(max_i.max(0.0)).max(min_i.min(0.0));
        charge_as += i * dt;
        currents.push(i);
    }
    let socs = data::derive_soc(&currents, dt, spec.capacity_ah, soc0)?;
    let tp = spec.temp_profile;
    let records = currents
        .iter()
        .zip(&socs)
        .enumerate()
        .map(|(k, (&i, &soc))| {
            let t = k as f64 * dt;
            Record {
                time_s: t,
                voltage_v: spec.ocv(soc) - i * spec.internal_resistance_ohm,
                current_a: i,
                temp_c: tp.base_c + tp.drift_c_per_h * t / 3600.0,
                soc,
            }
        })
        .collect();
    DriveCycle::new("synthetic", tp.base_c.round() as i32, sampling_hz, records)
}

/// Knobs for [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthDatasetOptions {
    pub seed: u64,
    pub duration_s: f64,
    pub sampling_hz: f64,
}

impl Default for SynthDatasetOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 4000.0,
            sampling_hz: 10.0,
        }
    }
}

/// Writes every cycle of the preset's default recipe under
/// `<root>/<preset>/<temp>/<cycle>.csv` plus the recipe manifest. Returns
/// the cycle files written, in recipe order.
pub fn generate_dataset(root: &Path, preset: DatasetKind, opts: &SynthDatasetOptions) -> Result<Vec<PathBuf>> {
    let base = SynthCellSpec::preset(preset)
        .ok_or_else(|| Error::InvalidArgument(format!("{preset} is not a synthetic preset")))?;
    let mut manifest = RecipeManifest::defaults(preset);
    manifest.native_hz = opts.sampling_hz;
    manifest.capacity_ah = base.capacity_ah;
    let dir = dataset_dir(root, preset);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;

    let mut written = Vec::new();
    let names = manifest.train.iter().chain(&manifest.val).chain(&manifest.test);
    for name in names {
        for &temp in &manifest.temperatures {
            let mut spec = base.with_cycle_profile(name, opts.seed ^ (temp as i64 as u64).wrapping_mul(0x9e37));
            spec.temp_profile.base_c = temp as f64;
            let mut cycle = synth_generate(&spec, opts.duration_s, opts.sampling_hz)?;
            cycle.cycle_id = name.clone();
            cycle.ambient_c = temp;
            let path = manifest.cycle_path(
                root,
                &CycleRef {
                    name: name.clone(),
                    ambient_c: temp,
                },
            );
            write_cycle_csv(&cycle, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
