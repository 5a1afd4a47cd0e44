//! Drive-cycle ingestion and the preprocessing pipeline: SoC labels by
//! coulomb counting, decimation, train-split z-score normalization, the two
//! additive noise models, sliding windows, and per-dataset experiment
//! recipes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Feature channels per timestep: voltage, current, temperature.
pub const CHANNELS: usize = 3;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["voltage", "current", "temperature"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub time_s: f64,
    pub voltage_v: f64,
    pub current_a: f64,
    pub temp_c: f64,
    pub soc: f64,
}

impl Record {
    pub fn features(&self) -> [f64; CHANNELS] {
        [self.voltage_v, self.current_a, self.temp_c]
    }
}

/// One discharge test. Current is positive while discharging.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycle {
    pub cycle_id: String,
    pub ambient_c: i32,
    pub sampling_hz: f64,
    pub records: Vec<Record>,
}

impl DriveCycle {
    pub fn new(cycle_id: impl Into<String>, ambient_c: i32, sampling_hz: f64, records: Vec<Record>) -> Result<Self> {
        let cycle = Self {
            cycle_id: cycle_id.into(),
            ambient_c,
            sampling_hz,
            records,
        };
        cycle.validate().map_err(|reason| Error::InvalidCycle {
            path: PathBuf::from(format!("{}@{}C", cycle.cycle_id, cycle.ambient_c)),
            reason,
        })?;
        Ok(cycle)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.sampling_hz > 0.0 && self.sampling_hz.is_finite()) {
            return Err(format!("sampling rate {} Hz", self.sampling_hz));
        }
        if self.records.is_empty() {
            return Err("no records".into());
        }
        let dt = 1.0 / self.sampling_hz;
        for (i, pair) in self.records.windows(2).enumerate() {
            let step = pair[1].time_s - pair[0].time_s;
            if !(step > 0.0) {
                return Err(format!("time is not strictly increasing at row {}", i + 1));
            }
            if (step - dt).abs() > 0.01 * dt {
                return Err(format!(
                    "time step {step} s at row {} deviates from {dt} s by more than 1%",
                    i + 1
                ));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if !(0.0..=1.0).contains(&r.soc) {
                return Err(format!("soc {} outside [0, 1] at row {i}", r.soc));
            }
            if !r.features().iter().all(|v| v.is_finite()) || !r.time_s.is_finite() {
                return Err(format!("non-finite value at row {i}"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn currents(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.current_a).collect()
    }

    pub fn socs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.soc).collect()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sampling_hz
    }
}

/// Where a cycle file comes from and how to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleMeta {
    pub cycle_id: String,
    pub ambient_c: i32,
    pub sampling_hz: f64,
    pub capacity_ah: f64,
    /// Multiplier that makes discharge current positive (+1 or -1).
    pub current_sign: f64,
    /// SoC at the first sample when labels are derived.
    pub soc0: f64,
}

/// Reads a cycle CSV with header `time_s,voltage_v,current_a,temp_c` plus
/// `soc` and/or `ah_discharged`. Without a `soc` column, labels come from
/// `ah_discharged`, and without that from coulomb counting the current.
pub fn load_cycle(path: &Path, meta: &CycleMeta) -> Result<DriveCycle> {
    let invalid = |reason: String| Error::InvalidCycle {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let required = ["time_s", "voltage_v", "current_a", "temp_c"];
    let missing: Vec<&str> = required.iter().copied().filter(|c| column(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(invalid(format!("missing columns: {}", missing.join(", "))));
    }
    let idx: Vec<usize> = required.iter().map(|c| column(c).unwrap()).collect();
    let soc_col = column("soc");
    let ah_col = column("ah_discharged");

    let mut rows = Vec::new();
    let mut ah = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| invalid(format!("unparsable value in data row {}", line + 1)))
        };
        let soc = match soc_col {
            Some(c) => field(c)?,
            None => f64::NAN,
        };
        if let Some(c) = ah_col {
            ah.push(meta.current_sign * field(c)?);
        }
        rows.push(Record {
            time_s: field(idx[0])?,
            voltage_v: field(idx[1])?,
            current_a: meta.current_sign * field(idx[2])?,
            temp_c: field(idx[3])?,
            soc,
        });
    }
    if rows.is_empty() {
        return Err(invalid("no data rows".into()));
    }
    if soc_col.is_none() {
        if meta.capacity_ah <= 0.0 {
            return Err(invalid(format!("capacity {} Ah", meta.capacity_ah)));
        }
        let socs = if ah_col.is_some() {
            let raw: Vec<f64> = ah.iter().map(|a| meta.soc0 - a / meta.capacity_ah).collect();
            clamp_unit(raw, &meta.cycle_id)
        } else {
            let currents: Vec<f64> = rows.iter().map(|r| r.current_a).collect();
            derive_soc(&currents, 1.0 / meta.sampling_hz, meta.capacity_ah, meta.soc0)?
        };
        for (r, s) in rows.iter_mut().zip(socs) {
            r.soc = s;
        }
    }
    DriveCycle::new(meta.cycle_id.clone(), meta.ambient_c, meta.sampling_hz, rows).map_err(|e| match e {
        Error::InvalidCycle { reason, .. } => invalid(reason),
        other => other,
    })
}

/// Writes the cycle in the CSV layout [`load_cycle`] reads (with a `soc`
/// column). Values use shortest round-trip formatting.
pub fn write_cycle_csv(cycle: &DriveCycle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_s", "voltage_v", "current_a", "temp_c", "soc"])?;
    for r in &cycle.records {
        w.write_record([
            r.time_s.to_string(),
            r.voltage_v.to_string(),
            r.current_a.to_string(),
            r.temp_c.to_string(),
            r.soc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn clamp_unit(mut socs: Vec<f64>, what: &str) -> Vec<f64> {
    let out_of_range = socs.iter().filter(|s| !(0.0..=1.0).contains(*s)).count();
    if out_of_range > 0 {
        warn!("{what}: {out_of_range} derived SoC values outside [0, 1] were clamped");
        socs.iter_mut().for_each(|s| *s = s.clamp(0.0, 1.0));
    }
    socs
}

/// Coulomb counting: `soc_k = soc0 - sum_{j<=k} I_j dt / (3600 C)`, clamped
/// to [0, 1].
pub fn derive_soc(current_a: &[f64], dt_s: f64, capacity_ah: f64, soc0: f64) -> Result<Vec<f64>> {
    if !(capacity_ah > 0.0) {
        return Err(Error::InvalidArgument(format!("capacity must be positive, got {capacity_ah} Ah")));
    }
    if !(0.0..=1.0).contains(&soc0) {
        return Err(Error::InvalidArgument(format!("initial soc {soc0} outside [0, 1]")));
    }
    let mut charge_as = 0.0;
    let raw = current_a
        .iter()
        .map(|&i| {
            charge_as += i * dt_s;
            soc_after(soc0, charge_as, capacity_ah)
        })
        .collect();
    Ok(clamp_unit(raw, "coulomb counting"))
}

/// SoC after `charge_as` ampere-seconds have been drawn.
#[inline]
pub fn soc_after(soc0: f64, charge_as: f64, capacity_ah: f64) -> f64 {
    soc0 - charge_as / (3600.0 * capacity_ah)
}

/// Decimation: keeps records `0, factor, 2 factor, ...`.
pub fn downsample(cycle: &DriveCycle, factor: usize) -> Result<DriveCycle> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsampling factor must be positive".into()));
    }
    let records: Vec<Record> = cycle.records.iter().step_by(factor).copied().collect();
    if records.is_empty() {
        return Err(Error::Empty("downsampled cycle"));
    }
    Ok(DriveCycle {
        cycle_id: cycle.cycle_id.clone(),
        ambient_c: cycle.ambient_c,
        sampling_hz: cycle.sampling_hz / factor as f64,
        records,
    })
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl NormStats {
    pub fn new(mean: [f64; CHANNELS], std: [f64; CHANNELS]) -> Result<Self> {
        if let Some(c) = (0..CHANNELS).find(|&c| !(std[c] > 0.0 && std[c].is_finite()) || !mean[c].is_finite()) {
            return Err(Error::ZeroVariance(CHANNEL_NAMES[c]));
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    #[inline]
    pub fn normalize(&self, features: [f64; CHANNELS]) -> [f64; CHANNELS] {
        std::array::from_fn(|c| (features[c] - self.mean[c]) / self.std[c])
    }
}

/// Fits z-score statistics over every record of the training cycles.
pub fn fit_norm(train: &[&DriveCycle]) -> Result<NormStats> {
    let n: usize = train.iter().map(|c| c.len()).sum();
    if n == 0 {
        return Err(Error::Empty("training split"));
    }
    let records = || train.iter().flat_map(|c| c.records.iter());
    let mut mean = [0.0; CHANNELS];
    for r in records() {
        for (m, v) in mean.iter_mut().zip(r.features()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = [0.0; CHANNELS];
    for r in records() {
        for c in 0..CHANNELS {
            var[c] += (r.features()[c] - mean[c]).powi(2);
        }
    }
    let std = var.map(|v| (v / n as f64).sqrt());
    for c in 0..CHANNELS {
        // relative threshold: a constant channel leaves only rounding noise
        if std[c] <= 1e-12 * mean[c].abs().max(1.0) {
            return Err(Error::ZeroVariance(CHANNEL_NAMES[c]));
        }
    }
    NormStats::new(mean, std)
}

/// A cycle after normalization (and possibly noise): flat row-major
/// `[len, 3]` features plus SoC labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCycle {
    pub cycle_id: String,
    pub ambient_c: i32,
    pub sampling_hz: f64,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

impl NormalizedCycle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn apply_norm(cycle: &DriveCycle, stats: &NormStats) -> NormalizedCycle {
    NormalizedCycle {
        cycle_id: cycle.cycle_id.clone(),
        ambient_c: cycle.ambient_c,
        sampling_hz: cycle.sampling_hz,
        features: cycle.records.iter().flat_map(|r| stats.normalize(r.features())).collect(),
        labels: cycle.socs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    None,
    A,
    B,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::A => "a",
            NoiseKind::B => "b",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(NoiseKind::None),
            "a" => Ok(NoiseKind::A),
            "b" => Ok(NoiseKind::B),
            other => Err(Error::InvalidArgument(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Additive feature noise.
///
/// * A: `eps ~ N(0, gaussian_var)` per element.
/// * B: per channel draw `z0, z1 ~ U(z_lo, z_hi)` and `eta ~ U(eta_lo,
///   eta_hi)`; per step draw `x_t ~ N(z0, z1)` (`z1` is a variance), iterate
///   `a_t = sin(a_{t-1} eta + tanh(x_t))` from `a_0 = 0` and add
///   `eps_t = 1 / (1 + exp(gain * a_t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub gaussian_var: f64,
    pub z_range: (f64, f64),
    pub eta_range: (f64, f64),
    pub gain: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind) -> Self {
        Self {
            kind,
            gaussian_var: 0.01,
            z_range: (1.0, 10.0),
            eta_range: (1.0, 5.0),
            gain: 0.3,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::new(NoiseKind::None)
    }
}

#[inline]
pub fn noise_b_epsilon(a: f64, gain: f64) -> f64 {
    1.0 / (1.0 + (gain * a).exp())
}

/// Noise A with the default variance of 0.01.
pub fn inject_noise_a(cycle: &mut NormalizedCycle, rng: &mut Rng) {
    inject_noise(cycle, &NoiseSpec::new(NoiseKind::A), rng);
}

pub fn inject_noise_b(cycle: &mut NormalizedCycle, rng: &mut Rng) {
    inject_noise(cycle, &NoiseSpec::new(NoiseKind::B), rng);
}

/// Adds the configured noise to the features in place; labels are never
/// touched.
pub fn inject_noise(cycle: &mut NormalizedCycle, spec: &NoiseSpec, rng: &mut Rng) {
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::A => {
            let std = spec.gaussian_var.sqrt();
            for v in &mut cycle.features {
                *v += rng.gaussian(0.0, std);
            }
        }
        NoiseKind::B => {
            for c in 0..CHANNELS {
                let z0 = rng.uniform(spec.z_range.0, spec.z_range.1);
                let z1 = rng.uniform(spec.z_range.0, spec.z_range.1);
                let eta = rng.uniform(spec.eta_range.0, spec.eta_range.1);
                let x_std = z1.sqrt();
                let mut a = 0.0f64;
                for v in cycle.features.iter_mut().skip(c).step_by(CHANNELS) {
                    let x = rng.gaussian(z0, x_std);
                    a = (a * eta + x.tanh()).sin();
                    *v += noise_b_epsilon(a, spec.gain);
                }
            }
        }
    }
}

/// One `[t_w, 3]` input window and the SoC at its last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureWindow<'a> {
    pub features: &'a [f64],
    pub label: f64,
    pub cycle_id: &'a str,
    pub ambient_c: i32,
    /// Index of the window's last timestep within its cycle.
    pub end: usize,
}

fn window_at(cycle: &NormalizedCycle, t_w: usize, end: usize) -> FeatureWindow<'_> {
    FeatureWindow {
        features: &cycle.features[(end + 1 - t_w) * CHANNELS..(end + 1) * CHANNELS],
        label: cycle.labels[end],
        cycle_id: &cycle.cycle_id,
        ambient_c: cycle.ambient_c,
        end,
    }
}

/// All `len - t_w + 1` windows of a cycle. A cycle shorter than `t_w`
/// yields none (with a warning).
pub fn make_windows(cycle: &NormalizedCycle, t_w: usize) -> Vec<FeatureWindow<'_>> {
    if t_w == 0 || cycle.len() < t_w {
        warn!(
            "{}@{}C: {} samples cannot fill a window of {t_w}; cycle skipped",
            cycle.cycle_id,
            cycle.ambient_c,
            cycle.len()
        );
        return Vec::new();
    }
    (t_w - 1..cycle.len()).map(|end| window_at(cycle, t_w, end)).collect()
}

/// Windows over a set of owned cycles, addressed by a flat index.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub t_w: usize,
    pub cycles: Vec<NormalizedCycle>,
    index: Vec<(u32, u32)>,
}

impl WindowSet {
    pub fn new(cycles: Vec<NormalizedCycle>, t_w: usize) -> Self {
        let mut index = Vec::new();
        for (ci, c) in cycles.iter().enumerate() {
            let count = make_windows(c, t_w).len();
            index.extend((0..count).map(|k| (ci as u32, (k + t_w - 1) as u32)));
        }
        Self { t_w, cycles, index }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, i: usize) -> FeatureWindow<'_> {
        let (c, end) = self.index[i];
        window_at(&self.cycles[c as usize], self.t_w, end as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureWindow<'_>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Window indices grouped by (cycle, ambient temperature), sorted.
    pub fn groups(&self) -> BTreeMap<(String, i32), Vec<usize>> {
        let mut out: BTreeMap<(String, i32), Vec<usize>> = BTreeMap::new();
        for c in &self.cycles {
            out.entry((c.cycle_id.clone(), c.ambient_c)).or_default();
        }
        for (i, &(c, _)) in self.index.iter().enumerate() {
            let cycle = &self.cycles[c as usize];
            out.get_mut(&(cycle.cycle_id.clone(), cycle.ambient_c)).unwrap().push(i);
        }
        out
    }
}

/// Independent Bernoulli(`keep_prob`) selection; redrawn until non-empty.
pub fn subsample_cycles<T: Clone>(cycles: &[T], keep_prob: f64, rng: &mut Rng) -> Result<Vec<T>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    if cycles.is_empty() {
        return Ok(Vec::new());
    }
    let mut attempt = 0;
    loop {
        let kept: Vec<T> = cycles.iter().filter(|_| rng.bernoulli(keep_prob)).cloned().collect();
        if !kept.is_empty() {
            return Ok(kept);
        }
        attempt += 1;
        info!("subsampling kept no cycles, redrawing (attempt {attempt})");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Panasonic,
    Lg,
    SynthA,
    SynthB,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Panasonic => "panasonic",
            DatasetKind::Lg => "lg",
            DatasetKind::SynthA => "synthA",
            DatasetKind::SynthB => "synthB",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "panasonic" => Ok(DatasetKind::Panasonic),
            "lg" => Ok(DatasetKind::Lg),
            "syntha" => Ok(DatasetKind::SynthA),
            "synthb" => Ok(DatasetKind::SynthB),
            other => Err(Error::InvalidArgument(format!("unknown dataset {other:?}"))),
        }
    }
}

/// A (cycle name, ambient temperature) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CycleRef {
    pub name: String,
    pub ambient_c: i32,
}

impl fmt::Display for CycleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}C", self.name, self.ambient_c)
    }
}

/// Dataset layout and cycle assignment, read from `recipe.txt` in the
/// dataset directory when present.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeManifest {
    pub dataset: DatasetKind,
    pub capacity_ah: f64,
    pub current_sign: f64,
    pub native_hz: f64,
    pub soc0: f64,
    pub temperatures: Vec<i32>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_FILE: &str = "recipe.txt";

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl RecipeManifest {
    pub fn defaults(dataset: DatasetKind) -> Self {
        let public_temps = vec![-20, -10, 0, 10, 25];
        let test = names(&["US06", "HWFET"]);
        let val = names(&["LA92"]);
        match dataset {
            DatasetKind::Panasonic => Self {
                dataset,
                capacity_ah: 2.9,
                current_sign: -1.0,
                native_hz: 10.0,
                soc0: 1.0,
                temperatures: public_temps,
                train: names(&["Cycle1", "Cycle2", "Cycle3", "Cycle4", "UDDS"]),
                val,
                test,
            },
            DatasetKind::Lg => Self {
                dataset,
                capacity_ah: 3.0,
                current_sign: -1.0,
                native_hz: 10.0,
                soc0: 1.0,
                temperatures: public_temps,
                train: (1..=8).map(|i| format!("Mixed{i}")).chain(["UDDS".to_string()]).collect(),
                val,
                test,
            },
            DatasetKind::SynthA | DatasetKind::SynthB => Self {
                dataset,
                capacity_ah: crate::synth::SynthCellSpec::preset(dataset).map_or(3.0, |s| s.capacity_ah),
                current_sign: 1.0,
                native_hz: 10.0,
                soc0: 1.0,
                temperatures: vec![10, 25],
                train: names(&["Mixed1", "Mixed2", "UDDS"]),
                val,
                test,
            },
        }
    }

    pub fn to_text(&self) -> String {
        let join = |xs: &[String]| xs.join(",");
        format!(
            "dataset={}\ncapacity_ah={}\ncurrent_sign={}\nnative_hz={}\nsoc0={}\ntemperatures={}\ntrain={}\nval={}\ntest={}\n",
            self.dataset,
            self.capacity_ah,
            self.current_sign,
            self.native_hz,
            self.soc0,
            self.temperatures.iter().map(i32::to_string).collect::<Vec<_>>().join(","),
            join(&self.train),
            join(&self.val),
            join(&self.test),
        )
    }

    /// Parses `key=value` lines over the defaults of `dataset`. Unknown keys
    /// are rejected; `#` starts a comment.
    pub fn parse(text: &str, dataset: DatasetKind) -> Result<Self> {
        let mut m = Self::defaults(dataset);
        let bad = |k: &str, v: &str| Error::InvalidArgument(format!("recipe manifest: bad value {v:?} for {k}"));
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
        };
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("recipe manifest: bad line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "dataset" => {
                    let kind: DatasetKind = v.parse()?;
                    if kind != dataset {
                        return Err(Error::InvalidArgument(format!(
                            "recipe manifest is for {kind}, requested {dataset}"
                        )));
                    }
                }
                "capacity_ah" => m.capacity_ah = v.parse().map_err(|_| bad(k, v))?,
                "current_sign" => m.current_sign = v.parse().map_err(|_| bad(k, v))?,
                "native_hz" => m.native_hz = v.parse().map_err(|_| bad(k, v))?,
                "soc0" => m.soc0 = v.parse().map_err(|_| bad(k, v))?,
                "temperatures" => {
                    m.temperatures = list(v)
                        .iter()
                        .map(|t| t.parse().map_err(|_| bad(k, t)))
                        .collect::<Result<_>>()?
                }
                "train" => m.train = list(v),
                "val" => m.val = list(v),
                "test" => m.test = list(v),
                other => {
                    return Err(Error::InvalidArgument(format!("recipe manifest: unknown key {other}")));
                }
            }
        }
        if !(m.current_sign == 1.0 || m.current_sign == -1.0) {
            return Err(bad("current_sign", &m.current_sign.to_string()));
        }
        if !(m.capacity_ah > 0.0) || !(m.native_hz > 0.0) {
            return Err(Error::InvalidArgument("recipe manifest: capacity and rate must be positive".into()));
        }
        Ok(m)
    }

    /// Reads `<root>/<dataset>/recipe.txt`, falling back to the defaults.
    pub fn load_or_default(root: &Path, dataset: DatasetKind) -> Result<Self> {
        let path = dataset_dir(root, dataset).join(MANIFEST_FILE);
        if path.exists() {
            Self::parse(&std::fs::read_to_string(&path)?, dataset)
        } else {
            Ok(Self::defaults(dataset))
        }
    }

    pub fn split(&self) -> Result<RecipeSplit> {
        let expand = |cycles: &[String]| -> Vec<CycleRef> {
            let mut v: Vec<CycleRef> = cycles
                .iter()
                .flat_map(|name| {
                    self.temperatures.iter().map(move |&t| CycleRef {
                        name: name.clone(),
                        ambient_c: t,
                    })
                })
                .collect();
            v.sort();
            v
        };
        let split = RecipeSplit {
            train: expand(&self.train),
            val: expand(&self.val),
            test: expand(&self.test),
        };
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn cycle_path(&self, root: &Path, cycle: &CycleRef) -> PathBuf {
        dataset_dir(root, self.dataset)
            .join(cycle.ambient_c.to_string())
            .join(format!("{}.csv", cycle.name))
    }

    pub fn cycle_meta(&self, cycle: &CycleRef) -> CycleMeta {
        CycleMeta {
            cycle_id: cycle.name.clone(),
            ambient_c: cycle.ambient_c,
            sampling_hz: self.native_hz,
            capacity_ah: self.capacity_ah,
            current_sign: self.current_sign,
            soc0: self.soc0,
        }
    }
}

pub fn dataset_dir(root: &Path, dataset: DatasetKind) -> PathBuf {
    root.join(dataset.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeSplit {
    pub train: Vec<CycleRef>,
    pub val: Vec<CycleRef>,
    pub test: Vec<CycleRef>,
}

impl RecipeSplit {
    pub fn check_disjoint(&self) -> Result<()> {
        let names = |v: &[CycleRef]| v.iter().map(|c| c.name.clone()).collect::<std::collections::BTreeSet<_>>();
        let (tr, va, te) = (names(&self.train), names(&self.val), names(&self.test));
        let overlap: Vec<String> = tr
            .intersection(&va)
            .chain(tr.intersection(&te))
            .chain(va.intersection(&te))
            .cloned()
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "cycles assigned to more than one split: {}",
                overlap.join(", ")
            )))
        }
    }
}

/// Options for [`assemble_recipe`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOptions {
    pub sampling_hz: f64,
    pub t_w: usize,
    pub noise: NoiseSpec,
    /// Keep each training cycle with this probability.
    pub keep_prob: Option<f64>,
    /// Use these statistics instead of fitting on the training split.
    pub norm_override: Option<NormStats>,
}

/// Train/validation/test windows ready for training.
#[derive(Debug, Clone)]
pub struct PreparedRecipe {
    pub split: RecipeSplit,
    pub norm: NormStats,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Decimation factor from `native_hz` to `target_hz`.
pub fn decimation_factor(native_hz: f64, target_hz: f64) -> Result<usize> {
    let ratio = native_hz / target_hz;
    let factor = ratio.round();
    if !(target_hz > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 * ratio {
        return Err(Error::InvalidArgument(format!(
            "cannot reach {target_hz} Hz from {native_hz} Hz by decimation"
        )));
    }
    Ok(factor as usize)
}

/// Loads every cycle of `refs`, reporting all missing files at once.
pub fn load_cycles(root: &Path, manifest: &RecipeManifest, refs: &[CycleRef]) -> Result<Vec<DriveCycle>> {
    let missing: Vec<String> = refs
        .iter()
        .filter(|c| !manifest.cycle_path(root, c).is_file())
        .map(|c| format!("{} ({})", c, manifest.cycle_path(root, c).display()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCycles(missing));
    }
    refs.iter()
        .map(|c| load_cycle(&manifest.cycle_path(root, c), &manifest.cycle_meta(c)))
        .collect()
}

pub const TRAIN_NOISE_STREAM: u64 = 0x1000;
pub const VAL_NOISE_STREAM: u64 = 0x2000;
pub const TEST_NOISE_STREAM: u64 = 0x3000;

/// Normalizes, perturbs and windows one split. Cycle `i` draws its noise
/// from `rng.fork(stream_base + i)`, so a split can be rebuilt on its own
/// with exactly the noise it had inside [`assemble_recipe`].
pub fn prepare_windows(cycles: &[DriveCycle], norm: &NormStats, noise: &NoiseSpec, t_w: usize, rng: &Rng, stream_base: u64) -> WindowSet {
    let normalized = cycles
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut n = apply_norm(c, norm);
            inject_noise(&mut n, noise, &mut rng.fork(stream_base + i as u64));
            n
        })
        .collect();
    WindowSet::new(normalized, t_w)
}

/// Builds the train/val/test window sets of a dataset recipe: load,
/// decimate, (optionally) subsample training cycles, fit normalization on
/// the training split, normalize, add noise to every split, window.
pub fn assemble_recipe(root: &Path, manifest: &RecipeManifest, opts: &RecipeOptions, rng: &mut Rng) -> Result<PreparedRecipe> {
    let mut split = manifest.split()?;
    let factor = decimation_factor(manifest.native_hz, opts.sampling_hz)?;
    let mut all: Vec<CycleRef> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
    all.sort();
    // fail on any missing cycle before doing any work
    let missing: Vec<String> = all
        .iter()
        .filter(|c| !manifest.cycle_path(root, c).is_file())
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCycles(missing));
    }

    if let Some(p) = opts.keep_prob {
        let mut sub_rng = rng.fork(0x5ab5);
        split.train = subsample_cycles(&split.train, p, &mut sub_rng)?;
        info!(
            "kept {} of the training cycles: {}",
            split.train.len(),
            split.train.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
        );
    }

    let load = |refs: &[CycleRef]| -> Result<Vec<DriveCycle>> {
        load_cycles(root, manifest, refs)?
            .iter()
            .map(|c| downsample(c, factor))
            .collect()
    };
    let train = load(&split.train)?;
    let val = load(&split.val)?;
    let test = load(&split.test)?;
    let norm = match opts.norm_override {
        Some(n) => n,
        None => fit_norm(&train.iter().collect::<Vec<_>>())?,
    };

    let train = prepare_windows(&train, &norm, &opts.noise, opts.t_w, rng, TRAIN_NOISE_STREAM);
    let val = prepare_windows(&val, &norm, &opts.noise, opts.t_w, rng, VAL_NOISE_STREAM);
    let test = prepare_windows(&test, &norm, &opts.noise, opts.t_w, rng, TEST_NOISE_STREAM);
    Ok(PreparedRecipe {
        split,
        norm,
        train,
        val,
        test,
    })
}
