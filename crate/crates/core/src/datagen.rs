//! Synthetic driving-telemetry generator: a small coupled plant model
//! producing the 24 instrumented channels, plus sensor-fault injection
//! (noise, gain, offset) and CSV persistence.
//!
//! The plant is deliberately simple: a piecewise target-speed profile per
//! scenario, first-order speed tracking, and algebraic couplings from the
//! drive state to engine, airpath, and fuel channels with small AR(1)
//! process noise. The acceleration channel records the realized (tracked)
//! acceleration, so the speed channel is exactly its discrete integral.

use crate::error::{invalid, Result, XfddError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Instrumented channel names, fixed order; CSV column order.
pub const CHANNEL_NAMES: [&str; 24] = [
    "a_x_Vehicle_Ref[m/s²]",
    "v_Vehicle[km/h]",
    "v_Vehicle_Ref[km/h]",
    "FuelTank[0,1]",
    "P_Engine[kW]",
    "Pos_Throttle[%]",
    "T_Out_Comp[°C]",
    "T_Out_InterCooler[°C]",
    "T_Rail[°C]",
    "Trq_MeanInd_Engine_Mod[Nm]",
    "lambda",
    "lambda_bCat[]",
    "mdot_Out_EGR[kg/h]",
    "mdot_Out_EGR_Air[kg/h]",
    "mdot_Out_Throttle[kg/h]",
    "mdot_Turb[kg/h]",
    "omega_TC[rpm]",
    "p_InMan[Pa]",
    "p_In_Throttle[Pa]",
    "p_Out_Throttle[Pa]",
    "q_Mean_Inj[mg/cycle]",
    "q_Mean_Inj_Alt[mm³/cycle]",
    "q_PresCtrlValve[mm³/s]",
    "q_RailLeak[mm³/s]",
];

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES.iter().position(|&n| n == name)
}

/// Fault-target channels: pedal-demand, speed-reference, and engine-speed
/// sensors (the L1/L2/L3 targets of the localization task).
pub const L1_CHANNEL: &str = "a_x_Vehicle_Ref[m/s²]";
pub const L2_CHANNEL: &str = "v_Vehicle_Ref[km/h]";
pub const L3_CHANNEL: &str = "omega_TC[rpm]";
/// The type-classification task injects every fault kind here.
pub const TYPE_TASK_CHANNEL: &str = L3_CHANNEL;

#[derive(Clone, Debug)]
pub struct Recording {
    /// channels[c][t], c indexed per CHANNEL_NAMES.
    pub channels: Vec<Vec<f64>>,
    pub rate: f64,
    pub seed: u64,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.rate
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        channel_index(name).map(|i| self.channels[i].as_slice())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Highway,
    LaneChange,
    City,
}

impl std::str::FromStr for Scenario {
    type Err = XfddError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Scenario::Highway),
            "lane_change" | "lane-change" => Ok(Scenario::LaneChange),
            "city" => Ok(Scenario::City),
            other => Err(XfddError::InvalidArgument(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Noise,
    Gain,
    Offset,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::Noise => write!(f, "noise"),
            FaultKind::Gain => write!(f, "gain"),
            FaultKind::Offset => write!(f, "offset"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub channels: Vec<String>,
    /// noise: target SNR in dB; gain: multiplier; offset: additive constant
    /// in channel units.
    pub magnitude: f64,
    pub start: f64,
    pub end: f64,
}

// ---- simulation ----

/// Piecewise target speed in km/h at time t.
fn target_speed(scenario: Scenario, t: f64, phase: f64) -> f64 {
    match scenario {
        Scenario::Highway => {
            // Long cruise segments alternating between 95 and 120.
            let seg = ((t + phase * 40.0) / 25.0).floor() as i64;
            if seg.rem_euclid(2) == 0 {
                95.0
            } else {
                120.0
            }
        }
        Scenario::LaneChange => {
            // Steady 80 with brief dips during maneuvers.
            let cycle = (t + phase * 10.0) % 12.0;
            if cycle < 1.5 {
                68.0
            } else {
                80.0
            }
        }
        Scenario::City => {
            // Stop-and-go between 0 and 45.
            let seg = ((t + phase * 20.0) / 10.0).floor() as i64;
            match seg.rem_euclid(4) {
                0 => 0.0,
                1 => 30.0,
                2 => 45.0,
                _ => 15.0,
            }
        }
    }
}

/// Deterministic plant run; all channels derive from the tracked drive state
/// plus channel-local AR(1) noise.
pub fn simulate_drive(scenario: Scenario, duration: f64, rate: f64, seed: u64) -> Result<Recording> {
    if duration < 0.0 || rate <= 0.0 {
        return invalid(format!("duration {duration} / rate {rate} out of range"));
    }
    let n = (duration * rate).round() as usize;
    let dt = 1.0 / rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| XfddError::Numeric(e.to_string()))?;
    let phase: f64 = rng.gen();

    let mut channels = vec![Vec::with_capacity(n); 24];
    // AR(1) state per channel for process noise.
    let mut ar = [0.0f64; 24];
    let ar_sigma: [f64; 24] = [
        0.0, 0.0, 0.0, 0.0005, 0.4, 0.8, 0.5, 0.4, 0.3, 0.8, 0.004, 0.004, 0.3, 0.25, 0.5, 0.5,
        250.0, 300.0, 120.0, 150.0, 0.05, 0.06, 1.5, 0.02,
    ];

    let mut v_ms = 0.0f64; // tracked speed, m/s
    let mut fuel = 0.9f64;
    let mut t_comp = 40.0f64;
    let mut lambda_s = 1.0f64;

    for i in 0..n {
        let t = i as f64 * dt;
        for (c, s) in ar.iter_mut().zip(ar_sigma) {
            *c = 0.95 * *c + s * normal.sample(&mut rng);
        }
        let v_tgt_kmh = target_speed(scenario, t, phase);
        let v_tgt = v_tgt_kmh / 3.6;
        // First-order tracking with accel limits; the realized value is what
        // the acceleration channel reports.
        let a = (0.6 * (v_tgt - v_ms)).clamp(-3.0, 2.5);
        let v_prev = v_ms;
        v_ms += a * dt;
        if v_ms < 0.0 {
            v_ms = 0.0;
        }
        // Keep the integral identity exact even at the standstill clamp.
        let a_realized = (v_ms - v_prev) / dt;

        let p_engine = ((1500.0 * a_realized * v_ms + 0.8 * v_ms.powi(3)) / 1000.0 + 3.0)
            .max(0.0)
            + ar[4].abs() * 0.2;
        let throttle = (12.0 + 28.0 * a_realized.max(0.0) + 0.9 * v_ms + ar[5]).clamp(0.0, 100.0);
        fuel = (fuel - p_engine * dt * 2.0e-6 + ar[3] * 1e-4).clamp(0.0, 1.0);
        t_comp += (40.0 + 0.9 * p_engine - t_comp) * 0.02 + ar[6] * 0.05;
        lambda_s += (1.0 + 0.04 * (0.8 * t).sin() - 0.003 * a_realized - lambda_s) * 0.1
            + ar[10] * 0.05;

        let mdot_throttle = 5.0 + 2.2 * p_engine + ar[14];
        let mdot_egr = 0.12 * mdot_throttle + 0.4 * (0.3 * t).sin() + ar[12];
        let mdot_egr_air = 0.8 * mdot_egr + ar[13];
        let mdot_turb = 0.95 * mdot_throttle + 0.5 * mdot_egr + ar[15];
        let omega_tc = 20000.0 + 850.0 * p_engine + 45.0 * v_ms * 3.6 + ar[16];
        let p_inman = 30000.0 + 680.0 * throttle + ar[17];
        let p_in_thr = 101325.0 - 140.0 * throttle + ar[18];
        let p_out_thr = 0.97 * p_inman + 1000.0 + ar[19];
        let trq = 25.0 + 2.1 * p_engine + 8.0 * a_realized + ar[9];
        let q_inj = 2.0 + 0.35 * p_engine + ar[20];
        let q_inj_alt = 1.18 * q_inj + ar[21];
        let q_pcv = 120.0 + 1.5 * p_engine + ar[22];
        let q_leak = 0.5 + 0.02 * p_engine + ar[23].abs();

        let row: [f64; 24] = [
            a_realized,
            v_ms * 3.6,
            v_tgt_kmh,
            fuel,
            p_engine,
            throttle,
            t_comp,
            0.6 * t_comp + 15.0 + ar[7] * 0.1,
            60.0 + 0.3 * p_engine + ar[8] * 0.2,
            trq,
            lambda_s,
            0.98 * lambda_s + 0.015 + ar[11] * 0.02,
            mdot_egr,
            mdot_egr_air,
            mdot_throttle,
            mdot_turb,
            omega_tc,
            p_inman,
            p_in_thr,
            p_out_thr,
            q_inj,
            q_inj_alt,
            q_pcv,
            q_leak,
        ];
        for (c, v) in channels.iter_mut().zip(row) {
            c.push(v);
        }
    }
    Ok(Recording { channels, rate, seed })
}

// ---- fault injection ----

/// Apply one fault to a copy of the recording. Noise draws are rescaled so
/// the measured in-interval SNR matches the target exactly (a zero-power
/// signal interval receives no noise, SNR being undefined there).
pub fn inject_fault(rec: &Recording, fault: &FaultSpec, seed: u64) -> Result<Recording> {
    let dur = rec.duration();
    if fault.start < 0.0 || fault.end > dur + 1e-9 || fault.start >= fault.end {
        return invalid(format!(
            "fault interval [{}, {}] outside recording of {dur} s",
            fault.start, fault.end
        ));
    }
    let lo = (fault.start * rec.rate).floor() as usize;
    let hi = ((fault.end * rec.rate).ceil() as usize).min(rec.len());
    if lo >= hi {
        return invalid("fault interval contains no samples");
    }
    let mut out = rec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| XfddError::Numeric(e.to_string()))?;
    for name in &fault.channels {
        let idx = channel_index(name)
            .ok_or_else(|| XfddError::InvalidArgument(format!("unknown channel '{name}'")))?;
        let ch = &mut out.channels[idx];
        match fault.kind {
            FaultKind::Gain => {
                for v in &mut ch[lo..hi] {
                    *v *= fault.magnitude;
                }
            }
            FaultKind::Offset => {
                for v in &mut ch[lo..hi] {
                    *v += fault.magnitude;
                }
            }
            FaultKind::Noise => {
                let m = (hi - lo) as f64;
                let p_signal = ch[lo..hi].iter().map(|v| v * v).sum::<f64>() / m;
                if p_signal > 0.0 {
                    let p_noise = p_signal / 10f64.powf(fault.magnitude / 10.0);
                    let draws: Vec<f64> = (lo..hi).map(|_| normal.sample(&mut rng)).collect();
                    let p_draw = draws.iter().map(|v| v * v).sum::<f64>() / m;
                    if p_draw > 0.0 {
                        let scale = (p_noise / p_draw).sqrt();
                        for (v, e) in ch[lo..hi].iter_mut().zip(&draws) {
                            *v += e * scale;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Measured SNR in dB of `faulty` against `clean` over the sample interval.
pub fn measured_snr_db(clean: &[f64], faulty: &[f64], lo: usize, hi: usize) -> f64 {
    let m = (hi - lo) as f64;
    let p_signal = clean[lo..hi].iter().map(|v| v * v).sum::<f64>() / m;
    let p_noise = clean[lo..hi]
        .iter()
        .zip(&faulty[lo..hi])
        .map(|(c, f)| (f - c) * (f - c))
        .sum::<f64>()
        / m;
    10.0 * (p_signal / p_noise).log10()
}

// ---- dataset generation ----

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FaultType,
    FaultLocation,
}

impl std::str::FromStr for Task {
    type Err = XfddError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fault_type" | "fault-type" => Ok(Task::FaultType),
            "fault_location" | "fault-location" => Ok(Task::FaultLocation),
            other => Err(XfddError::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::FaultType => write!(f, "fault_type"),
            Task::FaultLocation => write!(f, "fault_location"),
        }
    }
}

impl Task {
    /// Class labels in id order (0..7).
    pub fn classes(self) -> [&'static str; 7] {
        match self {
            Task::FaultType => ["H", "F1", "F2", "F3", "F1F2", "F1F3", "F2F3"],
            Task::FaultLocation => ["H", "L1", "L2", "L3", "L1L2", "L1L3", "L2L3"],
        }
    }

    pub fn class_id(self, label: &str) -> Option<usize> {
        self.classes().iter().position(|&c| c == label)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub task: Task,
    /// Window count the smallest class should reach after windowing.
    pub per_class_windows: usize,
    /// Largest-to-smallest class size ratio; 1.0 means balanced.
    pub imbalance_ratio: f64,
    pub duration: f64,
    pub rate: f64,
    /// Window/step used only to size the number of recordings per class.
    pub window: usize,
    pub step: usize,
    pub snr_db: f64,
    pub gain: f64,
    /// Offset magnitude in units of the healthy channel's standard deviation.
    pub offset_sigmas: f64,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            task: Task::FaultType,
            per_class_windows: 1000,
            imbalance_ratio: 1.0,
            duration: 40.0,
            rate: 50.0,
            window: 50,
            step: 25,
            snr_db: 6.0,
            gain: 1.6,
            offset_sigmas: 3.0,
            seed: 7,
        }
    }
}

/// The fault set defining a class label. Single faults and pairs; the type
/// task varies the kind on one channel, the location task varies the channel
/// set with a fixed noise kind.
fn class_faults(task: Task, label: &str, cfg: &DatagenConfig, std_by_channel: &[f64]) -> Vec<FaultSpec> {
    let full = |kind: FaultKind, channel: &str| {
        let magnitude = match kind {
            FaultKind::Noise => cfg.snr_db,
            FaultKind::Gain => cfg.gain,
            FaultKind::Offset => {
                cfg.offset_sigmas * std_by_channel[channel_index(channel).expect("known channel")]
            }
        };
        FaultSpec {
            kind,
            channels: vec![channel.to_string()],
            magnitude,
            start: 0.0,
            end: cfg.duration,
        }
    };
    match (task, label) {
        (_, "H") => vec![],
        (Task::FaultType, "F1") => vec![full(FaultKind::Noise, TYPE_TASK_CHANNEL)],
        (Task::FaultType, "F2") => vec![full(FaultKind::Gain, TYPE_TASK_CHANNEL)],
        (Task::FaultType, "F3") => vec![full(FaultKind::Offset, TYPE_TASK_CHANNEL)],
        (Task::FaultType, "F1F2") => vec![
            full(FaultKind::Noise, TYPE_TASK_CHANNEL),
            full(FaultKind::Gain, TYPE_TASK_CHANNEL),
        ],
        (Task::FaultType, "F1F3") => vec![
            full(FaultKind::Noise, TYPE_TASK_CHANNEL),
            full(FaultKind::Offset, TYPE_TASK_CHANNEL),
        ],
        (Task::FaultType, "F2F3") => vec![
            full(FaultKind::Gain, TYPE_TASK_CHANNEL),
            full(FaultKind::Offset, TYPE_TASK_CHANNEL),
        ],
        (Task::FaultLocation, "L1") => vec![full(FaultKind::Noise, L1_CHANNEL)],
        (Task::FaultLocation, "L2") => vec![full(FaultKind::Noise, L2_CHANNEL)],
        (Task::FaultLocation, "L3") => vec![full(FaultKind::Noise, L3_CHANNEL)],
        (Task::FaultLocation, "L1L2") => {
            vec![full(FaultKind::Noise, L1_CHANNEL), full(FaultKind::Noise, L2_CHANNEL)]
        }
        (Task::FaultLocation, "L1L3") => {
            vec![full(FaultKind::Noise, L1_CHANNEL), full(FaultKind::Noise, L3_CHANNEL)]
        }
        (Task::FaultLocation, "L2L3") => {
            vec![full(FaultKind::Noise, L2_CHANNEL), full(FaultKind::Noise, L3_CHANNEL)]
        }
        _ => unreachable!("label comes from Task::classes"),
    }
}

/// Class label as a pure function of the injected fault set.
pub fn label_of_faults(task: Task, faults: &[FaultSpec]) -> String {
    if faults.is_empty() {
        return "H".into();
    }
    match task {
        Task::FaultType => {
            let mut tags: Vec<&str> = faults
                .iter()
                .map(|f| match f.kind {
                    FaultKind::Noise => "F1",
                    FaultKind::Gain => "F2",
                    FaultKind::Offset => "F3",
                })
                .collect();
            tags.sort();
            tags.dedup();
            tags.join("")
        }
        Task::FaultLocation => {
            let mut tags: Vec<&str> = faults
                .iter()
                .flat_map(|f| f.channels.iter())
                .map(|c| match c.as_str() {
                    x if x == L1_CHANNEL => "L1",
                    x if x == L2_CHANNEL => "L2",
                    x if x == L3_CHANNEL => "L3",
                    _ => "L?",
                })
                .collect();
            tags.sort();
            tags.dedup();
            tags.join("")
        }
    }
}

pub struct LabeledRecording {
    pub recording: Recording,
    pub label: String,
    pub scenario: Scenario,
    pub faults: Vec<FaultSpec>,
}

/// Windows one recording of length `n` yields under (window, step).
pub fn windows_per_recording(n: usize, window: usize, step: usize) -> usize {
    if n < window || step == 0 {
        0
    } else {
        (n - window) / step + 1
    }
}

/// Generate labeled recordings for all 7 classes of the task. Recording i
/// uses seed root+i (stated splitting rule); scenarios rotate per recording.
pub fn generate_dataset(cfg: &DatagenConfig) -> Result<Vec<LabeledRecording>> {
    if cfg.per_class_windows == 0 {
        return invalid("per-class window budget must be positive");
    }
    if cfg.imbalance_ratio < 1.0 {
        return invalid("imbalance ratio must be >= 1.0 (largest/smallest)");
    }
    let n_samples = (cfg.duration * cfg.rate).round() as usize;
    let wpr = windows_per_recording(n_samples, cfg.window, cfg.step);
    if wpr == 0 {
        return invalid(format!(
            "recording of {n_samples} samples yields no windows of {} step {}",
            cfg.window, cfg.step
        ));
    }
    // Estimate per-channel std once from a healthy probe for offset scaling.
    let probe = simulate_drive(Scenario::Highway, cfg.duration, cfg.rate, cfg.seed)?;
    let std_by_channel: Vec<f64> = probe
        .channels
        .iter()
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            (ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        })
        .collect();

    let classes = cfg.task.classes();
    let scenarios = [Scenario::Highway, Scenario::LaneChange, Scenario::City];
    let mut out = Vec::new();
    let mut rec_index = 0u64;
    for (ci, label) in classes.iter().enumerate() {
        // Class 0 is largest under imbalance; later classes shrink linearly
        // down to budget/ratio. Ratio 1 keeps every class at the budget.
        let frac = 1.0 - (1.0 - 1.0 / cfg.imbalance_ratio) * (ci as f64 / 6.0);
        let class_windows = ((cfg.per_class_windows as f64 * cfg.imbalance_ratio) * frac)
            .round()
            .max(1.0) as usize;
        let recs = class_windows.div_ceil(wpr);
        for _ in 0..recs {
            let seed = cfg.seed.wrapping_add(rec_index);
            let scenario = scenarios[(rec_index % 3) as usize];
            let healthy = simulate_drive(scenario, cfg.duration, cfg.rate, seed)?;
            let faults = class_faults(cfg.task, label, cfg, &std_by_channel);
            let mut rec = healthy;
            for (fi, fault) in faults.iter().enumerate() {
                rec = inject_fault(&rec, fault, seed.wrapping_add(1000 * (fi as u64 + 1)))?;
            }
            debug_assert_eq!(label_of_faults(cfg.task, &faults), *label);
            out.push(LabeledRecording { recording: rec, label: label.to_string(), scenario, faults });
            rec_index += 1;
        }
    }
    Ok(out)
}

// ---- CSV persistence ----

/// One file per recording: header = channel names + "label", one row per
/// sample, shortest round-trip decimal formatting. Fields with commas in
/// their names (FuelTank[0,1]) get RFC 4180 quoting from the csv writer.
pub fn save_csv(path: &Path, rec: &Recording, label: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| XfddError::Format(format!("{}: {e}", path.display())))?;
    let mut header: Vec<&str> = CHANNEL_NAMES.to_vec();
    header.push("label");
    w.write_record(&header)
        .map_err(|e| XfddError::Format(e.to_string()))?;
    let mut row: Vec<String> = vec![String::new(); 25];
    for t in 0..rec.len() {
        for c in 0..24 {
            row[c] = format!("{}", rec.channels[c][t]);
        }
        row[24] = label.to_string();
        w.write_record(&row).map_err(|e| XfddError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path, rate: f64) -> Result<(Recording, String)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| XfddError::Format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| XfddError::Format(format!("{}: {e}", path.display())))?
        .clone();
    if header.len() != 25 {
        return Err(XfddError::Format(format!(
            "{}: expected 25 columns, found {}",
            path.display(),
            header.len()
        )));
    }
    for (i, col) in header.iter().take(24).enumerate() {
        if col != CHANNEL_NAMES[i] {
            return Err(XfddError::Format(format!(
                "{}: unknown column '{col}' (expected '{}')",
                path.display(),
                CHANNEL_NAMES[i]
            )));
        }
    }
    if &header[24] != "label" {
        return Err(XfddError::Format(format!(
            "{}: unknown column '{}' (expected 'label')",
            path.display(),
            &header[24]
        )));
    }
    let mut channels = vec![Vec::new(); 24];
    let mut label = String::new();
    for (ln, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| XfddError::Format(format!("{}: {e}", path.display())))?;
        if rec.len() != 25 {
            return Err(XfddError::Format(format!(
                "{}: row {} has {} fields",
                path.display(),
                ln + 2,
                rec.len()
            )));
        }
        for c in 0..24 {
            let v: f64 = rec[c].parse().map_err(|e| {
                XfddError::Format(format!("{}: row {}: {e}", path.display(), ln + 2))
            })?;
            channels[c].push(v);
        }
        if label.is_empty() {
            label = rec[24].to_string();
        } else if label != &rec[24] {
            return Err(XfddError::Format(format!(
                "{}: mixed labels '{label}' and '{}'",
                path.display(),
                &rec[24]
            )));
        }
    }
    if channels[0].is_empty() {
        return Err(XfddError::Format(format!("{}: recording has no samples", path.display())));
    }
    Ok((Recording { channels, rate, seed: 0 }, label))
}

#[derive(Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub task: Task,
    pub config: DatagenConfig,
    pub class_recordings: Vec<(String, usize)>,
    pub files: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate_drive(Scenario::City, 5.0, 50.0, 42).unwrap();
        let b = simulate_drive(Scenario::City, 5.0, 50.0, 42).unwrap();
        for (ca, cb) in a.channels.iter().zip(&b.channels) {
            assert_eq!(ca, cb);
        }
        let c = simulate_drive(Scenario::City, 5.0, 50.0, 43).unwrap();
        assert_ne!(a.channels[1], c.channels[1]);
    }

    #[test]
    fn speed_integrates_acceleration() {
        for scenario in [Scenario::Highway, Scenario::LaneChange, Scenario::City] {
            let rec = simulate_drive(scenario, 20.0, 50.0, 9).unwrap();
            let a = rec.channel(L1_CHANNEL).unwrap();
            let v = rec.channel("v_Vehicle[km/h]").unwrap();
            let dt = 1.0 / rec.rate;
            let full_scale = v.iter().cloned().fold(0.0f64, f64::max).max(1.0);
            for i in 1..rec.len() {
                // numerical derivative of speed (m/s) vs reported acceleration
                let dv = (v[i] - v[i - 1]) / 3.6 / dt;
                assert!(
                    (dv - a[i]).abs() <= 1e-3 * full_scale,
                    "{scenario:?} t={i}: dv {dv} vs a {}",
                    a[i]
                );
            }
        }
    }

    #[test]
    fn zero_duration_gives_empty_named_channels() {
        let rec = simulate_drive(Scenario::Highway, 0.0, 100.0, 1).unwrap();
        assert_eq!(rec.channels.len(), 24);
        assert!(rec.channels.iter().all(|c| c.is_empty()));
    }

    #[test]
    fn unknown_scenario_rejected_via_fromstr() {
        assert!("bogus".parse::<Scenario>().is_err());
        assert!("lane_change".parse::<Scenario>().is_ok());
    }

    #[test]
    fn gain_of_one_is_identity() {
        let rec = simulate_drive(Scenario::Highway, 4.0, 50.0, 5).unwrap();
        let fault = FaultSpec {
            kind: FaultKind::Gain,
            channels: vec![L3_CHANNEL.into()],
            magnitude: 1.0,
            start: 0.0,
            end: 4.0,
        };
        let out = inject_fault(&rec, &fault, 99).unwrap();
        for (a, b) in rec.channels.iter().zip(&out.channels) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn offset_is_exact_and_local() {
        let rec = simulate_drive(Scenario::City, 6.0, 50.0, 5).unwrap();
        let fault = FaultSpec {
            kind: FaultKind::Offset,
            channels: vec![L3_CHANNEL.into()],
            magnitude: 123.5,
            start: 2.0,
            end: 4.0,
        };
        let out = inject_fault(&rec, &fault, 1).unwrap();
        let idx = channel_index(L3_CHANNEL).unwrap();
        let (lo, hi) = (100, 200);
        for t in 0..rec.len() {
            let want = if (lo..hi).contains(&t) {
                rec.channels[idx][t] + 123.5
            } else {
                rec.channels[idx][t]
            };
            assert_eq!(out.channels[idx][t], want);
        }
        // every other channel untouched, bit-identical
        for c in 0..24 {
            if c != idx {
                assert_eq!(rec.channels[c], out.channels[c]);
            }
        }
    }

    #[test]
    fn noise_snr_matches_target() {
        let rec = simulate_drive(Scenario::Highway, 8.0, 50.0, 17).unwrap();
        for target in [20.0, 10.0, 3.0] {
            let fault = FaultSpec {
                kind: FaultKind::Noise,
                channels: vec![L3_CHANNEL.into()],
                magnitude: target,
                start: 1.0,
                end: 7.0,
            };
            let out = inject_fault(&rec, &fault, 55).unwrap();
            let idx = channel_index(L3_CHANNEL).unwrap();
            let lo = 50;
            let hi = 350;
            let snr = measured_snr_db(&rec.channels[idx], &out.channels[idx], lo, hi);
            assert!((snr - target).abs() < 1.0, "target {target} measured {snr}");
        }
    }

    #[test]
    fn interval_outside_recording_rejected() {
        let rec = simulate_drive(Scenario::Highway, 2.0, 50.0, 3).unwrap();
        let fault = FaultSpec {
            kind: FaultKind::Offset,
            channels: vec![L3_CHANNEL.into()],
            magnitude: 1.0,
            start: 1.0,
            end: 3.0,
        };
        assert!(inject_fault(&rec, &fault, 0).is_err());
    }

    #[test]
    fn dataset_covers_all_classes() {
        let cfg = DatagenConfig {
            per_class_windows: 10,
            duration: 4.0,
            rate: 50.0,
            window: 50,
            step: 50,
            ..DatagenConfig::default()
        };
        let recs = generate_dataset(&cfg).unwrap();
        for label in Task::FaultType.classes() {
            assert!(recs.iter().any(|r| r.label == label), "missing class {label}");
        }

        let cfg_loc = DatagenConfig { task: Task::FaultLocation, ..cfg };
        let recs = generate_dataset(&cfg_loc).unwrap();
        for label in Task::FaultLocation.classes() {
            assert!(recs.iter().any(|r| r.label == label), "missing class {label}");
        }
    }

    #[test]
    fn balanced_budget_produces_equal_window_counts() {
        let cfg = DatagenConfig {
            per_class_windows: 100,
            imbalance_ratio: 1.0,
            duration: 4.0,
            rate: 50.0,
            window: 50,
            step: 10,
            ..DatagenConfig::default()
        };
        let recs = generate_dataset(&cfg).unwrap();
        let wpr = windows_per_recording(200, 50, 10); // 16
        let need = 100usize.div_ceil(wpr);
        for label in Task::FaultType.classes() {
            let got = recs.iter().filter(|r| r.label == label).count();
            assert_eq!(got, need, "class {label}");
        }
    }

    #[test]
    fn concurrent_differs_from_singles() {
        let cfg = DatagenConfig {
            per_class_windows: 1,
            duration: 4.0,
            rate: 50.0,
            window: 50,
            step: 50,
            ..DatagenConfig::default()
        };
        let recs = generate_dataset(&cfg).unwrap();
        let single = recs.iter().find(|r| r.label == "F1").unwrap();
        let pair = recs.iter().find(|r| r.label == "F1F2").unwrap();
        let idx = channel_index(TYPE_TASK_CHANNEL).unwrap();
        assert_ne!(single.recording.channels[idx], pair.recording.channels[idx]);
    }

    #[test]
    fn label_is_pure_function_of_faults() {
        let f1 = FaultSpec {
            kind: FaultKind::Noise,
            channels: vec![TYPE_TASK_CHANNEL.into()],
            magnitude: 10.0,
            start: 0.0,
            end: 1.0,
        };
        let f3 = FaultSpec {
            kind: FaultKind::Offset,
            channels: vec![TYPE_TASK_CHANNEL.into()],
            magnitude: 1.0,
            start: 0.0,
            end: 1.0,
        };
        assert_eq!(label_of_faults(Task::FaultType, &[]), "H");
        assert_eq!(label_of_faults(Task::FaultType, &[f1.clone()]), "F1");
        assert_eq!(label_of_faults(Task::FaultType, &[f1.clone(), f3.clone()]), "F1F3");
        assert_eq!(label_of_faults(Task::FaultType, &[f3, f1]), "F1F3");
    }

    #[test]
    fn csv_round_trip_and_strict_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        let rec = simulate_drive(Scenario::LaneChange, 2.0, 50.0, 77).unwrap();
        save_csv(&path, &rec, "F2").unwrap();
        let (loaded, label) = load_csv(&path, 50.0).unwrap();
        assert_eq!(label, "F2");
        for (a, b) in rec.channels.iter().zip(&loaded.channels) {
            for (x, y) in a.iter().zip(b) {
                let rel = (x - y).abs() / x.abs().max(1e-12);
                assert!(rel < 1e-9, "{x} vs {y}");
            }
        }

        // header mismatch: unit suffix stripped from one column
        let body = std::fs::read_to_string(&path).unwrap();
        let bad = body.replacen("P_Engine[kW]", "P_Engine", 1);
        let bad_path = dir.path().join("bad.csv");
        std::fs::write(&bad_path, bad).unwrap();
        let err = load_csv(&bad_path, 50.0).unwrap_err().to_string();
        assert!(err.contains("P_Engine"), "err: {err}");
    }
}
