//! Deterministic synthetic soft-sensor walking data.
//!
//! Hip and knee angles of both legs follow smooth periodic trajectories over
//! the gait cycle whose harmonic coefficients depend on locomotion mode,
//! incline, speed and the subject. Each angle drives one capacitive channel
//! through a subject-specific affine map with phase lag, loading/unloading
//! asymmetry, Gaussian noise and slow sinusoidal drift. Phase labels come
//! straight from the cycle position, so they are exact.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::domain::{LabelSet, Mode, Phase, Split, TaskDescriptor, STAIR_INCLINE_DEG};
use crate::error::{Error, Result};
use crate::network::IN_CHANNELS;

pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLE_RATE_HZ: f64 = 100.0;
const HARMONICS: usize = 4;
const PROJECTION_POINTS: usize = 512;

/// SplitMix64 finalizer, used to derive independent seeds from tuples.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Per-subject sensing and gait-style parameters. Channel order is right hip,
/// right knee, left hip, left knee.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: u32,
    /// Multiplier on the nominal sensitivity, per channel.
    pub gain: [f64; 4],
    /// Additive offset in pF, per channel.
    pub offset: [f64; 4],
    /// Sensor response delay in seconds, per channel.
    pub lag_s: [f64; 4],
    /// Loading/unloading asymmetry in pF, per channel.
    pub asymmetry: [f64; 4],
    /// pF.
    pub noise_std: f64,
    /// Drift amplitude in pF.
    pub drift_amp: f64,
    pub drift_period_s: f64,
    /// Multiplier on the nominal cycle duration.
    pub cadence_scale: f64,
    /// Multiplier on joint excursions around their means.
    pub excursion_scale: f64,
    /// Relative standard deviation of stride-to-stride cycle duration.
    pub stride_jitter: f64,
    /// Constant hip flexion bias, degrees.
    pub hip_bias: f64,
    /// Shift of the knee swing peak, fraction of the cycle.
    pub swing_shift: f64,
    /// Relative change of the double-support phase durations.
    pub double_support_scale: f64,
    /// Delay of the contact events behind the kinematics, seconds.
    pub event_lag_s: f64,
}

/// Nominal pF per degree of joint angle.
pub const SENSITIVITY: f64 = 0.25;
/// Nominal capacitance at zero angle, pF.
pub const BASE_CAPACITANCE: f64 = 50.0;

impl SubjectProfile {
    /// A profile with unit gains and no lag, asymmetry, noise, drift or style.
    pub fn nominal(id: u32) -> Self {
        Self {
            id,
            gain: [1.0; 4],
            offset: [0.0; 4],
            lag_s: [0.0; 4],
            asymmetry: [0.0; 4],
            noise_std: 0.0,
            drift_amp: 0.0,
            drift_period_s: 30.0,
            cadence_scale: 1.0,
            excursion_scale: 1.0,
            stride_jitter: 0.0,
            hip_bias: 0.0,
            swing_shift: 0.0,
            double_support_scale: 1.0,
            event_lag_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::invalid("subject gains must be positive"));
        }
        if !(self.noise_std >= 0.0) || !(self.drift_amp >= 0.0) || !(self.stride_jitter >= 0.0) {
            return Err(Error::invalid("noise, drift and jitter must be nonnegative"));
        }
        if !(self.cadence_scale > 0.0) || !(self.drift_period_s > 0.0) {
            return Err(Error::invalid("cadence scale and drift period must be positive"));
        }
        Ok(())
    }

    /// Noise-free reading of `channel` for a joint angle (degrees) and its
    /// rate (degrees per second), before drift.
    pub fn sensor_reading(&self, channel: usize, angle: f64, rate: f64) -> f64 {
        BASE_CAPACITANCE
            + self.offset[channel]
            + SENSITIVITY * self.gain[channel] * angle
            + self.asymmetry[channel] * (rate / 200.0).tanh()
    }

    pub fn drift(&self, channel: usize, t: f64) -> f64 {
        self.drift_amp * (TAU * t / self.drift_period_s + channel as f64 * 1.3).sin()
    }
}

/// Deterministic cohort of `n` subjects.
pub fn make_cohort(cohort_seed: u64, n: usize) -> Result<Vec<SubjectProfile>> {
    if n == 0 {
        return Err(Error::invalid("a cohort needs at least one subject"));
    }
    Ok((1..=n as u32)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cohort_seed, 0x5B, id as u64]));
            let mut per_channel = |lo: f64, hi: f64| -> [f64; 4] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
            let gain = per_channel(0.7, 1.3);
            let offset = per_channel(-4.0, 4.0);
            let lag_s = per_channel(0.0, 0.04);
            let asymmetry = per_channel(0.0, 1.0);
            SubjectProfile {
                id,
                gain,
                offset,
                lag_s,
                asymmetry,
                noise_std: rng.random_range(0.1..0.3),
                drift_amp: rng.random_range(0.2..1.0),
                drift_period_s: rng.random_range(20.0..60.0),
                cadence_scale: rng.random_range(0.9..1.1),
                excursion_scale: rng.random_range(0.85..1.15),
                stride_jitter: 0.02,
                hip_bias: rng.random_range(-5.0..5.0),
                swing_shift: rng.random_range(-0.03..0.03),
                double_support_scale: rng.random_range(0.7..1.3),
                event_lag_s: rng.random_range(-0.08..0.08),
            }
        })
        .collect())
}

/// Truncated Fourier series `c0 + Σ a_n cos(2πnp) + b_n sin(2πnp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Harmonics {
    pub c0: f64,
    pub a: [f64; HARMONICS],
    pub b: [f64; HARMONICS],
}

impl Harmonics {
    pub fn eval(&self, p: f64) -> f64 {
        let mut v = self.c0;
        for n in 0..HARMONICS {
            let w = TAU * (n + 1) as f64 * p;
            v += self.a[n] * w.cos() + self.b[n] * w.sin();
        }
        v
    }

    /// d/dp of [`Harmonics::eval`].
    pub fn derivative(&self, p: f64) -> f64 {
        let mut v = 0.0;
        for n in 0..HARMONICS {
            let k = TAU * (n + 1) as f64;
            v += k * (self.b[n] * (k * p).cos() - self.a[n] * (k * p).sin());
        }
        v
    }

    /// Least-squares projection of a periodic profile onto the basis.
    fn project(f: impl Fn(f64) -> f64) -> Self {
        let samples: Vec<f64> = (0..PROJECTION_POINTS)
            .map(|i| f(i as f64 / PROJECTION_POINTS as f64))
            .collect();
        let inv = 1.0 / PROJECTION_POINTS as f64;
        let c0 = samples.iter().sum::<f64>() * inv;
        let mut a = [0.0; HARMONICS];
        let mut b = [0.0; HARMONICS];
        for n in 0..HARMONICS {
            for (i, s) in samples.iter().enumerate() {
                let w = TAU * (n + 1) as f64 * i as f64 * inv;
                a[n] += 2.0 * inv * s * w.cos();
                b[n] += 2.0 * inv * s * w.sin();
            }
        }
        Self { c0, a, b }
    }
}

/// Smooth periodic bump centred at `mu` (von Mises shape, peak 1).
fn bump(p: f64, mu: f64, width: f64) -> f64 {
    let kappa = 1.0 / (TAU * width).powi(2);
    (kappa * ((TAU * (p - mu)).cos() - 1.0)).exp()
}

/// Joint trajectories of one leg over its own cycle (0 = heel strike).
#[derive(Clone, Debug, PartialEq)]
pub struct LegTrajectory {
    pub hip: Harmonics,
    pub knee: Harmonics,
}

/// Phase timing and joint trajectory shapes of the gait cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitCycleModel {
    /// Fractions of G1..G4; the cycle starts at left heel strike.
    pub fractions: [f64; 4],
}

impl Default for GaitCycleModel {
    fn default() -> Self {
        Self {
            fractions: [0.12, 0.38, 0.12, 0.38],
        }
    }
}

impl GaitCycleModel {
    /// Double-support phases rescaled by `scale`, single-support phases
    /// shrunk to keep the total at one.
    pub fn for_subject(profile: &SubjectProfile) -> Self {
        let base = Self::default().fractions;
        let ds = base[0] * profile.double_support_scale;
        let ss = 0.5 - ds;
        Self {
            fractions: [ds, ss, ds, ss],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        if f.iter().any(|v| !(*v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("phase fractions must be positive and sum to 1"));
        }
        if f[0].max(f[2]) >= f[1].min(f[3]) {
            return Err(Error::invalid("double-support phases must be shorter than single-support phases"));
        }
        Ok(())
    }

    /// Phase at cycle position `psi ∈ [0, 1)`.
    pub fn phase_at(&self, psi: f64) -> Phase {
        let mut edge = 0.0;
        for (i, f) in self.fractions.iter().enumerate() {
            edge += f;
            if psi < edge {
                return Phase::ALL[i];
            }
        }
        Phase::G4
    }

    /// Seconds per stride.
    pub fn cycle_duration(mode: Mode, speed: f64, cadence_scale: f64) -> f64 {
        let stair = match mode {
            Mode::SA => 1.15,
            Mode::SD => 1.05,
            _ => 1.0,
        };
        (0.6 + 0.4 / speed) * cadence_scale * stair
    }

    /// Joint-angle trajectories (degrees) for a walking condition, with the
    /// subject's style applied.
    pub fn trajectory(&self, mode: Mode, incline: f64, speed: f64, profile: &SubjectProfile) -> LegTrajectory {
        let speed_amp = 0.75 + 0.25 * speed;
        let toe_off = self.fractions[0] + self.fractions[1] + self.fractions[2];
        let up = incline.max(0.0);
        let down = (-incline).max(0.0);
        // (hip mean, hip amplitude, hip phase, knee base, stance peak, stance amp, stance width, swing amp)
        let (hip_mean, hip_amp, hip_phase, knee_base, st_mu, st_amp, st_w, sw_amp) = match mode {
            Mode::LW => (12.0, 22.0, 0.02, 5.0, 0.15, 13.0, 0.06, 55.0),
            Mode::RA => (12.0 + 0.9 * up, 22.0 + 0.4 * up, 0.02, 5.0 + 0.3 * up, 0.15, 13.0 + 1.2 * up, 0.06, 55.0),
            Mode::RD => (
                12.0 - 0.3 * down,
                22.0 - 0.2 * down,
                0.02,
                5.0,
                0.15 + 0.01 * down,
                13.0 + 1.5 * down,
                0.07,
                55.0 - 0.3 * down,
            ),
            Mode::SA => (32.0, 28.0, 0.06, 10.0, 0.05, 45.0, 0.08, 45.0),
            Mode::SD => (15.0, 16.0, -0.02, 8.0, 0.48, 40.0, 0.1, 45.0),
        };
        let ex = profile.excursion_scale;
        let sw_mu = toe_off + 0.1 + profile.swing_shift;
        let hip = Harmonics::project(|p| {
            hip_mean + profile.hip_bias + ex * speed_amp * hip_amp * (TAU * (p - hip_phase)).cos()
        });
        let knee = Harmonics::project(|p| {
            knee_base + ex * (st_amp * bump(p, st_mu, st_w) + speed_amp * sw_amp * bump(p, sw_mu, 0.08))
        });
        LegTrajectory { hip, knee }
    }
}

/// Angles and rates (per unit cycle) of the four channels at cycle position `psi`.
pub fn channel_angles(traj: &LegTrajectory, psi: f64) -> [(f64, f64); 4] {
    let right = (psi - 0.5).rem_euclid(1.0);
    let left = psi.rem_euclid(1.0);
    [
        (traj.hip.eval(right), traj.hip.derivative(right)),
        (traj.knee.eval(right), traj.knee.derivative(right)),
        (traj.hip.eval(left), traj.hip.derivative(left)),
        (traj.knee.eval(left), traj.knee.derivative(left)),
    ]
}

/// One continuous recording of one walking condition.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecording {
    pub task: TaskDescriptor,
    pub trial: u32,
    pub sample_rate: f64,
    /// `[channel][frame]`.
    pub channels: [Vec<f64>; 4],
    pub phases: Vec<Phase>,
}

impl SessionRecording {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn label(&self, frame: usize) -> LabelSet {
        LabelSet {
            mode: self.task.mode,
            phase: self.phases[frame],
            incline: self.task.incline,
        }
    }

    /// `[4, k]` window ending at `end` (inclusive), channel-major.
    pub fn window(&self, end: usize, k: usize) -> Vec<f64> {
        let start = end + 1 - k;
        let mut out = Vec::with_capacity(IN_CHANNELS * k);
        for ch in &self.channels {
            out.extend_from_slice(&ch[start..=end]);
        }
        out
    }
}

/// Generates one session. The cycle position is integrated frame by frame
/// with stride-to-stride jitter; every other term is a closed-form function
/// of the position and time.
pub fn generate_session(profile: &SubjectProfile, task: &TaskDescriptor, duration_s: f64, seed: u64) -> Result<SessionRecording> {
    generate_session_with(profile, task, duration_s, seed, 0)
}

fn generate_session_with(
    profile: &SubjectProfile,
    task: &TaskDescriptor,
    duration_s: f64,
    seed: u64,
    trial: u32,
) -> Result<SessionRecording> {
    task.validate()?;
    profile.validate()?;
    let model = GaitCycleModel::for_subject(profile);
    model.validate()?;
    let period = GaitCycleModel::cycle_duration(task.mode, task.speed, profile.cadence_scale);
    if !(duration_s >= period) {
        return Err(Error::invalid(format!(
            "duration {duration_s} s is shorter than one gait cycle ({period:.3} s)"
        )));
    }
    let traj = model.trajectory(task.mode, task.incline, task.speed, profile);
    let frames = (duration_s * SAMPLE_RATE_HZ).round() as usize;
    let dt = 1.0 / SAMPLE_RATE_HZ;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, profile.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let jitter = Normal::new(0.0, profile.stride_jitter).map_err(|e| Error::invalid(e.to_string()))?;
    let start_psi: f64 = rng.random_range(0.0..1.0);
    let drift_t0: f64 = rng.random_range(0.0..profile.drift_period_s);

    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(frames));
    let mut phases = Vec::with_capacity(frames);
    // Unwrapped cycle position; the stride period is redrawn at each wrap.
    let mut psi = start_psi;
    let mut stride = period * (1.0 + jitter.sample(&mut rng));
    let mut cycle = psi.floor();
    for n in 0..frames {
        let t = n as f64 * dt;
        phases.push(model.phase_at((psi - profile.event_lag_s / stride).rem_euclid(1.0)));
        for (c, ch) in channels.iter_mut().enumerate() {
            let lagged = psi - profile.lag_s[c] / stride;
            let (angle, dangle) = channel_angles(&traj, lagged)[c];
            let mut v = profile.sensor_reading(c, angle, dangle / stride) + profile.drift(c, t + drift_t0);
            if profile.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            ch.push(v);
        }
        psi += dt / stride;
        if psi.floor() > cycle {
            cycle = psi.floor();
            stride = period * (1.0 + jitter.sample(&mut rng));
        }
    }
    Ok(SessionRecording {
        task: *task,
        trial,
        sample_rate: SAMPLE_RATE_HZ,
        channels,
        phases,
    })
}

/// Closed-form noise-free channel values of a session generated with zero
/// noise, drift and jitter: the cycle position is `start + t / period`.
pub fn closed_form_channels(profile: &SubjectProfile, task: &TaskDescriptor, start_psi: f64, t: f64) -> [f64; 4] {
    let model = GaitCycleModel::for_subject(profile);
    let period = GaitCycleModel::cycle_duration(task.mode, task.speed, profile.cadence_scale);
    let traj = model.trajectory(task.mode, task.incline, task.speed, profile);
    let psi = start_psi + t / period;
    std::array::from_fn(|c| {
        let (angle, dangle) = channel_angles(&traj, psi - profile.lag_s[c] / period)[c];
        profile.sensor_reading(c, angle, dangle / period)
    })
}

/// Initial cycle position drawn by [`generate_session`] for `seed`.
pub fn start_position(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(0.0..1.0)
}

/// Input window plus the labels of its final frame.
pub type SensorWindow = Tensor;

/// Windows of `k` frames ending at frames `k-1, k-1+stride, ...`, each
/// labeled with its last frame.
pub fn window_dataset(recording: &SessionRecording, k: usize, stride: usize) -> Result<Vec<(SensorWindow, LabelSet)>> {
    window_ends(recording.len(), k, stride)?
        .map(|end| Ok((Tensor::new(&[IN_CHANNELS, k], recording.window(end, k))?, recording.label(end))))
        .collect()
}

/// Last frames of the windows [`window_dataset`] produces.
pub fn window_ends(len: usize, k: usize, stride: usize) -> Result<impl Iterator<Item = usize>> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("window length and stride must be at least 1"));
    }
    if len < k {
        return Err(Error::invalid(format!("recording of {len} frames is shorter than the window {k}")));
    }
    Ok((k - 1..len).step_by(stride))
}

/// Recording protocol of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_subjects: usize,
    pub lw_speeds: Vec<f64>,
    pub ramp_speeds: Vec<f64>,
    /// Positive ramp angles; descent uses the negatives.
    pub ramp_inclines: Vec<f64>,
    pub treadmill_trials: u32,
    pub treadmill_duration_s: f64,
    pub stair_speed: f64,
    pub stair_trials: u32,
    pub stair_duration_s: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_subjects: 9,
            lw_speeds: vec![0.9, 1.1, 1.3],
            ramp_speeds: vec![0.7, 0.9, 1.1],
            ramp_inclines: vec![5.0, 10.0],
            treadmill_trials: 2,
            treadmill_duration_s: 120.0,
            stair_speed: 0.9,
            stair_trials: 5,
            stair_duration_s: 10.0,
        }
    }
}

impl BenchmarkConfig {
    /// Every walking condition of one subject with its trial count and duration.
    pub fn conditions(&self, subject: u32) -> Result<Vec<(TaskDescriptor, u32, f64)>> {
        let mut out = Vec::new();
        let tread = (self.treadmill_trials, self.treadmill_duration_s);
        for &v in &self.lw_speeds {
            out.push((TaskDescriptor::new(subject, Mode::LW, 0.0, v)?, tread.0, tread.1));
        }
        for (mode, sign) in [(Mode::RA, 1.0), (Mode::RD, -1.0)] {
            for &inc in &self.ramp_inclines {
                for &v in &self.ramp_speeds {
                    out.push((TaskDescriptor::new(subject, mode, sign * inc, v)?, tread.0, tread.1));
                }
            }
        }
        for (mode, inc) in [(Mode::SA, STAIR_INCLINE_DEG), (Mode::SD, -STAIR_INCLINE_DEG)] {
            out.push((
                TaskDescriptor::new(subject, mode, inc, self.stair_speed)?,
                self.stair_trials,
                self.stair_duration_s,
            ));
        }
        Ok(out)
    }
}

/// Generates every session of the benchmark in memory, in manifest order.
pub fn generate_benchmark(cohort_seed: u64, cfg: &BenchmarkConfig) -> Result<(Vec<SubjectProfile>, Vec<SessionRecording>)> {
    use rayon::prelude::*;
    let cohort = make_cohort(cohort_seed, cfg.n_subjects)?;
    let mut jobs = Vec::new();
    for profile in &cohort {
        for (ci, (task, trials, duration)) in cfg.conditions(profile.id)?.into_iter().enumerate() {
            for trial in 0..trials {
                let seed = mix_seed(&[cohort_seed, profile.id as u64, ci as u64, trial as u64]);
                jobs.push((profile, task, trial, duration, seed));
            }
        }
    }
    let sessions = jobs
        .par_iter()
        .map(|(p, task, trial, duration, seed)| generate_session_with(p, task, *duration, *seed, *trial))
        .collect::<Result<Vec<_>>>()?;
    Ok((cohort, sessions))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    /// Relative to the manifest directory.
    pub file: String,
    pub task: TaskDescriptor,
    pub trial: u32,
    pub frames: usize,
    pub duration_s: f64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub cohort_seed: u64,
    pub sample_rate: f64,
    pub config: BenchmarkConfig,
    pub subjects: Vec<SubjectProfile>,
    pub sessions: Vec<SessionEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn session_csv(rec: &SessionRecording) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "ch0", "ch1", "ch2", "ch3", "mode", "phase", "incline"])?;
    for n in 0..rec.len() {
        let t = format!("{:.6}", n as f64 / rec.sample_rate);
        let mut row = vec![t];
        row.extend(rec.channels.iter().map(|c| c[n].to_string()));
        row.push(rec.task.mode.to_string());
        row.push(rec.phases[n].to_string());
        row.push(rec.task.incline.to_string());
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

/// Writes every session as CSV plus `manifest.json` under `out_dir`.
pub fn build_benchmark(cohort_seed: u64, cfg: &BenchmarkConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let (subjects, sessions) = generate_benchmark(cohort_seed, cfg)?;
    write_benchmark(cohort_seed, cfg, subjects, &sessions, out_dir)
}

pub fn write_benchmark(
    cohort_seed: u64,
    cfg: &BenchmarkConfig,
    subjects: Vec<SubjectProfile>,
    sessions: &[SessionRecording],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let data_dir = out_dir.join("sessions");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut entries = Vec::with_capacity(sessions.len());
    for rec in sessions {
        let t = &rec.task;
        let file = format!(
            "sessions/sub{:02}_{}_{:+}_{:.1}_t{}.csv",
            t.subject, t.mode, t.incline, t.speed, rec.trial
        );
        let bytes = session_csv(rec)?;
        let path = out_dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(SessionEntry {
            file,
            task: *t,
            trial: rec.trial,
            frames: rec.len(),
            duration_s: rec.len() as f64 / rec.sample_rate,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        cohort_seed,
        sample_rate: SAMPLE_RATE_HZ,
        config: cfg.clone(),
        subjects,
        sessions: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn parse_session(path: &Path, entry: &SessionEntry, sample_rate: f64) -> Result<SessionRecording> {
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex(&Sha256::digest(&bytes));
    if digest != entry.sha256 {
        return Err(format_err(format!("checksum {digest} does not match the manifest")));
    }
    let mut reader = csv::Reader::from_reader(&bytes[..]);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != ["t", "ch0", "ch1", "ch2", "ch3", "mode", "phase", "incline"] {
        return Err(format_err(format!("unexpected header {header:?}")));
    }
    let mut channels: [Vec<f64>; 4] = Default::default();
    let mut phases = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let num = |j: usize| -> Result<f64> {
            row[j]
                .parse::<f64>()
                .map_err(|e| format_err(format!("row {}: column {j}: {e}", i + 2)))
        };
        for (c, ch) in channels.iter_mut().enumerate() {
            ch.push(num(c + 1)?);
        }
        let mode: Mode = row[5].parse()?;
        let incline = num(7)?;
        if mode != entry.task.mode || incline != entry.task.incline {
            return Err(format_err(format!("row {} labels disagree with the manifest task", i + 2)));
        }
        phases.push(row[6].parse()?);
    }
    if phases.len() != entry.frames {
        return Err(format_err(format!("{} frames, manifest declares {}", phases.len(), entry.frames)));
    }
    Ok(SessionRecording {
        task: entry.task,
        trial: entry.trial,
        sample_rate,
        channels,
        phases,
    })
}

/// Benchmark sessions loaded from disk.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub manifest: DatasetManifest,
    pub sessions: Vec<SessionRecording>,
}

impl Benchmark {
    pub fn in_memory(cohort_seed: u64, cfg: &BenchmarkConfig) -> Result<Self> {
        let (subjects, sessions) = generate_benchmark(cohort_seed, cfg)?;
        let entries = sessions
            .iter()
            .map(|s| SessionEntry {
                file: String::new(),
                task: s.task,
                trial: s.trial,
                frames: s.len(),
                duration_s: s.len() as f64 / s.sample_rate,
                sha256: String::new(),
            })
            .collect();
        Ok(Self {
            manifest: DatasetManifest {
                format_version: FORMAT_VERSION,
                cohort_seed,
                sample_rate: SAMPLE_RATE_HZ,
                config: cfg.clone(),
                subjects,
                sessions: entries,
            },
            sessions,
        })
    }

    /// Loads `manifest.json` (or the manifest at `path`) and every session it lists.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                message: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        use rayon::prelude::*;
        let sessions = manifest
            .sessions
            .par_iter()
            .map(|e| parse_session(&root.join(&e.file), e, manifest.sample_rate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, sessions })
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.manifest.subjects.iter().map(|s| s.id).collect()
    }
}

/// Marks tasks of `held_out` as test tasks.
pub fn split_for(task: &TaskDescriptor, held_out: u32) -> Split {
    if task.subject == held_out {
        Split::Test
    } else {
        Split::Train
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_cycle_at_unit_speed() {
        assert!((GaitCycleModel::cycle_duration(Mode::LW, 1.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn default_phase_fractions() {
        let m = GaitCycleModel::default();
        m.validate().unwrap();
        assert_eq!(m.phase_at(0.0), Phase::G1);
        assert_eq!(m.phase_at(0.2), Phase::G2);
        assert_eq!(m.phase_at(0.55), Phase::G3);
        assert_eq!(m.phase_at(0.99), Phase::G4);
    }

    #[test]
    fn stair_geometry_is_about_33_degrees() {
        let slope = (18.0f64 / 28.0).atan().to_degrees();
        assert!((slope - 32.7).abs() < 0.05);
        assert_eq!(slope.round(), STAIR_INCLINE_DEG);
    }

    #[test]
    fn cohort_is_deterministic_and_varied() {
        let a = make_cohort(3, 9).unwrap();
        assert_eq!(a, make_cohort(3, 9).unwrap());
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|p| p.gain.iter().all(|g| (0.7..1.3).contains(g))));
        assert!(a.iter().all(|p| p.lag_s.iter().all(|l| (0.0..0.04).contains(l))));
        assert!(make_cohort(3, 0).is_err());
    }

    #[test]
    fn window_counts() {
        let p = SubjectProfile::nominal(1);
        let task = TaskDescriptor::new(1, Mode::LW, 0.0, 1.0).unwrap();
        let rec = generate_session(&p, &task, 3.0, 1).unwrap();
        assert_eq!(rec.len(), 300);
        let w = window_dataset(&rec, 100, 100).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].1, rec.label(199));
        assert_eq!(w[1].0.shape(), &[4, 100]);
        assert!(window_dataset(&rec, 301, 1).is_err());
    }

    #[test]
    fn phase_labels_cycle_without_skips() {
        let p = make_cohort(5, 1).unwrap().remove(0);
        let task = TaskDescriptor::new(1, Mode::RA, 10.0, 0.7).unwrap();
        let rec = generate_session(&p, &task, 20.0, 9).unwrap();
        for w in rec.phases.windows(2) {
            assert!(w[1] == w[0] || w[1] == w[0].next(), "{:?} -> {:?}", w[0], w[1]);
        }
        assert!(rec.phases.contains(&Phase::G3));
    }

    #[test]
    fn unit_speed_labels_repeat_every_100_frames() {
        let p = SubjectProfile::nominal(1);
        let task = TaskDescriptor::new(1, Mode::LW, 0.0, 1.0).unwrap();
        let rec = generate_session(&p, &task, 10.0, 4).unwrap();
        for n in 0..rec.len() - 100 {
            assert_eq!(rec.phases[n], rec.phases[n + 100]);
        }
    }

    #[test]
    fn short_duration_is_rejected() {
        let p = SubjectProfile::nominal(1);
        let task = TaskDescriptor::new(1, Mode::LW, 0.0, 1.0).unwrap();
        assert!(generate_session(&p, &task, 0.5, 0).is_err());
    }

    #[test]
    fn protocol_conditions() {
        let c = BenchmarkConfig::default().conditions(1).unwrap();
        assert_eq!(c.len(), 17);
        let lw: Vec<f64> = c.iter().filter(|(t, ..)| t.mode == Mode::LW).map(|(t, ..)| t.speed).collect();
        assert_eq!(lw, vec![0.9, 1.1, 1.3]);
        let stair: f64 = c.iter().filter(|(t, ..)| t.mode == Mode::SA).map(|(_, n, d)| *n as f64 * d).sum();
        assert_eq!(stair, 50.0);
    }
}
