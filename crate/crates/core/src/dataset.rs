//! Task grouping, episode sampling and batch assembly over benchmark sessions.
//!
//! Windows are referenced by [`WindowId`] and only materialized when a batch
//! is assembled, so a full benchmark never has to exist in window form.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::domain::{LabelSet, TaskDescriptor};
use crate::error::{Error, Result};
use crate::meta::Episode;
use crate::network::IN_CHANNELS;
use crate::objective::Targets;
use crate::synth::{window_ends, SessionRecording};

/// A window by session index (into the benchmark session list) and last frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowId {
    pub session: u32,
    pub end: u32,
}

impl WindowId {
    pub fn new(session: usize, end: usize) -> Self {
        Self {
            session: session as u32,
            end: end as u32,
        }
    }

    /// Inclusive frame range `[start, end]` for window length `k`.
    pub fn frames(&self, k: usize) -> (usize, usize) {
        let end = self.end as usize;
        (end + 1 - k, end)
    }
}

/// One walking condition of one subject and the sessions recorded for it.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEntry {
    pub task: TaskDescriptor,
    /// Indices into the session list, in recording order.
    pub sessions: Vec<usize>,
}

/// Groups sessions by (subject, mode, incline, speed), in first-seen order.
pub fn group_tasks(sessions: &[SessionRecording]) -> Vec<TaskEntry> {
    let mut out: Vec<TaskEntry> = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        match out
            .iter_mut()
            .find(|e| e.task.subject == s.task.subject && e.task.same_condition(&s.task))
        {
            Some(e) => e.sessions.push(i),
            None => out.push(TaskEntry {
                task: s.task,
                sessions: vec![i],
            }),
        }
    }
    out
}

/// Inputs and targets of a batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `[B, 4, k]`.
    pub x: Tensor,
    pub targets: Targets,
    pub labels: Vec<LabelSet>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Materializes `ids` into a batch of `k`-frame windows.
pub fn assemble(sessions: &[SessionRecording], ids: &[WindowId], k: usize) -> Result<LabeledBatch> {
    let mut data = Vec::with_capacity(ids.len() * IN_CHANNELS * k);
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        let rec = sessions
            .get(id.session as usize)
            .ok_or_else(|| Error::invalid(format!("no session {}", id.session)))?;
        let end = id.end as usize;
        if end >= rec.len() || end + 1 < k {
            return Err(Error::invalid(format!("window ending at {end} does not fit session {}", id.session)));
        }
        data.extend(rec.window(end, k));
        labels.push(rec.label(end));
    }
    Ok(LabeledBatch {
        x: Tensor::new(&[ids.len(), IN_CHANNELS, k], data)?,
        targets: Targets::from_labels(&labels),
        labels,
    })
}

/// Every window of the listed sessions on the stride grid.
pub fn task_windows(sessions: &[SessionRecording], which: &[usize], k: usize, stride: usize) -> Result<Vec<WindowId>> {
    let mut out = Vec::new();
    for &s in which {
        out.extend(window_ends(sessions[s].len(), k, stride)?.map(|e| WindowId::new(s, e)));
    }
    Ok(out)
}

/// Window grid and sizes used when sampling episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub window_len: usize,
    pub stride: usize,
    pub n_support: usize,
    pub n_query: usize,
}

const EPISODE_ATTEMPTS: usize = 64;

/// Samples disjoint support and query windows from one task.
///
/// A contiguous span of the task's concatenated recordings, covering the
/// support share `n / (n + m)` of its frames, is placed uniformly at random.
/// Support windows lie entirely inside the span and query windows entirely
/// outside it, so the two sets share no frames. Both are drawn uniformly
/// without replacement.
pub fn sample_episode(
    sessions: &[SessionRecording],
    entry: &TaskEntry,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<Episode<LabeledBatch, WindowId>> {
    let (n, m, k) = (spec.n_support, spec.n_query, spec.window_len);
    if n == 0 || m == 0 {
        return Err(Error::invalid("support and query sizes must be at least 1"));
    }
    let windows = task_windows(sessions, &entry.sessions, k, spec.stride)?;
    let insufficient = |available: usize| Error::InsufficientWindows {
        task: entry.task.label(),
        needed: n + m,
        available,
    };
    if windows.len() < n + m {
        return Err(insufficient(windows.len()));
    }
    // Global frame offsets of each session on the concatenated timeline.
    let mut offsets = Vec::with_capacity(entry.sessions.len());
    let mut total = 0usize;
    for &s in &entry.sessions {
        offsets.push((s, total));
        total += sessions[s].len();
    }
    let offset_of = |s: u32| offsets.iter().find(|(i, _)| *i == s as usize).unwrap().1;
    let span = ((total as f64) * n as f64 / (n + m) as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0;
    for _ in 0..EPISODE_ATTEMPTS {
        let u = rng.random_range(0..=total - span);
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for w in &windows {
            let (a, b) = w.frames(k);
            let off = offset_of(w.session);
            let (a, b) = (a + off, b + off);
            if a >= u && b < u + span {
                inside.push(*w);
            } else if b < u || a >= u + span {
                outside.push(*w);
            }
        }
        best = best.max(inside.len().min(n) + outside.len().min(m));
        if inside.len() < n || outside.len() < m {
            continue;
        }
        let mut support_ids: Vec<WindowId> = sample(&mut rng, inside.len(), n).into_iter().map(|i| inside[i]).collect();
        let mut query_ids: Vec<WindowId> = sample(&mut rng, outside.len(), m).into_iter().map(|i| outside[i]).collect();
        support_ids.sort_unstable();
        query_ids.sort_unstable();
        return Ok(Episode {
            support: assemble(sessions, &support_ids, k)?,
            query: assemble(sessions, &query_ids, k)?,
            support_ids,
            query_ids,
        });
    }
    Err(insufficient(best))
}

/// Calibration and held-out query windows of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSplit {
    pub calibration: Vec<WindowId>,
    pub query: Vec<WindowId>,
}

/// How a held-out subject's recordings are divided for fine-tuning and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub window_len: usize,
    /// Seconds taken from the start of one trial per condition.
    pub duration_s: f64,
    /// Seconds at the start of that trial never used for queries; at least
    /// the longest calibration duration compared in one experiment.
    pub reserved_s: f64,
    pub calibration_stride: usize,
    pub query_stride: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            window_len: 100,
            duration_s: 3.5,
            reserved_s: 3.5,
            calibration_stride: 5,
            query_stride: 25,
        }
    }
}

/// For every task of the subject, one trial is chosen with `seed`; windows
/// within its first `duration_s` seconds form the calibration set. Query
/// windows are all windows that do not touch the first `reserved_s` seconds
/// of a chosen trial.
pub fn calibration_split(
    sessions: &[SessionRecording],
    tasks: &[&TaskEntry],
    spec: &CalibrationSpec,
    seed: u64,
) -> Result<CalibrationSplit> {
    if spec.duration_s > spec.reserved_s {
        return Err(Error::invalid("calibration duration exceeds the reserved span"));
    }
    let k = spec.window_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut calibration = Vec::new();
    let mut query = Vec::new();
    for entry in tasks {
        let chosen = entry.sessions[rng.random_range(0..entry.sessions.len())];
        let rate = sessions[chosen].sample_rate;
        let calib_frames = (spec.duration_s * rate).round() as usize;
        let reserved = (spec.reserved_s * rate).round() as usize;
        if calib_frames >= k {
            let ends = (k - 1..calib_frames.min(sessions[chosen].len())).step_by(spec.calibration_stride);
            calibration.extend(ends.map(|e| WindowId::new(chosen, e)));
        }
        for &s in &entry.sessions {
            for e in window_ends(sessions[s].len(), k, spec.query_stride)? {
                if s != chosen || e + 1 - k >= reserved {
                    query.push(WindowId::new(s, e));
                }
            }
        }
    }
    if calibration.is_empty() {
        return Err(Error::invalid(format!(
            "{} s of calibration holds no {k}-frame window",
            spec.duration_s
        )));
    }
    Ok(CalibrationSplit { calibration, query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Mode;
    use crate::synth::{generate_session, SubjectProfile};

    fn sessions() -> Vec<SessionRecording> {
        let p = SubjectProfile::nominal(1);
        let lw = TaskDescriptor::new(1, Mode::LW, 0.0, 1.1).unwrap();
        let sa = TaskDescriptor::new(1, Mode::SA, 33.0, 0.9).unwrap();
        vec![
            generate_session(&p, &lw, 30.0, 1).unwrap(),
            generate_session(&p, &sa, 10.0, 2).unwrap(),
            generate_session(&p, &lw, 30.0, 3).unwrap(),
        ]
    }

    #[test]
    fn tasks_group_trials() {
        let s = sessions();
        let tasks = group_tasks(&s);
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].sessions, vec![0, 2]);
        assert_eq!(tasks[1].sessions, vec![1]);
    }

    #[test]
    fn episodes_are_disjoint_and_deterministic() {
        let s = sessions();
        let tasks = group_tasks(&s);
        let spec = EpisodeSpec { window_len: 100, stride: 10, n_support: 80, n_query: 120 };
        let a = sample_episode(&s, &tasks[0], &spec, 5).unwrap();
        let b = sample_episode(&s, &tasks[0], &spec, 5).unwrap();
        assert_eq!(a.support_ids, b.support_ids);
        assert_eq!(a.query_ids, b.query_ids);
        assert_eq!(a.support.len(), 80);
        assert_eq!(a.query.len(), 120);
        for q in &a.query_ids {
            for sp in &a.support_ids {
                if q.session == sp.session {
                    let (qa, qb) = q.frames(100);
                    let (sa, sb) = sp.frames(100);
                    assert!(qb < sa || sb < qa, "{q:?} overlaps {sp:?}");
                }
            }
        }
    }

    #[test]
    fn insufficient_windows_report_counts() {
        let s = sessions();
        let tasks = group_tasks(&s);
        let spec = EpisodeSpec { window_len: 100, stride: 10, n_support: 80, n_query: 120 };
        match sample_episode(&s, &tasks[1], &spec, 0) {
            Err(Error::InsufficientWindows { needed: 200, available, .. }) => assert_eq!(available, 91),
            other => panic!("unexpected {:?}", other.map(|e| e.support_ids.len())),
        }
        let zero = EpisodeSpec { n_support: 0, ..spec };
        assert!(sample_episode(&s, &tasks[0], &zero, 0).is_err());
    }

    #[test]
    fn calibration_precedes_queries_in_the_chosen_trial() {
        let s = sessions();
        let tasks = group_tasks(&s);
        let refs: Vec<&TaskEntry> = tasks.iter().collect();
        let spec = CalibrationSpec { duration_s: 2.0, ..CalibrationSpec::default() };
        let split = calibration_split(&s, &refs, &spec, 11).unwrap();
        // (200 - 100) / 5 + 1 windows per condition
        assert_eq!(split.calibration.len(), 2 * 21);
        for c in &split.calibration {
            assert!(c.end < 200);
            for q in split.query.iter().filter(|q| q.session == c.session) {
                assert!(q.frames(100).0 >= 350);
            }
        }
    }

    #[test]
    fn query_set_ignores_calibration_duration() {
        let s = sessions();
        let tasks = group_tasks(&s);
        let refs: Vec<&TaskEntry> = tasks.iter().collect();
        let a = calibration_split(&s, &refs, &CalibrationSpec { duration_s: 1.5, ..Default::default() }, 3).unwrap();
        let b = calibration_split(&s, &refs, &CalibrationSpec { duration_s: 3.5, ..Default::default() }, 3).unwrap();
        assert_eq!(a.query, b.query);
        assert!(a.calibration.len() < b.calibration.len());
    }
}
