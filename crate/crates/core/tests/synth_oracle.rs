use gaitmeta::domain::{Mode, TaskDescriptor};
use gaitmeta::synth::{
    build_benchmark, closed_form_channels, generate_session, make_cohort, start_position, Benchmark, BenchmarkConfig,
    GaitCycleModel, SubjectProfile, SAMPLE_RATE_HZ,
};

fn quiet(mut p: SubjectProfile) -> SubjectProfile {
    p.noise_std = 0.0;
    p.drift_amp = 0.0;
    p.stride_jitter = 0.0;
    p
}

fn tasks(subject: u32) -> Vec<TaskDescriptor> {
    vec![
        TaskDescriptor::new(subject, Mode::LW, 0.0, 1.1).unwrap(),
        TaskDescriptor::new(subject, Mode::RA, 10.0, 0.7).unwrap(),
        TaskDescriptor::new(subject, Mode::RD, -5.0, 0.9).unwrap(),
        TaskDescriptor::new(subject, Mode::SA, 33.0, 0.9).unwrap(),
        TaskDescriptor::new(subject, Mode::SD, -33.0, 0.9).unwrap(),
    ]
}

#[test]
fn zero_noise_sessions_match_closed_form() {
    for profile in make_cohort(5, 3).unwrap().into_iter().map(quiet) {
        for (i, task) in tasks(profile.id).iter().enumerate() {
            let seed = 40 + i as u64;
            let rec = generate_session(&profile, task, 12.0, seed).unwrap();
            let start = start_position(seed);
            for n in (0..rec.len()).step_by(7) {
                let want = closed_form_channels(&profile, task, start, n as f64 / SAMPLE_RATE_HZ);
                for c in 0..4 {
                    let err = (rec.channels[c][n] - want[c]).abs();
                    assert!(err <= 1e-9, "subject {} {:?} frame {n} channel {c}: {err}", profile.id, task.mode);
                }
            }
        }
    }
}

#[test]
fn zero_noise_labels_follow_the_cycle_model() {
    let profile = quiet(make_cohort(2, 1).unwrap().remove(0));
    let task = TaskDescriptor::new(1, Mode::LW, 0.0, 1.3).unwrap();
    let rec = generate_session(&profile, &task, 8.0, 9).unwrap();
    let model = GaitCycleModel::for_subject(&profile);
    let period = GaitCycleModel::cycle_duration(task.mode, task.speed, profile.cadence_scale);
    let start = start_position(9);
    let mut mismatches = 0;
    for n in 0..rec.len() {
        let psi = start + n as f64 / SAMPLE_RATE_HZ / period - profile.event_lag_s / period;
        if model.phase_at(psi.rem_euclid(1.0)) != rec.phases[n] {
            mismatches += 1;
        }
    }
    // Only frames within rounding of a phase boundary may disagree.
    assert!(mismatches <= 2, "{mismatches} label mismatches");
}

#[test]
fn zero_noise_sessions_are_periodic() {
    let profile = quiet(SubjectProfile::nominal(1));
    let task = TaskDescriptor::new(1, Mode::LW, 0.0, 1.0).unwrap();
    let period = GaitCycleModel::cycle_duration(task.mode, task.speed, 1.0);
    let start = start_position(3);
    for i in 0..50 {
        let t = i as f64 * 0.037;
        let a = closed_form_channels(&profile, &task, start, t);
        let b = closed_form_channels(&profile, &task, start, t + 3.0 * period);
        for c in 0..4 {
            assert!((a[c] - b[c]).abs() <= 1e-9);
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let profile = make_cohort(1, 1).unwrap().remove(0);
    let task = TaskDescriptor::new(1, Mode::SD, -33.0, 0.9).unwrap();
    let a = generate_session(&profile, &task, 10.0, 77).unwrap();
    let b = generate_session(&profile, &task, 10.0, 77).unwrap();
    let c = generate_session(&profile, &task, 10.0, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.channels, c.channels);
    assert_eq!(make_cohort(1, 4).unwrap(), make_cohort(1, 4).unwrap());
}

fn small_config() -> BenchmarkConfig {
    BenchmarkConfig {
        n_subjects: 2,
        lw_speeds: vec![1.1],
        ramp_speeds: vec![0.9],
        ramp_inclines: vec![5.0],
        treadmill_trials: 1,
        treadmill_duration_s: 6.0,
        stair_trials: 2,
        stair_duration_s: 4.0,
        ..BenchmarkConfig::default()
    }
}

#[test]
fn manifest_round_trip_and_rerun_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let m1 = build_benchmark(11, &cfg, &dir.path().join("a")).unwrap();
    let m2 = build_benchmark(11, &cfg, &dir.path().join("b")).unwrap();
    assert_eq!(m1, m2);
    let bytes_a = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(bytes_a, bytes_b);

    let loaded = Benchmark::load(&dir.path().join("a")).unwrap();
    let memory = Benchmark::in_memory(11, &cfg).unwrap();
    assert_eq!(loaded.manifest, m1);
    assert_eq!(loaded.sessions, memory.sessions);
    assert_eq!(loaded.subjects(), vec![1, 2]);
    // 3 treadmill conditions with 1 trial and 2 stair conditions with 2 trials, per subject.
    assert_eq!(m1.sessions.len(), 2 * (3 + 4));
}

#[test]
fn default_protocol_has_nine_subjects_and_five_modes() {
    let cfg = BenchmarkConfig::default();
    assert_eq!(cfg.n_subjects, 9);
    let conds = cfg.conditions(1).unwrap();
    assert_eq!(conds.len(), 17);
    for mode in Mode::ALL {
        assert!(conds.iter().any(|(t, _, _)| t.mode == mode));
    }
}

#[test]
fn tampered_sessions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_benchmark(3, &small_config(), dir.path()).unwrap();
    let path = dir.path().join(&m.sessions[0].file);
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\n0.010000,", "\n0.010000,9", 1);
    assert_ne!(text, tampered);
    std::fs::write(&path, tampered).unwrap();
    assert!(Benchmark::load(dir.path()).is_err());
    assert!(Benchmark::load(&dir.path().join("missing")).is_err());
}
