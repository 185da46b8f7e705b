//! Post-run analysis: learner-usage tables, selection-colored trajectory
//! segments, and the summary bundle.

use super::logs::{LogError, RunLog};
use crate::sensors::SensorChannel;
use crate::util::{median, quantile};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

/// A fault window as realized in the run's schedule: one time interval plus
/// the set of channels it corrupts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowKey {
    pub start: f64,
    pub end: f64,
    pub channels: Vec<SensorChannel>,
}

/// Distinct fault windows of the schedule, sorted by start time. Windows that
/// share an interval across channels merge into one key.
pub fn schedule_windows(log: &RunLog) -> Vec<WindowKey> {
    let mut windows: Vec<WindowKey> = Vec::new();
    for channel in SensorChannel::ALL {
        for w in log.manifest.schedule.channel(channel) {
            match windows.iter_mut().find(|k| k.start == w.start && k.end == w.end) {
                Some(key) => key.channels.push(channel),
                None => windows.push(WindowKey {
                    start: w.start,
                    end: w.end,
                    channels: vec![channel],
                }),
            }
        }
    }
    windows.sort_by(|a, b| a.start.total_cmp(&b.start));
    windows
}

fn window_label(key: &WindowKey) -> String {
    let names: Vec<&str> = key.channels.iter().map(|c| c.name()).collect();
    format!("fault:{}", names.join("+"))
}

/// Selection counts aggregated over a set of decision steps.
#[derive(Debug, Clone, Serialize)]
pub struct UsageRow {
    pub label: String,
    pub steps: usize,
    /// Selection percentage per channel (state, left_rays, right_rays),
    /// summing to 100 for nonempty groups.
    pub percent: [f64; 3],
}

fn usage_over<'a>(selected: impl Iterator<Item = &'a usize>) -> (usize, [f64; 3]) {
    let mut counts = [0usize; 3];
    let mut steps = 0;
    for &s in selected {
        counts[s.min(2)] += 1;
        steps += 1;
    }
    let percent = if steps == 0 {
        [0.0; 3]
    } else {
        [
            100.0 * counts[0] as f64 / steps as f64,
            100.0 * counts[1] as f64 / steps as f64,
            100.0 * counts[2] as f64 / steps as f64,
        ]
    };
    (steps, percent)
}

/// Usage percentages per lap group: the clean steps and each fault window.
/// Rows for nonempty groups sum to 100 +- rounding.
pub fn usage_table(log: &RunLog) -> Vec<UsageRow> {
    let windows = schedule_windows(log);
    let mut rows = Vec::new();

    let in_any_window = |t: f64| windows.iter().any(|w| t >= w.start && t < w.end);
    let (steps, percent) =
        usage_over(log.decisions().filter(|(_, t, _, _)| !in_any_window(**t)).map(|d| d.3));
    rows.push(UsageRow { label: "clean".into(), steps, percent });

    for w in &windows {
        let (steps, percent) = usage_over(
            log.decisions().filter(|(_, t, _, _)| **t >= w.start && **t < w.end).map(|d| d.3),
        );
        rows.push(UsageRow { label: window_label(w), steps, percent });
    }
    rows
}

/// Usage percentages per completed lap (Table-style view).
pub fn usage_per_lap(log: &RunLog) -> Vec<UsageRow> {
    // Lap index per step comes from the trajectory rows.
    let lap_of: std::collections::HashMap<u64, u32> =
        log.trajectory.iter().map(|r| (r.step, r.lap)).collect();
    let max_lap = log.trajectory.iter().map(|r| r.lap).max().unwrap_or(0);
    let mut rows = Vec::new();
    for lap in 0..=max_lap {
        let (steps, percent) = usage_over(
            log.decisions().filter(|(step, _, _, _)| lap_of.get(step) == Some(&lap)).map(|d| d.3),
        );
        if steps > 0 {
            rows.push(UsageRow { label: format!("lap {}", lap + 1), steps, percent });
        }
    }
    rows
}

/// Median total variance per learner, over clean steps and per window, with
/// the window/clean ratio for the faulted channels.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceShift {
    pub window: WindowKey,
    pub clean_median: [f64; 3],
    pub window_median: [f64; 3],
    /// `window_median / clean_median` per learner.
    pub ratio: [f64; 3],
}

pub fn variance_shifts(log: &RunLog) -> Vec<VarianceShift> {
    let windows = schedule_windows(log);
    let in_any_window = |t: f64| windows.iter().any(|w| t >= w.start && t < w.end);

    let totals_over = |filter: &dyn Fn(f64) -> bool| -> [Vec<f64>; 3] {
        let mut per = [Vec::new(), Vec::new(), Vec::new()];
        for (_, t, learners, _) in log.decisions() {
            if filter(*t) {
                for (i, l) in learners.iter().enumerate().take(3) {
                    per[i].push(l.total);
                }
            }
        }
        per
    };

    let clean = totals_over(&|t| !in_any_window(t));
    let clean_median = [median(&clean[0]), median(&clean[1]), median(&clean[2])];

    windows
        .iter()
        .map(|w| {
            let inside = totals_over(&|t| t >= w.start && t < w.end);
            let window_median = [median(&inside[0]), median(&inside[1]), median(&inside[2])];
            let ratio = [
                window_median[0] / clean_median[0],
                window_median[1] / clean_median[1],
                window_median[2] / clean_median[2],
            ];
            VarianceShift { window: w.clone(), clean_median, window_median, ratio }
        })
        .collect()
}

/// One selection-colored trajectory segment row.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub lap: u32,
    pub segment: u32,
    pub learner: usize,
    pub step: u64,
    pub t: f64,
    pub p_x: f64,
    pub p_y: f64,
}

/// Splits the decision-bearing trajectory prefix into segments: a new segment
/// starts exactly where the selected learner changes (or the lap does).
/// Concatenated rows reproduce the decision steps of the trajectory in order.
pub fn segments(log: &RunLog) -> Vec<SegmentRow> {
    let lap_of: std::collections::HashMap<u64, u32> =
        log.trajectory.iter().map(|r| (r.step, r.lap)).collect();
    let pos_of: std::collections::HashMap<u64, (f64, f64)> =
        log.trajectory.iter().map(|r| (r.step, (r.p_x, r.p_y))).collect();

    let mut rows = Vec::new();
    let mut segment = 0u32;
    let mut prev: Option<(usize, u32)> = None;
    for (step, t, _, selected) in log.decisions() {
        let lap = *lap_of.get(step).unwrap_or(&0);
        let (p_x, p_y) = *pos_of.get(step).expect("decision step has a trajectory row");
        if let Some((ps, pl)) = prev {
            if ps != *selected || pl != lap {
                segment += 1;
            }
        }
        prev = Some((*selected, lap));
        rows.push(SegmentRow { lap, segment, learner: *selected, step: *step, t: *t, p_x, p_y });
    }
    rows
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowSummary {
    pub window: WindowKey,
    pub usage_percent: [f64; 3],
    pub variance_clean_median: [f64; 3],
    pub variance_window_median: [f64; 3],
    pub variance_ratio: [f64; 3],
}

/// The JSON summary bundle for a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub policy: String,
    pub seed: u64,
    pub laps: u32,
    pub crashed: bool,
    pub steps: u64,
    pub lap_times: Vec<f64>,
    pub clean_usage_percent: [f64; 3],
    /// Per-learner total-variance quantiles (p25, p50, p75) over clean steps.
    pub clean_variance_quantiles: [[f64; 3]; 3],
    pub windows: Vec<WindowSummary>,
}

pub fn summarize(log: &RunLog) -> RunSummary {
    let usage = usage_table(log);
    let shifts = variance_shifts(log);
    let windows = schedule_windows(log);
    let in_any_window = |t: f64| windows.iter().any(|w| t >= w.start && t < w.end);

    let mut clean_totals = [Vec::new(), Vec::new(), Vec::new()];
    for (_, t, learners, _) in log.decisions() {
        if !in_any_window(*t) {
            for (i, l) in learners.iter().enumerate().take(3) {
                clean_totals[i].push(l.total);
            }
        }
    }
    let q = |v: &[f64]| [quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75)];

    RunSummary {
        schema_version: log.manifest.schema_version,
        policy: log.manifest.policy.clone(),
        seed: log.manifest.seed,
        laps: log.manifest.laps,
        crashed: log.manifest.crashed,
        steps: log.manifest.steps,
        lap_times: log.manifest.lap_times.clone(),
        clean_usage_percent: usage[0].percent,
        clean_variance_quantiles: [q(&clean_totals[0]), q(&clean_totals[1]), q(&clean_totals[2])],
        windows: usage
            .iter()
            .skip(1)
            .zip(&shifts)
            .map(|(u, s)| WindowSummary {
                window: s.window.clone(),
                usage_percent: u.percent,
                variance_clean_median: s.clean_median,
                variance_window_median: s.window_median,
                variance_ratio: s.ratio,
            })
            .collect(),
    }
}

/// Writes `usage.csv`, `usage_per_lap.csv`, `segments.csv`, and
/// `summary.json` into `dir`.
pub fn emit_report(log: &RunLog, dir: &Path) -> Result<(), LogError> {
    std::fs::create_dir_all(dir)?;

    let mut usage = std::io::BufWriter::new(std::fs::File::create(dir.join("usage.csv"))?);
    writeln!(usage, "group,steps,state_pct,left_rays_pct,right_rays_pct")?;
    for row in usage_table(log) {
        writeln!(
            usage,
            "{},{},{},{},{}",
            row.label, row.steps, row.percent[0], row.percent[1], row.percent[2]
        )?;
    }
    usage.flush()?;

    let mut per_lap = std::io::BufWriter::new(std::fs::File::create(dir.join("usage_per_lap.csv"))?);
    writeln!(per_lap, "lap,steps,state_pct,left_rays_pct,right_rays_pct")?;
    for row in usage_per_lap(log) {
        writeln!(
            per_lap,
            "{},{},{},{},{}",
            row.label.trim_start_matches("lap "),
            row.steps,
            row.percent[0],
            row.percent[1],
            row.percent[2]
        )?;
    }
    per_lap.flush()?;

    let mut seg = std::io::BufWriter::new(std::fs::File::create(dir.join("segments.csv"))?);
    writeln!(seg, "lap,segment,learner,step,t,p_x,p_y")?;
    for row in segments(log) {
        writeln!(
            seg,
            "{},{},{},{},{},{},{}",
            row.lap, row.segment, row.learner, row.step, row.t, row.p_x, row.p_y
        )?;
    }
    seg.flush()?;

    let summary = serde_json::to_string_pretty(&summarize(log))?;
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::logs::{LearnerRecord, RunEvent, RunManifest, TrajectoryRow};
    use crate::sensors::{FaultSchedule, FaultWindow};

    /// Synthetic two-window log with a known selection pattern.
    fn synthetic_log() -> RunLog {
        let mut schedule = FaultSchedule::empty();
        schedule.state.push(FaultWindow { start: 1.0, end: 2.0, duty_cycle: 0.7, burst_period: 1.0 });

        let mut trajectory = Vec::new();
        let mut events = Vec::new();
        let dt = 0.1;
        for step in 0..30u64 {
            let t = step as f64 * dt;
            let in_window = (1.0..2.0).contains(&t);
            // Learner 0 wins 3 of 4 clean steps; learner 1 wins inside the window.
            let selected = if in_window {
                1
            } else if step % 4 == 3 {
                1
            } else {
                0
            };
            let lap = if step < 15 { 0 } else { 1 };
            trajectory.push(TrajectoryRow {
                step,
                t,
                p_x: step as f64,
                p_y: -(step as f64),
                theta: 0.0,
                v_x: 1.0,
                v_y: 0.0,
                theta_dot: 0.0,
                steering: 0.0,
                throttle: 0.5,
                lap,
                crashed: false,
            });
            let totals = if in_window { [9.0, 1.0, 2.0] } else { [0.5, 1.0, 2.0] };
            events.push(RunEvent::Decision {
                step,
                t,
                learners: SensorChannel::ALL
                    .iter()
                    .enumerate()
                    .map(|(i, &channel)| LearnerRecord {
                        channel,
                        mean: vec![0.1, 0.2],
                        epistemic: 0.1,
                        aleatoric: totals[i] - 0.1,
                        total: totals[i],
                    })
                    .collect(),
                selected,
                steering: 0.0,
                throttle: 0.5,
            });
        }
        events.push(RunEvent::End { step: 30, t: 3.0, laps: 2, crashed: false });
        RunLog {
            manifest: RunManifest {
                schema_version: 1,
                policy: "ensemble".into(),
                seed: 1,
                config_sha1: "x".into(),
                lap_budget: 2,
                laps: 2,
                crashed: false,
                steps: 30,
                schedule,
                lap_times: vec![1.5, 3.0],
            },
            trajectory,
            events,
        }
    }

    #[test]
    fn usage_rows_sum_to_100() {
        let log = synthetic_log();
        for row in usage_table(&log).iter().chain(usage_per_lap(&log).iter()) {
            if row.steps > 0 {
                let sum: f64 = row.percent.iter().sum();
                assert!((sum - 100.0).abs() < 0.1, "row {} sums to {sum}", row.label);
            }
        }
    }

    #[test]
    fn usage_counts_match_hand_arithmetic() {
        let log = synthetic_log();
        let rows = usage_table(&log);
        // Window covers t in [1, 2): steps 10..19 inclusive -> 10 steps, all learner 1.
        let window_row = &rows[1];
        assert_eq!(window_row.steps, 10);
        assert_eq!(window_row.percent, [0.0, 100.0, 0.0]);
        // Clean: 20 steps, 4 of them (steps 3, 7, 23, 27) go to learner 1.
        let clean_row = &rows[0];
        assert_eq!(clean_row.steps, 20);
        assert!((clean_row.percent[0] - 80.0).abs() < 1e-9);
        assert!((clean_row.percent[1] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn usage_is_label_equivariant() {
        // Permuting learner labels permutes the table columns identically.
        let log = synthetic_log();
        let rows = usage_table(&log);
        let mut permuted = log.clone();
        for event in permuted.events.iter_mut() {
            if let RunEvent::Decision { selected, learners, .. } = event {
                *selected = match *selected {
                    0 => 1,
                    1 => 0,
                    other => other,
                };
                learners.swap(0, 1);
            }
        }
        let rows_p = usage_table(&permuted);
        for (a, b) in rows.iter().zip(&rows_p) {
            assert_eq!(a.percent[0], b.percent[1]);
            assert_eq!(a.percent[1], b.percent[0]);
            assert_eq!(a.percent[2], b.percent[2]);
        }
    }

    #[test]
    fn variance_shift_reports_the_faulted_learner() {
        let log = synthetic_log();
        let shifts = variance_shifts(&log);
        assert_eq!(shifts.len(), 1);
        let s = &shifts[0];
        assert_eq!(s.window.channels, vec![SensorChannel::State]);
        assert_eq!(s.clean_median[0], 0.5);
        assert_eq!(s.window_median[0], 9.0);
        assert_eq!(s.ratio[0], 18.0);
        // Unfaulted learners unchanged.
        assert_eq!(s.ratio[1], 1.0);
    }

    #[test]
    fn segments_partition_the_decision_steps() {
        let log = synthetic_log();
        let seg = segments(&log);
        assert_eq!(seg.len(), 30, "one segment row per decision step");
        // Boundaries occur exactly where the selection (or lap) changes.
        for pair in seg.windows(2) {
            let same = pair[0].learner == pair[1].learner && pair[0].lap == pair[1].lap;
            assert_eq!(pair[0].segment == pair[1].segment, same);
        }
        // Concatenated points reproduce the trajectory rows in order.
        for (row, traj) in seg.iter().zip(&log.trajectory) {
            assert_eq!(row.step, traj.step);
            assert_eq!(row.p_x, traj.p_x);
            assert_eq!(row.p_y, traj.p_y);
        }
    }

    #[test]
    fn single_lap_single_learner_is_one_segment() {
        let mut log = synthetic_log();
        log.manifest.schedule = FaultSchedule::empty();
        for event in log.events.iter_mut() {
            if let RunEvent::Decision { selected, .. } = event {
                *selected = 2;
            }
        }
        for row in log.trajectory.iter_mut() {
            row.lap = 0;
        }
        let seg = segments(&log);
        assert!(seg.iter().all(|r| r.segment == 0 && r.learner == 2));
    }

    #[test]
    fn report_files_are_written_and_deterministic() {
        let log = synthetic_log();
        let base = std::env::temp_dir().join(format!("redundrive-report-{}", std::process::id()));
        let a = base.join("a");
        let b = base.join("b");
        emit_report(&log, &a).unwrap();
        emit_report(&log, &b).unwrap();
        for name in ["usage.csv", "usage_per_lap.csv", "segments.csv", "summary.json"] {
            let fa = std::fs::read(a.join(name)).unwrap();
            let fb = std::fs::read(b.join(name)).unwrap();
            assert!(!fa.is_empty());
            assert_eq!(fa, fb, "{name} not deterministic");
        }
        std::fs::remove_dir_all(&base).unwrap();
    }
}
