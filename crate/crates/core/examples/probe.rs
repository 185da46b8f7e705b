use redundrive::harness::*;
use redundrive::sensors::SensorChannel;
use std::time::Instant;

fn main() {
    let cfg = ExperimentConfig::default();
    let t0 = Instant::now();
    let pipe = build_pipeline(&cfg, 1).expect("pipeline");
    println!("pipeline built in {:?} ({} rows/channel)", t0.elapsed(), pipe.collect.datasets[0].len());
    for c in &pipe.checkpoints {
        println!("  {}: loss {:.4} -> {:.4}, s_clamps {}", c.channel,
            c.loss_history.first().unwrap(), c.loss_history.last().unwrap(), c.s_clamp_events);
    }
    let learners = pipe.learners();

    // (6) clean competence per learner, 5 laps
    for ch in SensorChannel::ALL {
        let t = Instant::now();
        let log = run_episode(&cfg, &learners, Policy::Single(ch), &Default::default(), 100, 5).unwrap();
        println!("single {ch} clean: laps={} crashed={} steps={} ({:?})", log.manifest.laps, log.manifest.crashed, log.manifest.steps, t.elapsed());
    }

    // (7) fragility: own channel faulted from lap 4, check crash within 2 laps, 10 seeds
    for ch in SensorChannel::ALL {
        let sched = cfg.own_fault_schedule(ch, 4.0);
        let mut crashes = 0;
        let mut within = 0;
        for seed in 0..10u64 {
            let log = run_episode(&cfg, &learners, Policy::Single(ch), &sched, 200 + seed, 8).unwrap();
            if log.manifest.crashed {
                crashes += 1;
                // lap count at crash vs lap count at fault onset
                let onset = sched.channel(ch)[0].start;
                let lap_at_onset = log.manifest.lap_times.iter().filter(|&&lt| lt <= onset).count();
                let crash_laps = log.manifest.laps as usize;
                if crash_laps < lap_at_onset + 2 { within += 1; }
            }
        }
        println!("fragility {ch}: {crashes}/10 crashed, {within}/10 within 2 laps");
    }

    // (8-10) ensemble under default schedule, 17 laps
    for seed in [11u64, 22, 33] {
        let t = Instant::now();
        let log = run_episode(&cfg, &learners, Policy::Ensemble, &cfg.fault_schedule(), seed, cfg.simulation.lap_budget).unwrap();
        println!("ensemble seed {seed}: laps={} crashed={} steps={} ({:?})", log.manifest.laps, log.manifest.crashed, log.manifest.steps, t.elapsed());
        if seed == 11 {
            for row in usage_table(&log) {
                println!("  usage {}: steps={} pct=[{:.1}, {:.1}, {:.1}]", row.label, row.steps, row.percent[0], row.percent[1], row.percent[2]);
            }
            for s in variance_shifts(&log) {
                println!("  varshift {:?}: clean=[{:.2e},{:.2e},{:.2e}] window=[{:.2e},{:.2e},{:.2e}]",
                    s.window.channels, s.clean_median[0], s.clean_median[1], s.clean_median[2],
                    s.window_median[0], s.window_median[1], s.window_median[2]);
            }
        }
    }
    println!("total {:?}", t0.elapsed());
}
