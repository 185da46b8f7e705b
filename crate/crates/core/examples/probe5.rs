use redundrive::harness::*;
use redundrive::sensors::SensorChannel;
use std::time::Instant;

fn main() {
    let cfg = ExperimentConfig::default();
    let t0 = Instant::now();
    for master in [1u64, 2, 3] {
        let pipe = build_pipeline(&cfg, master).expect("pipeline");
        let learners = pipe.learners();
        print!("master {master}: clean margins ");
        for ch in SensorChannel::ALL {
            let mut ok = 0;
            for trial in 0..10u64 {
                let seed = redundrive::rng::derive_seed(master, &format!("margin/{trial}"));
                let log = run_episode(&cfg, &learners, Policy::Single(ch), &Default::default(), seed, 5).unwrap();
                if !log.manifest.crashed && log.manifest.laps == 5 { ok += 1; }
            }
            print!("{ch}={ok}/10 ");
        }
        // ensemble with the acceptance eval seed
        let seed = redundrive::rng::derive_seed(master, "acceptance/ensemble");
        let log = run_episode(&cfg, &learners, Policy::Ensemble, &cfg.fault_schedule(), seed, cfg.simulation.lap_budget).unwrap();
        print!("| ens laps={} crash={}", log.manifest.laps, log.manifest.crashed);
        let usage = usage_table(&log);
        let shifts = variance_shifts(&log);
        let state_factor = usage[0].percent[0] / usage[1].percent[0].max(1e-9);
        println!(" state {:.1}%->{:.1}% (factor {:.1}) varratio {:.1}", usage[0].percent[0], usage[1].percent[0], state_factor, shifts[0].ratio[0]);
        // fragility margin on master 1
        if master == 1 {
            for ch in SensorChannel::ALL {
                let sched = cfg.own_fault_schedule(ch, 4.0);
                let onset = sched.channel(ch)[0].start;
                let mut within = 0;
                for trial in 0..10u64 {
                    let seed = redundrive::rng::derive_seed(master, &format!("acceptance/fragility/{trial}"));
                    let log = run_episode(&cfg, &learners, Policy::Single(ch), &sched, seed, 9).unwrap();
                    if log.manifest.crashed {
                        let lap_at_onset = log.manifest.lap_times.iter().filter(|&&lt| lt <= onset).count();
                        if (log.manifest.laps as usize) < lap_at_onset + 2 { within += 1; }
                    }
                }
                print!("  frag-{ch}={within}/10");
            }
            println!();
        }
    }
    println!("total {:?}", t0.elapsed());
}
