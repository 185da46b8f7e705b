use redundrive::harness::*;
use redundrive::sensors::SensorChannel;
use std::time::Instant;

fn apply(cfg: &mut ExperimentConfig, state: (f64, f64, Vec<usize>, usize, f64), rays: (f64, f64, Vec<usize>, usize, f64), expl: (f64, f64)) {
    let lc = &mut cfg.learners.state;
    lc.dropout_rate = state.0; lc.input_dropout_rate = state.1; lc.hidden_widths = state.2; lc.epochs = state.3; lc.learning_rate = state.4;
    for lc in [&mut cfg.learners.left_rays, &mut cfg.learners.right_rays] {
        lc.dropout_rate = rays.0; lc.input_dropout_rate = rays.1; lc.hidden_widths = rays.2.clone(); lc.epochs = rays.3; lc.learning_rate = rays.4;
    }
    cfg.exploration.steering_std = expl.0;
    cfg.exploration.correlation_time = expl.1;
}

fn evaluate(tag: &str, cfg: &ExperimentConfig) {
    let t0 = Instant::now();
    let pipe = build_pipeline(cfg, 1).expect("pipeline");
    let learners = pipe.learners();
    print!("{tag}: ");
    // clean competence (1 seed to save time)
    let mut clean_ok = true;
    for ch in SensorChannel::ALL {
        let log = run_episode(cfg, &learners, Policy::Single(ch), &Default::default(), 100, 5).unwrap();
        if log.manifest.crashed { clean_ok = false; print!("clean-{ch}-CRASH({}) ", log.manifest.laps); }
    }
    if clean_ok { print!("clean-ok "); }
    // fragility
    for ch in SensorChannel::ALL {
        let sched = cfg.own_fault_schedule(ch, 4.0);
        let mut within = 0;
        for seed in 0..10u64 {
            let log = run_episode(cfg, &learners, Policy::Single(ch), &sched, 200 + seed, 9).unwrap();
            if log.manifest.crashed {
                let onset = sched.channel(ch)[0].start;
                let lap_at_onset = log.manifest.lap_times.iter().filter(|&&lt| lt <= onset).count();
                if (log.manifest.laps as usize) < lap_at_onset + 2 { within += 1; }
            }
        }
        print!("frag-{ch}={within}/10 ");
    }
    println!();
    // ensemble x3 + criteria 9/10
    for seed in [11u64, 22, 33] {
        let log = run_episode(cfg, &learners, Policy::Ensemble, &cfg.fault_schedule(), seed, cfg.simulation.lap_budget).unwrap();
        let usage = usage_table(&log);
        let shifts = variance_shifts(&log);
        let clean_state = usage[0].percent[0];
        print!("  seed {seed}: laps={} crash={} | clean_state={clean_state:.0}%", log.manifest.laps, log.manifest.crashed);
        for (u, s) in usage.iter().skip(1).zip(&shifts) {
            if u.steps == 0 { print!(" [{} unreached]", u.label); continue; }
            let chans = &s.window.channels;
            let drops: Vec<String> = chans.iter().map(|c| {
                let i = c.index();
                format!("{}:{:.0}%->{:.0}% r={:.1}", c.name(), usage[0].percent[i], u.percent[i], s.ratio[i])
            }).collect();
            print!(" [{}]", drops.join(" "));
        }
        println!();
    }
    println!("  ({:?})", t0.elapsed());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("A");
    let mut cfg = ExperimentConfig::default();
    match which {
        "A" => apply(&mut cfg, (0.05, 0.2, vec![128,128], 400, 3e-3), (0.1, 0.0, vec![128,64], 200, 1e-3), (0.08, 0.5)),
        "B" => apply(&mut cfg, (0.05, 0.2, vec![128,128], 400, 3e-3), (0.1, 0.0, vec![128,64], 200, 1e-3), (0.15, 0.8)),
        "C" => apply(&mut cfg, (0.05, 0.3, vec![128,128], 400, 3e-3), (0.1, 0.0, vec![128,64], 200, 1e-3), (0.15, 0.8)),
        "D" => {
            apply(&mut cfg, (0.05, 0.15, vec![128,128], 600, 3e-3), (0.1, 0.0, vec![128,64], 200, 1e-3), (0.12, 0.6));
            cfg.simulation.collect_laps = 28;
        }
        "E" => {
            apply(&mut cfg, (0.05, 0.2, vec![128,128], 600, 3e-3), (0.1, 0.0, vec![128,64], 200, 1e-3), (0.12, 0.6));
            cfg.simulation.collect_laps = 28;
        }
        _ => panic!("unknown variant"),
    }
    evaluate(which, &cfg);
}
