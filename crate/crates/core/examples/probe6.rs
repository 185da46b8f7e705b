use redundrive::harness::*;
use redundrive::sensors::*;
use redundrive::track::*;
use redundrive::rng;

fn main() {
    let cfg = ExperimentConfig::default();
    let pipe = build_pipeline(&cfg, 1).expect("pipeline");
    let learners = pipe.learners();
    let track = cfg.track;
    let dt = cfg.simulation.dt;

    // (a) deterministic-forward closed loop (no MC sampling at all)
    {
        let learner = &learners[0];
        let mut state = collect::start_state(&cfg);
        let mut counter = LapCounter::new(0.0, &track);
        let mut steps = 0u64;
        let mut max_lat = 0.0f64;
        let mut crashed = false;
        let mut unused = rng::stream(0);
        while counter.laps() < 5 && steps < 20000 {
            let obs = observe_state(&state, &track, false, &mut unused);
            let x = learner.normalizer.apply(&obs.values);
            let (mean, _) = learner.mlp.forward_deterministic(&x).unwrap();
            let control = Control { steering: mean[0], throttle: mean[1] }.clamped();
            state = step_dynamics(&state, &control, dt, &cfg.vehicle).unwrap();
            let f = track.project((state.p_x, state.p_y));
            max_lat = max_lat.max(f.lateral_offset.abs());
            if is_crashed(&state, &track) { crashed = true; break; }
            counter.update(f.s, &track);
            steps += 1;
        }
        println!("deterministic policy: laps={} crashed={crashed} max|lat|={max_lat:.3}", counter.laps());
    }

    // (b) MC-mean policy, 10 seeds, with crash diagnostics
    for trial in 0..10u64 {
        let seed = rng::derive_seed(1, &format!("margin/{trial}"));
        let log = run_episode(&cfg, &learners, Policy::Single(SensorChannel::State), &FaultSchedule::empty(), seed, 5).unwrap();
        if log.manifest.crashed {
            let last = log.trajectory.last().unwrap();
            let f = track.project((last.p_x, last.p_y));
            println!("trial {trial}: CRASH lap={} t={:.1} station={:.1} lat={:.2}", log.manifest.laps, last.t, f.s, f.lateral_offset);
        } else {
            println!("trial {trial}: ok ({} laps)", log.manifest.laps);
        }
    }
}
