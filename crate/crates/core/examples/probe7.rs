use redundrive::ensemble::Learner;
use redundrive::harness::*;
use redundrive::sensors::*;
use redundrive::track::*;
use redundrive::rng;
use std::path::Path;

fn det_run(cfg: &ExperimentConfig, learner: &Learner) -> (u32, bool, f64, f64) {
    let track = cfg.track;
    let dt = cfg.simulation.dt;
    let mut state = collect::start_state(cfg);
    let mut counter = LapCounter::new(0.0, &track);
    let mut steps = 0u64;
    let mut max_lat = 0.0f64;
    let mut crashed = false;
    let mut crash_station = -1.0;
    let mut unused = rng::stream(0);
    while counter.laps() < 5 && steps < 20000 {
        let obs = observe_state(&state, &track, false, &mut unused);
        let x = learner.normalizer.apply(&obs.values);
        let (mean, _) = learner.mlp.forward_deterministic(&x).unwrap();
        let control = Control { steering: mean[0], throttle: mean[1] }.clamped();
        state = step_dynamics(&state, &control, dt, &cfg.vehicle).unwrap();
        let f = track.project((state.p_x, state.p_y));
        max_lat = max_lat.max(f.lateral_offset.abs());
        if is_crashed(&state, &track) { crashed = true; crash_station = f.s; break; }
        counter.update(f.s, &track);
        steps += 1;
    }
    (counter.laps(), crashed, max_lat, crash_station)
}

fn main() {
    let base = ExperimentConfig::default();
    let dsdir = Path::new("/tmp/redundrive-ds2");
    let ds = if dsdir.join("state.csv").exists() {
        read_dataset(&dsdir.join("state.csv")).unwrap()
    } else {
        let out = collect_dataset(&base, base.simulation.collect_laps, 1).unwrap();
        for d in &out.datasets { write_dataset(&dataset_path(dsdir, d.channel), d, 1, "x").unwrap(); }
        out.datasets[0].clone()
    };
    println!("rows {}", ds.len());

    for (tag, widths, epochs, lr, pin) in [
        ("pin03", vec![128,128], 600, 3e-3, 0.03),
        ("pin05", vec![128,128], 600, 3e-3, 0.05),
        ("pin08", vec![128,128], 600, 3e-3, 0.08),
    ] {
        let mut cfg = base.clone();
        cfg.learners.state.hidden_widths = widths;
        cfg.learners.state.epochs = epochs;
        cfg.learners.state.learning_rate = lr;
        cfg.learners.state.input_dropout_rate = pin;
        let ckpt = train_channel(&cfg, &ds, 1).unwrap();
        let learner = ckpt.to_learner();
        let (laps, crashed, max_lat, cs) = det_run(&cfg, &learner);
        // MC-mean margin over 10 eval seeds (solo run needs all 3 learners; reuse state learner thrice)
        let trio = vec![learner.clone(), learner.clone(), learner.clone()];
        let mut ok = 0;
        for trial in 0..10u64 {
            let seed = rng::derive_seed(1, &format!("margin/{trial}"));
            let log = run_episode(&cfg, &trio, Policy::Single(SensorChannel::State), &Default::default(), seed, 5).unwrap();
            if !log.manifest.crashed && log.manifest.laps == 5 { ok += 1; }
        }
        // synthetic fault-response ratio
        let track = cfg.track;
        let k = cfg.simulation.n_mc;
        let mut rng_fault = rng::stream(99);
        let mut rng_mc = rng::stream(98);
        let mut clean = Vec::new();
        let mut faulted = Vec::new();
        for i in 0..200 {
            let s = track.length() * i as f64 / 200.0;
            let mut state = VehicleState::at_station(&track, s);
            state.v_x = cfg.cost.target_speed;
            let oc = observe_state(&state, &track, false, &mut rng_fault);
            let of = observe_state(&state, &track, true, &mut rng_fault);
            clean.push(redundrive::ensemble::decompose(&learner.mc_sample(&oc.values, k, &mut rng_mc).unwrap()).total);
            faulted.push(redundrive::ensemble::decompose(&learner.mc_sample(&of.values, k, &mut rng_mc).unwrap()).total);
        }
        let ratio = redundrive::util::median(&faulted) / redundrive::util::median(&clean);
        println!("{tag}: det laps={laps} crashed={crashed} max|lat|={max_lat:.2} st={cs:.1} loss={:.2} | mc-clean {ok}/10 | fault-ratio {ratio:.1}", ckpt.loss_history.last().unwrap());
    }
}
