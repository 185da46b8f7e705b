use redundrive::ensemble::Learner;
use redundrive::harness::*;
use redundrive::rng;
use redundrive::sensors::*;
use redundrive::track::*;
use redundrive::util::median;
use std::path::Path;

fn measure(cfg: &ExperimentConfig, learner: &Learner, tag: &str) {
    // Clean vs faulted MC total variance along the track.
    let track = cfg.track;
    let k = cfg.simulation.n_mc;
    let mut clean = Vec::new();
    let mut faulted = Vec::new();
    let mut clean_epi = Vec::new();
    let mut fault_epi = Vec::new();
    let mut clean_alea = Vec::new();
    let mut fault_alea = Vec::new();
    let mut rng_fault = rng::stream(99);
    let mut rng_mc = rng::stream(98);
    for i in 0..300 {
        let s = track.length() * (i as f64) / 300.0;
        let mut state = VehicleState::at_station(&track, s);
        state.v_x = cfg.cost.target_speed;
        // small lateral/heading jitter like closed loop
        let c = track.sample(s);
        state.p_x -= 0.1 * c.outward.0;
        state.p_y -= 0.1 * c.outward.1;
        let obs_c = observe_state(&state, &track, false, &mut rng_fault);
        let obs_f = observe_state(&state, &track, true, &mut rng_fault);
        let rc = redundrive::ensemble::decompose(&learner.mc_sample(&obs_c.values, k, &mut rng_mc).unwrap());
        let rf = redundrive::ensemble::decompose(&learner.mc_sample(&obs_f.values, k, &mut rng_mc).unwrap());
        clean.push(rc.total);
        faulted.push(rf.total);
        clean_epi.push(rc.epistemic);
        fault_epi.push(rf.epistemic);
        clean_alea.push(rc.aleatoric);
        fault_alea.push(rf.aleatoric);
    }
    let mc = median(&clean); let mf = median(&faulted);
    println!("  epi: clean={:.3e} fault={:.3e} ({:.1}x) | alea: clean={:.3e} fault={:.3e} ({:.1}x)",
        median(&clean_epi), median(&fault_epi), median(&fault_epi)/median(&clean_epi),
        median(&clean_alea), median(&fault_alea), median(&fault_alea)/median(&clean_alea));
    // closed-loop clean survival
    let pipe_learners = vec![learner.clone(), learner.clone(), learner.clone()];
    let log = run_episode(cfg, &pipe_learners, Policy::Single(SensorChannel::State), &FaultSchedule::empty(), 55, 5).unwrap();
    println!("{tag}: clean_med={mc:.3e} fault_med={mf:.3e} ratio={:.1} | clean run: laps={} crashed={}",
        mf/mc, log.manifest.laps, log.manifest.crashed);
}

fn main() {
    let base = ExperimentConfig::default();
    let dsdir = Path::new("/tmp/redundrive-ds");
    let ds = if dsdir.join("state.csv").exists() {
        read_dataset(&dsdir.join("state.csv")).unwrap()
    } else {
        let out = collect_dataset(&base, 20, 1).unwrap();
        for d in &out.datasets { write_dataset(&dataset_path(dsdir, d.channel), d, 1, "x").unwrap(); }
        out.datasets[0].clone()
    };
    println!("dataset rows: {}", ds.len());

    for (p, pin, widths, epochs, lr) in [
        (0.05, 0.1, vec![128, 128], 400, 3e-3),
        (0.05, 0.2, vec![128, 128], 400, 3e-3),
        (0.05, 0.3, vec![128, 128], 400, 3e-3),
        (0.1, 0.2, vec![128, 128], 400, 3e-3),
        (0.05, 0.2, vec![128, 128], 600, 3e-3),
    ] {
        let mut cfg = base.clone();
        cfg.learners.state.dropout_rate = p;
        cfg.learners.state.input_dropout_rate = pin;
        cfg.learners.state.hidden_widths = widths.clone();
        cfg.learners.state.epochs = epochs;
        cfg.learners.state.learning_rate = lr;
        let ckpt = train_channel(&cfg, &ds, 1).unwrap();
        let fl = ckpt.loss_history.last().unwrap();
        measure(&cfg, &ckpt.to_learner(), &format!("p={p} pin={pin} w={widths:?} e={epochs} lr={lr} (loss {fl:.2})"));
    }
}
