use redundrive::ensemble::{decompose, Learner};
use redundrive::harness::*;
use redundrive::rng;
use redundrive::sensors::*;
use redundrive::track::*;
use redundrive::util::median;
use std::time::Instant;

fn recipe(cfg: &mut ExperimentConfig) {
    for ch in SensorChannel::ALL {
        let lc = match ch {
            SensorChannel::State => &mut cfg.learners.state,
            SensorChannel::LeftRays => &mut cfg.learners.left_rays,
            SensorChannel::RightRays => &mut cfg.learners.right_rays,
        };
        lc.dropout_rate = 0.05;
        lc.hidden_widths = vec![128, 128];
        lc.epochs = 400;
        lc.learning_rate = 3e-3;
    }
}

fn ray_fault_response(cfg: &ExperimentConfig, learner: &Learner, side: RaySide) {
    let track = cfg.track;
    let ray_cfg = cfg.ray_sensor_config();
    let k = cfg.simulation.n_mc;
    let mut clean = Vec::new();
    let mut faulted = Vec::new();
    let mut rng_mc = rng::stream(77);
    for i in 0..300 {
        let s = track.length() * i as f64 / 300.0;
        let mut state = VehicleState::at_station(&track, s);
        state.v_x = cfg.cost.target_speed;
        let c = track.sample(s);
        state.p_x -= 0.1 * c.outward.0;
        state.p_y -= 0.1 * c.outward.1;
        let oc = observe_rays(&state, &track, &ray_cfg, side, false);
        let of = observe_rays(&state, &track, &ray_cfg, side, true);
        clean.push(decompose(&learner.mc_sample(&oc.ranges, k, &mut rng_mc).unwrap()).total);
        faulted.push(decompose(&learner.mc_sample(&of.ranges, k, &mut rng_mc).unwrap()).total);
    }
    println!("  {:?} fault response: clean={:.3e} fault={:.3e} ratio={:.1}",
        learner.channel, median(&clean), median(&faulted), median(&faulted)/median(&clean));
}

fn main() {
    let mut cfg = ExperimentConfig::default();
    recipe(&mut cfg);
    let t0 = Instant::now();
    let pipe = build_pipeline(&cfg, 1).expect("pipeline");
    println!("pipeline in {:?}", t0.elapsed());
    for c in &pipe.checkpoints {
        println!("  {}: loss {:.3} -> {:.3}", c.channel, c.loss_history[0], c.loss_history.last().unwrap());
    }
    let learners = pipe.learners();

    for ch in SensorChannel::ALL {
        let log = run_episode(&cfg, &learners, Policy::Single(ch), &Default::default(), 100, 5).unwrap();
        println!("single {ch} clean: laps={} crashed={}", log.manifest.laps, log.manifest.crashed);
    }

    ray_fault_response(&cfg, &learners[1], RaySide::Left);
    ray_fault_response(&cfg, &learners[2], RaySide::Right);

    for ch in SensorChannel::ALL {
        let sched = cfg.own_fault_schedule(ch, 4.0);
        let mut within = 0;
        for seed in 0..10u64 {
            let log = run_episode(&cfg, &learners, Policy::Single(ch), &sched, 200 + seed, 9).unwrap();
            if log.manifest.crashed {
                let onset = sched.channel(ch)[0].start;
                let lap_at_onset = log.manifest.lap_times.iter().filter(|&&lt| lt <= onset).count();
                if (log.manifest.laps as usize) < lap_at_onset + 2 { within += 1; }
            }
        }
        println!("fragility {ch}: {within}/10 within 2 laps");
    }

    for seed in [11u64, 22, 33] {
        let log = run_episode(&cfg, &learners, Policy::Ensemble, &cfg.fault_schedule(), seed, cfg.simulation.lap_budget).unwrap();
        println!("ensemble seed {seed}: laps={} crashed={}", log.manifest.laps, log.manifest.crashed);
        for row in usage_table(&log) {
            println!("  usage {}: steps={} pct=[{:.1}, {:.1}, {:.1}]", row.label, row.steps, row.percent[0], row.percent[1], row.percent[2]);
        }
        for s in variance_shifts(&log) {
            println!("  varshift {:?}: ratios=[{:.2}, {:.2}, {:.2}]", s.window.channels, s.ratio[0], s.ratio[1], s.ratio[2]);
        }
    }
    println!("total {:?}", t0.elapsed());
}
