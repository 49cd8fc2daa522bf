use gradmatch::condenser::{condense, CondenseConfig, MatchMode, ThetaPolicy};
use gradmatch::coreset::random_coreset;
use gradmatch::data::{gaussian_blobs, SynthInit};
use gradmatch::eval::{repeat_eval, TrainConfig};
use gradmatch::models::{Arch, ModelSpec};

#[test]
fn probe_convergence() {
    let spec = ModelSpec::new(Arch::Logistic, (1, 1, 2), 2).unwrap();
    let test = gaussian_blobs(2, 4000, 2, 4.0, 999).unwrap();
    let tc = TrainConfig { epochs: 300, batch_size: 256, lr: 0.5, lr_decay_epochs: vec![150], lr_decay_factor: 0.1, seed: 0 };
    for (name, zeta, init, eta) in [
        ("zs1-noise", 1usize, SynthInit::Noise, 0.5f64),
        ("zs3-noise", 3, SynthInit::Noise, 0.5),
        ("zs5-noise", 5, SynthInit::Noise, 0.3),
        ("zs1-real", 1, SynthInit::RealSample, 0.5),
        ("zs3-real", 3, SynthInit::RealSample, 0.3),
    ] {
        let mut wins = 0; let mut minacc: f64 = 1.0; let mut cm = 0.0; let mut rm = 0.0; let mut detail = String::new();
        for seed in 0..10u64 {
            let train = gaussian_blobs(2, 500, 2, 4.0, seed).unwrap();
            let mut cfg = CondenseConfig::new(1, "d1+d2".parse().unwrap(), 2);
            cfg.outer_iters = 20; cfg.inner_iters = 1; cfg.mode = MatchMode::MultiLevel;
            cfg.theta_policy = ThetaPolicy::Fixed { steps: 1 };
            cfg.eta_s = eta; cfg.seed = seed; cfg.real_batch_per_class = 256;
            cfg.synth_steps = zeta; cfg.init = init;
            let (s, _) = condense(&train, &cfg, &spec).unwrap();
            let rep = repeat_eval(&spec, &s.images, &s.labels, &test, &tc, 2, 17).unwrap();
            let rc = random_coreset(&train, 1, seed).unwrap();
            let (ri, rl) = rc.to_train_set(&train);
            let rrep = repeat_eval(&spec, &ri, &rl, &test, &tc, 2, 17).unwrap();
            if rep.mean > rrep.mean { wins += 1; }
            detail.push_str(&format!(" {:.4}/{:.4}", rep.mean, rrep.mean));
            minacc = minacc.min(rep.mean); cm += rep.mean / 10.0; rm += rrep.mean / 10.0;
        }
        println!("{name}: cond {cm:.4} min {minacc:.4} | rand {rm:.4} | wins {wins}/10 |{detail}");
    }
}
