use lance_core::coder::ParamSet;
use lance_core::decoder::Image;
use lance_core::encoder::{Ablation, EncodeConfig, OperatingPoint, Problem, TrainState};
use lance_core::quantize::Relaxation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(w, h, (0..3 * w * h).map(|_| rng.gen()).collect()).unwrap()
}

/// Splits a flat parameter set into its named tensors.
fn tensors(set: ParamSet, config: &EncodeConfig, layers: usize, cond: usize) -> Vec<(&'static str, usize)> {
    let n = config.context_size.unwrap();
    let c = config.synth_channels.unwrap();
    match set {
        ParamSet::Phi => vec![("phi.w1", 9), ("phi.b1", 3), ("phi.w2", 6), ("phi.b2", 2)],
        ParamSet::Xi => vec![
            ("xi.w1", n * (n + cond)),
            ("xi.b1", n),
            ("xi.w2", n * n),
            ("xi.b2", n),
            ("xi.w3", 2 * n),
            ("xi.b3", 2),
        ],
        ParamSet::Upsampler => (0..layers - 1).map(|_| ("upsampler.stage", 4)).collect(),
        ParamSet::Synthesis => vec![
            ("synth.w1", c * layers),
            ("synth.b1", c),
            ("synth.w2", 3 * c),
            ("synth.b2", 3),
            ("synth.w3", 81),
            ("synth.b3", 3),
            ("synth.w4", 81),
            ("synth.b4", 3),
        ],
    }
}

#[test]
fn every_tensor_gets_a_gradient_at_the_first_iteration() {
    for (seed, op) in [(0, OperatingPoint::Lop), (1, OperatingPoint::Hop), (2, OperatingPoint::Mop)] {
        let img = random_image(24, 20, 100 + seed);
        let mut config = EncodeConfig { layers: 4, downsampling: 2, operating_point: op, seed, ablation: Ablation::default(), ..Default::default() };
        config.context_size = Some(op.context_size());
        config.synth_channels = Some(op.synth_channels());
        let problem = Problem::new(&img, &config).unwrap();
        let state = TrainState::init(*problem.arch(), seed);
        let relax = Relaxation::Soft {
            temperature: config.schedule.temperature_start,
            noise_std: config.schedule.noise_std_start,
            med_temperature: config.schedule.med_temperature_start,
        };
        let (_, grad) = problem.loss_and_gradient(&state.values, config.lambda, relax, seed).unwrap();
        let mut blocks = vec![("latents", state.layout.latents.clone()), ("hyperprior", state.layout.hyperprior.clone())];
        for set in ParamSet::ALL {
            let mut off = state.layout.params[set as usize].start;
            for (name, len) in tensors(set, &config, 4, 2) {
                blocks.push((name, off..off + len));
                off += len;
            }
            assert_eq!(off, state.layout.params[set as usize].end, "{:?} tensor split", set);
        }
        for (name, range) in blocks {
            assert!(grad[range].iter().any(|g| *g != 0.0), "{} has an all-zero gradient ({:?})", name, op);
        }
    }
}
