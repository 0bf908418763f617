//! One-off timing probe (run with `cargo test --release -p restorad --test
//! profile -- --ignored --nocapture`).

use autograd::Tape;
use ndarray::Array4;
use rand::Rng;
use restorad::critic::{Critic, CriticConfig};
use restorad::generator::{Generator, GeneratorConfig};
use restorad::rng::derive_rng;
use std::time::Instant;

#[test]
#[ignore]
fn stage_timings() {
    let gen_cfg = GeneratorConfig {
        input_size: 64,
        base_width: 6,
        num_levels: 2,
        fusion_width: 6,
        gate_levels: Some(vec![1]),
        ..GeneratorConfig::default()
    };
    let critic_cfg = CriticConfig {
        input_size: 64,
        num_layers: 3,
        base_width: 12,
        ..CriticConfig::default()
    };
    let generator = Generator::init(gen_cfg, 1).unwrap();
    let critic = Critic::init(critic_cfg, 2).unwrap();
    let mut rng = derive_rng(3, "profile", &[]);
    let batch = Array4::from_shape_fn((6, 1, 64, 64), |_| rng.random_range(-0.9..0.9));
    let deltas = vec![1.0; 6];

    let reps = 5;

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let params = generator.bind(&tape, false);
        let x = tape.leaf_nograd(batch.clone().into_dyn());
        let _ = generator.forward(&tape, &params, x, &deltas).unwrap();
    }
    println!("gen fwd (nograd): {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let params = generator.bind(&tape, true);
        let x = tape.leaf_nograd(batch.clone().into_dyn());
        let f = generator.forward(&tape, &params, x, &deltas).unwrap();
        let loss = tape.mean_all(tape.mul(f.output, f.output));
        let vars: Vec<_> = params.iter().map(|(_, v)| *v).collect();
        let _ = tape.grad(loss, &vars);
    }
    println!("gen fwd+bwd: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let params = critic.bind(&tape, true);
        let x = tape.leaf_nograd(batch.clone().into_dyn());
        let f = critic.forward(&tape, &params, x).unwrap();
        let loss = tape.mean_all(f.scores);
        let vars: Vec<_> = params.iter().map(|(_, v)| *v).collect();
        let _ = tape.grad(loss, &vars);
    }
    println!("critic fwd+bwd: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let params = critic.bind(&tape, true);
        let pen = restorad::losses::gradient_penalty(&tape, &batch, |t, xh| {
            critic
                .forward(t, &params, xh)
                .map(|f| f.scores)
                .map_err(|e| restorad::losses::LossError::ShapeMismatch(e.to_string()))
        })
        .unwrap();
        let vars: Vec<_> = params.iter().map(|(_, v)| *v).collect();
        let _ = tape.grad(pen, &vars);
    }
    println!("gp double-bwd: {:?}/it", t0.elapsed() / reps);
}
