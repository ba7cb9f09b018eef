//! Verifies analytic gradients against central finite differences for the
//! building blocks the models are made of.
//!
//! The checker reruns each forward pass with every parameter element nudged
//! by ±1e-3 and rejects instances that land too close to a ReLU/clamp corner
//! or a min tie, where two-sided differences are meaningless. Run with
//! `cargo run --example gradient_check`.

use exitlab::numerics::{
    check_gradients, Dense, EncoderLayer, GradCheckConfig, GradCheckOutcome, GruCell, Init,
    ParameterStore, Tensor,
};
use exitlab::rng::seeded;
use exitlab::Result;

fn report(name: &str, outcome: GradCheckOutcome) {
    match outcome {
        GradCheckOutcome::Report(r) => println!(
            "{name:<22} {:>4} elements  max rel err {:.2e}  worst {}  {}",
            r.elements_checked,
            r.max_rel_error,
            r.worst_param,
            if r.within(1e-4) { "ok" } else { "FAIL" }
        ),
        GradCheckOutcome::Rejected { margin } => {
            println!("{name:<22} rejected (kink margin {margin:.1e}); try another seed")
        }
    }
}

fn main() -> Result<()> {
    let cfg = GradCheckConfig::default();
    let mut rng = seeded(12, "gradient-check-example");

    // Dense layer driving a softmax cross-entropy loss.
    let mut store = ParameterStore::<f64>::new();
    let layer = Dense::register(&mut store, "dense", 4, 3, Init::KaimingNormal, &mut rng)?;
    let input = Tensor::row_vector(vec![0.4, -1.1, 0.7, 0.2]);
    report(
        "dense + cross-entropy",
        check_gradients(&mut store, &cfg, |tape, store| {
            let x = tape.constant(input.clone());
            let logits = layer.forward(tape, store, x)?;
            tape.cross_entropy(logits, 1)
        })?,
    );

    // GRU cell unrolled for three steps, mean-squared output.
    let mut store = ParameterStore::<f64>::new();
    let cell = GruCell::register(&mut store, "gru", 3, 4, &mut rng)?;
    let frames: Vec<Tensor<f64>> = (0..3)
        .map(|t| Tensor::row_vector(vec![0.3 * t as f64, -0.2, 0.5 - 0.1 * t as f64]))
        .collect();
    report(
        "gru (3 steps) + mse",
        check_gradients(&mut store, &cfg, |tape, store| {
            let mut h = tape.constant(Tensor::zeros(1, 4));
            for frame in &frames {
                let x = tape.constant(frame.clone());
                h = cell.step(tape, store, x, h)?;
            }
            let sq = tape.square(h);
            Ok(tape.mean_all(sq))
        })?,
    );

    // Transformer encoder block over four tokens, L1 loss against a target.
    let mut store = ParameterStore::<f64>::new();
    let encoder = EncoderLayer::register(&mut store, "enc", 4, 6, 2, &mut rng)?;
    let tokens = Tensor::from_vec(
        4,
        4,
        vec![
            0.5, -0.3, 0.8, 0.1, //
            -0.2, 0.9, -0.5, 0.4, //
            0.1, 0.2, 0.3, -0.6, //
            0.7, -0.8, 0.2, 0.0,
        ],
    )?;
    let target = Tensor::row_vector(vec![0.2, -0.1, 0.4, 0.3]);
    report(
        "encoder block + l1",
        check_gradients(&mut store, &cfg, |tape, store| {
            let x = tape.constant(tokens.clone());
            let (out, _) = encoder.forward(tape, store, x)?;
            let first = tape.slice_rows(out, 0, 1)?;
            let goal = tape.constant(target.clone());
            tape.l1_mean(first, goal)
        })?,
    );

    println!("\nthe full component sweep (20 random instances each) runs in the test suite");
    Ok(())
}
