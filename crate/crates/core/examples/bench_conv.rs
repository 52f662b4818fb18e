//! Rough timing probe for the training kernels.

use std::time::Instant;

use lqmod_core::denoiser::model::backward_traced;
use lqmod_core::denoiser::{forward, forward_traced, Architecture, ModelParams};
use lqmod_core::parcel::{quant_loss, ParcellationPlan};

fn main() {
    let p = 32usize;
    let dims = [p, p, p];
    let n = p * p * p;
    let input: Vec<f64> = (0..n).map(|i| 1.0 + (i % 17) as f64 * 0.05).collect();
    let params = ModelParams::init(Architecture::ConvNet, 1);

    let t = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let _ = forward(&params, &input, dims).unwrap();
    }
    println!("forward 32^3: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let upstream: Vec<f64> = input.iter().map(|v| v * 0.1).collect();
    let t = Instant::now();
    for _ in 0..reps {
        let (_, trace) = forward_traced(&params, &input, dims).unwrap();
        let _ = backward_traced(&params, &input, dims, &trace, &upstream).unwrap();
    }
    println!("fwd+bwd 32^3: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let plan = ParcellationPlan::build(p).unwrap();
    let hc: Vec<f64> = input.iter().map(|v| v * 1.01).collect();
    let t = Instant::now();
    for _ in 0..reps {
        let _ = quant_loss(&input, &hc, &plan).unwrap();
    }
    println!("quant_loss 32^3: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
