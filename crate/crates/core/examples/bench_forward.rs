use rlrobust::network::{build_network, NetworkConfig};
use rlrobust::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let net = build_network(&NetworkConfig::default(), 0).unwrap();
    let b = 32;
    let n = b * 32 * 32 * 3;
    let images = Tensor::from_vec(&[b, 32, 32, 3], (0..n).map(|i| (i % 255) as f32 / 255.0).collect()).unwrap();
    let labels: Vec<usize> = (0..b).map(|i| i % 10).collect();

    // forward only (frozen params)
    let t0 = Instant::now();
    let iters = 6;
    for _ in 0..iters {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let pass = net.forward(&mut tape, input, false).unwrap();
        std::hint::black_box(tape.value(pass.probs).data()[0]);
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    println!("forward  (B=32): {:.1} ms/batch  ({:.2} ms/img)", fwd * 1e3, fwd * 1e3 / b as f64);

    // forward+backward, params tracked (training step shape)
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone());
        let pass = net.forward(&mut tape, input, true).unwrap();
        let loss = tape.cross_entropy_loss(pass.probs, &labels).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(pass.params[0]).unwrap()[0]);
    }
    let fb = t0.elapsed().as_secs_f64() / iters as f64;
    println!("fwd+bwd params (B=32): {:.1} ms/batch ({:.2} ms/img)", fb * 1e3, fb * 1e3 / b as f64);

    // forward+backward w.r.t. input only (attack shape)
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let input = tape.var(images.clone());
        let pass = net.forward(&mut tape, input, false).unwrap();
        let loss = tape.cross_entropy_loss(pass.probs, &labels).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(input).unwrap()[0]);
    }
    let atk = t0.elapsed().as_secs_f64() / iters as f64;
    println!("fwd+bwd input  (B=32): {:.1} ms/batch ({:.2} ms/img)", atk * 1e3, atk * 1e3 / b as f64);
}
