use std::time::Instant;
use wmaploc::diffcore::{Sgd, Tape, Tensor};
use wmaploc::models::{Classifier, Embedder, Generator, Mode, Network};
use wmaploc::objectives::{method1_loss, method2_batch_loss, LossConfig};

fn image(b: usize, hw: usize, seed: u64) -> Tensor {
    let mut s = seed | 1;
    let values: Vec<f64> = (0..b * 3 * hw * hw)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(&[b, 3, hw, hw], values).unwrap()
}

fn main() {
    let f = Classifier::init(&[16, 32, 64], 4, 1);
    f.set_trainable(false);
    let g = Generator::init(&[16, 32, 64], 2);
    let x = image(32, 64, 3);
    let cfg = LossConfig::default();

    let t0 = Instant::now();
    for _ in 0..3 {
        let tape = Tape::new();
        let _ = g.forward(&tape, &x, Mode::Eval).unwrap();
    }
    println!("g fwd eval (batch 32): {:.2}s/iter", t0.elapsed().as_secs_f64() / 3.0);

    let params = g.trainable_params();
    let mut opt = Sgd::new(1e-3, 0.9, 1e-4);
    let t0 = Instant::now();
    for _ in 0..3 {
        let tape = Tape::new();
        let parts = method1_loss(&tape, &f, &g, &x, &cfg, Mode::Train).unwrap();
        tape.backward(&parts.loss).unwrap();
        opt.step(&params).unwrap();
    }
    println!("method1 step (batch 32): {:.2}s/iter", t0.elapsed().as_secs_f64() / 3.0);

    let fe = Embedder::init(&[16, 32, 64], 32, 1);
    fe.set_trainable(false);
    let g2 = Generator::init(&[16, 32, 64], 2);
    let params2 = g2.trainable_params();
    let imgs = image(32, 64, 3);
    let triples: Vec<(usize, usize, usize)> =
        (0..32).map(|i| (i, (i + 4) % 32, (i + 9) % 32)).collect();
    let mut opt2 = Sgd::new(1e-3, 0.9, 1e-4);
    let t0 = Instant::now();
    for _ in 0..2 {
        let tape = Tape::new();
        let parts =
            method2_batch_loss(&tape, &fe, &g2, &imgs, &triples, &cfg, Mode::Train).unwrap();
        tape.backward(&parts.loss).unwrap();
        opt2.step(&params2).unwrap();
    }
    println!("method2 batch step (batch 32): {:.2}s/iter", t0.elapsed().as_secs_f64() / 2.0);
}
