use rlrobust::attacks::{build_attack, AttackConfig};
use rlrobust::data::Dataset;
use rlrobust::eval::{adversarial_accuracy, natural_accuracy};
use rlrobust::network::{build_network, ConvBlock, NetworkConfig};
use rlrobust::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Tensor::from_vec(
        &[n, 32, 32, 3],
        (0..n * 32 * 32 * 3).map(|_| rng.gen_range(0.0f32..=1.0)).collect(),
    ).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let ds = Dataset::new(images, labels, "noise").unwrap();
    let attack = build_attack("fgsm", &AttackConfig::default()).unwrap();

    for (name, cfg) in [
        ("default", NetworkConfig::default()),
        ("mid", NetworkConfig {
            conv_blocks: vec![ConvBlock{layers:1,channels:16}, ConvBlock{layers:1,channels:32}],
            dense_units: vec![64], num_classes: 10, input_shape: [32,32,3],
        }),
    ] {
        for seed in [3u64, 5, 9] {
            let net = build_network(&cfg, seed).unwrap();
            let nat = natural_accuracy(&net, &ds).unwrap();
            let adv = adversarial_accuracy(&net, &ds, attack.as_ref()).unwrap();
            println!("{name} seed {seed}: natural {nat:.3}  fgsm-adv {adv:.3}");
        }
    }
}
