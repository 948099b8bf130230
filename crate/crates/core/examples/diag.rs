use fpbench_core::datasets::{gen_sprite_dataset, Targets};
use fpbench_core::evaluation::{embed_dataset, evaluate_embeddings, EmbeddingSet, SupervisedConfig};
use fpbench_core::nets::load_weights;
use fpbench_core::procedures::EncoderInput;
use std::path::Path;

fn knn_distance(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> f64 {
    let (tn, d) = (train.inputs.shape()[0], train.inputs.shape()[1]);
    let sn = test.inputs.shape()[0];
    let tr = train.inputs.data();
    let te = test.inputs.data();
    let (tp, sp) = match (&train.targets, &test.targets) {
        (Targets::Positions(a), Targets::Positions(b)) => (a.data(), b.data()),
        _ => panic!("positions expected"),
    };
    let mut total = 0.0;
    for i in 0..sn {
        let row = &te[i * d..(i + 1) * d];
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for j in 0..tn {
            let other = &tr[j * d..(j + 1) * d];
            let dist: f64 = row
                .iter()
                .zip(other)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.len() < k || dist < best.last().unwrap().0 {
                best.push((dist, j));
                best.sort_by(|a, b| a.0.total_cmp(&b.0));
                best.truncate(k);
            }
        }
        let (mut py, mut px) = (0.0, 0.0);
        for &(_, j) in &best {
            py += tp[2 * j];
            px += tp[2 * j + 1];
        }
        py /= k as f64;
        px /= k as f64;
        let dy = py - sp[2 * i];
        let dx = px - sp[2 * i + 1];
        total += (dy * dy + dx * dx).sqrt();
    }
    total / sn as f64
}

fn main() {
    let runs = Path::new("/tmp/pilotE/runs");
    let lossnet = load_weights(&runs.join("lossnet.fpbw")).unwrap();
    let probe_train = gen_sprite_dataset(1000, 32, 11 + 102).unwrap();
    let probe_test = gen_sprite_dataset(1000, 32, 11 + 103).unwrap();

    for name in ["I-I-PW", "I-I-PS", "I-F-FP"] {
        let enc = load_weights(&runs.join(format!("weights/{name}-z64-r0-encoder.fpbw"))).unwrap();
        let tr = embed_dataset(&enc, EncoderInput::Image, Some(&lossnet), &probe_train).unwrap();
        let te = embed_dataset(&enc, EncoderInput::Image, Some(&lossnet), &probe_test).unwrap();
        let knn = knn_distance(&tr, &te, 5);
        let cfg = SupervisedConfig {
            epochs: 1000,
            batch_size: 64,
            learning_rate: 1e-2,
            val_fraction: 0.2,
            patience: Some(150),
            seed: 5,
        };
        let res = evaluate_embeddings(&tr, &te, &cfg).unwrap();
        println!(
            "{name}: knn5 {knn:.3} px, long probe {:.3} px (arch {})",
            res.value, res.best_arch_id
        );
    }
}
