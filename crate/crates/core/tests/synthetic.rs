use gradshield::compressors::{Compressor, CompressorKind};
use gradshield::distsim::{train, SimConfig};
use gradshield::harness::{generate_synthetic, SyntheticSpec};
use gradshield::model::{forward, Activation, Dataset, Network, NetworkSpec, ParamSet};

fn fit(data: &Dataset, hidden: &[usize], seed: u64) -> (NetworkSpec, ParamSet) {
    let spec = NetworkSpec::mlp(data.shape, hidden, data.classes, Activation::Tanh);
    let cfg = SimConfig {
        workers: 1,
        batch_size: 20,
        learning_rate: 0.5,
        steps: 600,
        seed,
        compressor: Compressor::new(CompressorKind::Identity),
        aggregation: Default::default(),
        network: spec.clone(),
    };
    (spec.clone(), train(&cfg, data).unwrap().final_params)
}

fn accuracy(spec: &NetworkSpec, params: &ParamSet, data: &Dataset) -> f64 {
    let net = Network::new(spec.clone()).unwrap();
    let hits = data
        .examples
        .iter()
        .filter(|e| {
            let out = forward(&net, params, &e.x).unwrap();
            let best = (0..out.len())
                .max_by(|&a, &b| out[a].total_cmp(&out[b]))
                .unwrap();
            best == e.y
        })
        .count();
    hits as f64 / data.len() as f64
}

#[test]
fn zero_separation_is_chance_level() {
    let mut total = 0.0;
    for seed in 0..3 {
        let spec = SyntheticSpec {
            separation: 0.0,
            size: 1000,
            seed,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let (train_set, test_set) = (
            data.select(&(0..500).collect::<Vec<_>>()),
            data.select(&(500..1000).collect::<Vec<_>>()),
        );
        let (net, params) = fit(&train_set, &[16], seed);
        total += accuracy(&net, &params, &test_set);
    }
    let mean = total / 3.0;
    assert!((mean - 0.1).abs() < 0.05, "held-out accuracy {mean}");
}

#[test]
fn large_separation_is_linearly_separable() {
    let data = generate_synthetic(&SyntheticSpec {
        separation: 8.0,
        size: 400,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let (net, params) = fit(&data, &[], 1);
    let acc = accuracy(&net, &params, &data);
    assert!(acc >= 0.99, "train accuracy {acc}");
}
