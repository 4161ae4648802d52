use bnn_core::binarize::BinaryAlphabet;
use bnn_core::data::{Dataset, SyntheticFrames};
use bnn_core::model_io::{decode, encode, Model};
use bnn_core::network::{BinaryMode, BinaryScheme, Network, NetworkConfig};
use bnn_core::packed::PackedModel;
use bnn_core::trainer::{evaluate, train, TrainOptions};

fn task() -> (Dataset, Dataset) {
    let frames = SyntheticFrames {
        frames: 3000,
        dim: 8,
        classes: 4,
        noise: 1.0,
        seed: 7,
        ..SyntheticFrames::default()
    }
    .generate()
    .unwrap();
    frames.split_holdout(0.2)
}

#[test]
fn baseline_then_binary_weights_survive_packing() {
    let (tr, ho) = task();
    let base = NetworkConfig::sigmoid_mlp(&[8, 32, 32, 32, 4]).unwrap();
    let mut net = Network::init_random(&base, 3).unwrap();
    let opts = TrainOptions {
        max_epochs: 5,
        ..TrainOptions::baseline()
    };
    train(&mut net, &tr, &ho, &opts, |_| {}).unwrap();
    let float_acc = evaluate(&net, &ho).unwrap().accuracy;
    assert!(float_acc > 0.5, "{float_acc}");

    let scheme = BinaryScheme {
        mode: BinaryMode::Weights,
        alphabet: BinaryAlphabet::Signed,
        fix_input: true,
        fix_softmax: true,
    };
    let mut bw = net.derive_binary_config(&scheme.target_config(&base).unwrap()).unwrap();
    let opts = TrainOptions {
        max_epochs: 3,
        ..TrainOptions::binary()
    };
    train(&mut bw, &tr, &ho, &opts, |_| {}).unwrap();

    let packed = PackedModel::from_network(&bw);
    let bytes = encode(&Model::Packed(packed.clone())).unwrap();
    assert!(bytes.len() < encode(&Model::Float(bw.clone())).unwrap().len());
    let back = decode(&bytes).unwrap();
    for i in 0..ho.len() {
        let x = ho.row(i);
        assert_eq!(back.infer(x).unwrap(), bw.predict(x).unwrap());
        assert_eq!(packed.predict_class(x).unwrap(), bw.predict(x).unwrap().argmax());
    }
}
