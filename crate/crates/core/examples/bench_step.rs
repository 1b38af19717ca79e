use std::time::Instant;
use trivol_core::model::{build_embedder, build_rcnn_baseline, ModelSpec};
use trivol_core::tensor::{backward, Tensor};
use trivol_core::miner::pairwise_distances;
use trivol_core::losses::{triplet_margin_loss, TripletLossConfig};

fn main() {
    let dims = ModelSpec::tensor_dims((32, 32, 16));
    let spec = ModelSpec::rtcnn_embedder(dims);
    let embedder = build_embedder::<f32>(&spec, 7).unwrap();
    let n = 32 * 16 * 32 * 32;
    let data: Vec<f32> = (0..n).map(|i| (i % 97) as f32 / 97.0).collect();
    let x = Tensor::from_vec(vec![32, 1, 16, 32, 32], data).unwrap();

    // warmup + timed forward
    let t0 = Instant::now();
    let e = embedder.forward(&x).unwrap();
    println!("embedder forward: {:?}", t0.elapsed());

    let t1 = Instant::now();
    let dm = pairwise_distances(&e).unwrap();
    let triplets: Vec<(usize,usize,usize)> = (0..16).map(|i| (i, (i+2)%32, (i+17)%32)).collect();
    let loss = triplet_margin_loss(&dm, &triplets, &TripletLossConfig::default()).unwrap();
    let grads = backward(&loss).unwrap();
    println!("loss+backward: {:?} ({} grads)", t1.elapsed(), grads.len());

    let rspec = ModelSpec::rcnn_baseline(dims);
    let rcnn = build_rcnn_baseline::<f32>(&rspec, 7).unwrap();
    let t2 = Instant::now();
    let p = rcnn.forward(&x).unwrap();
    println!("baseline forward: {:?} out {:?}", t2.elapsed(), p.shape());
}
