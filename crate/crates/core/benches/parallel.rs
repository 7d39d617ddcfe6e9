//! Sequential vs data-parallel execution of the batch kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neurossm::model::{Network, NetworkConfig};
use neurossm::parallel::map_range;
use neurossm::quant::{ptq, IntegerNetwork};
use neurossm::train::conv_grads;
use neurossm::ExecPolicy;

const POLICIES: [(&str, ExecPolicy); 2] = [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)];

fn inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

fn batch_gradients(c: &mut Criterion) {
    let cfg = NetworkConfig::tiny(1, 32, 16, 2, 10, 256);
    let net = Network::<f32>::init(&cfg, 0).unwrap();
    let xs = inputs(32, 256, 1);
    let refs: Vec<&[f32]> = xs.iter().map(|v| &v[..]).collect();
    let ys: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let mut g = c.benchmark_group("conv_grads_batch32");
    g.sample_size(10);
    for (name, policy) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| conv_grads(&net, &refs, &ys, policy).unwrap()));
    }
    g.finish();
}

fn integer_inference(c: &mut Criterion) {
    let cfg = NetworkConfig::tiny(1, 32, 16, 2, 10, 256);
    let net = Network::<f32>::init(&cfg, 0).unwrap();
    let calib = inputs(256, 256, 2);
    let q = ptq(&net, &Default::default(), &calib, ExecPolicy::Parallel).unwrap();
    let inet = IntegerNetwork::extract(&q).unwrap();
    let xs = inputs(32, 256, 3);
    let mut g = c.benchmark_group("integer_classify_32");
    g.sample_size(10);
    for (name, policy) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_range(policy, xs.len(), |i| inet.classify(&xs[i]).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, batch_gradients, integer_inference);
criterion_main!(benches);
