use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use convdrop::blocks::BlockConfig;
use convdrop::data::{synth_dataset, SynthParams};
use convdrop::diagnostics::random_input;
use convdrop::layers::Conv2d;
use convdrop::rng::keyed_rng;
use convdrop::trainer::{cross_entropy, Sgd, TrainConfig};
use convdrop::{Block, DrawId, DropLevel, DropSpec, Network, NetworkSpec, Parameterized, Shape};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    // (batch, channels, side, groups)
    for &(n, ch, side, groups) in &[(32, 16, 16, 1), (32, 32, 8, 1), (32, 64, 8, 8), (64, 16, 32, 1)] {
        let mut layer = Conv2d::<f32>::new(ch, ch, 3, 1, 1, groups).unwrap();
        layer.init_he(&mut keyed_rng(1, DrawId::default()));
        let x = random_input(Shape::new(n, ch, side, side), 2).unwrap().cast::<f32>();
        let g = random_input(layer.output_shape(x.shape()).unwrap(), 3).unwrap().cast::<f32>();
        let flops = 2 * n * ch * ch / groups * 9 * side * side;
        group.throughput(Throughput::Elements(flops as u64));
        let id = format!("n{n}_c{ch}_s{side}_g{groups}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| {
            b.iter(|| layer.forward(black_box(x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("backward", &id), &x, |b, x| {
            b.iter(|| layer.backward(black_box(x), black_box(&g)).unwrap())
        });
    }
    group.finish();
}

fn blocks(c: &mut Criterion) {
    let mut group = c.benchmark_group("block_train_step");
    let channel = DropSpec::new(DropLevel::Channel, 0.1).unwrap();
    let configs = [
        ("traditional", BlockConfig::traditional(32).with_drop(channel.clone())),
        ("proposed", BlockConfig::proposed(32).with_drop(channel.clone())),
        ("residual", BlockConfig::residual(32).with_drop(DropSpec::new(DropLevel::Layer, 0.2).unwrap())),
        (
            "bottleneck_p8",
            BlockConfig::bottleneck(64, 8, Some(4)).with_drop(DropSpec::new(DropLevel::Path, 0.25).unwrap()),
        ),
    ];
    for (name, cfg) in configs {
        let mut block = Block::<f32>::from_seed(&cfg, 1).unwrap();
        let x = random_input(Shape::new(32, cfg.channels, 8, 8), 4).unwrap().cast::<f32>();
        let g = random_input(block.output_shape(x.shape()).unwrap(), 5).unwrap().cast::<f32>();
        let mut step = 0u64;
        group.bench_function(name, |b| {
            b.iter(|| {
                step += 1;
                block.forward_train(black_box(&x), DrawId::new(0, step, 0)).unwrap();
                block.backward(black_box(&g)).unwrap()
            })
        });
    }
    group.finish();
}

fn network_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("network_sgd_step");
    group.sample_size(20);
    for preset in ["vgg-micro", "wrn-micro", "resnext-micro"] {
        let mut spec = NetworkSpec::preset(preset).unwrap();
        spec.input_size = 8;
        let mut net = Network::<f32>::build(&spec, 1).unwrap();
        let data = synth_dataset(&SynthParams { size: 8, ..SynthParams::new(64, 10, 1) }).unwrap();
        let idx: Vec<usize> = (0..64).collect();
        let (x, y) = data.batch::<f32>(&idx).unwrap();
        let cfg = TrainConfig::default();
        let mut sgd = Sgd::<f32>::new();
        let mut step = 0u64;
        group.bench_function(preset, |b| {
            b.iter(|| {
                step += 1;
                let logits = net.forward_train(&x, DrawId::new(0, step, 0)).unwrap();
                let (_, grad) = cross_entropy(&logits, &y).unwrap();
                net.zero_grad();
                net.backward(&grad).unwrap();
                sgd.step(&mut net, &cfg, 0.01);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, blocks, network_step);
criterion_main!(benches);
