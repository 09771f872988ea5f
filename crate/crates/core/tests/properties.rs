//! Property tests over the public API.

use convdrop::blocks::{census, StageGeometry};
use convdrop::diagnostics::random_input;
use convdrop::layers::{BatchNorm, Conv2d};
use convdrop::rng::keyed_rng;
use convdrop::{Block, BlockConfig, DrawId, DropLevel, DropMask, DropSpec, Mode, Shape, Tensor};
use proptest::prelude::*;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=3, 1usize..=3, 1usize..=4, 1usize..=3, 0usize..=2, 0usize..=4, any::<u64>())
        .prop_map(|(g, ci, co, k, stride, pad, extra, seed)| (g, g * ci, g * co, k, stride, pad, k + extra, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The input gradient is the adjoint of the forward map:
    /// `<conv(x), g> == <x, conv^T(g)>`.
    #[test]
    fn conv_backward_is_adjoint((groups, c_in, c_out, k, stride, pad, side, seed) in conv_case()) {
        let mut conv = Conv2d::<f64>::new(c_in, c_out, k, stride, pad, groups).unwrap();
        conv.init_he(&mut keyed_rng(seed, DrawId::default()));
        let x = random_input(Shape::new(2, c_in, side, side), seed ^ 1).unwrap();
        let y = conv.forward(&x).unwrap();
        let g = random_input(y.shape(), seed ^ 2).unwrap();
        let (gx, gw) = conv.backward(&x, &g).unwrap();
        let lhs = dot(&y, &g);
        prop_assert!((lhs - dot(&x, &gx)).abs() <= 1e-9 * (1.0 + lhs.abs()));
        // Linear in the kernel as well: <y, g> == <W, dL/dW>.
        prop_assert!((lhs - dot(&conv.weight, &gw)).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    /// Convolution is linear in its input.
    #[test]
    fn conv_is_linear((groups, c_in, c_out, k, stride, pad, side, seed) in conv_case(), a in -2.0f64..2.0) {
        let mut conv = Conv2d::<f64>::new(c_in, c_out, k, stride, pad, groups).unwrap();
        conv.init_he(&mut keyed_rng(seed, DrawId::default()));
        let x = random_input(Shape::new(1, c_in, side, side), seed ^ 3).unwrap();
        let z = random_input(Shape::new(1, c_in, side, side), seed ^ 4).unwrap();
        let mut mix = z.clone();
        mix.axpy(a, &x).unwrap();
        let mut want = conv.forward(&z).unwrap();
        want.axpy(a, &conv.forward(&x).unwrap()).unwrap();
        let got = conv.forward(&mix).unwrap();
        for (p, q) in got.data().iter().zip(want.data()) {
            prop_assert!((p - q).abs() <= 1e-10 * (1.0 + q.abs()));
        }
    }

    /// Train-mode BN with unit affine output has zero batch mean and biased
    /// variance `s2 / (s2 + eps)` per channel.
    #[test]
    fn batchnorm_train_moments(n in 2usize..5, c in 1usize..4, side in 1usize..4, scale in 0.1f64..10.0, seed: u64) {
        let mut bn = BatchNorm::<f64>::new(c).unwrap();
        let x = random_input(Shape::new(n, c, side, side), seed).unwrap().scale(scale);
        let y = bn.forward_train(&x).unwrap();
        let m = (n * side * side) as f64;
        for ch in 0..c {
            let xs: Vec<f64> = (0..n).flat_map(|i| x.plane(i, ch).to_vec()).collect();
            let ys: Vec<f64> = (0..n).flat_map(|i| y.plane(i, ch).to_vec()).collect();
            let mu = xs.iter().sum::<f64>() / m;
            let s2 = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
            let ym = ys.iter().sum::<f64>() / m;
            let yv = ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / m;
            prop_assert!(ym.abs() <= 1e-9);
            prop_assert!((yv - s2 / (s2 + bn.eps)).abs() <= 1e-6);
        }
    }

    /// Masks zero dropped units and scale survivors by `1 / (1 - p)`.
    #[test]
    fn mask_values_are_zero_or_scaled(level_ix in 0usize..2, p in 0.0f64..0.9, seed: u64) {
        let level = [DropLevel::Neuron, DropLevel::Channel][level_ix];
        let x = random_input(Shape::new(2, 3, 2, 2), seed).unwrap();
        let spec = DropSpec::new(level, p).unwrap().with_stream(seed);
        let units = if level == DropLevel::Neuron { 12 } else { 3 };
        let m = DropMask::sample(&spec, 2, units, DrawId::new(0, 1, 0)).unwrap();
        let y = m.apply(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(*a == 0.0 || (a - b / (1.0 - p)).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        prop_assert_eq!(m.kept(), m.gates.iter().filter(|g| **g).count());
    }

    /// Eval mode is deterministic and ignores the draw; train mode with the
    /// same draw reproduces its masks.
    #[test]
    fn block_modes(kind_ix in 0usize..4, p in 0.05f64..0.5, seed in 0u64..1000) {
        let cfg = match kind_ix {
            0 => BlockConfig::traditional(4).with_drop(DropSpec::new(DropLevel::Channel, p).unwrap()),
            1 => BlockConfig::proposed(4).with_drop(DropSpec::new(DropLevel::Neuron, p).unwrap()),
            2 => BlockConfig::residual(4).with_drop(DropSpec::new(DropLevel::Layer, p).unwrap()),
            _ => BlockConfig::bottleneck(8, 2, Some(2)).with_drop(DropSpec::new(DropLevel::Path, p).unwrap()),
        };
        let mut block = Block::<f64>::from_seed(&cfg, seed).unwrap();
        let x = random_input(Shape::new(3, cfg.channels, 3, 3), seed).unwrap();
        let a = block.forward(&x, Mode::Train, DrawId::new(1, 2, 0)).unwrap();
        let b = block.forward(&x, Mode::Train, DrawId::new(1, 2, 0)).unwrap();
        prop_assert_eq!(a.data(), b.data());
        // A closed layer gate skips the transform, so warm every BN up.
        for step in 0..24 {
            block.forward(&x, Mode::Train, DrawId::new(2, step, 0)).unwrap();
        }
        let e1 = block.forward(&x, Mode::Eval, DrawId::new(0, 0, 0)).unwrap();
        let e2 = block.forward(&x, Mode::Eval, DrawId::new(5, 6, 7)).unwrap();
        prop_assert_eq!(e1.data(), e2.data());
    }

    /// Finer dropout levels gate at least as many components.
    #[test]
    fn census_is_ordered(layers in 1usize..6, paths_log in 0u32..5, width in 1usize..9, w in 1usize..9, h in 1usize..9) {
        let c = census(StageGeometry { layers, paths: 1 << paths_log, width, w, h }).unwrap();
        prop_assert!(c.neuron >= c.channel && c.channel >= c.path && c.path >= c.layer);
        prop_assert_eq!(c.layer, layers);
    }
}
