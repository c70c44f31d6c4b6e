use ldistill_core::distill::{rank_weigh, RankWeights};
use ldistill_core::generator::{DirectImage, SuperRes};
use ldistill_core::rng::{standard_normal_tensor, stream, Stream};
use ldistill_core::schedule::NoiseSchedule;
use ldistill_core::scores::{GaussianOracle, Target};
use ldistill_core::trainer::{Trainer, TrainerConfig};
use ldistill_core::{ScoreTensor, Shape};
use proptest::prelude::*;

fn symmetric_target(shape: Shape, seed: u64) -> ScoreTensor {
    let x = standard_normal_tensor(shape, &mut stream(seed, Stream::Init));
    x.add(&x.flip_horizontal()).unwrap().scale(0.5)
}

fn distance(theta: &[f64], mu: &ScoreTensor) -> f64 {
    theta.iter().zip(mu.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[test]
fn smoothed_distance_to_the_target_never_rises_after_warmup() {
    let shape = Shape::new(4, 16, 16);
    let mu = symmetric_target(shape, 42);
    let g = DirectImage::new(shape, 0, SuperRes::Bilinear);
    let cfg = TrainerConfig {
        iterations: 2000,
        learning_rate: 1e-2,
        grid: None,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(g, cfg, 0).unwrap();
    let mut oracle = GaussianOracle {
        target: Target::Image(mu.clone()),
        var0: 1.0,
    };
    let schedule = NoiseSchedule::default();
    let alpha = 2.0 / 101.0;
    let mut ema = distance(&trainer.params().theta, &mu);
    let start = ema;
    let mut rises = Vec::new();
    while !trainer.is_done() {
        trainer.step(&mut oracle, &schedule).unwrap();
        let prev = ema;
        ema += alpha * (distance(&trainer.params().theta, &mu) - ema);
        if trainer.iteration() > 200 && ema > prev {
            rises.push((trainer.iteration(), ema - prev));
        }
    }
    assert!(rises.is_empty(), "smoothed distance rose at {rises:?}");
    assert!(ema < 0.75 * start, "{start} -> {ema}");
}

fn singular_values(x: &ScoreTensor) -> Vec<f64> {
    let s = x.shape();
    let m = nalgebra::DMatrix::from_row_slice(s.channels, s.plane(), x.data());
    let mut v: Vec<f64> = (&m * m.transpose()).symmetric_eigenvalues().iter().map(|e| e.max(0.0).sqrt()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

proptest! {
    #[test]
    fn rank_weigh_norm_matches_weighted_singular_values(
        seed in any::<u64>(),
        hw in 2usize..10,
        w in prop::collection::vec(0.0f64..=1.0, 3),
    ) {
        let mut w = w;
        w.sort_by(|a, b| b.total_cmp(a));
        let weights = RankWeights::new([vec![1.0], w].concat()).unwrap();
        let x = standard_normal_tensor(Shape::new(4, hw, hw + 1), &mut stream(seed, Stream::Noise));
        let y = rank_weigh(&x, &weights).unwrap();
        let want = singular_values(&x)
            .iter()
            .zip(weights.as_slice())
            .map(|(s, w)| (s * w) * (s * w))
            .sum::<f64>()
            .sqrt();
        prop_assert!((y.norm() - want).abs() <= 1e-8 * (1.0 + want));
    }
}
