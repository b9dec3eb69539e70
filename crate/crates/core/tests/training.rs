use flmm_core::datasets::{synth_shapes, SynthConfig};
use flmm_core::heads::{Heads, HeadsConfig};
use flmm_core::host::{ToyLmm, ToyLmmConfig};
use flmm_core::training::{fit_prepared, prepare_sample, TrainConfig, TrainMode};

// Same settings as the acceptance overfit run, cut to its first 50 steps.
#[test]
fn overfit_loss_moving_average_strictly_falls() {
    let host_cfg = ToyLmmConfig::default();
    let host = ToyLmm::new(host_cfg.clone()).unwrap();
    let samples = synth_shapes(0, 20, &SynthConfig::default()).unwrap();
    let mut heads = Heads::new(HeadsConfig::desk(host_cfg, 0).unwrap()).unwrap();
    let data: Vec<_> = samples
        .iter()
        .map(|s| prepare_sample(&host, &heads, s, None, false).unwrap())
        .collect();
    let cfg = TrainConfig {
        lr: 2e-3,
        w_bce: 0.2,
        batch_size: 20,
        epochs: 1000,
        max_steps: Some(50),
        mode: TrainMode::DecoderOnly,
        ..TrainConfig::default()
    };
    let rep = fit_prepared(&mut heads, &data, &cfg, |_| {}).unwrap();
    let loss: Vec<f64> = rep.logs.iter().map(|l| l.total).collect();
    assert_eq!(loss.len(), 50);
    let ma: Vec<f64> = loss.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] < w[0], "moving average rose at step {}: {} -> {}", i + 11, w[0], w[1]);
    }
}
