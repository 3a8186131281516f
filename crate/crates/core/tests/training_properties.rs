use proptest::prelude::*;
use span::datagen::{self, SampleStream};
use span::network::{self, ModelConfig, SpanModel};
use span::numerics::{ParamStore, ParamTensor};
use span::training::{self, EpochMetrics, EpochRunner, LrSchedule, OptimizerState, ScheduleEvent, TrainConfig};

fn tiny_model() -> SpanModel {
    SpanModel::new(ModelConfig { feature_depth: 4, attention_depth: 4, layers: 2, ..ModelConfig::default() }).unwrap()
}

fn tiny_fit() -> training::FitResult {
    let cfg =
        TrainConfig { batch_size: 2, steps_per_epoch: 3, max_epochs: 2, initial_lr: 1e-3, ..TrainConfig::default() };
    let val = datagen::fixed_set(2, 16, 3).unwrap();
    training::fit(tiny_model(), SampleStream::new(1, 16).unwrap(), &val, &cfg).unwrap()
}

#[test]
fn fitting_is_bit_reproducible() {
    let a = tiny_fit();
    let b = tiny_fit();
    assert_eq!(a.history.to_text(), b.history.to_text());
    assert!(a.step_losses.iter().zip(&b.step_losses).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.best == b.best);
    assert_eq!(a.step_losses.len(), 6);
}

#[test]
fn constrained_kernel_stays_projected_during_training() {
    let fit = tiny_fit();
    for model in [&fit.best, &fit.last] {
        let k = model.constrained_kernel();
        let center = k.len() / 2;
        assert_eq!(k[center], -1.0);
        let rest: f64 = k.iter().enumerate().filter(|&(i, _)| i != center).map(|(_, v)| v).sum();
        assert!((rest - 1.0).abs() <= 1e-9, "{rest}");
    }
}

#[test]
fn frozen_front_end_is_never_updated() {
    let before = tiny_model();
    let fit = tiny_fit();
    for (a, b) in before.store().iter().zip(fit.last.store().iter()) {
        if !a.is_trainable() {
            assert_eq!(a.values(), b.values(), "{}", a.name());
        }
    }
    let srm = fit.last.store().find("srm.0").unwrap();
    assert_eq!(fit.last.store().values(srm), &network::SRM_SECOND_ORDER[..]);
}

#[test]
fn first_adam_step_moves_each_weight_by_the_rate() {
    let mut store = ParamStore::new();
    let id = store.add(ParamTensor::new("w", vec![3], vec![0.5, -0.5, 2.0]).unwrap());
    store.get_mut(id).grad_mut().copy_from_slice(&[0.3, -4.0, 1e-3]);
    let mut state = OptimizerState::new(&store);
    training::adam_step(&mut store, &mut state, 0.01).unwrap();
    let moved: Vec<f64> = store.values(id).iter().zip([0.5, -0.5, 2.0]).map(|(a, b)| a - b).collect();
    for (m, expected) in moved.iter().zip([-0.01, 0.01, -0.01]) {
        assert!((m - expected).abs() < 1e-6, "{moved:?}");
    }
    store.get_mut(id).grad_mut()[0] = f64::NAN;
    assert!(training::adam_step(&mut store, &mut state, 0.01).is_err());
}

struct Scripted(Vec<f64>);

impl EpochRunner for Scripted {
    fn run_epoch(&mut self, epoch: usize, _lr: f64) -> span::Result<EpochMetrics> {
        Ok(EpochMetrics { train_loss: self.0[epoch], val_loss: self.0[epoch], val: Default::default() })
    }
}

#[test]
fn non_finite_loss_aborts_with_numeric_error() {
    let cfg = TrainConfig { max_epochs: 5, ..TrainConfig::default() };
    let err = training::fit_with(&mut Scripted(vec![0.5, f64::NAN, 0.4, 0.3, 0.2]), &cfg).unwrap_err();
    assert_eq!(err.exit_code(), span::EXIT_NUMERIC);
}

#[test]
fn history_text_has_one_row_per_epoch() {
    let cfg = TrainConfig { max_epochs: 4, ..TrainConfig::default() };
    let h = training::fit_with(&mut Scripted(vec![0.9, 0.5, 0.7, 0.4]), &cfg).unwrap();
    let text = h.to_text();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(training::HISTORY_HEADER));
    assert_eq!(lines.count(), 4);
    assert_eq!(h.best().unwrap().epoch, 3);
}

proptest! {
    #[test]
    fn schedule_respects_floor_and_patience(
        losses in prop::collection::vec(0.0f64..1.0, 1..200),
        lr_patience in 1usize..6,
        extra in 0usize..20,
        lr_exp in -6.0f64..-2.0,
    ) {
        let cfg = TrainConfig {
            initial_lr: 10f64.powf(lr_exp),
            lr_patience,
            stop_patience: lr_patience + extra,
            max_epochs: losses.len(),
            ..TrainConfig::default()
        };
        let mut schedule = LrSchedule::new(&cfg);
        let mut since_best = 0usize;
        let mut best = f64::INFINITY;
        for &loss in &losses {
            let before = schedule.lr();
            let event = schedule.observe(loss);
            prop_assert!(schedule.lr() >= cfg.lr_floor);
            if loss < best {
                best = loss;
                since_best = 0;
                prop_assert_eq!(event, ScheduleEvent::Improved);
            } else {
                since_best += 1;
            }
            match event {
                ScheduleEvent::Halved => {
                    prop_assert!(since_best.is_multiple_of(lr_patience));
                    prop_assert_eq!(schedule.lr(), (before / 2.0).max(cfg.lr_floor));
                }
                ScheduleEvent::Stop => {
                    prop_assert!(since_best >= cfg.stop_patience);
                    break;
                }
                _ => prop_assert_eq!(schedule.lr(), before),
            }
        }
    }
}
