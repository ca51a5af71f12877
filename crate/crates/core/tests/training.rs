use vitlm::data::{generate, Dataset};
use vitlm::model::{Arm, Model, ModelConfig};
use vitlm::trainer::{cross_entropy, label_smoothing_ce, lr_at, steps_per_epoch, train, TrainConfig};
use vitlm::Tensor;

fn micro_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, warmup_epochs: 1, batch_size: 8, ..TrainConfig::default() }
}

#[test]
fn same_seed_trains_bitwise_identically() {
    let data = generate(2, 48, 3, 8).unwrap();
    let run = || {
        let mut m = Model::<f32>::build(&ModelConfig::micro(Arm::Baseline), None, 1).unwrap();
        let r = train(&mut m, &data, &micro_cfg(3), |_| {}).unwrap();
        let params: Vec<Vec<f32>> = m.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        (r, params)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn single_sample_is_memorized() {
    let full = generate(5, 10, 3, 8).unwrap();
    let one = Dataset { train: full.train[..1].to_vec(), val: full.train[..1].to_vec(), ..full };
    let cfg = TrainConfig {
        epochs: 150,
        warmup_epochs: 0,
        base_lr: 3e-3,
        batch_size: 1,
        flip: false,
        label_smoothing: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut m = Model::<f32>::build(&ModelConfig::micro(Arm::Baseline), None, 0).unwrap();
    let r = train(&mut m, &one, &cfg, |_| {}).unwrap();
    let (first, last) = (&r.rows[0], r.last().unwrap());
    assert!(last.train_loss < first.train_loss, "{} → {}", first.train_loss, last.train_loss);
    assert!(last.val_loss < 0.1, "val loss {}", last.val_loss);
    assert_eq!(last.val_top1, 1.0);
}

#[test]
fn report_follows_the_schedule() {
    let data = generate(2, 48, 3, 8).unwrap();
    let cfg = micro_cfg(4);
    let mut m = Model::<f32>::build(&ModelConfig::micro(Arm::PlusMlp), None, 1).unwrap();
    let mut seen = 0;
    let r = train(&mut m, &data, &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    let spe = steps_per_epoch(data.train.len(), cfg.batch_size);
    assert_eq!(r.lrs.len(), spe * cfg.epochs);
    let (total, warm) = (spe * cfg.epochs, spe * cfg.warmup_epochs);
    // The rate for update `s` is taken at `s + 1`, so no update runs at zero.
    for (s, &lr) in r.lrs.iter().enumerate() {
        assert_eq!(lr, lr_at(s + 1, total, warm, cfg.base_lr, cfg.min_lr));
    }
    assert!(r.lrs[0] > 0.0);
    assert!((lr_at(total, total, warm, cfg.base_lr, cfg.min_lr) - cfg.min_lr).abs() < 1e-15);
    assert_eq!(r.best_val_top1, r.rows.iter().map(|x| x.val_top1).fold(0.0, f64::max));
    let csv = r.to_csv();
    assert_eq!(csv.lines().next(), Some("epoch,lr,train_loss,val_loss,val_top1"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn smoothed_and_plain_losses_differ_when_eps_positive() {
    let logits = Tensor::<f64>::new(&[2, 3], vec![2.0, -1.0, 0.5, 0.0, 3.0, -2.0]).unwrap();
    let t = [0, 1];
    let plain = cross_entropy(&logits, &t).unwrap().item();
    assert_eq!(label_smoothing_ce(&logits, &t, 0.0).unwrap().item(), plain);
    assert!(label_smoothing_ce(&logits, &t, 0.1).unwrap().item() > plain);
}
