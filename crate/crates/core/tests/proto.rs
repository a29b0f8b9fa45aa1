// Temporary prototyping harness; will be replaced by the real suites.
use mtra_core::model::{ToyModel, ToyModelConfig};
use mtra_core::tasks::{balanced_gate_dataset, standard_tasks};
use mtra_core::train::*;
use mtra_core::rng::Rng;

#[test]
#[ignore]
fn proto_gate_training() {
    let t0 = std::time::Instant::now();
    let cfg = ToyModelConfig::default();
    let mut model = ToyModel::<f32>::build(cfg.clone(), 1).unwrap();
    let tasks = standard_tasks();
    let mut rng = Rng::new(2);
    let sets: Vec<(String, Vec<_>)> = tasks
        .iter()
        .map(|t| (t.name().to_string(), init_adapters(&model, 8, 16.0, &mut rng)))
        .collect();
    model.attach_banks(&sets, 1, 3).unwrap();

    let train = balanced_gate_dataset(&tasks, 40, 10);
    let held = balanced_gate_dataset(&tasks, 10, 11);
    let acc0 = routing_accuracy(&model, &held).unwrap();
    let curve = train_gates(&mut model, &train, &TrainConfig {
        epochs: 10, batch_size: 8, lr: 5e-2, mode: LossMode::Top1, beta: 0.1, seed: 5,
    }).unwrap();
    let acc = routing_accuracy(&model, &held).unwrap();
    println!("gate training: acc {acc0:.3} -> {acc:.3}; first loss {:.4} last {:.4}; {:?}",
        curve.first().unwrap().total, curve.last().unwrap().total, t0.elapsed());
}

#[test]
#[ignore]
fn proto_adapter_training() {
    let cfg = ToyModelConfig::default();
    let model = ToyModel::<f32>::build(cfg.clone(), 1).unwrap();
    let tasks = standard_tasks();
    for task in &tasks {
        let t0 = std::time::Instant::now();
        let tcfg = AdapterTrainConfig { steps: 200, batch_size: 8, lr: 2e-3, ..Default::default() };
        let (adapters, curve) = train_adapter(&model, task, &tcfg).unwrap();
        let mut rng = Rng::new(999);
        let held: Vec<_> = (0..20).map(|_| task.gen_episode(&mut rng)).collect();
        let base_ce = answer_ce(&model, None, &held).unwrap();
        let ad_ce = answer_ce(&model, Some((&adapters, 2.0)), &held).unwrap();
        let em = exact_match(&model, &adapters, 2.0, &held).unwrap();
        println!("{}: base CE {base_ce:.3} adapter CE {ad_ce:.3} EM {em:.2} (first {:.3} last {:.3}) {:?}",
            task.name(), curve.first().unwrap(), curve.last().unwrap(), t0.elapsed());
    }
}

#[test]
#[ignore]
fn proto_grad_check() {
    let t0 = std::time::Instant::now();
    let cfg = ToyModelConfig::default();
    let mut model = ToyModel::<f64>::build(cfg.clone(), 1).unwrap();
    let tasks = standard_tasks();
    let mut rng = Rng::new(2);
    let sets: Vec<(String, Vec<_>)> = tasks
        .iter()
        .map(|t| (t.name().to_string(), init_adapters(&model, 8, 16.0, &mut rng)))
        .collect();
    model.attach_banks(&sets, 2, 3).unwrap();
    let sample = mtra_core::tasks::GateSample {
        tokens: tasks[0].gen_episode(&mut Rng::new(4)).tokens,
        label: 0,
    };
    for mode in [LossMode::Top1, LossMode::TopK(2)] {
        let report = grad_check(&model, &sample, mode, 0.1, 1e-3, 64, 9).unwrap();
        println!("{:?}: max rel err {:.2e} checked {} skipped {} {:?}",
            mode, report.max_rel_err, report.checked, report.skipped, t0.elapsed());
    }
}
