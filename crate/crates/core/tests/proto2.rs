use mtra_core::model::{ToyModel, ToyModelConfig};
use mtra_core::tasks::standard_tasks;
use mtra_core::train::*;
use mtra_core::rng::Rng;

fn probe(steps: usize, lr: f64, which: usize, seed: u64) {
    let model = ToyModel::<f32>::build(ToyModelConfig::default(), 1).unwrap();
    let task = &standard_tasks()[which];
    let t0 = std::time::Instant::now();
    let tcfg = AdapterTrainConfig { steps, batch_size: 8, lr, seed, ..Default::default() };
    let (adapters, curve) = train_adapter(&model, task, &tcfg).unwrap();
    let mut rng = Rng::new(999);
    let held: Vec<_> = (0..20).map(|_| task.gen_episode(&mut rng)).collect();
    let ad_ce = answer_ce(&model, Some((&adapters, 2.0)), &held).unwrap();
    let em = exact_match(&model, &adapters, 2.0, &held).unwrap();
    let q: Vec<f64> = [steps/4, steps/2, 3*steps/4, steps-1].iter().map(|&i| curve[i]).collect();
    println!("{} steps={steps} lr={lr} seed={seed}: CE {ad_ce:.3} EM {em:.2} curve {q:?} {:?}", task.name(), t0.elapsed());
}

#[test]
#[ignore]
fn probe_all_seeds() {
    for seed in [0u64, 7, 42] {
        for which in 0..4 {
            probe(1000, 5e-3, which, seed);
        }
    }
}
