use mtra_core::model::{ToyModel, ToyModelConfig};
use mtra_core::moe::Strategy;
use mtra_core::rng::Rng;
use mtra_core::tasks::{balanced_gate_dataset, standard_tasks};
use mtra_core::train::*;

#[test]
#[ignore]
fn full_pipeline_composite() {
    let t0 = std::time::Instant::now();
    let cfg = ToyModelConfig::default();
    let mut model = ToyModel::<f32>::build(cfg.clone(), 7).unwrap();
    let tasks = standard_tasks();

    let mut sets = Vec::new();
    for task in &tasks {
        let steps = if task.id == 3 { 300 } else { 1500 };
        let tcfg = AdapterTrainConfig { steps, seed: 7, ..Default::default() };
        let (adapters, _) = train_adapter(&model, task, &tcfg).unwrap();
        let mut rng = Rng::new(1000 + task.id as u64);
        let held: Vec<_> = (0..10).map(|_| task.gen_episode(&mut rng)).collect();
        let em = exact_match(&model, &adapters, 2.0, &held).unwrap();
        println!("{}: EM {em:.2} ({:?})", task.name(), t0.elapsed());
        sets.push((task.name().to_string(), adapters));
    }
    model.attach_banks(&sets, 2, 7).unwrap();

    let data = balanced_gate_dataset(&tasks, 50, 70);
    let gcfg = TrainConfig { epochs: 30, mode: LossMode::Top1, seed: 7, ..Default::default() };
    train_gates(&mut model, &data, &gcfg).unwrap();
    let held = balanced_gate_dataset(&tasks, 10, 71);
    let acc = routing_accuracy(&model, &held).unwrap();
    println!("routing accuracy {acc:.3} ({:?})", t0.elapsed());

    // single-task prompt: >= 90% dominant
    let mut rng = Rng::new(505);
    let ep = tasks[0].gen_episode(&mut rng);
    let (gen, trace) = model.generate(&ep.question().to_vec(), 6, Strategy::Loop, 1.0).unwrap();
    let dom = trace.dominant_sequence();
    let frac = dom.iter().filter(|&&d| d == 0).count() as f64 / dom.len() as f64;
    println!("single-task: gen {gen:?} want {:?} dominance {frac:.2}", ep.answer());

    // composite-2 at tau=15
    for tau in [1.0, 15.0, 30.0] {
        let out = model.composite_eval(&[tasks[0].clone(), tasks[1].clone()], Strategy::Loop, tau, 99).unwrap();
        println!("tau={tau}: dominance min {:.2} offsets {:?} entropy {:.3}",
            out.report.min_dominance(), out.report.boundary_offsets, out.trace.mean_weight_entropy());
        for seg in &out.report.segments {
            println!("  seg {} [{},{}) dom {:.2}", seg.name, seg.start, seg.end, seg.dominance);
        }
        println!("  seq {:?}", out.sequence);
        println!("  dom {:?}", out.trace.dominant_sequence());
    }
    // degenerate [t, t]
    let out = model.composite_eval(&[tasks[2].clone(), tasks[2].clone()], Strategy::Loop, 15.0, 99).unwrap();
    println!("[t,t]: dominance min {:.2} offsets {:?}", out.report.min_dominance(), out.report.boundary_offsets);
    println!("total {:?}", t0.elapsed());
}
