use lcpformer::config::default_run_config;
use lcpformer::model::Task;
use lcpformer::training::train;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let heads: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(15);
    let mut run = default_run_config(Task::Classification);
    run.train.epochs = epochs;
    run.train.lr = lr;
    if heads > 0 { run.model.heads = heads; }
    let t = Instant::now();
    let out = train(&run).unwrap();
    let last = out.records.last().unwrap();
    println!("lr={lr} heads={heads}: final val_oa={:.3} best={:.3} loss={:.3} ({:.1}s, {:.2}s/ep)",
        last.val.oa, out.best_val.oa, last.train_loss, t.elapsed().as_secs_f64(), t.elapsed().as_secs_f64()/epochs as f64);
}
