use lcpformer::config::default_run_config;
use lcpformer::model::Task;
use lcpformer::training::{render_metrics_csv, train};
use std::time::Instant;

fn main() {
    let mut run = default_run_config(Task::Classification);
    run.train.epochs = 8;
    run.seed = 0;
    let start = Instant::now();
    let out = train(&run).unwrap();
    println!("{}", render_metrics_csv(&out.records));
    println!("8 epochs in {:.1}s -> {:.2}s/epoch", start.elapsed().as_secs_f64(), start.elapsed().as_secs_f64()/8.0);
    println!("params: best epoch {} best val oa {:.4}", out.best_epoch, out.best_val.oa);
}
