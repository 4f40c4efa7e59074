use lcpformer::config::default_run_config;
use lcpformer::model::{forward_logits, gradients, mount, param_init, Task};
use lcpformer::synth::{gen_shapes, DatasetSpec};
use lcpformer::tensor::Tape;
use std::time::Instant;

fn main() {
    let run = default_run_config(Task::Classification);
    let cfg = run.resolved_model().unwrap();
    let spec = DatasetSpec { task: Task::Classification, classes: 4, samples: 1, points: 512, noise: 0.0, seed: 1 };
    let cloud = gen_shapes(&spec).unwrap().remove(0).cloud;
    let params = param_init(&cfg, 0);

    let reps = 40;
    // forward only, constants (eval path)
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let mounted = mount(&params, &tape, false);
        let _ = forward_logits(&tape, &cloud, &cfg, &mounted, 0).unwrap();
    }
    let fwd_const = t0.elapsed().as_secs_f64() / reps as f64;

    // forward requires-grad
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let mounted = mount(&params, &tape, true);
        let _ = forward_logits(&tape, &cloud, &cfg, &mounted, 0).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    // full fwd+bwd+grads
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let mounted = mount(&params, &tape, true);
        let logits = forward_logits(&tape, &cloud, &cfg, &mounted, 0).unwrap();
        let loss = logits.cross_entropy(&[0]).unwrap();
        tape.backward(&loss).unwrap();
        let _ = gradients(&mounted);
    }
    let full = t0.elapsed().as_secs_f64() / reps as f64;

    println!("fwd(const): {:.2} ms", fwd_const * 1e3);
    println!("fwd(grad):  {:.2} ms", fwd * 1e3);
    println!("fwd+bwd:    {:.2} ms", full * 1e3);

    // geometry only
    use lcpformer::points::{farthest_point_sampling, knn};
    let t0 = Instant::now();
    for _ in 0..reps {
        let c = farthest_point_sampling(&cloud, 48, 0).unwrap();
        let _ = knn(&cloud, &c, 16).unwrap();
    }
    println!("fps+knn b1: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
