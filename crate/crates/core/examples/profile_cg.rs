use lcpformer::config::default_run_config;
use lcpformer::model::{forward_logits, gradients, mount, param_init, Task};
use lcpformer::synth::{gen_shapes, DatasetSpec};
use lcpformer::tensor::Tape;

fn main() {
    let run = default_run_config(Task::Classification);
    let cfg = run.resolved_model().unwrap();
    let spec = DatasetSpec { task: Task::Classification, classes: 4, samples: 1, points: 512, noise: 0.0, seed: 1 };
    let cloud = gen_shapes(&spec).unwrap().remove(0).cloud;
    let params = param_init(&cfg, 0);
    for _ in 0..3 {
        let tape = Tape::new();
        let mounted = mount(&params, &tape, true);
        let logits = forward_logits(&tape, &cloud, &cfg, &mounted, 0).unwrap();
        let loss = logits.cross_entropy(&[0]).unwrap();
        tape.backward(&loss).unwrap();
        let _ = gradients(&mounted);
    }
}
