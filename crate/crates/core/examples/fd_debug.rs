use lcpformer::gradcheck::{finite_diff_check, DEFAULT_STEP};
use lcpformer::model::*;
use lcpformer::points::PointCloud;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_cloud(rng: &mut StdRng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
}

fn main() {
    for seed in [9u64, 10, 11, 12, 13] {
        let full = preset("miniature-cls", 3).unwrap();
        let cfg = miniaturize(&full);
        let params = param_init(&cfg, seed);
        let mut rng = StdRng::seed_from_u64(80);
        let cloud = random_cloud(&mut rng, cfg.input_points);
        let flat = named_tensors(&params);
        let cfg2 = cfg.clone();
        let params2 = params.map(&mut |t| t.clone());
        let report = finite_diff_check(&flat, DEFAULT_STEP, move |tape, vars| {
            let mut it = vars.iter().cloned();
            let mounted = params2.map(&mut |_| it.next().unwrap());
            let logits = classification_forward(tape, &cloud, &cfg2, &mounted, 0)
                .map_err(|e| match e { ModelError::Tensor(t) => t, o => panic!("{o}") })?;
            logits.cross_entropy(&[1])
        }).unwrap();
        let mut blocks: Vec<_> = report.blocks.iter().filter(|b| b.max_rel_err > 5e-5).collect();
        blocks.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
        println!("seed {seed}: worst {:.3e}", report.worst());
        for b in blocks.iter().take(4) {
            println!("   {} -> {:.3e}", b.name, b.max_rel_err);
        }
    }
}
