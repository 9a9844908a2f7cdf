use std::path::Path;

use samora_cli::config::RunConfig;
use samora_cli::runner::{generate_data, restore_run};
use samora_core::autodiff::Graph;
use samora_core::checkpoint::Checkpoint;
use samora_core::train::sample_sequence;

#[test]
#[ignore]
fn probe_per_layer_routing() {
    let ckpt_path = std::env::var("CKPT").unwrap();
    let ckpt = Checkpoint::read(Path::new(&ckpt_path)).unwrap();
    let cfg: RunConfig = serde_json::from_value(ckpt.manifest.config.clone()).unwrap();
    let tasks = generate_data(&cfg).unwrap();
    let (store, model) = restore_run(&cfg, &ckpt).unwrap();

    let n = cfg.adapter.n_experts;
    let n_layers = model.routed_layers().len();
    let mut sums = vec![vec![vec![0.0f64; n]; n_layers]; tasks.len()];
    let mut counts = vec![vec![0usize; n_layers]; tasks.len()];
    for (ti, task) in tasks.iter().enumerate() {
        for sample in &task.val {
            let (tokens, _) = sample_sequence(sample);
            let mut g = Graph::eval();
            let fwd = model.forward(&mut g, &store, &tokens, Some(sample.task_id)).unwrap();
            for (li, rec) in fwd.layers.iter().enumerate() {
                let gates = g.value(rec.gates.unwrap());
                let t_len = gates.shape()[1];
                for col in 0..t_len {
                    for e in 0..n {
                        sums[ti][li][e] += gates.at2(e, col);
                    }
                }
                counts[ti][li] += t_len;
            }
        }
    }
    for (li, _) in model.routed_layers().iter().enumerate() {
        println!("layer {li}");
        for (ti, task) in tasks.iter().enumerate() {
            let c = counts[ti][li] as f64;
            let mean: Vec<String> =
                sums[ti][li].iter().map(|s| format!("{:.3}", s / c)).collect();
            println!("  {:<8} [{}]", task.spec.name, mean.join(", "));
        }
    }
    let pooled = |ti: usize| -> Vec<f64> {
        let mut v = vec![0.0; n];
        let mut tot = 0.0;
        for li in 0..n_layers {
            for e in 0..n {
                v[e] += sums[ti][li][e];
            }
            tot += counts[ti][li] as f64;
        }
        v.iter().map(|s| s / tot).collect()
    };
    for a in 0..tasks.len() {
        for b in a + 1..tasks.len() {
            let (pa, pb) = (pooled(a), pooled(b));
            let tv = 0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
            println!("tv {} vs {} = {:.4}", tasks[a].spec.name, tasks[b].spec.name, tv);
        }
    }
}
