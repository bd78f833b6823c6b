use interformer::train::{train, LrDecay, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let decay_every: usize = args[3].parse().unwrap();
    let decay_factor: f64 = args[4].parse().unwrap();
    let dropout: f64 = args[5].parse().unwrap();
    let mut cfg = TrainConfig::desk_default();
    cfg.seed = seed;
    cfg.task.seed = seed;
    cfg.task.samples = 12800;
    cfg.block.dropout_p = dropout;
    cfg.steps = 3000;
    cfg.lr = lr;
    cfg.lr_decay = (decay_every > 0).then_some(LrDecay { every: decay_every, factor: decay_factor });
    cfg.eval_every = 100;
    cfg.target_val_acc = Some(0.95);
    let t0 = Instant::now();
    let out = train(&cfg).unwrap();
    let lc = &out.report.loss_curve;
    print!(
        "seed={seed} lr={lr} decay=({decay_every},{decay_factor}) drop={dropout}: steps_run={} val={:.3} final_loss={:.4} wall={:.0}s curve: ",
        out.report.steps_run, out.report.final_val_accuracy, out.report.final_train_loss,
        t0.elapsed().as_secs_f64()
    );
    for i in (0..lc.len()).step_by((lc.len() / 10).max(1)) {
        print!("{:.3} ", lc[i]);
    }
    println!();
}
