//! Quick training probe that prints one line per probe.
//!
//! ```text
//! P=11 cargo run --release --example desk_probe -- \
//!     n_id alpha d_embed batch steps lr n_ctx wd seed heads probe_interval
//! ```
//!
//! Depth is fixed at 2. `P` defaults to 11.

use mimalloc::MiMalloc;
use modicl::trainer::{train_with, DataConfig, RunSpec, TrainConfig};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: &str| args.get(i).cloned().unwrap_or(d.to_string());
    let n_id: usize = get(1, "4").parse().unwrap();
    let alpha: f64 = get(2, "0.6").parse().unwrap();
    let d_embed: usize = get(3, "128").parse().unwrap();
    let batch: usize = get(4, "64").parse().unwrap();
    let steps: u64 = get(5, "2000").parse().unwrap();
    let lr: f64 = get(6, "1e-3").parse().unwrap();
    let n_ctx: usize = get(7, "16").parse().unwrap();
    let wd: f64 = get(8, "0.1").parse().unwrap();
    let seed: u64 = get(9, "0").parse().unwrap();
    let heads: usize = get(10, "4").parse().unwrap();
    let interval: u64 = get(11, "250").parse().unwrap();
    let p: u32 = std::env::var("P").ok().and_then(|v| v.parse().ok()).unwrap_or(11);

    let data = DataConfig { p, n_id, alpha, n_ctx, task_seed: seed, input_seed: seed };
    let tc = TrainConfig {
        lr,
        weight_decay: wd,
        steps,
        batch_size: batch,
        probe_interval: interval,
        probe_sequences: 64,
        seed,
        ..Default::default()
    };
    let spec = RunSpec::new(data, 2, heads, d_embed, tc);
    let t0 = std::time::Instant::now();
    let out = train_with(&spec, None, |p| {
        println!(
            "{:>6} {:.2e} loss {:.3} tr {:.3} ood {:.3} {:.3}  {:.1}s",
            p.step,
            p.lr,
            p.train_loss,
            p.train_acc_last_shot,
            p.ood_loss.unwrap_or(f64::NAN),
            p.ood_acc_last_shot.unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    println!("best {:?}", out.record.best_step);
}
