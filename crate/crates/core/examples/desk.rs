//! Trains the desk preset on a procedural exemplar and prints held-out
//! statistics after every epoch.
//!
//! `cargo run --release --example desk -- out_dir [key=value ...]`

use std::time::Instant;

use cooctex::config::RunConfig;
use cooctex::dataset::build_from_image;
use cooctex::evaluation::{condition_fidelity, stability_loop, stability_report};
use cooctex::training::{init_checkpoint, train, TrainOptions};
use cooctex::{imageio, procedural};

fn main() -> cooctex::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().map(Into::into);
    let mut run = RunConfig::desk();
    for pair in args {
        let (k, v) = pair.split_once('=').expect("key=value");
        run.set(k, v)?;
    }
    let exemplar = procedural::graded(256, 1024, run.seed);
    let clock = Instant::now();
    let dataset = build_from_image(&imageio::to_rgb8(exemplar.view()), "graded", &run.dataset_config())?;
    println!("dataset: {} train, {} test, {:.1}s", dataset.train.len(), dataset.test.len(), clock.elapsed().as_secs_f64());
    let held_out: Vec<_> = dataset.test.iter().map(|s| s.tensor.clone()).collect();
    let ckpt = init_checkpoint(dataset.stats.clone(), &run)?;
    let f0 = condition_fidelity(&ckpt, &held_out, 7)?;
    println!("epoch -: matched {:.4} shuffled {:.4}", f0.matched, f0.shuffled);
    let (ckpt, _) = train(ckpt, &dataset, &run.train, run.seed, &TrainOptions { out_dir }, |epoch, ckpt, log| {
        let f = condition_fidelity(ckpt, &held_out, 7).unwrap();
        println!(
            "epoch {epoch}: cooc {:.4} matched {:.4} shuffled {:.4} ratio {:.2} drop {:.2} t {:.0}s",
            log.epoch_mean(epoch, |r| r.cooc).unwrap(),
            f.matched,
            f.shuffled,
            f.ratio(),
            f0.matched / f.matched,
            clock.elapsed().as_secs_f64()
        );
        if (epoch + 1) % 5 == 0 {
            let traces: Vec<_> = held_out.iter().take(10).enumerate().map(|(i, c)| stability_loop(ckpt, c, i as u64, 10).unwrap()).collect();
            println!("  drift {:.3}", stability_report(&traces).unwrap().drift);
        }
    })?;
    let traces = held_out
        .iter()
        .take(10)
        .enumerate()
        .map(|(i, c)| stability_loop(&ckpt, c, i as u64, 10))
        .collect::<cooctex::Result<Vec<_>>>()?;
    let report = stability_report(&traces)?;
    println!("stability means {:?} drift {:.3}", report.means, report.drift);
    Ok(())
}
