//! Train and evaluate the two-pass detector on synthetic phantoms.
//!
//! `cargo run --release --example phantom_experiment -- [train val test epochs0 epochs1 seed] [key=value ...]`

use std::time::Instant;

use autocontext::cascade::{detect, train_pipeline, PipelineConfig, Scan, TrainEvent};
use autocontext::evalkit::{aggregate_metrics, format_table, localisation_errors};
use autocontext::phantom::{generate_phantom, PhantomSpec};
use autocontext::seeding;

fn main() -> autocontext::Result<()> {
    let (sets, nums): (Vec<String>, Vec<String>) = std::env::args().skip(1).partition(|a| a.contains('='));
    let args: Vec<usize> = nums.iter().map(|a| a.parse().expect("integer argument")).collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (n_train, n_val, n_test) = (arg(0, 100), arg(1, 15), arg(2, 20));
    let seed = arg(5, 1) as u64;
    let spec = PhantomSpec::default();
    let scans = |name: &str, n: usize| -> autocontext::Result<Vec<Scan>> {
        (0..n)
            .map(|i| {
                let (volume, landmarks, _) = generate_phantom(&spec, &mut seeding::indexed(seed, name, i as u64))?;
                Ok(Scan { volume, landmarks })
            })
            .collect()
    };
    let t = Instant::now();
    let (train, val, test) = (scans("train", n_train)?, scans("val", n_val)?, scans("test", n_test)?);
    eprintln!("phantoms: {:.1}s", t.elapsed().as_secs_f64());

    let mut cfg = PipelineConfig::default();
    cfg.base_filters = 4;
    cfg.schedule0.epochs = arg(3, 12);
    cfg.schedule1.epochs = arg(4, 24);
    cfg.schedule0.batch_size = 8;
    cfg.schedule1.batch_size = 8;
    cfg.crop_mm = 20.0;
    cfg.tile1 = 16;
    for kv in &sets {
        let (k, v) = kv.split_once('=').unwrap();
        assert!(cfg.set(k, v)?, "unknown key {k}");
    }
    let t = Instant::now();
    let mut log = |e: TrainEvent<'_>| match e {
        TrainEvent::Stage(s) => eprintln!("[{:7.1}s] stage {s}", t.elapsed().as_secs_f64()),
        TrainEvent::Epoch(p, s) => eprintln!(
            "[{:7.1}s] pass {p} epoch {} train {:.4e} val {:.4e} ({} patches)",
            t.elapsed().as_secs_f64(),
            s.epoch,
            s.train_loss,
            s.val_loss,
            s.patches
        ),
    };
    let out = train_pipeline(&train, &val, &cfg, seed, Some(&mut log))?;
    let pipe = out.pipeline;

    let t = Instant::now();
    let (mut raw0, mut cor0, mut fin) = (Vec::new(), Vec::new(), Vec::new());
    let mut certainty = Vec::new();
    for s in &test {
        let d = detect(&s.volume, &pipe)?;
        certainty.extend(d.pass0.raw.iter().map(|l| l.certainty));
        raw0.push(localisation_errors(&d.pass0.raw, &s.landmarks));
        cor0.push(localisation_errors(&d.pass0.corrected, &s.landmarks));
        fin.push(localisation_errors(&d.landmarks, &s.landmarks));
    }
    eprintln!("mean pass-0 certainty {:.3e}", certainty.iter().sum::<f64>() / certainty.len() as f64);
    eprintln!("detect: {:.1}s for {} scans", t.elapsed().as_secs_f64(), test.len());
    let rows = [
        ("Pass 0", aggregate_metrics(&raw0, 4.0)?),
        ("Pass 0 + Atlas Correction", aggregate_metrics(&cor0, 4.0)?),
        ("Pass 1 + Atlas Correction", aggregate_metrics(&fin, 4.0)?),
    ];
    print!("{}", format_table(&rows));
    for (label, errs) in [("pass 0", &raw0), ("final", &fin)] {
        let mut sums: Vec<(String, f64, usize)> = Vec::new();
        for (name, e) in errs.iter().flatten() {
            match sums.iter_mut().find(|s| &s.0 == name) {
                Some(s) => {
                    s.1 += e;
                    s.2 += 1;
                }
                None => sums.push((name.clone(), *e, 1)),
            }
        }
        let parts: Vec<String> = sums.iter().map(|(n, s, c)| format!("{n} {:.1}", s / *c as f64)).collect();
        println!("{label}: {}", parts.join(", "));
    }
    Ok(())
}
