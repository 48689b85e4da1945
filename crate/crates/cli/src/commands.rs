use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use poolingvq::aggregation::{compress as compress_seq, WindowSpec};
use poolingvq::codebook::{kmeans_init, InitBuffer};
use poolingvq::data::split;
use poolingvq::formats::{
    encode_features_text, read_checkpoint, read_codebook, read_features, write_checkpoint, write_codebook,
    write_features, Checkpoint,
};
use poolingvq::sweep::{format_row, mean_by_size, SizeSpec, SweepPlan, SWEEP_HEADER};
use poolingvq::train::{evaluate, train, EpochMetrics};
use poolingvq::{Error, PoolStrategy, Result, Rng, TrainingConfig};
use rayon::prelude::*;

use crate::args::{Cli, CompressArgs, EvalArgs, InitCodebookArgs, SplitName, SweepArgs, TrainToyArgs};

macro_rules! say {
    ($cli:expr, $($arg:tt)*) => {
        if !$cli.quiet {
            println!($($arg)*);
        }
    };
}

fn load_config(cli: &Cli) -> Result<TrainingConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainingConfig::from_toml(&fs::read_to_string(path)?)?,
        None => TrainingConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn seed_of(cli: &Cli) -> Result<u64> {
    Ok(load_config(cli)?.seed)
}

pub fn init_codebook(cli: &Cli, a: &InitCodebookArgs) -> Result<()> {
    let seed = seed_of(cli)?;
    let mut buf: Option<InitBuffer> = None;
    for path in &a.inputs {
        let x = read_features(path)?;
        let b = buf.get_or_insert_with(|| InitBuffer::new(x.cols(), a.capacity, seed));
        b.add(&x)?;
    }
    let buf = buf.ok_or_else(|| Error::InvalidArgument("no input files".into()))?;
    let fit = kmeans_init(&buf, a.size, a.iters, &mut Rng::new(seed))?;
    write_codebook(&a.out, &fit.codebook)?;
    say!(
        cli,
        "p={} D={} frames={} inertia={:.6} iterations={}",
        fit.codebook.size(),
        fit.codebook.dim(),
        buf.len(),
        fit.inertia,
        fit.iterations
    );
    Ok(())
}

pub fn compress(cli: &Cli, a: &CompressArgs) -> Result<()> {
    let x = read_features(&a.input)?;
    let cb = read_codebook(&a.codebook)?;
    let spec = WindowSpec::new(a.window, a.stride)?;
    let c = compress_seq(&x, &cb, spec)?;
    if a.text {
        fs::write(&a.out, encode_features_text(&c.features))?;
    } else {
        write_features(&a.out, &c.features)?;
    }
    if let Some(plan_path) = &a.emit_plan {
        fs::write(plan_path, c.plan.to_tsv())?;
    }
    let hist = c.plan.histogram();
    let total = hist.iter().sum::<usize>().max(1) as f64;
    let mut shares = String::new();
    for (s, n) in PoolStrategy::ALL.iter().zip(hist) {
        let _ = write!(shares, " {s}={:.1}%", 100.0 * n as f64 / total);
    }
    say!(cli, "original_length={}", c.source_length);
    say!(cli, "compressed_length={}", c.features.rows());
    say!(cli, "ratio={:.2}", c.ratio());
    say!(cli, "strategies:{shares}");
    Ok(())
}

fn metrics_table(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(EpochMetrics::TSV_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&m.to_tsv());
        out.push('\n');
    }
    out
}

pub fn train_toy(cli: &Cli, a: &TrainToyArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    let data = cfg.dataset()?;
    let out = train(&data, &cfg)?;
    fs::write(&a.metrics, metrics_table(&out.metrics))?;
    let ck = Checkpoint {
        config: cfg.clone(),
        model: out.model,
        optimizer: out.optimizer,
    };
    write_checkpoint(&a.out, &ck)?;
    if let Some(last) = out.metrics.last() {
        say!(
            cli,
            "epochs={} train_loss={:.6} val_loss={:.6} val_acc={:.4} val_f1={:.4}",
            last.epoch,
            last.train_loss,
            last.val_loss,
            last.val_acc,
            last.val_f1
        );
    }
    let test = split(&data, cfg.split)?.test;
    if !test.is_empty() {
        let ev = evaluate(&ck.model, test)?;
        say!(cli, "test_acc={:.4} test_f1={:.4}", ev.accuracy, ev.macro_f1);
    }
    Ok(())
}

pub fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let data = cfg.dataset()?;
    let s = split(&data, cfg.split)?;
    let samples = match a.split {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
    };
    let ev = evaluate(&ck.model, samples)?;
    println!("samples\t{}", samples.len());
    println!("accuracy\t{:.6}", ev.accuracy);
    println!("macro_f1\t{:.6}", ev.macro_f1);
    println!("loss\t{:.6}", ev.mean_loss);
    println!("confusion (rows: true, cols: predicted)");
    for row in &ev.confusion {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        println!("{}", cells.join("\t"));
    }
    Ok(())
}

pub fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let base = load_config(cli)?;
    let sizes = a.sizes.iter().map(|s| s.parse::<SizeSpec>()).collect::<Result<Vec<_>>>()?;
    let seeds = if a.seeds.is_empty() {
        (0..5).map(|i| base.seed + i).collect()
    } else {
        a.seeds.clone()
    };
    let plan = SweepPlan::new(base, &sizes, &seeds)?;
    say!(
        cli,
        "mean_len={:.1} max_len={} cells={}",
        plan.mean_len,
        plan.max_len,
        plan.cells.len()
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<_> = pool.install(|| {
        plan.cells
            .par_iter()
            .map(|cell| (cell.clone(), plan.run_cell(cell)))
            .collect()
    });

    write_sweep_table(&a.out, &results)?;
    for (cell, r) in &results {
        if let Err(e) = r {
            eprintln!("cell p={} seed={} failed: {e}", cell.p, cell.seed);
        }
    }
    let means = mean_by_size(&results);
    for (p, m) in &means {
        say!(cli, "p={p}\tmean_val_f1={m:.4}");
    }
    let best = means
        .iter()
        .filter(|(_, m)| m.is_finite())
        .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
    match best {
        Some((p, m)) => {
            println!(
                "best p={p} ({:.1}% of mean length) mean_val_f1={m:.4}",
                100.0 * *p as f64 / plan.mean_len
            );
            Ok(())
        }
        None => Err(Error::InvalidArgument("every sweep cell failed".into())),
    }
}

fn write_sweep_table(path: &Path, results: &[(poolingvq::sweep::SweepCell, Result<poolingvq::sweep::CellResult>)]) -> Result<()> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (cell, r) in results {
        out.push_str(&format_row(cell, r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
