//! One function per subcommand.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gesturenet::archspec::{builtin, builtin_specs, ArchSpec, InputSig, Variant, FRAGMENT_FRAMES, MEAN_POOL_WINDOW};
use gesturenet::dataio::{gen_synthetic, load_dataset, save_dataset, Dataset};
use gesturenet::gradsuite::{render_table, run_suite, SuiteOptions};
use gesturenet::inference::{evaluate, predict_sequence};
use gesturenet::metrics::{read_track, write_probability_csv, write_track, JaccardReport, PredictionTrack};
use gesturenet::model::{build_model, BuildOptions, Model};
use gesturenet::trainer::{load_checkpoint, save_checkpoint, train_with_progress, Checkpoint, Precision};
use gesturenet::{Error, Result, Scalar};

use crate::config::{manifest, require, EvalRun, GenConfig, TrainRun};

pub fn gendata(cfg: &GenConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?;
    let ds = gen_synthetic(&cfg.synth)?;
    save_dataset(out, &ds)?;
    println!("wrote {}", out.display());
    print_summary(&ds);
    Ok(())
}

fn print_summary(ds: &Dataset) {
    println!("sequences={}", ds.sequences.len());
    println!("frames={}", ds.frames());
    let hist: Vec<String> = ds.class_histogram().iter().map(|n| n.to_string()).collect();
    println!("class_histogram={}", hist.join(","));
}

/// Builtin name, or an inline architecture string plus its variant. A bare
/// family name such as `tpool_mean` means its desk-sized builtin.
pub fn resolve_arch(name: &str, variant: Option<&str>) -> Result<(ArchSpec, Variant)> {
    if let Some(b) = builtin(name).or_else(|| builtin(&format!("{name}_desk"))) {
        if let Some(v) = variant {
            let v = Variant::parse(v)?;
            if v != b.variant {
                return Err(Error::Usage(format!("{name} is a {} model, not {}", b.variant, v)));
            }
        }
        return Ok((b.spec, b.variant));
    }
    if !name.contains('(') && !name.contains('@') {
        let names: Vec<String> = builtin_specs().into_keys().collect();
        return Err(Error::Usage(format!(
            "unknown architecture '{name}'; builtin architectures: {}",
            names.join(", ")
        )));
    }
    let spec: ArchSpec = name.parse()?;
    let v = variant.ok_or_else(|| Error::Usage("inline architectures need --variant".into()))?;
    Ok((spec, Variant::parse(v)?))
}

fn default_frames(v: Variant) -> usize {
    match v {
        Variant::Single => 1,
        Variant::TPool | Variant::TConv => MEAN_POOL_WINDOW,
        _ => FRAGMENT_FRAMES,
    }
}

fn class_count(sets: &[&Dataset]) -> usize {
    sets.iter()
        .map(|d| {
            let declared = d.provenance("classes").and_then(|c| c.parse::<usize>().ok()).map_or(0, |c| c + 1);
            d.n_classes().max(declared)
        })
        .max()
        .unwrap_or(0)
        .max(2)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::at_path(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn train(run: &TrainRun) -> Result<()> {
    run.train.validate()?;
    let arch = require(&run.arch, "arch")?;
    let (spec, variant) = resolve_arch(arch, run.variant.as_deref())?;
    let out = require(&run.out, "out")?;
    let train_ds = load_dataset(require(&run.data, "data")?)?;
    let val_ds = load_dataset(require(&run.val, "val")?)?;
    let first = train_ds
        .sequences
        .first()
        .ok_or_else(|| Error::Data("training set has no sequences".into()))?;
    let (c, h, w) = first.frame_shape();
    let input = InputSig {
        channels: c,
        frames: spec.input.map_or_else(|| default_frames(variant), |s| s.frames),
        height: h,
        width: w,
    };
    let n_classes = class_count(&[&train_ds, &val_ds]);
    let opts = BuildOptions {
        seed: run.train.seed,
        input: Some(input),
        activate_spatial: run.activate_spatial,
        skeleton: false,
    };
    fs::create_dir_all(out).map_err(|e| Error::at_path(out, e))?;
    match run.train.precision {
        Precision::F32 => train_as::<f32>(run, &spec, variant, n_classes, &opts, &train_ds, &val_ds, out),
        Precision::F64 => train_as::<f64>(run, &spec, variant, n_classes, &opts, &train_ds, &val_ds, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_as<F: Scalar>(
    run: &TrainRun,
    spec: &ArchSpec,
    variant: Variant,
    n_classes: usize,
    opts: &BuildOptions,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out: &Path,
) -> Result<()> {
    let mut model: Model<F> = build_model(spec, n_classes, variant, opts)?;
    eprintln!(
        "{} ({}), {} classes, {} parameters",
        spec,
        variant,
        n_classes,
        model.param_count()
    );
    let outcome = train_with_progress(&mut model, train_ds, val_ds, &run.train, &mut |r| {
        eprintln!(
            "{} epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}",
            r.phase.name(),
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss
        )
    })?;
    let settings = run.to_pairs();
    // The output location is not part of the model.
    let stored: Vec<_> = settings.iter().filter(|(k, _)| k != "out").cloned().collect();
    save_checkpoint(out.join("checkpoint.fwgc"), &Checkpoint::new(&model, &outcome, stored))?;
    let mut csv = Vec::new();
    outcome.history.write_csv(&mut csv)?;
    write_file(&out.join("history.csv"), &csv)?;
    let h = &outcome.history;
    let results = vec![
        ("arch_resolved".to_string(), spec.to_string()),
        ("variant".to_string(), variant.to_string()),
        ("input".to_string(), model.input.to_string()),
        ("classes".to_string(), n_classes.to_string()),
        ("parameters".to_string(), model.param_count().to_string()),
        ("steps".to_string(), h.steps.to_string()),
        ("best_epoch".to_string(), h.best_epoch.to_string()),
        (
            "stopped_at".to_string(),
            h.stopped_at.map_or_else(|| "budget".to_string(), |e| e.to_string()),
        ),
        (
            "best_val_loss".to_string(),
            h.train_records().nth(h.best_epoch).map_or(f64::NAN, |r| r.val_loss).to_string(),
        ),
    ];
    write_file(&out.join("manifest.txt"), manifest("train", &settings, &results).as_bytes())?;
    for (k, v) in &results {
        println!("{k}={v}");
    }
    Ok(())
}

fn load_model(run: &EvalRun) -> Result<Model<f32>> {
    let ck: Checkpoint<f32> = load_checkpoint(require(&run.checkpoint, "checkpoint")?)?;
    if let Some(a) = &run.arch {
        let (spec, variant) = resolve_arch(a, None).or_else(|_| resolve_arch(a, Some(ck.variant.name())))?;
        let stored: ArchSpec = ck.arch.parse()?;
        if spec.terms != stored.terms || variant != ck.variant {
            return Err(Error::Data(format!(
                "checkpoint holds {} ({}), not {a}",
                ck.arch, ck.variant
            )));
        }
    }
    ck.model()
}

/// File holding the prediction track of sequence `i`.
pub fn track_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("seq{i:04}.fwgt"))
}

fn read_tracks(dir: &Path, n: usize) -> Result<Vec<PredictionTrack>> {
    (0..n)
        .map(|i| {
            let p = track_path(dir, i);
            read_track(BufReader::new(File::open(&p).map_err(|e| Error::at_path(&p, e))?))
        })
        .collect()
}

pub fn eval(run: &EvalRun) -> Result<()> {
    let out = require(&run.out, "out")?;
    let ds = load_dataset(require(&run.data, "data")?)?;
    let (report, tracks) = match (&run.checkpoint, &run.tracks) {
        (Some(_), None) => evaluate(&load_model(run)?, &ds, run.absent, run.batch_size)?,
        (None, Some(dir)) => {
            let tracks = read_tracks(dir, ds.sequences.len())?;
            let classes = tracks.iter().map(|t| t.classes).max().unwrap_or(0).max(ds.n_classes());
            let hard: Vec<Vec<u16>> = tracks.iter().map(|t| t.hard_labels()).collect();
            let truth: Vec<_> = ds.sequences.iter().map(|s| (s.labels.as_slice(), s.annotations.as_slice())).collect();
            let pred: Vec<&[u16]> = hard.iter().map(|h| h.as_slice()).collect();
            (JaccardReport::score(&truth, &pred, classes, run.absent)?, tracks)
        }
        _ => return Err(Error::Usage("eval needs exactly one of --checkpoint and --tracks".into())),
    };
    fs::create_dir_all(out).map_err(|e| Error::at_path(out, e))?;
    write_file(&out.join("report.txt"), report.render().as_bytes())?;
    let rows: Vec<_> = tracks
        .iter()
        .zip(&ds.sequences)
        .enumerate()
        .map(|(i, (t, s))| (i, t, Some(s.labels.as_slice())))
        .collect();
    write_probability_csv(create(&out.join("probabilities.csv"))?, &rows)?;
    let results = vec![
        ("jaccard_avg".to_string(), report.jaccard_avg.to_string()),
        ("precision_macro".to_string(), report.pr.precision_macro.to_string()),
        ("recall_macro".to_string(), report.pr.recall_macro.to_string()),
        ("error_rate_isolated".to_string(), report.error_rate_isolated.to_string()),
    ];
    write_file(&out.join("manifest.txt"), manifest("eval", &run.to_pairs(), &results).as_bytes())?;
    for (k, v) in &results {
        println!("{k}={v}");
    }
    Ok(())
}

pub fn predict(run: &EvalRun) -> Result<()> {
    let model = load_model(run)?;
    let out = require(&run.out, "out")?;
    let ds = load_dataset(require(&run.data, "data")?)?;
    let picked: Vec<usize> = match run.sequence {
        Some(i) if i >= ds.sequences.len() => {
            return Err(Error::Data(format!("sequence {i} out of range ({} sequences)", ds.sequences.len())))
        }
        Some(i) => vec![i],
        None => (0..ds.sequences.len()).collect(),
    };
    let tracks = picked
        .iter()
        .map(|&i| predict_sequence(&model, &ds.sequences[i], run.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<_> = picked.iter().zip(&tracks).map(|(&i, t)| (i, t, None)).collect();
    write_probability_csv(create(out)?, &rows)?;
    if let Some(dir) = &run.tracks {
        fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
        for (&i, t) in picked.iter().zip(&tracks) {
            let p = track_path(dir, i);
            let mut w = create(&p)?;
            write_track(&mut w, t)?;
        }
    }
    let frames: usize = tracks.iter().map(|t| t.frames).sum();
    println!("wrote {} rows to {}", frames, out.display());
    Ok(())
}

/// Returns whether every row passed.
pub fn gradcheck(opts: &SuiteOptions) -> Result<bool> {
    let rows = run_suite(opts)?;
    print!("{}", render_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        println!("all {} checks passed", rows.len());
    } else {
        println!("{failed} of {} checks failed", rows.len());
    }
    Ok(failed == 0)
}

pub fn archs() {
    for (name, b) in builtin_specs() {
        println!("{name:<18} {:<10} {}", b.variant.name(), b.spec);
    }
}
