use std::fs::{self, OpenOptions};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nicetrans::evaluation::{
    difference_map, evaluate_pair, records_csv, report, FieldChoice, LabeledPair,
};
use nicetrans::field_algebra::{njd_percent, warp, AffineTransform, Interpolation};
use nicetrans::losses::ncc_loss;
use nicetrans::network::{load_checkpoint, register as run_network, save_checkpoint, Checkpoint, ModelConfig};
use nicetrans::training::{
    loss_curve, parse_sweep_values, smoothed, sweep as run_sweep, train as run_training, Dataset, SweepAxis,
    TrainOptions,
};
use nicetrans::volumes::{
    load_volume, save_field, save_labels, save_volume, synth_pair, SyntheticPairSpec,
};
use nicetrans::Error;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataMode, RunConfig};
use crate::data::{load_labeled, load_pairs, parse_shape, preprocess, preprocess_labeled, Manifest, ManifestEntry};
use crate::{EvaluateArgs, RegisterArgs, RunArgs, SweepArgs, SynthArgs, TrainArgs};

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn affine_text(a: &AffineTransform) -> String {
    a.matrix
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let shape = parse_shape(&args.shape)?;
    create_dir(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut entries = Vec::with_capacity(args.n);
    for i in 0..args.n {
        let id = format!("pair_{i:03}");
        let spec = SyntheticPairSpec::randomized(
            rng.next_u64(),
            shape,
            args.max_rotation.to_radians(),
            args.max_translation,
            args.max_scale,
            args.deform_amp,
            args.smoothness,
        );
        let pair = synth_pair(&spec).with_context(|| format!("generating {id}"))?;
        let dir = args.out.join(&id);
        create_dir(&dir)?;
        save_volume(&pair.fixed, dir.join("fixed.nii.gz"))?;
        save_volume(&pair.moving, dir.join("moving.nii.gz"))?;
        save_labels(&pair.labels_fixed, dir.join("labels_fixed.nii.gz"))?;
        save_labels(&pair.labels_moving, dir.join("labels_moving.nii.gz"))?;
        save_field(&pair.truth.field, dir.join("truth_field.nii.gz"))?;
        fs::write(dir.join("truth_affine.txt"), affine_text(&pair.truth.affine))?;
        let rel = |f: &str| Path::new(&id).join(f);
        entries.push(ManifestEntry {
            id: id.clone(),
            fixed: rel("fixed.nii.gz"),
            moving: rel("moving.nii.gz"),
            labels_fixed: Some(rel("labels_fixed.nii.gz")),
            labels_moving: Some(rel("labels_moving.nii.gz")),
            truth_field: Some(rel("truth_field.nii.gz")),
            truth_affine: Some(rel("truth_affine.txt")),
            spec: Some(spec),
        });
    }
    Manifest { seed: Some(args.seed), pairs: entries }.save(&args.out)?;
    println!("wrote {} pairs to {}", args.n, args.out.display());
    Ok(())
}

fn resolve_run(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if args.no_affine {
        if args.affine_only {
            bail!("--affine-only and --no-affine are mutually exclusive");
        }
        let m = &cfg.train.model;
        let mut model = ModelConfig::with_steps(0, m.levels()).with_variant(m.variant);
        model.window_size = m.window_size;
        cfg.train.model = model;
    }
    if args.affine_only {
        cfg.train.affine_only = true;
    }
    cfg.resolve()
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let Some(dir) = &cfg.data.dir else {
        bail!("no training data: set data.dir in the config or pass --data");
    };
    let pairs = load_pairs(dir)?;
    if pairs.is_empty() {
        return Err(Error::NoPairs.into());
    }
    Ok(match cfg.data.mode {
        DataMode::Pairs => Dataset::Pairs(pairs.into_iter().map(|(_, f, m)| (f, m)).collect()),
        DataMode::Images => Dataset::Images(pairs.into_iter().flat_map(|(_, f, m)| [f, m]).collect()),
    })
}

fn load_validation(cfg: &RunConfig) -> Result<Vec<LabeledPair>> {
    match &cfg.data.validation_dir {
        Some(dir) => {
            let mut v = load_labeled(dir)?;
            v.truncate(cfg.train.validation_pairs);
            Ok(v)
        }
        None => Ok(Vec::new()),
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_run(&args.run)?;
    create_dir(&cfg.out)?;
    cfg.write(&cfg.out.join("config.toml"))?;
    let dataset = load_dataset(&cfg)?;
    let validation = load_validation(&cfg)?;
    let resume = args
        .resume
        .as_ref()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let log_path = cfg.out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let t = Instant::now();
    let result = run_training(
        &cfg.train,
        &dataset,
        TrainOptions {
            validation: &validation,
            resume,
            checkpoint_dir: Some(&cfg.out),
            log: Some(&mut log),
        },
    )?;
    let final_path = cfg.out.join("final.ckpt");
    save_checkpoint(&final_path, &result.checkpoint)?;
    let curve = loss_curve(&result.log);
    let smooth = smoothed(&curve, 50);
    match (smooth.first(), smooth.last()) {
        (Some(a), Some(b)) => println!(
            "trained to iteration {} in {:.1}s; smoothed loss {a:.6} -> {b:.6}; checkpoint {}",
            result.checkpoint.iteration,
            t.elapsed().as_secs_f64(),
            final_path.display()
        ),
        _ => println!("iteration {}; checkpoint {}", result.checkpoint.iteration, final_path.display()),
    }
    Ok(())
}

fn checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn choice(affine_only: bool) -> FieldChoice {
    if affine_only {
        FieldChoice::Affine
    } else {
        FieldChoice::Final
    }
}

pub fn register(args: &RegisterArgs) -> Result<()> {
    let ck = checkpoint(&args.checkpoint)?;
    let fixed = load_volume(&args.fixed).with_context(|| format!("loading {}", args.fixed.display()))?;
    let moving = load_volume(&args.moving).with_context(|| format!("loading {}", args.moving.display()))?;
    let (fixed, moving) = if args.no_preprocess {
        (fixed, moving)
    } else {
        let target = args.shape.as_deref().map(parse_shape).transpose()?;
        let p = preprocess(&fixed, &moving, target)?;
        (p.fixed, p.moving)
    };
    let t = Instant::now();
    let r = run_network(&ck.params, &fixed, &moving)?;
    let runtime = t.elapsed().as_secs_f64();
    let field = r.field(choice(args.affine_only))?;
    let warped = if args.affine_only {
        warp(&moving, field, Interpolation::Linear)?
    } else {
        r.warped.clone()
    };
    create_dir(&args.out)?;
    save_volume(&fixed, args.out.join("fixed_input.nii.gz"))?;
    save_volume(&moving, args.out.join("moving_input.nii.gz"))?;
    save_volume(&warped, args.out.join("warped.nii.gz"))?;
    save_field(field, args.out.join("field.nii.gz"))?;
    save_volume(&difference_map(&warped, &fixed)?, args.out.join("difference.nii.gz"))?;
    fs::write(args.out.join("affine.txt"), affine_text(&r.affine))?;
    let line = format!(
        "ncc_before={:.6} ncc_after={:.6} njd_percent={:.6} runtime_s={runtime:.3}",
        ncc_loss(&moving, &fixed, &Default::default())?,
        ncc_loss(&warped, &fixed, &Default::default())?,
        njd_percent(field),
    );
    fs::write(args.out.join("report.txt"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let ck = checkpoint(&args.checkpoint)?;
    let pairs = load_labeled(&args.data)?;
    let target = args.shape.as_deref().map(parse_shape).transpose()?;
    let group = args.group.clone().unwrap_or_else(|| {
        args.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let mut records = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let pair = if args.no_preprocess { pair.clone() } else { preprocess_labeled(pair, target)? };
        let (rec, _) = evaluate_pair(&ck.params, &pair, choice(args.affine_only))
            .with_context(|| format!("evaluating {}", pair.id))?;
        records.push(rec);
    }
    create_dir(&args.out)?;
    fs::write(args.out.join("eval.csv"), records_csv(&records))?;
    let grouped: Vec<_> = records.iter().map(|r| (group.clone(), r.clone())).collect();
    let table = report(&grouped)?;
    fs::write(args.out.join("summary.csv"), table.to_csv())?;
    fs::write(args.out.join("summary.txt"), table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn default_values(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Steps => "0:3,1:3,2:3,0:4,1:4,2:4",
        SweepAxis::Lambda => "0,1e-5,1e-4,1e-3",
        SweepAxis::Variant => "baseline,trans_encoder,trans_decoder,trans_all",
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let axis: SweepAxis = args.axis.parse()?;
    let values = parse_sweep_values(axis, args.values.as_deref().unwrap_or(default_values(axis)))?;
    let cfg = resolve_run(&args.run)?;
    create_dir(&cfg.out)?;
    cfg.write(&cfg.out.join("config.toml"))?;
    let dataset = load_dataset(&cfg)?;
    let eval_dir = cfg.data.validation_dir.as_ref().or(cfg.data.dir.as_ref()).expect("checked by load_dataset");
    let mut eval = load_labeled(eval_dir)?;
    eval.truncate(cfg.train.validation_pairs.max(1));
    let report = run_sweep(&cfg.train, &values, &dataset, &eval)?;
    fs::write(cfg.out.join("sweep.txt"), report.to_text())?;
    fs::write(cfg.out.join("sweep.csv"), report.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}
