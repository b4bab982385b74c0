use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmcc::data::{
    binarize_mask, load_dataset, load_netpbm, make_splits, resize, save_dataset, save_netpbm, synth_polyp_dataset,
    to_gray, to_rgb, ResizeMode, Role, SamplePair, SplitKind, SplitPlan,
};
use mmcc::metrics::SetMetrics;
use mmcc::model::{grad_cam, CamLayer, MmccNet};
use mmcc::tensor::Tensor;
use mmcc::training::{
    evaluate, format_table, load_checkpoint, read_run_summaries, run_experiment, save_checkpoint, table_csv,
    table_markdown, write_experiment, EvalReport, ModelSegmenter, Protocol, RunSetup, Segmenter, Trainer,
    TrainingError,
};

use crate::config::{RunConfig, SplitKindName, TrainSection};
use crate::{overlay, CliError, Command, Common};

type Result<T> = std::result::Result<T, CliError>;

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            count,
            difficulty,
        } => synth(&common, count, difficulty),
        Command::Split {
            common,
            data,
            kind,
            folds,
        } => split(&common, &data, kind, folds),
        Command::Train {
            common,
            data,
            split,
            resume,
        } => train(&common, data.as_deref(), split.as_deref(), resume.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            role,
        } => eval(&common, &data, &checkpoint, split.as_deref(), &role),
        Command::Segment {
            checkpoint,
            image,
            mask,
            threshold,
            out,
        } => segment(&checkpoint, &image, mask.as_deref(), threshold, &out),
        Command::Gradcam {
            checkpoint,
            image,
            layer,
            out,
        } => gradcam(&checkpoint, &image, layer, &out),
        Command::Experiment {
            common,
            data,
            split,
            protocol,
        } => experiment(&common, data.as_deref(), split.as_deref(), protocol),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.preset, common.config.as_deref())?;
    cfg.apply(&common.overrides);
    cfg.validate()?;
    Ok(cfg)
}

/// Create the output directory and echo the resolved configuration into it.
fn start(out: &Path, cfg: Option<&RunConfig>) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    if let Some(cfg) = cfg {
        write(&out.join("config.json"), cfg.to_pretty_json())?;
    }
    Ok(())
}

fn input_size(cfg: &RunConfig) -> (usize, usize) {
    (cfg.model.input_size[0], cfg.model.input_size[1])
}

fn load_samples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SamplePair>> {
    match data {
        Some(dir) => Ok(load_dataset(
            dir,
            &cfg.data.source,
            cfg.data.resize.then(|| input_size(cfg)),
        )?),
        None => {
            let s = &cfg.data.synth;
            let (h, w) = match (cfg.data.resize, s.size) {
                (false, Some([h, w])) => (h, w),
                _ => input_size(cfg),
            };
            Ok(synth_polyp_dataset(s.count, h, w, s.seed, s.difficulty)?)
        }
    }
}

fn split_kind(cfg: &RunConfig) -> SplitKind {
    match cfg.data.split.kind {
        SplitKindName::Table1 => SplitKind::Table1,
        SplitKindName::Kfold => SplitKind::Kfold(cfg.data.split.folds),
    }
}

fn ids(samples: &[SamplePair]) -> Vec<&str> {
    samples.iter().map(|s| s.id.as_str()).collect()
}

fn split_file(cfg: &RunConfig, flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| cfg.data.split.file.clone())
}

fn select(samples: &[SamplePair], plan: &SplitPlan, role: Role) -> Vec<SamplePair> {
    samples
        .iter()
        .filter(|s| plan.role_of(&s.id) == Some(role))
        .cloned()
        .collect()
}

fn synth(common: &Common, count: Option<usize>, difficulty: Option<mmcc::data::Difficulty>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(n) = count {
        cfg.data.synth.count = n;
    }
    if let Some(d) = difficulty {
        cfg.data.synth.difficulty = d;
    }
    let samples = load_samples(&cfg, None)?;
    start(&common.out, Some(&cfg))?;
    save_dataset(&common.out, &samples)?;
    println!(
        "wrote {} {} samples to {}",
        samples.len(),
        cfg.data.synth.difficulty,
        common.out.display()
    );
    Ok(())
}

fn split(common: &Common, data: &Path, kind: Option<SplitKindName>, folds: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(k) = kind {
        cfg.data.split.kind = k;
    }
    if let Some(k) = folds {
        cfg.data.split.folds = k;
    }
    let samples = load_dataset(data, &cfg.data.source, None)?;
    let plan = make_splits(&ids(&samples), split_kind(&cfg), cfg.data.split.seed)?;
    start(&common.out, Some(&cfg))?;
    plan.save(common.out.join("split.txt"))?;
    let mut roles: Vec<Role> = plan.assignments.iter().map(|(_, r)| *r).collect();
    roles.sort_by_key(|r| r.to_string());
    roles.dedup();
    let counts: Vec<String> = roles.iter().map(|&r| format!("{r} {}", plan.count(r))).collect();
    println!("{} ids: {}", plan.assignments.len(), counts.join(", "));
    Ok(())
}

fn holdout_plan(cfg: &RunConfig, flag: Option<&Path>, samples: &[SamplePair]) -> Result<SplitPlan> {
    let plan = match split_file(cfg, flag) {
        Some(path) => SplitPlan::load(path)?,
        None => make_splits(&ids(samples), SplitKind::Table1, cfg.data.split.seed)?,
    };
    if plan.fold_count() > 0 {
        return Err(CliError::Usage(
            "training needs a train/val/test split, not folds".into(),
        ));
    }
    Ok(plan)
}

fn train(common: &Common, data: Option<&Path>, split: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolve(common)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = load_checkpoint(path, None)?;
            if let Some(epochs) = common.overrides.epochs {
                t.set_epochs(epochs);
            }
            cfg.model = t.model.config().clone();
            cfg.train = TrainSection::from_plan(&t.plan, t.optimizer.config);
            t
        }
        None => Trainer::new(MmccNet::<f32>::new(&cfg.model)?, cfg.train.optimizer, cfg.train.plan())?,
    };
    let samples = load_samples(&cfg, data)?;
    let plan = holdout_plan(&cfg, split, &samples)?;
    let (train_set, val, test) = (
        select(&samples, &plan, Role::Train),
        select(&samples, &plan, Role::Val),
        select(&samples, &plan, Role::Test),
    );
    if train_set.is_empty() {
        return Err(CliError::Data("the split assigns no loaded sample to train".into()));
    }
    start(&common.out, Some(&cfg))?;
    plan.save(common.out.join("split.txt"))?;
    write(&common.out.join("manifest.txt"), trainer.model.manifest())?;
    let clock = Instant::now();
    while trainer.step_epoch(&train_set, &val)? {
        log_epoch(&trainer, clock);
    }
    log_epoch(&trainer, clock);
    save_checkpoint(&trainer, common.out.join("model.ckpt"))?;
    let (mut model, _, log) = trainer.finish();
    write(&common.out.join("log.csv"), log.to_csv())?;
    if !test.is_empty() {
        let report = evaluate(&mut model, &test, cfg.train.threshold)?;
        write_eval(&common.out, &report)?;
        println!("test dice {:.4} on {} images", report.mean.dice, test.len());
    }
    Ok(())
}

fn log_epoch(trainer: &Trainer, clock: Instant) {
    if let Some(r) = trainer.state.log.epochs.last() {
        let val = r.val_dice.map_or("-".to_string(), |d| format!("{d:.4}"));
        eprintln!(
            "epoch {:>3}  loss {:.4}  train dice {:.4}  val dice {val}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.train_dice,
            clock.elapsed().as_secs_f64()
        );
    }
}

fn write_eval(out: &Path, report: &EvalReport) -> Result<()> {
    write(&out.join("metrics.json"), json(report))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Data(format!("csv: {e}"));
    w.write_record([
        "id",
        "accuracy",
        "precision",
        "recall",
        "dice",
        "iou",
        "hausdorff",
        "auc",
    ])
    .map_err(csv_err)?;
    for (id, m) in &report.per_image {
        let b = m.basic;
        let auc = m.auc.map_or(String::new(), |a| a.to_string());
        w.write_record([
            id.clone(),
            b.accuracy.to_string(),
            b.precision.to_string(),
            b.recall.to_string(),
            b.dice.to_string(),
            b.iou.to_string(),
            m.hausdorff.to_string(),
            auc,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(format!("csv: {e}")))?;
    write(&out.join("per_image.csv"), bytes)
}

fn load_model(checkpoint: &Path) -> Result<MmccNet<f32>> {
    Ok(load_checkpoint(checkpoint, None)?.finish().0)
}

fn eval(common: &Common, data: &Path, checkpoint: &Path, split: Option<&Path>, role: &str) -> Result<()> {
    let cfg = resolve(common)?;
    let role = match role {
        "all" => None,
        r => Some(r.parse::<Role>().map_err(CliError::Usage)?),
    };
    let mut model = load_model(checkpoint)?;
    let [h, w] = model.config().input_size;
    let samples = load_dataset(data, &cfg.data.source, cfg.data.resize.then_some((h, w)))?;
    let samples = match (split_file(&cfg, split), role) {
        (Some(path), Some(role)) => select(&samples, &SplitPlan::load(path)?, role),
        _ => samples,
    };
    if samples.is_empty() {
        return Err(CliError::Data("no samples selected for evaluation".into()));
    }
    let report = evaluate(&mut model, &samples, cfg.train.threshold)?;
    start(&common.out, Some(&cfg))?;
    write_eval(&common.out, &report)?;
    println!(
        "dice {:.4}  iou {:.4}  hdd {:.2}  on {} images",
        report.mean.dice,
        report.mean.iou,
        report.mean.hausdorff,
        samples.len()
    );
    Ok(())
}

/// A `(3, H, W)` image and the model input `(1, 3, h, w)` made from it.
fn model_input(model: &MmccNet<f32>, path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let image = to_rgb(load_netpbm(path)?)?;
    let [h, w] = model.config().input_size;
    let input = resize(&image, h, w, ResizeMode::Bilinear)?;
    let shape = input.shape().to_vec();
    let input = input
        .reshape(vec![1, shape[0], shape[1], shape[2]])
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok((image, input))
}

/// A `(1, 1, h, w)` map brought back to the `(1, H, W)` extent of `image`.
fn to_image_extent(map: &Tensor<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let shape = map.shape();
    let plane = map
        .clone()
        .reshape(vec![1, shape[2], shape[3]])
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(resize(&plane, h, w, ResizeMode::Bilinear)?)
}

fn segment(checkpoint: &Path, image_path: &Path, mask: Option<&Path>, threshold: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    let mut model = load_model(checkpoint)?;
    let (image, input) = model_input(&model, image_path)?;
    let truth = match mask {
        Some(p) => {
            let m = binarize_mask(&to_gray(load_netpbm(p)?)?);
            if m.shape()[1..] != image.shape()[1..] {
                return Err(CliError::Data(format!(
                    "mask {} is {:?}, image is {:?}",
                    p.display(),
                    &m.shape()[1..],
                    &image.shape()[1..]
                )));
            }
            Some(m)
        }
        None => None,
    };
    let prob = to_image_extent(&model.predict(&input)?, &image)?;
    let binary = prob.map(|p| if p as f64 >= threshold { 1.0 } else { 0.0 });
    start(out, None)?;
    save_netpbm(&binary, out.join("mask.pgm"))?;
    save_netpbm(&prob, out.join("probability.pgm"))?;
    save_netpbm(&overlay(&image, &binary, truth.as_ref()), out.join("overlay.ppm"))?;
    let fg = binary.data().iter().filter(|&&v| v > 0.0).count();
    println!("{fg} of {} pixels segmented", binary.numel());
    Ok(())
}

fn gradcam(checkpoint: &Path, image_path: &Path, layer: CamLayer, out: &Path) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    let (image, input) = model_input(&model, image_path)?;
    let cam = to_image_extent(&grad_cam(&mut model, &input, layer)?, &image)?;
    start(out, None)?;
    save_netpbm(&cam, out.join(format!("gradcam_{}.pgm", layer.name())))?;
    println!("wrote {} heatmap", layer.name());
    Ok(())
}

fn experiment(common: &Common, data: Option<&Path>, split: Option<&Path>, protocol: Option<Protocol>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(p) = protocol {
        cfg.experiment.protocol = p;
    }
    let samples = load_samples(&cfg, data)?;
    let plan = match split_file(&cfg, split) {
        Some(path) if cfg.experiment.protocol != Protocol::Kfold5 => Some(SplitPlan::load(path)?),
        _ => None,
    };
    start(&common.out, Some(&cfg))?;
    let train_plan = cfg.train.plan();
    let clock = Instant::now();
    let mut factory = |setup: &RunSetup| -> std::result::Result<Box<dyn Segmenter>, TrainingError> {
        eprintln!(
            "{} run {} ({:.0}s)",
            setup.row,
            setup.run,
            clock.elapsed().as_secs_f64()
        );
        Ok(Box::new(ModelSegmenter::new(
            &cfg.model,
            &train_plan,
            &cfg.train.optimizer,
            setup,
        )?))
    };
    let result = run_experiment(&cfg.experiment, &samples, plan.as_ref(), &mut factory)?;
    write_experiment(&result, &common.out)?;
    print!(
        "{}",
        fs::read_to_string(common.out.join("table.md")).map_err(|e| io_err(&common.out, e))?
    );
    Ok(())
}

fn report(runs: &Path, out: &Path) -> Result<()> {
    let summaries = read_run_summaries(runs)?;
    if summaries.is_empty() {
        return Err(CliError::Data(format!("no summary.json below {}", runs.display())));
    }
    let mut rows: Vec<(String, Vec<SetMetrics>)> = Vec::new();
    for s in summaries {
        match rows.iter_mut().find(|(label, _)| *label == s.label) {
            Some((_, runs)) => runs.push(s.metrics),
            None => rows.push((s.label, vec![s.metrics])),
        }
    }
    let table = format_table(&rows)?;
    let md = table_markdown(&table);
    start(out, None)?;
    write(&out.join("table.md"), &md)?;
    write(&out.join("table.csv"), table_csv(&table)?)?;
    print!("{md}");
    Ok(())
}
