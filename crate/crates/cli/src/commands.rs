use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use slideseg_core::bench::{
    config_hash, evaluate_volume, make_phantom, noisy_prompt_suite, per_slice_baseline, prompt_efficiency, resample_z,
    AnnotationResult, BenchTable, PhantomKind, PhantomParams, NOISY_SCALES, NOISY_TRANSLATIONS,
};
use slideseg_core::inference::{segment_everything, segment_volume, Direction, InferenceConfig, IntensityPredictor};
use slideseg_core::model::SlideSam;
use slideseg_core::pseudo::{generate_pseudo_records, PseudoRecordFile};
use slideseg_core::training::{train as train_model, TrainingSample};
use slideseg_core::volume::{
    clip_and_normalize, extract_windows, mask_path, read_mask, read_volume, volume_paths, write_mask, write_volume,
    Axis, Volume, VolumeMask,
};
use slideseg_service::{AppState, ServiceConfig, SharedPredictor};

use crate::args::{EvalArgs, InferArgs, PredictorArgs, PreprocessArgs, PseudoArgs, ServeArgs, Suite, SynthArgs, TrainArgs};
use crate::{Context, Failure};

type CmdResult = Result<(), Failure>;

/// Budget and Dice floor of the prompt-efficiency count.
const PROMPT_BUDGET: usize = 1000;
const EFFICIENCY_DICE: f64 = 0.9;
const ZSPACING_RATIOS: [f64; 3] = [1.0, 2.0, 4.0];

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_predictor(args: &PredictorArgs) -> Result<(SharedPredictor, String), Failure> {
    match (&args.model, args.intensity) {
        (Some(path), _) => {
            let model = SlideSam::load(path)?;
            let tag = format!("model:{}", config_hash(model.config())?);
            Ok((Arc::new(model), tag))
        }
        (None, true) => Ok((
            Arc::new(IntensityPredictor {
                threshold: args.threshold,
            }),
            format!("intensity:{}", args.threshold),
        )),
        (None, false) => Err(Failure::Usage("choose a predictor with --model FILE or --intensity".into())),
    }
}

fn load_normalized(path: &Path) -> Result<Volume, Failure> {
    Ok(clip_and_normalize(&read_volume(path)?))
}

pub fn synth(ctx: &Context, args: SynthArgs) -> CmdResult {
    let shape = (args.shape.0, args.shape.1, args.shape.2);
    let mut params = if args.random {
        PhantomParams::random(args.kind, shape, &mut ChaCha8Rng::seed_from_u64(ctx.seed))
    } else {
        PhantomParams::centered(args.kind, shape)
    };
    if let Some(sigma) = args.noise {
        params.noise_sigma = sigma;
    }
    let (mut volume, mask) = make_phantom(args.kind, shape, &params, ctx.seed)?;
    volume.id = args.id.unwrap_or_else(|| format!("{}-{}", args.kind, ctx.seed));
    let sidecar = write_volume(&volume, &args.out)?;
    let mask_file = mask_path(&args.out, &volume.id);
    write_mask(&volume.id, &mask, &mask_file)?;
    println!("{}", sidecar.display());
    println!("{}", mask_file.display());
    Ok(())
}

pub fn preprocess(_ctx: &Context, args: PreprocessArgs) -> CmdResult {
    let source = read_volume(&args.input)?;
    let volume = clip_and_normalize(&source);
    let sidecar = write_volume(&volume, &args.out)?;
    println!("{}", sidecar.display());
    let src_dir = args.input.parent().unwrap_or(Path::new("."));
    let mask_file = mask_path(src_dir, &volume.id);
    if mask_file.exists() {
        let mask = read_mask(&mask_file)?;
        mask.check_aligned(&volume)?;
        let out_mask = mask_path(&args.out, &volume.id);
        write_mask(&volume.id, &mask, &out_mask)?;
        for axis in [Axis::Z, Axis::Y, Axis::X] {
            let n = extract_windows(&volume, &mask, axis)?.len();
            println!("windows along {axis}: {n}");
        }
        println!("{}", out_mask.display());
    }
    Ok(())
}

/// Sidecar paths in `dir`, sorted by name.
fn sidecars(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".vol.json"))
        .collect();
    out.sort();
    Ok(out)
}

fn volumetric_samples(dir: &Path, seed: u64) -> Result<Vec<TrainingSample>, Failure> {
    let mut samples = Vec::new();
    for (i, sidecar) in sidecars(dir)?.iter().enumerate() {
        let volume = load_normalized(sidecar)?;
        let mask_file = mask_path(dir, &volume.id);
        if !mask_file.exists() {
            continue;
        }
        let mask = read_mask(&mask_file)?;
        mask.check_aligned(&volume)?;
        for axis in [Axis::Z, Axis::Y, Axis::X] {
            for w in extract_windows(&volume, &mask, axis)? {
                samples.push(TrainingSample::from_window(&w, seed.wrapping_add(i as u64))?);
            }
        }
    }
    Ok(samples)
}

fn pseudo_samples(dir: &Path, files: &[PathBuf], seed: u64) -> Result<Vec<TrainingSample>, Failure> {
    let mut samples = Vec::new();
    for (i, file) in files.iter().enumerate() {
        let records = PseudoRecordFile::read(file)?;
        let volume = load_normalized(&volume_paths(dir, &records.volume_id).1)?;
        samples.extend(records.to_samples(&volume, seed.wrapping_add(i as u64))?);
    }
    Ok(samples)
}

pub fn train(ctx: &Context, args: TrainArgs) -> CmdResult {
    let mut tc = ctx.config.train.clone();
    tc.seed = ctx.seed;
    if let Some(s) = args.steps {
        tc.steps = s;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = args.lr {
        tc.optimizer.lr = lr;
    }
    tc.validate()?;
    let mut samples = volumetric_samples(&args.data, ctx.seed)?;
    let volumetric = samples.len();
    samples.extend(pseudo_samples(&args.data, &args.pseudo, ctx.seed)?);
    tracing::info!("{volumetric} volumetric and {} pseudo samples", samples.len() - volumetric);
    if samples.is_empty() {
        return Err(Failure::Data(format!("no training samples found in {}", args.data.display())));
    }
    let model = match &args.init {
        None => SlideSam::new(&ctx.config.model, ctx.seed)?,
        Some(path) => {
            let (config, tensors) = SlideSam::read_checkpoint(path)?;
            if config.branches == 1 {
                let target = slideseg_core::model::ModelConfig {
                    branches: ctx.config.model.branches,
                    ..config
                };
                SlideSam::init_from_reference(&target, &tensors, ctx.seed)?
            } else {
                SlideSam::load(path)?
            }
        }
    };
    let mut metrics = match &args.metrics {
        Some(p) => Some(fs::File::create(p).map_err(|e| io_failure(p, e))?),
        None => None,
    };
    let report = train_model(
        &model,
        &samples,
        &tc,
        metrics.as_mut().map(|f| f as &mut dyn Write),
        |r| tracing::info!("step {} loss {:.5} heads {:?}", r.step, r.loss, r.head_histogram),
    )?;
    model.save(&args.out)?;
    let last = report.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("trained {} steps on {} samples, final loss {last:.6}", tc.steps, samples.len());
    println!("{}", args.out.display());
    Ok(())
}

pub fn pseudo(ctx: &Context, args: PseudoArgs) -> CmdResult {
    let (predictor, _) = load_predictor(&args.predictor)?;
    let volume = load_normalized(&args.volume)?;
    let mut cfg = ctx.config.pseudo;
    if let Some(axis) = args.axis {
        cfg.axis = axis;
    }
    if let Some(s) = args.stride {
        cfg.slice_stride = s;
    }
    if let Some(n) = args.segments {
        cfg.slic.n_segments = n;
    }
    let records = generate_pseudo_records(predictor.as_ref(), &volume, &cfg)?;
    records.write(&args.out)?;
    println!("{} records", records.records.len());
    println!("{}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct InstanceSummary {
    id: u32,
    first_slice: Option<usize>,
    last_slice: Option<usize>,
    backward: Option<String>,
    forward: Option<String>,
}

pub fn infer(ctx: &Context, args: InferArgs) -> CmdResult {
    let (predictor, _) = load_predictor(&args.predictor)?;
    let volume = load_normalized(&args.volume)?;
    let mut cfg = ctx.config.inference.clone();
    if let Some(b) = args.max_batch {
        cfg.max_batch = b;
    }
    if let Some(s) = args.stride {
        cfg.stride = s;
    }
    let predictor = predictor.as_ref();
    let result = match &args.prompt {
        Some(prompt) => segment_volume(predictor, &volume, args.axis, args.start_index, prompt, &cfg, None)?,
        None => segment_everything(predictor, &volume, args.axis, args.start_index, &cfg, None)?,
    };
    write_mask(&volume.id, &result.mask, &args.out)?;
    for d in &result.diagnostics {
        tracing::warn!("{d}");
    }
    let dim = volume.dim(args.axis);
    for id in result.mask.instances.keys().copied() {
        let slices: Vec<usize> = (0..dim)
            .filter(|&i| result.mask.instance_slice(args.axis, i, id).iter().any(|&v| v))
            .collect();
        let reason = |d| result.termination(id, d).map(|r| format!("{r:?}"));
        let summary = InstanceSummary {
            id,
            first_slice: slices.first().copied(),
            last_slice: slices.last().copied(),
            backward: reason(Direction::Backward),
            forward: reason(Direction::Forward),
        };
        println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    }
    println!("{}", args.out.display());
    Ok(())
}

fn phantom_set(seed: u64, count: usize, shape: (usize, usize, usize)) -> Result<Vec<(Volume, VolumeMask)>, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = [PhantomKind::Sphere, PhantomKind::Ellipsoid][i % 2];
            let params = PhantomParams::random(kind, shape, &mut rng);
            let (mut v, m) = make_phantom(kind, shape, &params, rng.gen())?;
            v.id = format!("eval-{i}");
            Ok((v, m))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Serialize)]
struct EvalKey<'a> {
    suite: &'a str,
    count: usize,
    shape: [usize; 3],
    seed: u64,
    predictor: &'a str,
    inference: &'a InferenceConfig,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> CmdResult {
    if args.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let (predictor, tag) = load_predictor(&args.predictor)?;
    let predictor = predictor.as_ref();
    let cfg = &ctx.config.inference;
    let shape = (args.shape.0, args.shape.1, args.shape.2);
    let set = phantom_set(ctx.seed, args.count, shape)?;
    let runs = |s: Suite| args.suite == s || args.suite == Suite::All;
    let mut table = BenchTable::default();

    if runs(Suite::Noisy) {
        let mut sums = vec![0.0; NOISY_TRANSLATIONS.len() * NOISY_SCALES.len()];
        for (v, gt) in &set {
            for (acc, cell) in sums.iter_mut().zip(noisy_prompt_suite(predictor, v, gt, Axis::Z, 1, cfg)?) {
                *acc += cell.dice;
            }
        }
        let mut i = 0;
        for t in NOISY_TRANSLATIONS {
            for s in NOISY_SCALES {
                table.push(format!("noisy_dice_t{t:+.2}_s{s:.2}"), sums[i] / set.len() as f64);
                i += 1;
            }
        }
    }
    if runs(Suite::Propagation) || runs(Suite::Efficiency) {
        let mut dices = Vec::new();
        let mut windows = Vec::new();
        for (v, gt) in &set {
            let e = evaluate_volume(predictor, v, gt, Axis::Z, 1, cfg)?;
            dices.push(e.dice);
            windows.push(e.result.windows as f64);
        }
        if runs(Suite::Propagation) {
            table.push("propagation_dice_mean", mean(&dices));
            table.push("propagation_dice_min", dices.iter().copied().fold(f64::INFINITY, f64::min));
            table.push("propagation_windows_mean", mean(&windows));
        }
        if runs(Suite::Efficiency) {
            let propagated: Vec<AnnotationResult> = dices
                .iter()
                .map(|&dice| AnnotationResult { prompts_used: 1, dice })
                .collect();
            let per_slice = set
                .iter()
                .map(|(v, gt)| per_slice_baseline(predictor, v, gt, Axis::Z, 1, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let stream = |r: &[AnnotationResult]| r.iter().copied().cycle().take(PROMPT_BUDGET).collect::<Vec<_>>();
            table.push(
                "efficiency_volumes_propagation",
                prompt_efficiency(&stream(&propagated), PROMPT_BUDGET, EFFICIENCY_DICE) as f64,
            );
            table.push(
                "efficiency_volumes_per_slice",
                prompt_efficiency(&stream(&per_slice), PROMPT_BUDGET, EFFICIENCY_DICE) as f64,
            );
            let prompts: Vec<f64> = per_slice.iter().map(|r| r.prompts_used as f64).collect();
            table.push("per_slice_prompts_mean", mean(&prompts));
            table.push("per_slice_dice_mean", mean(&per_slice.iter().map(|r| r.dice).collect::<Vec<_>>()));
        }
    }
    if runs(Suite::Zspacing) {
        for ratio in ZSPACING_RATIOS {
            let mut dices = Vec::new();
            for (v, gt) in &set {
                let (rv, rm) = resample_z(v, gt, ratio)?;
                dices.push(evaluate_volume(predictor, &rv, &rm, Axis::Z, 1, cfg)?.dice);
            }
            table.push(format!("zspacing_dice_r{ratio}"), mean(&dices));
        }
    }

    let suite = format!("{:?}", args.suite).to_lowercase();
    let hash = config_hash(&EvalKey {
        suite: &suite,
        count: args.count,
        shape: [shape.0, shape.1, shape.2],
        seed: ctx.seed,
        predictor: &tag,
        inference: cfg,
    })?;
    let csv = table.to_csv(&hash);
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| io_failure(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn serve(ctx: &Context, args: ServeArgs) -> CmdResult {
    let (predictor, tag) = load_predictor(&args.predictor)?;
    let mut config = ServiceConfig::new(&args.data_dir);
    config.workers = ctx.jobs.unwrap_or(1);
    config.max_upload_bytes = args.max_upload_mb << 20;
    config.inference = ctx.config.inference.clone();
    let state = AppState::open(config, predictor)?;
    tracing::info!("serving {} with {tag}", args.data_dir.display());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime
        .block_on(slideseg_service::serve(state, args.addr))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.addr)))
}
