use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use debias_cf::data::{
    generate_synthetic_world, load_interactions, load_split, load_with_manifest, parse_with_maps,
    sample_clicks, sample_relevance_clicks, save_split, split_preprovided, split_with,
    write_interactions_tsv, IdMap, InteractionSet, LoadOptions, SplitBundle, SplitConfig,
    SplitManifest, SyntheticWorld, TestSampling,
};
use debias_cf::embedding::{load_checkpoint, save_checkpoint, Scoring};
use debias_cf::eval::{
    evaluate_masked, group_alignment, EvalOptions, DEFAULT_K, DEFAULT_POPULAR_RATIO,
};
use debias_cf::propensity::{
    estimate_item_popularity, estimate_learned_for_pairs, estimate_oracle,
};
use debias_cf::trainer::{train_with_callback, JointSchedule, Objective, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{merged, parse, take_path, to_value};
use crate::{AnalyzeArgs, CliError, Common, EvalArgs, SplitArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train-log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const EVAL_CONFIG_FILE: &str = "eval-config.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const ANALYZE_CONFIG_FILE: &str = "analyze-config.json";
pub const WORLD_FILE: &str = "world.bin";
pub const CLICKS_FILE: &str = "clicks.tsv";
pub const UNBIASED_TEST_FILE: &str = "test-unbiased.tsv";

fn out_dir(common: &Common) -> Result<&Path, CliError> {
    common
        .out_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))
}

fn required(value: Option<String>, flag: &str) -> Result<PathBuf, CliError> {
    value
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(debias_cf::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn emit(value: &impl Serialize, out: Option<&str>) -> Result<(), CliError> {
    match out {
        Some(path) => write_json(Path::new(path), value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(debias_cf::Error::from)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn sampling_flag(global: bool) -> Value {
    if global {
        json!("global")
    } else {
        Value::Null
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitRun {
    input: Option<String>,
    test: Option<String>,
    test_frac: f64,
    valid_frac: f64,
    seed: u64,
    test_sampling: TestSampling,
    lenient: bool,
}

impl Default for SplitRun {
    fn default() -> Self {
        let cfg = SplitConfig::default();
        Self {
            input: None,
            test: None,
            test_frac: cfg.test_frac,
            valid_frac: cfg.valid_frac,
            seed: cfg.seed,
            test_sampling: cfg.sampling,
            lenient: false,
        }
    }
}

pub fn split(args: SplitArgs) -> Result<(), CliError> {
    let mut flags = to_value(&args);
    flags["test_sampling"] = sampling_flag(args.global_test_sampling);
    let run: SplitRun = parse(merged(
        to_value(&SplitRun::default()),
        args.common.config.as_deref(),
        &args.common.sets,
        flags,
    )?)?;
    let dir = out_dir(&args.common)?;
    let input = required(run.input.clone(), "input")?;
    let opts = LoadOptions {
        lenient: run.lenient,
        ..Default::default()
    };
    let data = load_interactions(&input, &opts)?;
    let bundle = match &run.test {
        Some(test_path) => {
            let f = std::io::BufReader::new(File::open(test_path)?);
            let test = parse_with_maps(f, &data.users, &data.items, &opts)?;
            split_preprovided(&data.interactions, &test, run.valid_frac, run.seed)?
        }
        None => split_with(
            &data.interactions,
            &SplitConfig {
                test_frac: run.test_frac,
                valid_frac: run.valid_frac,
                seed: run.seed,
                sampling: run.test_sampling,
            },
        )?,
    };
    let fields = (run.seed, run.test_frac, run.valid_frac, run.test_sampling);
    let manifest = manifest_for(&fields, &bundle, &data.users, &data.items);
    save_split(dir, &bundle, &manifest)?;
    write_json(&dir.join(RESOLVED_CONFIG_FILE), &run)?;
    log::info!(
        "split {} clicks into {} train / {} validation / {} test",
        data.interactions.len(),
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test.len()
    );
    Ok(())
}

fn manifest_for(
    fields: &(u64, f64, f64, TestSampling),
    bundle: &SplitBundle,
    users: &IdMap,
    items: &IdMap,
) -> SplitManifest {
    SplitManifest {
        seed: fields.0,
        test_frac: fields.1,
        valid_frac: fields.2,
        protocol_tag: bundle.protocol_tag,
        test_sampling: fields.3,
        user_ids: users.ids().to_vec(),
        item_ids: items.ids().to_vec(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthRun {
    m: usize,
    n: usize,
    skew: f64,
    seed: u64,
    test_frac: f64,
    valid_frac: f64,
    test_sampling: TestSampling,
    unbiased_exposure: f64,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            m: 200,
            n: 300,
            skew: 1.5,
            seed: 0,
            test_frac: 0.1,
            valid_frac: 0.1,
            test_sampling: TestSampling::PerItem,
            unbiased_exposure: 0.1,
        }
    }
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut flags = to_value(&args);
    flags["test_sampling"] = sampling_flag(args.global_test_sampling);
    let run: SynthRun = parse(merged(
        to_value(&SynthRun::default()),
        args.common.config.as_deref(),
        &args.common.sets,
        flags,
    )?)?;
    if !(run.unbiased_exposure > 0.0 && run.unbiased_exposure <= 1.0) {
        return Err(CliError::Usage(format!(
            "unbiased_exposure must lie in (0,1], got {}",
            run.unbiased_exposure
        )));
    }
    let dir = out_dir(&args.common)?;
    fs::create_dir_all(dir)?;

    let world = generate_synthetic_world(run.m, run.n, run.skew, run.seed)?;
    let clicks = sample_clicks(&world, run.seed.wrapping_add(1));
    let split_seed = run.seed.wrapping_add(2);
    let bundle = split_with(
        &clicks,
        &SplitConfig {
            test_frac: run.test_frac,
            valid_frac: run.valid_frac,
            seed: split_seed,
            sampling: run.test_sampling,
        },
    )?;
    let unbiased = sample_relevance_clicks(
        &world,
        run.unbiased_exposure,
        &clicks,
        run.seed.wrapping_add(3),
    );

    let (users, items) = (IdMap::identity(run.m), IdMap::identity(run.n));
    world.save(dir.join(WORLD_FILE))?;
    write_interactions_tsv(dir.join(CLICKS_FILE), &clicks, &users, &items)?;
    let fields = (split_seed, run.test_frac, run.valid_frac, run.test_sampling);
    save_split(
        dir,
        &bundle,
        &manifest_for(&fields, &bundle, &users, &items),
    )?;
    write_interactions_tsv(dir.join(UNBIASED_TEST_FILE), &unbiased, &users, &items)?;
    write_json(&dir.join(RESOLVED_CONFIG_FILE), &run)?;
    log::info!(
        "synthetic world {}x{}: {} clicks, {} unbiased test clicks",
        run.m,
        run.n,
        clicks.len(),
        unbiased.len()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut flags = to_value(&args);
    if args.alternating {
        flags["schedule"] = to_value(&JointSchedule::Alternating);
    }
    let mut map = merged(
        to_value(&TrainConfig::default()),
        args.common.config.as_deref(),
        &args.common.sets,
        flags,
    )?;
    let data_dir = required(take_path(&mut map, "data")?, "data")?;
    let mut world_path = take_path(&mut map, "world")?.map(PathBuf::from);
    let dump = take_path(&mut map, "dump_propensities")?;
    let config: TrainConfig = parse(map)?;
    config.validate()?;
    let dir = out_dir(&args.common)?;

    let (bundle, manifest) = load_split(&data_dir)?;
    if world_path.is_none() && config.objective == Objective::IpwAlignOracle {
        let candidate = data_dir.join(WORLD_FILE);
        world_path = candidate.exists().then_some(candidate);
    }
    let world = match (&world_path, config.objective) {
        (Some(p), Objective::IpwAlignOracle) => Some(SyntheticWorld::load(p)?),
        _ => None,
    };

    fs::create_dir_all(dir)?;
    let mut resolved = to_value(&config);
    resolved["data"] = json!(data_dir);
    resolved["world"] = json!(world_path);
    resolved["dump_propensities"] = json!(dump);
    write_json(&dir.join(RESOLVED_CONFIG_FILE), &resolved)?;

    let mut log_file = BufWriter::new(File::create(dir.join(TRAIN_LOG_FILE))?);
    let mut log_error = None;
    let outcome = train_with_callback(&bundle, &config, world.as_ref(), |record| {
        if log_error.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("records serialize");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|()| log_file.flush()) {
            log_error = Some(e);
        }
    });
    if let Some(e) = log_error {
        return Err(e.into());
    }
    let outcome = outcome?;
    let (model, projections) = outcome.selected();
    save_checkpoint(model, projections, dir.join(CHECKPOINT_FILE))?;
    match &outcome.best {
        Some(b) => log::info!("saved epoch {} (validation ndcg {:.5})", b.epoch, b.ndcg),
        None => log::info!("no validation data; saved final epoch"),
    }

    if let Some(path) = dump {
        let pairs = bundle.train.pairs();
        let estimate = match config.objective {
            Objective::IpwAlignOracle => {
                let w = world.as_ref().expect("checked by the trainer");
                estimate_oracle(w, pairs, config.mu)?
            }
            Objective::IpwAlignPop => estimate_item_popularity(
                &bundle.train,
                pairs,
                config.popularity_exponent,
                config.mu,
            )?,
            Objective::Uctrl | Objective::Directau => {
                estimate_learned_for_pairs(model, projections, pairs, config.mu)?
            }
        };
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "user\titem\tomega_hat")?;
        for (p, v) in pairs.iter().zip(&estimate.values) {
            writeln!(
                w,
                "{}\t{}\t{v}",
                manifest.user_ids[p.user], manifest.item_ids[p.item]
            )?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalRun {
    data: Option<String>,
    checkpoint: Option<String>,
    test: Option<String>,
    k: usize,
    scoring: Scoring,
    mask_train_only: bool,
    per_user: Option<String>,
    out: Option<String>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            test: None,
            k: DEFAULT_K,
            scoring: Scoring::Dot,
            mask_train_only: false,
            per_user: None,
            out: None,
        }
    }
}

fn checkpoint_path(explicit: Option<String>, common: &Common) -> Result<PathBuf, CliError> {
    match (explicit, &common.out_dir) {
        (Some(p), _) => Ok(PathBuf::from(p)),
        (None, Some(dir)) => Ok(dir.join(CHECKPOINT_FILE)),
        (None, None) => Err(CliError::Usage(
            "--checkpoint (or --out-dir holding one) is required".into(),
        )),
    }
}

fn pairs_or_test(
    path: &Option<String>,
    bundle: &SplitBundle,
    manifest: &SplitManifest,
) -> Result<InteractionSet, CliError> {
    match path {
        Some(p) => Ok(load_with_manifest(p, manifest)?),
        None => Ok(bundle.test.clone()),
    }
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut run: EvalRun = parse(merged(
        to_value(&EvalRun::default()),
        args.common.config.as_deref(),
        &args.common.sets,
        to_value(&args),
    )?)?;
    let data_dir = required(run.data.clone(), "data")?;
    let ckpt = checkpoint_path(run.checkpoint.clone(), &args.common)?;
    run.checkpoint = Some(ckpt.display().to_string());

    let (bundle, manifest) = load_split(&data_dir)?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let test = pairs_or_test(&run.test, &bundle, &manifest)?;
    let mut masks = vec![&bundle.train];
    if !run.mask_train_only {
        masks.push(&bundle.validation);
    }
    let opts = EvalOptions {
        k: run.k,
        scoring: run.scoring,
        per_user: run.per_user.is_some(),
    };
    let mut report = evaluate_masked(&model, &masks, &test, &opts)?;

    if let (Some(path), Some(rows)) = (&run.per_user, report.per_user.take()) {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "user\trecall\tndcg")?;
        for r in rows {
            writeln!(w, "{}\t{}\t{}", manifest.user_ids[r.user], r.recall, r.ndcg)?;
        }
        w.flush()?;
    }
    if let Some(dir) = &args.common.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(METRICS_FILE), &report)?;
        write_json(&dir.join(EVAL_CONFIG_FILE), &run)?;
    }
    emit(&report, run.out.as_deref())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnalyzeRun {
    data: Option<String>,
    checkpoint: Option<String>,
    pairs: Option<String>,
    ratio: f64,
    out: Option<String>,
}

impl Default for AnalyzeRun {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            pairs: None,
            ratio: DEFAULT_POPULAR_RATIO,
            out: None,
        }
    }
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let mut run: AnalyzeRun = parse(merged(
        to_value(&AnalyzeRun::default()),
        args.common.config.as_deref(),
        &args.common.sets,
        to_value(&args),
    )?)?;
    let data_dir = required(run.data.clone(), "data")?;
    let ckpt = checkpoint_path(run.checkpoint.clone(), &args.common)?;
    run.checkpoint = Some(ckpt.display().to_string());

    let (bundle, manifest) = load_split(&data_dir)?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let pairs = pairs_or_test(&run.pairs, &bundle, &manifest)?;
    let report = group_alignment(&model, &pairs, &bundle.train, run.ratio)?;
    if let Some(dir) = &args.common.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(ANALYSIS_FILE), &report)?;
        write_json(&dir.join(ANALYZE_CONFIG_FILE), &run)?;
    }
    emit(&report, run.out.as_deref())
}
