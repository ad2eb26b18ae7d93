use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use metasampler::autodiff::gradcheck::CheckResult;
use metasampler::checkpoint;
use metasampler::compare::{run_grid, Comparison};
use metasampler::data::{self, few_shot_count, generate_synthetic, Dataset, Split};
use metasampler::meta::{gradcheck_suite, MetaOptions, ToyDims};
use metasampler::models::{ModelParams, SamplerParams};
use metasampler::trainer::{
    final_metrics, refresh_policy, run, EpochMetrics, FinalMetrics, MetaTrace, PolicyDump, RefreshRecord, RunStatus,
    Mode, SamplerKind, TrainConfig,
};
use serde::Serialize;

use crate::config::{existing, load_config, load_dataset, resolve, CompareFile, DumpFile, EvalFile, GenConfig, OutDir, TrainFile};
use crate::{core_failure, Failure};

/// Relative error every finite-difference check must stay below.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn other(e: anyhow::Error) -> Failure {
    Failure::Other(e)
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(epochs: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,eval_loss_expected,mAP,rank1,rank5,policy_entropy\n");
    for e in epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            csv_opt(e.eval_loss_expected),
            e.map,
            e.rank1,
            e.rank5,
            e.policy_entropy
        );
    }
    s
}

fn refresh_csv(records: &[RefreshRecord]) -> String {
    let mut s = String::from("iteration,epoch,entropy,hard_mass\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.iteration, r.epoch, r.entropy, r.hard_mass);
    }
    s
}

fn meta_csv(trace: &[MetaTrace]) -> String {
    let mut s = String::from("iteration,eval_loss_before,eval_loss_after,grad_norm,entropy\n");
    for t in trace {
        let _ = writeln!(s, "{},{},{},{},{}", t.iteration, t.eval_loss_before, t.eval_loss_after, t.grad_norm, t.entropy);
    }
    s
}

pub fn policy_csv(probabilities: &[(usize, f64)]) -> String {
    let mut s = String::from("sample_id,probability\n");
    for (id, p) in probabilities {
        let _ = writeln!(s, "{id},{p}");
    }
    s
}

// gen-data

pub struct GenArgs {
    pub config: Option<PathBuf>,
    pub overrides: GenOverrides,
    pub out: PathBuf,
}

#[derive(Default)]
pub struct GenOverrides {
    pub identities: Option<usize>,
    pub per_id: Option<usize>,
    pub input_dim: Option<usize>,
    pub spread: Option<f64>,
    pub mode_offset: Option<f64>,
    pub noise_std: Option<f64>,
    pub hard_fraction: Option<f64>,
    pub holdout: Option<f64>,
    pub long_tail: Option<f64>,
    pub min_count: Option<usize>,
    pub seed: Option<u64>,
    pub imbalance: Option<f64>,
    pub few_shot_n: Option<usize>,
    pub noise: Option<f64>,
    pub noise_seed: Option<u64>,
}

impl GenOverrides {
    fn apply(self, mut c: GenConfig) -> GenConfig {
        let s = &mut c.spec;
        s.identities = self.identities.unwrap_or(s.identities);
        s.per_id = self.per_id.unwrap_or(s.per_id);
        s.input_dim = self.input_dim.unwrap_or(s.input_dim);
        s.spread = self.spread.unwrap_or(s.spread);
        s.mode_offset = self.mode_offset.unwrap_or(s.mode_offset);
        s.noise_std = self.noise_std.unwrap_or(s.noise_std);
        s.hard_fraction = self.hard_fraction.unwrap_or(s.hard_fraction);
        s.holdout = self.holdout.unwrap_or(s.holdout);
        if let Some(exponent) = self.long_tail {
            s.sizes = data::SizeDistribution::LongTail {
                exponent,
                min_count: self.min_count.unwrap_or(5),
            };
        }
        c.seed = self.seed.unwrap_or(c.seed);
        c.imbalance = self.imbalance.or(c.imbalance);
        c.few_shot_n = self.few_shot_n.unwrap_or(c.few_shot_n);
        c.noise = self.noise.or(c.noise);
        c.noise_seed = self.noise_seed.or(c.noise_seed);
        c
    }
}

pub fn build_dataset(c: &GenConfig) -> metasampler::Result<Dataset> {
    let mut d = generate_synthetic(&c.spec, c.seed)?;
    if let Some(f) = c.imbalance {
        if !(0.0..=1.0).contains(&f) {
            return Err(metasampler::Error::InvalidArgument(format!("imbalance fraction {f} outside [0, 1]")));
        }
        d = d.apply_imbalance(few_shot_count(f, d.num_identities), c.few_shot_n)?;
    }
    if let Some(f) = c.noise {
        d = d.inject_label_noise(f, c.noise_seed.unwrap_or(c.seed))?;
    }
    Ok(d)
}

pub fn gen_data(args: GenArgs) -> Result<(), Failure> {
    let base = match &args.config {
        Some(p) => load_config::<GenConfig>(p, "gen-data")?.config,
        None => GenConfig::default(),
    };
    let config = args.overrides.apply(base);
    let dataset = build_dataset(&config).map_err(core_failure)?;
    let text = data::to_string(&dataset);
    let mut out = OutDir::create(&args.out).map_err(other)?;
    let path = out.write("dataset.txt", &text).map_err(other)?;
    let sha256 = crate::config::sha256_hex(text.as_bytes());
    println!(
        "wrote {} ({} samples, {} train, {} noisy, sha256 {sha256})",
        path.display(),
        dataset.samples.len(),
        dataset.split(Split::Train).count(),
        dataset.noisy_count()
    );
    let seed = config.seed;
    out.finish("gen-data", &config, Some(seed), Some(crate::config::DatasetRef { path, sha256 }))
        .map_err(other)
}

// train

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'static str,
    dataset_sha256: &'a str,
    seed: u64,
    config: &'a TrainConfig,
    status: &'a RunStatus,
    skipped_meta_steps: usize,
    epochs: &'a [EpochMetrics],
    refreshes: &'a [RefreshRecord],
    final_metrics: &'a FinalMetrics,
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub sampler: Option<SamplerKind>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub mode: Option<Mode>,
    pub with_replacement: bool,
    pub out: PathBuf,
}

fn train_file(args: &TrainArgs) -> Result<(TrainFile, Option<String>), Failure> {
    let (mut file, expected) = match &args.config {
        Some(p) => {
            let loaded = load_config::<TrainFile>(p, "train")?;
            let mut f = loaded.config;
            f.dataset = resolve(Some(p), &f.dataset);
            (f, loaded.expected_sha256)
        }
        None => {
            let dataset = args
                .dataset
                .clone()
                .ok_or_else(|| Failure::Usage(anyhow!("train needs --config or --dataset")))?;
            (
                TrainFile {
                    dataset,
                    train: TrainConfig::default(),
                },
                None,
            )
        }
    };
    if let Some(d) = &args.dataset {
        file.dataset = d.clone();
    }
    file.train.sampler = args.sampler.unwrap_or(file.train.sampler);
    file.train.seed = args.seed.unwrap_or(file.train.seed);
    file.train.epochs = args.epochs.unwrap_or(file.train.epochs);
    file.train.mode = args.mode.unwrap_or(file.train.mode);
    file.train.with_replacement |= args.with_replacement;
    file.train.validate().map_err(core_failure)?;
    Ok((file, expected))
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let (mut file, expected) = train_file(&args)?;
    let (dataset, dref) = load_dataset(&file.dataset, expected.as_deref())?;
    file.dataset = dref.path.clone();
    let outcome = run(&file.train, &dataset).map_err(core_failure)?;

    let mut out = OutDir::create(&args.out).map_err(other)?;
    out.write("metrics.csv", metrics_csv(&outcome.epochs)).map_err(other)?;
    out.write("refresh.csv", refresh_csv(&outcome.refreshes)).map_err(other)?;
    if !outcome.meta_trace.is_empty() {
        out.write("meta_trace.csv", meta_csv(&outcome.meta_trace)).map_err(other)?;
    }
    out.write("model.ckpt", checkpoint::to_string(&outcome.model.to_entries())).map_err(other)?;
    out.write("sampler.ckpt", checkpoint::to_string(&outcome.sampler.to_entries())).map_err(other)?;
    out.write("policy.csv", policy_csv(&outcome.final_policy.probabilities)).map_err(other)?;
    for d in &outcome.policy_dumps {
        out.write(&format!("policy_iter{:06}.csv", d.iteration), policy_csv(&d.probabilities))
            .map_err(other)?;
    }
    let report = TrainReport {
        command: "train",
        dataset_sha256: &dref.sha256,
        seed: file.train.seed,
        config: &file.train,
        status: &outcome.status,
        skipped_meta_steps: outcome.skipped_meta_steps,
        epochs: &outcome.epochs,
        refreshes: &outcome.refreshes,
        final_metrics: &outcome.final_metrics,
    };
    out.write_json("report.json", &report).map_err(other)?;
    let root = out.root().to_path_buf();
    out.finish("train", &file, Some(file.train.seed), Some(dref)).map_err(other)?;

    let r = &outcome.final_metrics.retrieval;
    println!(
        "{}: mAP {:.4} rank1 {:.4} rank5 {:.4}; outputs in {}",
        file.train.sampler,
        r.map,
        r.rank1,
        r.rank5,
        root.display()
    );
    match outcome.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { epoch, iteration, reason } => Err(Failure::Numerical(anyhow!(
            "training diverged at epoch {epoch}, iteration {iteration}: {reason}; report notes the early stop"
        ))),
    }
}

// compare

pub struct CompareArgs {
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub samplers: Option<Vec<SamplerKind>>,
    pub seeds: Option<Vec<u64>>,
    pub epochs: Option<usize>,
    pub mode: Option<Mode>,
    pub out: PathBuf,
}

pub fn comparison_csv(c: &Comparison) -> String {
    let modes = c.cells.first().map_or(0, |x| x.metrics.cross_view.len());
    let mut s = String::from("sampler,seed,status,mAP,rank1,rank5");
    for m in 0..modes {
        let _ = write!(s, ",cross_view_mode{m}_mAP");
    }
    s.push_str(",query_accuracy\n");
    for cell in &c.cells {
        let status = match cell.status {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
        };
        let r = &cell.metrics.retrieval;
        let _ = write!(s, "{},{},{status},{},{},{}", cell.sampler, cell.seed, r.map, r.rank1, r.rank5);
        for cv in &cell.metrics.cross_view {
            let _ = write!(s, ",{}", cv.map);
        }
        let _ = writeln!(s, ",{}", cell.metrics.query_accuracy);
    }
    for m in &c.summaries {
        let _ = write!(s, "{},median,{} of {} completed,{},{},{}", m.sampler, m.runs - m.diverged, m.runs, m.median_map, m.median_rank1, m.median_rank5);
        for cv in &m.median_cross_view_map {
            let _ = write!(s, ",{cv}");
        }
        let _ = writeln!(s, ",{}", m.median_query_accuracy);
    }
    s
}

pub fn comparison_text(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "sampler", "runs", "mAP", "rank1", "rank5", "cv0 mAP", "cv1 mAP", "cv2 mAP"
    );
    for m in &c.summaries {
        let cv = |k: usize| m.median_cross_view_map.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "{:<10} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            m.sampler.name(),
            m.runs,
            m.median_map,
            m.median_rank1,
            m.median_rank5,
            cv(0),
            cv(1),
            cv(2)
        );
    }
    s.push_str("(medians over seeds)\n");
    s
}

#[derive(Serialize)]
struct CompareReport<'a> {
    command: &'static str,
    dataset_sha256: &'a str,
    config: &'a TrainConfig,
    samplers: &'a [SamplerKind],
    seeds: &'a [u64],
    comparison: &'a Comparison,
}

pub fn compare(args: CompareArgs) -> Result<(), Failure> {
    let (mut file, expected) = match &args.config {
        Some(p) => {
            let loaded = load_config::<CompareFile>(p, "compare")?;
            let mut f = loaded.config;
            f.dataset = resolve(Some(p), &f.dataset);
            (f, loaded.expected_sha256)
        }
        None => {
            let dataset = args
                .dataset
                .clone()
                .ok_or_else(|| Failure::Usage(anyhow!("compare needs --config or --dataset")))?;
            (
                CompareFile {
                    dataset,
                    train: TrainConfig::default(),
                    samplers: Vec::new(),
                    seeds: (0..5).collect(),
                },
                None,
            )
        }
    };
    if let Some(d) = &args.dataset {
        file.dataset = d.clone();
    }
    if let Some(s) = &args.samplers {
        file.samplers = s.clone();
    }
    if let Some(s) = &args.seeds {
        file.seeds = s.clone();
    }
    file.train.epochs = args.epochs.unwrap_or(file.train.epochs);
    file.train.mode = args.mode.unwrap_or(file.train.mode);
    if file.samplers.len() < 2 {
        return Err(Failure::Usage(anyhow!("compare needs at least 2 samplers, got {}", file.samplers.len())));
    }
    if file.seeds.is_empty() {
        return Err(Failure::Usage(anyhow!("compare needs at least one seed")));
    }
    for &sampler in &file.samplers {
        TrainConfig {
            sampler,
            ..file.train.clone()
        }
        .validate()
        .map_err(core_failure)?;
    }
    let (dataset, dref) = load_dataset(&file.dataset, expected.as_deref())?;
    file.dataset = dref.path.clone();
    let comparison = run_grid(&file.train, &dataset, &file.samplers, &file.seeds).map_err(core_failure)?;

    let mut out = OutDir::create(&args.out).map_err(other)?;
    out.write("comparison.csv", comparison_csv(&comparison)).map_err(other)?;
    let text = comparison_text(&comparison);
    out.write("comparison.txt", &text).map_err(other)?;
    let report = CompareReport {
        command: "compare",
        dataset_sha256: &dref.sha256,
        config: &file.train,
        samplers: &file.samplers,
        seeds: &file.seeds,
        comparison: &comparison,
    };
    out.write_json("report.json", &report).map_err(other)?;
    out.finish("compare", &file, None, Some(dref)).map_err(other)?;
    print!("{text}");
    Ok(())
}

// eval

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub metric: Option<metasampler::losses::Metric>,
    pub out: PathBuf,
}

fn load_model(path: &Path) -> Result<ModelParams, Failure> {
    let path = existing(path, "model checkpoint")?;
    let entries = checkpoint::load(&path).map_err(|e| Failure::Usage(anyhow!("{}: {e}", path.display())))?;
    ModelParams::from_entries(&entries).map_err(|e| Failure::Usage(anyhow!("{}: {e}", path.display())))
}

fn load_sampler(path: &Path) -> Result<SamplerParams, Failure> {
    let path = existing(path, "sampler checkpoint")?;
    let entries = checkpoint::load(&path).map_err(|e| Failure::Usage(anyhow!("{}: {e}", path.display())))?;
    SamplerParams::from_entries(&entries).map_err(|e| Failure::Usage(anyhow!("{}: {e}", path.display())))
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let (mut file, expected) = match &args.config {
        Some(p) => {
            let loaded = load_config::<EvalFile>(p, "eval")?;
            let mut f = loaded.config;
            f.dataset = resolve(Some(p), &f.dataset);
            f.model = resolve(Some(p), &f.model);
            (f, loaded.expected_sha256)
        }
        None => (
            EvalFile {
                dataset: args.dataset.clone().ok_or_else(|| Failure::Usage(anyhow!("eval needs --config or --dataset")))?,
                model: args.model.clone().ok_or_else(|| Failure::Usage(anyhow!("eval needs --config or --model")))?,
                metric: Default::default(),
            },
            None,
        ),
    };
    if let Some(d) = &args.dataset {
        file.dataset = d.clone();
    }
    if let Some(m) = &args.model {
        file.model = m.clone();
    }
    file.metric = args.metric.unwrap_or(file.metric);
    let (dataset, dref) = load_dataset(&file.dataset, expected.as_deref())?;
    let model = load_model(&file.model)?;
    file.dataset = dref.path.clone();
    file.model = existing(&file.model, "model checkpoint")?;
    if model.dims().input_dim != dataset.dims || model.dims().num_identities != dataset.num_identities {
        return Err(Failure::Usage(anyhow!(
            "model expects {} inputs and {} identities; dataset has {} and {}",
            model.dims().input_dim,
            model.dims().num_identities,
            dataset.dims,
            dataset.num_identities
        )));
    }
    let metrics = final_metrics(&model, &dataset, file.metric).map_err(core_failure)?;
    let mut out = OutDir::create(&args.out).map_err(other)?;
    out.write_json("eval.json", &metrics).map_err(other)?;
    out.finish("eval", &file, None, Some(dref)).map_err(other)?;
    let r = &metrics.retrieval;
    println!(
        "mAP {:.4} rank1 {:.4} rank5 {:.4} over {} queries; query accuracy {:.4}",
        r.map, r.rank1, r.rank5, r.num_queries, metrics.query_accuracy
    );
    Ok(())
}

// dump-policy

pub struct DumpArgs {
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub sampler: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn dump_policy(args: DumpArgs) -> Result<(), Failure> {
    let (mut file, expected) = match &args.config {
        Some(p) => {
            let loaded = load_config::<DumpFile>(p, "dump-policy")?;
            let mut f = loaded.config;
            f.dataset = resolve(Some(p), &f.dataset);
            f.model = resolve(Some(p), &f.model);
            f.sampler = resolve(Some(p), &f.sampler);
            (f, loaded.expected_sha256)
        }
        None => {
            let need = |v: &Option<PathBuf>, flag: &str| {
                v.clone().ok_or_else(|| Failure::Usage(anyhow!("dump-policy needs --config or --{flag}")))
            };
            (
                DumpFile {
                    dataset: need(&args.dataset, "dataset")?,
                    model: need(&args.model, "model")?,
                    sampler: need(&args.sampler, "sampler")?,
                },
                None,
            )
        }
    };
    let (dataset, dref) = load_dataset(&file.dataset, expected.as_deref())?;
    let model = load_model(&file.model)?;
    let sampler = load_sampler(&file.sampler)?;
    file.dataset = dref.path.clone();
    file.model = existing(&file.model, "model checkpoint")?;
    file.sampler = existing(&file.sampler, "sampler checkpoint")?;
    let train = dataset.train_set().map_err(core_failure)?;
    let policy = refresh_policy(&train, &model, &sampler).map_err(core_failure)?;
    let dump = PolicyDump {
        iteration: 0,
        epoch: 0,
        probabilities: policy.ids().iter().zip(policy.probs()).map(|(&p, &q)| (train.ids[p], q)).collect(),
    };
    let mut out = OutDir::create(&args.out).map_err(other)?;
    let path = out.write("policy.csv", policy_csv(&dump.probabilities)).map_err(other)?;
    out.finish("dump-policy", &file, None, Some(dref)).map_err(other)?;
    println!("wrote {} ({} samples, entropy {:.4})", path.display(), policy.len(), policy.entropy());
    Ok(())
}

// gradcheck

pub struct GradcheckArgs {
    pub seed: u64,
    pub dims: ToyDims,
    pub break_meta: bool,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckReport<'a> {
    seed: u64,
    dims: ToyDims,
    break_meta: bool,
    tolerance: f64,
    passed: bool,
    checks: &'a [CheckResult],
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let opts = MetaOptions {
        break_normalizer: args.break_meta,
    };
    let checks = gradcheck_suite(args.seed, args.dims, opts).map_err(core_failure)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{:<width$}  max rel err {:.3e}  (coordinate {} of {})  {}",
            c.name,
            c.max_relative_error,
            c.worst_coordinate,
            c.coordinates,
            if c.passed(GRADCHECK_TOLERANCE) { "ok" } else { "FAIL" }
        );
    }
    let failing: Vec<&CheckResult> = checks.iter().filter(|c| !c.passed(GRADCHECK_TOLERANCE)).collect();
    if let Some(out_dir) = &args.out {
        let mut out = OutDir::create(out_dir).map_err(other)?;
        let report = GradcheckReport {
            seed: args.seed,
            dims: args.dims,
            break_meta: args.break_meta,
            tolerance: GRADCHECK_TOLERANCE,
            passed: failing.is_empty(),
            checks: &checks,
        };
        out.write_json("gradcheck.json", &report).map_err(other)?;
        let echo = serde_json::json!({ "seed": args.seed, "dims": args.dims, "break_meta": args.break_meta });
        out.finish("gradcheck", &echo, Some(args.seed), None).map_err(other)?;
    }
    let worst = checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    if failing.is_empty() {
        println!("all {} checks passed; max relative error {worst:.3e} < {GRADCHECK_TOLERANCE:e}", checks.len());
        Ok(())
    } else {
        let list: Vec<String> = failing
            .iter()
            .map(|c| format!("{} (coordinate {}, rel err {:.3e})", c.name, c.worst_coordinate, c.max_relative_error))
            .collect();
        Err(Failure::Numerical(anyhow!("gradient check failed: {}", list.join("; "))))
    }
}
