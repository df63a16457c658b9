use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;

use cacl_core::augment::Image;
use cacl_core::dataset::{write_dataset, Dataset, SplitTag};
use cacl_core::evaluation::EvalResult;
use cacl_core::loss_check::gradient_suite;
use cacl_core::trainer::{
    ablation_csv, batch_log_csv, cluster_features, history_csv, parse_row, run_ablation, summarize, Checkpoint,
    TrainConfig, TrainState,
};
use serde::Serialize;

use crate::args::{AblateArgs, Branch, CheckpointArgs, DataArgs, DumpArgs, GlobalArgs, GradcheckArgs, TrainArgs};
use crate::manifest::{unix_now, Outputs};
use crate::resolve::{input_hash, load_data, resolve_config};
use crate::CliError;

pub fn gen_data(global: &GlobalArgs, args: &DataArgs) -> Result<(), CliError> {
    let started = unix_now();
    let cfg = resolve_config(global, None, &[])?;
    let (ds, source) = load_data(args, cfg.seed)?;
    let mut out = Outputs::new(&global.out)?;
    let manifest = write_dataset(&global.out, &ds)?;
    for e in &manifest.entries {
        out.record(&e.path);
    }
    out.record(cacl_core::dataset::MANIFEST_FILE);
    println!("wrote {} images to {}", ds.len(), global.out.display());
    out.finish("gen-data", None, Some(source), input_hash(None, Some(&ds)), started)
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    epochs: usize,
    last: Option<&'a EvalResult>,
    last_second: Option<&'a EvalResult>,
    best_map: f64,
    best_epoch: Option<usize>,
    collapse_detected: bool,
}

pub fn train(global: &GlobalArgs, args: &TrainArgs) -> Result<(), CliError> {
    let started = unix_now();
    let cfg = resolve_config(global, None, &args.flags.pairs())?;
    let (ds, source) = load_data(&args.data, cfg.seed)?;
    let mut out = Outputs::new(&global.out)?;
    out.write("config.txt", cfg.to_text())?;

    let mut st = TrainState::new(&cfg, &ds)?;
    for _ in 0..cfg.epochs {
        let r = st.epoch(&ds)?;
        println!(
            "epoch {:>3}  clusters {:>3}  labeled {:.2}  loss {:+.4}  mAP {:.4}  cmc1 {:.4}",
            r.epoch, r.num_clusters, r.labeled_fraction, r.loss_total, r.eval.map, r.eval.cmc1
        );
    }

    out.write("history.csv", history_csv(&st.history))?;
    out.write("batches.csv", batch_log_csv(&st.batch_log))?;
    st.checkpoint().save(&out.path("checkpoint.json"))?;
    out.record("checkpoint.json");
    if let Some(best) = &st.best {
        best.save(&out.path("best.json"))?;
        out.record("best.json");
    }
    let last = st.history.last();
    out.write_json(
        "metrics.json",
        &TrainMetrics {
            epochs: st.epochs_done(),
            last: last.map(|r| &r.eval),
            last_second: last.map(|r| &r.eval_second),
            best_map: st.best_map,
            best_epoch: st.best_epoch,
            collapse_detected: st.collapse_detected(),
        },
    )?;
    if let Some(r) = last {
        println!("final mAP {:.4}  best mAP {:.4}", r.eval.map, st.best_map);
    }
    out.finish(
        "train",
        Some(&cfg),
        Some(source),
        input_hash(Some(&cfg), Some(&ds)),
        started,
    )
}

/// Loads a checkpoint and resolves its config with any overrides.
fn load_checkpoint(global: &GlobalArgs, args: &CheckpointArgs) -> Result<(Checkpoint, TrainConfig), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = resolve_config(global, Some(&ck.config), &[])?;
    Ok((ck, cfg))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    epoch: usize,
    first: &'a EvalResult,
    second: &'a EvalResult,
}

const EVAL_CSV_HEADER: &str = "checkpoint,epoch,branch,map,cmc1,cmc5,cmc10\n";

pub fn eval(global: &GlobalArgs, args: &CheckpointArgs) -> Result<(), CliError> {
    let started = unix_now();
    let (ck, cfg) = load_checkpoint(global, args)?;
    let (ds, source) = load_data(&args.data, cfg.seed)?;
    let (first, second) = ck.model.evaluate(&ds, &cfg)?;
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        epoch: ck.epoch,
        first: &first,
        second: &second,
    };
    let mut out = Outputs::new(&global.out)?;
    out.write_json("eval.json", &report)?;
    println!("{}", serde_json::to_string(&report).map_err(cacl_core::Error::from)?);

    let csv = out.path("eval.csv");
    let fresh = !csv.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv)
        .map_err(|e| cacl_core::Error::io(&csv, e))?;
    let mut rows = String::new();
    if fresh {
        rows.push_str(EVAL_CSV_HEADER);
    }
    for (branch, r) in [("first", &first), ("second", &second)] {
        rows.push_str(&format!(
            "{},{},{branch},{},{},{},{}\n",
            report.checkpoint, ck.epoch, r.map, r.cmc1, r.cmc5, r.cmc10
        ));
    }
    f.write_all(rows.as_bytes())
        .map_err(|e| cacl_core::Error::io(&csv, e))?;
    out.record("eval.csv");
    out.finish(
        "eval",
        Some(&cfg),
        Some(source),
        input_hash(Some(&cfg), Some(&ds)),
        started,
    )
}

/// Training-image clustering of a checkpoint: dataset index to cluster id,
/// `-1` for unlabeled images.
fn cluster_training(ck: &Checkpoint, cfg: &TrainConfig, ds: &Dataset) -> Result<ClusterReport, CliError> {
    let train = ds.indices(SplitTag::Train);
    let features = ck.model.features(&ds.images(&train))?;
    let clusters = cluster_features(&features, cfg, ck.epoch)?;
    let assignment = train.iter().copied().zip(clusters.refined.to_signed()).collect();
    Ok(ClusterReport {
        epoch: ck.epoch,
        num_clusters: clusters.refined.num_clusters(),
        coarse_clusters: clusters.coarse.num_clusters(),
        labeled_fraction: clusters.refined.labeled_fraction(),
        assignment,
    })
}

#[derive(Serialize)]
struct ClusterReport {
    epoch: usize,
    num_clusters: usize,
    coarse_clusters: usize,
    labeled_fraction: f64,
    assignment: BTreeMap<usize, i64>,
}

pub fn cluster(global: &GlobalArgs, args: &CheckpointArgs) -> Result<(), CliError> {
    let started = unix_now();
    let (ck, cfg) = load_checkpoint(global, args)?;
    let (ds, source) = load_data(&args.data, cfg.seed)?;
    let report = cluster_training(&ck, &cfg, &ds)?;
    let mut out = Outputs::new(&global.out)?;
    out.write_json("clusters.json", &report)?;
    println!(
        "{} clusters ({} before refinement), {:.1}% of {} training images labeled",
        report.num_clusters,
        report.coarse_clusters,
        100.0 * report.labeled_fraction,
        report.assignment.len()
    );
    out.finish(
        "cluster",
        Some(&cfg),
        Some(source),
        input_hash(Some(&cfg), Some(&ds)),
        started,
    )
}

fn split_name(tag: SplitTag) -> &'static str {
    match tag {
        SplitTag::Train => "train",
        SplitTag::Query => "query",
        SplitTag::Gallery => "gallery",
        SplitTag::Excluded => "excluded",
    }
}

pub fn dump_embeddings(global: &GlobalArgs, args: &DumpArgs) -> Result<(), CliError> {
    let started = unix_now();
    let (ck, cfg) = load_checkpoint(global, &args.checkpoint)?;
    let (ds, source) = load_data(&args.checkpoint.data, cfg.seed)?;
    let labels = cluster_training(&ck, &cfg, &ds)?.assignment;
    let all: Vec<usize> = (0..ds.len()).collect();
    let images: Vec<&Image> = ds.images(&all);
    let features = match args.branch {
        Branch::First => ck.model.features(&images)?,
        Branch::Second => ck.model.features_second(&images, &cfg)?,
    };
    let mut csv = String::from("index,identity,camera,split,pseudo_label");
    for d in 0..features.cols() {
        csv.push_str(&format!(",f{d}"));
    }
    csv.push('\n');
    for (i, s) in ds.samples.iter().enumerate() {
        let label = labels.get(&i).copied().unwrap_or(-1);
        csv.push_str(&format!(
            "{i},{},{},{},{label}",
            s.identity,
            s.camera,
            split_name(ds.tags[i])
        ));
        for v in features.row(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let mut out = Outputs::new(&global.out)?;
    out.write("embeddings.csv", csv)?;
    println!("wrote {} x {} features", ds.len(), features.cols());
    out.finish(
        "dump-embeddings",
        Some(&cfg),
        Some(source),
        input_hash(Some(&cfg), Some(&ds)),
        started,
    )
}

pub fn gradcheck(global: &GlobalArgs, args: &GradcheckArgs) -> Result<(), CliError> {
    let started = unix_now();
    if args.points == 0 || args.tol.is_nan() || args.tol <= 0.0 || args.step.is_nan() || args.step <= 0.0 {
        return Err(CliError::Usage("--points, --tol and --step must be positive".into()));
    }
    let seed = global.seed.unwrap_or(1);
    let rows = gradient_suite(args.points, seed, args.step, args.tol)?;
    let mut csv = String::from("family,points,worst_error,failures\n");
    println!("{:<36} {:>6} {:>12}  result", "loss", "points", "worst error");
    for r in &rows {
        println!(
            "{:<36} {:>6} {:>12.3e}  {}",
            r.name,
            r.points,
            r.worst_error,
            if r.failures == 0 { "pass" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "\"{}\",{},{},{}\n",
            r.name, r.points, r.worst_error, r.failures
        ));
    }
    let mut out = Outputs::new(&global.out)?;
    out.write("gradcheck.csv", csv)?;
    out.finish("gradcheck", None, None, input_hash(None, None), started)?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.failures > 0)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn ablate(global: &GlobalArgs, args: &AblateArgs) -> Result<(), CliError> {
    let started = unix_now();
    let cfg = resolve_config(global, None, &args.flags.pairs())?;
    for row in &args.rows {
        parse_row(row).map_err(|e| CliError::Usage(format!("row `{row}`: {e}")))?;
    }
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let results = run_ablation(&cfg, &args.rows, &args.seeds, |seed| {
        load_data(&args.data, seed).map(|(ds, _)| ds).map_err(|e| match e {
            CliError::Runtime(e) => e,
            other => cacl_core::Error::InvalidArgument(other.to_string()),
        })
    })?;
    let summaries = summarize(&results);
    let mut out = Outputs::new(&global.out)?;
    out.write("config.txt", cfg.to_text())?;
    let csv = ablation_csv(&summaries);
    out.write("ablation.csv", &csv)?;
    let mut runs = String::from("row,seed,map,cmc1,cmc5,cmc10,map_second,best_map,collapsed\n");
    for r in &results {
        runs.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.row,
            r.seed,
            r.eval.map,
            r.eval.cmc1,
            r.eval.cmc5,
            r.eval.cmc10,
            r.eval_second.map,
            r.best_map,
            r.collapsed
        ));
    }
    out.write("ablation_runs.csv", runs)?;
    out.write_json("ablation.json", &summaries)?;
    print!("{csv}");
    let seeds: Vec<String> = args.seeds.iter().map(u64::to_string).collect();
    let source = match &args.data.data {
        Some(dir) => dir.display().to_string(),
        None => format!("synthetic, seeds {}", seeds.join(",")),
    };
    out.finish(
        "ablate",
        Some(&cfg),
        Some(source),
        input_hash(Some(&cfg), None),
        started,
    )
}
