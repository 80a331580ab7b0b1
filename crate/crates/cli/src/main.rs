use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use autofis::config::{DataSource, RunConfig};
use autofis::data::Order;
use autofis::ingest::buckets_to_text;
use autofis::metrics::{histogram, pearson, statistics_auc_all, top_n};
use autofis::network::{Head, Model, ModelConfig};
use autofis::persistence::{self, write_atomic, Checkpoint, InteractionManifest};
use autofis::pipeline::{self, Prepared, RunReport, StageReport};

#[derive(Parser)]
#[command(name = "autofis", version, about = "Feature interaction search and gated retraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs of every stage, overriding `search.epochs` and `retrain.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory, overriding `run.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Validate the config, print the plan and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a planted synthetic task and write its splits.
    SynthGen(Common),
    /// Encode a raw log into schema, vocabulary and splits.
    Ingest(Common),
    /// Train the unrestricted baseline.
    Train(Common),
    /// Search α and write the manifest.
    Search {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint in `checkpoints/`, written after each
        /// epoch.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrain fresh weights under a manifest's gates.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Search then retrain.
    Pipeline(Common),
    /// Search triples on top of a pair manifest, then retrain both.
    ThirdOrder {
        #[command(flatten)]
        common: Common,
        /// Pair manifest; a pair search runs first when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Restrict a target head to a manifest's interactions and train it.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Target head: ipnn or deepfm.
        #[arg(long)]
        head: String,
        /// MLP widths, ending in 1, e.g. `64,64,1`.
        #[arg(long, value_delimiter = ',')]
        mlp: Option<Vec<usize>>,
    },
    /// Evaluate a model checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-interaction α and statistics_AUC, α histograms and seed stability.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifests of other seeds for α stability.
        #[arg(long)]
        compare: Vec<PathBuf>,
        /// Encoded splits and schema, instead of the config's data.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Summarize the reports of one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(e) = c.epochs {
        overrides.push(format!("search.epochs={e}"));
        overrides.push(format!("retrain.epochs={e}"));
    }
    if let Some(out) = &c.out {
        overrides.push(format!("run.output={:?}", out.display().to_string()));
    }
    Ok(RunConfig::from_toml_with(&text, &overrides)?)
}

/// Writes the resolved config and run metadata so the directory explains
/// itself.
fn open_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.run.output.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let meta = format!(
        "command\t{command}\nseed\t{}\nconfig_hash\t{}\nversion\t{}\n",
        cfg.run.seed,
        cfg.hash(),
        env!("CARGO_PKG_VERSION")
    );
    write_atomic(&dir.join("run.txt"), meta.as_bytes())?;
    Ok(dir)
}

fn plan(cfg: &RunConfig, command: &str, stages: &[&str]) {
    println!("command: {command}");
    println!("config hash: {}", cfg.hash());
    println!("seed: {}", cfg.run.seed);
    println!("output: {}", cfg.run.output.display());
    println!("data: {:?}", cfg.data.source);
    for s in stages {
        let (epochs, bs) = if *s == pipeline::SEARCH || *s == pipeline::TRIPLE_SEARCH {
            (cfg.search.epochs, cfg.search.batch_size)
        } else {
            (cfg.retrain.epochs, cfg.retrain.batch_size)
        };
        println!("stage {s}: {epochs} epochs, batch {bs}");
    }
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write_atomic(&dir.join("report.tsv"), report.to_text().as_bytes())?;
    for s in &report.stages {
        print_stage(s);
    }
    Ok(())
}

fn print_stage(s: &StageReport) {
    let mut line = format!("{}: kept pairs {:.1}%", s.name, 100.0 * s.kept_pairs);
    if let Some(t) = s.kept_triples {
        line.push_str(&format!(", kept triples {:.1}%", 100.0 * t));
    }
    if let Some(m) = s.test {
        line.push_str(&format!(", test AUC {:.5}, logloss {:.5}", m.auc, m.logloss));
    }
    line.push_str(&format!(" ({:.1}s)", s.seconds));
    println!("{line}");
}

fn save_model(dir: &Path, cfg: &RunConfig, model: &Model) -> Result<()> {
    pipeline::model_checkpoint(model, &cfg.hash())?.save(&dir.join("model.ckpt"))?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<InteractionManifest> {
    InteractionManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = pipeline::prepare_data(cfg)?;
    log::info!(
        "data: {} train rows, {} test rows, {} fields",
        data.train.len(),
        data.test.as_ref().map_or(0, |t| t.len()),
        data.schema.field_count()
    );
    Ok(data)
}

fn write_splits(dir: &Path, data: &Prepared) -> Result<()> {
    write_atomic(
        &dir.join("schema.txt"),
        persistence::schema_to_text(&data.schema).as_bytes(),
    )?;
    persistence::save_dataset(dir, "train", &data.train)?;
    if let Some(test) = &data.test {
        persistence::save_dataset(dir, "test", test)?;
    }
    Ok(())
}

fn stability(manifests: &[InteractionManifest]) -> Result<String> {
    let mut out = String::from("a\tb\tpearson_abs_alpha\n");
    for a in 0..manifests.len() {
        for b in a + 1..manifests.len() {
            let x: Vec<f64> = manifests[a].alpha.values().iter().map(|v| v.abs()).collect();
            let y: Vec<f64> = manifests[b].alpha.values().iter().map(|v| v.abs()).collect();
            let r = pearson(&x, &y)?;
            out.push_str(&format!("{}\t{}\t{r}\n", manifests[a].seed, manifests[b].seed));
        }
    }
    Ok(out)
}

fn analyze(
    cfg: &RunConfig,
    manifest: &Path,
    compare: &[PathBuf],
    encoded: (Option<PathBuf>, Option<PathBuf>, Option<PathBuf>),
) -> Result<()> {
    let m = load_manifest(manifest)?;
    let (train, test, schema) = match encoded {
        (Some(train), Some(test), Some(schema)) => {
            let schema = persistence::load_schema(&schema)?;
            let train = persistence::load_dataset(&train, &schema)?;
            let test = persistence::load_dataset(&test, &schema)?;
            (train, test, schema)
        }
        (None, None, None) => {
            let data = prepare(cfg)?;
            let test = data.test.context("analysis needs a test split")?;
            (data.train, test, data.schema)
        }
        _ => bail!("--train, --test and --schema go together"),
    };
    m.check_schema(&schema)?;
    let dir = open_run(cfg, "analyze")?;
    let pair_ids: Vec<_> = m
        .alpha
        .ids()
        .iter()
        .copied()
        .filter(|id| id.order() == Order::Pair)
        .collect();
    let pair_alpha = m.alpha.of_order(Order::Pair);
    let stats = statistics_auc_all(&train, &test, &pair_ids, cfg.run.execution)?;
    let mut table = String::from("id\talpha\tstatistics_auc\n");
    for ((id, a), s) in pair_ids.iter().zip(&pair_alpha).zip(&stats) {
        table.push_str(&format!("{id}\t{a}\t{s}\n"));
    }
    write_atomic(&dir.join("alpha_statistics_auc.tsv"), table.as_bytes())?;

    let kept = m.gates.of_order(Order::Pair).iter().filter(|&&g| g).count();
    let top = top_n(&pair_ids, &stats, kept);
    let mut top_text = String::from("rank\tid\tstatistics_auc\tselected\n");
    for (r, id) in top.iter().enumerate() {
        let k = pair_ids.iter().position(|x| x == id).expect("id from list");
        top_text.push_str(&format!(
            "{}\t{id}\t{}\t{}\n",
            r + 1,
            stats[k],
            u8::from(m.gates.is_open(id))
        ));
    }
    write_atomic(&dir.join("top_statistics_auc.tsv"), top_text.as_bytes())?;

    let mut hist_text = String::from("order\tbin_lo\tbin_hi\tcount\n");
    for order in [Order::Pair, Order::Triple] {
        let values = m.alpha.of_order(order);
        if values.is_empty() {
            continue;
        }
        let h = histogram(&values, 10);
        let name = if order == Order::Pair { "pair" } else { "triple" };
        hist_text.push_str(&format!("{name}\tzero\tzero\t{}\n", h.zeros));
        let width = (h.hi - h.lo) / h.counts.len() as f64;
        for (b, c) in h.counts.iter().enumerate() {
            let lo = h.lo + width * b as f64;
            hist_text.push_str(&format!("{name}\t{lo}\t{}\t{c}\n", lo + width));
        }
    }
    write_atomic(&dir.join("alpha_histogram.tsv"), hist_text.as_bytes())?;

    if !compare.is_empty() {
        let mut all = vec![m.clone()];
        for p in compare {
            let other = load_manifest(p)?;
            if other.alpha.ids() != m.alpha.ids() {
                bail!("{} covers different interactions", p.display());
            }
            all.push(other);
        }
        let text = stability(&all)?;
        write_atomic(&dir.join("seed_stability.tsv"), text.as_bytes())?;
        print!("{text}");
    }
    print!("{table}");
    Ok(())
}

fn report(runs: &[PathBuf]) -> Result<()> {
    println!("run\tstage\tkey\tvalue");
    for run in runs {
        let path = if run.is_dir() {
            run.join("report.tsv")
        } else {
            run.clone()
        };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        for (stage, key, value) in pipeline::report_summary(&text)? {
            println!("{}\t{stage}\t{key}\t{value}", run.display());
        }
    }
    Ok(())
}

fn target_config(cfg: &RunConfig, head: &str, mlp: Option<Vec<usize>>) -> Result<ModelConfig> {
    let head = match head {
        "ipnn" => Head::Ipnn,
        "deepfm" => Head::DeepFm,
        other => bail!("transfer targets ipnn or deepfm, not `{other}`"),
    };
    let mlp_layers = match (mlp, cfg.model.head.uses_mlp()) {
        (Some(l), _) => l,
        (None, true) => cfg.model.mlp_layers.clone(),
        (None, false) => vec![64, 64, 1],
    };
    let target = ModelConfig {
        head,
        mlp_layers,
        ..cfg.model.clone()
    };
    target.validate()?;
    Ok(target)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(c) => {
            let cfg = load_config(&c)?;
            if cfg.data.source != DataSource::Synthetic {
                bail!("synth-gen needs data.source = \"synthetic\"");
            }
            if c.dry_run {
                plan(&cfg, "synth-gen", &[]);
                return Ok(());
            }
            let dir = open_run(&cfg, "synth-gen")?;
            let data = prepare(&cfg)?;
            data.synthetic
                .as_ref()
                .expect("synthetic source")
                .save(&dir.join("spec.toml"))?;
            write_splits(&dir, &data)?;
            println!(
                "wrote {} train and {} test rows to {}",
                data.train.len(),
                data.test.as_ref().map_or(0, |t| t.len()),
                dir.display()
            );
        }
        Command::Ingest(c) => {
            let cfg = load_config(&c)?;
            if cfg.data.source != DataSource::Raw {
                bail!("ingest needs data.source = \"raw\"");
            }
            if c.dry_run {
                plan(&cfg, "ingest", &[]);
                return Ok(());
            }
            let dir = open_run(&cfg, "ingest")?;
            let data = prepare(&cfg)?;
            let (vocab, buckets) = data.vocab.as_ref().expect("raw source");
            write_atomic(&dir.join("vocab.txt"), vocab.to_text().as_bytes())?;
            let names: Vec<String> = data.schema.names().to_vec();
            write_atomic(&dir.join("buckets.txt"), buckets_to_text(&names, buckets).as_bytes())?;
            write_splits(&dir, &data)?;
            println!(
                "encoded {} train and {} test rows into {}",
                data.train.len(),
                data.test.as_ref().map_or(0, |t| t.len()),
                dir.display()
            );
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            if c.dry_run {
                plan(&cfg, "train", &[pipeline::PLAIN]);
                return Ok(());
            }
            let dir = open_run(&cfg, "train")?;
            let data = prepare(&cfg)?;
            let (model, stage) = pipeline::train_plain(&cfg, &data)?;
            save_model(&dir, &cfg, &model)?;
            let mut r = RunReport::new(&cfg);
            r.stages.push(stage);
            write_report(&dir, &r)?;
        }
        Command::Search { common: c, resume } => {
            let cfg = load_config(&c)?;
            if c.dry_run {
                plan(&cfg, "search", &[pipeline::SEARCH]);
                return Ok(());
            }
            let dir = open_run(&cfg, "search")?;
            let data = prepare(&cfg)?;
            let resume = match resume {
                Some(p) => Some(Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?),
                None => None,
            };
            let ckpt_dir = dir.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            let hash = cfg.hash();
            let out = pipeline::search_with(&cfg, &data, resume.as_ref(), &mut |t| {
                let path = ckpt_dir.join(format!("search-{:04}.ckpt", t.cursor.epoch));
                t.to_checkpoint(&hash)?.save(&path)
            })?;
            out.manifest.save(&dir.join("manifest.txt"))?;
            let mut r = RunReport::new(&cfg);
            r.stages.push(out.report);
            write_report(&dir, &r)?;
        }
        Command::Retrain { common: c, manifest } => {
            let cfg = load_config(&c)?;
            let m = load_manifest(&manifest)?;
            if c.dry_run {
                plan(&cfg, "retrain", &[pipeline::RETRAIN]);
                return Ok(());
            }
            let dir = open_run(&cfg, "retrain")?;
            let data = prepare(&cfg)?;
            let (model, stage) = pipeline::retrain_stage(&cfg, &data, &m)?;
            save_model(&dir, &cfg, &model)?;
            let mut r = RunReport::new(&cfg);
            r.stages.push(stage);
            write_report(&dir, &r)?;
        }
        Command::Pipeline(c) => {
            let cfg = load_config(&c)?;
            if c.dry_run {
                plan(&cfg, "pipeline", &[pipeline::SEARCH, pipeline::RETRAIN]);
                return Ok(());
            }
            let dir = open_run(&cfg, "pipeline")?;
            let data = prepare(&cfg)?;
            let out = pipeline::run_pipeline(&cfg, &data)?;
            out.manifest.save(&dir.join("manifest.txt"))?;
            save_model(&dir, &cfg, &out.model)?;
            write_report(&dir, &out.report)?;
        }
        Command::ThirdOrder { common: c, manifest } => {
            let cfg = load_config(&c)?;
            let pairs = manifest.as_deref().map(load_manifest).transpose()?;
            if c.dry_run {
                let mut stages = vec![pipeline::TRIPLE_SEARCH, pipeline::TRIPLE_RETRAIN];
                if pairs.is_none() {
                    stages.insert(0, pipeline::SEARCH);
                }
                plan(&cfg, "third-order", &stages);
                return Ok(());
            }
            let dir = open_run(&cfg, "third-order")?;
            let data = prepare(&cfg)?;
            let mut pre = Vec::new();
            let pairs = match pairs {
                Some(p) => p,
                None => {
                    let s = pipeline::search_stage(&cfg, &data)?;
                    s.manifest.save(&dir.join("manifest_pairs.txt"))?;
                    pre.push(s.report);
                    s.manifest
                }
            };
            let mut out = pipeline::third_order_pipeline(&cfg, &data, &pairs)?;
            out.manifest.save(&dir.join("manifest.txt"))?;
            save_model(&dir, &cfg, &out.model)?;
            pre.append(&mut out.report.stages);
            out.report.stages = pre;
            write_report(&dir, &out.report)?;
        }
        Command::Transfer {
            common: c,
            manifest,
            head,
            mlp,
        } => {
            let cfg = load_config(&c)?;
            let m = load_manifest(&manifest)?;
            let target = target_config(&cfg, &head, mlp)?;
            if c.dry_run {
                plan(&cfg, "transfer", &[pipeline::TRANSFER]);
                println!("target head: {:?}, mlp {:?}", target.head, target.mlp_layers);
                return Ok(());
            }
            let dir = open_run(&cfg, "transfer")?;
            let data = prepare(&cfg)?;
            let (model, stage) = pipeline::transfer_stage(&cfg, &data, &m, &target)?;
            println!(
                "{:?} restricted to {} of {} interactions",
                target.head,
                m.gates.open_count(),
                m.gates.ids().len()
            );
            save_model(&dir, &cfg, &model)?;
            let mut r = RunReport::new(&cfg);
            r.stages.push(stage);
            write_report(&dir, &r)?;
        }
        Command::Eval { common: c, model } => {
            let cfg = load_config(&c)?;
            if c.dry_run {
                plan(&cfg, "eval", &[]);
                return Ok(());
            }
            let data = prepare(&cfg)?;
            let test = data.test.as_ref().context("evaluation needs a test split")?;
            let ckpt = Checkpoint::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let net = pipeline::model_from_checkpoint(&ckpt, &data.schema)?;
            let m = pipeline::evaluate(&net, test, cfg.eval.batch_size, cfg.run.execution)?;
            let dir = open_run(&cfg, "eval")?;
            let text = format!("model\t{}\nauc\t{}\nlogloss\t{}\n", model.display(), m.auc, m.logloss);
            write_atomic(&dir.join("eval.tsv"), text.as_bytes())?;
            print!("{text}");
        }
        Command::Analyze {
            common: c,
            manifest,
            compare,
            train,
            test,
            schema,
        } => {
            let cfg = load_config(&c)?;
            if c.dry_run {
                plan(&cfg, "analyze", &[]);
                return Ok(());
            }
            analyze(&cfg, &manifest, &compare, (train, test, schema))?;
        }
        Command::Report { runs } => report(&runs)?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_the_config() {
        let c = Common {
            config: None,
            seed: Some(9),
            epochs: Some(3),
            out: Some(PathBuf::from("x/y")),
            overrides: vec!["grda.c=0.01".into()],
            dry_run: false,
        };
        let cfg = load_config(&c).unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!((cfg.search.epochs, cfg.retrain.epochs), (3, 3));
        assert_eq!(cfg.run.output, PathBuf::from("x/y"));
        assert_eq!(cfg.grda.c, 0.01);
    }

    #[test]
    fn transfer_targets_are_checked() {
        let cfg = RunConfig::default();
        assert_eq!(target_config(&cfg, "ipnn", None).unwrap().mlp_layers, vec![64, 64, 1]);
        assert!(target_config(&cfg, "fm", None).is_err());
        assert!(target_config(&cfg, "deepfm", Some(vec![4])).is_err());
    }
}
