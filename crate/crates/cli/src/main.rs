//! `car`: preprocess lists, learn co-occurrence embeddings, train and evaluate
//! the list-continuation recommender, and analyse where each head wins.

mod settings;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use car_core::checkpoint;
use car_core::cooc::{self, CoocEmbeddings, SkipGramConfig};
use car_core::data::{self, Corpus};
use car_core::eval;
use car_core::model::Variant;
use car_core::synth::{self, SyntheticSpec};
use car_core::train::{self, TrainConfig};

use settings::Settings;

#[derive(Parser)]
#[command(name = "car", version, about = "Consistency-aware list continuation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key=value file supplying defaults; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and truncate a raw interaction file.
    Prep {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        min_item_count: Option<usize>,
        #[arg(long)]
        min_list_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print corpus statistics.
    Stats {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Learn skip-gram item embeddings from list co-occurrence.
    Embed {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every list's consistency and write a histogram.
    Consistency {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        /// Histogram CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-list scores CSV (default: `<out stem>.scores.csv`).
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train a model with early stopping on validation NDCG@5.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log CSV (default: `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank each list's test item among sampled negatives.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        negatives: Option<usize>,
        /// Comma-separated cutoffs.
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test every variant under identical settings.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        hyper: Hyper,
        /// Comma-separated variants (default: all).
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare consistency of lists won by the general vs the current head.
    Analyze {
        #[arg(long)]
        gupm: Option<PathBuf>,
        #[arg(long)]
        cppm: Option<PathBuf>,
        #[arg(long)]
        consistency: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a clustered corpus with planted drift.
    Synth {
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        items_per_cluster: Option<usize>,
        #[arg(long)]
        lists: Option<usize>,
        /// Inclusive length range `min..max`.
        #[arg(long)]
        len: Option<String>,
        #[arg(long)]
        drift: Option<f64>,
        #[arg(long)]
        segment: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional `list<TAB>consistent|drift` file.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Hyper {
    /// Embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Maximum prefix length.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    user_embedding: bool,
    /// Sampled negatives for validation (and testing in `ablate`).
    #[arg(long)]
    negatives: Option<usize>,
    /// Store wall-clock seconds per epoch in the log (makes logs non-reproducible).
    #[arg(long)]
    record_time: bool,
}

struct Ctx {
    settings: Settings,
    seed: u64,
    threads: usize,
}

impl Ctx {
    fn train_config(&self, h: &Hyper, variant: Option<Variant>) -> Result<(TrainConfig, usize)> {
        let s = &self.settings;
        let d = TrainConfig::default();
        let config = TrainConfig {
            batch_size: s.get(h.batch, "batch", d.batch_size)?,
            learning_rate: s.get(h.lr, "lr", d.learning_rate)?,
            dim: s.get(h.d, "d", d.dim)?,
            max_len: s.get(h.n, "n", d.max_len)?,
            patience: s.get(h.patience, "patience", d.patience)?,
            max_epochs: s.get(h.max_epochs, "max-epochs", d.max_epochs)?,
            use_user_embedding: s.switch(h.user_embedding, "user-embedding")?,
            record_time: s.switch(h.record_time, "record-time")?,
            variant: s.get(variant, "variant", Variant::Car)?,
            seed: self.seed,
            threads: self.threads,
            ..d
        };
        config.validate()?;
        let negatives = s.get(h.negatives, "negatives", 100)?;
        Ok((config, negatives))
    }
}

fn corpus_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("corpus.tsv")
    } else {
        path.to_path_buf()
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = corpus_file(path);
    let f = File::open(&file).with_context(|| format!("opening corpus {}", file.display()))?;
    data::parse_interactions(BufReader::new(f)).with_context(|| format!("reading corpus {}", file.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> car_core::Result<()>,
{
    let mut out = create(path)?;
    body(&mut out).with_context(|| format!("writing {}", path.display()))?;
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|k| k.trim().parse().with_context(|| format!("bad cutoff {k:?}")))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.contains(&0) {
        bail!("cutoffs must be positive integers");
    }
    Ok(ks)
}

fn parse_len(raw: &str) -> Result<(usize, usize)> {
    let (lo, hi) = raw.split_once("..").context("length range must look like MIN..MAX")?;
    let lo = lo.trim().parse().with_context(|| format!("bad length {lo:?}"))?;
    let hi = hi.trim().trim_start_matches('=').parse().with_context(|| format!("bad length {hi:?}"))?;
    Ok((lo, hi))
}

fn read_report(path: &Path) -> Result<Vec<eval::ListRecord>> {
    let file = if path.is_dir() { path.join("records.jsonl") } else { path.to_path_buf() };
    let f = File::open(&file).with_context(|| format!("opening report {}", file.display()))?;
    eval::read_records(BufReader::new(f)).with_context(|| format!("reading report {}", file.display()))
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.global.config.as_deref())?;
    let seed = settings.get(cli.global.seed, "seed", 0)?;
    let threads = settings.get(cli.global.threads, "threads", 1)?.max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker threads")?;
    let ctx = Ctx { settings, seed, threads };
    let s = &ctx.settings;

    match cli.command {
        Command::Prep {
            input,
            min_item_count,
            min_list_len,
            max_len,
            out,
        } => {
            let input: PathBuf = s.require(input, "input")?;
            let out: PathBuf = s.require(out, "out")?;
            let raw = read_corpus(&input)?;
            let filtered = data::filter_corpus(
                &raw,
                s.get(min_item_count, "min-item-count", 5)?,
                s.get(min_list_len, "min-list-len", 5)?,
            );
            let corpus = data::truncate_lists(&filtered, s.get(max_len, "max-len", 1000)?);
            let stats = data::corpus_stats(&corpus);
            write_with(&out.join("corpus.tsv"), |w| data::write_interactions(&corpus, w))?;
            write_with(&out.join("stats.txt"), |w| Ok(writeln!(w, "{stats}")?))?;
            write_with(&out.join("stats.csv"), |w| {
                Ok(writeln!(w, "{}\n{}", data::CorpusStats::CSV_HEADER, stats.csv_row())?)
            })?;
            println!("{stats}");
        }
        Command::Stats { corpus } => {
            let corpus = read_corpus(&s.require::<PathBuf>(corpus, "corpus")?)?;
            println!("{}", data::corpus_stats(&corpus));
        }
        Command::Embed {
            corpus,
            dim,
            window,
            negatives,
            epochs,
            out,
        } => {
            let corpus = read_corpus(&s.require::<PathBuf>(corpus, "corpus")?)?;
            let out: PathBuf = s.require(out, "out")?;
            let d = SkipGramConfig::default();
            let config = SkipGramConfig {
                dim: s.get(dim, "dim", d.dim)?,
                window: s.get(window, "window", d.window)?,
                negatives: s.get(negatives, "negatives", d.negatives)?,
                epochs: s.get(epochs, "epochs", d.epochs)?,
                learning_rate: s.get(None, "embed-lr", d.learning_rate)?,
                seed,
            };
            let lists: Vec<Vec<String>> = corpus.lists.into_iter().map(|l| l.items).collect();
            let emb = cooc::train_cooc_embeddings(&lists, &config)?;
            write_with(&out, |w| emb.write(w))?;
            println!("embedded {} items in {} dimensions", emb.len(), emb.dim());
        }
        Command::Consistency {
            corpus,
            embeddings,
            bins,
            out,
            scores,
        } => {
            let corpus = read_corpus(&s.require::<PathBuf>(corpus, "corpus")?)?;
            let emb_path: PathBuf = s.require(embeddings, "embeddings")?;
            let out: PathBuf = s.require(out, "out")?;
            let bins = s.get(bins, "bins", 20)?;
            if bins == 0 {
                bail!("--bins must be at least 1");
            }
            let f = File::open(&emb_path).with_context(|| format!("opening {}", emb_path.display()))?;
            let emb = CoocEmbeddings::read(BufReader::new(f)).with_context(|| format!("reading {}", emb_path.display()))?;
            let records = cooc::consistency_records(&corpus, &emb)?;
            let hist = cooc::consistency_histogram(&records, bins);
            let scores = match scores {
                Some(p) => p,
                None => out.with_extension("scores.csv"),
            };
            write_with(&out, |w| cooc::write_histogram(&hist, w))?;
            write_with(&scores, |w| cooc::write_consistency_records(&records, w))?;
            let mean = records.iter().map(|r| r.score).sum::<f64>() / records.len().max(1) as f64;
            println!("scored {} lists, mean consistency {mean:.4}", records.len());
        }
        Command::Train {
            corpus,
            hyper,
            variant,
            out,
            log,
        } => {
            let corpus = read_corpus(&s.require::<PathBuf>(corpus, "corpus")?)?;
            let out: PathBuf = s.require(out, "out")?;
            let (config, negatives) = ctx.train_config(&hyper, variant)?;
            let split = data::split_corpus(&corpus)?;
            let fitted = train::fit(&split, &config, |p| eval::validation_score(p, &split, negatives, seed))?;
            let log = log.unwrap_or_else(|| with_suffix(&out, ".log.csv"));
            write_with(&out, |w| checkpoint::save(&fitted.params, checkpoint::catalog_fingerprint(&split), w))?;
            write_with(&log, |w| train::write_training_log(&fitted.log, w))?;
            let best = &fitted.log[fitted.best_epoch - 1];
            println!(
                "best epoch {} of {}: validation NDCG@5 {:.4}, HR@5 {:.4}",
                fitted.best_epoch,
                fitted.log.len(),
                best.val_ndcg5,
                best.val_hr5
            );
        }
        Command::Eval {
            corpus,
            ckpt,
            negatives,
            k,
            out,
        } => {
            let corpus = read_corpus(&s.require::<PathBuf>(corpus, "corpus")?)?;
            let ckpt: PathBuf = s.require(ckpt, "ckpt")?;
            let out: PathBuf = s.require(out, "out")?;
            let negatives = s.get(negatives, "negatives", 100)?;
            let ks = parse_ks(&s.get(k, "k", "5,10".to_string())?)?;
            let split = data::split_corpus(&corpus)?;
            let f = File::open(&ckpt).with_context(|| format!("opening {}", ckpt.display()))?;
            let loaded = checkpoint::load(BufReader::new(f)).with_context(|| format!("reading {}", ckpt.display()))?;
            if loaded.fingerprint != checkpoint::catalog_fingerprint(&split) {
                bail!("checkpoint {} was trained on a different catalog", ckpt.display());
            }
            let report = eval::evaluate(&loaded.params, &split, negatives, &ks, seed)?;
            write_with(&out.join("report.csv"), |w| report.write_csv(w))?;
            write_with(&out.join("records.jsonl"), |w| report.write_records(w))?;
            for (name, value) in report.metrics() {
                println!("{name}={value:.4}");
            }
        }
        Command::Ablate {
            corpus,
            hyper,
            variants,
            k,
            out,
        } => {
            let corpus = read_corpus(&s.require::<PathBuf>(corpus, "corpus")?)?;
            let out: PathBuf = s.require(out, "out")?;
            let (config, negatives) = ctx.train_config(&hyper, None)?;
            let ks = parse_ks(&s.get(k, "k", "5,10".to_string())?)?;
            let variants: Vec<Variant> = match s.optional::<String>(variants, "variants")? {
                Some(v) => v.split(',').map(|x| x.trim().parse()).collect::<car_core::Result<_>>()?,
                None => Variant::ALL.to_vec(),
            };
            let split = data::split_corpus(&corpus)?;
            let fp = checkpoint::catalog_fingerprint(&split);
            let rows = eval::run_ablation(&split, &config, negatives, &ks, &variants)?;
            for row in &rows {
                let dir = out.join(row.variant.name());
                write_with(&dir.join("model.ckpt"), |w| checkpoint::save(&row.params, fp, w))?;
                write_with(&dir.join("train.log.csv"), |w| train::write_training_log(&row.log, w))?;
                write_with(&dir.join("report.csv"), |w| row.report.write_csv(w))?;
                write_with(&dir.join("records.jsonl"), |w| row.report.write_records(w))?;
            }
            write_with(&out.join("ablation.csv"), |w| eval::write_ablation_csv(&rows, w))?;
            for row in &rows {
                let metrics: Vec<String> =
                    row.report.metrics().iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
                println!("{}: {}", row.variant, metrics.join(" "));
            }
        }
        Command::Analyze {
            gupm,
            cppm,
            consistency,
            out,
        } => {
            let gupm = read_report(&s.require::<PathBuf>(gupm, "gupm")?)?;
            let cppm = read_report(&s.require::<PathBuf>(cppm, "cppm")?)?;
            let cons_path: PathBuf = s.require(consistency, "consistency")?;
            let out: PathBuf = s.require(out, "out")?;
            let f = File::open(&cons_path).with_context(|| format!("opening {}", cons_path.display()))?;
            let cons = cooc::read_consistency_records(BufReader::new(f))
                .with_context(|| format!("reading {}", cons_path.display()))?;
            let groups = eval::winner_consistency_analysis(&gupm, &cppm, &cons)?;
            write_with(&out, |w| eval::write_analysis_csv(&groups, w))?;
            for g in &groups {
                let c = g.mean_consistency.map_or("-".to_string(), |c| format!("{c:.4}"));
                println!("{}: {} lists, mean consistency {c}", g.group.name(), g.lists.len());
            }
        }
        Command::Synth {
            clusters,
            items_per_cluster,
            lists,
            len,
            drift,
            segment,
            out,
            labels,
        } => {
            let out: PathBuf = s.require(out, "out")?;
            let d = SyntheticSpec::default();
            let (min_len, max_len) = match s.optional::<String>(len, "len")? {
                Some(l) => parse_len(&l)?,
                None => (d.min_len, d.max_len),
            };
            let spec = SyntheticSpec {
                clusters: s.get(clusters, "clusters", d.clusters)?,
                items_per_cluster: s.get(items_per_cluster, "items-per-cluster", d.items_per_cluster)?,
                lists: s.get(lists, "lists", d.lists)?,
                min_len,
                max_len,
                drift: s.get(drift, "drift", d.drift)?,
                segment: s.get(segment, "segment", d.segment)?,
                seed,
            };
            let generated = synth::generate_synthetic(&spec)?;
            write_with(&out, |w| data::write_interactions(&generated.corpus, w))?;
            if let Some(labels) = s.optional::<PathBuf>(labels, "labels")? {
                write_with(&labels, |w| generated.write_labels(w))?;
            }
            println!(
                "{} lists ({} drifting) over {} items",
                generated.corpus.lists.len(),
                generated.drift_lists.len(),
                generated.corpus.items.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("car: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
