use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fvstack::classify::{precision_recall, Protocol};
use fvstack::descriptor_io::{synth_generate_variants, ChannelSpec, ClassLayout, SynthSpec, TransformTag};
use fvstack::error::{Error, Result};
use fvstack::pipeline::{
    bag, encode_videos, evaluate_splits, fit_unsupervised, identity_sets, parse_transfer_parts, pr_curve_svg,
    predict_scores, read_cache, read_descriptor_dir, rep_labels, rep_matrix, sweep, sweep_csv, trace_csv,
    train_classifier, transfer, write_cache, write_descriptor_dir, ClassifierKind, ModelContainer, PipelineConfig,
    SweepGrid,
};

#[derive(Parser)]
#[command(name = "fvstack", version, about = "Fisher Vector + MLP action classification on trajectory descriptors")]
struct Cli {
    /// TOML pipeline config; commands that read a model default to its stored config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic descriptor dataset.
    Synth(SynthArgs),
    /// Fit descriptor PCA and GMM codebooks.
    FitUnsup {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode videos into cached Fisher Vector representations.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stack the configured transform variants before encoding.
        #[arg(long)]
        dafs: bool,
    },
    /// Train the classifier on cached representations.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["net", "svm"])]
        classifier: Option<String>,
        /// Write per-epoch loss and accuracy as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Train once per seed; outputs get a `.seedN` suffix.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Report accuracy on these cached representations.
        #[arg(long)]
        val_cache: Option<PathBuf>,
    },
    /// Train an ensemble of nets from distinct seeds.
    Bag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Reuse stages of a trained model on a new dataset.
    Transfer {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of gmm,reduction,supervised.
        #[arg(long, default_value = "")]
        what: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the target representations here.
        #[arg(long)]
        cache_out: Option<PathBuf>,
        #[arg(long)]
        dafs: bool,
    },
    /// Score cached representations. Repeat --model/--cache once per split.
    Eval {
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, required = true)]
        cache: Vec<PathBuf>,
        /// macc, map, or map+[:negative-class]
        #[arg(long, default_value = "macc")]
        protocol: String,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for per-class precision-recall curves (SVG).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train one net per (batch, width, depth, dropout) and write a CSV row each.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train_cache: PathBuf,
        #[arg(long)]
        val_cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        batches: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        dropouts: Vec<f64>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    videos: usize,
    #[arg(long, default_value_t = 200)]
    records: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, value_parser = ["blobs", "xor"], default_value = "blobs")]
    layout: String,
    /// Datasets with the same geometry seed share class centers.
    #[arg(long, default_value_t = 0)]
    geometry_seed: u64,
    /// Channels as name:dim pairs, e.g. HOG:8,HOF:6.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<String>,
    /// Also write frame-skip and mirrored variants.
    #[arg(long)]
    variants: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, fallback: impl FnOnce() -> PipelineConfig, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match cli_config {
        Some(p) => PipelineConfig::load(p)?,
        None => fallback(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick<T>(v: Vec<T>, dflt: Vec<T>) -> Vec<T> {
    if v.is_empty() {
        dflt
    } else {
        v
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.seed{seed}{ext}"))
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let (config, seed) = (&cli.config, cli.seed);
    match cli.cmd {
        Cmd::Synth(a) => {
            let channels = if a.channels.is_empty() {
                SynthSpec::default().channels
            } else {
                a.channels
                    .iter()
                    .map(|c| {
                        let (n, d) = c.split_once(':').ok_or_else(|| Error::Config(format!("channel `{c}` is not name:dim")))?;
                        let d = d.parse().map_err(|_| Error::Config(format!("bad dimension in `{c}`")))?;
                        Ok(ChannelSpec::new(n, d))
                    })
                    .collect::<Result<_>>()?
            };
            let spec = SynthSpec {
                classes: a.classes,
                videos_per_class: a.videos,
                records_per_video: a.records,
                separation: a.separation,
                noise: a.noise,
                layout: if a.layout == "xor" { ClassLayout::Xor } else { ClassLayout::Blobs },
                geometry_seed: a.geometry_seed,
                channels,
                ..SynthSpec::default()
            };
            let tags = if a.variants {
                TransformTag::default_family()
            } else {
                vec![TransformTag::IDENTITY]
            };
            let videos = synth_generate_variants(&spec, seed.unwrap_or(0), &tags).map_err(|e| Error::Config(e.to_string()))?;
            write_descriptor_dir(&a.out, &videos)?;
            println!("wrote {} videos x {} variants to {}", videos.len(), tags.len(), a.out.display());
        }
        Cmd::FitUnsup { data, out } => {
            let cfg = load_config(config, PipelineConfig::default, seed)?;
            let videos = read_descriptor_dir(&data)?;
            let model = fit_unsupervised(&identity_sets(&videos)?, &cfg)?;
            model.save(&out)?;
            for c in &model.channels {
                println!("{}: {} -> {} dims, K = {}", c.spec.name, c.spec.raw_dim, c.gmm.dim(), c.gmm.k());
            }
            println!("representation dim {}", model.representation_dim());
        }
        Cmd::Encode { model, data, out, dafs } => {
            let model = ModelContainer::load(&model)?;
            let reps = encode_videos(&model, &read_descriptor_dir(&data)?, dafs)?;
            write_cache(&out, &reps)?;
            println!("encoded {} videos ({} dims) into {}", reps.len(), model.representation_dim(), out.display());
        }
        Cmd::Train {
            model,
            cache,
            out,
            classifier,
            trace,
            seeds,
            val_cache,
        } => {
            let model = ModelContainer::load(&model)?;
            let mut cfg = load_config(config, || model.config.clone(), seed)?;
            match classifier.as_deref() {
                Some("svm") => cfg.classifier = ClassifierKind::Svm,
                Some("net") => cfg.classifier = ClassifierKind::Net,
                _ => {}
            }
            let reps = read_cache(&cache)?;
            let val = val_cache.map(|p| read_cache(&p)).transpose()?;
            let runs: Vec<(Option<u64>, PipelineConfig)> = if seeds.is_empty() {
                vec![(None, cfg.clone())]
            } else {
                seeds
                    .iter()
                    .map(|&s| (Some(s), PipelineConfig { seed: s, ..cfg.clone() }))
                    .collect()
            };
            let mut accs = Vec::new();
            for (s, c) in runs {
                let t = train_classifier(&model, &reps, &c)?;
                let path = s.map(|s| with_suffix(&out, s)).unwrap_or_else(|| out.clone());
                t.container.save(&path)?;
                if let Some(tp) = &trace {
                    let tp = s.map(|s| with_suffix(tp, s)).unwrap_or_else(|| tp.clone());
                    write_text(&tp, &trace_csv(&t.trace))?;
                }
                let train_acc = fvstack::net::accuracy(predict_scores(&t.container, rep_matrix(&reps)?.view())?.view(), &rep_labels(&reps));
                print!("seed {}: train accuracy {train_acc:.4}", c.seed);
                if let Some(v) = &val {
                    let acc = fvstack::net::accuracy(predict_scores(&t.container, rep_matrix(v)?.view())?.view(), &rep_labels(v));
                    accs.push(acc);
                    print!(", validation accuracy {acc:.4}");
                }
                println!(" -> {}", path.display());
            }
            if accs.len() > 1 {
                let m = accs.iter().sum::<f64>() / accs.len() as f64;
                let sd = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
                println!("validation accuracy {m:.4} (sd {sd:.4}) over {} seeds", accs.len());
            }
        }
        Cmd::Bag { model, cache, out, count } => {
            let model = ModelContainer::load(&model)?;
            let cfg = load_config(config, || model.config.clone(), seed)?;
            let count = count.unwrap_or(cfg.bagging);
            let b = bag(&model, &read_cache(&cache)?, &cfg, count)?;
            b.save(&out)?;
            println!("trained {count} members -> {}", out.display());
        }
        Cmd::Transfer {
            source,
            data,
            what,
            out,
            cache_out,
            dafs,
        } => {
            let source = ModelContainer::load(&source)?;
            let cfg = load_config(config, || source.config.clone(), seed)?;
            let parts = parse_transfer_parts(&what)?;
            let t = transfer(&source, &read_descriptor_dir(&data)?, &parts, &cfg, dafs)?;
            t.container.save(&out)?;
            if let Some(dir) = cache_out {
                write_cache(&dir, &t.reps)?;
            }
            println!("transferred {parts:?} -> {}", out.display());
        }
        Cmd::Eval {
            model,
            cache,
            protocol,
            csv,
            plot,
        } => {
            if model.len() != cache.len() {
                return Err(Error::Config("give one --cache per --model".into()));
            }
            let protocol: Protocol = protocol.parse()?;
            let models = model.iter().map(|p| ModelContainer::load(p)).collect::<Result<Vec<_>>>()?;
            let caches = cache.iter().map(|p| read_cache(p)).collect::<Result<Vec<_>>>()?;
            let parts: Vec<(&ModelContainer, &[_])> = models.iter().zip(&caches).map(|(m, c)| (m, c.as_slice())).collect();
            let mut report = evaluate_splits(&parts, protocol)?;
            report.seed = Some(models[0].config.seed);
            print!("{}", report.to_table());
            if let Some(p) = csv {
                write_text(&p, &report.to_csv())?;
            }
            if let Some(dir) = plot {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for (m, c) in &parts {
                    scores.extend(predict_scores(m, rep_matrix(c)?.view())?.rows().into_iter().map(|r| r.to_vec()));
                    labels.extend(rep_labels(c));
                }
                for row in &report.classes {
                    let Some(ap) = row.ap else { continue };
                    let s: Vec<f64> = scores.iter().map(|r| r[row.class as usize]).collect();
                    let rel: Vec<bool> = labels.iter().map(|l| l.contains(&row.class)).collect();
                    let svg = pr_curve_svg(&format!("class {}", row.class), &precision_recall(&s, &rel), ap);
                    write_text(&dir.join(format!("pr_class{}.svg", row.class)), &svg)?;
                }
            }
        }
        Cmd::Sweep {
            model,
            train_cache,
            val_cache,
            out,
            batches,
            widths,
            depths,
            dropouts,
        } => {
            let model = ModelContainer::load(&model)?;
            let cfg = load_config(config, || model.config.clone(), seed)?;
            let d = SweepGrid::default();
            let grid = SweepGrid {
                batches: pick(batches, d.batches),
                widths: pick(widths, d.widths),
                depths: pick(depths, d.depths),
                dropouts: pick(dropouts, d.dropouts),
            };
            let rows = sweep(&model, &read_cache(&train_cache)?, &read_cache(&val_cache)?, &cfg, &grid)?;
            write_text(&out, &sweep_csv(&rows))?;
            println!("{} architectures -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}
