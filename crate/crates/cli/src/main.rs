//! `tristage` command-line driver.
//!
//! Every run-configuration key is also a flag (`--batch_size 4`), applied
//! on top of `--config FILE` or the `--profile` defaults.

mod plot;

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tristage::{backbone, checkpoint};
use tristage::complexity::{self, Complexity};
use tristage::data::loader::{self, IMAGE_EXTS};
use tristage::data::{generate_synthetic, to_batch, Dataset, Sample, SyntheticSpec};
use tristage::eval::{decoder_maps, DECODERS};
use tristage::kernels::resize_bilinear_forward;
use tristage::metrics::{binarize_mask, evaluate_image, foreground_fraction, ImageScores, MetricReport, SMALL_GROUPS};
use tristage::pipeline::Model;
use tristage::train::{Source, StepRecord, Trainer};
use tristage::{Ablation, Error, Graph, Mode, ModelConfig, ParamStore, RunConfig, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn config_keys() -> Vec<String> {
    let text = RunConfig::for_profile("tiny").expect("tiny profile").to_text();
    text.lines().filter_map(|l| l.split_once(" = ")).map(|(k, _)| k.to_string()).filter(|k| k != "profile").collect()
}

fn with_config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("Run configuration file (key = value lines)"))
        .arg(Arg::new("profile").long("profile").value_name("NAME").help("Model profile when no config file is given: tiny or full"));
    config_keys().into_iter().fold(cmd, |cmd, key| {
        let name: &'static str = Box::leak(key.into_boxed_str());
        cmd.arg(Arg::new(name).long(name).value_name("VALUE").help_heading("Run configuration"))
    })
}

fn cli() -> Command {
    let checkpoint = || Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true);
    Command::new("tristage")
        .about("Three-stage camouflaged object segmentation")
        .subcommand_required(true)
        .subcommand(with_config_args(
            Command::new("train")
                .about("Train on a dataset root or on generated synthetic scenes")
                .arg(Arg::new("resume").long("resume").value_name("FILE").help("Continue from a training checkpoint"))
                .arg(
                    Arg::new("backbone")
                        .long("backbone")
                        .value_name("FILE")
                        .conflicts_with("resume")
                        .help("Pretrained residual-network weights (safetensors, torchvision names)"),
                ),
        ))
        .subcommand(with_config_args(
            Command::new("eval")
                .about("Score a checkpoint on datasets (test_roots, or synthetic scenes if none)")
                .arg(checkpoint())
                .arg(Arg::new("per_decoder").long("per-decoder").action(ArgAction::SetTrue).help("Also report the first and second decoders"))
                .arg(Arg::new("small").long("small").action(ArgAction::SetTrue).help("Also report the Small8/16/32 subsets")),
        ))
        .subcommand(with_config_args(
            Command::new("infer")
                .about("Write 8-bit prediction maps and a manifest for every image under a directory")
                .arg(checkpoint())
                .arg(Arg::new("input").long("input").value_name("DIR").required(true)),
        ))
        .subcommand(
            Command::new("plot")
                .about("Render curve plots or feature montages")
                .subcommand_required(true)
                .subcommand(
                    Command::new("curves")
                        .about("PR and F-measure curves from curve files, one series per file")
                        .arg(Arg::new("input").long("input").value_name("FILE[:LABEL]").num_args(1..).required(true))
                        .arg(Arg::new("out").long("out").value_name("FILE").required(true)),
                )
                .subcommand(with_config_args(
                    Command::new("montage")
                        .about("Decoder-2/3 intermediate channels for one image")
                        .arg(checkpoint())
                        .arg(Arg::new("image").long("image").value_name("FILE").required(true))
                        .arg(Arg::new("out").long("out").value_name("FILE").required(true))
                        .arg(Arg::new("channels").long("channels").value_name("N").default_value("8").value_parser(clap::value_parser!(usize))),
                )),
        )
        .subcommand(with_config_args(
            Command::new("bench")
                .about("Parameter count, multiply-accumulates, latency and throughput")
                .arg(Arg::new("runs").long("runs").value_name("N").default_value("3").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("max_batch").long("max-batch").value_name("N").default_value("4").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("ablations").long("ablations").action(ArgAction::SetTrue).help("Also count every ablation variant")),
        ))
}

/// Config file or profile defaults, then per-key flags.
fn resolve_config(m: &ArgMatches, base: Option<&str>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (m.get_one::<String>("config"), base) {
        (Some(path), _) => RunConfig::load(Path::new(path))?,
        (None, Some(text)) if !text.is_empty() && m.get_one::<String>("profile").is_none() => RunConfig::from_text(text)?,
        _ => RunConfig::for_profile(m.get_one::<String>("profile").map_or("tiny", String::as_str))?,
    };
    for key in config_keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v).map_err(|e| Error::Config(format!("--{key}: {e}")))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_output(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join("config.txt"))?;
    Ok(dir)
}

fn synthetic(cfg: &RunConfig) -> anyhow::Result<Vec<Sample>> {
    let spec = SyntheticSpec {
        similarity: cfg.synthetic_similarity,
        ..SyntheticSpec::new(cfg.seed, cfg.synthetic_count, cfg.model.input_size)
    };
    Ok(generate_synthetic(&spec)?)
}

fn cmd_train(m: &ArgMatches) -> anyhow::Result<()> {
    let resume = m.get_one::<String>("resume").map(PathBuf::from);
    let saved = match &resume {
        Some(p) => checkpoint::Archive::<f32>::load(p)?.metadata.get("config").cloned(),
        None => None,
    };
    let cfg = resolve_config(m, saved.as_deref())?;
    let dir = prepare_output(&cfg)?;
    let source = match &cfg.train_root {
        Some(root) => {
            let dataset = Dataset::open(root, false)?;
            dataset.check_split(true)?;
            Source::Disk { dataset, size: cfg.model.input_size }
        }
        None => Source::Memory(synthetic(&cfg)?),
    };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), source)?;
    let log_path = dir.join("log.csv");
    let mut log = if let Some(p) = &resume {
        let info = trainer.resume(p)?;
        log::info!("resumed at step {}", info.step);
        fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    } else {
        let mut f = File::create(&log_path)?;
        writeln!(f, "{}", StepRecord::csv_header())?;
        f
    };
    if let Some(p) = m.get_one::<String>("backbone") {
        let source = checkpoint::read_safetensors::<f32>(Path::new(p))?;
        let n = backbone::load_pretrained(&mut trainer.store, &source, cfg.model.shared_leaf_init)?;
        log::info!("copied {n} pretrained tensors from {p}");
    }
    let total = trainer.total_steps();
    log::info!("{} parameters, {} steps", trainer.store.num_parameters(), total);
    let start = Instant::now();
    while trainer.step < total {
        let rec = trainer.train_step()?;
        writeln!(log, "{}", rec.csv_row())?;
        if rec.step % 50 == 0 {
            log::info!("step {} lr {:.2e} loss {:.4} ({:.1}s)", rec.step, rec.lr, rec.loss.total, start.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < total {
            trainer.save(&dir.join(format!("step_{:06}.ckpt", trainer.step)))?;
        }
    }
    trainer.save(&dir.join("final.ckpt"))?;
    println!("trained {} steps in {:.1}s; checkpoint {}", total, start.elapsed().as_secs_f64(), dir.join("final.ckpt").display());
    Ok(())
}

/// Model and parameters from a checkpoint; the run configuration comes from
/// the checkpoint unless overridden.
fn load_model(m: &ArgMatches) -> anyhow::Result<(RunConfig, Model, ParamStore<f32>)> {
    let path = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let archive = checkpoint::Archive::<f32>::load(&path)?;
    let cfg = resolve_config(m, archive.metadata.get("config").map(String::as_str))?;
    let (model, mut store) = Model::new::<f32>(&cfg.model, cfg.seed)?;
    checkpoint::load(&path, &mut store, None)?;
    Ok((cfg, model, store))
}

fn image_tensor(samples: &[Sample]) -> Tensor<f32> {
    to_batch::<f32>(samples).0
}

/// Bilinear resize of one `h x w` plane.
fn resize_plane(plane: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let t = Tensor::from_vec(&[1, 1, h, w], plane.to_vec());
    resize_bilinear_forward(&t, ho, wo).data().iter().map(|&v| f64::from(v)).collect()
}

struct Scored {
    name: String,
    fraction: f64,
    /// Scores for the first, second and third decoders.
    scores: [ImageScores; 3],
}

/// Runs the model over a dataset and scores each prediction against the
/// mask at its stored resolution.
fn score_dataset(cfg: &RunConfig, model: &Model, store: &ParamStore<f32>, dataset: &Dataset) -> anyhow::Result<Vec<Scored>> {
    let size = cfg.model.input_size;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let mut samples = Vec::with_capacity(chunk.len());
        let mut gts = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (img, mask) = &dataset.pairs[i];
            samples.push(loader::load_sample(img, mask, size)?);
            let gt = loader::read_mask(mask)?;
            gts.push((img.file_stem().unwrap_or_default().to_string_lossy().into_owned(), gt));
        }
        let outputs = model.predict(store, &image_tensor(&samples))?;
        let maps = decoder_maps(&outputs);
        for (k, (name, gt)) in gts.into_iter().enumerate() {
            let (w, h) = (gt.width() as usize, gt.height() as usize);
            let gt = binarize_mask(gt.as_raw());
            let score = |d: usize| {
                let pred = resize_plane(maps[d].plane(k, 0), size, size, h, w);
                evaluate_image(&pred, &gt, h, w)
            };
            out.push(Scored { name, fraction: foreground_fraction(&gt), scores: [score(0), score(1), score(2)] });
        }
    }
    Ok(out)
}

fn score_samples(model: &Model, store: &ParamStore<f32>, samples: &[Sample], batch: usize) -> anyhow::Result<Vec<Scored>> {
    let per = tristage::eval::evaluate_samples(model, store, samples, batch)?;
    let [a, b, c] = per;
    Ok(a.into_iter()
        .zip(b)
        .zip(c)
        .enumerate()
        .map(|(i, ((a, b), c))| Scored { name: format!("{i:04}"), fraction: samples[i].foreground_fraction(), scores: [a, b, c] })
        .collect())
}

fn cmd_eval(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(m)?;
    let dir = prepare_output(&cfg)?;
    let per_decoder = m.get_flag("per_decoder");
    let small = m.get_flag("small");
    let mut sets: Vec<(String, Vec<Scored>)> = Vec::new();
    if cfg.test_roots.is_empty() {
        log::info!("no test_roots given; scoring {} synthetic scenes", cfg.synthetic_count);
        sets.push(("synthetic".into(), score_samples(&model, &store, &synthetic(&cfg)?, cfg.batch_size)?));
    }
    for root in &cfg.test_roots {
        let dataset = Dataset::open(root, false)?;
        if let Err(e) = dataset.check_split(false) {
            log::warn!("{e}");
        }
        log::info!("scoring {} ({} images)", dataset.name(), dataset.len());
        sets.push((dataset.name(), score_dataset(&cfg, &model, &store, &dataset)?));
    }

    let mut report = format!("{}\n", MetricReport::HEADER);
    for (name, scored) in &sets {
        let decoders: &[usize] = if per_decoder { &[0, 1, 2] } else { &[2] };
        for &d in decoders {
            let r = MetricReport::from_scores(scored.iter().map(|s| &s.scores[d]));
            let label = if per_decoder { format!("{name}/{}", DECODERS[d]) } else { name.clone() };
            report.push_str(&r.row(&label));
            report.push('\n');
            if d == 2 {
                fs::write(dir.join(format!("curves_{name}.csv")), r.curves_csv())?;
            }
        }
        let mut images = String::from("image,fg_fraction,S_m,wF,MAE,E_mean\n");
        for s in scored {
            let t = &s.scores[2];
            images.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                s.name, s.fraction, t.s_measure, t.weighted_f, t.mae, t.e_measure
            ));
        }
        fs::write(dir.join(format!("images_{name}.csv")), images)?;
    }
    if small {
        for (group, tau) in SMALL_GROUPS {
            let mut all = Vec::new();
            for (name, scored) in &sets {
                let subset: Vec<&ImageScores> = scored.iter().filter(|s| s.fraction < tau).map(|s| &s.scores[2]).collect();
                report.push_str(&MetricReport::from_scores(subset.iter().copied()).row(&format!("{name}/{group}")));
                report.push('\n');
                all.extend(subset);
            }
            report.push_str(&MetricReport::from_scores(all).row(&format!("all/{group}")));
            report.push('\n');
        }
    }
    fs::write(dir.join("report.csv"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_infer(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(m)?;
    let dir = prepare_output(&cfg)?;
    let input = PathBuf::from(m.get_one::<String>("input").expect("required"));
    let image_dir = if input.join("Imgs").is_dir() { input.join("Imgs") } else { input.clone() };
    let files = loader::list(&image_dir, &IMAGE_EXTS)?;
    if files.is_empty() {
        return Err(Error::data(&image_dir, "no images found").into());
    }
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let size = cfg.model.input_size;
    let mut manifest = String::from("# input\toutput\tbox x_min,y_min,x_max,y_max (image pixels)\tfallback\n");
    for path in &files {
        let rgb = loader::read_rgb(path)?;
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let sample = Sample::new(size, loader::planar_resized(&rgb, size), vec![0; size * size]);
        let out = model.predict(&store, &image_tensor(&[sample]))?;
        let pred = resize_plane(out.prediction().plane(0, 0), size, size, h, w);
        let bytes: Vec<u8> = pred.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let rel = path.strip_prefix(&image_dir).unwrap_or(path).with_extension("png");
        let target = pred_dir.join(&rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches size").save(&target)?;
        let b = &out.boxes[0];
        let (sy, sx) = (h as f64 / b.grid.0 as f64, w as f64 / b.grid.1 as f64);
        let r = &b.rect;
        manifest.push_str(&format!(
            "{}\t{}\t{},{},{},{}\t{}\n",
            path.display(),
            target.display(),
            (r.x_min as f64 * sx).floor(),
            (r.y_min as f64 * sy).floor(),
            ((r.x_max + 1) as f64 * sx).ceil() - 1.0,
            ((r.y_max + 1) as f64 * sy).ceil() - 1.0,
            b.is_fallback()
        ));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    println!("wrote {} predictions to {}", files.len(), pred_dir.display());
    Ok(())
}

fn cmd_montage(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(m)?;
    let size = cfg.model.input_size;
    let rgb = loader::read_rgb(Path::new(m.get_one::<String>("image").expect("required")))?;
    let sample = Sample::new(size, loader::planar_resized(&rgb, size), vec![0; size * size]);
    let g = Graph::new(&store, Mode::Eval);
    let x = g.input(image_tensor(&[sample]));
    let fv = model.forward(&g, x)?;
    let taps: Vec<(&str, Tensor<f32>)> = fv.taps.iter().map(|(n, v)| (*n, (*g.value(*v)).clone())).collect();
    let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
    plot::montage(&taps, *m.get_one::<usize>("channels").expect("default"), &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn bench_line(label: &str, c: &Complexity) -> String {
    format!("{label}: {:.2} M parameters, {:.2} GMACs", c.mparams(), c.gmacs())
}

fn cmd_bench(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = resolve_config(m, None)?;
    let dir = prepare_output(&cfg)?;
    let (model, store) = Model::new::<f32>(&cfg.model, cfg.seed)?;
    let c = complexity::measure(&model, &store)?;
    let s = cfg.model.input_size;
    let mut report = format!("{} at {s}x{s}, crop {}\n", bench_line(&cfg.profile, &c), cfg.model.crop_size);
    for (ns, n) in &c.groups {
        report.push_str(&format!("  {ns}: {n}\n"));
    }
    let runs = *m.get_one::<usize>("runs").expect("default");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = |n: usize| Tensor::from_vec(&[n, 3, s, s], (0..n * 3 * s * s).map(|_| rng.random_range(-2.0f32..2.0)).collect());
    if runs > 0 {
        let x = input(1);
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            model.predict(&store, &x)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        report.push_str(&format!("latency: median {:.1} ms over {runs} runs\n", 1e3 * times[runs / 2]));
        let max_batch = *m.get_one::<usize>("max_batch").expect("default");
        let mut best = (0.0, 0);
        let mut n = 1;
        while n <= max_batch {
            let x = input(n);
            let t = Instant::now();
            model.predict(&store, &x)?;
            let ips = n as f64 / t.elapsed().as_secs_f64();
            report.push_str(&format!("throughput: batch {n}: {ips:.2} images/s\n"));
            if ips > best.0 {
                best = (ips, n);
            }
            n *= 2;
        }
        report.push_str(&format!("throughput: best {:.2} images/s at batch {}\n", best.0, best.1));
    }
    if m.get_flag("ablations") {
        let mut variants: Vec<(String, ModelConfig)> = Ablation::NAMES
            .iter()
            .map(|n| {
                let mut mc = cfg.model.clone();
                mc.ablation = Ablation::from_name(n).expect("known name");
                (n.to_string(), mc)
            })
            .collect();
        for r in [1.0, 1.2, 1.4] {
            let mut mc = cfg.model.clone();
            mc.expansion_ratio = r;
            variants.push((format!("expansion_ratio={r}"), mc));
        }
        for (label, mc) in variants {
            report.push_str(&bench_line(&label, &complexity::analyze(&mc)?));
            report.push('\n');
        }
    }
    fs::write(dir.join("bench.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run(matches: &ArgMatches) -> anyhow::Result<()> {
    match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("infer", m)) => cmd_infer(m),
        Some(("bench", m)) => cmd_bench(m),
        Some(("plot", p)) => match p.subcommand() {
            Some(("curves", m)) => {
                let inputs: Vec<&String> = m.get_many::<String>("input").expect("required").collect();
                let out = PathBuf::from(m.get_one::<String>("out").expect("required"));
                plot::curves(&inputs, &out)?;
                println!("wrote {}", out.display());
                Ok(())
            }
            Some(("montage", m)) => cmd_montage(m),
            _ => bail!("unknown plot command"),
        },
        _ => Err(anyhow!("unknown command")),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numeric(_) => EXIT_NUMERIC,
                Error::Data { .. } | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => EXIT_DATA,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<image::ImageError>().is_some() {
            return EXIT_DATA;
        }
        if cause.downcast_ref::<plot::PlotError>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
