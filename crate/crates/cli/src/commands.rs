use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nasforge::arch::{self, ArchDescription, CellDescription, ConvSearchSpace, SearchSpace};
use nasforge::child::{builtin_tasks, grid_search, ChildModel};
use nasforge::compiler::{
    compile_cell, compile_conv, compile_sequence_model, reference_lstm, CompiledGraph, ConvOptions, RecurrentCell,
    SequenceShape,
};
use nasforge::config::{parse_grid, ExperimentConfig};
use nasforge::dist::{
    greedy_final, run_random, run_search, LogHeader, LogWriter, RunOptions, SearchLog, SearchOutcome,
};
use nasforge::numeric::gradcheck::GradCheckOptions;
use nasforge::report::{compare, compare_tsv, Report};

use crate::{Cli, Command, CompareArgs, CompileArgs, Global, GridArgs, Reference, SearchArgs, Target};

const GRAD_TOLERANCE: f64 = 1e-4;

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Search(args) => search(&cli.global, args, false),
        Command::Randsearch(args) => search(&cli.global, args, true),
        Command::Compare(args) => cmd_compare(&cli.global, args),
        Command::Compile(args) => cmd_compile(&cli.global, args),
        Command::Grid(args) => cmd_grid(&cli.global, args),
        Command::Tasks => {
            for t in builtin_tasks() {
                let state = if t.available { "available" } else { "unavailable" };
                println!("{:<18} {:<12} {}", t.name, state, t.summary);
            }
            Ok(())
        }
    }
}

fn load_config(global: &Global, task: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = ExperimentConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
            if let Some(t) = task {
                if t != cfg.task {
                    bail!("--task {t} disagrees with the config's task {}", cfg.task);
                }
            }
            cfg
        }
        None => ExperimentConfig::for_task(task.unwrap_or("rigged"))?,
    };
    if let Some(s) = global.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    if global.deterministic {
        cfg.cluster.deterministic = true;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn search(global: &Global, args: &SearchArgs, random: bool) -> Result<()> {
    let mut cfg = load_config(global, args.task.as_deref())?;
    if let Some(b) = args.budget {
        cfg.settings.budget = b;
    }
    cfg.check()?;
    if random && global.resume {
        bail!("randsearch runs are not resumable");
    }
    if random && args.greedy_final {
        bail!("--greedy-final needs a controller search");
    }
    let evaluator = cfg.evaluator()?;
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() > 1 {
            cfg.out.join(format!("seed-{seed}"))
        } else {
            cfg.out.clone()
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let log_path = dir.join("log.jsonl");

        let outcome = if random {
            refuse_overwrite(&log_path)?;
            let out = run_random(&cfg.space, evaluator.as_ref(), &cfg.settings, seed)?;
            out.log.write(&log_path)?;
            out
        } else {
            let mut cluster = cfg.cluster.clone();
            cluster.seed = seed;
            let header = LogHeader::new(&cfg.space, &cfg.settings, seed, Some(&cluster), evaluator.name());
            let prev = prepare_log(&log_path, &header, global.resume)?;
            let mut writer = match &prev {
                Some(p) => {
                    let kept = p.resume_point().map_or_else(|| SearchLog::new(header.clone()), |(kept, _)| kept);
                    LogWriter::create(&log_path, &kept)?
                }
                None => LogWriter::create(&log_path, &SearchLog::new(header.clone()))?,
            };
            run_search(
                &cfg.space,
                evaluator.as_ref(),
                &cfg.settings,
                &cluster,
                RunOptions {
                    resume: prev.as_ref(),
                    writer: Some(&mut writer),
                },
            )?
        };
        write(&dir.join("config.json"), &cfg.to_text())?;
        let report = emit_report(&cfg, &dir, &outcome, !random && args.greedy_final)?;
        println!(
            "{} seed {seed}: {} samples, {} dropped, best reward {:.6}, results in {}",
            if random { "randsearch" } else { "search" },
            report.samples,
            report.dropped,
            report.best.first().map_or(f64::NAN, |b| b.reward),
            dir.display()
        );
    }
    Ok(())
}

fn refuse_overwrite(path: &Path) -> Result<()> {
    if path.exists() {
        bail!("{} already exists; choose another --out", path.display());
    }
    Ok(())
}

/// The log to resume from, if any. Refuses to clobber an existing log
/// without `--resume` and checks a resumed log's configuration before the
/// file is touched.
fn prepare_log(path: &Path, header: &LogHeader, resume: bool) -> Result<Option<SearchLog>> {
    if !path.exists() {
        if resume {
            log::warn!("{} not found; starting a fresh search", path.display());
        }
        return Ok(None);
    }
    if !resume {
        bail!("{} already exists; pass --resume to continue it or choose another --out", path.display());
    }
    let prev = SearchLog::read(path).with_context(|| format!("reading {}", path.display()))?;
    if &prev.header != header {
        bail!("{} was written with a different configuration", path.display());
    }
    Ok(Some(prev))
}

fn emit_report(cfg: &ExperimentConfig, dir: &Path, outcome: &SearchOutcome, greedy: bool) -> Result<Report> {
    let mut report = Report::from_log(&outcome.log, cfg.top_k, cfg.window)?;
    if greedy {
        let t = greedy_final(&cfg.space, &cfg.settings, outcome)?;
        write(&dir.join("greedy.json"), &arch::serialize(&t.description))?;
        println!("greedy decode written to {}", dir.join("greedy.json").display());
        report.greedy = Some(t.description);
    }
    write(&dir.join("report.json"), &report.to_json())?;
    write(&dir.join("curve.tsv"), &report.curve_tsv())?;
    let best_dir = dir.join("best");
    fs::create_dir_all(&best_dir)?;
    for (rank, b) in report.best.iter().enumerate() {
        write(&best_dir.join(format!("{:02}-sample-{}.json", rank + 1, b.sample)), &arch::serialize(&b.description))?;
    }
    Ok(report)
}

fn cmd_compare(global: &Global, args: &CompareArgs) -> Result<()> {
    let nas = SearchLog::read(&args.nas_log).with_context(|| format!("reading {}", args.nas_log.display()))?;
    let rnd = SearchLog::read(&args.random_log).with_context(|| format!("reading {}", args.random_log.display()))?;
    let tsv = compare_tsv(&compare(&nas, &rnd, args.k, args.window)?);
    if let Some(out) = &global.out {
        fs::create_dir_all(out)?;
        write(&out.join("compare.tsv"), &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

fn parse_image(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("--image expects HxWxC, got {s}"))?;
    match parts[..] {
        [h, w, c] => Ok([h, w, c]),
        _ => bail!("--image expects HxWxC, got {s}"),
    }
}

fn conv_space(global: &Global) -> Result<ConvSearchSpace> {
    if global.config.is_none() {
        return Ok(ConvSearchSpace::default());
    }
    match load_config(global, None)?.space {
        SearchSpace::Conv(s) => Ok(s),
        SearchSpace::Cell(_) => Ok(ConvSearchSpace::default()),
    }
}

fn compile_desc(global: &Global, args: &CompileArgs) -> Result<CompiledGraph> {
    let sequence = |cell: RecurrentCell| -> Result<CompiledGraph> {
        let shape = SequenceShape {
            vocab: args.vocab,
            embed: args.input_dim,
            hidden: args.hidden,
            length: args.length,
            scored: (0..args.length).collect(),
        };
        Ok(compile_sequence_model(&cell, &shape, args.batch)?)
    };
    let cell = |desc: CellDescription| -> Result<CompiledGraph> {
        match args.target {
            Target::Step => Ok(compile_cell(&desc, args.input_dim, args.hidden, args.batch)?),
            Target::Sequence => sequence(RecurrentCell::Tree(desc)),
        }
    };
    match (args.reference, &args.file) {
        (Some(Reference::Lstm), _) => match args.target {
            Target::Step => Ok(reference_lstm(args.input_dim, args.hidden, args.batch)?),
            Target::Sequence => sequence(RecurrentCell::Lstm),
        },
        (Some(Reference::TanhRnn), _) => cell(CellDescription::tanh_rnn(2)),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            match arch::parse_any(&text).with_context(|| format!("invalid description {}", path.display()))? {
                ArchDescription::Conv(a) => {
                    if args.target == Target::Sequence {
                        bail!("conv descriptions have no sequence target");
                    }
                    let opts = ConvOptions::from_space(&conv_space(global)?);
                    Ok(compile_conv(&a, &opts, parse_image(&args.image)?, args.classes, args.batch)
                        .with_context(|| format!("compiling {}", path.display()))?)
                }
                ArchDescription::Cell(c) => cell(c).with_context(|| format!("compiling {}", path.display())),
            }
        }
        (None, None) => bail!("give a description file or --reference"),
    }
}

fn cmd_compile(global: &Global, args: &CompileArgs) -> Result<()> {
    let cg = compile_desc(global, args)?;
    print!("{}", cg.dump());
    println!("parameters: {}", cg.param_count());
    if args.check_grad {
        let opts = GradCheckOptions {
            // Small steps rarely straddle a ReLU or max kink.
            epsilon: 1e-6,
            coords_per_slot: Some(8),
            directions: 2,
            seed: global.seed.unwrap_or(0),
            five_point: false,
        };
        let r = cg.check_gradients(&opts)?;
        let worst = r.worst.as_ref().map_or(String::new(), |(s, i)| format!(" at {s}[{i}]"));
        println!(
            "gradient check: {} probes, max relative error {:.3e}{worst}",
            r.checked, r.max_rel_error
        );
        if r.max_rel_error >= GRAD_TOLERANCE {
            bail!("gradient check failed: {:.3e} >= {GRAD_TOLERANCE:e}", r.max_rel_error);
        }
    }
    Ok(())
}

fn cmd_grid(global: &Global, args: &GridArgs) -> Result<()> {
    let cfg = load_config(global, args.task.as_deref())?;
    if cfg.task == "rigged" {
        bail!("the rigged landscape has no training to tune");
    }
    let read = |p: &PathBuf| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let desc = arch::parse(&read(&args.desc)?, &cfg.space)
        .with_context(|| format!("invalid description {}", args.desc.display()))?;
    let grid = parse_grid(&read(&args.grid)?, &cfg.training).with_context(|| format!("invalid grid {}", args.grid.display()))?;
    let model = match (desc, &cfg.space) {
        (ArchDescription::Conv(arch), SearchSpace::Conv(space)) => ChildModel::Conv {
            arch,
            options: ConvOptions::from_space(space),
        },
        (ArchDescription::Cell(c), _) => ChildModel::Recurrent(RecurrentCell::Tree(c)),
        _ => bail!("description family does not match the task"),
    };
    let task = cfg.load_task()?;
    let mut training = cfg.training.clone();
    training.seed = cfg.seeds[0];
    let outcome = grid_search(&model, &task, &training, &grid)?;
    println!("learning_rate\tweight_decay\tnorm_epsilon\tdecay_epoch\tvalidation");
    for (p, r) in &outcome.trials {
        let decay = p.decay_epoch.map_or("none".to_string(), |d| d.to_string());
        println!(
            "{}\t{}\t{}\t{decay}\t{}",
            p.learning_rate,
            p.weight_decay,
            p.norm_epsilon,
            r.selection_metric()
        );
    }
    let (p, _) = &outcome.trials[outcome.winner];
    println!(
        "winner: learning_rate {} weight_decay {} norm_epsilon {} decay_epoch {}",
        p.learning_rate,
        p.weight_decay,
        p.norm_epsilon,
        p.decay_epoch.map_or("none".to_string(), |d| d.to_string())
    );
    println!(
        "validation {:?} {}, test {}",
        task.metric,
        outcome.result.selection_metric(),
        outcome.result.test.map_or("n/a".to_string(), |t| t.to_string())
    );
    Ok(())
}
