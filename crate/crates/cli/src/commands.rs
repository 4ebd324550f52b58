use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use latent_cot::interp::export::{
    attention_grid, fmt_num, lens_grid, patch_grid, probe_grid, ColorScale,
};
use latent_cot::interp::{
    build_activation_store, build_probe_dataset, collect_attention, logit_lens, patch_sites,
    run_patching, train_probe, ActivationStore, ProbeConfig, ProbeResult, Symbol,
};
use latent_cot::taskgen::{sample_split, serialize, write_jsonl, Regime, TaskInstance};
use latent_cot::theory::{simulate_suffix, suffix_law, theory_table, verify_lemmas};
use latent_cot::training::{evaluate, load_run, train as run_training, EvalReport, Preset, TrainConfig, TrainRegime};
use latent_cot::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{set, ExperimentConfig};
use crate::output::{fnv_hex, ArtifactDir, NumList};
use crate::{AnalyzeArgs, RunArgs};

const DEFAULT_MODULUS: u32 = 50;
const DEFAULT_HOPS: usize = 2;

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map(ExperimentConfig::load).transpose().map(Option::unwrap_or_default)
}

/// Config file merged with flags (flags win), then validated.
fn resolve(args: &RunArgs) -> Result<(TrainConfig, Option<PathBuf>)> {
    let mut file = load_config(args.config.as_deref())?;
    set(&mut file.preset, args.preset.map(Some));
    set(&mut file.seed, args.seed.map(Some));
    set(&mut file.out, args.out.clone().map(Some));
    set(&mut file.task.modulus, args.m.map(Some));
    set(&mut file.task.bias, args.b.map(Some));
    set(&mut file.task.hops, args.hops.map(Some));
    set(&mut file.train.regime, args.regime.map(Some));
    set(&mut file.train.epochs, args.epochs.map(Some));
    set(&mut file.train.batch_size, args.batch_size.map(Some));
    set(&mut file.train.lr, args.lr.map(Some));
    set(&mut file.model.d_model, args.d_model.map(Some));
    set(&mut file.model.latent_steps, args.p.map(Some));
    if args.no_distill {
        file.train.no_distill = Some(true);
    }
    if args.no_teacher {
        file.train.no_teacher = Some(true);
    }
    let cfg = file.train_config(Preset::Desk, TrainRegime::Codi, DEFAULT_MODULUS, DEFAULT_HOPS);
    cfg.validate()?;
    Ok((cfg, file.out))
}

fn layouts(regime: TrainRegime) -> &'static [Regime] {
    match regime {
        TrainRegime::Codi => &[Regime::Teacher, Regime::Student],
        TrainRegime::FullCot => &[Regime::Teacher],
        TrainRegime::NonCot => &[Regime::NonCot],
    }
}

/// Layout analyzed for a trained regime: the one its answers come from.
fn analysis_layout(regime: TrainRegime) -> Regime {
    match regime {
        TrainRegime::Codi => Regime::Student,
        TrainRegime::FullCot => Regime::Teacher,
        TrainRegime::NonCot => Regime::NonCot,
    }
}

fn layout_name(r: Regime) -> &'static str {
    match r {
        Regime::Teacher => "teacher",
        Regime::Student => "student",
        Regime::NonCot => "non-cot",
    }
}

pub fn gen(args: &RunArgs, command: &str) -> Result<()> {
    let (cfg, out) = resolve(args)?;
    let mut dir = ArtifactDir::create(&out.unwrap_or_else(|| PathBuf::from("data")))?;
    let curriculum = cfg.curriculum()?;
    let (p, ctx) = (cfg.model.latent_steps, cfg.model.context_length);
    for (split, data) in [("train", &curriculum.train), ("test", &curriculum.test)] {
        for &layout in layouts(cfg.regime) {
            let examples = data
                .values()
                .flatten()
                .map(|inst| serialize(inst, layout, p, ctx))
                .collect::<Result<Vec<_>>>()?;
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &examples)?;
            dir.write(&format!("{split}_{}.jsonl", layout_name(layout)), buf)?;
        }
    }
    dir.write_json("config.json", &cfg)?;
    println!(
        "{} train / {} test instances written to {}",
        curriculum.train_len(),
        curriculum.test_len(),
        dir.root.display()
    );
    dir.finish(command, cfg.hash_hex(), cfg.seed)
}

fn parse_regimes(list: &str) -> Result<Vec<TrainRegime>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

fn run_name(regime: TrainRegime, m: u32) -> String {
    format!("{regime}-m{m}")
}

fn train_one(cfg: &TrainConfig, out: &Path, command: &str) -> Result<EvalReport> {
    eprintln!(
        "training {} m={} hops={} into {} ({} epochs x {} steps)",
        cfg.regime,
        cfg.task.modulus,
        cfg.task.hops,
        out.display(),
        cfg.epochs,
        cfg.steps_per_epoch()
    );
    let outcome = run_training(cfg, Some(out), &mut |m| {
        if let Some(e) = &m.eval {
            eprintln!(
                "epoch {:>5} loss {:.4} acc {:.4} ({:.0}s)",
                m.epoch, m.loss.total, e.aggregate, m.wall_clock_s
            );
        }
    })?;
    let mut dir = ArtifactDir::create(out)?;
    for entry in std::fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let name = entry.map_err(|e| Error::io(out, e))?.file_name().to_string_lossy().into_owned();
        if name != "manifest.json" {
            dir.record(&name);
        }
    }
    dir.finish(command, cfg.hash_hex(), cfg.seed)?;
    Ok(outcome.final_eval)
}

pub fn train(args: &RunArgs, sweep_m: Option<NumList>, regimes: Option<&str>, command: &str) -> Result<()> {
    let (base, out) = resolve(args)?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs"));
    let Some(moduli) = sweep_m else {
        if regimes.is_some() {
            return Err(Error::Config("--regimes needs --sweep-m".into()));
        }
        let report = train_one(&base, &out, command)?;
        println!("final accuracy {}", fmt_num(report.aggregate));
        return Ok(());
    };
    let regimes = match regimes {
        Some(list) => parse_regimes(list)?,
        None => vec![base.regime],
    };
    for &regime in &regimes {
        for &m in &moduli.0 {
            let m = u32::try_from(m).map_err(|_| Error::Config(format!("modulus {m} out of range")))?;
            let mut cfg = base.clone();
            cfg.regime = regime;
            cfg.task.modulus = m;
            cfg.task.input_high = m - 1;
            cfg.task.bias = cfg.task.bias.min(m - 1);
            cfg.validate()?;
            let report = train_one(&cfg, &out.join(run_name(regime, m)), command)?;
            println!("{regime} m={m}: {}", fmt_num(report.aggregate));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    run: String,
    regime: String,
    modulus: u32,
    report: EvalReport,
}

fn row_label(cfg: &TrainConfig) -> String {
    let mut s = cfg.regime.to_string();
    if cfg.ablation.no_teacher {
        s.push_str("+no-teacher");
    }
    if cfg.ablation.no_distill {
        s.push_str("+no-distill");
    }
    s
}

pub fn eval(
    run: &[PathBuf],
    runs: Option<&Path>,
    sweep_m: Option<NumList>,
    regimes: Option<&str>,
    out: &Path,
    command: &str,
) -> Result<()> {
    let mut dirs: Vec<PathBuf> = run.to_vec();
    if let Some(root) = runs {
        match (sweep_m, regimes) {
            (Some(moduli), regimes) => {
                let regimes = match regimes {
                    Some(list) => parse_regimes(list)?,
                    None => TrainRegime::ALL.to_vec(),
                };
                for r in regimes {
                    for &m in &moduli.0 {
                        dirs.push(root.join(run_name(r, m as u32)));
                    }
                }
            }
            (None, _) => {
                let mut found: Vec<PathBuf> = std::fs::read_dir(root)
                    .map_err(|e| Error::io(root, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.join("config.json").is_file())
                    .collect();
                found.sort();
                dirs.extend(found);
            }
        }
    }
    if dirs.is_empty() {
        return Err(Error::Config("nothing to evaluate: pass --run or --runs".into()));
    }
    let mut rows = Vec::new();
    let mut hashes = String::new();
    let mut seed = 0;
    for d in &dirs {
        let (cfg, model) = load_run(d)?;
        let report = evaluate(&model, cfg.regime, &cfg.curriculum()?.test)?;
        eprintln!("{}: {}", d.display(), fmt_num(report.aggregate));
        hashes.push_str(&cfg.hash_hex());
        seed = cfg.seed;
        rows.push(EvalRow {
            run: d.display().to_string(),
            regime: row_label(&cfg),
            modulus: cfg.task.modulus,
            report,
        });
    }

    // Regime rows by modulus columns, percent with two decimals.
    let mut moduli: Vec<u32> = rows.iter().map(|r| r.modulus).collect();
    moduli.sort();
    moduli.dedup();
    let mut labels: Vec<String> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.regime) {
            labels.push(r.regime.clone());
        }
    }
    let mut table = String::from("regime");
    for m in &moduli {
        table.push_str(&format!(",{m}"));
    }
    table.push('\n');
    for label in &labels {
        table.push_str(label);
        for m in &moduli {
            table.push(',');
            if let Some(r) = rows.iter().find(|r| &r.regime == label && r.modulus == *m) {
                table.push_str(&format!("{:.2}", 100.0 * r.report.aggregate));
            }
        }
        table.push('\n');
    }
    let mut detail = String::from("regime,modulus,length,correct,total,accuracy\n");
    for r in &rows {
        for l in &r.report.per_length {
            detail.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.regime,
                r.modulus,
                l.length,
                l.correct,
                l.total,
                fmt_num(l.accuracy)
            ));
        }
    }
    print!("{table}");
    let mut dir = ArtifactDir::create(out)?;
    dir.write("accuracy.csv", &table)?;
    dir.write("accuracy_by_length.csv", detail)?;
    dir.write_json("accuracy.json", &rows)?;
    dir.finish(command, fnv_hex(hashes.as_bytes()), seed)
}

#[derive(Serialize)]
struct AnalysisParams<'a> {
    run_config: String,
    tools: &'a [String],
    targets: Vec<String>,
    length: usize,
    examples: usize,
    corrupt: &'a [usize],
    include_pre: bool,
    probe: ProbeConfig,
}

const TOOLS: [&str; 4] = ["lens", "attention", "probes", "patching"];

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

/// Held-out instances of one length for analysis.
fn analysis_instances(cfg: &TrainConfig, length: usize, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, test) = sample_split(&cfg.task, length, 0, n, &mut rng)?;
    Ok(test)
}

pub fn analyze(args: &AnalyzeArgs, command: &str) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let a = &file.analysis;
    let (cfg, model) = load_run(&args.run)?;
    let tools = match (&args.tool, &a.tools) {
        (Some(t), _) => split_list(t),
        (None, Some(t)) => t.clone(),
        (None, None) => TOOLS.iter().map(|s| s.to_string()).collect(),
    };
    if let Some(bad) = tools.iter().find(|t| !TOOLS.contains(&t.as_str())) {
        return Err(Error::Config(format!("unknown tool {bad:?} (lens, attention, probes, patching)")));
    }
    let length = args.length.or(a.length).unwrap_or(cfg.task.num_inputs());
    let examples = args.examples.or(a.examples).unwrap_or(1000);
    let targets: Vec<Symbol> = match (&args.targets, &a.targets) {
        (Some(t), _) => split_list(t).iter().map(|s| s.parse()).collect::<Result<_>>()?,
        (None, Some(t)) => t.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        (None, None) => (1..=length).map(Symbol::State).collect(),
    };
    let corrupt: Vec<usize> = match (&args.corrupt, &a.corrupt) {
        (Some(c), _) => c.usizes(),
        (None, Some(c)) => c.clone(),
        (None, None) => (1..=length).collect(),
    };
    let include_pre = args.include_pre || a.include_pre.unwrap_or(false);
    let probe_cfg = ProbeConfig {
        epochs: args.probe_epochs.or(a.probe_epochs).unwrap_or(ProbeConfig::default().epochs),
        seed: args.seed,
        ..ProbeConfig::default()
    };
    let params = AnalysisParams {
        run_config: cfg.hash_hex(),
        tools: &tools,
        targets: targets.iter().map(|t| t.to_string()).collect(),
        length,
        examples,
        corrupt: &corrupt,
        include_pre,
        probe: probe_cfg,
    };
    let hash = fnv_hex(serde_json::to_string(&params)?.as_bytes());
    let out = args
        .out
        .clone()
        .or(file.out.clone())
        .unwrap_or_else(|| args.run.join("analysis"));
    let mut dir = ArtifactDir::create(&out)?;
    dir.write_json("analysis.json", &params)?;

    let layout = analysis_layout(cfg.regime);
    let instances = analysis_instances(&cfg, length, examples, args.seed)?;
    let store = build_activation_store(&model, &instances, layout)?;
    eprintln!(
        "{} {} examples of length {length}, accuracy {}",
        store.len(),
        layout_name(layout),
        fmt_num(store.accuracy())
    );
    if args.save_activations {
        let act = out.join("activations");
        store.save(&act)?;
        dir.record("activations/activations.json");
        dir.record("activations/activations.bin");
    }
    let depths = store.depths;

    for tool in &tools {
        match tool.as_str() {
            "lens" => {
                let grids = logit_lens(&model, &store, &targets, include_pre)?;
                for g in &grids {
                    dir.write_grid(&format!("lens_{}", g.target), &lens_grid(g), ColorScale::UNIT)?;
                }
                dir.write_json("lens.json", &grids)?;
            }
            "attention" => {
                let ex = instances
                    .iter()
                    .map(|i| serialize(i, layout, model.config.latent_steps, model.config.context_length))
                    .collect::<Result<Vec<_>>>()?;
                let att = collect_attention(&model, &ex)?;
                for l in 0..att.layers {
                    for h in 0..att.heads {
                        dir.write_grid(
                            &format!("attention_l{}_h{}", l + 1, h + 1),
                            &attention_grid(&att, l, h),
                            ColorScale::UNIT,
                        )?;
                    }
                }
            }
            "probes" => {
                let all = probes(&store, &targets, &probe_cfg)?;
                for (t, results) in &all {
                    dir.write_grid(&format!("probes_{t}"), &probe_grid(results, &store.roles, depths), ColorScale::UNIT)?;
                }
                let flat: Vec<&ProbeResult> = all.values().flatten().collect();
                dir.write_json("probes.json", &flat)?;
            }
            "patching" => {
                let sites = patch_sites(depths, store.positions());
                let mut all = Vec::new();
                for &c in &corrupt {
                    let results = run_patching(&model, &instances, layout, c, &sites)?;
                    dir.write_grid(&format!("patching_x{c}"), &patch_grid(&results, &store.roles, depths), ColorScale::PERCENT)?;
                    all.extend(results);
                }
                dir.write_json("patching.json", &all)?;
            }
            _ => unreachable!(),
        }
        eprintln!("{tool} done");
    }
    dir.finish(command, hash, args.seed)
}

fn probes(
    store: &ActivationStore,
    targets: &[Symbol],
    cfg: &ProbeConfig,
) -> Result<BTreeMap<Symbol, Vec<ProbeResult>>> {
    let mut out = BTreeMap::new();
    for &t in targets {
        let mut results = Vec::new();
        for depth in 0..store.depths {
            for pos in 0..store.positions() {
                let ds = build_probe_dataset(store, pos, depth, t, cfg.seed)?;
                results.push(train_probe(&ds, cfg)?);
            }
        }
        out.insert(t, results);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TheoryParams<'a> {
    moduli: &'a [u64],
    horizons: &'a [usize],
    biases: &'a [u64],
    trials: u64,
    seed: u64,
}

pub fn theory(
    config: Option<&Path>,
    m: Option<NumList>,
    horizons: Option<NumList>,
    trials: Option<u64>,
    seed: u64,
    accuracy: Option<&Path>,
    out: &Path,
    command: &str,
) -> Result<()> {
    let file = load_config(config)?;
    let th = &file.theory;
    let accuracy = accuracy.map(read_accuracy_table).transpose()?.unwrap_or_default();
    let moduli = m.map(|l| l.0).or(th.moduli.clone()).unwrap_or_else(|| (41..=50).collect());
    let horizons = horizons.map(|l| l.usizes()).or(th.horizons.clone()).unwrap_or_else(|| vec![5, 31]);
    let trials = trials.or(th.trials).unwrap_or(100_000);
    if moduli.iter().any(|&m| m < 2) || trials == 0 {
        return Err(Error::Config("moduli must be >= 2 and trials >= 1".into()));
    }
    let biases = [0, 1, 3, 4];
    let params = TheoryParams {
        moduli: &moduli,
        horizons: &horizons,
        biases: &biases,
        trials,
        seed,
    };
    let mut dir = ArtifactDir::create(out)?;

    let table = theory_table(&moduli, &horizons);
    let mut csv = String::from("m,totient,u,q");
    for t in &horizons {
        csv.push_str(&format!(",E_L_T{t}"));
    }
    for (regime, _) in &accuracy {
        csv.push_str(&format!(",acc_{regime}"));
    }
    csv.push('\n');
    for row in &table {
        csv.push_str(&format!("{},{},{},{}", row.modulus, row.totient, fmt_num(row.u), fmt_num(row.q)));
        for (_, e) in &row.expected_suffix {
            csv.push_str(&format!(",{}", fmt_num(*e)));
        }
        for (_, by_m) in &accuracy {
            csv.push(',');
            if let Some(a) = by_m.get(&row.modulus) {
                csv.push_str(a);
            }
        }
        csv.push('\n');
    }
    print!("{csv}");
    dir.write("theory.csv", &csv)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = String::from("m,T,k,exact_tail,simulated_tail,exact_mean,simulated_mean\n");
    for &m in &moduli {
        for &t in &horizons {
            let law = suffix_law(m, t);
            let sample = simulate_suffix(m, t, trials, &mut rng);
            for (k, (exact, emp)) in law.tail_f64().iter().zip(&sample.tail).enumerate() {
                sim.push_str(&format!(
                    "{m},{t},{k},{},{},{},{}\n",
                    fmt_num(*exact),
                    fmt_num(*emp),
                    fmt_num(law.expected_f64()),
                    fmt_num(sample.mean)
                ));
            }
        }
    }
    dir.write("simulation.csv", sim)?;

    let lemmas = verify_lemmas(moduli.iter().copied(), &biases);
    eprintln!("lemma checks: {} maps, {} violations", lemmas.maps_checked, lemmas.violations.len());
    dir.write_json("lemmas.json", &lemmas)?;
    dir.write_json("theory.json", &table)?;
    dir.finish(command, fnv_hex(serde_json::to_string(&params)?.as_bytes()), seed)
}

/// Rows of an eval accuracy.csv: regime, then percentages keyed by modulus.
/// Cells are kept verbatim so the join does not reformat them.
fn read_accuracy_table(path: &Path) -> Result<Vec<(String, BTreeMap<u64, String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Config(format!("{}: {why}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty accuracy table"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("regime") {
        return Err(bad("header must start with `regime`"));
    }
    let moduli = cols
        .map(|c| c.trim().parse::<u64>().map_err(|_| bad("header columns must be moduli")))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != moduli.len() + 1 {
            return Err(bad("row width differs from the header"));
        }
        let by_m = moduli
            .iter()
            .zip(&cells[1..])
            .filter(|(_, c)| !c.is_empty())
            .map(|(&m, c)| c.parse::<f64>().map(|_| (m, c.to_string())).map_err(|_| bad("accuracy cells must be numbers")))
            .collect::<Result<_>>()?;
        rows.push((cells[0].to_string(), by_m));
    }
    Ok(rows)
}

#[derive(serde::Deserialize, Serialize)]
struct ManifestEntry {
    command: String,
    config_hash: String,
    seed: u64,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct ReportEntry {
    directory: String,
    command: String,
    config_hash: String,
    seed: u64,
    analyses: BTreeMap<&'static str, Vec<String>>,
}

/// Analysis name an artifact belongs to.
fn classify(name: &str) -> &'static str {
    let stem = name.rsplit('/').next().unwrap_or(name);
    for (prefix, kind) in [
        ("lens", "logit lens"),
        ("attention", "attention"),
        ("probes", "linear probes"),
        ("patching", "activation patching"),
        ("accuracy", "accuracy table"),
        ("theory", "compressibility"),
        ("simulation", "compressibility"),
        ("lemmas", "compressibility"),
        ("metrics", "training"),
        ("ckpt_", "training"),
        ("train_", "dataset"),
        ("test_", "dataset"),
        ("activations", "activation cache"),
    ] {
        if stem.starts_with(prefix) {
            return kind;
        }
    }
    "configuration"
}

fn find_manifests(root: &Path, depth: usize, out: &mut Vec<PathBuf>) {
    if root.join("manifest.json").is_file() {
        out.push(root.to_path_buf());
    }
    if depth == 0 {
        return;
    }
    if let Ok(entries) = std::fs::read_dir(root) {
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for d in dirs {
            find_manifests(&d, depth - 1, out);
        }
    }
}

pub fn report(root: &Path) -> Result<()> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut found = Vec::new();
    find_manifests(root, 4, &mut found);
    let mut entries = Vec::new();
    for d in &found {
        let path = d.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ManifestEntry = serde_json::from_str(&text)?;
        let mut analyses: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
        for a in m.artifacts {
            analyses.entry(classify(&a)).or_default().push(a);
        }
        entries.push(ReportEntry {
            directory: d.strip_prefix(root).unwrap_or(d).display().to_string(),
            command: m.command,
            config_hash: m.config_hash,
            seed: m.seed,
            analyses,
        });
    }
    let mut md = String::from("# Artifact report\n");
    for e in &entries {
        let name = if e.directory.is_empty() { "." } else { &e.directory };
        md.push_str(&format!(
            "\n## {name}\n\n`latent-cot {}`  \nconfig hash `{}`, seed {}\n\n",
            e.command, e.config_hash, e.seed
        ));
        for (kind, files) in &e.analyses {
            md.push_str(&format!("- {kind}: {}\n", files.join(", ")));
        }
    }
    let json_path = root.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&entries)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    let md_path = root.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    println!("{} artifact directories indexed in {}", entries.len(), md_path.display());
    Ok(())
}
