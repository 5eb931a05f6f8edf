use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use deltaedit::evaluation::{
    compare_modes, evaluate_linear_baseline, evaluate_mapper, export_projection, gap_stats_of_pairs,
    ComparisonReport, ModeMetrics,
};
use deltaedit::inference::{edit, interpolate, text_pair_between, PromptTemplate};
use deltaedit::numerics::{cosine, norm, Parameters};
use deltaedit::relevance::estimate_relevance;
use deltaedit::store::{
    self, read_checkpoint, read_dataset, read_relevance, read_text_table, write_atomic, write_checkpoint,
    write_dataset, write_relevance, write_text_table, EmbeddingDataset, TextTable,
};
use deltaedit::training::Trainer;
use deltaedit::world::{gen_world, SyntheticWorld, WorldConfig};
use deltaedit::ConditionMode;
use serde::{Deserialize, Serialize};

use crate::config::{run_digest, RunConfig};
use crate::failure::{data, usage, Kind, Result, WithKind};
use crate::{Command, Common, EvalMode, Mode};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenWorld { common, records } => gen_world_cmd(&common, records),
        Command::Train {
            common,
            datasets,
            steps,
            mode,
            resume,
        } => train_cmd(&common, datasets, steps, mode, resume),
        Command::Relevance {
            common,
            world,
            dataset,
            samples,
        } => relevance_cmd(&common, &world, &dataset, samples),
        Command::Edit {
            common,
            checkpoint,
            text,
            dataset,
            index,
            attrs,
            source_attrs,
            relevance,
            beta,
            strength,
            world,
        } => edit_cmd(EditArgs {
            common,
            checkpoint,
            text,
            dataset,
            index,
            attrs,
            source_attrs,
            relevance,
            beta,
            strength,
            world,
        }),
        Command::Eval {
            common,
            mode,
            world,
            dataset,
            checkpoint,
            relevance,
            beta,
        } => eval_cmd(&common, mode, &world, dataset, checkpoint, relevance, beta),
        Command::GapStats { common, world, pairs } => gap_stats_cmd(&common, &world, pairs),
        Command::Interpolate { common, a, b, omega } => interpolate_cmd(&common, &a, &b, omega),
        Command::Inspect { file, clip_dim } => inspect_cmd(&file, clip_dim),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref()).kind(Kind::Usage)?;
    Ok(cfg.resolve(common.seed))
}

fn path_key(p: &Path) -> String {
    p.display().to_string()
}

/// Create `<out>/<command>-<digest>-s<seed>` and echo the resolved config into it.
fn run_dir(common: &Common, command: &str, cfg: &RunConfig, inputs: &[String]) -> Result<PathBuf> {
    let digest = run_digest(command, cfg, inputs);
    let dir = common.out.join(format!("{command}-{digest:016x}-s{}", cfg.seed));
    if dir.exists() && !common.force {
        return Err(usage(format!(
            "run directory {} already exists; pass --force to reuse it",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).kind(Kind::Data)?;
    let mut echo = String::new();
    if !inputs.is_empty() {
        echo.push_str("# inputs:\n");
        for i in inputs {
            let _ = writeln!(echo, "#   {i}");
        }
    }
    echo.push_str(&cfg.to_toml());
    write_text(&dir.join("config.toml"), &echo)?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// World description written next to a generated dataset.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    seed: u64,
    world: WorldConfig,
}

fn load_world(path: &Path) -> Result<SyntheticWorld> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .kind(Kind::Data)?;
    let wf: WorldFile = toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .kind(Kind::Data)?;
    Ok(gen_world(&wf.world, wf.seed)?)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect()
}

fn gen_world_cmd(common: &Common, records: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let world = gen_world(&cfg.world, cfg.seed)?;
    let dir = run_dir(common, "gen-world", &cfg, &[format!("records={records}")])?;

    let dataset = world.gen_dataset(records, cfg.seed);
    let report = dataset.validate();
    if !report.is_empty() {
        return Err(data(format!("generated dataset is invalid:\n{report}")));
    }
    write_dataset(&dir.join("dataset.deds"), &dataset)?;

    let template = PromptTemplate::default();
    let names = world.attribute_names();
    let mut table = TextTable::new();
    table.push(template.prompt::<&str>(&[]), &world.text_embed::<&str>(&[])?);
    for a in &names {
        table.push(template.prompt(&[a]), &world.text_embed(&[a])?);
    }
    for a in &names {
        for b in &names {
            if a != b {
                table.push(template.prompt(&[a, b]), &world.text_embed(&[a, b])?);
            }
        }
    }
    write_text_table(&dir.join("text.dett"), &table)?;

    let wf = WorldFile {
        seed: cfg.seed,
        world: cfg.world.clone(),
    };
    write_text(&dir.join("world.toml"), &toml::to_string(&wf).expect("world serializes"))?;
    println!(
        "{} records, style {} / clip {}, {} prompts",
        dataset.len(),
        dataset.style_dim(),
        dataset.clip_dim(),
        table.len()
    );
    Ok(())
}

fn load_datasets(paths: &[PathBuf]) -> Result<EmbeddingDataset> {
    let mut it = paths.iter();
    let first = it.next().ok_or_else(|| usage("no dataset given (use --dataset or train.datasets)"))?;
    let mut d = read_dataset(first)?;
    for p in it {
        let next = read_dataset(p)?;
        d = d.concat(&next).ok_or_else(|| {
            data(format!(
                "{} has dimensions {}x{}, expected {}x{}",
                p.display(),
                next.clip_dim(),
                next.style_dim(),
                d.clip_dim(),
                d.style_dim()
            ))
        })?;
    }
    Ok(d)
}

fn train_cmd(
    common: &Common,
    datasets: Vec<PathBuf>,
    steps: Option<u64>,
    mode: Option<Mode>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.train.datasets.extend(datasets);
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(m) = mode {
        cfg.train.mode = match m {
            Mode::Delta => ConditionMode::Delta,
            Mode::Naive => ConditionMode::Naive,
        };
    }
    let dataset = load_datasets(&cfg.train.datasets)?;
    let mut inputs: Vec<String> = cfg.train.datasets.iter().map(|p| path_key(p)).collect();
    if let Some(r) = &resume {
        inputs.push(format!("resume={}", path_key(r)));
    }

    let mut trainer = match &resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            Trainer::resume(cfg.train.clone(), &dataset, &ck)?
        }
        None => Trainer::new(cfg.train.clone(), &dataset)?,
    };
    let dir = run_dir(common, "train", &cfg, &inputs)?;
    let every = cfg.train.checkpoint_every;
    while trainer.step() < cfg.train.steps {
        trainer.step_once()?;
        if every > 0 && trainer.step() % every == 0 {
            write_checkpoint(&dir.join(format!("ckpt-{:08}.dmap", trainer.step())), &trainer.checkpoint())?;
        }
    }
    write_checkpoint(&dir.join("checkpoint.dmap"), &trainer.checkpoint())?;
    write_text(&dir.join("history.csv"), &trainer.history().to_csv())?;
    let val = trainer
        .validation_cosine()
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} mode, {} steps, {} parameters, held-out cosine {val}",
        cfg.train.mode.as_str(),
        trainer.step(),
        trainer.params().num_scalars()
    );
    Ok(())
}

fn relevance_cmd(common: &Common, world: &Path, dataset: &Path, samples: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = samples {
        cfg.relevance.samples = m;
    }
    let w = load_world(world)?;
    let d = read_dataset(dataset)?;
    if d.style_dim() != w.style_dim() {
        return Err(data(format!(
            "dataset style width {} does not match the world's {}",
            d.style_dim(),
            w.style_dim()
        )));
    }
    let dir = run_dir(common, "relevance", &cfg, &[path_key(world), path_key(dataset)])?;
    let styles = d.styles().mapv(f64::from);
    let rs = estimate_relevance(&w, styles.view(), &cfg.relevance)?;
    write_relevance(&dir.join("relevance.derm"), &rs)?;
    let dead = (0..rs.style_dim()).filter(|&c| rs.is_dead(c)).count();
    println!(
        "{} channels, {} dead, mean probe {:.4e}, {} samples each",
        rs.style_dim(),
        dead,
        rs.probe,
        rs.samples
    );
    Ok(())
}

struct EditArgs {
    common: Common,
    checkpoint: PathBuf,
    text: PathBuf,
    dataset: PathBuf,
    index: usize,
    attrs: String,
    source_attrs: String,
    relevance: Option<PathBuf>,
    beta: Option<f64>,
    strength: Option<f64>,
    world: Option<PathBuf>,
}

fn vector_csv(v: &[f64]) -> String {
    let mut out = String::from("channel,value\n");
    for (c, x) in v.iter().enumerate() {
        let _ = writeln!(out, "{c},{x:e}");
    }
    out
}

fn read_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .kind(Kind::Data)?;
    let mut lines = text.lines();
    if lines.next() != Some("channel,value") {
        return Err(data(format!("{}: expected a `channel,value` header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(k, line)| {
            let v = line.split_once(',').and_then(|(c, v)| {
                let c: usize = c.parse().ok()?;
                (c == k).then(|| v.parse::<f64>().ok()).flatten()
            });
            v.ok_or_else(|| data(format!("{}: bad row {}: `{line}`", path.display(), k + 2)))
        })
        .collect()
}

fn edit_cmd(a: EditArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(b) = a.beta {
        cfg.filter.beta = b;
    }
    if let Some(s) = a.strength {
        cfg.filter.strength = s;
    }
    let attrs = split_list(&a.attrs);
    let source_attrs = split_list(&a.source_attrs);
    if attrs.is_empty() {
        return Err(usage("--attrs needs at least one attribute"));
    }

    let ck = read_checkpoint(&a.checkpoint)?;
    let table = read_text_table(&a.text, Some(ck.arch().clip_dim))?;
    let d = read_dataset(&a.dataset)?;
    if a.index >= d.len() {
        return Err(usage(format!("--index {} out of range for {} records", a.index, d.len())));
    }
    let rs = a.relevance.as_deref().map(read_relevance).transpose()?;

    let mut inputs = vec![
        path_key(&a.checkpoint),
        path_key(&a.text),
        path_key(&a.dataset),
        format!("index={}", a.index),
        format!("attrs={}", attrs.join(",")),
        format!("source_attrs={}", source_attrs.join(",")),
    ];
    if let Some(r) = &a.relevance {
        inputs.push(path_key(r));
    }

    let template = PromptTemplate::default();
    let target: Vec<&str> = attrs.iter().map(String::as_str).collect();
    let source: Vec<&str> = source_attrs.iter().map(String::as_str).collect();
    let texts = text_pair_between(&table, &template, &source, &target)?;
    let (s, i) = (d.style(a.index), d.image(a.index));
    let result = edit(&ck.params, ck.mode, &s, &i, &texts, rs.as_ref(), &cfg.filter)?;
    if !result.edited.iter().all(|v| v.is_finite()) {
        return Err(crate::failure::Failure {
            kind: Kind::Numerical,
            error: anyhow::anyhow!("edit produced non-finite values"),
        });
    }

    let (mut accuracy, mut leak) = (String::new(), String::new());
    if let Some(wp) = &a.world {
        inputs.push(path_key(wp));
        let w = load_world(wp)?;
        if source.is_empty() {
            let oracle = w.oracle_direction(&target, &s)?;
            let support = w.support_of(&target)?;
            accuracy = format!("{:.9}", cosine(&result.delta_filtered, &oracle));
            leak = format!(
                "{:.9}",
                deltaedit::evaluation::leakage(&result.delta_filtered, &support)
            );
        }
    }

    let dir = run_dir(&a.common, "edit", &cfg, &inputs)?;
    write_text(&dir.join("edited.csv"), &vector_csv(&result.edited))?;
    write_text(&dir.join("delta.csv"), &vector_csv(&result.delta_filtered))?;
    let metrics = format!(
        "attrs,source_attrs,beta,strength,zeroed,delta_norm,accuracy,leakage\n\"{}\",\"{}\",{},{},{},{:.9},{},{}\n",
        attrs.join(","),
        source_attrs.join(","),
        cfg.filter.beta,
        cfg.filter.strength,
        result.zeroed,
        norm(&result.delta_filtered),
        accuracy,
        leak
    );
    write_text(&dir.join("metrics.csv"), &metrics)?;
    print!("{metrics}");
    Ok(())
}

fn attribute_csv(m: &ModeMetrics) -> String {
    let mut out = String::from("attribute,accuracy,leakage,edited_variance\n");
    for a in &m.attributes {
        let _ = writeln!(out, "{},{:.9},{:.9},{:.9}", a.name, a.accuracy, a.leakage, a.edited_variance);
    }
    out
}

fn eval_cmd(
    common: &Common,
    mode: EvalMode,
    world: &Path,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    relevance: Option<PathBuf>,
    beta: Option<f64>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(b) = beta {
        cfg.filter.beta = b;
    }
    cfg.eval.filter = cfg.filter;
    let w = load_world(world)?;
    let rs = relevance.as_deref().map(read_relevance).transpose()?;
    let mut inputs = vec![path_key(world)];
    inputs.extend(relevance.as_deref().map(path_key));
    match mode {
        EvalMode::Single => {
            let ck_path = checkpoint.ok_or_else(|| usage("eval --mode single needs --checkpoint"))?;
            let ck = read_checkpoint(&ck_path)?;
            inputs.push(path_key(&ck_path));
            let m = evaluate_mapper(&w, &ck.params, ck.mode, rs.as_ref(), &cfg.eval)?;
            let dir = run_dir(common, "eval", &cfg, &inputs)?;
            let report = ComparisonReport { rows: vec![m] };
            write_text(&dir.join("attributes.csv"), &attribute_csv(&report.rows[0]))?;
            write_text(&dir.join("metrics.csv"), &report.to_csv())?;
            write_text(&dir.join("summary.txt"), &report.summary())?;
            print!("{}", report.summary());
        }
        EvalMode::Compare => {
            let d_path = dataset.ok_or_else(|| usage("eval --mode compare needs --dataset"))?;
            let d = read_dataset(&d_path)?;
            inputs.push(path_key(&d_path));
            let mut report = compare_modes(&w, &d, &cfg.train, rs.as_ref(), &cfg.eval)?;
            report.rows.push(evaluate_linear_baseline(&w, &d, d.len().min(20_000), &cfg.eval)?);
            let dir = run_dir(common, "eval", &cfg, &inputs)?;
            write_text(&dir.join("compare.csv"), &report.to_csv())?;
            write_text(&dir.join("summary.txt"), &report.summary())?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn gap_stats_cmd(common: &Common, world: &Path, pairs: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let w = load_world(world)?;
    let dir = run_dir(common, "gap-stats", &cfg, &[path_key(world), format!("pairs={pairs}")])?;
    let p = w.paired_embeddings(pairs, cfg.seed);
    let stats = gap_stats_of_pairs(&p)?;
    write_text(&dir.join("gap.csv"), &stats.to_csv())?;

    let images: Vec<Vec<f64>> = p.iter().map(|x| x.image.clone()).collect();
    let texts: Vec<Vec<f64>> = p.iter().map(|x| x.text.clone()).collect();
    let di: Vec<Vec<f64>> = p.iter().map(|x| x.delta_image.clone()).collect();
    let dt: Vec<Vec<f64>> = p.iter().map(|x| x.delta_text.clone()).collect();
    let raw = export_projection(&[("image", &images), ("text", &texts)])?;
    let delta = export_projection(&[("delta_image", &di), ("delta_text", &dt)])?;
    write_text(&dir.join("projection_raw.csv"), &raw.to_csv())?;
    write_text(&dir.join("projection_delta.csv"), &delta.to_csv())?;
    print!("{}", stats.to_csv());
    Ok(())
}

fn interpolate_cmd(common: &Common, a: &Path, b: &Path, omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(usage(format!("--omega {omega} outside [0, 1]")));
    }
    let cfg = load_config(common)?;
    let va = read_vector_csv(a)?;
    let vb = read_vector_csv(b)?;
    let out = interpolate(&va, &vb, omega)?;
    let dir = run_dir(common, "interpolate", &cfg, &[path_key(a), path_key(b), format!("omega={omega}")])?;
    write_text(&dir.join("interpolated.csv"), &vector_csv(&out))?;
    Ok(())
}

fn inspect_cmd(file: &Path, clip_dim: Option<usize>) -> Result<()> {
    let bytes = store::read_file(file)?;
    let kind = store::sniff(&bytes).ok_or_else(|| data(format!("{}: unrecognised file magic", file.display())))?;
    println!("{}: {kind}, {} bytes", file.display(), bytes.len());
    match kind {
        "dataset" => {
            let h = store::dataset_header(&bytes)?;
            println!("records {}  clip_dim {}  style_dim {}  digest {:016x}", h.n, h.clip_dim, h.style_dim, h.digest);
            let d = store::decode_dataset(&bytes)?;
            println!("validation: {}", d.validate());
        }
        "text table" => {
            let t = store::decode_text_table(&bytes, clip_dim)?;
            println!("entries {}  clip_dim {}", t.len(), t.clip_dim().unwrap_or(0));
            for (name, _) in &t.entries {
                println!("  {name}");
            }
        }
        "relevance matrix" => {
            let rs = store::decode_relevance(&bytes)?;
            let dead = (0..rs.style_dim()).filter(|&c| rs.is_dead(c)).count();
            println!(
                "style_dim {}  clip_dim {}  probe {:e}  samples {}  dead channels {}",
                rs.style_dim(),
                rs.clip_dim(),
                rs.probe,
                rs.samples,
                dead
            );
        }
        _ => {
            let ck = store::decode_checkpoint(&bytes)?;
            let l = ck.arch().layout;
            println!(
                "layout {}x{} / {}x{} / {}  clip_dim {}  mode {}  seed {}  step {}  parameters {}  config {:016x}",
                l.coarse_layers,
                l.coarse_dim,
                l.medium_layers,
                l.medium_dim,
                l.fine_dim,
                ck.arch().clip_dim,
                ck.mode.as_str(),
                ck.seed,
                ck.step(),
                ck.params.num_scalars(),
                ck.config_digest
            );
            println!("optimizer state: {}", if ck.trainer.is_some() { "present" } else { "absent" });
        }
    }
    Ok(())
}
