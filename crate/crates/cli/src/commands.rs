use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use impute_core::analysis::{embedding_csv, encode_styles, export_embedding, interpolate_styles, StyleTable};
use impute_core::dataset::{load_any, min_max_normalize, pad_to_square, write_dataset};
use impute_core::inference::{decode_codes, impute as impute_image, StyleSource};
use impute_core::metrics::{evaluate, metrics_csv, EvalStyle};
use impute_core::networks::Model;
use impute_core::pgm::Pgm;
use impute_core::phantom::make_dataset;
use impute_core::training::{self, load_model, LOG_FILE};
use impute_core::{DomainLabel, ModalityImage};
use log::info;

use crate::config::{env_seed, RunConfig};
use crate::CliError;

pub const STYLE_TABLE: &str = "style_table.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const NAN_DUMP: &str = "nan_dump.json";
const STATUS_EVERY: u64 = 100;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn gen_data(out: &Path, n: usize, size: usize, seed: Option<u64>) -> Result<(), CliError> {
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let data = make_dataset(n, size, seed)?;
    let manifest = write_dataset(&data, out, seed)?;
    println!(
        "wrote {} subjects to {} (train {}, val {}, test {})",
        manifest.n,
        out.display(),
        manifest.splits.train,
        manifest.splits.val,
        manifest.splits.test
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let data_dir = cfg
        .paths
        .data
        .as_deref()
        .ok_or_else(|| usage("no dataset: pass --data or set paths.data"))?;
    let out = cfg
        .paths
        .out
        .as_deref()
        .ok_or_else(|| usage("no output directory: pass --out or set paths.out"))?;
    if !data_dir.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", data_dir.display())));
    }
    let samples = load_any(data_dir, cfg.arch.size, "train")?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json())?;
    let total = cfg.train.iterations;
    let result = training::train(&samples, cfg.arch.clone(), cfg.train.clone(), out, resume, |iter, b| {
        if iter % STATUS_EVERY == 0 || iter == total {
            println!(
                "iter {iter}/{total} csl {:.5} ccl {:.5} g_adv {:.5} sdl {:.5} g_total {:.5} dsc_adv {:.5}",
                b.csl, b.ccl, b.g_adv, b.sdl, b.g_total, b.dsc_adv
            );
        }
    });
    match result {
        Ok(_) => {
            println!("training finished; log at {}", out.join(LOG_FILE).display());
            Ok(())
        }
        Err(impute_core::Error::NonFinite { iteration, detail }) => {
            let dump = out.join(NAN_DUMP);
            write_file(&dump, detail + "\n")?;
            Err(CliError::Numeric(format!(
                "non-finite loss at iteration {iteration}; state dumped to {}",
                dump.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// Checkpoint plus the three observed contrasts and the target.
#[derive(Args, Clone, Debug)]
pub struct ModelInputs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Three PGMs as DOMAIN=path, or paths whose file stem names the domain.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub target: String,
    /// Defaults to style_table.json next to the checkpoint.
    #[arg(long)]
    pub style_table: Option<PathBuf>,
}

fn parse_domain(s: &str) -> Result<DomainLabel, CliError> {
    s.parse().map_err(|e: impute_core::Error| usage(e.to_string()))
}

fn split_input(spec: &str) -> Result<(DomainLabel, PathBuf), CliError> {
    if let Some((d, p)) = spec.split_once('=') {
        return Ok((parse_domain(d)?, PathBuf::from(p)));
    }
    let path = PathBuf::from(spec);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let domain = stem
        .parse()
        .map_err(|_| usage(format!("cannot tell the domain of {spec}; write it as DOMAIN=path")))?;
    Ok((domain, path))
}

/// Reads a PGM as a model input. Images of the model size are used as
/// stored; smaller ones are min-max normalized and zero-padded.
pub fn read_image(path: &Path, domain: DomainLabel, size: usize) -> Result<ModalityImage, CliError> {
    let pgm = Pgm::read(path)?;
    let pixels = if pgm.width == size && pgm.height == size {
        pgm.to_unit()
    } else {
        let (values, _) = min_max_normalize(&pgm.to_unit());
        pad_to_square(&values, pgm.height, pgm.width, size).ok_or_else(|| {
            usage(format!(
                "{}: {}x{} image does not fit the model size {size}",
                path.display(),
                pgm.width,
                pgm.height
            ))
        })?
    };
    Ok(ModalityImage::new(domain, size, pixels)?)
}

fn write_image(path: &Path, img: &ModalityImage) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Pgm::from_unit(img.size(), img.size(), img.pixels()).write(path)?;
    Ok(())
}

struct Loaded {
    model: Model<f32>,
    inputs: Vec<ModalityImage>,
    target: DomainLabel,
}

fn load_inputs(args: &ModelInputs) -> Result<Loaded, CliError> {
    let target = parse_domain(&args.target)?;
    let (model, _) = load_model(&args.ckpt)?;
    let size = model.arch().size;
    let inputs = args
        .inputs
        .iter()
        .map(|spec| {
            let (d, p) = split_input(spec)?;
            read_image(&p, d, size)
        })
        .collect::<Result<Vec<_>, _>>()?;
    impute_core::inference::canonical_inputs(&inputs, target)?;
    Ok(Loaded { model, inputs, target })
}

fn style_table_path(args: &ModelInputs) -> PathBuf {
    args.style_table.clone().unwrap_or_else(|| {
        args.ckpt
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join(STYLE_TABLE)
    })
}

fn read_style_table(args: &ModelInputs) -> Result<StyleTable, CliError> {
    let path = style_table_path(args);
    let text = fs::read_to_string(&path).map_err(|_| {
        usage(format!(
            "style table {} not found; run `impute eval` on this checkpoint first",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn mean_style(table: &StyleTable, d: DomainLabel) -> Result<Vec<f64>, CliError> {
    table
        .get(d)
        .map(|s| s.mean.clone())
        .ok_or_else(|| usage(format!("style table has no entry for {d}")))
}

pub fn impute(args: &ModelInputs, style: &str, out: &Path) -> Result<(), CliError> {
    let loaded = load_inputs(args)?;
    let size = loaded.model.arch().size;
    let reference;
    let source = match style.split_once(':').unwrap_or((style, "")) {
        ("ref", path) if !path.is_empty() => {
            reference = read_image(Path::new(path), loaded.target, size)?;
            StyleSource::Reference(&reference)
        }
        ("latent", seed) => StyleSource::Latent(
            seed.parse()
                .map_err(|_| usage(format!("latent style needs an integer seed, got {seed:?}")))?,
        ),
        ("mean", d) => {
            let domain = if d.is_empty() { loaded.target } else { parse_domain(d)? };
            StyleSource::Code(mean_style(&read_style_table(args)?, domain)?)
        }
        _ => return Err(usage(format!("unknown style {style:?}; use ref:<path>, latent:<seed> or mean[:DOMAIN]"))),
    };
    let img = impute_image(&loaded.model, &loaded.inputs, loaded.target, &source)?;
    write_image(out, &img)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn interpolate(args: &ModelInputs, from: &str, to: &str, step: f64, out: &Path) -> Result<(), CliError> {
    let (from, to) = (parse_domain(from)?, parse_domain(to)?);
    let loaded = load_inputs(args)?;
    let table = read_style_table(args)?;
    let path = interpolate_styles(&mean_style(&table, from)?, &mean_style(&table, to)?, step)?;
    let codes: Vec<Vec<f64>> = path.iter().map(|(_, c)| c.clone()).collect();
    let images = decode_codes(&loaded.model, &loaded.inputs, loaded.target, &codes)?;
    create_dir(out)?;
    for (k, img) in images.iter().enumerate() {
        write_image(&out.join(format!("alpha_{k:02}.pgm")), img)?;
    }
    let alphas: Vec<f64> = path.iter().map(|(a, _)| *a).collect();
    let record = serde_json::json!({ "from": from, "to": to, "target": loaded.target, "alphas": alphas });
    write_file(&out.join("alphas.json"), serde_json::to_string_pretty(&record).expect("json") + "\n")?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path, cohort: &str) -> Result<(), CliError> {
    if !ckpt.is_file() {
        return Err(usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let (model, _) = load_model(ckpt)?;
    let size = model.arch().size;
    let train = load_any(data, size, "train")?;
    let test = load_any(data, size, "test")?;
    create_dir(out)?;

    let rows = evaluate(&model, &test, cohort, EvalStyle::Reference)?;
    write_file(&out.join(METRICS_FILE), metrics_csv(&rows))?;

    let table = StyleTable::from_codes(model.arch().style_dim, &encode_styles(&model, &train)?)?;
    write_file(
        &out.join(STYLE_TABLE),
        serde_json::to_string_pretty(&table).expect("json") + "\n",
    )?;

    let test_codes = encode_styles(&model, &test)?;
    let labels: Vec<DomainLabel> = test_codes.iter().map(|(d, _)| *d).collect();
    let codes: Vec<Vec<f64>> = test_codes.into_iter().map(|(_, c)| c).collect();
    let points = export_embedding(&codes)?;
    write_file(&out.join(EMBEDDING_FILE), embedding_csv(&labels, &points))?;

    for r in &rows {
        println!("{}", r.csv());
    }
    Ok(())
}
