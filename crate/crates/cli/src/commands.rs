use std::path::Path;

use siv_core::checkpoint;
use siv_core::config::RunConfig;
use siv_core::data::{
    list_frames, load_image, load_source_with_workers, save_image, workers_from_env,
};
use siv_core::evaluation::{evaluate as evaluate_metrics, to_native_size};
use siv_core::generator::sample_latent_seeded;
use siv_core::training::{run_training, RunLayout};
use siv_core::{ConvStackExtractor, Error, Generator, Result, Tensor, TrainState, TrainingSource};

/// Samples generated per forward pass.
const CHUNK: usize = 16;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_training_source(cfg: &RunConfig, path: &Path) -> Result<TrainingSource> {
    load_source_with_workers(path, cfg.source_kind(path)?, workers_from_env())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn train(
    config: Option<&Path>,
    source: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    let src = load_training_source(&cfg, source)?;
    let mut state = match resume {
        Some(p) => checkpoint::load(p)?,
        None => TrainState::new(cfg.resolve(src.native_size, src.kind)?)?,
    };
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io_err(&cfg_path, e))?;

    let (h, w) = state.setup.image_size();
    eprintln!(
        "training {}x{} from {} for {} iterations (starting at {})",
        h,
        w,
        source.display(),
        state.setup.training.iterations,
        state.iteration
    );
    let rows = run_training(&mut state, &src, out)?;
    if let Some(last) = rows.last() {
        eprintln!(
            "iteration {}: d_total {:.4} g_total {:.4} dr {:.4}",
            last.iter, last.d_total, last.g_total, last.dr
        );
    }
    println!("{}", RunLayout::new(out).final_checkpoint().display());
    Ok(())
}

/// Generated images for `n` latents drawn with `seed`, in sample order.
fn sample(
    generator: &Generator<f32>,
    n: usize,
    seed: u64,
    mut each: impl FnMut(usize, &Tensor<f32>) -> Result<()>,
) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let z = sample_latent_seeded::<f32>(seed, n, generator.config())?;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let chunk = siv_core::LatentBatch {
            values: z.values.select_batch(&idx),
            seed: z.seed,
        };
        let images = generator.generate(&chunk)?.final_image;
        for (k, &i) in idx.iter().enumerate() {
            each(i, &images.select_batch(&[k]))?;
        }
    }
    Ok(())
}

pub fn generate(ckpt: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    sample(&state.generator, n, seed, |i, img| {
        save_image(img, 0, &out.join(format!("sample_{i:05}.png")))
    })?;
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn plugin(selection: &str, toy_seed: u64) -> Result<ConvStackExtractor> {
    match selection.split_once(':') {
        None if selection == "toy" => Ok(ConvStackExtractor::toy(toy_seed)),
        Some(("files", path)) if !path.is_empty() => ConvStackExtractor::load(Path::new(path)),
        _ => Err(Error::Plugin(format!(
            "unknown plugin selection {selection:?}; use \"toy\" or \"files:<weights path>\""
        ))),
    }
}

pub fn evaluate(
    input: &Path,
    source: &Path,
    config: Option<&Path>,
    plugins: Option<&str>,
    n: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let metric = plugin(
        plugins.unwrap_or(&cfg.evaluation.plugins),
        cfg.evaluation.toy_seed,
    )?;
    let src = load_training_source(&cfg, source)?;
    let native = src.native_size;

    let mut generated = Vec::new();
    if input.is_dir() {
        for f in list_frames(input)? {
            generated.extend(to_native_size(&load_image(&f)?, native));
        }
    } else {
        let state = checkpoint::load(input)?;
        let n = n.unwrap_or(cfg.evaluation.n_generated);
        sample(&state.generator, n, seed, |_, img| {
            generated.extend(to_native_size(img, native));
            Ok(())
        })?;
    }

    let report = evaluate_metrics(
        &generated,
        &src,
        &metric,
        &metric,
        &cfg.image_aug(),
        &cfg.eval_config(),
    )?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (name, text) in [
        ("metrics.json", report.to_json()),
        ("metrics.csv", report.to_csv()),
    ] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    for (k, v) in report.entries() {
        println!("{k} {v}");
    }
    Ok(())
}

pub fn inspect(path: Option<&Path>) -> Result<()> {
    let Some(path) = path else {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    };
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(checkpoint::MAGIC) {
        let (m, _) = checkpoint::read_manifest(&bytes)?;
        let count = |prefix: &str| -> usize {
            m.tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, t)| t.shape.iter().product::<usize>())
                .sum()
        };
        let (h, w) = m.setup.image_size();
        println!(
            "checkpoint format {} at iteration {}",
            m.format_version, m.iteration
        );
        println!("output size {h}x{w}");
        println!("generator parameters {}", count("generator/"));
        println!("discriminator parameters {}", count("discriminator/"));
        println!(
            "{}",
            serde_json::to_string_pretty(&m.setup).expect("setup is serializable")
        );
    } else {
        let text = String::from_utf8(bytes).map_err(|_| {
            Error::Config(format!(
                "{} is neither a checkpoint nor a TOML file",
                path.display()
            ))
        })?;
        print!("{}", RunConfig::from_toml(&text)?.to_toml());
    }
    Ok(())
}
