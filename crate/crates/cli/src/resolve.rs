//! Config and dataset resolution shared by the subcommands.

use std::fs;
use std::path::Path;

use cacl_core::dataset::{generate_split, load_manifest, load_ppm_dir, split, Dataset, SyntheticSpec, MANIFEST_FILE};
use cacl_core::rng::{derive, seeded};
use cacl_core::trainer::TrainConfig;
use sha2::{Digest, Sha256};

use crate::args::{DataArgs, GlobalArgs, Preset};
use crate::CliError;

pub const SEED_ENV: &str = "CACL_SEED";

fn preset_config(p: Preset) -> TrainConfig {
    match p {
        Preset::Benchmark => TrainConfig::benchmark(),
        Preset::FullScale => TrainConfig::default(),
    }
}

fn parse_preset(v: &str) -> Result<Preset, CliError> {
    match v.trim() {
        "benchmark" => Ok(Preset::Benchmark),
        "full-scale" => Ok(Preset::FullScale),
        other => Err(CliError::Usage(format!("unknown preset `{other}`"))),
    }
}

fn usage(e: cacl_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Splits the `preset` line off a config file, since it is not a config field.
fn take_preset(text: &str) -> Result<(Option<Preset>, String), CliError> {
    let mut preset = None;
    let mut rest = String::new();
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or_default();
        match body.split_once('=') {
            Some((k, v)) if k.trim() == "preset" => preset = Some(parse_preset(v)?),
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    Ok((preset, rest))
}

fn mentions_seed(text: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .any(|(k, _)| k.trim() == "seed")
}

/// Resolves the run config in increasing precedence: `base` (a checkpoint's
/// config) or the preset, the config file, `--set` pairs, dedicated flags and
/// `--seed`. `CACL_SEED` applies when nothing else chose a seed.
pub fn resolve_config(
    global: &GlobalArgs,
    base: Option<&TrainConfig>,
    flags: &[(&'static str, String)],
) -> Result<TrainConfig, CliError> {
    let file_text = match &global.config {
        Some(path) => fs::read_to_string(path).map_err(|e| cacl_core::Error::io(path, e))?,
        None => String::new(),
    };
    let (file_preset, file_text) = take_preset(&file_text)?;
    let mut cfg = match base {
        Some(b) => b.clone(),
        None => preset_config(global.preset.or(file_preset).unwrap_or(Preset::Benchmark)),
    };
    cfg.apply_text(&file_text).map_err(usage)?;
    let mut seed_chosen = base.is_some() || mentions_seed(&file_text);
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v).map_err(usage)?;
        seed_chosen |= k.trim() == "seed";
    }
    for (k, v) in flags {
        cfg.set(k, v).map_err(usage)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    } else if !seed_chosen {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}: cannot parse `{v}` as a seed")))?;
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Loads `--data` or generates the synthetic set with `seed`. Returns the
/// dataset and a short description of where it came from.
pub fn load_data(args: &DataArgs, seed: u64) -> Result<(Dataset, String), CliError> {
    match &args.data {
        Some(dir) if dir.join(MANIFEST_FILE).is_file() => Ok((load_manifest(dir)?, dir.display().to_string())),
        Some(dir) => {
            let ds = load_ppm_dir(dir)?;
            if ds.is_empty() {
                return Err(CliError::Runtime(cacl_core::Error::InvalidArgument(format!(
                    "{}: no PPM images",
                    dir.display()
                ))));
            }
            let tags = split(&ds, &mut seeded(derive(seed, 4)))?;
            Ok((ds.with_tags(tags)?, dir.display().to_string()))
        }
        None => {
            let spec = SyntheticSpec {
                n_identities: args.identities,
                images_per_identity: args.per_identity,
                seed,
                ..SyntheticSpec::default()
            };
            let ds = generate_split(&spec)?;
            Ok((
                ds,
                format!(
                    "synthetic: {} identities x {}, seed {seed}",
                    args.identities, args.per_identity
                ),
            ))
        }
    }
}

/// SHA-256 over the resolved config text and every sample's label, split
/// tag and pixel bits.
pub fn input_hash(cfg: Option<&TrainConfig>, ds: Option<&Dataset>) -> String {
    let mut h = Sha256::new();
    if let Some(cfg) = cfg {
        h.update(b"config\0");
        h.update(cfg.to_text().as_bytes());
    }
    if let Some(ds) = ds {
        h.update(b"data\0");
        for (s, tag) in ds.samples.iter().zip(&ds.tags) {
            h.update((s.identity as u64).to_le_bytes());
            h.update((s.camera as u64).to_le_bytes());
            h.update([*tag as u8]);
            h.update((s.image.height() as u64).to_le_bytes());
            h.update((s.image.width() as u64).to_le_bytes());
            for p in s.image.pixels() {
                h.update(p.to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(cacl_core::Error::io(dir, e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_line_is_removed() {
        let (p, rest) = take_preset("preset = full-scale # base\nepochs = 2\n").unwrap();
        assert_eq!(p, Some(Preset::FullScale));
        assert_eq!(rest.trim(), "epochs = 2");
        assert!(take_preset("preset = best").is_err());
    }

    #[test]
    fn seed_mentions() {
        assert!(mentions_seed("seed = 3"));
        assert!(!mentions_seed("# seed = 3\nepochs = 1"));
    }

    #[test]
    fn hash_depends_on_config_and_data() {
        let cfg = TrainConfig::benchmark();
        let other = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        let ds = generate_split(&SyntheticSpec {
            n_identities: 4,
            images_per_identity: 6,
            ..Default::default()
        })
        .unwrap();
        let a = input_hash(Some(&cfg), Some(&ds));
        assert_eq!(a.len(), 64);
        assert_eq!(a, input_hash(Some(&cfg), Some(&ds)));
        assert_ne!(a, input_hash(Some(&other), Some(&ds)));
        assert_ne!(a, input_hash(Some(&cfg), None));
    }
}
