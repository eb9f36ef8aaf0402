use std::path::{Path, PathBuf};

use portrait_core::image::{load_image, load_mask, ImageGrid, Mask};
use portrait_core::metrics::{id_score_report, IdPair};

use crate::command_config;
use crate::error::CliError;
use crate::util::write_file;

command_config! {
    /// Settings of `metrics`.
    MetricsConfig / MetricsArgs {
        /// Pairs as name:source:generated:mask; repeat the flag for more pairs.
        #[arg(alias = "pair")]
        pairs: Vec<String> => Vec<String> = Vec::new(),
        /// JSONL output file; stdout when unset.
        output: Option<PathBuf> => PathBuf = None,
        /// Recorded for reproducibility; the report draws no randomness.
        seed: u64 => u64 = 0,
    }
}

struct LoadedPair {
    name: String,
    source: ImageGrid,
    generated: ImageGrid,
    mask: Mask,
}

fn load_pair(i: usize, spec: &str) -> Result<LoadedPair, CliError> {
    let parts: Vec<&str> = spec.splitn(4, ':').collect();
    let [name, src, gen, mask] = parts[..] else {
        return Err(CliError::validation(
            format!("pairs[{i}]"),
            format!("`{spec}` is not name:source:generated:mask"),
        ));
    };
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::validation(format!("pairs[{i}]"), "empty component"));
    }
    Ok(LoadedPair {
        name: name.to_string(),
        source: load_image(Path::new(src))?,
        generated: load_image(Path::new(gen))?,
        mask: load_mask(Path::new(mask))?,
    })
}

/// The report text for `cfg`; pairs are loaded on parallel threads, the
/// scores are computed in input order.
pub fn report(cfg: &MetricsConfig) -> Result<String, CliError> {
    if cfg.pairs.is_empty() {
        return Err(CliError::validation("pairs", "at least one pair is required"));
    }
    let loaded: Vec<LoadedPair> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| scope.spawn(move || load_pair(i, p)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pair loader panicked"))
            .collect::<Result<_, _>>()
    })?;
    let pairs: Vec<IdPair<'_>> = loaded
        .iter()
        .map(|p| IdPair {
            name: p.name.clone(),
            source: &p.source,
            generated: &p.generated,
            mask: &p.mask,
        })
        .collect();
    Ok(id_score_report(&pairs)?.to_jsonl())
}

pub fn run(cfg: &MetricsConfig) -> Result<(), CliError> {
    let text = report(cfg)?;
    match &cfg.output {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
