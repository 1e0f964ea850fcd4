use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use errata_core::corpus::{ingest, TraceDataset};
use errata_core::gateway::{Gateway, GatewayConfig, HttpProviderConfig, ProviderRegistry, ProviderSpec};
use errata_core::manifest::RunManifest;
use errata_core::{Classification, Rubric};
use serde::Serialize;

use crate::args::ProviderArgs;

pub fn gateway(args: &ProviderArgs) -> Result<Gateway> {
    let name = args.provider.clone().unwrap_or_else(|| {
        if args.script.is_some() { "scripted" } else { "http" }.to_string()
    });
    let spec = ProviderSpec {
        name,
        script: args.script.clone(),
        http: HttpProviderConfig::from_env(),
    };
    let provider = ProviderRegistry::with_builtins().build(&spec)?;
    let config = GatewayConfig {
        max_retries: args.max_retries,
        concurrency: args.concurrency.max(1),
        rate_per_sec: args.rate_limit,
        context_limit: args.context_chars,
        ..GatewayConfig::default()
    };
    Ok(Gateway::new(provider, config))
}

/// Starts a manifest with the provider fingerprint and script digest.
pub fn manifest_with_provider(
    command: &str,
    config: &impl Serialize,
    gateway: &Gateway,
    args: &ProviderArgs,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new(command, serde_json::to_value(config)?)
        .provider(gateway.provider_fingerprint());
    if let Some(script) = &args.script {
        manifest.input(script)?;
    }
    Ok(manifest)
}

pub fn load_dataset(path: &Path) -> Result<TraceDataset> {
    let (dataset, _) = ingest(path, false).with_context(|| format!("loading {}", path.display()))?;
    Ok(dataset)
}

pub fn load_dataset_permissive(path: &Path, permissive: bool) -> Result<TraceDataset> {
    let (dataset, skipped) =
        ingest(path, permissive).with_context(|| format!("loading {}", path.display()))?;
    for line in &skipped {
        tracing::warn!(%line, "skipped malformed line");
    }
    Ok(dataset)
}

pub fn load_rubric(path: &Path) -> Result<Rubric> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Rubric::from_slice(&bytes).with_context(|| format!("loading rubric {}", path.display()))
}

pub fn load_exemplars(path: Option<&Path>) -> Result<Arc<BTreeMap<String, String>>> {
    Ok(match path {
        Some(p) => errata_core::classifier::exemplars(&load_dataset(p)?),
        None => Arc::default(),
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<Classification>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}: bad prediction", path.display(), i + 1))
        })
        .collect()
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn pretty_json(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Drops any trailing separator so `<dir>.manifest.json` lands beside it.
pub fn normalized(path: &Path) -> PathBuf {
    path.components().collect()
}

/// Records outputs and writes a manifest beside each of them.
pub fn finish(mut manifest: RunManifest, outputs: &[&Path]) -> Result<()> {
    if outputs.is_empty() {
        bail!("no outputs to record");
    }
    for out in outputs {
        manifest.output(out)?;
    }
    for out in outputs {
        manifest.write_for(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_separator_is_dropped() {
        assert_eq!(normalized(Path::new("out/world/")), PathBuf::from("out/world"));
        assert_eq!(
            errata_core::manifest::manifest_path(&normalized(Path::new("world/"))),
            PathBuf::from("world.manifest.json")
        );
    }
}
