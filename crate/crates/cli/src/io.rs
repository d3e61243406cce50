use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use decorum::config::Config;
use decorum::decorate::ObjectPrior;
use decorum::scene::Inventory;
use decorum::templates::TEMPLATE_VERSION;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Bad invocation detected after argument parsing; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn load_inventory(path: &Path) -> Result<Inventory> {
    let inv: Inventory = read_json(path)?;
    inv.validate()
        .with_context(|| format!("invalid inventory {}", path.display()))?;
    Ok(inv)
}

/// The prior stored at `path`, or a uniform prior over `inventory`.
pub fn load_prior(path: Option<&Path>, inventory: &Inventory) -> Result<ObjectPrior> {
    match path {
        None => Ok(ObjectPrior::uniform(inventory)?),
        Some(p) => {
            let prior: ObjectPrior = read_json(p)?;
            let missing = prior.mismatches(inventory);
            if !missing.is_empty() {
                let ids: Vec<&str> = missing.iter().map(|m| m.as_str()).collect();
                anyhow::bail!(
                    "prior {} does not cover inventory assets: {}",
                    p.display(),
                    ids.join(", ")
                );
            }
            Ok(prior)
        }
    }
}

/// Report document with the configuration and templates that produced it.
#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub command: &'a str,
    pub template_version: &'a str,
    pub template_hashes: std::collections::BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub report: T,
}

pub fn envelope<'a, T: Serialize>(command: &'a str, config: &Config, report: T) -> Envelope<'a, T> {
    Envelope {
        command,
        template_version: TEMPLATE_VERSION,
        template_hashes: config.templates().hashes(),
        config: config.to_json(),
        report,
    }
}

/// Prints `table` or the JSON document, and writes the document to `out`.
pub fn emit<T: Serialize>(
    format: Format,
    table: &str,
    doc: &Envelope<'_, T>,
    out: Option<&Path>,
) -> Result<()> {
    let json = to_json(doc);
    if let Some(p) = out {
        write_file(p, &json)?;
    }
    match format {
        Format::Table => print!("{table}"),
        Format::Json => print!("{json}"),
    }
    Ok(())
}
