//! Config resolution: preset, then config file, then `--set` overrides, then `--seed`.

use std::path::Path;

use blindsep::pipeline::ExperimentConfig;
use blindsep::{Error, Result};
use toml::{Table, Value};

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Applies one `section.key=value` override.
fn set(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut node = table;
    for k in parents {
        node = node
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{k} in {path} is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

pub fn resolve(
    preset: &str,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut table: Table = ExperimentConfig::preset(preset)?
        .to_toml()
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        if !path.exists() {
            return Err(Error::Config(format!(
                "config file {} not found",
                path.display()
            )));
        }
        let over: Table = std::fs::read_to_string(path)?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for o in overrides {
        set(&mut table, o)?;
    }
    let mut config = ExperimentConfig::from_toml(&table.to_string())?;
    if let Some(seed) = seed {
        config.trainer.seed = seed;
        config.pipeline.seed = seed;
    }
    Ok(config)
}
