use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, DatasetSchema, Instance};
use crate::error::{Error, Result};

/// Column order: scenario levels, features (group order), click, conversion.
fn header(schema: &DatasetSchema) -> Vec<String> {
    let mut cols: Vec<String> = schema.scenario_levels.iter().map(|l| l.name.clone()).collect();
    cols.extend(schema.features().map(|f| f.name.clone()));
    cols.push("click".into());
    cols.push("conversion".into());
    cols
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(&dataset.schema))?;
    let mut row: Vec<String> = Vec::new();
    for inst in &dataset.instances {
        row.clear();
        row.extend(inst.scenario_path.iter().map(|v| v.to_string()));
        row.extend(inst.features.iter().map(|v| v.to_string()));
        row.push(inst.click.to_string());
        row.push(inst.conversion.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_csv(dataset, BufWriter::new(file))
}

pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_csv(BufReader::new(file), schema)
        .map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
}

/// Streaming parse; every malformed row is reported with its line number.
pub fn read_csv<R: Read>(input: R, schema: &DatasetSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let expected = header(schema);
    let found: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if found != expected {
        let unknown: Vec<&String> = found.iter().filter(|c| !expected.contains(c)).collect();
        let missing: Vec<&String> = expected.iter().filter(|c| !found.contains(c)).collect();
        return Err(Error::Data(format!(
            "header mismatch: unknown columns {unknown:?}, missing columns {missing:?}, expected order {expected:?}"
        )));
    }
    let n_levels = schema.scenario_levels.len();
    let n_features = schema.n_features();
    let mut instances = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse = |i: usize| -> Result<usize> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse::<usize>().map_err(|_| {
                Error::Data(format!("line {line}: column {} value {raw:?} is not a non-negative integer", expected[i]))
            })
        };
        if record.len() != expected.len() {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                expected.len(),
                record.len()
            )));
        }
        let scenario_path = (0..n_levels).map(parse).collect::<Result<Vec<_>>>()?;
        let features = (n_levels..n_levels + n_features).map(parse).collect::<Result<Vec<_>>>()?;
        let click = parse(n_levels + n_features)?;
        let conversion = parse(n_levels + n_features + 1)?;
        if click > 1 || conversion > 1 {
            return Err(Error::Data(format!("line {line}: labels must be 0 or 1")));
        }
        let inst = Instance {
            features,
            scenario_path,
            click: click as u8,
            conversion: conversion as u8,
        };
        schema
            .check_instance(&inst)
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        instances.push(inst);
    }
    Ok(Dataset {
        schema: schema.clone(),
        instances,
    })
}
