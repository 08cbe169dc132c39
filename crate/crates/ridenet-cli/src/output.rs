use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::CliError;

/// What produced an output; serialized into the `# manifest:` header line.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: &'static str,
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub parameters: Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, scenario: &str, parameters: Value) -> Self {
        Manifest {
            command,
            scenario: scenario.to_string(),
            seeds: Vec::new(),
            parameters,
            outputs: vec!["-".to_string()],
        }
    }

    pub fn seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn to_json(&self) -> String {
        json!({
            "command": self.command,
            "scenario": self.scenario,
            "seeds": self.seeds,
            "parameters": self.parameters,
            "version": env!("CARGO_PKG_VERSION"),
            "outputs": self.outputs,
        })
        .to_string()
    }
}

/// A CSV table built in memory.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<I, S>(header: I) -> Result<Self, CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Table { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn into_string(self) -> Result<String, CliError> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| CliError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn render(manifest: &Manifest, body: &str) -> String {
    format!("# manifest: {}\n{}", manifest.to_json(), body)
}

pub fn emit(manifest: &Manifest, body: &str, path: Option<&Path>) -> Result<(), CliError> {
    let text = render(manifest, body);
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Reads a headerless numeric CSV, skipping `#` comment lines.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|x| {
                x.parse::<f64>().map_err(|_| {
                    CliError::Invalid(format!("{}: row {}: `{x}` is not a number", path.display(), k + 1))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn fmt(x: f64) -> String {
    format!("{x}")
}
