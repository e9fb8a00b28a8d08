//! Text checkpoint format for [`DenseNet`].
//!
//! ```text
//! MIAAUDIT-CKPT v1
//! 4:8:relu,8:1:sigmoid
//! <one line per weight row, then one line for the bias, per layer>
//! ```
//!
//! Numbers are written with 17 significant digits so every `f64` survives a
//! save/load cycle bit for bit.

use super::{Activation, DenseNet, Layer, LayerSpec};
use crate::error::{Error, Result};
use std::fmt::Write as _;

pub const CHECKPOINT_MAGIC: &str = "MIAAUDIT-CKPT v1";

/// Line iterator that remembers 1-based line numbers for diagnostics.
pub struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    pub fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines(),
            line_no: 0,
        }
    }

    pub fn line_no(&self) -> usize {
        self.line_no
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| Error::parse(self.line_no, "unexpected end of file"))
    }

    pub fn is_exhausted(&mut self) -> bool {
        self.lines.clone().next().is_none()
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push('\n');
}

pub(crate) fn parse_row(line: &str, line_no: usize, expected: usize) -> Result<Vec<f64>> {
    let mut row = Vec::new();
    for tok in line.split_whitespace() {
        if row.len() == expected {
            return Err(Error::parse(
                line_no,
                format!("more than {expected} values"),
            ));
        }
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(line_no, format!("invalid number `{tok}`")))?;
        if !v.is_finite() {
            return Err(Error::parse(line_no, "non-finite value"));
        }
        row.push(v);
    }
    if row.len() != expected {
        return Err(Error::parse(
            line_no,
            format!("expected {expected} values, found {}", row.len()),
        ));
    }
    Ok(row)
}

fn parse_layer_spec(line: &str, line_no: usize) -> Result<Vec<LayerSpec>> {
    let mut specs = Vec::new();
    for part in line.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 3 {
            return Err(Error::parse(line_no, format!("bad layer spec `{part}`")));
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::parse(line_no, format!("bad dimension `{s}`")))
        };
        let activation = Activation::parse(fields[2])
            .ok_or_else(|| Error::parse(line_no, format!("unknown activation `{}`", fields[2])))?;
        specs.push(LayerSpec::new(dim(fields[0])?, dim(fields[1])?, activation));
    }
    for pair in specs.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::parse(line_no, "layer dimensions do not chain"));
        }
    }
    Ok(specs)
}

impl DenseNet {
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        let spec: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}:{}:{}", l.in_dim(), l.out_dim(), l.activation().name()))
            .collect();
        let _ = writeln!(out, "{}", spec.join(","));
        for l in &self.layers {
            for row in l.weights.chunks_exact(l.in_dim()) {
                write_row(&mut out, row);
            }
            write_row(&mut out, &l.bias);
        }
        out
    }

    /// Parses a complete single-network checkpoint. The seed is not part of
    /// the format and is restored as 0.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        let net = read_section(&mut reader)?;
        if !reader.is_exhausted() {
            return Err(Error::parse(
                reader.line_no() + 1,
                "trailing content after checkpoint",
            ));
        }
        Ok(net)
    }
}

/// Reads one checkpoint section starting at the magic line.
pub fn read_section(reader: &mut LineReader<'_>) -> Result<DenseNet> {
    let magic = reader.next_line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(reader.line_no(), "missing checkpoint header"));
    }
    let spec_line = reader.next_line()?;
    let specs = parse_layer_spec(spec_line, reader.line_no())?;
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        // Rows are pushed as they are read so a hostile header cannot force a
        // large up-front allocation.
        let mut weights = Vec::new();
        for _ in 0..spec.out_dim {
            let line = reader.next_line()?;
            weights.extend(parse_row(line, reader.line_no(), spec.in_dim)?);
        }
        let line = reader.next_line()?;
        let bias = parse_row(line, reader.line_no(), spec.out_dim)?;
        layers.push(Layer {
            spec,
            weights,
            bias,
        });
    }
    DenseNet::from_layers(layers, 0)
}
