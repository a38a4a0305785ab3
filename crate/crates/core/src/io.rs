//! Files: checkpoints, metric tables and SVG charts.
//!
//! Checkpoint grammar (one item per line, `#` lines ignored):
//!
//! ```text
//! semvar-checkpoint 1
//! kind <world|generator|variations|fisher>
//! meta <key> <value...>            (any number)
//! array <name> <dim> <dim> ...     (no dims for a scalar)
//! <values, whitespace separated, 17 significant digits>
//! end
//! ```
//!
//! Reals are written with `{:.16e}`, which round-trips every finite `f64`.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use crate::adapt::FisherDiag;
use crate::error::{Error, Result};
use crate::generator::{GeneratorParams, Layer};
use crate::metrics::MetricsReport;
use crate::tensor::Tensor;
use crate::variations::VariationSet;
use crate::world::{DomainSpec, Encoder, World};

const MAGIC: &str = "semvar-checkpoint 1";

/// Opens `path` for writing, refusing to replace an existing file.
pub fn create_new(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_all(path: &Path, text: &str) -> Result<()> {
    let mut w = create_new(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    World,
    Generator,
    Variations,
    Fisher,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::World => "world",
            CheckpointKind::Generator => "generator",
            CheckpointKind::Variations => "variations",
            CheckpointKind::Fisher => "fisher",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "world" => CheckpointKind::World,
            "generator" => CheckpointKind::Generator,
            "variations" => CheckpointKind::Variations,
            "fisher" => CheckpointKind::Fisher,
            other => return Err(Error::Checkpoint(format!("unknown kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Checkpoint { kind, meta: vec![], arrays: vec![] }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.set_meta(key, value);
        self
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or malformed meta `{key}`")))
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.arrays.push((name.to_string(), t));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {} checkpoint, found {}", kind.as_str(), self.kind.as_str())));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC}").unwrap();
        writeln!(s, "kind {}", self.kind.as_str()).unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.arrays {
            write!(s, "array {name}").unwrap();
            for d in t.shape() {
                write!(s, " {d}").unwrap();
            }
            s.push('\n');
            for chunk in t.data().chunks(8) {
                let line: Vec<String> = chunk.iter().map(|v| real(*v)).collect();
                writeln!(s, "{}", line.join(" ")).unwrap();
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(bad("missing checkpoint header".into())),
        }
        let kind = match lines.next() {
            Some((_, l)) if l.starts_with("kind ") => CheckpointKind::parse(l[5..].trim())?,
            _ => return Err(bad("missing kind line".into())),
        };
        let mut ck = Checkpoint::new(kind);
        let mut pending: Option<(String, Vec<usize>, Vec<f64>, usize)> = None;
        let mut ended = false;
        for (no, line) in lines {
            let line = line.trim();
            if ended {
                return Err(bad(format!("line {}: content after `end`", no + 1)));
            }
            if let Some((_, _, vals, need)) = &mut pending {
                if vals.len() < *need {
                    for tok in line.split_whitespace() {
                        let v: f64 = tok.parse().map_err(|_| bad(format!("line {}: bad number `{tok}`", no + 1)))?;
                        vals.push(v);
                    }
                    if vals.len() > *need {
                        return Err(bad(format!("line {}: too many values", no + 1)));
                    }
                    continue;
                }
            }
            if let Some((name, shape, vals, _)) = pending.take() {
                let t = Tensor::new(shape, vals).map_err(|e| bad(format!("array `{name}`: {e}")))?;
                ck.arrays.push((name, t));
            }
            if line == "end" {
                ended = true;
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("array ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad(format!("line {}: unnamed array", no + 1)))?;
                let shape: Vec<usize> = parts
                    .map(|p| p.parse::<usize>().map_err(|_| bad(format!("line {}: bad dimension `{p}`", no + 1))))
                    .collect::<Result<_>>()?;
                if shape.contains(&0) {
                    return Err(bad(format!("line {}: zero dimension", no + 1)));
                }
                let need = shape.iter().product();
                pending = Some((name.to_string(), shape, Vec::with_capacity(need), need));
            } else {
                return Err(bad(format!("line {}: unexpected `{line}`", no + 1)));
            }
        }
        if !ended {
            return Err(bad("file is truncated (no `end` line)".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_all(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text)
    }

    /// Warns (but does not fail) when the checkpoint was produced under another config.
    pub fn check_config_hash(&self, expected: &str) -> bool {
        match self.meta("config_hash") {
            Some(h) if h == expected => true,
            Some(h) => {
                warn!("checkpoint was written with config hash {h}, current config hashes to {expected}");
                false
            }
            None => true,
        }
    }
}

/// Conversion to and from the checkpoint container.
pub trait Persist: Sized {
    const KIND: CheckpointKind;
    fn to_checkpoint(&self) -> Checkpoint;
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;

    fn save(&self, path: &Path, meta: &[(&str, String)]) -> Result<()> {
        let mut ck = self.to_checkpoint();
        for (k, v) in meta {
            ck.set_meta(k, v);
        }
        ck.save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(Self::KIND)?;
        Self::from_checkpoint(&ck)
    }
}

fn vec_row(v: &[f64]) -> Tensor {
    Tensor::from_parts(vec![1, v.len()], v.to_vec())
}

impl Persist for World {
    const KIND: CheckpointKind = CheckpointKind::World;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND)
            .with_meta("seed", self.seed)
            .with_meta("p", self.p)
            .with_meta("d", self.d)
            .with_meta("h", self.h)
            .with_meta("domains", self.domains.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join(","));
        let e = &self.encoder;
        ck.push("encoder.w1", e.w1.clone());
        ck.push("encoder.b1", e.b1.clone());
        ck.push("encoder.w2", e.w2.clone());
        ck.push("encoder.b2", e.b2.clone());
        for d in &self.domains {
            ck.push(&format!("domain.{}.mean", d.name), vec_row(&d.mean));
            ck.push(&format!("domain.{}.scale", d.name), vec_row(&d.scale));
        }
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (p, d, h): (usize, usize, usize) = (ck.meta_parsed("p")?, ck.meta_parsed("d")?, ck.meta_parsed("h")?);
        let names = ck.meta("domains").unwrap_or("");
        let domains = names
            .split(',')
            .filter(|n| !n.is_empty())
            .map(|n| {
                Ok(DomainSpec {
                    name: n.to_string(),
                    mean: ck.array(&format!("domain.{n}.mean"))?.data().to_vec(),
                    scale: ck.array(&format!("domain.{n}.scale"))?.data().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder = Encoder {
            w1: ck.array("encoder.w1")?.clone(),
            b1: ck.array("encoder.b1")?.clone(),
            w2: ck.array("encoder.w2")?.clone(),
            b2: ck.array("encoder.b2")?.clone(),
        };
        let shapes_ok = encoder.w1.shape() == [h, p]
            && encoder.b1.shape() == [1, h]
            && encoder.w2.shape() == [d, h]
            && encoder.b2.shape() == [1, d];
        if !shapes_ok {
            return Err(Error::Checkpoint("encoder shapes disagree with the recorded dimensions".into()));
        }
        let seed = ck.meta_parsed("seed")?;
        let mut w = World::build(seed, p, d, h, domains).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.encoder = encoder;
        Ok(w)
    }
}

impl Persist for GeneratorParams {
    const KIND: CheckpointKind = CheckpointKind::Generator;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND)
            .with_meta("layers", self.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(","));
        for l in &self.layers {
            ck.push(&format!("{}.weight", l.name), l.weight.clone());
            ck.push(&format!("{}.bias", l.name), l.bias.clone());
        }
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let names = ck.meta("layers").ok_or_else(|| Error::Checkpoint("missing meta `layers`".into()))?;
        let layers = names
            .split(',')
            .map(|n| {
                Ok(Layer {
                    name: n.to_string(),
                    weight: ck.array(&format!("{n}.weight"))?.clone(),
                    bias: ck.array(&format!("{n}.bias"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GeneratorParams::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Persist for VariationSet {
    const KIND: CheckpointKind = CheckpointKind::Variations;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND).with_meta("k", self.k());
        ck.push("target", vec_row(&self.target));
        ck.push("z", self.z.clone());
        ck.push("epsilon", Tensor::scalar(self.epsilon));
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let target = ck.array("target")?.data().to_vec();
        let z = ck.array("z")?.clone();
        if z.rank() != 2 || z.cols() != target.len() {
            return Err(Error::Checkpoint("perturbation matrix does not match the target".into()));
        }
        Ok(VariationSet { target, z, epsilon: ck.array("epsilon")?.item() })
    }
}

impl Persist for FisherDiag {
    const KIND: CheckpointKind = CheckpointKind::Fisher;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND).with_meta("samples", self.samples).with_meta("blocks", self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            ck.push(&format!("block{i}"), b.clone());
        }
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let n: usize = ck.meta_parsed("blocks")?;
        let blocks = (0..n).map(|i| ck.array(&format!("block{i}")).cloned()).collect::<Result<Vec<_>>>()?;
        if blocks.iter().flat_map(|b| b.data()).any(|v| *v < 0.0) {
            return Err(Error::Checkpoint("negative Fisher entry".into()));
        }
        Ok(FisherDiag { blocks, samples: ck.meta_parsed("samples")? })
    }
}

// ---- metric tables ------------------------------------------------------------

pub fn metrics_csv(records: &[MetricsReport]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::usage("no metric records to write"));
    }
    let mut s = MetricsReport::COLUMNS.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&r.iter.to_string());
        for v in r.values() {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&real(v));
            }
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_metrics_csv(records: &[MetricsReport], path: &Path) -> Result<()> {
    write_all(path, &metrics_csv(records)?)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::usage("empty metrics file"))?;
    if header.split(',').ne(MetricsReport::COLUMNS.iter().copied()) {
        return Err(Error::usage("unexpected metrics header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != MetricsReport::COLUMNS.len() {
                return Err(Error::usage(format!("metrics row {} has {} cells", i + 2, cells.len())));
            }
            let iter = cells[0].parse().map_err(|_| Error::usage(format!("metrics row {}: bad iteration", i + 2)))?;
            let mut vals = [None; 11];
            for (slot, c) in vals.iter_mut().zip(&cells[1..]) {
                if !c.is_empty() {
                    *slot = Some(c.parse::<f64>().map_err(|_| Error::usage(format!("metrics row {}: bad value `{c}`", i + 2)))?);
                }
            }
            Ok(MetricsReport::from_values(iter, vals))
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

// ---- charts -------------------------------------------------------------------

pub type Series = (String, Vec<(f64, f64)>);

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart with axes, tick labels and a legend in input order.
pub fn svg_chart(title: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::usage("chart needs at least one series"));
    }
    for (name, pts) in series {
        if pts.is_empty() {
            return Err(Error::usage(format!("series `{name}` is empty")));
        }
        if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::usage(format!("series `{name}` has non-finite values")));
        }
    }
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, ml + pw / 2.0, esc(title)).unwrap();
    writeln!(s, r#"<line x1="{ml}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, mt + ph, ml + pw, mt + ph).unwrap();
    writeln!(s, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{:.1}" stroke="black"/>"#, mt + ph).unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), mt + ph + 18.0, tick(xv)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 6.0, sy(yv) + 4.0, tick(yv)).unwrap();
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" ")).unwrap();
        let ly = mt + 10.0 + 18.0 * i as f64;
        writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/>"#, ml + pw + 15.0, ly - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, ml + pw + 32.0, ly, esc(name)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn render_svg_chart(title: &str, series: &[Series], path: &Path) -> Result<()> {
    write_all(path, &svg_chart(title, series)?)
}
