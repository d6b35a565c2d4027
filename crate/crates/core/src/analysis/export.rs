//! Tab-separated curve and point files plus JSON attention traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AnalysisError, AttentionTrace, LayerSimilarityCurve, ReduceMethod, ReducedPointSet, Setting};
use crate::corpus::LangCode;
use crate::tagging::LtStrategy;

pub const CURVES_HEADER: &str = "layer_index\tsetting\tstrategy\tsimilarity";
pub const POINTS_HEADER: &str = "lang\tx\ty\tsentence_id\tmethod\tseed";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnalysisOutputs {
    pub curves: Vec<LayerSimilarityCurve>,
    pub points: Vec<ReducedPointSet>,
    pub traces: Vec<AttentionTrace>,
}

pub fn write_curves(curves: &[LayerSimilarityCurve]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for c in curves {
        for (i, v) in c.values.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\t{}\t{v}\n", c.setting.name(), c.strategy.name()));
        }
    }
    out
}

fn perr(line: usize, msg: impl Into<String>) -> AnalysisError {
    AnalysisError::Parse { line, msg: msg.into() }
}

fn rows<'a>(text: &'a str, header: &str, cols: usize) -> Result<Vec<(usize, Vec<&'a str>)>, AnalysisError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(perr(1, format!("expected header `{header}`"))),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != cols {
                return Err(perr(i + 1, format!("expected {cols} fields, found {}", f.len())));
            }
            Ok((i + 1, f))
        })
        .collect()
}

/// Groups rows by `(setting, strategy)` in first-appearance order.
pub fn parse_curves(text: &str) -> Result<Vec<LayerSimilarityCurve>, AnalysisError> {
    let mut curves: Vec<LayerSimilarityCurve> = Vec::new();
    for (ln, f) in rows(text, CURVES_HEADER, 4)? {
        let index: usize = f[0].parse().map_err(|_| perr(ln, "bad layer index"))?;
        let setting = Setting::parse(f[1]).ok_or_else(|| perr(ln, format!("unknown setting {}", f[1])))?;
        let strategy: LtStrategy = f[2].parse().map_err(|_| perr(ln, format!("unknown strategy {}", f[2])))?;
        let value: f64 = f[3].parse().map_err(|_| perr(ln, "bad similarity"))?;
        let pos = curves.iter().position(|c| c.setting == setting && c.strategy == strategy);
        let curve = match pos {
            Some(p) => &mut curves[p],
            None => {
                curves.push(LayerSimilarityCurve { setting, strategy, values: Vec::new() });
                curves.last_mut().expect("just pushed")
            }
        };
        if index != curve.values.len() {
            return Err(perr(ln, format!("layer index {index} out of sequence")));
        }
        curve.values.push(value);
    }
    Ok(curves)
}

pub fn write_points(set: &ReducedPointSet) -> String {
    let mut out = String::from(POINTS_HEADER);
    out.push('\n');
    for (lang, pts) in &set.points {
        for (i, p) in pts.iter().enumerate() {
            out.push_str(&format!("{lang}\t{}\t{}\t{i}\t{}\t{}\n", p[0], p[1], set.method.name(), set.seed));
        }
    }
    out
}

pub fn parse_points(text: &str) -> Result<ReducedPointSet, AnalysisError> {
    let mut points: BTreeMap<LangCode, Vec<[f64; 2]>> = BTreeMap::new();
    let mut meta: Option<(ReduceMethod, u64)> = None;
    for (ln, f) in rows(text, POINTS_HEADER, 6)? {
        let lang = LangCode::new(f[0]).map_err(|e| perr(ln, e.to_string()))?;
        let x: f64 = f[1].parse().map_err(|_| perr(ln, "bad x"))?;
        let y: f64 = f[2].parse().map_err(|_| perr(ln, "bad y"))?;
        let id: usize = f[3].parse().map_err(|_| perr(ln, "bad sentence id"))?;
        let method = ReduceMethod::parse(f[4]).ok_or_else(|| perr(ln, format!("unknown method {}", f[4])))?;
        let seed: u64 = f[5].parse().map_err(|_| perr(ln, "bad seed"))?;
        if *meta.get_or_insert((method, seed)) != (method, seed) {
            return Err(perr(ln, "mixed methods or seeds in one file"));
        }
        let list = points.entry(lang).or_default();
        if id != list.len() {
            return Err(perr(ln, format!("sentence id {id} out of sequence")));
        }
        list.push([x, y]);
    }
    let (method, seed) = meta.ok_or_else(|| perr(1, "no points"))?;
    Ok(ReducedPointSet { method, seed, points })
}

pub fn read_trace(text: &str) -> Result<AttentionTrace, AnalysisError> {
    serde_json::from_str(text).map_err(|e| perr(e.line(), e.to_string()))
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<(), AnalysisError> {
    fs::write(&path, text).map_err(|e| AnalysisError::Io { path: path.display().to_string(), source: e })?;
    written.push(path);
    Ok(())
}

/// Writes `curves.tsv`, `points.<method>.tsv` and `trace.<n>.json` into `dir`
/// and returns the written paths.
pub fn export_analysis(outputs: &AnalysisOutputs, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(dir).map_err(|e| AnalysisError::Io { path: dir.display().to_string(), source: e })?;
    let mut written = Vec::new();
    write(dir.join("curves.tsv"), &write_curves(&outputs.curves), &mut written)?;
    for set in &outputs.points {
        write(dir.join(format!("points.{}.tsv", set.method.name())), &write_points(set), &mut written)?;
    }
    for (i, t) in outputs.traces.iter().enumerate() {
        let json = serde_json::to_string_pretty(t).expect("trace serializes") + "\n";
        write(dir.join(format!("trace.{i}.json")), &json, &mut written)?;
    }
    Ok(written)
}
