use std::path::Path;

use crate::error::{Error, Result};
use crate::network::PointCloud;

/// Parses the ASCII point format: one point per line as `x y z [f...] [label]`,
/// blank lines and `#` comments ignored.
///
/// With `features = Some(g)` every line must carry exactly `g` feature
/// values, optionally followed by an integer per-point label (all lines or
/// none). With `None` anything after the coordinates is ignored.
pub fn parse_points(text: &str, path: &Path, features: Option<usize>) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(err(
                line,
                format!("expected at least 3 coordinates, found {}", tokens.len()),
            ));
        }
        let num = |t: &str| -> Result<f64> {
            let v: f64 = t
                .parse()
                .map_err(|_| err(line, format!("`{t}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(line, format!("`{t}` is not finite")))
            }
        };
        coords.push([num(tokens[0])?, num(tokens[1])?, num(tokens[2])?]);
        let Some(g) = features else {
            feats.push(Vec::new());
            continue;
        };
        let rest = &tokens[3..];
        let has_label = match rest.len() {
            n if n == g => false,
            n if n == g + 1 => true,
            n => {
                return Err(err(
                    line,
                    format!("expected {g} feature values and an optional label, found {n} values"),
                ));
            }
        };
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(err(
                line,
                "labels must be given on every line or on none".into(),
            ));
        }
        feats.push(
            rest[..g]
                .iter()
                .map(|t| num(t))
                .collect::<Result<Vec<_>>>()?,
        );
        if has_label {
            let t = rest[g];
            labels.push(
                t.parse::<usize>()
                    .map_err(|_| err(line, format!("label `{t}` is not a class index")))?,
            );
        }
    }
    if coords.is_empty() {
        return Err(err(text.lines().count().max(1), "no points".into()));
    }
    let mut cloud = PointCloud::new(coords);
    cloud.features = feats;
    if labelled == Some(true) {
        cloud.point_labels = Some(labels);
    }
    Ok(cloud)
}

pub fn read_points(path: &Path, features: Option<usize>) -> Result<PointCloud> {
    parse_points(&std::fs::read_to_string(path)?, path, features)
}
