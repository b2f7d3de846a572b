//! Text formats: catalog and interaction TSV files and the ground-truth
//! JSON-lines sidecar. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dcg_core::corpus::{CatalogBuilder, ClickRecord, Dataset, GroundTruth, ItemCatalog};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Data {
        path: String,
        #[source]
        source: dcg_core::Error,
    },
}

fn read(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), FormatError> {
    fs::write(path, contents).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Numbered lines that are neither blank nor comments.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// `item_id<TAB>field=value(;field=value)*`, items numbered in file order.
pub fn parse_catalog(text: &str, path: &str) -> Result<ItemCatalog, FormatError> {
    let parse_err = |line, message: String| FormatError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut builder = CatalogBuilder::new();
    for (line, l) in data_lines(text) {
        let (id, rest) = l.split_once('\t').unwrap_or((l, ""));
        if id.is_empty() {
            return Err(parse_err(line, "empty item id".into()));
        }
        let mut features = Vec::new();
        for part in rest.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected field=value, got {part:?}")))?;
            features.push((k, v));
        }
        builder
            .push(id, &features)
            .map_err(|e| parse_err(line, e.to_string()))?;
    }
    builder.finish().map_err(|source| FormatError::Data {
        path: path.to_string(),
        source,
    })
}

pub fn load_catalog(path: &Path) -> Result<ItemCatalog, FormatError> {
    parse_catalog(&read(path)?, &path.display().to_string())
}

pub fn render_catalog(catalog: &ItemCatalog, header: &str) -> String {
    let mut out = format!("# {header}\n");
    let names = catalog.field_names();
    for item in catalog.items() {
        out.push_str(catalog.external_id(item.id));
        let extra: Vec<String> = item
            .features
            .iter()
            .filter(|(f, _)| *f != dcg_core::corpus::ID_FIELD)
            .map(|&(f, v)| format!("{}={}", names[f], catalog.feature_value(f, v)))
            .collect();
        if !extra.is_empty() {
            out.push('\t');
            out.push_str(&extra.join(";"));
        }
        out.push('\n');
    }
    out
}

/// `user_id<TAB>item_id<TAB>timestamp`, in any order.
pub fn parse_interactions(
    text: &str,
    path: &str,
    catalog: &ItemCatalog,
) -> Result<Dataset, FormatError> {
    let parse_err = |line, message: String| FormatError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let ids = catalog.id_map();
    let mut records = Vec::new();
    for (line, l) in data_lines(text) {
        let cols: Vec<&str> = l.split('\t').collect();
        let [user, item, ts] = cols[..] else {
            return Err(parse_err(
                line,
                format!("expected 3 columns, got {}", cols.len()),
            ));
        };
        let user = user
            .parse::<u32>()
            .map_err(|e| parse_err(line, format!("user id {user:?}: {e}")))?;
        let item = *ids
            .get(item)
            .ok_or_else(|| parse_err(line, format!("unknown item {item:?}")))?;
        let timestamp = ts
            .parse::<i64>()
            .map_err(|e| parse_err(line, format!("timestamp {ts:?}: {e}")))?;
        records.push(ClickRecord {
            user,
            item,
            timestamp,
        });
    }
    Dataset::from_records(records, catalog.len()).map_err(|source| FormatError::Data {
        path: path.to_string(),
        source,
    })
}

pub fn load_interactions(path: &Path, catalog: &ItemCatalog) -> Result<Dataset, FormatError> {
    parse_interactions(&read(path)?, &path.display().to_string(), catalog)
}

pub fn render_interactions(dataset: &Dataset, catalog: &ItemCatalog, header: &str) -> String {
    let mut out = format!("# {header}\n");
    for r in dataset.records() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            r.user,
            catalog.external_id(r.item),
            r.timestamp
        );
    }
    out
}

/// One header line, then one line per user and one per item.
pub fn render_truth(truth: &GroundTruth, config_hash: &str) -> String {
    let mut out = String::new();
    let mut line = |v: Value| {
        out.push_str(&v.to_string());
        out.push('\n');
    };
    line(json!({
        "kind": "header",
        "config_hash": config_hash,
        "relevance_sharpness": truth.relevance_sharpness,
        "num_users": truth.user_factors.len(),
        "num_items": truth.item_factors.len(),
    }));
    for (u, f) in truth.user_factors.iter().enumerate() {
        line(json!({ "kind": "user", "index": u, "factors": f }));
    }
    for (i, f) in truth.item_factors.iter().enumerate() {
        line(json!({
            "kind": "item",
            "index": i,
            "factors": f,
            "exposures": truth.exposure_counts[i],
            "clicks": truth.click_counts[i],
        }));
    }
    out
}

pub fn parse_truth(text: &str, path: &str) -> Result<GroundTruth, FormatError> {
    let parse_err = |line, message: String| FormatError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut truth = GroundTruth {
        user_factors: Vec::new(),
        item_factors: Vec::new(),
        relevance_sharpness: f64::NAN,
        exposure_counts: Vec::new(),
        click_counts: Vec::new(),
    };
    for (line, l) in data_lines(text) {
        let v: Value = serde_json::from_str(l).map_err(|e| parse_err(line, e.to_string()))?;
        let factors = || -> Result<Vec<f64>, FormatError> {
            v["factors"]
                .as_array()
                .and_then(|a| a.iter().map(Value::as_f64).collect())
                .ok_or_else(|| parse_err(line, "factors must be numbers".into()))
        };
        let count = |key: &str| {
            v[key]
                .as_u64()
                .ok_or_else(|| parse_err(line, format!("missing {key}")))
        };
        match v["kind"].as_str() {
            Some("header") => {
                truth.relevance_sharpness = v["relevance_sharpness"]
                    .as_f64()
                    .ok_or_else(|| parse_err(line, "missing relevance_sharpness".into()))?;
            }
            Some("user") => truth.user_factors.push(factors()?),
            Some("item") => {
                truth.item_factors.push(factors()?);
                truth.exposure_counts.push(count("exposures")?);
                truth.click_counts.push(count("clicks")?);
            }
            other => return Err(parse_err(line, format!("unknown record kind {other:?}"))),
        }
    }
    if truth.relevance_sharpness.is_nan() {
        return Err(parse_err(0, "missing header record".into()));
    }
    Ok(truth)
}

pub fn load_truth(path: &Path) -> Result<GroundTruth, FormatError> {
    parse_truth(&read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcg_core::corpus::ItemId;

    #[test]
    fn catalog_three_lines() {
        let c = parse_catalog("i0\tcat=a\ni1\tcat=b;shop=x\ni2\n", "c.tsv").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.find("i2"), Some(ItemId(2)));
        assert_eq!(c.field_names(), ["id", "cat", "shop"]);
    }

    #[test]
    fn duplicate_is_reported_with_line() {
        let text = "a\nb\nc\nd\ne\nf\nb\n";
        let err = parse_catalog(text, "c.tsv").unwrap_err().to_string();
        assert!(err.starts_with("c.tsv:7:"), "{err}");
    }

    #[test]
    fn empty_catalog_is_rejected() {
        let err = parse_catalog("# only a comment\n", "c.tsv")
            .unwrap_err()
            .to_string();
        assert!(err.contains("empty catalog"), "{err}");
    }

    #[test]
    fn malformed_feature_is_rejected() {
        let err = parse_catalog("i0\tcat\n", "c.tsv").unwrap_err().to_string();
        assert!(err.starts_with("c.tsv:1:"), "{err}");
    }

    #[test]
    fn interactions_group_by_user() {
        let c = parse_catalog("a\nb\nc\n", "c").unwrap();
        let d = parse_interactions("1\tb\t5\n0\ta\t2\n1\tc\t3\n0\tc\t1\n", "i", &c).unwrap();
        assert_eq!(d.num_users(), 2);
        assert_eq!(d.user_lengths(), vec![2, 2]);
    }

    #[test]
    fn interaction_errors() {
        let c = parse_catalog("a\nb\n", "c").unwrap();
        let err = parse_interactions("0\ta\t1\n0\tz\t2\n", "i", &c)
            .unwrap_err()
            .to_string();
        assert!(
            err.starts_with("i:2:") && err.contains("unknown item"),
            "{err}"
        );
        let err = parse_interactions("3\ta\t1\n3\tb\t1\n", "i", &c)
            .unwrap_err()
            .to_string();
        assert!(err.contains('3'), "{err}");
        assert!(parse_interactions("0\ta\n", "i", &c).is_err());
    }

    #[test]
    fn catalog_round_trip() {
        let c = parse_catalog("i0\tcat=a\ni1\tcat=b;shop=x\ni2\n", "c").unwrap();
        let again = parse_catalog(&render_catalog(&c, "h"), "c").unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn truth_round_trip() {
        let t = GroundTruth {
            user_factors: vec![vec![0.5, -1.25]],
            item_factors: vec![vec![1.0, 2.0], vec![0.1, 0.2]],
            relevance_sharpness: 3.0,
            exposure_counts: vec![4, 5],
            click_counts: vec![1, 0],
        };
        assert_eq!(parse_truth(&render_truth(&t, "abc"), "t").unwrap(), t);
    }
}
