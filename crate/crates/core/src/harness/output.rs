use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError, ARTIFACT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnRecord {
    pub feature: String,
    pub metric: String,
    pub k: usize,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// `# {"artifact": ..., "config": ...}` followed by a newline.
pub fn config_header(config: &ExperimentConfig) -> String {
    let block = serde_json::json!({ "artifact": ARTIFACT_VERSION, "config": config });
    format!("# {block}\n")
}

/// CSV text: config comment line, then header and rows.
pub(crate) fn csv_text<R: Serialize>(
    config: &ExperimentConfig,
    header: &[&str],
    rows: &[R],
) -> Result<Vec<u8>, HarnessError> {
    let mut out = config_header(config).into_bytes();
    {
        let mut w =
            csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        let fail = |e: csv::Error| HarnessError::Config(format!("csv encoding failed: {e}"));
        w.write_record(header).map_err(fail)?;
        for row in rows {
            w.serialize(row).map_err(fail)?;
        }
        w.flush().map_err(|e| HarnessError::Config(format!("csv encoding failed: {e}")))?;
    }
    Ok(out)
}

/// JSON document with the config block merged in at the top level.
pub(crate) fn json_text<T: Serialize>(config: &ExperimentConfig, body: &T) -> Vec<u8> {
    let mut doc = serde_json::json!({ "artifact": ARTIFACT_VERSION, "config": config });
    if let (Some(map), serde_json::Value::Object(extra)) =
        (doc.as_object_mut(), serde_json::to_value(body).expect("serializable"))
    {
        map.extend(extra);
    }
    let mut text = serde_json::to_vec_pretty(&doc).expect("serializable");
    text.push(b'\n');
    text
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io { path: path.to_owned(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let name =
        path.file_name().ok_or_else(|| HarnessError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SynthCommandConfig;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::Synth(SynthCommandConfig { out: "o".into(), n: 2, fraction: 0.5, side: 8, seed: 3 })
    }

    #[test]
    fn csv_layout() {
        let rows = [CnnRecord { epoch: 0, train_loss: 0.5, train_acc: 0.75, val_loss: 0.25, val_acc: 1.0 }];
        let text = String::from_utf8(
            csv_text(&cfg(), &["epoch", "train_loss", "train_acc", "val_loss", "val_acc"], &rows).unwrap(),
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# {") && lines[0].contains("\"seed\":3") && lines[0].contains(ARTIFACT_VERSION));
        assert_eq!(lines[1], "epoch,train_loss,train_acc,val_loss,val_acc");
        assert_eq!(lines[2], "0,0.5,0.75,0.25,1.0");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn json_has_config_block() {
        let v: serde_json::Value = serde_json::from_slice(&json_text(&cfg(), &serde_json::json!({"x": 1}))).unwrap();
        assert_eq!(v["config"]["command"], "synth");
        assert_eq!(v["x"], 1);
    }
}
