//! Layered run configuration: built-in defaults, overridden by a flat
//! key=value config file, overridden by command-line flags.
//!
//! The file format mirrors the long flag names, one `key = value` per line;
//! `#` starts a comment. Unknown keys are rejected so typos surface instead
//! of silently falling back to defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

/// Parsed config file contents.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Keys any command accepts from a file, matching its long flag names.
pub const KNOWN_KEYS: &[&str] = &[
    "manifest",
    "synthetic",
    "out",
    "checkpoint",
    "width-scale",
    "epochs",
    "batch-size",
    "lr",
    "lr-decay-factor",
    "lr-decay-every",
    "samples-per-epoch",
    "seed",
    "overlap",
    "threshold",
    "rho",
    "distance",
    "thresholds",
    "threads",
];

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        let mut values = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "config {} line {}: expected `key = value`, got `{line}`",
                    path.display(),
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError(format!(
                    "config {} line {}: unknown field `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    /// Typed lookup; a present-but-unparsable value is an error naming the
    /// field.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| ConfigError(format!("field `{key}`: cannot parse `{raw}`"))),
        }
    }
}

/// flag value, else file value, else default.
pub fn merge<T: FromStr + Clone>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get::<T>(key)?.unwrap_or(default)),
    }
}

/// flag value, else file value, else None (for fields without defaults).
pub fn merge_opt<T: FromStr + Clone>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<T>, ConfigError> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get::<T>(key),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file_with(contents: &str) -> (tempfile::TempDir, FileConfig) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        let parsed = FileConfig::load(&path).unwrap();
        (dir, parsed)
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let (_d, file) = file_with("epochs = 7\n");
        assert_eq!(merge(Some(9usize), &file, "epochs", 50).unwrap(), 9);
        assert_eq!(merge(None::<usize>, &file, "epochs", 50).unwrap(), 7);
        assert_eq!(merge(None::<usize>, &file, "seed", 50).unwrap(), 50);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let (_d, file) = file_with("# a comment\n\nseed = 4 # trailing\n");
        assert_eq!(file.get::<u64>("seed").unwrap(), Some(4));
    }

    #[test]
    fn unknown_field_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "learning-rate = 0.1\n").unwrap();
        let err = FileConfig::load(&path).unwrap_err();
        assert!(err.0.contains("unknown field `learning-rate`"), "{err}");
    }

    #[test]
    fn bad_value_names_the_field() {
        let (_d, file) = file_with("epochs = banana\n");
        let err = file.get::<usize>("epochs").unwrap_err();
        assert!(err.0.contains("`epochs`"), "{err}");
    }

    /// Every known key round-trips through the file layer at the type its
    /// command reads it with, and a flag override wins for each.
    #[test]
    fn every_field_parses_and_yields_to_flags() {
        let contents = "\
manifest = data/set.tsv
synthetic = 12
out = runs/x
checkpoint = runs/x/final.ckpt
width-scale = 0.25
epochs = 9
batch-size = 16
lr = 0.005
lr-decay-factor = 0.5
lr-decay-every = 10
samples-per-epoch = 120
seed = 3
overlap = 20
threshold = 0.6
rho = 5
distance = euclidean
thresholds = 0.2,0.5,0.8
threads = 2
";
        let (_d, file) = file_with(contents);
        assert_eq!(
            file.get::<String>("manifest").unwrap().unwrap(),
            "data/set.tsv"
        );
        assert_eq!(file.get::<usize>("synthetic").unwrap(), Some(12));
        assert_eq!(file.get::<String>("out").unwrap().unwrap(), "runs/x");
        assert_eq!(
            file.get::<String>("checkpoint").unwrap().unwrap(),
            "runs/x/final.ckpt"
        );
        assert_eq!(file.get::<f64>("width-scale").unwrap(), Some(0.25));
        assert_eq!(file.get::<usize>("epochs").unwrap(), Some(9));
        assert_eq!(file.get::<usize>("batch-size").unwrap(), Some(16));
        assert_eq!(file.get::<f64>("lr").unwrap(), Some(0.005));
        assert_eq!(file.get::<f64>("lr-decay-factor").unwrap(), Some(0.5));
        assert_eq!(file.get::<usize>("lr-decay-every").unwrap(), Some(10));
        assert_eq!(file.get::<usize>("samples-per-epoch").unwrap(), Some(120));
        assert_eq!(file.get::<u64>("seed").unwrap(), Some(3));
        assert_eq!(file.get::<usize>("overlap").unwrap(), Some(20));
        assert_eq!(file.get::<f32>("threshold").unwrap(), Some(0.6));
        assert_eq!(file.get::<usize>("rho").unwrap(), Some(5));
        assert_eq!(
            file.get::<String>("distance").unwrap().unwrap(),
            "euclidean"
        );
        assert_eq!(
            file.get::<String>("thresholds").unwrap().unwrap(),
            "0.2,0.5,0.8"
        );
        assert_eq!(file.get::<usize>("threads").unwrap(), Some(2));

        for key in KNOWN_KEYS {
            assert_eq!(merge(Some(41usize), &file, key, 0).ok(), Some(41), "{key}");
        }
    }
}
