use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Values from a `key = value` file, resolved against command-line flags.
/// Every resolved setting is echoed into the run manifest.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, (String, usize)>,
    path: Option<PathBuf>,
    used: BTreeSet<String>,
    pub echo: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| propcal::Error::Io { path: path.into(), source: e })?;
        Ok(Self { file: parse_pairs(&text, path)?, path: Some(path.into()), ..Self::default() })
    }

    /// Flag if given, else the config file entry, else `default`.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some((raw, line)) => raw.parse::<T>().map_err(|e| self.bad(*line, format!("{key}: {e}")))?,
                None => default,
            },
        };
        self.echo.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// As [`Settings::pick`] with no default; absent values stay `None`.
    pub fn pick_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        self.used.insert(key.to_string());
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some((raw, line)) => Some(raw.parse::<T>().map_err(|e| self.bad(*line, format!("{key}: {e}")))?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.echo.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    /// Boolean switch: set by the flag, or by `true`/`false` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let v = if flag { true } else { self.pick(key, None, false)? };
        self.echo.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Rejects file keys that no setting of this command consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        if let Some((k, (_, line))) = self.file.iter().find(|(k, _)| !self.used.contains(*k)) {
            return Err(CliError::Core(propcal::Error::Config(format!(
                "{}:{line}: unknown key '{k}' for this command",
                self.path.as_deref().unwrap_or(Path::new("-")).display()
            ))));
        }
        Ok(())
    }

    fn bad(&self, line: usize, detail: String) -> CliError {
        CliError::Core(propcal::Error::Config(format!(
            "{}:{line}: {detail}",
            self.path.as_deref().unwrap_or(Path::new("-")).display()
        )))
    }
}

fn parse_pairs(text: &str, path: &Path) -> Result<BTreeMap<String, (String, usize)>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Core(propcal::Error::Parse {
                path: path.into(),
                line: i as u64 + 1,
                detail: format!("expected key = value, got '{line}'"),
            }));
        };
        let k = k.trim().replace('-', "_");
        let v = v.trim().trim_matches('"').to_string();
        if out.insert(k.clone(), (v, i + 1)).is_some() {
            return Err(CliError::Core(propcal::Error::Parse {
                path: path.into(),
                line: i as u64 + 1,
                detail: format!("duplicate key '{k}'"),
            }));
        }
    }
    Ok(out)
}

/// Sample-size grid: `a..b` (inclusive), `a..b:step`, or a comma list.
pub fn parse_n_grid(s: &str) -> Result<Vec<u64>, CliError> {
    let s = s.trim();
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| CliError::Usage(format!("bad sample size '{t}': {e}")));
    let grid: Vec<u64> = if let Some((a, rest)) = s.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, st)) => (num(b)?, num(st)?),
            None => (num(rest)?, 1),
        };
        if step == 0 {
            return Err(CliError::Usage("grid step must be positive".into()));
        }
        (num(a)?..=b).step_by(step as usize).collect()
    } else if s.is_empty() {
        Vec::new()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if grid.is_empty() {
        return Err(CliError::Usage(format!("sample-size grid '{s}' is empty")));
    }
    Ok(grid)
}

/// Proportion grid: `lo:hi:m` (m interior points) or a comma list.
pub fn parse_p_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let s = s.trim();
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad proportion '{t}': {e}")));
    let parts: Vec<&str> = s.split(':').collect();
    let grid = if parts.len() == 3 {
        let m = parts[2].trim().parse::<usize>().map_err(|e| CliError::Usage(format!("bad point count: {e}")))?;
        propcal::coverage::interior_grid(num(parts[0])?, num(parts[1])?, m)
    } else if s.is_empty() {
        Vec::new()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if grid.is_empty() {
        return Err(CliError::Usage(format!("proportion grid '{s}' is empty")));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_n_grid("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_n_grid("10..30:10").unwrap(), vec![10, 20, 30]);
        assert_eq!(parse_n_grid("5, 7").unwrap(), vec![5, 7]);
        assert!(matches!(parse_n_grid(""), Err(CliError::Usage(_))));
        assert!(matches!(parse_n_grid("5..4"), Err(CliError::Usage(_))));
        assert_eq!(parse_p_grid("0:1:3").unwrap(), vec![0.25, 0.5, 0.75]);
        assert_eq!(parse_p_grid("0.1,0.2").unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nxi = 0.9\ntrials=50\n").unwrap();
        let mut s = Settings::load(Some(&p)).unwrap();
        assert_eq!(s.pick("xi", Some(0.99), 0.95).unwrap(), 0.99);
        assert_eq!(s.pick("trials", None, 2000u64).unwrap(), 50);
        assert_eq!(s.pick("bins", None, 100u32).unwrap(), 100);
        s.finish().unwrap();
        assert_eq!(s.echo["xi"], "0.99");
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "xi = 0.9\nbogus = 1\n").unwrap();
        let mut s = Settings::load(Some(&p)).unwrap();
        s.pick("xi", None, 0.95).unwrap();
        assert!(matches!(s.finish(), Err(CliError::Core(propcal::Error::Config(_)))));
        std::fs::write(&p, "xi 0.9\n").unwrap();
        assert!(matches!(Settings::load(Some(&p)), Err(CliError::Core(propcal::Error::Parse { line: 1, .. }))));
        std::fs::write(&p, "xi = abc\n").unwrap();
        let mut s = Settings::load(Some(&p)).unwrap();
        assert!(matches!(s.pick("xi", None, 0.95), Err(CliError::Core(propcal::Error::Config(_)))));
    }
}
