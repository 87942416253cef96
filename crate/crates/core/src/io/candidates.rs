//! Probe candidate lists as JSON lines.
//!
//! One object per line, either with an inline latent
//! `{"tokens": ["a", "b"], "latent": [0.1, 0.2]}` or with a reference into a
//! trajectory file `{"tokens": [...], "latent_file": "z.soet", "latent_row": 3}`.
//! `latent_row` defaults to the last row. Relative paths resolve against the
//! directory of the candidate list. Blank lines are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::trajectory::read_trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateLine {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_row: Option<usize>,
}

impl CandidateLine {
    fn resolve(self, base: &Path, line_no: usize) -> Result<(Vec<String>, Vec<f64>)> {
        let bad = |msg: &str| Error::Format(format!("candidate line {line_no}: {msg}"));
        match (self.latent, self.latent_file) {
            (Some(z), None) => Ok((self.tokens, z)),
            (None, Some(file)) => {
                let path = if file.is_absolute() { file } else { base.join(file) };
                let traj = read_trajectory(&path)?;
                let row = self.latent_row.unwrap_or(traj.len() - 1);
                if row >= traj.len() {
                    return Err(bad(&format!("latent_row {row} out of range for {} states", traj.len())));
                }
                Ok((self.tokens, traj.state(row).to_vec()))
            }
            (Some(_), Some(_)) => Err(bad("both latent and latent_file given")),
            (None, None) => Err(bad("needs latent or latent_file")),
        }
    }
}

pub fn parse_candidates(text: &str, base: &Path) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CandidateLine = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("candidate line {}: {e}", i + 1)))?;
        out.push(parsed.resolve(base, i + 1)?);
    }
    Ok(out)
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::trajectory::write_trajectory;
    use crate::spectral::StateTrajectory;

    #[test]
    fn inline_and_file_latents() {
        let dir = tempfile::tempdir().unwrap();
        let traj = StateTrajectory::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        write_trajectory(&traj, dir.path().join("z.soet")).unwrap();
        let text = r#"{"tokens": ["a"], "latent": [0.5, 0.25]}

{"tokens": ["b"], "latent_file": "z.soet"}
{"tokens": ["c"], "latent_file": "z.soet", "latent_row": 0}
"#;
        let c = parse_candidates(text, dir.path()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0].1, vec![0.5, 0.25]);
        assert_eq!(c[1].1, vec![3.0, 4.0]);
        assert_eq!(c[2], (vec!["c".to_string()], vec![1.0, 2.0]));
    }

    #[test]
    fn invalid_lines() {
        let base = Path::new(".");
        assert!(parse_candidates(r#"{"tokens": []}"#, base).is_err());
        assert!(parse_candidates("not json", base).is_err());
        assert!(parse_candidates(r#"{"tokens": [], "latent": [1], "extra": 1}"#, base).is_err());
    }
}
