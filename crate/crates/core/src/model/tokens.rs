use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One sequence per non-empty line, space-separated integer token ids.
pub fn read_token_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&text, &path.display().to_string())
}

pub(crate) fn parse_tokens(text: &str, origin: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|e| Error::Parse {
                        location: format!("{origin}:{}", i + 1),
                        message: format!("bad token id {tok:?}: {e}"),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn write_token_file(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let mut out = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_skips_blank_lines() {
        let seqs = parse_tokens("1 2 3\n\n  4   5\n", "t").unwrap();
        assert_eq!(seqs, vec![vec![1, 2, 3], vec![4, 5]]);
    }

    #[test]
    fn reports_line_of_bad_token() {
        let err = parse_tokens("1 2\n3 x\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { ref location, .. } if location == "t:2"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.txt");
        let seqs = vec![vec![0, 255, 7], vec![9]];
        write_token_file(&p, &seqs).unwrap();
        assert_eq!(read_token_file(&p).unwrap(), seqs);
    }
}
