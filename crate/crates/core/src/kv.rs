//! Flat `key = value` text: one pair per line, `#` starts a comment.

use crate::error::{Error, Result};

/// Parses all pairs in order. Blank and comment-only lines are skipped.
pub fn pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let p = pairs("# header\n\na = 1\n b=two # trailing\n").unwrap();
        assert_eq!(
            p,
            vec![("a".into(), "1".into()), ("b".into(), "two".into())]
        );
        assert!(pairs("novalue\n").is_err());
        assert!(pairs(" = 3\n").is_err());
    }
}
