use super::{Catalog, Interaction, Item};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// `item_id<TAB>title` per line.
pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (no, line) in data_lines(&text) {
        let (id, title) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, no, "expected item_id<TAB>title"))?;
        let item_id = id
            .trim()
            .parse()
            .map_err(|_| parse_err(path, no, format!("bad item id `{id}`")))?;
        items.push(Item {
            item_id,
            title: title.trim().to_string(),
        });
    }
    Catalog::new(items)
}

/// `user_id<TAB>item_id<TAB>rating<TAB>timestamp` per line.
pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(path, no, format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |k: usize| -> Result<i64> {
            fields[k]
                .parse()
                .map_err(|_| parse_err(path, no, format!("bad number `{}`", fields[k])))
        };
        let user_id = num(0)?;
        let item_id = num(1)?;
        if user_id < 0 || item_id < 0 {
            return Err(parse_err(path, no, "negative id"));
        }
        out.push(Interaction {
            user_id: user_id as u64,
            item_id: item_id as u64,
            rating: num(2)?,
            timestamp: num(3)?,
        });
    }
    Ok(out)
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut s = String::new();
    for item in catalog.items() {
        writeln!(s, "{}\t{}", item.item_id, item.title).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut s = String::new();
    for x in interactions {
        writeln!(s, "{}\t{}\t{}\t{}", x.user_id, x.item_id, x.rating, x.timestamp)
            .expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::new(vec![
            Item { item_id: 1, title: "Toy Story (1995)".into() },
            Item { item_id: 7, title: "Heat".into() },
        ])
        .unwrap();
        let p = dir.path().join("items.tsv");
        write_catalog(&p, &cat).unwrap();
        assert_eq!(read_catalog(&p).unwrap(), cat);

        let xs = vec![Interaction { user_id: 3, item_id: 7, rating: 4, timestamp: 881250949 }];
        let q = dir.path().join("ratings.tsv");
        write_interactions(&q, &xs).unwrap();
        assert_eq!(read_interactions(&q).unwrap(), xs);

        fs::write(&q, "1\t2\t3\n").unwrap();
        let err = read_interactions(&q).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
