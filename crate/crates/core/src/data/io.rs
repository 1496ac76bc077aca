//! Line-delimited text formats.
//!
//! ```text
//! events.tsv   user_id  ts  vid  aid  tag  pt  dur  label     (one event per line)
//! catalog.tsv  vid  x_1 .. x_d                               (one item per line)
//! users.tsv    user_id  split  plant                         (optional metadata)
//! ```
//!
//! Fields are tab separated. Lines starting with `#` are manifest/comment
//! lines and are skipped on read. Events are written sorted by
//! `(user_id, ts)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use super::{CatalogItem, Dataset, InteractionEvent, Plant, Split, UserHistory, UserMeta};
use crate::error::{GemsError, Result};
use crate::numerics::checkpoint::write_atomic;

pub const EVENTS_FILE: &str = "events.tsv";
pub const CATALOG_FILE: &str = "catalog.tsv";
pub const USERS_FILE: &str = "users.tsv";

pub fn write_events<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    for u in &ds.users {
        for e in &u.events {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                u.user_id, e.ts, e.vid, e.aid, e.tag, e.pt, e.dur, e.label
            )?;
        }
    }
    Ok(())
}

pub fn write_catalog<W: Write>(w: &mut W, catalog: &[CatalogItem]) -> Result<()> {
    for item in catalog {
        write!(w, "{}", item.vid)?;
        for x in &item.vector {
            write!(w, "\t{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_users<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    for (id, m) in &ds.meta {
        let split = match m.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        writeln!(w, "{id}\t{split}\t{}", m.plant.as_str())?;
    }
    Ok(())
}

/// Writes the three files under `dir`, each prefixed by `header`.
pub fn export(ds: &Dataset, dir: &Path, header: &str) -> Result<()> {
    let mut buf = header.as_bytes().to_vec();
    write_events(&mut buf, ds)?;
    write_atomic(&dir.join(EVENTS_FILE), &buf)?;
    let mut buf = header.as_bytes().to_vec();
    write_catalog(&mut buf, &ds.catalog)?;
    write_atomic(&dir.join(CATALOG_FILE), &buf)?;
    let mut buf = header.as_bytes().to_vec();
    write_users(&mut buf, ds)?;
    write_atomic(&dir.join(USERS_FILE), &buf)
}

/// Data lines of a text file with their 1-based line number and byte offset.
fn data_lines<'a>(text: &'a str) -> impl Iterator<Item = (usize, u64, &'a str)> + 'a {
    let mut offset = 0u64;
    text.split_inclusive('\n').enumerate().filter_map(move |(i, raw)| {
        let start = offset;
        offset += raw.len() as u64;
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, start, line))
        }
    })
}

struct LineCtx<'a> {
    path: &'a str,
    line: usize,
    offset: u64,
}

impl LineCtx<'_> {
    fn err(&self, message: impl Into<String>) -> GemsError {
        GemsError::Parse {
            path: self.path.to_string(),
            line: self.line,
            offset: self.offset,
            message: message.into(),
        }
    }

    fn field<T: FromStr>(&self, fields: &[&str], i: usize, name: &str) -> Result<T> {
        fields[i]
            .parse()
            .map_err(|_| self.err(format!("bad {name} `{}`", fields[i])))
    }
}

pub fn parse_events(text: &str, path: &str) -> Result<Vec<UserHistory>> {
    let mut by_user: BTreeMap<u64, Vec<InteractionEvent>> = BTreeMap::new();
    for (line, offset, s) in data_lines(text) {
        let ctx = LineCtx { path, line, offset };
        let f: Vec<&str> = s.split('\t').collect();
        if f.len() != 8 {
            return Err(ctx.err(format!("expected 8 fields, found {}", f.len())));
        }
        let user: u64 = ctx.field(&f, 0, "user_id")?;
        let e = InteractionEvent {
            ts: ctx.field(&f, 1, "ts")?,
            vid: ctx.field(&f, 2, "vid")?,
            aid: ctx.field(&f, 3, "aid")?,
            tag: ctx.field(&f, 4, "tag")?,
            pt: ctx.field(&f, 5, "pt")?,
            dur: ctx.field(&f, 6, "dur")?,
            label: ctx.field(&f, 7, "label")?,
        };
        e.validate().map_err(|m| ctx.err(m.to_string()))?;
        by_user.entry(user).or_default().push(e);
    }
    by_user
        .into_iter()
        .map(|(id, events)| UserHistory::new(id, events))
        .collect()
}

pub fn parse_catalog(text: &str, path: &str) -> Result<Vec<CatalogItem>> {
    let mut out = Vec::new();
    let mut width = None;
    for (line, offset, s) in data_lines(text) {
        let ctx = LineCtx { path, line, offset };
        let f: Vec<&str> = s.split('\t').collect();
        if f.len() < 2 {
            return Err(ctx.err("expected a vid and at least one coordinate"));
        }
        if *width.get_or_insert(f.len()) != f.len() {
            return Err(ctx.err("catalog rows must share one width"));
        }
        let vid = ctx.field(&f, 0, "vid")?;
        let vector = (1..f.len())
            .map(|i| ctx.field::<f64>(&f, i, "coordinate"))
            .collect::<Result<Vec<_>>>()?;
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(ctx.err("non-finite coordinate"));
        }
        out.push(CatalogItem { vid, vector });
    }
    if out.is_empty() {
        return Err(GemsError::Data(format!("{path}: empty catalog")));
    }
    Ok(out)
}

pub fn parse_users(text: &str, path: &str) -> Result<BTreeMap<u64, UserMeta>> {
    let mut out = BTreeMap::new();
    for (line, offset, s) in data_lines(text) {
        let ctx = LineCtx { path, line, offset };
        let f: Vec<&str> = s.split('\t').collect();
        if f.len() != 3 {
            return Err(ctx.err(format!("expected 3 fields, found {}", f.len())));
        }
        let split = match f[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(ctx.err(format!("bad split `{other}`"))),
        };
        let plant = Plant::parse(f[2]).ok_or_else(|| ctx.err(format!("bad plant `{}`", f[2])))?;
        out.insert(ctx.field(&f, 0, "user_id")?, UserMeta { split, plant });
    }
    Ok(out)
}

fn read(path: &Path, producer: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(GemsError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    Ok(fs::read_to_string(path)?)
}

/// Reads `events.tsv`, `catalog.tsv` and (if present) `users.tsv` from `dir`.
pub fn ingest(dir: &Path) -> Result<Dataset> {
    let ev_path = dir.join(EVENTS_FILE);
    let cat_path = dir.join(CATALOG_FILE);
    let users = parse_events(&read(&ev_path, "datagen")?, &ev_path.display().to_string())?;
    let catalog = parse_catalog(&read(&cat_path, "datagen")?, &cat_path.display().to_string())?;
    let users_path = dir.join(USERS_FILE);
    let meta = if users_path.exists() {
        parse_users(&fs::read_to_string(&users_path)?, &users_path.display().to_string())?
    } else {
        BTreeMap::new()
    };
    Dataset::new(users, catalog, meta)
}
