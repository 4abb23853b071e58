//! Event-log ingestion: participation events become weekly group-size series
//! and a sparse user-by-group comment-count matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::Weekday;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseColMatrix;

const SECONDS_PER_DAY: i64 = 86_400;
const SECONDS_PER_WEEK: i64 = 7 * SECONDS_PER_DAY;

/// Share of malformed lines (in percent) above which loading aborts.
pub const MALFORMED_LIMIT_PCT: f64 = 1.0;

/// One participation event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user: String,
    pub group: String,
    /// Seconds since the Unix epoch, UTC.
    pub ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Ndjson,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(EventFormat::Csv),
            "ndjson" | "jsonl" => Some(EventFormat::Ndjson),
            _ => None,
        }
    }
}

/// Parsed events plus the malformed-line tally.
#[derive(Debug, Clone, Default)]
pub struct LoadedEvents {
    pub records: Vec<EventRecord>,
    pub total_lines: usize,
    pub malformed: usize,
    /// 1-based line number and reason of the first malformed line.
    pub first_malformed: Option<(usize, String)>,
}

impl LoadedEvents {
    fn reject(&mut self, line: usize, reason: String) {
        self.malformed += 1;
        if self.first_malformed.is_none() {
            self.first_malformed = Some((line, reason));
        }
    }

    fn accept(&mut self, line: usize, user: &str, group: &str, ts: &str) {
        if user.is_empty() {
            return self.reject(line, "empty user field".into());
        }
        if group.is_empty() {
            return self.reject(line, "empty group field".into());
        }
        match parse_ts(ts) {
            Some(ts) => self.records.push(EventRecord {
                user: user.to_string(),
                group: group.to_string(),
                ts,
            }),
            None => self.reject(line, format!("unparsable timestamp {ts:?}")),
        }
    }
}

fn parse_ts(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f = s.parse::<f64>().ok()?;
    (f.is_finite() && f.abs() < 1e17).then(|| f.floor() as i64)
}

/// Reads an event file in file order.
pub fn load_events(path: &Path, format: EventFormat) -> Result<LoadedEvents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(file, format, path)
}

/// Parses events from any reader; `origin` is used only in diagnostics.
pub fn read_events<R: Read>(reader: R, format: EventFormat, origin: &Path) -> Result<LoadedEvents> {
    let loaded = match format {
        EventFormat::Csv => read_csv_events(reader)?,
        EventFormat::Ndjson => read_ndjson_events(reader, origin)?,
    };
    if loaded.malformed as f64 * 100.0 > MALFORMED_LIMIT_PCT * loaded.total_lines as f64 {
        let (line, reason) = loaded.first_malformed.clone().unwrap_or_default();
        return Err(Error::TooManyMalformed {
            path: origin.to_path_buf(),
            malformed: loaded.malformed,
            total: loaded.total_lines,
            limit_pct: MALFORMED_LIMIT_PCT,
            first_bad_line: line,
            reason,
        });
    }
    if loaded.malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed of {} lines",
            origin.display(),
            loaded.malformed,
            loaded.total_lines
        );
    }
    Ok(loaded)
}

fn read_csv_events<R: Read>(reader: R) -> Result<LoadedEvents> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::InvalidInput(format!("csv header lacks `{name}` column")))
    };
    let (iu, ig, it) = (find("user")?, find("group")?, find("ts")?);

    let mut out = LoadedEvents::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line() as usize;
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                out.total_lines += 1;
                if record.len() != headers.len() {
                    out.reject(line, format!("expected {} fields, got {}", headers.len(), record.len()));
                    continue;
                }
                out.accept(line, record[iu].trim(), record[ig].trim(), &record[it]);
            }
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => {
                out.total_lines += 1;
                out.reject(line, e.to_string());
            }
        }
    }
    Ok(out)
}

fn read_ndjson_events<R: Read>(reader: R, origin: &Path) -> Result<LoadedEvents> {
    let mut out = LoadedEvents::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.total_lines += 1;
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.reject(i + 1, e.to_string());
                continue;
            }
        };
        let field = |k: &str| match value.get(k) {
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            _ => None,
        };
        match (field("user"), field("group"), field("ts")) {
            (Some(u), Some(g), Some(t)) => out.accept(i + 1, u.trim(), g.trim(), &t),
            _ => out.reject(i + 1, "missing user, group or ts".into()),
        }
    }
    Ok(out)
}

/// Population-selection and week-binning parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub top_n: usize,
    #[serde(default)]
    pub exclusion_list: BTreeSet<String>,
    /// Inclusive start of the corpus window (epoch seconds).
    pub window_start: i64,
    /// Exclusive end of the corpus window (epoch seconds).
    pub window_end: i64,
    #[serde(default = "default_anchor")]
    pub week_anchor: Weekday,
    /// Drop excluded groups before cutting to `top_n`, so they free slots.
    #[serde(default = "default_true")]
    pub exclude_before_truncation: bool,
}

fn default_anchor() -> Weekday {
    Weekday::Mon
}

fn default_true() -> bool {
    true
}

impl CorpusConfig {
    pub fn new(top_n: usize, window_start: i64, window_end: i64) -> Self {
        CorpusConfig {
            top_n,
            exclusion_list: BTreeSet::new(),
            window_start,
            window_end,
            week_anchor: Weekday::Mon,
            exclude_before_truncation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if self.window_start >= self.window_end {
            return Err(Error::Config(format!(
                "window_start ({}) must precede window_end ({})",
                self.window_start, self.window_end
            )));
        }
        Ok(())
    }

    /// Timestamp of the week boundary at or before `window_start`.
    pub fn week_origin(&self) -> i64 {
        let day = self.window_start.div_euclid(SECONDS_PER_DAY);
        // 1970-01-01 was a Thursday: Monday-based index 3.
        let weekday = (day + 3).rem_euclid(7);
        let anchor = self.week_anchor.num_days_from_monday() as i64;
        (day - (weekday - anchor).rem_euclid(7)) * SECONDS_PER_DAY
    }

    pub fn week_of(&self, ts: i64) -> usize {
        ((ts - self.week_origin()).div_euclid(SECONDS_PER_WEEK)) as usize
    }

    pub fn n_weeks(&self) -> usize {
        self.week_of(self.window_end - 1) + 1
    }

    pub fn in_window(&self, ts: i64) -> bool {
        ts >= self.window_start && ts < self.window_end
    }
}

/// Retained groups, ranked by event volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Population {
    /// Retained group ids, highest volume first.
    pub groups: Vec<String>,
    /// Event count within the window for every observed group.
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

/// Picks the `top_n` groups by event count within the window.
///
/// Ties are broken lexicographically by group id, so the result does not
/// depend on event order.
pub fn select_population(events: &[EventRecord], config: &CorpusConfig) -> Result<Population> {
    config.validate()?;
    if events.is_empty() {
        return Err(Error::InvalidInput("no events to select from".into()));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for e in events.iter().filter(|e| config.in_window(e.ts)) {
        *counts.entry(e.group.clone()).or_default() += 1;
    }
    let mut ranked: Vec<(&String, u64)> = counts.iter().map(|(g, &c)| (g, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let excluded = |g: &String| config.exclusion_list.contains(g);
    let groups: Vec<String> = if config.exclude_before_truncation {
        ranked
            .iter()
            .filter(|(g, _)| !excluded(g))
            .take(config.top_n)
            .map(|(g, _)| (*g).clone())
            .collect()
    } else {
        ranked
            .iter()
            .take(config.top_n)
            .filter(|(g, _)| !excluded(g))
            .map(|(g, _)| (*g).clone())
            .collect()
    };

    let mut warnings = Vec::new();
    if groups.len() < config.top_n {
        let w = format!(
            "requested top {} groups but only {} available",
            config.top_n,
            groups.len()
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(Population {
        groups,
        counts,
        warnings,
    })
}

/// Weekly `log(1 + distinct users)` per group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPanel {
    pub groups: Vec<String>,
    /// `sizes[g][t]`; every row has the same length.
    pub sizes: Vec<Vec<f64>>,
    /// First week with a nonzero size, or `n_weeks` for a never-active group.
    pub creation_week: Vec<usize>,
}

impl GroupPanel {
    /// Builds a panel from log sizes, deriving creation weeks.
    pub fn from_sizes(groups: Vec<String>, sizes: Vec<Vec<f64>>) -> Result<Self> {
        if groups.len() != sizes.len() {
            return Err(Error::InvalidInput(format!(
                "{} group ids for {} series",
                groups.len(),
                sizes.len()
            )));
        }
        let n_weeks = sizes.first().map_or(0, Vec::len);
        for (g, row) in groups.iter().zip(&sizes) {
            if row.len() != n_weeks {
                return Err(Error::InvalidInput(format!("series for {g} has ragged length")));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "series for {g} has negative or non-finite sizes"
                )));
            }
        }
        let creation_week = sizes
            .iter()
            .map(|row| row.iter().position(|&v| v > 0.0).unwrap_or(n_weeks))
            .collect();
        Ok(GroupPanel {
            groups,
            sizes,
            creation_week,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_weeks(&self) -> usize {
        self.sizes.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == group)
    }

    /// Restricts to the named groups, in the given order.
    pub fn select(&self, groups: &[String]) -> Result<GroupPanel> {
        let mut sizes = Vec::with_capacity(groups.len());
        let mut creation_week = Vec::with_capacity(groups.len());
        for g in groups {
            let i = self
                .index_of(g)
                .ok_or_else(|| Error::InvalidInput(format!("group {g} not in panel")))?;
            sizes.push(self.sizes[i].clone());
            creation_week.push(self.creation_week[i]);
        }
        Ok(GroupPanel {
            groups: groups.to_vec(),
            sizes,
            creation_week,
        })
    }

    /// Writes `group,creation_week,0,1,...` with one row per group.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::persist::csv_writer(path)?;
        let mut header = vec!["group".to_string(), "creation_week".to_string()];
        header.extend((0..self.n_weeks()).map(|t| t.to_string()));
        w.write_record(&header)?;
        for (i, g) in self.groups.iter().enumerate() {
            let mut row = vec![g.clone(), self.creation_week[i].to_string()];
            row.extend(self.sizes[i].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = crate::persist::csv_reader(path)?;
        let mut groups = Vec::new();
        let mut sizes = Vec::new();
        let mut declared = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::InvalidInput(format!("{}: short panel row", path.display())));
            }
            groups.push(rec[0].to_string());
            declared.push(rec[1].parse::<usize>().map_err(|e| {
                Error::InvalidInput(format!("{}: bad creation_week: {e}", path.display()))
            })?);
            let row = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidInput(format!("{}: bad size: {e}", path.display())))?;
            sizes.push(row);
        }
        let panel = GroupPanel::from_sizes(groups, sizes)?;
        if panel.creation_week != declared {
            return Err(Error::InvalidInput(format!(
                "{}: creation_week column disagrees with the series",
                path.display()
            )));
        }
        Ok(panel)
    }
}

/// Builds the weekly panel for `groups` from in-window events.
pub fn build_panel(events: &[EventRecord], groups: &[String], config: &CorpusConfig) -> Result<GroupPanel> {
    config.validate()?;
    let index: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let n_weeks = config.n_weeks();
    let mut distinct: Vec<Vec<HashSet<&str>>> = vec![vec![HashSet::new(); n_weeks]; groups.len()];
    for e in events.iter().filter(|e| config.in_window(e.ts)) {
        if let Some(&g) = index.get(e.group.as_str()) {
            distinct[g][config.week_of(e.ts)].insert(e.user.as_str());
        }
    }
    let sizes = distinct
        .iter()
        .map(|weeks| weeks.iter().map(|users| (users.len() as f64).ln_1p()).collect())
        .collect();
    GroupPanel::from_sizes(groups.to_vec(), sizes)
}

/// Sparse `n_{u,j}`: comment counts of each user in each retained group.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFrequencyMatrix {
    /// Row labels, sorted.
    pub users: Vec<String>,
    /// Column labels, in retained-group order.
    pub groups: Vec<String>,
    pub counts: SparseColMatrix,
}

impl UserFrequencyMatrix {
    pub fn total(&self) -> f64 {
        self.counts.sum()
    }

    /// Coordinate list `user,group,count`, column-major.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::persist::csv_writer(path)?;
        w.write_record(["user", "group", "count"])?;
        for (r, c, v) in self.counts.triplets() {
            w.write_record([self.users[r].as_str(), self.groups[c].as_str(), &(v as u64).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a coordinate list; `groups` fixes the column order.
    pub fn read_csv(path: &Path, groups: &[String]) -> Result<Self> {
        let col: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let mut rdr = crate::persist::csv_reader(path)?;
        let mut entries = Vec::new();
        let mut users = BTreeSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let c = *col
                .get(&rec[1])
                .ok_or_else(|| Error::InvalidInput(format!("unknown group {} in frequency file", &rec[1])))?;
            let v: f64 = rec[2]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad count {:?}: {e}", &rec[2])))?;
            users.insert(rec[0].to_string());
            entries.push((rec[0].to_string(), c, v));
        }
        let users: Vec<String> = users.into_iter().collect();
        let row: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let trips: Vec<_> = entries.iter().map(|(u, c, v)| (row[u.as_str()], *c, *v)).collect();
        Ok(UserFrequencyMatrix {
            counts: SparseColMatrix::from_triplets(users.len(), groups.len(), trips),
            users,
            groups: groups.to_vec(),
        })
    }
}

/// Counts events of each user in each retained group.
///
/// Window filtering is the caller's concern; pass the same events that fed
/// [`build_panel`] and filter with [`retained_events`] when needed.
pub fn build_user_frequency(events: &[EventRecord], groups: &[String]) -> Result<UserFrequencyMatrix> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("no groups retained".into()));
    }
    let col: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let mut cells: BTreeMap<(&str, usize), u64> = BTreeMap::new();
    for e in events {
        if let Some(&c) = col.get(e.group.as_str()) {
            *cells.entry((e.user.as_str(), c)).or_default() += 1;
        }
    }
    let users: Vec<String> = cells
        .keys()
        .map(|(u, _)| *u)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let row: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let trips = cells.iter().map(|(&(u, c), &n)| (row[u], c, n as f64));
    Ok(UserFrequencyMatrix {
        counts: SparseColMatrix::from_triplets(users.len(), groups.len(), trips),
        users,
        groups: groups.to_vec(),
    })
}

/// Events inside the window that belong to a retained group.
pub fn retained_events<'a>(
    events: &'a [EventRecord],
    groups: &[String],
    config: &CorpusConfig,
) -> Vec<&'a EventRecord> {
    let keep: HashSet<&str> = groups.iter().map(String::as_str).collect();
    events
        .iter()
        .filter(|e| config.in_window(e.ts) && keep.contains(e.group.as_str()))
        .collect()
}

/// Writes events as `user,group,ts` csv.
pub fn write_events_csv<W: Write>(writer: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user", "group", "ts"])?;
    for e in events {
        w.write_record([e.user.as_str(), e.group.as_str(), &e.ts.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<events>", e))?;
    Ok(())
}

/// Writes events as one JSON object per line.
pub fn write_events_ndjson<W: Write>(mut writer: W, events: &[EventRecord]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut writer, e)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<events>", e))?;
    }
    Ok(())
}
