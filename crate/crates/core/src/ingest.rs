//! Reading interaction logs and shaping them into per-user event sequences.
//!
//! Input is delimiter-separated text with four columns: user id, item id,
//! reward and timestamp. A header line naming the columns fixes their order;
//! without one the order above is assumed.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged (user, item, reward, timestamp) event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub reward: f64,
    pub timestamp: u64,
}

impl InteractionRecord {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, reward: f64, timestamp: u64) -> Self {
        Self {
            user_id: user_id.into(),
            item_id: item_id.into(),
            reward,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatConfig {
    /// Field separator; may be longer than one character (MovieLens uses `::`).
    pub delimiter: String,
    /// `Some(true)` forces a header, `Some(false)` forbids one, `None` detects it.
    pub header: Option<bool>,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            delimiter: ",".to_string(),
            header: None,
        }
    }
}

const COLUMN_NAMES: [[&str; 3]; 4] = [
    ["user_id", "user", "userid"],
    ["item_id", "item", "itemid"],
    ["reward", "rating", "click"],
    ["timestamp", "time", "ts"],
];

fn header_layout(fields: &[&str]) -> Option<[usize; 4]> {
    let mut layout = [usize::MAX; 4];
    for (pos, field) in fields.iter().enumerate() {
        let name = field.trim().to_ascii_lowercase();
        if let Some(col) = COLUMN_NAMES.iter().position(|aliases| aliases.contains(&name.as_str())) {
            layout[col] = pos;
        }
    }
    layout.iter().all(|&p| p != usize::MAX).then_some(layout)
}

/// Parse records from a file on disk.
pub fn parse_log(path: impl AsRef<Path>, format: &FormatConfig) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text, format)
}

/// Parse records from text already in memory. Blank lines are skipped.
pub fn parse_str(text: &str, format: &FormatConfig) -> Result<Vec<InteractionRecord>> {
    if format.delimiter.is_empty() {
        return Err(Error::InvalidArgument("empty delimiter".into()));
    }
    let mut layout = [0, 1, 2, 3];
    let mut records = Vec::new();
    let mut first = true;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).collect();
        if first {
            first = false;
            let detected = header_layout(&fields);
            match (format.header, detected) {
                (Some(true), Some(l)) | (None, Some(l)) => {
                    layout = l;
                    continue;
                }
                (Some(true), None) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "header does not name user_id, item_id, reward and timestamp".into(),
                    })
                }
                _ => {}
            }
        }
        records.push(parse_row(&fields, &layout, line_no)?);
    }
    Ok(records)
}

fn parse_row(fields: &[&str], layout: &[usize; 4], line: usize) -> Result<InteractionRecord> {
    let need = layout.iter().max().copied().unwrap_or(3) + 1;
    if fields.len() < need {
        return Err(Error::Parse {
            line,
            message: format!("expected at least {need} fields, found {}", fields.len()),
        });
    }
    let get = |col: usize| fields[layout[col]].trim();
    let user_id = get(0);
    let item_id = get(1);
    if user_id.is_empty() || item_id.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty user or item id".into(),
        });
    }
    let reward: f64 = get(2).parse().map_err(|_| Error::Parse {
        line,
        message: format!("reward `{}` is not a number", get(2)),
    })?;
    if !reward.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("reward `{}` is not finite", get(2)),
        });
    }
    let timestamp: u64 = get(3).parse().map_err(|_| Error::Parse {
        line,
        message: format!("timestamp `{}` is not a non-negative integer", get(3)),
    })?;
    Ok(InteractionRecord::new(user_id, item_id, reward, timestamp))
}

/// A single event inside a [`UserLog`]; the item is a dense index into [`Dataset::items`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub item: usize,
    pub reward: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLog {
    pub user_id: String,
    /// Sorted by timestamp; ties keep input order.
    pub events: Vec<Event>,
}

/// How many users survived each filtering step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub users_in: usize,
    pub after_count_filter: usize,
    pub after_positive_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub logs: Vec<UserLog>,
    /// Item ids by dense index.
    pub items: Vec<String>,
    pub gamma: f64,
    /// Observed (min, max) reward before any scaling.
    pub reward_scale: (f64, f64),
    pub filter: FilterCounts,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.logs.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_samples(&self) -> usize {
        self.logs.iter().map(|l| l.events.len()).sum()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.logs.iter().flat_map(|l| l.events.iter().map(|e| e.reward))
    }

    /// True when every reward is 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.rewards().all(|r| r == 0.0 || r == 1.0)
    }

    /// Flatten back into records, user by user in log order.
    pub fn to_records(&self) -> Vec<InteractionRecord> {
        self.logs
            .iter()
            .flat_map(|log| {
                log.events.iter().map(|e| {
                    InteractionRecord::new(log.user_id.clone(), self.items[e.item].clone(), e.reward, e.timestamp)
                })
            })
            .collect()
    }
}

/// Numeric ids sort numerically, everything else lexicographically after them.
pub(crate) fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn reward_range(records: impl Iterator<Item = f64>) -> (f64, f64) {
    records.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
}

/// Drop users with fewer than `min_interactions` events and, for binary
/// click data with `require_positive`, users who never clicked. The count
/// filter runs first. `gamma` is estimated from the surviving data.
pub fn filter_users(records: &[InteractionRecord], min_interactions: usize, require_positive: bool) -> Result<Dataset> {
    if min_interactions == 0 {
        return Err(Error::InvalidArgument("min_interactions must be at least 1".into()));
    }
    let mut by_user: HashMap<&str, Vec<&InteractionRecord>> = HashMap::new();
    for rec in records {
        by_user.entry(rec.user_id.as_str()).or_default().push(rec);
    }
    let users_in = by_user.len();
    let binary = records.iter().all(|r| r.reward == 0.0 || r.reward == 1.0);

    let mut kept: Vec<(&str, Vec<&InteractionRecord>)> =
        by_user.into_iter().filter(|(_, evs)| evs.len() >= min_interactions).collect();
    let after_count_filter = kept.len();
    if require_positive && binary {
        kept.retain(|(_, evs)| evs.iter().any(|r| r.reward > 0.0));
    }
    let after_positive_filter = kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {users_in} users removed (min_interactions={min_interactions}, require_positive={require_positive})"
        )));
    }
    kept.sort_by(|a, b| id_order(a.0, b.0));

    let mut item_ids: Vec<&str> = kept.iter().flat_map(|(_, evs)| evs.iter().map(|r| r.item_id.as_str())).collect();
    item_ids.sort_by(|a, b| id_order(a, b));
    item_ids.dedup();
    let index: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let logs: Vec<UserLog> = kept
        .into_iter()
        .map(|(user, mut evs)| {
            // stable: ties stay in input order
            evs.sort_by_key(|r| r.timestamp);
            UserLog {
                user_id: user.to_string(),
                events: evs
                    .into_iter()
                    .map(|r| Event {
                        item: index[r.item_id.as_str()],
                        reward: r.reward,
                        timestamp: r.timestamp,
                    })
                    .collect(),
            }
        })
        .collect();

    let n_users = logs.len();
    let n_samples: usize = logs.iter().map(|l| l.events.len()).sum();
    let reward_scale = reward_range(logs.iter().flat_map(|l| l.events.iter().map(|e| e.reward)));
    Ok(Dataset {
        logs,
        items: item_ids.into_iter().map(str::to_string).collect(),
        gamma: gamma_from_counts(n_users, n_samples)?,
        reward_scale,
        filter: FilterCounts {
            users_in,
            after_count_filter,
            after_positive_filter,
        },
    })
}

/// Drop-out estimate of the discount factor, `1 - users / samples`.
pub fn gamma_from_counts(n_users: usize, n_samples: usize) -> Result<f64> {
    if n_users == 0 || n_samples < n_users {
        return Err(Error::InvalidArgument(format!(
            "cannot estimate gamma from {n_users} users and {n_samples} samples"
        )));
    }
    Ok((n_samples - n_users) as f64 / n_samples as f64)
}

pub fn estimate_gamma(dataset: &Dataset) -> Result<f64> {
    gamma_from_counts(dataset.n_users(), dataset.n_samples())
}

/// Affinely map the observed reward range onto `target`. A degenerate range
/// maps every reward to the midpoint of `target`.
pub fn scale_rewards(dataset: &Dataset, target: (f64, f64)) -> Result<Dataset> {
    let (lo, hi) = target;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!("bad target range ({lo}, {hi})")));
    }
    let (min, max) = reward_range(dataset.rewards());
    let map = |r: f64| {
        if max > min {
            lo + (r - min) * (hi - lo) / (max - min)
        } else {
            0.5 * (lo + hi)
        }
    };
    let mut out = dataset.clone();
    for log in &mut out.logs {
        for e in &mut log.events {
            e.reward = map(e.reward);
        }
    }
    out.reward_scale = (min, max);
    Ok(out)
}

/// Render records as comma-separated text with a header, the default input format.
pub fn format_records(records: &[InteractionRecord]) -> String {
    let mut out = String::from("user_id,item_id,reward,timestamp\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.user_id, r.item_id, r.reward, r.timestamp));
    }
    out
}

pub fn write_log(path: impl AsRef<Path>, records: &[InteractionRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_records(records)).map_err(|e| Error::io(path, e))
}
