//! Job filter queries: `field[:value|lo..hi|lo..|..hi][,clause...]`.

use std::fmt;
use std::str::FromStr;

use super::JobView;
use crate::fmt::sig9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Text,
    Number,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Name,
    Task,
    State,
    Tstart,
    Duration,
    Rss,
    Attempts,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::Name,
        Field::Task,
        Field::State,
        Field::Tstart,
        Field::Duration,
        Field::Rss,
        Field::Attempts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Name => "name",
            Field::Task => "task",
            Field::State => "state",
            Field::Tstart => "tstart",
            Field::Duration => "duration",
            Field::Rss => "rss",
            Field::Attempts => "attempts",
        }
    }

    pub fn kind(self) -> FieldKind {
        match self {
            Field::Name | Field::Task | Field::State => FieldKind::Text,
            _ => FieldKind::Number,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Field::Name => "job name",
            Field::Task => "owning task name",
            Field::State => "Pending, Running, Postponed, Done, Failed, TimedOut or Killed",
            Field::Tstart => "start of the current or last attempt, Unix seconds",
            Field::Duration => "running time of the current or last attempt, seconds",
            Field::Rss => "last sampled resident memory, MiB",
            Field::Attempts => "number of started attempts",
        }
    }

    pub fn text(self, job: &JobView) -> Option<String> {
        match self {
            Field::Name => Some(job.name.clone()),
            Field::Task => job.task.clone(),
            Field::State => Some(job.state.clone()),
            _ => self.number(job).map(sig9),
        }
    }

    pub fn number(self, job: &JobView) -> Option<f64> {
        match self {
            Field::Tstart => job.tstart,
            Field::Duration => job.duration,
            Field::Rss => job.rss,
            Field::Attempts => Some(f64::from(job.attempts)),
            _ => None,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown field '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    /// The field has a value.
    Present,
    Exact(String),
    /// Inclusive bounds; a missing side is unbounded.
    Range {
        lo: Option<f64>,
        hi: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clause {
    pub field: Field,
    pub constraint: Constraint,
}

impl Clause {
    pub fn matches(&self, job: &JobView) -> bool {
        match &self.constraint {
            Constraint::Present => self.field.text(job).is_some(),
            Constraint::Exact(v) => match self.field.kind() {
                FieldKind::Text => self.field.text(job).as_deref() == Some(v.as_str()),
                FieldKind::Number => {
                    let want: f64 = v.parse().expect("validated at parse time");
                    self.field.number(job) == Some(want)
                }
            },
            Constraint::Range { lo, hi } => self
                .field
                .number(job)
                .is_some_and(|x| lo.is_none_or(|l| x >= l) && hi.is_none_or(|h| x <= h)),
        }
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.field)?;
        match &self.constraint {
            Constraint::Present => Ok(()),
            Constraint::Exact(v) => write!(f, ":{v}"),
            Constraint::Range { lo, hi } => {
                let side = |b: &Option<f64>| b.map(|x| format!("{x:?}")).unwrap_or_default();
                write!(f, ":{}..{}", side(lo), side(hi))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad filter clause '{clause}': {reason}")]
pub struct FilterError {
    pub clause: String,
    pub reason: String,
}

/// Conjunction of clauses; the empty query matches everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterQuery {
    pub clauses: Vec<Clause>,
}

fn parse_bound(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(Some(x)),
        _ => Err(format!("'{s}' is not a number")),
    }
}

fn parse_clause(text: &str) -> Result<Clause, String> {
    let (field, value) = match text.split_once(':') {
        Some((f, v)) => (f, Some(v)),
        None => (text, None),
    };
    let field: Field = field.trim().parse()?;
    let constraint = match value {
        None => Constraint::Present,
        Some("") => return Err("empty value".into()),
        Some(v) => match (field.kind(), v.split_once("..")) {
            (FieldKind::Text, Some(_)) => {
                return Err(format!("field '{field}' does not accept ranges"))
            }
            (FieldKind::Text, None) => Constraint::Exact(v.to_string()),
            (FieldKind::Number, None) => {
                parse_bound(v)?;
                Constraint::Exact(v.to_string())
            }
            (FieldKind::Number, Some((lo, hi))) => {
                let (lo, hi) = (parse_bound(lo)?, parse_bound(hi)?);
                if lo.is_none() && hi.is_none() {
                    return Err("range needs at least one bound".into());
                }
                if let (Some(l), Some(h)) = (lo, hi) {
                    if l > h {
                        return Err(format!("empty range {l}..{h}"));
                    }
                }
                Constraint::Range { lo, hi }
            }
        },
    };
    Ok(Clause { field, constraint })
}

impl FilterQuery {
    pub fn parse(text: &str) -> Result<Self, FilterError> {
        let mut clauses = Vec::new();
        if text.trim().is_empty() {
            return Ok(FilterQuery { clauses });
        }
        for part in text.split(',') {
            let clause = parse_clause(part).map_err(|reason| FilterError {
                clause: part.to_string(),
                reason,
            })?;
            clauses.push(clause);
        }
        Ok(FilterQuery { clauses })
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn matches(&self, job: &JobView) -> bool {
        self.clauses.iter().all(|c| c.matches(job))
    }

    pub fn apply<'a>(&self, jobs: &'a [JobView]) -> Vec<&'a JobView> {
        jobs.iter().filter(|j| self.matches(j)).collect()
    }
}

impl FromStr for FilterQuery {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterQuery::parse(s)
    }
}

impl fmt::Display for FilterQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn job(
        name: &str,
        state: &str,
        tstart: Option<f64>,
        rss: Option<f64>,
        attempts: u32,
    ) -> JobView {
        JobView {
            name: name.into(),
            task: None,
            state: state.into(),
            tstart,
            duration: tstart.map(|_| 1.5),
            rss,
            attempts,
        }
    }

    #[test]
    fn presence_range_and_exact() {
        let jobs = vec![
            job("a", "Running", Some(10.0), Some(120.0), 1),
            job("b", "Pending", None, None, 0),
            job("c", "Running", Some(11.0), Some(600.0), 2),
            job("d", "Done", Some(5.0), Some(300.0), 1),
        ];
        let names = |q: &str| -> Vec<String> {
            FilterQuery::parse(q)
                .unwrap()
                .apply(&jobs)
                .iter()
                .map(|j| j.name.clone())
                .collect()
        };
        assert_eq!(names("tstart"), ["a", "c", "d"]);
        assert_eq!(names("rss:100..500,state:Running"), ["a"]);
        assert_eq!(names("rss:300.."), ["c", "d"]);
        assert_eq!(names("rss:..300"), ["a", "d"]);
        assert_eq!(names("attempts:2"), ["c"]);
        assert_eq!(names(""), ["a", "b", "c", "d"]);
        assert_eq!(names("task"), Vec::<String>::new());
    }

    #[test]
    fn errors_name_the_clause() {
        for (q, bad) in [
            ("state:Running,colour:red", "colour:red"),
            ("rss:abc", "rss:abc"),
            ("name:a..b", "name:a..b"),
            ("rss:..", "rss:.."),
            ("rss:5..1", "rss:5..1"),
            ("tstart,", ""),
            ("state:", "state:"),
        ] {
            let err = FilterQuery::parse(q).unwrap_err();
            assert_eq!(err.clause, bad, "{q}");
            assert!(err.to_string().contains(bad));
        }
    }

    fn arb_clause() -> impl Strategy<Value = Clause> {
        let bound = proptest::option::of(-1e6f64..1e6);
        prop_oneof![
            (0..7usize).prop_map(|i| Clause {
                field: Field::ALL[i],
                constraint: Constraint::Present
            }),
            (0..3usize, "[A-Za-z0-9_.-]{1,8}").prop_filter_map("no ranges in text", |(i, v)| {
                (!v.contains("..")).then(|| Clause {
                    field: Field::ALL[i],
                    constraint: Constraint::Exact(v),
                })
            }),
            (3..7usize, bound.clone(), bound).prop_filter_map("non-empty range", |(i, lo, hi)| {
                let ok = match (lo, hi) {
                    (None, None) => false,
                    (Some(l), Some(h)) => l <= h,
                    _ => true,
                };
                ok.then(|| Clause {
                    field: Field::ALL[i],
                    constraint: Constraint::Range { lo, hi },
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn display_round_trips(clauses in proptest::collection::vec(arb_clause(), 0..5)) {
            let q = FilterQuery { clauses };
            prop_assert_eq!(FilterQuery::parse(&q.to_string()).unwrap(), q);
        }
    }
}
