//! Request handling independent of the HTTP server: query parsing, HTML
//! and JSON rendering of snapshots, and the `/apinfo` document.

use std::fmt::Write as _;

use chrono::{TimeZone, Utc};
use serde_json::{json, Map, Value};

use super::filter::{Field, FieldKind, FilterError, FilterQuery};
use super::{JobView, StateSnapshot, TaskView};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Html,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Jobs,
    Tasks,
    Failures,
    ApInfo,
}

impl Endpoint {
    pub const ALL: [Endpoint; 4] = [
        Endpoint::Jobs,
        Endpoint::Tasks,
        Endpoint::Failures,
        Endpoint::ApInfo,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Endpoint::Jobs => "/jobs",
            Endpoint::Tasks => "/tasks",
            Endpoint::Failures => "/failures",
            Endpoint::ApInfo => "/apinfo",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Endpoint::Jobs => "all executing and scheduled jobs",
            Endpoint::Tasks => "hierarchies of the executing and scheduled tasks",
            Endpoint::Failures => {
                "hierarchies of the failed tasks with their jobs, and failed standalone jobs"
            }
            Endpoint::ApInfo => "this description",
        }
    }

    pub fn from_path(path: &str) -> Option<Endpoint> {
        let path = path.trim_end_matches('/');
        let path = if path.is_empty() { "/jobs" } else { path };
        Endpoint::ALL.into_iter().find(|e| e.path() == path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("bad parameter '{name}={value}': {reason}")]
    Param {
        name: String,
        value: String,
        reason: String,
    },
}

/// Parsed request parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewQuery {
    pub filter: FilterQuery,
    pub format: Format,
    pub cols: Vec<Field>,
    pub refresh: Option<u32>,
}

impl Default for ViewQuery {
    fn default() -> Self {
        ViewQuery {
            filter: FilterQuery::default(),
            format: Format::Html,
            cols: Field::ALL.to_vec(),
            refresh: None,
        }
    }
}

impl ViewQuery {
    /// Parses a raw (percent-encoded) query string.
    pub fn parse(raw: &str) -> Result<Self, QueryError> {
        let mut q = ViewQuery::default();
        for (name, value) in form_urlencoded::parse(raw.as_bytes()) {
            let bad = |reason: &str| QueryError::Param {
                name: name.to_string(),
                value: value.to_string(),
                reason: reason.to_string(),
            };
            match name.as_ref() {
                "flt" => q.filter = FilterQuery::parse(&value)?,
                "fmt" => {
                    q.format = match value.as_ref() {
                        "html" => Format::Html,
                        "json" => Format::Json,
                        _ => return Err(bad("expected html or json")),
                    }
                }
                "cols" => {
                    let mut cols = Vec::new();
                    for c in value.split(',').filter(|c| !c.is_empty()) {
                        let f: Field = c.parse().map_err(|e: String| bad(&e))?;
                        if !cols.contains(&f) {
                            cols.push(f);
                        }
                    }
                    if cols.is_empty() {
                        return Err(bad("no columns"));
                    }
                    q.cols = cols;
                }
                "refresh" => {
                    let secs: u32 = value.parse().map_err(|_| bad("expected whole seconds"))?;
                    q.refresh = (secs > 0).then_some(secs);
                }
                _ => return Err(bad("unknown parameter")),
            }
        }
        Ok(q)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

const HTML: &str = "text/html; charset=utf-8";
const JSON: &str = "application/json";
const TEXT: &str = "text/plain; charset=utf-8";

/// Answers one GET request against `snap`.
pub fn respond(snap: &StateSnapshot, path: &str, query: Option<&str>) -> Response {
    let Some(endpoint) = Endpoint::from_path(path) else {
        return Response {
            status: 404,
            content_type: TEXT,
            body: format!("not found: {path}\n"),
        };
    };
    let q = match ViewQuery::parse(query.unwrap_or("")) {
        Ok(q) => q,
        Err(e) => {
            return Response {
                status: 400,
                content_type: TEXT,
                body: format!("{e}\n"),
            }
        }
    };
    let (content_type, body) = match (endpoint, q.format) {
        (Endpoint::ApInfo, Format::Html) => (HTML, apinfo_html()),
        (Endpoint::ApInfo, Format::Json) => (JSON, apinfo_json().to_string()),
        (_, Format::Html) => (HTML, render_html(snap, endpoint, &q)),
        (_, Format::Json) => (JSON, render_json(snap, endpoint, &q).to_string()),
    };
    Response {
        status: 200,
        content_type,
        body,
    }
}

/// Display text of one cell; `None` renders as an empty cell.
pub fn cell_text(field: Field, job: &JobView) -> Option<String> {
    match field {
        Field::Name | Field::Task | Field::State => field.text(job),
        Field::Tstart => job.tstart.map(|t| {
            let secs = t.floor();
            let nanos = ((t - secs) * 1e9) as u32;
            match Utc
                .timestamp_opt(secs as i64, nanos.min(999_999_999))
                .single()
            {
                Some(dt) => dt.format("%Y-%m-%d %H:%M:%S%.3f").to_string(),
                None => format!("{t}"),
            }
        }),
        Field::Duration => job.duration.map(|d| format!("{d:.3}")),
        Field::Rss => job.rss.map(|r| format!("{r:.1}")),
        Field::Attempts => Some(job.attempts.to_string()),
    }
}

fn json_cell(field: Field, job: &JobView) -> Value {
    match field {
        Field::Name => json!(job.name),
        Field::Task => json!(job.task),
        Field::State => json!(job.state),
        Field::Tstart => json!(job.tstart),
        Field::Duration => json!(job.duration),
        Field::Rss => json!(job.rss),
        Field::Attempts => json!(job.attempts),
    }
}

fn job_json(job: &JobView, cols: &[Field]) -> Value {
    let mut m = Map::new();
    for &c in cols {
        m.insert(c.name().to_string(), json_cell(c, job));
    }
    Value::Object(m)
}

/// Applies the filter to a task forest: jobs are filtered, and a task is
/// kept when its own jobs or a descendant still match.
pub fn filter_tasks(tasks: &[TaskView], filter: &FilterQuery) -> Vec<TaskView> {
    tasks
        .iter()
        .filter_map(|t| {
            let jobs: Vec<JobView> = t
                .jobs
                .iter()
                .filter(|j| filter.matches(j))
                .cloned()
                .collect();
            let children = filter_tasks(&t.children, filter);
            (filter.is_empty() || !jobs.is_empty() || !children.is_empty()).then(|| TaskView {
                name: t.name.clone(),
                state: t.state.clone(),
                jobs,
                children,
            })
        })
        .collect()
}

fn task_json(task: &TaskView, cols: &[Field]) -> Value {
    json!({
        "name": task.name,
        "state": task.state,
        "jobs": task.jobs.iter().map(|j| job_json(j, cols)).collect::<Vec<_>>(),
        "children": task.children.iter().map(|t| task_json(t, cols)).collect::<Vec<_>>(),
    })
}

pub fn render_json(snap: &StateSnapshot, endpoint: Endpoint, q: &ViewQuery) -> Value {
    match endpoint {
        Endpoint::Jobs => Value::Array(
            q.filter
                .apply(&snap.jobs)
                .into_iter()
                .map(|j| job_json(j, &q.cols))
                .collect(),
        ),
        Endpoint::Tasks => Value::Array(
            filter_tasks(&snap.tasks, &q.filter)
                .iter()
                .map(|t| task_json(t, &q.cols))
                .collect(),
        ),
        Endpoint::Failures => json!({
            "tasks": filter_tasks(&snap.failures, &q.filter).iter().map(|t| task_json(t, &q.cols)).collect::<Vec<_>>(),
            "jobs": q.filter.apply(&snap.failed_jobs).into_iter().map(|j| job_json(j, &q.cols)).collect::<Vec<_>>(),
        }),
        Endpoint::ApInfo => apinfo_json(),
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;margin:1em}\
table{border-collapse:collapse;margin:.5em 0}\
th,td{border:1px solid #999;padding:2px 6px;text-align:left}\
th{background:#eee}.task{margin-left:1.5em}nav a{margin-right:1em}";

fn page_head(out: &mut String, title: &str, refresh: Option<u32>) {
    out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
    if let Some(secs) = refresh {
        let _ = write!(out, "<meta http-equiv=\"refresh\" content=\"{secs}\">");
    }
    let _ = write!(
        out,
        "<title>clusterbench: {}</title><style>{STYLE}</style></head>\n<body>\n<nav>",
        escape(title)
    );
    for e in Endpoint::ALL {
        let _ = write!(out, "<a href=\"{0}\">{0}</a>", e.path());
    }
    let _ = writeln!(out, "</nav>\n<h1>{}</h1>", escape(title));
}

fn summary_html(out: &mut String, snap: &StateSnapshot) {
    let s = &snap.system;
    let cap = s.worker_cap.map_or("-".to_string(), |c| c.to_string());
    let rows = [
        (
            "time",
            snap.timestamp.format("%Y-%m-%d %H:%M:%S UTC").to_string(),
        ),
        (
            "ram used / total, MiB",
            format!("{:.1} / {:.1}", s.ram_used_mib, s.ram_total_mib),
        ),
        (
            "load average",
            format!(
                "{:.2} {:.2} {:.2}",
                s.load_avg[0], s.load_avg[1], s.load_avg[2]
            ),
        ),
        ("running", s.running.to_string()),
        ("pending", s.pending.to_string()),
        ("postponed", s.postponed.to_string()),
        ("done", s.done.to_string()),
        ("failed", s.failed.to_string()),
        ("worker cap", cap),
    ];
    out.push_str("<table class=\"summary\">\n");
    for (k, v) in rows {
        let _ = writeln!(out, "<tr><th>{k}</th><td>{}</td></tr>", escape(&v));
    }
    out.push_str("</table>\n");
}

fn jobs_table(out: &mut String, jobs: &[&JobView], cols: &[Field]) {
    out.push_str("<table class=\"jobs\">\n<thead><tr>");
    for c in cols {
        let _ = write!(out, "<th>{}</th>", c.name());
    }
    out.push_str("</tr></thead>\n<tbody>\n");
    for j in jobs {
        out.push_str("<tr>");
        for &c in cols {
            let _ = write!(
                out,
                "<td>{}</td>",
                escape(&cell_text(c, j).unwrap_or_default())
            );
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</tbody></table>\n");
}

fn task_html(out: &mut String, task: &TaskView, cols: &[Field]) {
    let _ = writeln!(
        out,
        "<div class=\"task\"><h3>{} <small>{}</small></h3>",
        escape(&task.name),
        escape(&task.state)
    );
    if !task.jobs.is_empty() {
        jobs_table(out, &task.jobs.iter().collect::<Vec<_>>(), cols);
    }
    for c in &task.children {
        task_html(out, c, cols);
    }
    out.push_str("</div>\n");
}

pub fn render_html(snap: &StateSnapshot, endpoint: Endpoint, q: &ViewQuery) -> String {
    let title = match endpoint {
        Endpoint::Jobs => "Jobs",
        Endpoint::Tasks => "Tasks",
        Endpoint::Failures => "Failures",
        Endpoint::ApInfo => return apinfo_html(),
    };
    let mut out = String::new();
    page_head(&mut out, title, q.refresh);
    summary_html(&mut out, snap);
    if !q.filter.is_empty() {
        let _ = writeln!(
            out,
            "<p>filter: <code>{}</code></p>",
            escape(&q.filter.to_string())
        );
    }
    match endpoint {
        Endpoint::Jobs => jobs_table(&mut out, &q.filter.apply(&snap.jobs), &q.cols),
        Endpoint::Tasks => {
            for t in filter_tasks(&snap.tasks, &q.filter) {
                task_html(&mut out, &t, &q.cols);
            }
        }
        _ => {
            for t in filter_tasks(&snap.failures, &q.filter) {
                task_html(&mut out, &t, &q.cols);
            }
            out.push_str("<h2>Failed jobs</h2>\n");
            jobs_table(&mut out, &q.filter.apply(&snap.failed_jobs), &q.cols);
        }
    }
    out.push_str("</body></html>\n");
    out
}

pub const GRAMMAR: &str = "flt=<clause>[,<clause>...]; clause = <field> | <field>:<value> | <field>:<lo>..<hi> | <field>:<lo>.. | <field>:..<hi>; ranges are inclusive and apply to numeric fields only; clauses are combined with AND";

pub const EXAMPLES: [&str; 4] = [
    "/jobs?flt=tstart",
    "/jobs?fmt=json",
    "/jobs?flt=rss:100..500,state:Running",
    "/tasks?flt=attempts:2..&cols=name,state,attempts&refresh=5",
];

pub fn apinfo_json() -> Value {
    json!({
        "endpoints": Endpoint::ALL.iter().map(|e| json!({"path": e.path(), "description": e.describe()})).collect::<Vec<_>>(),
        "parameters": {
            "flt": "filter query, see grammar",
            "fmt": "html (default) or json",
            "cols": "comma-separated subset of the fields to show",
            "refresh": "seconds between automatic page reloads (html)",
        },
        "fields": Field::ALL.iter().map(|f| json!({
            "name": f.name(),
            "type": match f.kind() { FieldKind::Text => "string", FieldKind::Number => "number" },
            "description": f.describe(),
        })).collect::<Vec<_>>(),
        "grammar": GRAMMAR,
        "examples": EXAMPLES,
    })
}

pub fn apinfo_html() -> String {
    let mut out = String::new();
    page_head(&mut out, "API", None);
    out.push_str("<h2>Endpoints</h2>\n<table><thead><tr><th>path</th><th>description</th></tr></thead><tbody>\n");
    for e in Endpoint::ALL {
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td></tr>",
            e.path(),
            escape(e.describe())
        );
    }
    out.push_str("</tbody></table>\n<h2>Parameters</h2>\n<table><tbody>\n");
    for (k, v) in [
        ("flt", "filter query, see grammar"),
        ("fmt", "html (default) or json"),
        ("cols", "comma-separated subset of the fields to show"),
        ("refresh", "seconds between automatic page reloads"),
    ] {
        let _ = writeln!(out, "<tr><td>{k}</td><td>{v}</td></tr>");
    }
    out.push_str("</tbody></table>\n<h2>Fields</h2>\n<table><thead><tr><th>name</th><th>type</th><th>description</th></tr></thead><tbody>\n");
    for f in Field::ALL {
        let kind = match f.kind() {
            FieldKind::Text => "string",
            FieldKind::Number => "number",
        };
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{kind}</td><td>{}</td></tr>",
            f.name(),
            escape(f.describe())
        );
    }
    let _ = writeln!(
        out,
        "</tbody></table>\n<h2>Grammar</h2>\n<p><code>{}</code></p>\n<h2>Examples</h2>\n<ul>",
        escape(GRAMMAR)
    );
    for ex in EXAMPLES {
        let _ = writeln!(out, "<li><a href=\"{0}\">{0}</a></li>", escape(ex));
    }
    out.push_str("</ul>\n</body></html>\n");
    out
}
