//! Task domain: predicates, symbolic states, actions.
//!
//! A domain declares the vocabulary the estimator works over. Predicates are
//! binary properties of objects tied to one sensor modality. Symbolic states
//! fix the truth value of a subset of the predicates (a partial assignment);
//! predicates a state leaves open are masked out of classifier training and
//! loss terms. Actions carry the impedance-controller profile the simulator
//! executes.
//!
//! Domains are written in a line-oriented DSL (`.domain` files), one
//! declaration per line:
//!
//! ```text
//! # comment
//! predicate <id> modality=<motion-force|visual> args=<a,b,...>
//! state <id> { <pred-id>=<true|false>, ... }
//! action <id> kp=<x,y,z> kd=<x,y,z> ref=<hold|descend|lissajous|push> ff=<fx,fy,fz> max_t=<seconds>
//! ```
//!
//! The built-in insertion domain ([`insertion_domain_text`]) declares the 9
//! predicates and 6 states (FREE, ONSURFACE, SEARCHING, ALIGNED, INSERTED,
//! FALLEN) used by the shipped simulator tasks. The exact predicate-per-state
//! truth assignment is a reconstruction documented in the domain file itself;
//! it is data, not code, and can be edited without touching the estimator.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Sensor modality a predicate classifier reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    MotionForce,
    Visual,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::MotionForce => "motion-force",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A binary property of objects, classified by one virtual sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub id: String,
    pub modality: Modality,
    pub args: Vec<String>,
}

/// A symbolic state: a partial truth assignment over the domain predicates.
///
/// `determined` holds `(predicate-id, value)` pairs in declaration order;
/// predicates absent from it are left open by this state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicState {
    pub id: String,
    pub determined: Vec<(String, bool)>,
}

impl SymbolicState {
    /// Truth value this state fixes for `predicate_id`, if any.
    pub fn truth(&self, predicate_id: &str) -> Option<bool> {
        self.determined
            .iter()
            .find(|(p, _)| p == predicate_id)
            .map(|(_, v)| *v)
    }
}

/// Reference-trajectory generator an action's controller follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefTrajectory {
    /// Hold a fixed target pose.
    Hold,
    /// Move straight down toward the surface.
    Descend,
    /// Planar Lissajous sweep around the search center, pressing down.
    Lissajous,
    /// Press straight down from the current lateral position.
    Push,
}

impl RefTrajectory {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefTrajectory::Hold => "hold",
            RefTrajectory::Descend => "descend",
            RefTrajectory::Lissajous => "lissajous",
            RefTrajectory::Push => "push",
        }
    }
}

/// An action with its impedance-controller profile.
///
/// The controller applies `-kp*(x - x_d) - kd*(v - v_d) - ff` per axis, so a
/// positive `ff` z component pushes the end effector down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub id: String,
    /// Stiffness gains per axis, N/m. Strictly positive.
    pub kp: [f64; 3],
    /// Damping gains per axis, N·s/m. Strictly positive.
    pub kd: [f64; 3],
    pub reference: RefTrajectory,
    /// Feed-forward wrench, N.
    pub feedforward: [f64; 3],
    /// Maximum duration before the open-loop schedule moves on, seconds.
    pub max_duration: f64,
}

/// A parsed and validated domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub predicates: Vec<Predicate>,
    pub states: Vec<SymbolicState>,
    pub actions: Vec<Action>,
}

impl DomainSpec {
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn predicate_index(&self, id: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p.id == id)
    }

    pub fn state_index(&self, id: &str) -> Option<usize> {
        self.states.iter().position(|s| s.id == id)
    }

    pub fn action_index(&self, id: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.id == id)
    }

    pub fn state(&self, id: &str) -> Option<&SymbolicState> {
        self.states.iter().find(|s| s.id == id)
    }

    pub fn action(&self, id: &str) -> Option<&Action> {
        self.actions.iter().find(|a| a.id == id)
    }
}

/// Parse failure, with 1-based line and column of the offending token.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: duplicate {kind} id `{id}`")]
    DuplicateId {
        line: usize,
        col: usize,
        kind: &'static str,
        id: String,
    },
    #[error("{line}:{col}: state `{state}` references undeclared predicate `{predicate}`")]
    UnknownPredicate {
        line: usize,
        col: usize,
        state: String,
        predicate: String,
    },
    #[error("domain failed validation:\n{0}")]
    Invalid(ValidationReport),
}

/// One problem found by [`validate_domain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValidationIssue {
    DuplicatePredicate { id: String },
    DuplicateState { id: String },
    DuplicateAction { id: String },
    UnknownPredicateInState { state: String, predicate: String },
    NonPositiveGain { action: String, field: String },
    NonPositiveDuration { action: String },
    PredicateArityTooHigh { predicate: String, arity: usize },
    EmptyPredicates,
    EmptyStates,
    EmptyActions,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::DuplicatePredicate { id } => write!(f, "duplicate predicate `{id}`"),
            ValidationIssue::DuplicateState { id } => write!(f, "duplicate state `{id}`"),
            ValidationIssue::DuplicateAction { id } => write!(f, "duplicate action `{id}`"),
            ValidationIssue::UnknownPredicateInState { state, predicate } => {
                write!(f, "state `{state}` references undeclared predicate `{predicate}`")
            }
            ValidationIssue::NonPositiveGain { action, field } => {
                write!(f, "action `{action}` has a non-positive {field} gain")
            }
            ValidationIssue::NonPositiveDuration { action } => {
                write!(f, "action `{action}` has a non-positive max duration")
            }
            ValidationIssue::PredicateArityTooHigh { predicate, arity } => {
                write!(f, "predicate `{predicate}` has arity {arity} (max 2)")
            }
            ValidationIssue::EmptyPredicates => write!(f, "domain declares no predicates"),
            ValidationIssue::EmptyStates => write!(f, "domain declares no states"),
            ValidationIssue::EmptyActions => write!(f, "domain declares no actions"),
        }
    }
}

/// Output of [`validate_domain`]; empty means the domain is well formed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "- {issue}")?;
        }
        Ok(())
    }
}

/// Check all structural invariants of a domain.
///
/// Returns an empty report iff ids are unique, every state references only
/// declared predicates, gains and durations are positive and the three
/// declaration sections are non-empty.
pub fn validate_domain(spec: &DomainSpec) -> ValidationReport {
    let mut issues = Vec::new();

    if spec.predicates.is_empty() {
        issues.push(ValidationIssue::EmptyPredicates);
    }
    if spec.states.is_empty() {
        issues.push(ValidationIssue::EmptyStates);
    }
    if spec.actions.is_empty() {
        issues.push(ValidationIssue::EmptyActions);
    }

    for (i, p) in spec.predicates.iter().enumerate() {
        if spec.predicates[..i].iter().any(|q| q.id == p.id) {
            issues.push(ValidationIssue::DuplicatePredicate { id: p.id.clone() });
        }
        if p.args.len() > 2 {
            issues.push(ValidationIssue::PredicateArityTooHigh {
                predicate: p.id.clone(),
                arity: p.args.len(),
            });
        }
    }
    for (i, s) in spec.states.iter().enumerate() {
        if spec.states[..i].iter().any(|q| q.id == s.id) {
            issues.push(ValidationIssue::DuplicateState { id: s.id.clone() });
        }
        for (pid, _) in &s.determined {
            if spec.predicate_index(pid).is_none() {
                issues.push(ValidationIssue::UnknownPredicateInState {
                    state: s.id.clone(),
                    predicate: pid.clone(),
                });
            }
        }
    }
    for (i, a) in spec.actions.iter().enumerate() {
        if spec.actions[..i].iter().any(|q| q.id == a.id) {
            issues.push(ValidationIssue::DuplicateAction { id: a.id.clone() });
        }
        for (field, gains) in [("kp", &a.kp), ("kd", &a.kd)] {
            if gains.iter().any(|&g| g <= 0.0) {
                issues.push(ValidationIssue::NonPositiveGain {
                    action: a.id.clone(),
                    field: field.to_string(),
                });
            }
        }
        if a.max_duration <= 0.0 {
            issues.push(ValidationIssue::NonPositiveDuration { action: a.id.clone() });
        }
    }

    ValidationReport { issues }
}

/// Boolean mask over `spec.predicates`: entry `k` is true iff `state` fixes
/// the truth value of predicate `k`.
pub fn determined_mask(state: &SymbolicState, spec: &DomainSpec) -> Vec<bool> {
    spec.predicates
        .iter()
        .map(|p| state.truth(&p.id).is_some())
        .collect()
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Token<'a> {
    col: usize,
    text: &'a str,
}

/// Split a line into whitespace-separated tokens, treating `{`, `}` and `,`
/// as standalone tokens. Columns are 1-based character offsets.
fn tokenize(line: &str) -> Vec<Token<'_>> {
    let col_of = |byte: usize| line[..byte].chars().count() + 1;
    let mut tokens: Vec<Token<'_>> = Vec::new();
    let mut start: Option<usize> = None;

    for (i, c) in line.char_indices() {
        if c.is_whitespace() || c == '{' || c == '}' || c == ',' {
            if let Some(s) = start.take() {
                tokens.push(Token {
                    col: col_of(s),
                    text: &line[s..i],
                });
            }
            if !c.is_whitespace() {
                tokens.push(Token {
                    col: col_of(i),
                    text: &line[i..i + c.len_utf8()],
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start.take() {
        tokens.push(Token {
            col: col_of(s),
            text: &line[s..],
        });
    }
    tokens
}

struct LineParser<'a> {
    line_no: usize,
    tokens: Vec<Token<'a>>,
    pos: usize,
}

impl<'a> LineParser<'a> {
    fn syntax(&self, col: usize, msg: impl Into<String>) -> DomainError {
        DomainError::Syntax {
            line: self.line_no,
            col,
            msg: msg.into(),
        }
    }

    fn end_col(&self) -> usize {
        self.tokens
            .last()
            .map(|t| t.col + t.text.chars().count())
            .unwrap_or(1)
    }

    fn next(&mut self, what: &str) -> Result<&Token<'a>, DomainError> {
        match self.tokens.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(t)
            }
            None => Err(self.syntax(self.end_col(), format!("expected {what}"))),
        }
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos)
    }

    fn expect_done(&self) -> Result<(), DomainError> {
        match self.peek() {
            Some(t) => Err(self.syntax(
                t.col,
                format!("unexpected trailing token `{}`", t.text),
            )),
            None => Ok(()),
        }
    }

    /// Parse a `key=value` token, enforcing the expected key.
    fn key_value(&mut self, key: &str) -> Result<(usize, &'a str), DomainError> {
        let line_no = self.line_no;
        let tok = self.next(&format!("`{key}=...`"))?;
        let (col, text) = (tok.col, tok.text);
        match text.split_once('=') {
            Some((k, v)) if k == key => Ok((col, v)),
            Some((k, _)) => Err(DomainError::Syntax {
                line: line_no,
                col,
                msg: format!("unknown key `{k}` (expected `{key}`)"),
            }),
            None => Err(DomainError::Syntax {
                line: line_no,
                col,
                msg: format!("expected `{key}=...`, found `{text}`"),
            }),
        }
    }
}

fn parse_f64(p: &LineParser, col: usize, s: &str) -> Result<f64, DomainError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| p.syntax(col, format!("expected a finite number, found `{s}`")))
}

fn parse_vec3(p: &LineParser, col: usize, s: &str) -> Result<[f64; 3], DomainError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(p.syntax(col, format!("expected three comma-separated numbers, found `{s}`")));
    }
    Ok([
        parse_f64(p, col, parts[0])?,
        parse_f64(p, col, parts[1])?,
        parse_f64(p, col, parts[2])?,
    ])
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Parse domain DSL source into a validated [`DomainSpec`].
///
/// Unknown declaration kinds and unknown keys are rejected. Duplicate ids and
/// references to undeclared predicates are reported with their location.
pub fn parse_domain(text: &str) -> Result<DomainSpec, DomainError> {
    let mut spec = DomainSpec {
        predicates: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
    };

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(h) => &raw_line[..h],
            None => raw_line,
        };
        let tokens = tokenize(line);
        if tokens.is_empty() {
            continue;
        }
        let mut p = LineParser {
            line_no,
            tokens,
            pos: 0,
        };
        let head = p.next("a declaration")?;
        let (head_col, head_text) = (head.col, head.text);
        match head_text {
            "predicate" => parse_predicate_line(&mut p, &mut spec)?,
            "state" => parse_state_line(&mut p, &mut spec)?,
            "action" => parse_action_line(&mut p, &mut spec)?,
            other => {
                return Err(p.syntax(
                    head_col,
                    format!("unknown declaration `{other}` (expected predicate, state or action)"),
                ))
            }
        }
    }

    let report = validate_domain(&spec);
    if report.is_empty() {
        Ok(spec)
    } else {
        Err(DomainError::Invalid(report))
    }
}

fn parse_id(p: &mut LineParser, what: &str) -> Result<(usize, String), DomainError> {
    let tok = p.next(what)?;
    let (col, text) = (tok.col, tok.text.to_string());
    if !valid_id(&text) {
        return Err(p.syntax(col, format!("invalid {what} `{text}`")));
    }
    Ok((col, text))
}

fn parse_predicate_line(p: &mut LineParser, spec: &mut DomainSpec) -> Result<(), DomainError> {
    let (id_col, id) = parse_id(p, "predicate id")?;
    if spec.predicate_index(&id).is_some() {
        return Err(DomainError::DuplicateId {
            line: p.line_no,
            col: id_col,
            kind: "predicate",
            id,
        });
    }
    let (mcol, mval) = p.key_value("modality")?;
    let modality = match mval {
        "motion-force" => Modality::MotionForce,
        "visual" => Modality::Visual,
        other => {
            return Err(p.syntax(
                mcol,
                format!("unknown modality `{other}` (expected motion-force or visual)"),
            ))
        }
    };
    let (acol, aval) = p.key_value("args")?;
    let args: Vec<String> = if aval.is_empty() {
        Vec::new()
    } else {
        aval.split(',').map(str::to_string).collect()
    };
    if args.iter().any(|a| !valid_id(a)) {
        return Err(p.syntax(acol, format!("invalid argument list `{aval}`")));
    }
    p.expect_done()?;
    spec.predicates.push(Predicate { id, modality, args });
    Ok(())
}

fn parse_state_line(p: &mut LineParser, spec: &mut DomainSpec) -> Result<(), DomainError> {
    let (id_col, id) = parse_id(p, "state id")?;
    if spec.state_index(&id).is_some() {
        return Err(DomainError::DuplicateId {
            line: p.line_no,
            col: id_col,
            kind: "state",
            id,
        });
    }
    let open = p.next("`{`")?;
    if open.text != "{" {
        let (col, text) = (open.col, open.text.to_string());
        return Err(p.syntax(col, format!("expected `{{`, found `{text}`")));
    }

    let mut determined: Vec<(String, bool)> = Vec::new();
    loop {
        let tok = p.next("`}` or a predicate assignment")?;
        let (col, text) = (tok.col, tok.text.to_string());
        if text == "}" {
            break;
        }
        let (pid, val) = text.split_once('=').ok_or_else(|| {
            p.syntax(col, format!("expected `<pred-id>=<true|false>`, found `{text}`"))
        })?;
        let value = match val {
            "true" => true,
            "false" => false,
            other => {
                return Err(p.syntax(col, format!("expected true or false, found `{other}`")))
            }
        };
        if spec.predicate_index(pid).is_none() {
            return Err(DomainError::UnknownPredicate {
                line: p.line_no,
                col,
                state: id,
                predicate: pid.to_string(),
            });
        }
        if determined.iter().any(|(q, _)| q == pid) {
            return Err(p.syntax(col, format!("predicate `{pid}` assigned twice")));
        }
        determined.push((pid.to_string(), value));

        // Optional comma between entries.
        if let Some(t) = p.peek() {
            if t.text == "," {
                p.pos += 1;
            }
        }
    }
    p.expect_done()?;
    spec.states.push(SymbolicState { id, determined });
    Ok(())
}

fn parse_action_line(p: &mut LineParser, spec: &mut DomainSpec) -> Result<(), DomainError> {
    let (id_col, id) = parse_id(p, "action id")?;
    if spec.action_index(&id).is_some() {
        return Err(DomainError::DuplicateId {
            line: p.line_no,
            col: id_col,
            kind: "action",
            id,
        });
    }
    let (kp_col, kp_val) = p.key_value("kp")?;
    let kp = parse_vec3(p, kp_col, kp_val)?;
    let (kd_col, kd_val) = p.key_value("kd")?;
    let kd = parse_vec3(p, kd_col, kd_val)?;
    let (rcol, rval) = p.key_value("ref")?;
    let reference = match rval {
        "hold" => RefTrajectory::Hold,
        "descend" => RefTrajectory::Descend,
        "lissajous" => RefTrajectory::Lissajous,
        "push" => RefTrajectory::Push,
        other => {
            return Err(p.syntax(
                rcol,
                format!("unknown reference `{other}` (expected hold, descend, lissajous or push)"),
            ))
        }
    };
    let (ff_col, ff_val) = p.key_value("ff")?;
    let feedforward = parse_vec3(p, ff_col, ff_val)?;
    let (t_col, t_val) = p.key_value("max_t")?;
    let max_duration = parse_f64(p, t_col, t_val)?;
    p.expect_done()?;
    spec.actions.push(Action {
        id,
        kp,
        kd,
        reference,
        feedforward,
        max_duration,
    });
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialization back to DSL text
// ---------------------------------------------------------------------------

fn fmt_num(v: f64) -> String {
    // Shortest round-trip formatting keeps serialize∘parse the identity.
    format!("{v}")
}

/// Render a domain back to DSL text. `parse_domain(serialize_domain(spec))`
/// is structurally equal to `spec`.
pub fn serialize_domain(spec: &DomainSpec) -> String {
    let mut out = String::new();
    for p in &spec.predicates {
        out.push_str(&format!(
            "predicate {} modality={} args={}\n",
            p.id,
            p.modality,
            p.args.join(",")
        ));
    }
    for s in &spec.states {
        let entries: Vec<String> = s
            .determined
            .iter()
            .map(|(p, v)| format!("{p}={v}"))
            .collect();
        if entries.is_empty() {
            out.push_str(&format!("state {} {{ }}\n", s.id));
        } else {
            out.push_str(&format!("state {} {{ {} }}\n", s.id, entries.join(", ")));
        }
    }
    for a in &spec.actions {
        out.push_str(&format!(
            "action {} kp={},{},{} kd={},{},{} ref={} ff={},{},{} max_t={}\n",
            a.id,
            fmt_num(a.kp[0]),
            fmt_num(a.kp[1]),
            fmt_num(a.kp[2]),
            fmt_num(a.kd[0]),
            fmt_num(a.kd[1]),
            fmt_num(a.kd[2]),
            a.reference.as_str(),
            fmt_num(a.feedforward[0]),
            fmt_num(a.feedforward[1]),
            fmt_num(a.feedforward[2]),
            fmt_num(a.max_duration),
        ));
    }
    out
}

/// Source text of the built-in insertion domain.
pub fn insertion_domain_text() -> &'static str {
    include_str!("../data/insertion.domain")
}

/// Parse the built-in insertion domain. Panics only if the shipped file is
/// corrupt, which the test suite guards against.
pub fn insertion_domain() -> DomainSpec {
    parse_domain(insertion_domain_text()).expect("built-in insertion domain must parse")
}

/// Canonical state names used by the insertion domain and the simulator.
pub mod states {
    pub const FREE: &str = "FREE";
    pub const ONSURFACE: &str = "ONSURFACE";
    pub const SEARCHING: &str = "SEARCHING";
    pub const ALIGNED: &str = "ALIGNED";
    pub const INSERTED: &str = "INSERTED";
    pub const FALLEN: &str = "FALLEN";
}

/// Canonical action names used by the insertion domain and the simulator.
pub mod actions {
    pub const PREPARE: &str = "Prepare";
    pub const MAKE_CONTACT: &str = "MakeContact";
    pub const SEARCH: &str = "Search";
    pub const INSERT: &str = "Insert";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_domain_parses_with_expected_counts() {
        let spec = insertion_domain();
        assert_eq!(spec.num_predicates(), 9);
        assert_eq!(spec.num_states(), 6);
        assert_eq!(spec.num_actions(), 4);
        let names: Vec<&str> = spec.predicates.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "motion-force-axis-aligned",
                "motion-force-dropping",
                "motion-force-fully-inserted",
                "motion-force-in-contact",
                "visual-above",
                "visual-below",
                "visual-fallen",
                "visual-fully-inserted",
                "visual-inserted",
            ]
        );
        let action_names: Vec<&str> = spec.actions.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(action_names, vec!["Prepare", "MakeContact", "Search", "Insert"]);
        assert!(validate_domain(&spec).is_empty());
    }

    #[test]
    fn minimal_domain_parses() {
        let text = "predicate p modality=visual args=a\nstate S { p=true }\naction A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        let spec = parse_domain(text).unwrap();
        assert_eq!(spec.num_predicates(), 1);
        assert_eq!(spec.num_states(), 1);
        assert_eq!(spec.num_actions(), 1);
        assert_eq!(spec.states[0].truth("p"), Some(true));
    }

    #[test]
    fn round_trip_is_identity() {
        let spec = insertion_domain();
        let reparsed = parse_domain(&serialize_domain(&spec)).unwrap();
        assert_eq!(spec, reparsed);
    }

    #[test]
    fn syntax_error_reports_line_and_column() {
        let err = parse_domain("predicate p modality=visual args=a\nbogus line here\n").unwrap_err();
        match err {
            DomainError::Syntax { line, col, .. } => {
                assert_eq!(line, 2);
                assert_eq!(col, 1);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_domain("predicate p modality=visual wrongkey=a\n").unwrap_err();
        assert!(matches!(err, DomainError::Syntax { .. }), "{err:?}");
    }

    #[test]
    fn duplicate_predicate_id_rejected() {
        let text = "predicate p modality=visual args=a\npredicate p modality=visual args=a\n";
        let err = parse_domain(text).unwrap_err();
        match err {
            DomainError::DuplicateId { line, kind, id, .. } => {
                assert_eq!(line, 2);
                assert_eq!(kind, "predicate");
                assert_eq!(id, "p");
            }
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn undeclared_predicate_in_state_rejected() {
        let text = "predicate p modality=visual args=a\nstate S { q=true }\naction A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        let err = parse_domain(text).unwrap_err();
        match err {
            DomainError::UnknownPredicate { state, predicate, .. } => {
                assert_eq!(state, "S");
                assert_eq!(predicate, "q");
            }
            other => panic!("expected unknown predicate, got {other:?}"),
        }
    }

    #[test]
    fn validate_flags_duplicate_action() {
        let mut spec = insertion_domain();
        let dup = spec.actions[0].clone();
        spec.actions.push(dup);
        let report = validate_domain(&spec);
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::DuplicateAction { id } if id == "Prepare")));
    }

    #[test]
    fn validate_flags_state_with_unknown_predicate() {
        let mut spec = insertion_domain();
        spec.states[0]
            .determined
            .push(("not-a-predicate".to_string(), true));
        let report = validate_domain(&spec);
        assert!(report.issues.iter().any(|i| matches!(
            i,
            ValidationIssue::UnknownPredicateInState { state, predicate }
                if state == "FREE" && predicate == "not-a-predicate"
        )));
    }

    #[test]
    fn mask_matches_determined_sets() {
        let spec = insertion_domain();

        let free = spec.state(states::FREE).unwrap();
        let mask = determined_mask(free, &spec);
        assert_eq!(mask.len(), 9);
        assert!(mask.iter().all(|&m| m), "FREE determines all predicates");

        let aligned = spec.state(states::ALIGNED).unwrap();
        let mask = determined_mask(aligned, &spec);
        let popcount = mask.iter().filter(|&&m| m).count();
        assert_eq!(popcount, aligned.determined.len());
        assert!(popcount < 9, "ALIGNED leaves some predicates open");
    }

    #[test]
    fn mask_of_empty_state_is_all_false() {
        let text = "predicate p modality=visual args=a\nstate S { }\naction A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        let spec = parse_domain(text).unwrap();
        assert_eq!(determined_mask(&spec.states[0], &spec), vec![false]);
    }

    #[test]
    fn mask_of_two_predicate_state_in_nine_predicate_domain() {
        // An INSERTED-like state fixing {inside=true, above=false} out of 9.
        let mut text = String::new();
        for i in 0..9 {
            text.push_str(&format!("predicate p{i} modality=visual args=a\n"));
        }
        text.push_str("state INS { p0=true, p1=false }\n");
        text.push_str("action A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n");
        let spec = parse_domain(&text).unwrap();
        let mask = determined_mask(&spec.states[0], &spec);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(&mask[..2], &[true, true]);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# header\n\npredicate p modality=visual args=a # trailing\nstate S { p=true }\naction A kp=1,1,1 kd=1,1,1 ref=hold ff=0,0,0 max_t=1\n";
        assert!(parse_domain(text).is_ok());
    }
}
