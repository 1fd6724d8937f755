//! Grid case description, the text case-file format and the bus admittance matrix.
//!
//! A case file looks like
//!
//! ```text
//! case case5 base_mva 100
//! bus
//! bus 1 slack pmin 0 pmax 2 qmin -1 qmax 1 vmin 0.9 vmax 1.1 pload 0 qload 0 vset 1 gsh 0 bsh 0
//! bus 2 pq pmin -1 pmax -0.8 qmin -0.3 qmax -0.24 vmin 0.9 vmax 1.1 pload 1 qload 0.3 vset 1 gsh 0 bsh 0
//! branch
//! branch 1 2 g 0 b 10 smax 4
//! ```
//!
//! Branches may give either the admittance-matrix entries (`g`, `b`) directly or the
//! series impedance (`r`, `x`), which is converted on parse. `gsh`/`bsh` are optional and
//! default to zero. The header may carry an optional `flow pi|transfer` token selecting
//! the branch-flow expression (see [`FlowModel`]).

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use thiserror::Error;

/// Lower end of the demand sampling range as a fraction of nominal load. The upper
/// end is nominal.
pub const DEMAND_FLOOR: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid case: {0}")]
    Semantic(String),
}

fn syntax(line: usize, msg: impl Into<String>) -> CaseError {
    CaseError::Syntax {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl BusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::Pv => "pv",
            BusKind::Pq => "pq",
        }
    }
}

impl FromStr for BusKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slack" => Ok(BusKind::Slack),
            "pv" => Ok(BusKind::Pv),
            "pq" => Ok(BusKind::Pq),
            other => Err(format!("unknown bus kind `{other}`")),
        }
    }
}

/// Branch-flow expression used by every physics routine.
///
/// `Pi` is the series-admittance branch model: the sending-end flow carries the
/// `v_i^2` self term, so a branch between equal voltages carries no power.
/// `Transfer` keeps only the `v_i v_j` transfer term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowModel {
    #[default]
    Pi,
    Transfer,
}

impl FlowModel {
    /// Weight of the `v_i^2` self term in the sending-end flow.
    pub fn self_term(self) -> f64 {
        match self {
            FlowModel::Pi => 1.0,
            FlowModel::Transfer => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlowModel::Pi => "pi",
            FlowModel::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// 1-based label; equals the position in [`GridCase::buses`] plus one.
    pub index: usize,
    pub kind: BusKind,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub p_load_nom: f64,
    pub q_load_nom: f64,
    pub v_setpoint: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
}

/// A branch between two buses. `from_bus`/`to_bus` are 0-based positions.
///
/// `g` and `b` are the off-diagonal admittance-matrix entries the branch contributes,
/// i.e. the negated series admittance.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub g: f64,
    pub b: f64,
    pub s_max: f64,
}

impl Branch {
    /// Builds a branch from its series impedance `r + jx`.
    pub fn from_impedance(from_bus: usize, to_bus: usize, r: f64, x: f64, s_max: f64) -> Self {
        let y = -Complex64::new(r, x).inv();
        Branch {
            from_bus,
            to_bus,
            g: y.re,
            b: y.im,
            s_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    /// 0-based position of the slack bus.
    pub slack_bus: usize,
    pub flow_model: FlowModel,
}

/// Dense bus admittance matrix `Y = G + jB`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub g: Array2<f64>,
    pub b: Array2<f64>,
}

impl GridCase {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    /// True when any bus carries a nonzero shunt.
    pub fn has_shunts(&self) -> bool {
        self.buses
            .iter()
            .any(|b| b.shunt_g != 0.0 || b.shunt_b != 0.0)
    }

    pub fn buses_of(&self, kind: BusKind) -> impl Iterator<Item = usize> + '_ {
        self.buses
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.kind == kind)
            .map(|(i, _)| i)
    }

    /// Checks every structural invariant. Called by the parser; useful for
    /// programmatically built cases too.
    pub fn validate(&self) -> Result<(), CaseError> {
        let sem = |m: String| Err(CaseError::Semantic(m));
        if !(self.base_mva > 0.0) {
            return sem(format!("base_mva must be positive, got {}", self.base_mva));
        }
        if self.buses.is_empty() {
            return sem("case has no buses".into());
        }
        for (pos, bus) in self.buses.iter().enumerate() {
            if bus.index != pos + 1 {
                return sem(format!(
                    "bus indices must be dense 1..{}; found {} at position {}",
                    self.buses.len(),
                    bus.index,
                    pos + 1
                ));
            }
            if !(bus.p_min <= bus.p_max) {
                return sem(format!("bus {}: pmin > pmax", bus.index));
            }
            if !(bus.q_min <= bus.q_max) {
                return sem(format!("bus {}: qmin > qmax", bus.index));
            }
            if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
                return sem(format!("bus {}: need 0 < vmin <= vmax", bus.index));
            }
        }
        let slacks: Vec<usize> = self.buses_of(BusKind::Slack).collect();
        if slacks.len() != 1 {
            return sem(format!("expected exactly one slack bus, found {}", slacks.len()));
        }
        if slacks[0] != self.slack_bus {
            return sem("slack_bus does not point at the slack bus".into());
        }
        for (l, br) in self.branches.iter().enumerate() {
            let n = self.buses.len();
            if br.from_bus >= n || br.to_bus >= n {
                return sem(format!("branch {}: endpoint out of range", l + 1));
            }
            if br.from_bus == br.to_bus {
                return sem(format!("branch {}: from and to bus are equal", l + 1));
            }
            if !(br.s_max > 0.0) {
                return sem(format!("branch {}: smax must be positive", l + 1));
            }
            if !br.g.is_finite() || !br.b.is_finite() {
                return sem(format!("branch {}: non-finite admittance", l + 1));
            }
        }
        Ok(())
    }

    /// Serializes to the case-file format. Floats use the shortest text that
    /// parses back to the same value.
    pub fn to_case_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "case {} base_mva {}", self.name, self.base_mva);
        if self.flow_model != FlowModel::Pi {
            let _ = write!(out, " flow {}", self.flow_model.as_str());
        }
        out.push_str("\n\nbus\n");
        for b in &self.buses {
            let _ = writeln!(
                out,
                "bus {} {} pmin {} pmax {} qmin {} qmax {} vmin {} vmax {} pload {} qload {} vset {} gsh {} bsh {}",
                b.index,
                b.kind.as_str(),
                b.p_min,
                b.p_max,
                b.q_min,
                b.q_max,
                b.v_min,
                b.v_max,
                b.p_load_nom,
                b.q_load_nom,
                b.v_setpoint,
                b.shunt_g,
                b.shunt_b
            );
        }
        out.push_str("\nbranch\n");
        for br in &self.branches {
            let _ = writeln!(
                out,
                "branch {} {} g {} b {} smax {}",
                br.from_bus + 1,
                br.to_bus + 1,
                br.g,
                br.b,
                br.s_max
            );
        }
        out
    }
}

#[derive(PartialEq)]
enum Section {
    Header,
    Bus,
    Branch,
}

fn parse_f64(tok: &str, line: usize, key: &str) -> Result<f64, CaseError> {
    tok.parse::<f64>()
        .map_err(|_| syntax(line, format!("field `{key}`: cannot parse `{tok}` as a number")))
}

/// Reads `key value` pairs following the positional tokens of a record.
fn key_values<'a>(toks: &[&'a str], line: usize) -> Result<Vec<(&'a str, &'a str)>, CaseError> {
    if toks.len() % 2 != 0 {
        return Err(syntax(line, "expected `key value` pairs"));
    }
    let mut pairs: Vec<(&str, &str)> = Vec::with_capacity(toks.len() / 2);
    for kv in toks.chunks(2) {
        if pairs.iter().any(|(k, _)| *k == kv[0]) {
            return Err(syntax(line, format!("field `{}` given twice", kv[0])));
        }
        pairs.push((kv[0], kv[1]));
    }
    Ok(pairs)
}

fn take(
    pairs: &[(&str, &str)],
    key: &str,
    line: usize,
    default: Option<f64>,
) -> Result<f64, CaseError> {
    match pairs.iter().find(|(k, _)| *k == key) {
        Some((_, v)) => parse_f64(v, line, key),
        None => default.ok_or_else(|| syntax(line, format!("missing field `{key}`"))),
    }
}

fn reject_unknown(pairs: &[(&str, &str)], allowed: &[&str], line: usize) -> Result<(), CaseError> {
    for (k, _) in pairs {
        if !allowed.contains(k) {
            return Err(syntax(line, format!("unknown field `{k}`")));
        }
    }
    Ok(())
}

const BUS_KEYS: [&str; 11] = [
    "pmin", "pmax", "qmin", "qmax", "vmin", "vmax", "pload", "qload", "vset", "gsh", "bsh",
];

/// Parses and validates a case file.
pub fn parse_case(text: &str) -> Result<GridCase, CaseError> {
    let mut name: Option<String> = None;
    let mut base_mva = 0.0;
    let mut flow_model = FlowModel::Pi;
    let mut buses: Vec<Bus> = Vec::new();
    // (line number, record) so duplicate/gap errors can point at a line
    let mut raw_branches: Vec<(usize, usize, usize, Branch)> = Vec::new();
    let mut section = Section::Header;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        match toks[0] {
            "case" => {
                if name.is_some() {
                    return Err(syntax(line, "duplicate `case` header"));
                }
                if toks.len() < 4 || toks[2] != "base_mva" {
                    return Err(syntax(line, "expected `case <name> base_mva <float>`"));
                }
                base_mva = parse_f64(toks[3], line, "base_mva")?;
                let opts = key_values(&toks[4..], line)?;
                reject_unknown(&opts, &["flow"], line)?;
                if let Some((_, v)) = opts.first() {
                    flow_model = match *v {
                        "pi" => FlowModel::Pi,
                        "transfer" => FlowModel::Transfer,
                        other => return Err(syntax(line, format!("unknown flow model `{other}`"))),
                    };
                }
                name = Some(toks[1].to_string());
            }
            "bus" if toks.len() == 1 => {
                if name.is_none() {
                    return Err(syntax(line, "`bus` section before `case` header"));
                }
                section = Section::Bus;
            }
            "branch" if toks.len() == 1 => {
                if name.is_none() {
                    return Err(syntax(line, "`branch` section before `case` header"));
                }
                section = Section::Branch;
            }
            "bus" => {
                if section != Section::Bus {
                    return Err(syntax(line, "bus record outside the `bus` section"));
                }
                if toks.len() < 3 {
                    return Err(syntax(line, "expected `bus <idx> <kind> ...`"));
                }
                let index: usize = toks[1]
                    .parse()
                    .map_err(|_| syntax(line, format!("bad bus index `{}`", toks[1])))?;
                let kind: BusKind = toks[2].parse().map_err(|e: String| syntax(line, e))?;
                let pairs = key_values(&toks[3..], line)?;
                reject_unknown(&pairs, &BUS_KEYS, line)?;
                if buses.iter().any(|b| b.index == index) {
                    return Err(CaseError::Semantic(format!("duplicate bus index {index}")));
                }
                buses.push(Bus {
                    index,
                    kind,
                    p_min: take(&pairs, "pmin", line, None)?,
                    p_max: take(&pairs, "pmax", line, None)?,
                    q_min: take(&pairs, "qmin", line, None)?,
                    q_max: take(&pairs, "qmax", line, None)?,
                    v_min: take(&pairs, "vmin", line, None)?,
                    v_max: take(&pairs, "vmax", line, None)?,
                    p_load_nom: take(&pairs, "pload", line, None)?,
                    q_load_nom: take(&pairs, "qload", line, None)?,
                    v_setpoint: take(&pairs, "vset", line, None)?,
                    shunt_g: take(&pairs, "gsh", line, Some(0.0))?,
                    shunt_b: take(&pairs, "bsh", line, Some(0.0))?,
                });
            }
            "branch" => {
                if section != Section::Branch {
                    return Err(syntax(line, "branch record outside the `branch` section"));
                }
                if toks.len() < 3 {
                    return Err(syntax(line, "expected `branch <from> <to> ...`"));
                }
                let from: usize = toks[1]
                    .parse()
                    .map_err(|_| syntax(line, format!("bad bus index `{}`", toks[1])))?;
                let to: usize = toks[2]
                    .parse()
                    .map_err(|_| syntax(line, format!("bad bus index `{}`", toks[2])))?;
                let pairs = key_values(&toks[3..], line)?;
                reject_unknown(&pairs, &["g", "b", "r", "x", "smax"], line)?;
                let s_max = take(&pairs, "smax", line, None)?;
                let has = |k: &str| pairs.iter().any(|(key, _)| *key == k);
                let branch = if has("r") || has("x") {
                    if has("g") || has("b") {
                        return Err(syntax(line, "give either `g b` or `r x`, not both"));
                    }
                    let r = take(&pairs, "r", line, None)?;
                    let x = take(&pairs, "x", line, None)?;
                    if r == 0.0 && x == 0.0 {
                        return Err(syntax(line, "zero series impedance"));
                    }
                    Branch::from_impedance(0, 0, r, x, s_max)
                } else {
                    Branch {
                        from_bus: 0,
                        to_bus: 0,
                        g: take(&pairs, "g", line, None)?,
                        b: take(&pairs, "b", line, None)?,
                        s_max,
                    }
                };
                raw_branches.push((line, from, to, branch));
            }
            other => return Err(syntax(line, format!("unexpected token `{other}`"))),
        }
    }

    let name = name.ok_or_else(|| syntax(1, "missing `case` header"))?;
    buses.sort_by_key(|b| b.index);
    let n = buses.len();
    let mut branches = Vec::with_capacity(raw_branches.len());
    for (line, from, to, mut br) in raw_branches {
        if from == 0 || to == 0 || from > n || to > n {
            return Err(CaseError::Semantic(format!(
                "branch on line {line} references a bus outside 1..{n}"
            )));
        }
        br.from_bus = from - 1;
        br.to_bus = to - 1;
        branches.push(br);
    }
    let slack_bus = buses
        .iter()
        .position(|b| b.kind == BusKind::Slack)
        .unwrap_or(0);
    let case = GridCase {
        name,
        base_mva,
        buses,
        branches,
        slack_bus,
        flow_model,
    };
    case.validate()?;
    Ok(case)
}

/// Assembles the dense bus admittance matrix. Each branch adds its `(g, b)` to the
/// two off-diagonal entries and subtracts it from both diagonals; bus shunts add to
/// the diagonal.
pub fn build_admittance(case: &GridCase) -> AdmittanceMatrix {
    let n = case.n_bus();
    let mut g = Array2::<f64>::zeros((n, n));
    let mut b = Array2::<f64>::zeros((n, n));
    for br in &case.branches {
        let (i, j) = (br.from_bus, br.to_bus);
        g[[i, j]] += br.g;
        g[[j, i]] += br.g;
        b[[i, j]] += br.b;
        b[[j, i]] += br.b;
        g[[i, i]] -= br.g;
        g[[j, j]] -= br.g;
        b[[i, i]] -= br.b;
        b[[j, j]] -= br.b;
    }
    for (i, bus) in case.buses.iter().enumerate() {
        g[[i, i]] += bus.shunt_g;
        b[[i, i]] += bus.shunt_b;
    }
    AdmittanceMatrix { g, b }
}
