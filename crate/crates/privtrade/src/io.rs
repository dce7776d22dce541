//! JSON file formats. Matrices are row-major arrays of arrays.

use std::path::Path;

use privtrade_core::altopt::AltOptTrace;
use privtrade_core::asup::{AsupConstruction, AsupVerdict};
use privtrade_core::crlb::{PriorCase, TradeoffReport};
use privtrade_core::{Mat, Sanitization, SystemModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dimension mismatch in `{field}`: {detail}")]
    Shape { field: String, detail: String },
    #[error(transparent)]
    Model(#[from] privtrade_core::Error),
}

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub agent_dims: Vec<usize>,
    #[serde(rename = "H")]
    pub h: Rows,
    #[serde(rename = "R")]
    pub r: Rows,
    #[serde(rename = "J0", default)]
    pub j0: Option<Rows>,
    #[serde(rename = "U")]
    pub u: Rows,
    #[serde(rename = "G")]
    pub g: Vec<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanitizationFile {
    #[serde(rename = "C")]
    pub c: Rows,
    #[serde(rename = "Theta")]
    pub theta: Rows,
}

pub fn to_rows(m: &Mat) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Rows must be equally long; an empty list is a `0 × cols` matrix.
pub fn from_rows(rows: &Rows, field: &str, cols_if_empty: usize) -> Result<Mat, IoError> {
    let cols = rows.first().map_or(cols_if_empty, Vec::len);
    if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(IoError::Shape { field: field.into(), detail: format!("row {k} has {} entries, expected {cols}", r.len()) });
    }
    Ok(Mat::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

impl ModelFile {
    pub fn from_model(m: &SystemModel) -> Self {
        Self {
            agent_dims: m.agent_dims().to_vec(),
            h: to_rows(m.h()),
            r: to_rows(m.r()),
            j0: m.j0().map(to_rows),
            u: to_rows(m.u()),
            g: m.g().iter().map(to_rows).collect(),
        }
    }

    pub fn into_model(self) -> Result<SystemModel, IoError> {
        let h = from_rows(&self.h, "H", 0)?;
        let l = h.ncols();
        let r = from_rows(&self.r, "R", 0)?;
        let j0 = self.j0.as_ref().map(|j| from_rows(j, "J0", l)).transpose()?;
        let u = from_rows(&self.u, "U", l)?;
        let g = self.g.iter().map(|g| from_rows(g, "G", l)).collect::<Result<_, _>>()?;
        Ok(SystemModel::new(h, r, j0, u, g, self.agent_dims)?)
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Read { path: path.display().to_string(), source })
}

pub fn parse_model(text: &str) -> Result<SystemModel, IoError> {
    serde_json::from_str::<ModelFile>(text)?.into_model()
}

pub fn load_model(path: &Path) -> Result<SystemModel, IoError> {
    parse_model(&read(path)?)
}

pub fn model_json(m: &SystemModel) -> Value {
    serde_json::to_value(ModelFile::from_model(m)).expect("plain data serializes")
}

pub fn sanitization_json(s: &Sanitization) -> Value {
    serde_json::to_value(SanitizationFile { c: to_rows(s.c()), theta: to_rows(s.theta()) }).expect("plain data serializes")
}

/// Loads a sanitization and checks its block structure against `agent_dims`.
pub fn parse_sanitization(text: &str, agent_dims: &[usize]) -> Result<Sanitization, IoError> {
    let f: SanitizationFile = serde_json::from_str(text)?;
    let n: usize = agent_dims.iter().sum();
    Ok(Sanitization::new(agent_dims, from_rows(&f.c, "C", n)?, from_rows(&f.theta, "Theta", n)?)?)
}

pub fn load_sanitization(path: &Path, agent_dims: &[usize]) -> Result<Sanitization, IoError> {
    parse_sanitization(&read(path)?, agent_dims)
}

/// Non-finite values (an unbounded `ε_max`, an unbounded bound) become `null`.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn case_name(c: PriorCase) -> &'static str {
    match c {
        PriorCase::NoPrior => "no-prior",
        PriorCase::WithPrior => "with-prior",
    }
}

pub fn report_json(r: &TradeoffReport) -> Value {
    json!({
        "utility": num(r.utility),
        "privacy": r.privacy.iter().map(|&p| num(p)).collect::<Vec<_>>(),
        "eps_max": r.eps_max.iter().map(|&p| num(p)).collect::<Vec<_>>(),
    })
}

pub fn verdict_json(v: &AsupVerdict) -> Value {
    json!({
        "achievable": v.achievable,
        "case": case_name(v.case),
        "agents": v.agents.iter().map(|a| json!({
            "agent": a.agent,
            "n_i": a.n_i,
            "xi_rank": a.xi_rank,
            "residual": a.residual.map(num),
            "residual_tol": a.residual_tol.map(num),
        })).collect::<Vec<_>>(),
        "private": v.private.iter().map(|p| json!({"private": p.private, "witnesses": p.witnesses})).collect::<Vec<_>>(),
    })
}

pub fn construction_json(c: &AsupConstruction, r: &TradeoffReport) -> Value {
    json!({
        "sanitization": sanitization_json(&c.sanitization),
        "report": report_json(r),
        "steps": c.steps.iter().map(|s| json!({
            "private": s.private,
            "agent": s.agent,
            "lambda": s.lambda,
            "direction": to_rows(&s.direction),
        })).collect::<Vec<_>>(),
    })
}

pub fn trace_json(t: &AltOptTrace) -> Value {
    json!({
        "sweeps": t.sweeps,
        "converged": t.converged,
        "records": t.records.iter().map(|r| json!({
            "iteration": r.iteration,
            "agent": r.agent,
            "utility": num(r.utility),
            "privacy": r.privacy.iter().map(|&p| num(p)).collect::<Vec<_>>(),
            "status": r.status.as_str(),
        })).collect::<Vec<_>>(),
    })
}

/// `indent = 0` gives compact output.
pub fn render(v: &Value, indent: usize) -> String {
    if indent == 0 {
        return v.to_string();
    }
    let pad = vec![b' '; indent];
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(&pad);
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    v.serialize(&mut ser).expect("in-memory write");
    String::from_utf8(out).expect("JSON is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"{"agent_dims":[1],"H":[[1]],"R":[[1]],"J0":null,"U":[[1]],"G":[[[1]]]}"#;

    #[test]
    fn scalar_model_loads() {
        let m = parse_model(SCALAR).unwrap();
        assert_eq!((m.n(), m.l(), m.agents()), (1, 1, 1));
        assert!(!m.has_prior());
    }

    #[test]
    fn bad_models_are_rejected() {
        let short = SCALAR.replace(r#""agent_dims":[1]"#, r#""agent_dims":[2]"#);
        assert!(matches!(parse_model(&short), Err(IoError::Model(privtrade_core::Error::DimensionMismatch { field, .. })) if field == "agent_dims"));
        let indefinite = r#"{"agent_dims":[2],"H":[[1],[1]],"R":[[1,2],[2,1]],"J0":null,"U":[[1]],"G":[[[1]]]}"#;
        assert!(matches!(parse_model(indefinite), Err(IoError::Model(privtrade_core::Error::InvariantViolation(_)))));
        let ragged = r#"{"agent_dims":[2],"H":[[1],[1, 2]],"R":[[1,0],[0,1]],"J0":null,"U":[[1]],"G":[[[1]]]}"#;
        assert!(matches!(parse_model(ragged), Err(IoError::Shape { .. })));
        assert!(matches!(parse_model("{"), Err(IoError::Parse(_))));
    }

    #[test]
    fn off_block_sanitization_rejected() {
        let text = r#"{"C":[[1,0],[0,1]],"Theta":[[1,1e-6],[1e-6,1]]}"#;
        assert!(parse_sanitization(text, &[1, 1]).is_err());
        assert!(parse_sanitization(text, &[2]).is_ok());
    }

    #[test]
    fn indentation() {
        let v = json!({"a": [1]});
        assert_eq!(render(&v, 0), r#"{"a":[1]}"#);
        assert_eq!(render(&v, 1), "{\n \"a\": [\n  1\n ]\n}");
    }

    proptest::proptest! {
        #[test]
        fn reload_is_bit_exact(v in proptest::collection::vec(-1e3f64..1e3, 30), prior in proptest::bool::ANY) {
            let h = Mat::from_row_slice(4, 2, &v[..8]);
            let a = Mat::from_row_slice(4, 4, &v[8..24]);
            let r = &a * a.transpose() + Mat::identity(4, 4);
            let j0 = prior.then(|| Mat::from_row_slice(2, 2, &[v[24].abs() + 1.0, 0.0, 0.0, 2.0]));
            let m = SystemModel::new(h + Mat::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]) * 1e4, r, j0, Mat::from_row_slice(1, 2, &v[25..27]), vec![Mat::from_row_slice(1, 2, &v[27..29]), Mat::from_row_slice(1, 2, &[1.0, v[29]])], vec![1, 3]).unwrap();
            let text = render(&model_json(&m), 2);
            let back = parse_model(&text).unwrap();
            proptest::prop_assert_eq!(ModelFile::from_model(&back), ModelFile::from_model(&m));
            proptest::prop_assert!(back.h().iter().zip(m.h().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
