use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{builtin_model, BuiltinParams, Dims, ModelSpec, PartialScheme, SchemeSpec};
use crate::error::{LamnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeDocument {
    pub kind: SchemeKind,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

/// A model definition as stored on disk.
///
/// `name` selects a builtin preset. `dims`, when present, must agree with the
/// preset; `scheme`, when present, replaces the preset's observation scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Dims>,
    #[serde(default)]
    pub params: BuiltinParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeDocument>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(LamnError::Parse(format!("{what} must be a nonempty rectangular array of rows")));
    }
    if nrows > super::builtins::MAX_DIM || ncols > super::builtins::MAX_DIM {
        return Err(LamnError::Parse(format!("{what} is too large")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SchemeDocument {
    pub fn to_scheme(&self) -> Result<SchemeSpec> {
        match self.kind {
            SchemeKind::Complete => {
                if self.q.is_some() || self.b.is_some() {
                    return Err(LamnError::Parse("a complete scheme takes no Q or B".into()));
                }
                Ok(SchemeSpec::Complete)
            }
            SchemeKind::Partial => {
                let q = self.q.as_ref().ok_or_else(|| LamnError::Parse("partial scheme needs Q".into()))?;
                let b = self.b.as_ref().ok_or_else(|| LamnError::Parse("partial scheme needs B".into()))?;
                let q = matrix_from_rows(q, "Q")?;
                let b = matrix_from_rows(b, "B")?;
                Ok(SchemeSpec::Partial(PartialScheme::new(q, b)?))
            }
        }
    }

    pub fn from_scheme(scheme: &SchemeSpec) -> Self {
        match scheme {
            SchemeSpec::Complete => Self { kind: SchemeKind::Complete, q: None, b: None },
            SchemeSpec::Partial(p) => {
                Self { kind: SchemeKind::Partial, q: Some(rows_of(&p.q)), b: Some(rows_of(&p.b)) }
            }
        }
    }
}

impl ModelDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LamnError::Parse(format!("model document: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model documents always serialize")
    }

    pub fn build(&self) -> Result<(ModelSpec, SchemeSpec)> {
        let (spec, preset) = builtin_model(&self.name, &self.params)?;
        if let Some(d) = self.dims {
            if d != spec.dims {
                return Err(LamnError::InvalidModel(format!(
                    "declared dims {d:?} do not match the {} preset {:?}",
                    self.name, spec.dims
                )));
            }
        }
        let scheme = match &self.scheme {
            Some(s) => s.to_scheme()?,
            None => preset,
        };
        scheme.check_model(&spec)?;
        Ok((spec, scheme))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_without_scheme_uses_builtin_scheme() {
        let doc = ModelDocument::from_json(r#"{"name": "integrated"}"#).unwrap();
        let (spec, scheme) = doc.build().unwrap();
        assert_eq!(spec.dims, Dims { m: 2, kappa: 1, r: 1, d: 1 });
        assert!(scheme.is_partial());
    }

    #[test]
    fn scheme_override_turns_langevin_into_integrated_observation() {
        let doc = ModelDocument::from_json(
            r#"{"name": "langevin", "dims": {"m": 2, "kappa": 1, "r": 1, "d": 1},
                "scheme": {"kind": "partial", "Q": [[0.0]], "B": [[1.0]]}}"#,
        )
        .unwrap();
        let (_, scheme) = doc.build().unwrap();
        let p = scheme.partial().unwrap();
        assert_eq!((p.q1, p.q2), (0, 1));
    }

    #[test]
    fn rejects_unknown_keys_and_mismatched_dims() {
        assert!(ModelDocument::from_json(r#"{"name": "langevin", "extra": 1}"#).is_err());
        let doc = ModelDocument::from_json(r#"{"name": "langevin", "dims": {"m": 3, "kappa": 1, "r": 1, "d": 1}}"#)
            .unwrap();
        assert!(matches!(doc.build(), Err(LamnError::InvalidModel(_))));
    }

    #[test]
    fn rejects_ragged_matrices() {
        let doc = ModelDocument::from_json(
            r#"{"name": "stochvol-common", "scheme": {"kind": "partial", "Q": [[1.0, 0.0], [0.0]], "B": [[0.0, 1.0]]}}"#,
        )
        .unwrap();
        assert!(matches!(doc.build(), Err(LamnError::Parse(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let doc = ModelDocument {
            name: "stochvol-common".into(),
            dims: None,
            params: BuiltinParams { damping: Some(0.5), ..Default::default() },
            scheme: Some(SchemeDocument::from_scheme(&super::super::builtin_model("stochvol-common", &BuiltinParams::default()).unwrap().1)),
        };
        let back = ModelDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        back.build().unwrap();
    }
}
