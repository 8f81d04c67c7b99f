//! JSON model files.

use std::collections::BTreeMap;
use std::path::Path;

use qpot::model::{KramersModel, SystemModel};
use qpot::numkit::Mat;
use serde::Deserialize;
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomModel {
    #[serde(default)]
    name: Option<String>,
    n: usize,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    drift: Vec<String>,
    diffusion: Vec<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KramersSpec {
    #[allow(dead_code)]
    builtin: String,
    gamma: f64,
    potential: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradientSpec {
    #[allow(dead_code)]
    builtin: String,
    n: usize,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    potential: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearSpec {
    #[allow(dead_code)]
    builtin: String,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
}

pub struct LoadedModel {
    pub system: SystemModel,
    /// The input document, echoed into reports.
    pub echo: Value,
}

pub fn load(path: &Path) -> Result<LoadedModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text)
}

fn shape_error(e: serde_json::Error) -> CliError {
    CliError::invalid_model(e.to_string())
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<Mat, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::invalid_model(format!("{what} must be a nonempty square matrix")));
    }
    Ok(Mat::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn parse(text: &str) -> Result<LoadedModel, CliError> {
    let echo: Value = serde_json::from_str(text).map_err(|e| CliError::parse(format!("malformed JSON: {e}")))?;
    if !echo.is_object() {
        return Err(CliError::invalid_model("model file must be a JSON object".into()));
    }
    let builtin = echo.get("builtin").map(|b| b.as_str().map(str::to_owned));
    let system = match builtin {
        None => {
            let c: CustomModel = serde_json::from_value(echo.clone()).map_err(shape_error)?;
            if c.diffusion.len() != c.n || c.diffusion.iter().any(|r| r.len() != c.n) {
                return Err(CliError::invalid_model(format!("diffusion must be {0} x {0}", c.n)));
            }
            SystemModel::from_sources(c.name.unwrap_or_else(|| "custom".into()), c.n, &c.params, &c.drift, &c.diffusion)?
        }
        Some(Some(kind)) => match kind.as_str() {
            "kramers" => {
                let k: KramersSpec = serde_json::from_value(echo.clone()).map_err(shape_error)?;
                KramersModel::parse(&k.potential, k.gamma)?.system()
            }
            "gradient" => {
                let g: GradientSpec = serde_json::from_value(echo.clone()).map_err(shape_error)?;
                let u = qpot::exprdsl::parse(&g.potential, g.n, &g.params)?;
                SystemModel::gradient(&u, g.n)?
            }
            "linear" => {
                let l: LinearSpec = serde_json::from_value(echo.clone()).map_err(shape_error)?;
                let (m, d) = (square(&l.m, "M")?, square(&l.d, "D")?);
                if m.shape() != d.shape() {
                    return Err(CliError::invalid_model("M and D must have the same size".into()));
                }
                SystemModel::linear(&m, &d)?
            }
            other => return Err(CliError::invalid_model(format!("unknown builtin {other:?}"))),
        },
        Some(None) => return Err(CliError::invalid_model("builtin must be a string".into())),
    };
    Ok(LoadedModel { system, echo })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn custom_and_builtins() {
        let m = parse(r#"{"n":2,"params":{"k":2},"drift":["-x1+k*x2","-x2"],"diffusion":[["1","0"],["0","1"]]}"#).unwrap();
        assert_eq!(m.system.drift(&[1.0, 1.0]).unwrap().as_slice(), &[1.0, -1.0]);
        let k = parse(r#"{"builtin":"kramers","gamma":3,"potential":"x1^2"}"#).unwrap();
        assert_eq!(k.system.diffusion(&[0.0, 0.0]).unwrap()[(1, 1)], 3.0);
        let g = parse(r#"{"builtin":"gradient","n":1,"potential":"x1^2/2"}"#).unwrap();
        assert_eq!(g.system.drift(&[2.0]).unwrap()[0], -2.0);
        let l = parse(r#"{"builtin":"linear","M":[[-1]],"D":[[1]]}"#).unwrap();
        assert_eq!(l.system.dim(), 1);
    }

    #[test]
    fn error_classes() {
        assert_eq!(parse("{").err().unwrap().code, 2);
        assert_eq!(parse(r#"{"n":1,"drift":["x1 +"],"diffusion":[["1"]]}"#).err().unwrap().code, 2);
        assert_eq!(parse(r#"{"n":2,"drift":["x1"],"diffusion":[["1"]]}"#).err().unwrap().code, 3);
        assert_eq!(parse(r#"{"builtin":"kramers","gamma":-1,"potential":"x1^2"}"#).err().unwrap().code, 3);
        assert_eq!(parse(r#"{"builtin":"nope"}"#).err().unwrap().code, 3);
        assert_eq!(parse(r#"[1]"#).err().unwrap().code, 3);
    }
}
