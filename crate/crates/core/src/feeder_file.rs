//! Feeder document format (TOML).
//!
//! Power quantities are read in kW/kvar unless the document sets
//! `units = "w"`. Line impedances are given either as a reference into
//! `impedance_configs` plus a length in feet, or as explicit ohm matrices.
//! Serialization always writes explicit matrices in watts so that a
//! parse/serialize/parse round trip is exact.

use std::collections::BTreeMap;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    DgSpec, FeederModel, GridError, LineSpec, NodeId, NodeSpec, Phase, ResKind, ResUnit,
};

const FEET_PER_MILE: f64 = 5280.0;

#[derive(Debug, Error)]
pub enum FeederFileError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("{path}: {msg}")]
    Field { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerUnits {
    #[default]
    Kw,
    W,
}

impl PowerUnits {
    fn factor(self) -> f64 {
        match self {
            PowerUnits::Kw => 1e3,
            PowerUnits::W => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederDoc {
    pub nominal_voltage_v: f64,
    pub pcc_node: u32,
    pub price_pcc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<PowerUnits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_angles_deg: Option<[f64; 3]>,
    /// Radians; takes precedence over `phase_angles_deg`. Used by the serializer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_angles_rad: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub impedance_configs: BTreeMap<String, ImpedanceConfigDoc>,
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub lines: Vec<LineDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpedanceConfigDoc {
    pub phases: Vec<Phase>,
    pub r_per_mile: Vec<Vec<f64>>,
    pub x_per_mile: Vec<Vec<f64>>,
    /// Shunt susceptance per mile, µS, diagonal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_us_per_mile: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerPhase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

impl PerPhase {
    fn get(&self, p: Phase) -> Option<f64> {
        match p {
            Phase::A => self.a,
            Phase::B => self.b,
            Phase::C => self.c,
        }
    }

    fn set(&mut self, p: Phase, v: f64) {
        match p {
            Phase::A => self.a = Some(v),
            Phase::B => self.b = Some(v),
            Phase::C => self.c = Some(v),
        }
    }

    fn is_empty(&self) -> bool {
        self.a.is_none() && self.b.is_none() && self.c.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: u32,
    pub phases: Vec<Phase>,
    #[serde(default, skip_serializing_if = "PerPhase::is_empty")]
    pub load_kw: PerPhase,
    #[serde(default, skip_serializing_if = "PerPhase::is_empty")]
    pub load_kvar: PerPhase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dg: Option<DgDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub res: Vec<ResDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgDoc {
    #[serde(default)]
    pub p_min_kw: f64,
    pub p_max_kw: f64,
    #[serde(default)]
    pub q_min_kvar: f64,
    #[serde(default)]
    pub q_max_kvar: f64,
    /// Currency per watt, independent of `units`.
    pub cost: f64,
    #[serde(default)]
    pub unity_pf: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResDoc {
    pub phase: Phase,
    pub kind: ResKind,
    pub capacity_kw: f64,
    pub forecast_kw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineDoc {
    pub from: u32,
    pub to: u32,
    pub phases: Vec<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_ft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_ohm: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ohm: Option<Vec<Vec<f64>>>,
    pub i_max_a: f64,
    #[serde(default)]
    pub switchable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Diagonal shunt susceptance, µS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_shunt_us: Option<Vec<f64>>,
    /// Diagonal shunt admittance as (G, B) pairs in siemens; written by the serializer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_shunt_s: Option<Vec<[f64; 2]>>,
}

pub fn parse_feeder(source: &str) -> Result<FeederModel, FeederFileError> {
    let doc: FeederDoc =
        toml::from_str(source).map_err(|e| FeederFileError::Schema(e.to_string()))?;
    doc_to_model(&doc)
}

pub fn doc_to_model(doc: &FeederDoc) -> Result<FeederModel, FeederFileError> {
    let f = doc.units.unwrap_or_default().factor();
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for (i, nd) in doc.nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let mut node = NodeSpec::new(nd.id, &nd.phases);
        for p in Phase::ALL {
            let kw = nd.load_kw.get(p);
            let kvar = nd.load_kvar.get(p);
            if (kw.is_some() || kvar.is_some()) && !nd.phases.contains(&p) {
                return Err(field(&path, format!("load given on undeclared phase {p}")));
            }
            node.load[p.index()] = Complex::new(kw.unwrap_or(0.0) * f, kvar.unwrap_or(0.0) * f);
        }
        node.dg = nd.dg.as_ref().map(|d| DgSpec {
            p_min: d.p_min_kw * f,
            p_max: d.p_max_kw * f,
            q_min: d.q_min_kvar * f,
            q_max: d.q_max_kvar * f,
            cost_coeff: d.cost,
            unity_pf: d.unity_pf,
        });
        node.res = nd
            .res
            .iter()
            .map(|r| ResUnit {
                phase: r.phase,
                kind: r.kind,
                capacity_w: r.capacity_kw * f,
                forecast_w: r.forecast_kw * f,
            })
            .collect();
        node.coords = nd.coords;
        nodes.push(node);
    }

    let mut lines = Vec::with_capacity(doc.lines.len());
    for (i, ld) in doc.lines.iter().enumerate() {
        let path = format!("lines[{i}]");
        let k = ld.phases.len();
        let (z, y_cfg) = match (&ld.config, &ld.r_ohm, &ld.x_ohm) {
            (Some(cfg), None, None) => {
                let len = ld
                    .length_ft
                    .ok_or_else(|| field(&path, "config given without length_ft".into()))?;
                let c = doc
                    .impedance_configs
                    .get(cfg)
                    .ok_or_else(|| field(&path, format!("unknown impedance config {cfg:?}")))?;
                config_impedance(c, &ld.phases, len).map_err(|m| field(&path, m))?
            }
            (None, Some(r), Some(x)) => {
                if ld.length_ft.is_some() {
                    return Err(field(&path, "length_ft only applies with config".into()));
                }
                let r = matrix(r, k).map_err(|m| field(&format!("{path}.r_ohm"), m))?;
                let x = matrix(x, k).map_err(|m| field(&format!("{path}.x_ohm"), m))?;
                (
                    DMatrix::from_fn(k, k, |a, b| Complex::new(r[(a, b)], x[(a, b)])),
                    None,
                )
            }
            _ => {
                return Err(field(
                    &path,
                    "give either config+length_ft or both r_ohm and x_ohm".into(),
                ))
            }
        };
        let y_shunt = match (&ld.y_shunt_us, &ld.y_shunt_s) {
            (Some(_), Some(_)) => {
                return Err(field(
                    &path,
                    "y_shunt_us and y_shunt_s are exclusive".into(),
                ))
            }
            (Some(b), None) => Some(b.iter().map(|b| Complex::new(0.0, b * 1e-6)).collect()),
            (None, Some(y)) => Some(y.iter().map(|[g, b]| Complex::new(*g, *b)).collect()),
            (None, None) => y_cfg,
        };
        lines.push(LineSpec {
            from: NodeId(ld.from),
            to: NodeId(ld.to),
            phases: ld.phases.clone(),
            z,
            y_shunt,
            i_max: ld.i_max_a,
            switchable: ld.switchable,
            weight: ld.weight.unwrap_or(1.0),
        });
    }

    let angles = match (doc.phase_angles_rad, doc.phase_angles_deg) {
        (Some(r), _) => r,
        (None, Some(d)) => d.map(f64::to_radians),
        (None, None) => Phase::ALL.map(Phase::nominal_angle),
    };
    Ok(FeederModel::with_angles(
        nodes,
        lines,
        doc.nominal_voltage_v,
        NodeId(doc.pcc_node),
        doc.price_pcc,
        angles,
    )?)
}

fn field(path: &str, msg: String) -> FeederFileError {
    FeederFileError::Field {
        path: path.to_string(),
        msg,
    }
}

fn matrix(rows: &[Vec<f64>], k: usize) -> Result<DMatrix<f64>, String> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(format!("expected a {k}x{k} matrix"));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

type ConfigImpedance = (DMatrix<Complex<f64>>, Option<Vec<Complex<f64>>>);

fn config_impedance(
    c: &ImpedanceConfigDoc,
    phases: &[Phase],
    length_ft: f64,
) -> Result<ConfigImpedance, String> {
    if !(length_ft.is_finite() && length_ft > 0.0) {
        return Err("length_ft must be positive".into());
    }
    let n = c.phases.len();
    let r = matrix(&c.r_per_mile, n)?;
    let x = matrix(&c.x_per_mile, n)?;
    let pos: Vec<usize> = phases
        .iter()
        .map(|p| {
            c.phases
                .iter()
                .position(|q| q == p)
                .ok_or(format!("config lacks phase {p}"))
        })
        .collect::<Result<_, _>>()?;
    let miles = length_ft / FEET_PER_MILE;
    let k = phases.len();
    let z = DMatrix::from_fn(k, k, |i, j| {
        Complex::new(r[(pos[i], pos[j])], x[(pos[i], pos[j])]) * miles
    });
    let y = match &c.b_us_per_mile {
        None => None,
        Some(b) if b.len() == n => Some(
            pos.iter()
                .map(|&i| Complex::new(0.0, b[i] * 1e-6 * miles))
                .collect(),
        ),
        Some(_) => return Err("b_us_per_mile length does not match config phases".into()),
    };
    Ok((z, y))
}

/// Explicit document for a model (watts, radians, ohm matrices).
pub fn model_to_doc(model: &FeederModel) -> FeederDoc {
    let nodes = model
        .nodes()
        .iter()
        .map(|n| {
            let mut load_kw = PerPhase::default();
            let mut load_kvar = PerPhase::default();
            for &p in &n.phases {
                let s = n.load_on(p);
                if s.re != 0.0 {
                    load_kw.set(p, s.re);
                }
                if s.im != 0.0 {
                    load_kvar.set(p, s.im);
                }
            }
            NodeDoc {
                id: n.id.0,
                phases: n.phases.clone(),
                load_kw,
                load_kvar,
                dg: n.dg.as_ref().map(|d| DgDoc {
                    p_min_kw: d.p_min,
                    p_max_kw: d.p_max,
                    q_min_kvar: d.q_min,
                    q_max_kvar: d.q_max,
                    cost: d.cost_coeff,
                    unity_pf: d.unity_pf,
                }),
                res: n
                    .res
                    .iter()
                    .map(|r| ResDoc {
                        phase: r.phase,
                        kind: r.kind,
                        capacity_kw: r.capacity_w,
                        forecast_kw: r.forecast_w,
                    })
                    .collect(),
                coords: n.coords,
            }
        })
        .collect();
    let lines = model
        .lines()
        .iter()
        .map(|l| {
            let k = l.phases.len();
            let rows = |f: &dyn Fn(Complex<f64>) -> f64| {
                (0..k)
                    .map(|i| (0..k).map(|j| f(l.z[(i, j)])).collect())
                    .collect()
            };
            LineDoc {
                from: l.from.0,
                to: l.to.0,
                phases: l.phases.clone(),
                config: None,
                length_ft: None,
                r_ohm: Some(rows(&|c| c.re)),
                x_ohm: Some(rows(&|c| c.im)),
                i_max_a: l.i_max,
                switchable: l.switchable,
                weight: Some(l.weight),
                y_shunt_us: None,
                y_shunt_s: l
                    .y_shunt
                    .as_ref()
                    .map(|y| y.iter().map(|c| [c.re, c.im]).collect()),
            }
        })
        .collect();
    FeederDoc {
        nominal_voltage_v: model.nominal_voltage(),
        pcc_node: model.pcc().0,
        price_pcc: model.price_pcc(),
        units: Some(PowerUnits::W),
        phase_angles_deg: None,
        phase_angles_rad: Some(model.phase_angles()),
        impedance_configs: BTreeMap::new(),
        nodes,
        lines,
    }
}

pub fn serialize_feeder(model: &FeederModel) -> String {
    toml::to_string(&model_to_doc(model)).expect("feeder documents always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
nominal_voltage_v = 2400.0
pcc_node = 1
price_pcc = 1.0

[[nodes]]
id = 1
phases = ["a"]

[[nodes]]
id = 2
phases = ["a"]
load_kw = { a = 10.0 }

[[lines]]
from = 1
to = 2
phases = ["a"]
r_ohm = [[0.5]]
x_ohm = [[0.2]]
i_max_a = 100.0
"#;

    #[test]
    fn parses_minimal() {
        let m = parse_feeder(MINIMAL).unwrap();
        assert_eq!(m.nodes().len(), 2);
        assert_eq!(m.lines().len(), 1);
        assert_eq!(
            m.node(NodeId(2)).unwrap().load_on(Phase::A),
            Complex::new(10e3, 0.0)
        );
        assert_eq!(m.lines()[0].weight, 1.0);
        assert!(m.lines()[0].y_shunt.is_none());
    }

    #[test]
    fn rejects_unknown_key() {
        let src = MINIMAL.replace("price_pcc = 1.0", "price_pcc = 1.0\nbogus = 3");
        let err = parse_feeder(&src).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn zero_impedance_rejected() {
        let src = MINIMAL
            .replace("[[0.5]]", "[[0.0]]")
            .replace("[[0.2]]", "[[0.0]]");
        let err = parse_feeder(&src).unwrap_err();
        assert!(err.to_string().contains("singular impedance"), "{err}");
    }

    #[test]
    fn config_scaled_by_length() {
        let src = r#"
nominal_voltage_v = 2400.0
pcc_node = 1
price_pcc = 1.0
[impedance_configs.c1]
phases = ["a", "b"]
r_per_mile = [[2.0, 0.5], [0.5, 2.0]]
x_per_mile = [[1.0, 0.1], [0.1, 1.0]]
[[nodes]]
id = 1
phases = ["a", "b"]
[[nodes]]
id = 2
phases = ["b"]
[[lines]]
from = 1
to = 2
phases = ["b"]
config = "c1"
length_ft = 2640.0
i_max_a = 50.0
"#;
        let m = parse_feeder(src).unwrap();
        assert_eq!(m.lines()[0].z[(0, 0)], Complex::new(1.0, 0.5));
    }

    #[test]
    fn round_trip() {
        let m = parse_feeder(MINIMAL).unwrap();
        let again = parse_feeder(&serialize_feeder(&m)).unwrap();
        assert_eq!(m, again);
    }
}
