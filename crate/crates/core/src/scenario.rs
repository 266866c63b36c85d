//! Forecast-error sampling, scenario sample sizes and the min-reduction of
//! sampled loss-of-load constraints to one bound per (node, phase).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::grid::{FeederModel, NodeId, Phase, ResKind};
use crate::linalg;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{name} must lie in (0, 1), got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("dimension count must be positive")]
    EmptyDimension,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("correlation matrix is not positive semidefinite")]
    NotPsd,
    #[error("invalid error spec: {0}")]
    Spec(String),
    #[error("epsilon samples: {0}")]
    Epsilon(String),
    #[error("scenario spec file: {0}")]
    File(String),
}

fn check_prob(name: &'static str, value: f64) -> Result<(), ScenarioError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(ScenarioError::Probability { name, value })
    }
}

/// `⌈2ρ⁻¹ ln β⁻¹ + 2m + 2mρ⁻¹ ln(2ρ⁻¹)⌉`.
pub fn min_sample_size(rho: f64, beta: f64, m: u64) -> Result<u64, ScenarioError> {
    check_prob("rho", rho)?;
    check_prob("beta", beta)?;
    if m == 0 {
        return Err(ScenarioError::EmptyDimension);
    }
    let m = m as f64;
    let k = 2.0 / rho * (1.0 / beta).ln() + 2.0 * m + 2.0 * m / rho * (2.0 / rho).ln();
    Ok(k.ceil() as u64)
}

/// Sample size for the group-sparse surrogate: the general bound with
/// `m = 2(n_dg + line_phase_count)`.
pub fn min_sample_size_mr3(
    rho: f64,
    beta: f64,
    n_dg: u64,
    line_phase_count: u64,
) -> Result<u64, ScenarioError> {
    min_sample_size(rho, beta, 2 * (n_dg + line_phase_count))
}

/// Externally supplied samples of the linearization error term, one row per
/// sample, columns keyed by (node, phase, reactive?).
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSamples {
    pub columns: Vec<(NodeId, Phase, bool)>,
    pub rows: Vec<Vec<f64>>,
}

impl EpsilonSamples {
    /// CSV with a header of `node:phase:p` / `node:phase:q` entries.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self, ScenarioError> {
        let err = |m: String| ScenarioError::Epsilon(m);
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
        let mut columns = Vec::new();
        for h in header.iter() {
            let parts: Vec<&str> = h.split(':').collect();
            let parsed = match parts.as_slice() {
                [n, p, kind] => {
                    let node = n.parse::<u32>().ok();
                    let phase = Phase::parse(p);
                    let q = match *kind {
                        "p" | "P" => Some(false),
                        "q" | "Q" => Some(true),
                        _ => None,
                    };
                    node.zip(phase).zip(q).map(|((n, p), q)| (NodeId(n), p, q))
                }
                _ => None,
            };
            columns.push(
                parsed.ok_or_else(|| err(format!("bad column {h:?}, expected node:phase:p|q")))?,
            );
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let row: Vec<f64> = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("{v:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite entry".into()));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(err("no rows".into()));
        }
        Ok(EpsilonSamples { columns, rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastErrorSpec {
    /// Standard deviation per RES unit, W, keyed by (node, index into `NodeSpec::res`).
    pub res_sigma: BTreeMap<(NodeId, usize), f64>,
    /// Active/reactive load error standard deviations, W/var.
    pub load_sigma: BTreeMap<(NodeId, Phase), (f64, f64)>,
    /// Lower and upper truncation percentiles.
    pub truncation: (f64, f64),
    pub epsilon: Option<EpsilonSamples>,
}

impl ForecastErrorSpec {
    /// Sigmas as fractions of each RES forecast and each load.
    pub fn from_fractions(model: &FeederModel, pv: f64, wind: f64, load: f64) -> Self {
        let mut res_sigma = BTreeMap::new();
        let mut load_sigma = BTreeMap::new();
        for n in model.nodes() {
            for (i, u) in n.res.iter().enumerate() {
                let f = match u.kind {
                    ResKind::Pv => pv,
                    ResKind::Wind => wind,
                };
                res_sigma.insert((n.id, i), f * u.forecast_w);
            }
            for &p in &n.phases {
                let s = n.load_on(p);
                if s.norm() != 0.0 {
                    load_sigma.insert((n.id, p), (load * s.re.abs(), load * s.im.abs()));
                }
            }
        }
        ForecastErrorSpec {
            res_sigma,
            load_sigma,
            truncation: (0.13, 99.87),
            epsilon: None,
        }
    }

    pub fn zero(model: &FeederModel) -> Self {
        Self::from_fractions(model, 0.0, 0.0, 0.0)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let (lo, hi) = self.truncation;
        if !(lo > 0.0 && lo < hi && hi < 100.0) {
            return Err(ScenarioError::Spec(format!(
                "truncation percentiles ({lo}, {hi}) must satisfy 0 < lo < hi < 100"
            )));
        }
        let bad = self
            .res_sigma
            .values()
            .any(|s| !(s.is_finite() && *s >= 0.0))
            || self
                .load_sigma
                .values()
                .any(|(p, q)| !(p.is_finite() && q.is_finite() && *p >= 0.0 && *q >= 0.0));
        if bad {
            return Err(ScenarioError::Spec(
                "sigmas must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Standardized truncation bounds `[Φ⁻¹(lo), Φ⁻¹(hi)]`.
    pub fn standard_bounds(&self) -> (f64, f64) {
        let n = Normal::standard();
        (
            n.inverse_cdf(self.truncation.0 / 100.0),
            n.inverse_cdf(self.truncation.1 / 100.0),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceSource {
    Coords,
    Hops,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorrelationModel {
    Independent,
    /// `corr = exp(−d/decay_length)` between RES units of the same kind;
    /// `distance` is indexed by node position in the model.
    Exponential {
        decay_length: f64,
        distance: DMatrix<f64>,
    },
}

impl CorrelationModel {
    /// Node distances from coordinates when every node has them, hop counts otherwise.
    pub fn exponential(model: &FeederModel, decay_length: f64, source: DistanceSource) -> Self {
        let coords: Option<Vec<[f64; 2]>> = model.nodes().iter().map(|n| n.coords).collect();
        let distance = match (source, coords) {
            (DistanceSource::Coords, Some(c)) => DMatrix::from_fn(c.len(), c.len(), |i, j| {
                ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt()
            }),
            _ => model.hop_distances(),
        };
        CorrelationModel::Exponential {
            decay_length,
            distance,
        }
    }
}

/// RES units in sampling order: node order, then unit order within the node.
fn res_units(model: &FeederModel) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ni, n) in model.nodes().iter().enumerate() {
        for ui in 0..n.res.len() {
            out.push((ni, ui));
        }
    }
    out
}

pub fn correlation_matrix(
    model: &FeederModel,
    corr: &CorrelationModel,
) -> Result<DMatrix<f64>, ScenarioError> {
    let units = res_units(model);
    let n = units.len();
    let mut c = DMatrix::identity(n, n);
    if let CorrelationModel::Exponential {
        decay_length,
        distance,
    } = corr
    {
        if !(*decay_length > 0.0) {
            return Err(ScenarioError::Spec("decay length must be positive".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (ni, ui) = units[i];
                let (nj, uj) = units[j];
                if model.nodes()[ni].res[ui].kind != model.nodes()[nj].res[uj].kind {
                    continue;
                }
                let d = distance[(ni, nj)];
                if !(d.is_finite() && d >= 0.0)
                    || (distance[(ni, nj)] - distance[(nj, ni)]).abs() > 1e-9 * d.max(1.0)
                {
                    return Err(ScenarioError::Spec(
                        "distance matrix must be symmetric, finite and nonnegative".into(),
                    ));
                }
                c[(i, j)] = (-d / decay_length).exp();
            }
        }
    }
    Ok(c)
}

/// Per-scenario generator of net injections on the demand pairs.
pub struct ScenarioSampler<'a> {
    model: &'a FeederModel,
    spec: &'a ForecastErrorSpec,
    pairs: Vec<(NodeId, Phase)>,
    chol: DMatrix<f64>,
    unit_sigma: Vec<f64>,
    unit_pair: Vec<Option<usize>>,
    forecast_p: Vec<f64>,
    forecast_q: Vec<f64>,
    load_sigma: Vec<(f64, f64)>,
    eps_cols: Vec<(usize, bool)>,
    bounds: (f64, f64),
    rng: ChaCha8Rng,
    z: DVector<f64>,
    w: DVector<f64>,
}

impl<'a> ScenarioSampler<'a> {
    pub fn new(
        model: &'a FeederModel,
        spec: &'a ForecastErrorSpec,
        corr: &CorrelationModel,
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        spec.validate()?;
        let pairs = model.demand_pairs();
        let pair_pos: BTreeMap<(NodeId, Phase), usize> =
            pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let corr_mat = correlation_matrix(model, corr)?;
        let chol = linalg::psd_cholesky(&corr_mat, 1e-10).ok_or(ScenarioError::NotPsd)?;

        let units = res_units(model);
        let mut unit_sigma = Vec::with_capacity(units.len());
        let mut unit_pair = Vec::with_capacity(units.len());
        for &(ni, ui) in &units {
            let node = &model.nodes()[ni];
            unit_sigma.push(spec.res_sigma.get(&(node.id, ui)).copied().unwrap_or(0.0));
            unit_pair.push(pair_pos.get(&(node.id, node.res[ui].phase)).copied());
        }
        let mut forecast_p = vec![0.0; pairs.len()];
        let mut forecast_q = vec![0.0; pairs.len()];
        let mut load_sigma = vec![(0.0, 0.0); pairs.len()];
        for (i, (id, ph)) in pairs.iter().enumerate() {
            let node = model.node(*id).expect("pair from model");
            let load = node.load_on(*ph);
            forecast_p[i] = node.res_on(*ph).map(|u| u.forecast_w).sum::<f64>() - load.re;
            forecast_q[i] = -load.im;
            load_sigma[i] = spec
                .load_sigma
                .get(&(*id, *ph))
                .copied()
                .unwrap_or((0.0, 0.0));
        }
        let mut eps_cols = Vec::new();
        if let Some(eps) = &spec.epsilon {
            for (c, &(n, p, q)) in eps.columns.iter().enumerate() {
                let pos = pair_pos.get(&(n, p)).ok_or_else(|| {
                    ScenarioError::Epsilon(format!("column {c}: ({n},{p}) is not a demand pair"))
                })?;
                eps_cols.push((*pos, q));
            }
            if eps.rows.iter().any(|r| r.len() != eps.columns.len()) {
                return Err(ScenarioError::Epsilon("ragged rows".into()));
            }
        }
        let n_units = units.len();
        Ok(ScenarioSampler {
            model,
            spec,
            pairs,
            chol,
            unit_sigma,
            unit_pair,
            forecast_p,
            forecast_q,
            load_sigma,
            eps_cols,
            bounds: spec.standard_bounds(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            z: DVector::zeros(n_units),
            w: DVector::zeros(n_units),
        })
    }

    pub fn pairs(&self) -> &[(NodeId, Phase)] {
        &self.pairs
    }

    pub fn model(&self) -> &FeederModel {
        self.model
    }

    fn truncated(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let (lo, hi) = self.bounds;
        loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z >= lo && z <= hi {
                return sigma * z;
            }
        }
    }

    /// Writes one scenario of (P, Q) net injections into the buffers.
    pub fn next_into(&mut self, p: &mut [f64], q: &mut [f64]) {
        p.copy_from_slice(&self.forecast_p);
        q.copy_from_slice(&self.forecast_q);

        let n_units = self.unit_sigma.len();
        if n_units > 0 && self.unit_sigma.iter().any(|&s| s > 0.0) {
            let (lo, hi) = self.bounds;
            loop {
                for i in 0..n_units {
                    self.w[i] = self.rng.sample(StandardNormal);
                }
                self.chol.mul_to(&self.w, &mut self.z);
                if self
                    .z
                    .iter()
                    .zip(&self.unit_sigma)
                    .all(|(z, s)| *s == 0.0 || (*z >= lo && *z <= hi))
                {
                    break;
                }
            }
            for i in 0..n_units {
                if let Some(pos) = self.unit_pair[i] {
                    p[pos] += self.unit_sigma[i] * self.z[i];
                }
            }
        }
        for i in 0..self.pairs.len() {
            let (sp, sq) = self.load_sigma[i];
            p[i] -= self.truncated(sp);
            q[i] -= self.truncated(sq);
        }
        if let Some(eps) = &self.spec.epsilon {
            let row = &eps.rows[self.rng.random_range(0..eps.rows.len())];
            for (v, &(pos, is_q)) in row.iter().zip(&self.eps_cols) {
                if is_q {
                    q[pos] += v;
                } else {
                    p[pos] += v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub pairs: Vec<(NodeId, Phase)>,
    /// Row-major `k × |pairs|`.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub seed: u64,
}

impl ScenarioSet {
    pub fn k(&self) -> usize {
        if self.pairs.is_empty() {
            0
        } else {
            self.p.len() / self.pairs.len()
        }
    }

    pub fn sample(&self, k: usize) -> (&[f64], &[f64]) {
        let d = self.pairs.len();
        (&self.p[k * d..(k + 1) * d], &self.q[k * d..(k + 1) * d])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "node", "phase", "p_w", "q_var"])?;
        for k in 0..self.k() {
            let (p, q) = self.sample(k);
            for (i, (n, ph)) in self.pairs.iter().enumerate() {
                wr.write_record([
                    k.to_string(),
                    n.to_string(),
                    ph.to_string(),
                    p[i].to_string(),
                    q[i].to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn sample_scenarios(
    model: &FeederModel,
    spec: &ForecastErrorSpec,
    corr: &CorrelationModel,
    k: usize,
    seed: u64,
) -> Result<ScenarioSet, ScenarioError> {
    if k == 0 {
        return Err(ScenarioError::NoSamples);
    }
    let mut s = ScenarioSampler::new(model, spec, corr, seed)?;
    let d = s.pairs().len();
    let mut p = vec![0.0; k * d];
    let mut q = vec![0.0; k * d];
    for i in 0..k {
        s.next_into(&mut p[i * d..(i + 1) * d], &mut q[i * d..(i + 1) * d]);
    }
    Ok(ScenarioSet {
        pairs: s.pairs,
        p,
        q,
        seed,
    })
}

/// Per demand pair: the smallest sampled net active/reactive injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetInjectionBounds {
    pub pairs: Vec<(NodeId, Phase)>,
    pub p_bound: Vec<f64>,
    pub q_bound: Vec<f64>,
}

impl NetInjectionBounds {
    /// Bounds equal to the forecast net injections (no uncertainty).
    pub fn forecast(model: &FeederModel) -> Self {
        let spec = ForecastErrorSpec::zero(model);
        sample_bounds(model, &spec, &CorrelationModel::Independent, 1, 0)
            .expect("zero spec is valid")
    }
}

pub fn reduce_scenarios(s: &ScenarioSet) -> NetInjectionBounds {
    let d = s.pairs.len();
    let mut p_bound = vec![f64::INFINITY; d];
    let mut q_bound = vec![f64::INFINITY; d];
    for k in 0..s.k() {
        let (p, q) = s.sample(k);
        for i in 0..d {
            p_bound[i] = p_bound[i].min(p[i]);
            q_bound[i] = q_bound[i].min(q[i]);
        }
    }
    NetInjectionBounds {
        pairs: s.pairs.clone(),
        p_bound,
        q_bound,
    }
}

/// `reduce_scenarios(sample_scenarios(..))` without storing the samples.
pub fn sample_bounds(
    model: &FeederModel,
    spec: &ForecastErrorSpec,
    corr: &CorrelationModel,
    k: usize,
    seed: u64,
) -> Result<NetInjectionBounds, ScenarioError> {
    if k == 0 {
        return Err(ScenarioError::NoSamples);
    }
    let mut s = ScenarioSampler::new(model, spec, corr, seed)?;
    let d = s.pairs().len();
    let (mut p, mut q) = (vec![0.0; d], vec![0.0; d]);
    let mut p_bound = vec![f64::INFINITY; d];
    let mut q_bound = vec![f64::INFINITY; d];
    for _ in 0..k {
        s.next_into(&mut p, &mut q);
        for i in 0..d {
            p_bound[i] = p_bound[i].min(p[i]);
            q_bound[i] = q_bound[i].min(q[i]);
        }
    }
    Ok(NetInjectionBounds {
        pairs: s.pairs,
        p_bound,
        q_bound,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpecDoc {
    #[serde(default)]
    pub pv_sigma_frac: f64,
    #[serde(default)]
    pub wind_sigma_frac: f64,
    #[serde(default)]
    pub load_sigma_frac: f64,
    #[serde(default = "default_truncation")]
    pub truncation_percentiles: [f64; 2],
    #[serde(default)]
    pub correlation: Option<CorrelationDoc>,
    #[serde(default)]
    pub node_overrides: Vec<NodeOverrideDoc>,
    #[serde(default)]
    pub epsilon_csv: Option<String>,
}

fn default_truncation() -> [f64; 2] {
    [0.13, 99.87]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Independent,
    Exponential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationDoc {
    pub kind: CorrelationKind,
    #[serde(default)]
    pub decay_length: Option<f64>,
    #[serde(default)]
    pub distance: Option<DistanceSource>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeOverrideDoc {
    pub node: u32,
    #[serde(default)]
    pub load_sigma_frac: Option<f64>,
    #[serde(default)]
    pub res_sigma_frac: Option<f64>,
}

/// Resolves a scenario spec document against a model. `base_dir` anchors a
/// relative `epsilon_csv` path.
pub fn parse_scenario_spec(
    source: &str,
    model: &FeederModel,
    base_dir: &Path,
) -> Result<(ForecastErrorSpec, CorrelationModel), ScenarioError> {
    let doc: ScenarioSpecDoc =
        toml::from_str(source).map_err(|e| ScenarioError::File(e.to_string()))?;
    spec_from_doc(&doc, model, base_dir)
}

pub fn spec_from_doc(
    doc: &ScenarioSpecDoc,
    model: &FeederModel,
    base_dir: &Path,
) -> Result<(ForecastErrorSpec, CorrelationModel), ScenarioError> {
    let mut spec = ForecastErrorSpec::from_fractions(
        model,
        doc.pv_sigma_frac,
        doc.wind_sigma_frac,
        doc.load_sigma_frac,
    );
    spec.truncation = (doc.truncation_percentiles[0], doc.truncation_percentiles[1]);
    for o in &doc.node_overrides {
        let node = model
            .node(NodeId(o.node))
            .ok_or_else(|| ScenarioError::File(format!("override for unknown node {}", o.node)))?;
        if let Some(f) = o.load_sigma_frac {
            for &p in &node.phases {
                let s = node.load_on(p);
                if s.norm() != 0.0 {
                    spec.load_sigma
                        .insert((node.id, p), (f * s.re.abs(), f * s.im.abs()));
                }
            }
        }
        if let Some(f) = o.res_sigma_frac {
            for (i, u) in node.res.iter().enumerate() {
                spec.res_sigma.insert((node.id, i), f * u.forecast_w);
            }
        }
    }
    if let Some(path) = &doc.epsilon_csv {
        let full = base_dir.join(path);
        let file = std::fs::File::open(&full)
            .map_err(|e| ScenarioError::File(format!("{}: {e}", full.display())))?;
        spec.epsilon = Some(EpsilonSamples::from_csv(file)?);
    }
    spec.validate()?;
    let corr = match &doc.correlation {
        None => CorrelationModel::Independent,
        Some(c) if c.kind == CorrelationKind::Independent => CorrelationModel::Independent,
        Some(c) => {
            let l = c.decay_length.ok_or_else(|| {
                ScenarioError::File("exponential correlation needs decay_length".into())
            })?;
            CorrelationModel::exponential(model, l, c.distance.unwrap_or(DistanceSource::Coords))
        }
    };
    Ok((spec, corr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{LineSpec, NodeSpec, ResUnit};

    fn feeder(res: &[(u32, ResKind, f64)]) -> FeederModel {
        let mut nodes = vec![NodeSpec::new(1, &[Phase::A])];
        let mut lines = Vec::new();
        for i in 2..=4 {
            let mut n = NodeSpec::new(i, &[Phase::A]).with_load(Phase::A, 1e4, 2e3);
            n.coords = Some([i as f64, 0.0]);
            for &(at, kind, f) in res {
                if at == i {
                    n = n.with_res(ResUnit {
                        phase: Phase::A,
                        kind,
                        capacity_w: f,
                        forecast_w: f,
                    });
                }
            }
            nodes.push(n);
            lines.push(LineSpec::uniform(i - 1, i, &[Phase::A], 0.1, 0.1, 100.0));
        }
        nodes[0].coords = Some([1.0, 0.0]);
        FeederModel::new(nodes, lines, 2400.0, NodeId(1), 1.0).unwrap()
    }

    #[test]
    fn sample_size_reference() {
        assert_eq!(min_sample_size(0.01, 0.05, 4).unwrap(), 4846);
        assert_eq!(min_sample_size_mr3(0.1, 0.1, 1, 2).unwrap(), 418);
        assert!(min_sample_size(0.01, 0.05, 0).is_err());
        assert!(min_sample_size(0.0, 0.05, 1).is_err());
        assert!(min_sample_size(0.5, 1.0, 1).is_err());
        assert!(min_sample_size(0.01, 0.05, 4).unwrap() > min_sample_size(0.1, 0.05, 4).unwrap());
    }

    #[test]
    fn zero_sigma_gives_forecast() {
        let m = feeder(&[(3, ResKind::Pv, 5e3)]);
        let spec = ForecastErrorSpec::zero(&m);
        let s = sample_scenarios(&m, &spec, &CorrelationModel::Independent, 5, 9).unwrap();
        for k in 0..5 {
            let (p, q) = s.sample(k);
            assert_eq!(p, &[-1e4, 5e3 - 1e4, -1e4]);
            assert_eq!(q, &[-2e3, -2e3, -2e3]);
        }
    }

    #[test]
    fn streaming_matches_stored() {
        let m = feeder(&[(2, ResKind::Pv, 5e3), (4, ResKind::Pv, 3e3)]);
        let spec = ForecastErrorSpec::from_fractions(&m, 0.1, 0.2, 0.05);
        let corr = CorrelationModel::exponential(&m, 2.0, DistanceSource::Coords);
        let s = sample_scenarios(&m, &spec, &corr, 300, 4).unwrap();
        assert_eq!(
            reduce_scenarios(&s),
            sample_bounds(&m, &spec, &corr, 300, 4).unwrap()
        );
    }

    #[test]
    fn reduce_takes_min() {
        let s = ScenarioSet {
            pairs: vec![(NodeId(2), Phase::A)],
            p: vec![3.0, 1.0, 2.0],
            q: vec![0.0, -1.0, 5.0],
            seed: 0,
        };
        let b = reduce_scenarios(&s);
        assert_eq!(b.p_bound, vec![1.0]);
        assert_eq!(b.q_bound, vec![-1.0]);
    }

    #[test]
    fn rejects_bad_truncation() {
        let m = feeder(&[]);
        let mut spec = ForecastErrorSpec::zero(&m);
        spec.truncation = (50.0, 10.0);
        assert!(sample_scenarios(&m, &spec, &CorrelationModel::Independent, 1, 0).is_err());
    }

    #[test]
    fn rejects_indefinite_distance() {
        let m = feeder(&[
            (2, ResKind::Pv, 1.0),
            (3, ResKind::Pv, 1.0),
            (4, ResKind::Pv, 1.0),
        ]);
        // Non-metric distances can produce an indefinite exponential kernel.
        let mut d = DMatrix::from_element(4, 4, 0.0);
        d[(1, 2)] = 0.01;
        d[(2, 1)] = 0.01;
        d[(2, 3)] = 0.01;
        d[(3, 2)] = 0.01;
        d[(1, 3)] = 100.0;
        d[(3, 1)] = 100.0;
        let corr = CorrelationModel::Exponential {
            decay_length: 1.0,
            distance: d,
        };
        let spec = ForecastErrorSpec::from_fractions(&m, 0.1, 0.1, 0.0);
        assert!(matches!(
            sample_scenarios(&m, &spec, &corr, 1, 0),
            Err(ScenarioError::NotPsd)
        ));
    }

    #[test]
    fn epsilon_csv_parsed_and_applied() {
        let m = feeder(&[]);
        let eps = EpsilonSamples::from_csv("2:a:p,2:a:q\n1.5,-2.0\n".as_bytes()).unwrap();
        let mut spec = ForecastErrorSpec::zero(&m);
        spec.epsilon = Some(eps);
        let s = sample_scenarios(&m, &spec, &CorrelationModel::Independent, 2, 0).unwrap();
        assert_eq!(s.sample(1).0[0], -1e4 + 1.5);
        assert_eq!(s.sample(1).1[0], -2e3 - 2.0);
    }

    #[test]
    fn csv_header() {
        let m = feeder(&[]);
        let s = sample_scenarios(
            &m,
            &ForecastErrorSpec::zero(&m),
            &CorrelationModel::Independent,
            1,
            0,
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("k,node,phase,p_w,q_var\n0,2,a,-10000,-2000\n"),
            "{text}"
        );
    }
}
