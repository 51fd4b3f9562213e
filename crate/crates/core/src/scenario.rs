//! Scenario families (latent contexts) and realized load / renewable trajectories.

use crate::grid::{apply_outage, BusKind, GridSpec};
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("family {family}: {message}")]
    Invalid { family: usize, message: String },
    #[error("forecast rows {start}..{end} exceed horizon {horizon}")]
    HorizonOverrun { start: usize, end: usize, horizon: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("family file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageCandidate {
    pub line: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFamily {
    pub id: usize,
    #[serde(default)]
    pub label: String,
    pub horizon: usize,
    /// `load_shape[bus][t]`, MW.
    pub load_shape: Vec<Vec<f64>>,
    /// `re_shape[unit][t]`, MW.
    pub re_shape: Vec<Vec<f64>>,
    /// Ceiling used to truncate renewable draws, MW per unit.
    pub re_capacity: Vec<f64>,
    /// Multiplicative noise level.
    pub sigma: f64,
    /// Reactive load as a fraction of active load.
    #[serde(default)]
    pub q_ratio: f64,
    #[serde(default)]
    pub outages: Vec<OutageCandidate>,
    /// Draw each outage at a uniformly random stage instead of before stage 0.
    #[serde(default)]
    pub mid_episode_outages: bool,
}

/// Stage-by-quantity trajectories: `load_p`/`load_q` are `T × buses`, `re_max` is `T × units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub load_p: Matrix,
    pub load_q: Matrix,
    pub re_max: Matrix,
}

impl Profile {
    pub fn horizon(&self) -> usize {
        self.load_p.rows()
    }

    pub fn net_load(&self, t: usize) -> f64 {
        self.load_p.row(t).iter().sum::<f64>() - self.re_max.row(t).iter().sum::<f64>()
    }

    /// Stages `start..end` as a new profile.
    pub fn window(&self, start: usize, end: usize) -> Profile {
        let rows: Vec<usize> = (start..end).collect();
        Profile {
            load_p: self.load_p.permute_rows(&rows),
            load_q: self.load_q.permute_rows(&rows),
            re_max: self.re_max.permute_rows(&rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outage {
    pub line: usize,
    /// Stage from which the line is out; 0 means before the first dispatch.
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSample {
    pub family_id: usize,
    pub seed: u64,
    pub profile: Profile,
    pub outages: Vec<Outage>,
}

impl ScenarioSample {
    pub fn horizon(&self) -> usize {
        self.profile.horizon()
    }

    pub fn outages_at(&self, stage: usize) -> Vec<usize> {
        self.outages.iter().filter(|o| o.stage == stage).map(|o| o.line).collect()
    }

    /// CSV with one row per stage: `stage, P_D[bus].., Q_D[bus].., P_RE_max[unit]..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ScenarioError> {
        let p = &self.profile;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["stage".to_string()];
        header.extend((0..p.load_p.cols()).map(|i| format!("p_load_{i}")));
        header.extend((0..p.load_q.cols()).map(|i| format!("q_load_{i}")));
        header.extend((0..p.re_max.cols()).map(|k| format!("re_max_{k}")));
        w.write_record(&header)?;
        for t in 0..p.horizon() {
            let mut row = vec![t.to_string()];
            for m in [&p.load_p, &p.load_q, &p.re_max] {
                row.extend(m.row(t).iter().map(|x| x.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| ScenarioError::Io { path: "csv".into(), source: e })?;
        Ok(())
    }
}

impl ScenarioFamily {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid { family: self.id, message: m });
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if let Some(s) = self.load_shape.iter().chain(&self.re_shape).find(|s| s.len() != self.horizon) {
            return bad(format!("shape of length {} for horizon {}", s.len(), self.horizon));
        }
        if self.re_capacity.len() != self.re_shape.len() {
            return bad("re_capacity length differs from re_shape".into());
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be nonnegative".into());
        }
        if self.load_shape.iter().chain(&self.re_shape).flatten().any(|x| !(*x >= 0.0)) {
            return bad("shapes must be nonnegative".into());
        }
        if self.outages.iter().any(|o| !(0.0..=1.0).contains(&o.probability)) {
            return bad("outage probability outside [0, 1]".into());
        }
        Ok(())
    }

    /// Checks device counts and outage lines against `spec`, and that every outage
    /// candidate alone keeps the network connected.
    pub fn check_against(&self, spec: &GridSpec) -> Result<(), ScenarioError> {
        self.validate()?;
        let bad = |m: String| Err(ScenarioError::Invalid { family: self.id, message: m });
        if self.load_shape.len() != spec.n_buses() {
            return bad(format!("{} load shapes for {} buses", self.load_shape.len(), spec.n_buses()));
        }
        if self.re_shape.len() != spec.renewable.len() {
            return bad(format!("{} renewable shapes for {} units", self.re_shape.len(), spec.renewable.len()));
        }
        for o in &self.outages {
            if let Err(e) = apply_outage(spec, &[o.line]) {
                return bad(format!("outage candidate {}: {e}", o.line));
            }
        }
        Ok(())
    }

    fn shape_profile(&self, t0: usize, n: usize) -> Profile {
        let nb = self.load_shape.len();
        let nr = self.re_shape.len();
        let mut load_p = Matrix::zeros(n, nb);
        let mut re_max = Matrix::zeros(n, nr);
        for r in 0..n {
            for (i, s) in self.load_shape.iter().enumerate() {
                load_p[(r, i)] = s[t0 + r];
            }
            for (k, s) in self.re_shape.iter().enumerate() {
                re_max[(r, k)] = s[t0 + r].min(self.re_capacity[k]);
            }
        }
        let load_q = load_p.scale(self.q_ratio);
        Profile { load_p, load_q, re_max }
    }
}

const MAX_REJECTIONS: usize = 64;

/// `shape · (1 + σ g)` with `g` standard normal, redrawn until the value lies in `[0, cap]`.
fn truncated(rng: &mut ChaCha8Rng, shape: f64, sigma: f64, cap: f64) -> f64 {
    let mut v = shape;
    for _ in 0..MAX_REJECTIONS {
        let g: f64 = rng.sample(StandardNormal);
        v = shape * (1.0 + sigma * g);
        if (0.0..=cap).contains(&v) {
            return v;
        }
    }
    v.clamp(0.0, cap)
}

/// Realized trajectory of `family` for `seed`; a pure function of its arguments.
pub fn sample(family: &ScenarioFamily, seed: u64) -> ScenarioSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = family.horizon;
    let mut profile = family.shape_profile(0, t_len);
    if family.sigma > 0.0 {
        for t in 0..t_len {
            for (i, s) in family.load_shape.iter().enumerate() {
                profile.load_p[(t, i)] = truncated(&mut rng, s[t], family.sigma, f64::INFINITY);
            }
            for (k, s) in family.re_shape.iter().enumerate() {
                let cap = family.re_capacity[k];
                profile.re_max[(t, k)] = truncated(&mut rng, s[t].min(cap), family.sigma, cap);
            }
        }
        profile.load_q = profile.load_p.scale(family.q_ratio);
    }
    let mut outages = Vec::new();
    for o in &family.outages {
        if rng.gen_bool(o.probability) {
            let stage = if family.mid_episode_outages { rng.gen_range(0..t_len) } else { 0 };
            outages.push(Outage { line: o.line, stage });
        }
    }
    ScenarioSample { family_id: family.id, seed, profile, outages }
}

/// Noise-free rows `t0..t0+n` of the family's mean shapes.
pub fn forecast_expectation(family: &ScenarioFamily, t0: usize, n: usize) -> Result<Profile, ScenarioError> {
    if t0 + n > family.horizon {
        return Err(ScenarioError::HorizonOverrun { start: t0, end: t0 + n, horizon: family.horizon });
    }
    Ok(family.shape_profile(t0, n))
}

/// Noise-free sample with no outages.
pub fn expected_sample(family: &ScenarioFamily) -> ScenarioSample {
    ScenarioSample { family_id: family.id, seed: 0, profile: family.shape_profile(0, family.horizon), outages: vec![] }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    families: Vec<ScenarioFamily>,
}

pub fn families_from_toml_str(text: &str) -> Result<Vec<ScenarioFamily>, ScenarioError> {
    let f: FamilyFile = toml::from_str(text)?;
    for fam in &f.families {
        fam.validate()?;
    }
    Ok(f.families)
}

pub fn load_families(path: impl AsRef<Path>) -> Result<Vec<ScenarioFamily>, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), source: e })?;
    families_from_toml_str(&text)
}

pub fn families_to_toml_string(families: &[ScenarioFamily]) -> String {
    toml::to_string(&FamilyFile { families: families.to_vec() }).expect("families serialize")
}

fn bump(x: f64, center: f64, width: f64) -> f64 {
    (-((x - center) / width).powi(2) / 2.0).exp()
}

/// Five demonstration families for `spec`: evening peak, renewable-heavy,
/// renewable-light, high-variance and flat. Levels scale with the thermal fleet
/// capacity; the shapes are illustrative, not fitted to any dataset.
pub fn make_demo_families(horizon: usize, spec: &GridSpec) -> Vec<ScenarioFamily> {
    let load_buses: Vec<usize> = {
        let l: Vec<usize> = spec.buses.iter().filter(|b| b.bus_kind == BusKind::Load).map(|b| b.id).collect();
        if l.is_empty() {
            (0..spec.n_buses()).collect()
        } else {
            l
        }
    };
    let tg_cap: f64 = spec.thermal.iter().map(|g| g.p_bounds.1).sum();
    let peak = 0.8 * tg_cap / load_buses.len() as f64;
    let caps: Vec<f64> = spec.renewable.iter().map(|r| r.capacity).collect();

    // lines whose single outage keeps the network connected
    let safe_lines: Vec<usize> =
        spec.in_service_lines().map(|l| l.id).filter(|&id| apply_outage(spec, &[id]).is_ok()).collect();

    let tt = |t: usize| t as f64 / horizon as f64;
    type Shape = Box<dyn Fn(f64) -> f64>;
    let defs: Vec<(&str, Shape, Shape, f64, f64, Option<(usize, f64)>)> = vec![
        (
            "evening-peak",
            Box::new(|x| 0.5 + 0.4 * bump(x, 0.75, 0.12)),
            Box::new(|x| 0.5 * bump(x, 0.5, 0.18)),
            0.05,
            0.2,
            None,
        ),
        (
            "renewable-heavy",
            Box::new(|x| 0.6 + 0.2 * bump(x, 0.5, 0.2)),
            Box::new(|x| 0.95 * bump(x, 0.5, 0.25)),
            0.05,
            0.2,
            safe_lines.first().map(|&l| (l, 0.3)),
        ),
        (
            "renewable-light",
            Box::new(|x| 0.6 + 0.35 * bump(x, 0.35, 0.15)),
            Box::new(|_| 0.1),
            0.05,
            0.25,
            None,
        ),
        (
            "high-variance",
            Box::new(|x| 0.6 + 0.25 * (2.0 * std::f64::consts::PI * x).sin()),
            Box::new(|x| 0.5 + 0.3 * (2.0 * std::f64::consts::PI * x).cos()),
            0.2,
            0.15,
            safe_lines.last().map(|&l| (l, 0.2)),
        ),
        ("flat", Box::new(|_| 0.7), Box::new(|_| 0.4), 0.02, 0.2, None),
    ];

    defs.into_iter()
        .enumerate()
        .map(|(id, (label, load, re, sigma, q_ratio, outage))| {
            let load_shape = (0..spec.n_buses())
                .map(|b| {
                    let on = load_buses.contains(&b);
                    (0..horizon).map(|t| if on { peak * load(tt(t)) } else { 0.0 }).collect()
                })
                .collect();
            let re_shape = caps.iter().map(|&c| (0..horizon).map(|t| c * re(tt(t))).collect()).collect();
            ScenarioFamily {
                id,
                label: label.to_string(),
                horizon,
                load_shape,
                re_shape,
                re_capacity: caps.clone(),
                sigma,
                q_ratio,
                outages: outage.map(|(line, probability)| OutageCandidate { line, probability }).into_iter().collect(),
                mid_episode_outages: false,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::three_bus_ring;
    use proptest::prelude::*;

    fn fam(sigma: f64) -> ScenarioFamily {
        let mut f = make_demo_families(8, &three_bus_ring()).remove(0);
        f.sigma = sigma;
        f
    }

    #[test]
    fn zero_sigma_reproduces_shapes() {
        let f = fam(0.0);
        let s = sample(&f, 42);
        assert_eq!(s.profile, forecast_expectation(&f, 0, 8).unwrap());
    }

    #[test]
    fn certain_outage_always_present() {
        let mut f = fam(0.1);
        f.outages = vec![OutageCandidate { line: 1, probability: 1.0 }];
        for seed in 0..20 {
            assert_eq!(sample(&f, seed).outages, vec![Outage { line: 1, stage: 0 }]);
        }
        f.outages[0].probability = 0.0;
        assert!(sample(&f, 3).outages.is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let f = fam(0.2);
        assert_eq!(sample(&f, 9), sample(&f, 9));
        assert_ne!(sample(&f, 9), sample(&f, 10));
    }

    #[test]
    fn monte_carlo_mean_matches_forecast() {
        let f = fam(0.1);
        let n = 10_000;
        let mut ratio = vec![0.0; f.horizon];
        let mut mean_load = vec![0.0; f.horizon];
        for seed in 0..n {
            let s = sample(&f, seed);
            for t in 0..f.horizon {
                ratio[t] += s.profile.load_p[(t, 1)] / f.load_shape[1][t] / n as f64;
                mean_load[t] += s.profile.load_p[(t, 1)] / n as f64;
            }
        }
        let fc = forecast_expectation(&f, 0, f.horizon).unwrap();
        for t in 0..f.horizon {
            assert!((ratio[t] - 1.0).abs() < 0.01, "stage {t}: {}", ratio[t]);
            assert!((mean_load[t] / fc.load_p[(t, 1)] - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn forecast_rows_and_overrun() {
        let f = fam(0.3);
        let one = forecast_expectation(&f, 3, 1).unwrap();
        assert_eq!(one.load_p.row(0), &[f.load_shape[0][3], f.load_shape[1][3], f.load_shape[2][3]]);
        assert!(matches!(forecast_expectation(&f, 5, 4), Err(ScenarioError::HorizonOverrun { .. })));
        let mut g = f.clone();
        g.sigma = 0.0;
        assert_eq!(forecast_expectation(&g, 0, 8).unwrap(), forecast_expectation(&f, 0, 8).unwrap());
    }

    #[test]
    fn demo_families_are_distinct() {
        let spec = three_bus_ring();
        let fams = make_demo_families(8, &spec);
        assert_eq!(fams.len(), 5);
        assert!(fams.iter().filter(|f| f.outages.iter().any(|o| o.probability > 0.0)).count() >= 2);
        for f in &fams {
            f.check_against(&spec).unwrap();
        }
        for i in 0..5 {
            for j in i + 1..5 {
                let (a, b) = (&fams[i], &fams[j]);
                let d: f64 = a
                    .load_shape
                    .iter()
                    .flatten()
                    .chain(a.re_shape.iter().flatten())
                    .zip(b.load_shape.iter().flatten().chain(b.re_shape.iter().flatten()))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d > 0.0);
                let (mut fa, mut fb) = (a.clone(), b.clone());
                fa.sigma = 0.0;
                fb.sigma = 0.0;
                assert_ne!(sample(&fa, 1).profile, sample(&fb, 1).profile);
            }
        }
    }

    #[test]
    fn toml_round_trip_and_csv() {
        let fams = make_demo_families(4, &three_bus_ring());
        let text = families_to_toml_string(&fams);
        assert_eq!(families_from_toml_str(&text).unwrap(), fams);
        let mut buf = Vec::new();
        sample(&fams[0], 1).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("stage,p_load_0"));
        assert_eq!(text.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn truncation_respects_bounds(sigma in 0.0f64..20.0, seed in 0u64..1000) {
            let f = fam(sigma);
            let s = sample(&f, seed);
            prop_assert!(s.profile.load_p.as_slice().iter().all(|&x| x >= 0.0));
            for t in 0..f.horizon {
                for k in 0..f.re_capacity.len() {
                    let v = s.profile.re_max[(t, k)];
                    prop_assert!(v >= 0.0 && v <= f.re_capacity[k]);
                }
            }
        }
    }
}
