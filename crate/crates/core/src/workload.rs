//! Traffic generators and flow-size distributions.
//!
//! Generators are pure functions of their parameters and RNG: the same seed
//! always yields the same flow list.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::ConfigError;
use crate::packet::HostId;
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowStart {
    At(SimTime),
    /// Starts when the flow with this index completes.
    After(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowSpec {
    pub src: HostId,
    pub dst: HostId,
    pub size: u64,
    pub start: FlowStart,
}

/// Piecewise-linear flow-size CDF.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeDistribution {
    pub name: String,
    points: Vec<(u64, f64)>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("websearch", include_str!("../data/websearch.cdf")),
    ("uniform", include_str!("../data/uniform.cdf")),
];

impl SizeDistribution {
    pub fn new(name: impl Into<String>, points: Vec<(u64, f64)>) -> Result<Self, ConfigError> {
        let name = name.into();
        let err = |line: usize, reason: String| ConfigError::Cdf { name: name.clone(), line, reason };
        if points.is_empty() {
            return Err(err(0, "no points".into()));
        }
        for (i, &(s, p)) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(err(i + 1, format!("probability {p} outside [0, 1]")));
            }
            if i > 0 {
                let (ps, pp) = points[i - 1];
                if s <= ps {
                    return Err(err(i + 1, format!("size {s} not strictly increasing")));
                }
                if p <= pp {
                    return Err(err(i + 1, format!("probability {p} not strictly increasing")));
                }
            }
        }
        let last = points[points.len() - 1].1;
        if (last - 1.0).abs() > 1e-9 {
            return Err(err(points.len(), format!("last cumulative probability is {last}, expected 1")));
        }
        Ok(SizeDistribution { name, points })
    }

    /// Parse `size cumulative_probability` lines; `#` starts a comment.
    pub fn parse(name: &str, text: &str) -> Result<Self, ConfigError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ConfigError::Cdf { name: name.to_string(), line: i + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(err(format!("expected 2 fields, found {}", fields.len())));
            }
            let size: f64 = fields[0].parse().map_err(|_| err(format!("bad size `{}`", fields[0])))?;
            if !(size >= 0.0) || size.fract() != 0.0 {
                return Err(err(format!("size `{}` is not a non-negative integer", fields[0])));
            }
            let p: f64 = fields[1].parse().map_err(|_| err(format!("bad probability `{}`", fields[1])))?;
            points.push((size as u64, p));
        }
        Self::new(name, points)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// A bundled distribution by name, or a CDF file path.
    pub fn load(name_or_path: &str) -> Result<Self, ConfigError> {
        if let Some((name, text)) = BUNDLED.iter().find(|(n, _)| *n == name_or_path) {
            return Self::parse(name, text);
        }
        let path = Path::new(name_or_path);
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(name_or_path, &text),
            Err(_) => Err(ConfigError::UnknownDistribution(name_or_path.to_string())),
        }
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn min(&self) -> u64 {
        self.points[0].0
    }

    pub fn max(&self) -> u64 {
        self.points[self.points.len() - 1].0
    }

    /// Inverse CDF at `u` with linear interpolation between points.
    pub fn quantile(&self, u: f64) -> u64 {
        let (s0, p0) = self.points[0];
        if u <= p0 {
            return s0;
        }
        let i = self.points.partition_point(|&(_, p)| p < u).min(self.points.len() - 1);
        let (sa, pa) = self.points[i - 1];
        let (sb, pb) = self.points[i];
        let x = sa as f64 + (u - pa) / (pb - pa) * (sb - sa) as f64;
        (x.round() as u64).clamp(self.min(), self.max())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.quantile(rng.gen::<f64>())
    }

    /// Mean of the piecewise-linear distribution.
    pub fn mean(&self) -> f64 {
        let (s0, p0) = self.points[0];
        let mut m = p0 * s0 as f64;
        for w in self.points.windows(2) {
            let ((sa, pa), (sb, pb)) = (w[0], w[1]);
            m += (pb - pa) * (sa + sb) as f64 / 2.0;
        }
        m
    }
}

/// Hosts with the same class id may not be paired (same ToR on fat trees).
pub type HostClass<'a> = Option<&'a [usize]>;

fn excluded(class: HostClass<'_>, a: HostId, b: HostId) -> bool {
    a == b || class.is_some_and(|c| c[a] == c[b])
}

/// Random permutation without fixed points (and without same-class pairs):
/// every host sends one flow of `size` bytes and receives one.
pub fn generate_permutation<R: Rng + ?Sized>(
    hosts: usize,
    size: u64,
    class: HostClass<'_>,
    rng: &mut R,
) -> Result<Vec<FlowSpec>, ConfigError> {
    if hosts < 2 {
        return Err(ConfigError::Workload(format!("permutation needs at least 2 hosts, got {hosts}")));
    }
    if let Some(c) = class {
        let mut counts = std::collections::HashMap::new();
        for &x in c {
            *counts.entry(x).or_insert(0usize) += 1;
        }
        if counts.values().any(|&n| 2 * n > hosts) {
            return Err(ConfigError::Workload(
                "no permutation avoids same-ToR partners: one ToR holds more than half the hosts".into(),
            ));
        }
    }
    let mut perm: Vec<HostId> = (0..hosts).collect();
    for _ in 0..1000 {
        perm.shuffle(rng);
        for i in 0..hosts {
            if !excluded(class, i, perm[i]) {
                continue;
            }
            let off = rng.gen_range(0..hosts);
            for k in 0..hosts {
                let j = (off + k) % hosts;
                if !excluded(class, i, perm[j]) && !excluded(class, j, perm[i]) {
                    perm.swap(i, j);
                    break;
                }
            }
        }
        if (0..hosts).all(|i| !excluded(class, i, perm[i])) {
            return Ok(perm
                .iter()
                .enumerate()
                .map(|(src, &dst)| FlowSpec { src, dst, size, start: FlowStart::At(SimTime::ZERO) })
                .collect());
        }
    }
    Err(ConfigError::Workload("could not construct a valid permutation".into()))
}

/// Every ordered pair exchanges `size` bytes. Source `i` sends to
/// `i+1, i+2, ...` (mod N) with at most `window` flows outstanding; each
/// further flow starts when the one `window` positions earlier completes.
pub fn generate_all_to_all(hosts: usize, size: u64, window: usize) -> Result<Vec<FlowSpec>, ConfigError> {
    if hosts < 2 {
        return Err(ConfigError::Workload(format!("all-to-all needs at least 2 hosts, got {hosts}")));
    }
    if window == 0 {
        return Err(ConfigError::Workload("all-to-all window must be at least 1".into()));
    }
    let per = hosts - 1;
    let mut flows = Vec::with_capacity(hosts * per);
    for src in 0..hosts {
        let base = flows.len();
        for k in 1..hosts {
            let start = if k <= window { FlowStart::At(SimTime::ZERO) } else { FlowStart::After(base + k - 1 - window) };
            flows.push(FlowSpec { src, dst: (src + k) % hosts, size, start });
        }
    }
    Ok(flows)
}

/// Closed loop: each host sends `flows_per_host` messages in sequence, each
/// to a fresh uniformly random partner with a size drawn from `dist`.
pub fn generate_random_uniform<R: Rng + ?Sized>(
    hosts: usize,
    dist: &SizeDistribution,
    flows_per_host: usize,
    class: HostClass<'_>,
    rng: &mut R,
) -> Result<Vec<FlowSpec>, ConfigError> {
    if hosts < 2 {
        return Err(ConfigError::Workload(format!("random-uniform needs at least 2 hosts, got {hosts}")));
    }
    let partners: Vec<Vec<HostId>> =
        (0..hosts).map(|s| (0..hosts).filter(|&d| !excluded(class, s, d)).collect()).collect();
    if partners.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Workload("some host has no eligible partner".into()));
    }
    let mut flows = Vec::with_capacity(hosts * flows_per_host);
    for k in 0..flows_per_host {
        for (src, candidates) in partners.iter().enumerate() {
            let dst = candidates[rng.gen_range(0..candidates.len())];
            let size = dist.sample(rng);
            let start = if k == 0 { FlowStart::At(SimTime::ZERO) } else { FlowStart::After(flows.len() - hosts) };
            flows.push(FlowSpec { src, dst, size, start });
        }
    }
    Ok(flows)
}
