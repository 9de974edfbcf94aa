// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::Trace;
use crate::tensor::Real;

/// Share of each domain's tokens that had a given expert in its top-k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationTable {
    pub domains: Vec<String>,
    /// `entries[layer][expert][domain]`.
    pub entries: Vec<Vec<Vec<f64>>>,
    /// Tokens seen per domain; zero when loaded from CSV.
    pub token_counts: Vec<usize>,
    pub k: usize,
    pub n: usize,
    pub uniform_baseline: f64,
}

impl SpecializationTable {
    pub fn n_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn domain_index(&self, label: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == label)
            .ok_or_else(|| Error::param(format!("domain {label:?} not in table")))
    }

    /// Fractions of every expert for one (layer, domain).
    pub fn column(&self, layer: usize, domain: usize) -> Vec<f64> {
        self.entries[layer].iter().map(|e| e[domain]).collect()
    }

    /// Largest expert share in this (layer, domain) and its expert.
    pub fn max_share(&self, layer: usize, domain: usize) -> (usize, f64) {
        let col = self.column(layer, domain);
        let best = crate::tensor::argmax(&col);
        (best, col[best])
    }

    /// `layer,expert,domain,fraction`, rows in layer, expert, domain order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,domain,fraction\n");
        for (l, experts) in self.entries.iter().enumerate() {
            for (e, doms) in experts.iter().enumerate() {
                for (d, f) in doms.iter().enumerate() {
                    writeln!(out, "{l},{e},{},{f}", self.domains[d]).unwrap();
                }
            }
        }
        out
    }

    /// Parses [`Self::to_csv`] output; `k` is checked against the column sums.
    pub fn from_csv(text: &str, k: usize) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            what: "specialization table".into(),
            message: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "layer,expert,domain,fraction" => {}
            _ => {
                return Err(parse_err(
                    1,
                    "expected header layer,expert,domain,fraction".into(),
                ))
            }
        }
        let mut rows = Vec::new();
        let mut domains: Vec<String> = Vec::new();
        let (mut max_l, mut max_e) = (0, 0);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(parse_err(
                    i + 1,
                    format!("expected 4 fields, got {}", f.len()),
                ));
            }
            let l: usize = f[0]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("layer: {e}")))?;
            let e: usize = f[1]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("expert: {e}")))?;
            let v: f64 = f[3]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("fraction: {e}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(i + 1, format!("fraction {v} outside [0, 1]")));
            }
            if !domains.iter().any(|d| d == f[2]) {
                domains.push(f[2].to_string());
            }
            max_l = max_l.max(l);
            max_e = max_e.max(e);
            rows.push((l, e, f[2].to_string(), v));
        }
        if rows.is_empty() {
            return Err(parse_err(2, "no rows".into()));
        }
        let (n_layers, n) = (max_l + 1, max_e + 1);
        let mut entries = vec![vec![vec![f64::NAN; domains.len()]; n]; n_layers];
        for (l, e, d, v) in rows {
            let di = domains.iter().position(|x| *x == d).unwrap();
            if !entries[l][e][di].is_nan() {
                return Err(Error::Consistency(format!(
                    "duplicate entry for layer {l}, expert {e}, domain {d}"
                )));
            }
            entries[l][e][di] = v;
        }
        if entries.iter().flatten().flatten().any(|v| v.is_nan()) {
            return Err(Error::Consistency(
                "specialization table has missing entries".into(),
            ));
        }
        let table = Self {
            token_counts: vec![0; domains.len()],
            domains,
            entries,
            k,
            n,
            uniform_baseline: k as f64 / n as f64,
        };
        table.check_mass(1e-9)?;
        Ok(table)
    }

    /// Every (layer, domain) column must sum to `k`.
    pub fn check_mass(&self, tol: f64) -> Result<()> {
        for l in 0..self.n_layers() {
            for d in 0..self.domains.len() {
                let s: f64 = self.column(l, d).iter().sum();
                if (s - self.k as f64).abs() > tol {
                    return Err(Error::Consistency(format!(
                        "layer {l}, domain {}: fractions sum to {s}, expected k = {}",
                        self.domains[d], self.k
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Streaming selection counts, so traces need not be kept around.
#[derive(Debug, Clone)]
pub struct SpecializationCounter {
    domains: Vec<String>,
    n_layers: usize,
    n: usize,
    k: usize,
    counts: Vec<Vec<Vec<u64>>>,
    tokens: Vec<usize>,
}

impl SpecializationCounter {
    pub fn new(domains: &[String], n_layers: usize, n: usize, k: usize) -> Self {
        Self {
            domains: domains.to_vec(),
            n_layers,
            n,
            k,
            counts: vec![vec![vec![0; domains.len()]; n]; n_layers],
            tokens: vec![0; domains.len()],
        }
    }

    pub fn add<T: Real>(&mut self, domain: usize, trace: &Trace<T>) -> Result<()> {
        if domain >= self.domains.len() {
            return Err(Error::param(format!("domain index {domain} out of range")));
        }
        if trace.layers.len() != self.n_layers {
            return Err(Error::Consistency(format!(
                "trace has {} layers, expected {}",
                trace.layers.len(),
                self.n_layers
            )));
        }
        for (l, lt) in trace.layers.iter().enumerate() {
            for tr in &lt.tokens {
                if tr.selected.len() != self.k {
                    return Err(Error::Consistency(format!(
                        "token selected {} experts, expected k = {}",
                        tr.selected.len(),
                        self.k
                    )));
                }
                for &e in &tr.selected {
                    if e >= self.n {
                        return Err(Error::Consistency(format!("expert {e} out of range")));
                    }
                    self.counts[l][e][domain] += 1;
                }
            }
        }
        self.tokens[domain] += trace.seq_len();
        Ok(())
    }

    pub fn finish(self) -> Result<SpecializationTable> {
        if let Some(d) = self.tokens.iter().position(|&t| t == 0) {
            return Err(Error::param(format!(
                "domain {:?} has no tokens",
                self.domains[d]
            )));
        }
        let entries = self
            .counts
            .iter()
            .map(|experts| {
                experts
                    .iter()
                    .map(|doms| {
                        doms.iter()
                            .zip(&self.tokens)
                            .map(|(&c, &t)| c as f64 / t as f64)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(SpecializationTable {
            domains: self.domains,
            entries,
            token_counts: self.tokens,
            k: self.k,
            n: self.n,
            uniform_baseline: self.k as f64 / self.n as f64,
        })
    }
}

/// Builds the table from traces grouped by domain label.
pub fn expert_specialization<T: Real>(
    groups: &[(String, Vec<Trace<T>>)],
) -> Result<SpecializationTable> {
    let first = groups
        .iter()
        .flat_map(|(_, ts)| ts.first())
        .next()
        .ok_or_else(|| Error::param("no traces given"))?;
    let lt0 = first
        .layers
        .first()
        .ok_or_else(|| Error::param("trace has no layers"))?;
    let tr0 = lt0
        .tokens
        .first()
        .ok_or_else(|| Error::param("trace has no tokens"))?;
    let (n, k) = (tr0.probs.len(), tr0.selected.len());
    let labels: Vec<String> = groups.iter().map(|(d, _)| d.clone()).collect();
    let mut counter = SpecializationCounter::new(&labels, first.layers.len(), n, k);
    for (d, (_, traces)) in groups.iter().enumerate() {
        for t in traces {
            counter.add(d, t)?;
        }
    }
    counter.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{LayerTrace, TokenRouting};
    use crate::tensor::Tensor;

    fn fake_trace(selections: &[Vec<usize>], n: usize) -> Trace<f32> {
        let tokens = selections
            .iter()
            .map(|sel| TokenRouting {
                u: Tensor::zeros(&[1]),
                probs: Tensor::filled(&[n], 1.0 / n as f32),
                selected: sel.clone(),
                gates: vec![1.0 / n as f32; sel.len()],
                expert_outputs: vec![],
                shared_output: Tensor::zeros(&[1]),
                h: Tensor::zeros(&[1]),
            })
            .collect();
        Trace {
            tokens: vec![0; selections.len()],
            layers: vec![LayerTrace {
                layer: 0,
                active_k: selections[0].len(),
                tokens,
            }],
        }
    }

    #[test]
    fn hand_count_two_thirds() {
        let t = fake_trace(&[vec![2, 0], vec![1, 3], vec![2, 1]], 4);
        let table = expert_specialization(&[("A".to_string(), vec![t])]).unwrap();
        assert_eq!(table.entries[0][2][0], 2.0 / 3.0);
        assert_eq!(table.entries[0][1][0], 2.0 / 3.0);
        assert_eq!(table.entries[0][0][0], 1.0 / 3.0);
        assert_eq!(table.token_counts, vec![3]);
        assert_eq!(table.uniform_baseline, 0.5);
        table.check_mass(1e-12).unwrap();
    }

    #[test]
    fn empty_domain_rejected() {
        let t = fake_trace(&[vec![0]], 2);
        let groups = vec![("A".to_string(), vec![t]), ("B".to_string(), vec![])];
        assert!(matches!(
            expert_specialization(&groups),
            Err(Error::Parameter(_))
        ));
        assert!(expert_specialization::<f32>(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let a = fake_trace(&[vec![2, 0], vec![1, 3], vec![2, 1]], 4);
        let b = fake_trace(&[vec![3, 0]], 4);
        let table =
            expert_specialization(&[("A".to_string(), vec![a]), ("B".to_string(), vec![b])])
                .unwrap();
        let csv = table.to_csv();
        assert!(
            csv.starts_with("layer,expert,domain,fraction\n0,0,A,0.3333333333333333\n0,0,B,1\n")
        );
        let back = SpecializationTable::from_csv(&csv, 2).unwrap();
        assert_eq!(back.entries, table.entries);
        assert_eq!(back.domains, table.domains);
        assert!(matches!(
            SpecializationTable::from_csv(&csv, 3),
            Err(Error::Consistency(_))
        ));
        let missing: String = csv.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(SpecializationTable::from_csv(&missing, 2).is_err());
        assert!(matches!(
            SpecializationTable::from_csv("a,b\n", 2),
            Err(Error::Parse { .. })
        ));
        assert!(
            SpecializationTable::from_csv("layer,expert,domain,fraction\n0,0,A,1.5\n", 1).is_err()
        );
    }
}
