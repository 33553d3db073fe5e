//! Winner histograms per modality and their mutual information.

use std::fmt::Write as _;

use super::train::SampleResult;

#[derive(Clone, Debug, PartialEq)]
pub struct RouteStats {
    /// `[modality][token]` winner counts.
    pub token_hist: Vec<Vec<usize>>,
    /// `[modality][expert]` counts of the expert chosen for the winner token.
    pub expert_hist: Vec<Vec<usize>>,
    /// `[modality][expert]` top-1 assignments of every expert token in every layer.
    pub assignment_hist: Vec<Vec<usize>>,
    pub token_mi_bits: f64,
    pub expert_mi_bits: f64,
}

/// `I(row; column)` in bits of a joint count table.
pub fn mutual_information(hist: &[Vec<usize>]) -> f64 {
    let total: usize = hist.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let cols = hist.first().map_or(0, Vec::len);
    let col_sum: Vec<f64> = (0..cols).map(|c| hist.iter().map(|r| r[c] as f64).sum()).collect();
    let mut mi = 0.0;
    for row in hist {
        let rs: f64 = row.iter().map(|&x| x as f64).sum();
        for (c, &x) in row.iter().enumerate() {
            if x > 0 {
                let p = x as f64 / n;
                mi += p * (p * n * n / (rs * col_sum[c])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// Largest column share of each row.
pub fn dominant_share(hist: &[Vec<usize>]) -> Vec<f64> {
    hist.iter()
        .map(|r| {
            let t: usize = r.iter().sum();
            if t == 0 {
                0.0
            } else {
                *r.iter().max().expect("nonempty row") as f64 / t as f64
            }
        })
        .collect()
}

pub fn route_stats(samples: &[SampleResult], modalities: usize, tokens: usize, experts: usize) -> RouteStats {
    let mut token_hist = vec![vec![0usize; tokens]; modalities];
    let mut expert_hist = vec![vec![0usize; experts]; modalities];
    let mut assignment_hist = vec![vec![0usize; experts]; modalities];
    for s in samples {
        for (e, &c) in s.assignments.iter().enumerate() {
            assignment_hist[s.modality][e] += c;
        }
        token_hist[s.modality][s.winner] += 1;
        expert_hist[s.modality][s.winner_expert] += 1;
    }
    RouteStats {
        token_mi_bits: mutual_information(&token_hist),
        expert_mi_bits: mutual_information(&expert_hist),
        token_hist,
        expert_hist,
        assignment_hist,
    }
}

fn column_shares(hist: &[Vec<usize>]) -> Vec<f64> {
    let cols = hist.first().map_or(0, Vec::len);
    let total: usize = hist.iter().flatten().sum();
    (0..cols)
        .map(|c| {
            let n: usize = hist.iter().map(|r| r[c]).sum();
            if total == 0 {
                0.0
            } else {
                n as f64 / total as f64
            }
        })
        .collect()
}

fn hist_csv(hist: &[Vec<usize>], col: &str) -> String {
    let cols = hist.first().map_or(0, Vec::len);
    let mut s = String::from("modality");
    for c in 0..cols {
        let _ = write!(s, ",{col}{c}");
    }
    s.push_str(",total,dominant_share\n");
    for (m, (row, share)) in hist.iter().zip(dominant_share(hist)).enumerate() {
        let _ = write!(s, "{m}");
        for x in row {
            let _ = write!(s, ",{x}");
        }
        let _ = writeln!(s, ",{},{share:.6}", row.iter().sum::<usize>());
    }
    s
}

impl RouteStats {
    pub fn winners_csv(&self) -> String {
        let mut s = hist_csv(&self.token_hist, "token");
        let _ = writeln!(s, "# mutual_information_bits={:.6}", self.token_mi_bits);
        s
    }

    pub fn experts_csv(&self) -> String {
        let mut s = hist_csv(&self.expert_hist, "expert");
        let _ = writeln!(s, "# mutual_information_bits={:.6}", self.expert_mi_bits);
        s
    }

    pub fn assignments_csv(&self) -> String {
        hist_csv(&self.assignment_hist, "expert")
    }

    /// Share of winner tokens sent to each expert.
    pub fn expert_shares(&self) -> Vec<f64> {
        column_shares(&self.expert_hist)
    }

    /// Share of all token-to-expert assignments received by each expert.
    pub fn assignment_shares(&self) -> Vec<f64> {
        column_shares(&self.assignment_hist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutual_information_extremes() {
        // perfectly informative 4x4 diagonal: 2 bits
        let diag: Vec<Vec<usize>> = (0..4).map(|i| (0..4).map(|j| if i == j { 10 } else { 0 }).collect()).collect();
        assert!((mutual_information(&diag) - 2.0).abs() < 1e-12);
        let flat = vec![vec![5usize; 4]; 4];
        assert!(mutual_information(&flat).abs() < 1e-12);
    }

    #[test]
    fn dominant_shares() {
        assert_eq!(dominant_share(&[vec![1, 3], vec![2, 2]]), vec![0.75, 0.5]);
    }
}
