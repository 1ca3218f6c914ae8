//! Per-pair results, means over defined values, and TSV/table rendering.

use std::fmt::Write as _;

use super::homography::MMA_THRESHOLDS;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Mean of the defined values; `None` when there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyPairResult {
    pub sequence: String,
    /// Index of the second image; the first is always image 1.
    pub target: usize,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    pub repeatability: Option<f64>,
    pub matching_score: Option<f64>,
    pub mma: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HomographyReport {
    pub pairs: Vec<HomographyPairResult>,
    pub skipped: usize,
}

impl HomographyReport {
    pub fn mean_repeatability(&self) -> Option<f64> {
        mean_defined(self.pairs.iter().map(|p| p.repeatability))
    }

    pub fn mean_matching_score(&self) -> Option<f64> {
        mean_defined(self.pairs.iter().map(|p| p.matching_score))
    }

    /// Mean MMA per threshold.
    pub fn mean_mma(&self) -> Vec<Option<f64>> {
        (0..MMA_THRESHOLDS.len())
            .map(|i| mean_defined(self.pairs.iter().map(|p| p.mma.get(i).copied().flatten())))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sequence\tpair\tkp_a\tkp_b\tmatches\trep\tms");
        for t in MMA_THRESHOLDS {
            let _ = write!(s, "\tmma@{t}");
        }
        s.push('\n');
        for p in &self.pairs {
            let _ = write!(
                s,
                "{}\t1-{}\t{}\t{}\t{}\t{}\t{}",
                p.sequence,
                p.target,
                p.keypoints_a,
                p.keypoints_b,
                p.matches,
                fmt_opt(p.repeatability),
                fmt_opt(p.matching_score)
            );
            for v in &p.mma {
                let _ = write!(s, "\t{}", fmt_opt(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs evaluated  {}", self.pairs.len());
        let _ = writeln!(s, "pairs skipped    {}", self.skipped);
        let _ = writeln!(s, "Rep. (%)         {}", fmt_opt(self.mean_repeatability()));
        let _ = writeln!(s, "M.S. (%)         {}", fmt_opt(self.mean_matching_score()));
        for (t, v) in MMA_THRESHOLDS.iter().zip(self.mean_mma()) {
            let _ = writeln!(s, "MMA@{t:<2} (%)      {}", fmt_opt(v));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarPairResult {
    pub name: String,
    /// Putative matches before geometric verification.
    pub corrs_m: usize,
    /// Share of putative matches consistent with the ground truth.
    pub inlier_m: Option<f64>,
    /// RANSAC inliers; `None` when estimation failed.
    pub corrs: Option<usize>,
    /// Share of RANSAC inliers consistent with the ground truth.
    pub inlier: Option<f64>,
    /// Mean normalized distance of the virtual correspondences under the estimate.
    pub mean_sed: Option<f64>,
    pub recalled: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpipolarReport {
    pub pairs: Vec<EpipolarPairResult>,
    pub skipped: usize,
}

impl EpipolarReport {
    pub fn recall(&self) -> Option<f64> {
        (!self.pairs.is_empty())
            .then(|| 100.0 * self.pairs.iter().filter(|p| p.recalled).count() as f64 / self.pairs.len() as f64)
    }

    pub fn mean_inlier(&self) -> Option<f64> {
        mean_defined(self.pairs.iter().map(|p| p.inlier))
    }

    pub fn mean_inlier_m(&self) -> Option<f64> {
        mean_defined(self.pairs.iter().map(|p| p.inlier_m))
    }

    pub fn mean_corrs(&self) -> Option<f64> {
        mean_defined(self.pairs.iter().map(|p| p.corrs.map(|c| c as f64)))
    }

    pub fn mean_corrs_m(&self) -> Option<f64> {
        mean_defined(self.pairs.iter().map(|p| Some(p.corrs_m as f64)))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("pair\tcorrs_m\tinlier_m\tcorrs\tinlier\tmean_sed\trecalled\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.name,
                p.corrs_m,
                fmt_opt(p.inlier_m),
                p.corrs.map_or_else(|| "-".to_string(), |c| c.to_string()),
                fmt_opt(p.inlier),
                p.mean_sed.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}")),
                u8::from(p.recalled)
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs evaluated  {}", self.pairs.len());
        let _ = writeln!(s, "pairs skipped    {}", self.skipped);
        let _ = writeln!(s, "%Recall          {}", fmt_opt(self.recall()));
        let _ = writeln!(s, "%Inlier          {}", fmt_opt(self.mean_inlier()));
        let _ = writeln!(s, "%Inlier-m        {}", fmt_opt(self.mean_inlier_m()));
        let _ = writeln!(s, "#Corrs           {}", fmt_opt(self.mean_corrs()));
        let _ = writeln!(s, "#Corrs-m         {}", fmt_opt(self.mean_corrs_m()));
        s
    }
}
