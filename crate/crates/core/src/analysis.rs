//! Cross-task aggregation over metric reports: Pearson correlation between
//! tasks, rank-based model ratings, and best-block selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_id: String,
    pub task_id: String,
    pub domain_id: String,
    pub block_id: Option<u8>,
    pub bin_id: Option<String>,
    pub metric: String,
    pub value: f64,
    pub higher_is_better: bool,
}

type RowKey<'a> = (&'a str, &'a str, &'a str, Option<u8>, Option<&'a str>, &'a str);

impl MetricRow {
    fn key(&self) -> RowKey<'_> {
        (
            &self.model_id,
            &self.task_id,
            &self.domain_id,
            self.block_id,
            self.bin_id.as_deref(),
            &self.metric,
        )
    }
}

/// Rows with unique `(model, task, domain, block, bin, metric)` keys and
/// finite values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        let mut r = Self::new();
        for row in rows {
            r.push(row)?;
        }
        Ok(r)
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if !row.value.is_finite() {
            return Err(Error::NonFinite(format!("metric {:?}", row.key())));
        }
        if self.rows.iter().any(|r| r.key() == row.key()) {
            return Err(Error::invalid(format!("duplicate metric row {:?}", row.key())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricReport) -> Result<()> {
        for row in other.rows {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn models(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.model_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Rows in canonical key order.
    pub fn sorted(&self) -> Self {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        Self { rows }
    }
}

/// A task column: `task/domain/metric[/bin]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskKey {
    pub task: String,
    pub domain: String,
    pub metric: String,
    pub bin: Option<String>,
}

impl TaskKey {
    pub fn new(task: &str, domain: &str, metric: &str, bin: Option<&str>) -> Self {
        Self {
            task: task.into(),
            domain: domain.into(),
            metric: metric.into(),
            bin: bin.map(String::from),
        }
    }

    fn matches(&self, row: &MetricRow) -> bool {
        row.task_id == self.task && row.domain_id == self.domain && row.metric == self.metric
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.task, self.domain, self.metric)?;
        if let Some(b) = &self.bin {
            write!(f, "/{b}")?;
        }
        Ok(())
    }
}

impl FromStr for TaskKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        if !(3..=4).contains(&parts.len()) || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::invalid(format!("task `{s}` is not task/domain/metric[/bin]")));
        }
        Ok(Self::new(parts[0], parts[1], parts[2], parts.get(3).copied()))
    }
}

/// Product-moment correlation; `None` if either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Block whose rows for `task` have the best mean value (max if higher is
/// better); ties go to the lowest block id. Returns the block and its rows.
pub fn best_block<'a>(report: &'a MetricReport, model: &str, task: &TaskKey) -> Option<(u8, Vec<&'a MetricRow>)> {
    let mut by_block: BTreeMap<u8, Vec<&MetricRow>> = BTreeMap::new();
    for r in report.rows() {
        if r.model_id == model && task.matches(r) {
            if let Some(b) = r.block_id {
                by_block.entry(b).or_default().push(r);
            }
        }
    }
    let mut best: Option<(u8, f64)> = None;
    for (&b, rows) in &by_block {
        let sign = if rows[0].higher_is_better { 1.0 } else { -1.0 };
        let score = sign * rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((b, score));
        }
    }
    best.map(|(b, _)| (b, by_block.remove(&b).unwrap_or_default()))
}

/// The value representing `model` on `task`: the unique matching row, or
/// for per-block rows the row from [`best_block`].
pub fn task_value(report: &MetricReport, model: &str, task: &TaskKey) -> Option<(f64, bool)> {
    let bin_ok = |r: &MetricRow| r.bin_id.as_deref() == task.bin.as_deref();
    let rows: Vec<&MetricRow> = report
        .rows()
        .iter()
        .filter(|r| r.model_id == model && task.matches(r) && bin_ok(r))
        .collect();
    if rows.iter().all(|r| r.block_id.is_none()) {
        return rows.first().map(|r| (r.value, r.higher_is_better));
    }
    let (block, _) = best_block(
        report,
        model,
        &TaskKey {
            bin: None,
            ..task.clone()
        },
    )?;
    rows.iter()
        .find(|r| r.block_id == Some(block))
        .map(|r| (r.value, r.higher_is_better))
}

/// Models that have a value for every task, with the value table.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTable {
    pub tasks: Vec<TaskKey>,
    pub models: Vec<String>,
    /// `values[model][task]`
    pub values: Vec<Vec<f64>>,
    pub higher_is_better: Vec<bool>,
    /// models dropped for missing a task
    pub excluded: Vec<String>,
}

pub fn task_table(report: &MetricReport, tasks: &[TaskKey]) -> Result<TaskTable> {
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks selected"));
    }
    let mut table = TaskTable {
        tasks: tasks.to_vec(),
        models: vec![],
        values: vec![],
        higher_is_better: vec![true; tasks.len()],
        excluded: vec![],
    };
    for model in report.models() {
        let vals: Option<Vec<(f64, bool)>> = tasks.iter().map(|t| task_value(report, &model, t)).collect();
        match vals {
            Some(v) => {
                for (j, (_, hib)) in v.iter().enumerate() {
                    table.higher_is_better[j] = *hib;
                }
                table.values.push(v.into_iter().map(|(x, _)| x).collect());
                table.models.push(model);
            }
            None => table.excluded.push(model),
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub tasks: Vec<TaskKey>,
    pub models: Vec<String>,
    pub excluded: Vec<String>,
    /// `None` where a task column has zero variance
    pub matrix: Vec<Vec<Option<f64>>>,
}

/// Pearson correlation between every pair of task columns across the
/// models that report all tasks.
pub fn task_correlation_matrix(report: &MetricReport, tasks: &[TaskKey]) -> Result<CorrelationMatrix> {
    let table = task_table(report, tasks)?;
    if table.models.len() < 2 {
        return Err(Error::invalid(format!(
            "correlation needs at least 2 models with every task, have {}",
            table.models.len()
        )));
    }
    let column = |j: usize| -> Vec<f64> { table.values.iter().map(|row| row[j]).collect() };
    let k = tasks.len();
    let mut matrix = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = pearson(&column(i), &column(j))?;
            let r = if i == j { r.map(|_| 1.0) } else { r };
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        tasks: table.tasks,
        models: table.models,
        excluded: table.excluded,
        matrix,
    })
}

/// Fractional ranks (1 = best); tied values share the mean of their ranks.
pub fn fractional_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if higher_is_better {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRating {
    pub model_id: String,
    pub rating: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ratings {
    pub ratings: Vec<ModelRating>,
    pub excluded: Vec<String>,
}

/// Per task `(n − rank) / (n − 1)`, averaged over tasks: 1 for the best
/// model, 0 for the worst.
pub fn rank_rating(report: &MetricReport, tasks: &[TaskKey]) -> Result<Ratings> {
    let table = task_table(report, tasks)?;
    let n = table.models.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "rating needs at least 2 models with every task, have {n}"
        )));
    }
    let mut sums = vec![0.0; n];
    for (j, hib) in table.higher_is_better.iter().enumerate() {
        let col: Vec<f64> = table.values.iter().map(|row| row[j]).collect();
        for (s, r) in sums.iter_mut().zip(fractional_ranks(&col, *hib)) {
            *s += (n as f64 - r) / (n as f64 - 1.0);
        }
    }
    Ok(Ratings {
        ratings: table
            .models
            .into_iter()
            .zip(sums)
            .map(|(model_id, s)| ModelRating {
                model_id,
                rating: s / tasks.len() as f64,
            })
            .collect(),
        excluded: table.excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(model: &str, task: &str, block: Option<u8>, bin: Option<&str>, value: f64) -> MetricRow {
        MetricRow {
            model_id: model.into(),
            task_id: task.into(),
            domain_id: "d".into(),
            block_id: block,
            bin_id: bin.map(String::from),
            metric: "m".into(),
            value,
            higher_is_better: true,
        }
    }

    fn key(task: &str) -> TaskKey {
        TaskKey::new(task, "d", "m", None)
    }

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0];
        // closed form: sxy = 5, sxx = 2, syy = 38/3
        let want = 5.0 / (2.0f64 * 38.0 / 3.0).sqrt();
        let r = pearson(&x, &[2.0, 4.0, 7.0]).unwrap().unwrap();
        assert!((r - want).abs() < 1e-12);
        assert!((r - 0.993399).abs() < 1e-6);
        let r = pearson(&x, &[2.0, 4.0, 8.0]).unwrap().unwrap();
        assert!((r - 0.9819).abs() < 1e-4);
        assert_eq!(pearson(&x, &x).unwrap(), Some(1.0));
        assert_eq!(pearson(&x, &[-1.0, -2.0, -3.0]).unwrap(), Some(-1.0));
        assert_eq!(pearson(&x, &[4.0; 3]).unwrap(), None);
        assert!(pearson(&x, &[1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ratings_fixtures() {
        let rep = MetricReport::from_rows(vec![
            row("a", "t", None, None, 0.9),
            row("b", "t", None, None, 0.5),
            row("c", "t", None, None, 0.1),
        ])
        .unwrap();
        let r = rank_rating(&rep, &[key("t")]).unwrap();
        let got: Vec<f64> = r.ratings.iter().map(|m| m.rating).collect();
        assert_eq!(got, vec![1.0, 0.5, 0.0]);

        let tied =
            MetricReport::from_rows(vec![row("a", "t", None, None, 3.0), row("b", "t", None, None, 3.0)]).unwrap();
        let r = rank_rating(&tied, &[key("t")]).unwrap();
        assert!(r.ratings.iter().all(|m| m.rating == 0.5));

        let single = MetricReport::from_rows(vec![row("a", "t", None, None, 3.0)]).unwrap();
        assert!(rank_rating(&single, &[key("t")]).is_err());
    }

    #[test]
    fn lower_is_better_ranks_reverse() {
        let mut rows = vec![row("a", "t", None, None, 1.0), row("b", "t", None, None, 2.0)];
        rows.iter_mut().for_each(|r| r.higher_is_better = false);
        let r = rank_rating(&MetricReport::from_rows(rows).unwrap(), &[key("t")]).unwrap();
        assert_eq!(r.ratings[0].rating, 1.0);
    }

    #[test]
    fn best_block_rules() {
        let mut rows = vec![];
        for (b, m) in [(0u8, 10.0), (1, 40.0), (2, 35.0), (3, 20.0)] {
            rows.push(row("x", "corr", Some(b), Some("0-15"), m - 5.0));
            rows.push(row("x", "corr", Some(b), Some("15-30"), m + 5.0));
        }
        let rep = MetricReport::from_rows(rows).unwrap();
        let (b, rows) = best_block(&rep, "x", &key("corr")).unwrap();
        assert_eq!((b, rows.len()), (1, 2));
        assert_eq!(
            task_value(&rep, "x", &TaskKey::new("corr", "d", "m", Some("15-30"))),
            Some((45.0, true))
        );

        let tie = MetricReport::from_rows(vec![
            row("x", "corr", Some(3), None, 7.0),
            row("x", "corr", Some(2), None, 7.0),
        ])
        .unwrap();
        assert_eq!(best_block(&tie, "x", &key("corr")).unwrap().0, 2);
        assert!(best_block(&tie, "y", &key("corr")).is_none());
    }

    #[test]
    fn correlation_matrix_matches_pairwise_calls() {
        let vals = [
            [0.1, 3.0, 7.0],
            [0.4, 1.0, 6.5],
            [0.2, 2.5, 1.0],
            [0.9, 0.5, 4.0],
            [0.6, 2.0, 2.0],
        ];
        let mut rows = vec![];
        for (i, v) in vals.iter().enumerate() {
            for (j, t) in ["t0", "t1", "t2"].iter().enumerate() {
                rows.push(row(&format!("m{i}"), t, None, None, v[j]));
            }
        }
        // a model missing t2 is excluded
        rows.push(row("zz", "t0", None, None, 1.0));
        let rep = MetricReport::from_rows(rows).unwrap();
        let tasks = [key("t0"), key("t1"), key("t2")];
        let c = task_correlation_matrix(&rep, &tasks).unwrap();
        assert_eq!(c.excluded, vec!["zz".to_string()]);
        for i in 0..3 {
            assert_eq!(c.matrix[i][i], Some(1.0));
            for j in 0..3 {
                let xi: Vec<f64> = vals.iter().map(|v| v[i]).collect();
                let xj: Vec<f64> = vals.iter().map(|v| v[j]).collect();
                let direct = pearson(&xi, &xj).unwrap().unwrap();
                assert!((c.matrix[i][j].unwrap() - direct).abs() < 1e-12);
                assert_eq!(c.matrix[i][j], c.matrix[j][i]);
            }
        }
        let dup = task_correlation_matrix(&rep, &[key("t1"), key("t1")]).unwrap();
        assert_eq!(dup.matrix[0][1], Some(1.0));
        let lonely = MetricReport::from_rows(vec![row("a", "t", None, None, 1.0)]).unwrap();
        assert!(task_correlation_matrix(&lonely, &[key("t")]).is_err());
    }

    #[test]
    fn report_invariants() {
        let mut rep = MetricReport::new();
        rep.push(row("a", "t", None, None, 1.0)).unwrap();
        assert!(rep.push(row("a", "t", None, None, 2.0)).is_err());
        assert!(rep.push(row("b", "t", None, None, f64::NAN)).is_err());
        assert_eq!("depth/nyu/delta1".parse::<TaskKey>().unwrap().bin, None);
        let k: TaskKey = "corr/scannet/recall/0-15".parse().unwrap();
        assert_eq!(k.to_string(), "corr/scannet/recall/0-15");
        assert!("a/b".parse::<TaskKey>().is_err());
        assert!("a//c".parse::<TaskKey>().is_err());
    }

    #[test]
    fn fractional_rank_ties() {
        assert_eq!(fractional_ranks(&[5.0, 7.0, 5.0, 1.0], true), vec![2.5, 1.0, 2.5, 4.0]);
        assert_eq!(fractional_ranks(&[5.0, 7.0, 5.0, 1.0], false), vec![2.5, 4.0, 2.5, 1.0]);
    }

    proptest! {
        #[test]
        fn rating_invariant_to_monotone_transform(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..8),
            scale in 0.1f64..5.0,
            shift in -3.0f64..3.0,
        ) {
            let build = |f: &dyn Fn(f64) -> f64| {
                let mut rows = vec![];
                for (i, (a, b)) in vals.iter().enumerate() {
                    rows.push(row(&format!("m{i}"), "t0", None, None, f(*a)));
                    rows.push(row(&format!("m{i}"), "t1", None, None, *b));
                }
                MetricReport::from_rows(rows).unwrap()
            };
            let tasks = [key("t0"), key("t1")];
            let a = rank_rating(&build(&|x| x), &tasks).unwrap();
            let b = rank_rating(&build(&|x| (x * scale + shift).exp()), &tasks).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pearson_affine_invariance(
            xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
            let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
            let x2: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            if let (Some(r1), Some(r2)) = (pearson(&x, &y).unwrap(), pearson(&x2, &y).unwrap()) {
                prop_assert!((r1 - r2).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r1));
            }
        }
    }
}
