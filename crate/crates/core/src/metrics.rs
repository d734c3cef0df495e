//! Hard Dice evaluation and the run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> LabelMap {
    let [n, c, h, w] = logits.dims();
    let p = h * w;
    let mut out = vec![0u32; n * p];
    for s in 0..n {
        let dst = &mut out[s * p..(s + 1) * p];
        let mut best: Vec<T> = logits.plane(s, 0).to_vec();
        for ch in 1..c {
            for ((b, d), &v) in best.iter_mut().zip(dst.iter_mut()).zip(logits.plane(s, ch)) {
                if v > *b {
                    *b = v;
                    *d = ch as u32;
                }
            }
        }
    }
    LabelMap::from_vec([n, h, w], out).expect("extents follow the logits")
}

/// Running overlap counts for hard Dice, accumulated across samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiceCounts {
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    truth: Vec<u64>,
}

impl DiceCounts {
    pub fn new(num_classes: usize) -> Self {
        DiceCounts {
            intersection: vec![0; num_classes],
            predicted: vec![0; num_classes],
            truth: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.truth.len()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(dim_err!(
                "prediction {:?} and truth {:?} differ",
                pred.dims(),
                truth.dims()
            ));
        }
        let k = self.num_classes();
        pred.validate(k)?;
        truth.validate(k)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.predicted[p as usize] += 1;
            self.truth[t as usize] += 1;
            if p == t {
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    /// `2|P ∩ T| / (|P| + |T|)` per class; `None` when the class appears in
    /// neither prediction nor truth.
    pub fn dice(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let denom = self.predicted[c] + self.truth[c];
                (denom > 0).then(|| 2.0 * self.intersection[c] as f64 / denom as f64)
            })
            .collect()
    }
}

pub fn hard_dice(
    pred: &LabelMap,
    truth: &LabelMap,
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut counts = DiceCounts::new(num_classes);
    counts.add(pred, truth)?;
    Ok(counts.dice())
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Named subsets of foreground classes summarized by their mean Dice.
pub type ClassGroups = Vec<(String, Vec<usize>)>;

/// Evaluation summary of one trained model on one split.
///
/// `per_class_dice` has one entry per class including background at index
/// 0; the mean, standard deviation and group means cover present foreground
/// classes only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub split: String,
    pub samples: usize,
    pub per_class_dice: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub group_means: BTreeMap<String, Option<f64>>,
    pub param_total: usize,
    pub loss_curve: Vec<(usize, f64)>,
}

pub const REPORT_HEADER: &str = "# cdfnet report v1";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_owned(), |x| format!("{x:.6}"))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "absent" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("report key {key}: bad number {v:?}")))
}

impl MetricsReport {
    pub fn new(
        variant: &str,
        split: &str,
        samples: usize,
        per_class_dice: Vec<Option<f64>>,
        groups: &[(String, Vec<usize>)],
        param_total: usize,
        loss_curve: Vec<(usize, f64)>,
    ) -> Self {
        let fg: Vec<f64> = per_class_dice.iter().skip(1).flatten().copied().collect();
        let (mean, std) = match mean_std(&fg) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        let group_means = groups
            .iter()
            .map(|(name, classes)| {
                let vals: Vec<f64> = classes
                    .iter()
                    .filter_map(|&c| per_class_dice.get(c).copied().flatten())
                    .collect();
                (name.clone(), mean_std(&vals).map(|(m, _)| m))
            })
            .collect();
        MetricsReport {
            variant: variant.to_owned(),
            split: split.to_owned(),
            samples,
            per_class_dice,
            mean,
            std,
            group_means,
            param_total,
            loss_curve,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_dice.len()
    }

    /// Human-readable table: one row per foreground class, then summaries.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant  {}", self.variant);
        let _ = writeln!(s, "split    {} ({} samples)", self.split, self.samples);
        let _ = writeln!(s, "params   {}", self.param_total);
        let _ = writeln!(s, "class  dice");
        for (c, d) in self.per_class_dice.iter().enumerate().skip(1) {
            let _ = writeln!(s, "{c:>5}  {}", fmt_opt(*d));
        }
        match (self.mean, self.std) {
            (Some(m), Some(sd)) => {
                let _ = writeln!(s, "mean   {m:.4} +/- {sd:.4}");
            }
            _ => {
                let _ = writeln!(s, "mean   absent");
            }
        }
        for (name, m) in &self.group_means {
            let _ = writeln!(s, "group  {name} {}", fmt_opt(*m));
        }
        if let Some((e, l)) = self.loss_curve.last() {
            let _ = writeln!(s, "final training loss {l:.6} (epoch {e})");
        }
        s
    }

    /// Machine-readable `key = value` lines; see the README for key names.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "num_classes = {}", self.num_classes());
        let _ = writeln!(s, "param_total = {}", self.param_total);
        for (c, d) in self.per_class_dice.iter().enumerate() {
            let _ = writeln!(s, "dice.{c} = {}", fmt_opt(*d));
        }
        let _ = writeln!(s, "dice.mean = {}", fmt_opt(self.mean));
        let _ = writeln!(s, "dice.std = {}", fmt_opt(self.std));
        for (name, m) in &self.group_means {
            let _ = writeln!(s, "group.{name} = {}", fmt_opt(*m));
        }
        for (e, l) in &self.loss_curve {
            let _ = writeln!(s, "loss.{e} = {l:e}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::Format("missing report header".into()));
        }
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line without '=': {line:?}")))?;
            kv.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("report lacks key {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("report key {k} is not an integer")))
        };
        let num_classes = int("num_classes")?;
        let per_class_dice = (0..num_classes)
            .map(|c| {
                let k = format!("dice.{c}");
                parse_opt(&k, &get(&k)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut group_means = BTreeMap::new();
        let mut loss_curve = Vec::new();
        for (k, v) in &kv {
            if let Some(name) = k.strip_prefix("group.") {
                group_means.insert(name.to_owned(), parse_opt(k, v)?);
            } else if let Some(e) = k.strip_prefix("loss.") {
                let e = e
                    .parse()
                    .map_err(|_| Error::Format(format!("bad loss epoch in {k}")))?;
                let l = parse_opt(k, v)?.ok_or_else(|| Error::Format(format!("{k} is absent")))?;
                loss_curve.push((e, l));
            }
        }
        loss_curve.sort_by_key(|&(e, _)| e);
        Ok(MetricsReport {
            variant: get("variant")?,
            split: get("split")?,
            samples: int("samples")?,
            per_class_dice,
            mean: parse_opt("dice.mean", &get("dice.mean")?)?,
            std: parse_opt("dice.std", &get("dice.std")?)?,
            group_means,
            param_total: int("param_total")?,
            loss_curve,
        })
    }
}

/// Side-by-side comparison of several reports: one row per class, one column
/// per run.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let col = reports
        .iter()
        .map(|r| r.variant.len() + 2)
        .fold(12, usize::max);
    let mut s = String::new();
    let _ = write!(s, "{:<14}", "");
    for r in reports {
        let _ = write!(s, "{:>col$}", r.variant);
    }
    s.push('\n');
    let k = reports
        .iter()
        .map(MetricsReport::num_classes)
        .max()
        .unwrap_or(0);
    let mut row = |label: String, vals: Vec<Option<f64>>| {
        let _ = write!(s, "{label:<14}");
        for v in vals {
            let _ = write!(
                s,
                "{:>col$}",
                v.map_or("absent".to_owned(), |x| format!("{x:.4}"))
            );
        }
        s.push('\n');
    };
    for c in 1..k {
        row(
            format!("class {c}"),
            reports
                .iter()
                .map(|r| r.per_class_dice.get(c).copied().flatten())
                .collect(),
        );
    }
    row("mean".into(), reports.iter().map(|r| r.mean).collect());
    row("std".into(), reports.iter().map(|r| r.std).collect());
    let mut groups: Vec<&String> = reports.iter().flat_map(|r| r.group_means.keys()).collect();
    groups.sort();
    groups.dedup();
    for g in groups {
        row(
            g.clone(),
            reports
                .iter()
                .map(|r| r.group_means.get(g).copied().flatten())
                .collect(),
        );
    }
    let _ = write!(s, "{:<14}", "params");
    for r in reports {
        let _ = write!(s, "{:>col$}", r.param_total);
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(data: Vec<u32>) -> LabelMap {
        LabelMap::from_vec([1, 1, data.len()], data).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let t = lm(vec![0, 1, 1, 2, 0]);
        let d = hard_dice(&t, &t, 4).unwrap();
        assert_eq!(d, vec![Some(1.0), Some(1.0), Some(1.0), None]);
    }

    #[test]
    fn half_overlap() {
        let mut p = vec![0u32; 300];
        let mut t = vec![0u32; 300];
        p[..100].fill(1);
        t[50..150].fill(1);
        let d = hard_dice(&lm(p), &lm(t), 2).unwrap();
        assert_eq!(d[1], Some(0.5));
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = lm(vec![0, 1, 2, 2, 1, 0, 3]);
        let b = lm(vec![1, 1, 2, 0, 0, 0, 3]);
        assert_eq!(hard_dice(&a, &b, 4).unwrap(), hard_dice(&b, &a, 4).unwrap());
    }

    #[test]
    fn argmax_prefers_lowest_class_on_ties() {
        let logits =
            Tensor::<f64>::from_vec([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(predict_labels(&logits).data(), &[0, 1]);
    }

    #[test]
    fn report_summaries_skip_background_and_absent() {
        let groups = vec![
            ("rare".to_owned(), vec![3]),
            ("common".to_owned(), vec![1, 2]),
        ];
        let r = MetricsReport::new(
            "bl0",
            "test",
            2,
            vec![Some(0.99), Some(0.8), Some(0.6), None],
            &groups,
            10,
            vec![],
        );
        assert!((r.mean.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(r.group_means["rare"], None);
        assert!((r.group_means["common"].unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(
            r.to_text()
                .lines()
                .filter(|l| l.starts_with("    "))
                .count(),
            3
        );
    }

    #[test]
    fn kv_round_trip() {
        let r = MetricsReport::new(
            "cdfnet",
            "val",
            5,
            vec![Some(0.9), Some(0.25), None],
            &[("g".to_owned(), vec![1])],
            1234,
            vec![(0, 1.5), (1, 0.75)],
        );
        let back = MetricsReport::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back.per_class_dice, r.per_class_dice);
        assert_eq!(back.loss_curve, r.loss_curve);
        assert_eq!(back.param_total, 1234);
        assert!(comparison_table(&[r.clone(), back]).contains("class 2"));
        assert!(MetricsReport::from_kv("variant = x").is_err());

        let mut long = r.clone();
        long.variant = "cdfnet:a_rather_long_run_name".into();
        let table = comparison_table(&[long, r]);
        assert_eq!(table.lines().next().unwrap().split_whitespace().count(), 2);
    }
}
