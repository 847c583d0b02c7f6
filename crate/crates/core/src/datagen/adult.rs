//! Census income records resampled so that race and sex become spuriously
//! predictive of the label.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_probability, DataError, LabeledDataset, Oracle, Provenance};
use crate::autodiff::Tensor;
use crate::loss::Targets;
use crate::rng::{self, stream};

const CONTINUOUS: [usize; 6] = [0, 2, 4, 10, 11, 12];
const CATEGORICAL: [usize; 6] = [1, 3, 5, 6, 7, 13];
const RACE: usize = 8;
const SEX: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct AdultRecord {
    pub continuous: [f64; 6],
    /// workclass, education, marital-status, occupation, relationship,
    /// native-country; `"?"` is kept as its own category.
    pub categorical: [String; 6],
    pub black: bool,
    pub male: bool,
    pub income_high: bool,
}

impl AdultRecord {
    /// SG1 non-black male, SG2 non-black female, SG3 black male, SG4 black
    /// female (0-based).
    pub fn subgroup(&self) -> usize {
        2 * usize::from(self.black) + usize::from(!self.male)
    }
}

/// Parses one comma-separated record (14 attributes + income). Returns
/// `None` for blank or comment lines.
pub fn parse_adult_line(line: &str) -> Result<Option<AdultRecord>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('|') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 15 {
        return Err(format!("expected 15 fields, found {}", fields.len()));
    }
    let mut continuous = [0.0; 6];
    for (slot, &j) in continuous.iter_mut().zip(&CONTINUOUS) {
        *slot = fields[j]
            .parse()
            .map_err(|_| format!("field {j} is not numeric: {:?}", fields[j]))?;
    }
    let categorical = CATEGORICAL.map(|j| fields[j].to_string());
    let male = match fields[SEX] {
        "Male" => true,
        "Female" => false,
        other => return Err(format!("unknown sex {other:?}")),
    };
    let income_high = match fields[14].trim_end_matches('.') {
        ">50K" => true,
        "<=50K" => false,
        other => return Err(format!("unknown income label {other:?}")),
    };
    Ok(Some(AdultRecord {
        continuous,
        categorical,
        black: fields[RACE] == "Black",
        male,
        income_high,
    }))
}

/// Parsed records plus the number of malformed rows that were skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct AdultLoad {
    pub records: Vec<AdultRecord>,
    pub skipped: usize,
}

pub fn load_adult_csv(path: &Path) -> Result<AdultLoad, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        match parse_adult_line(line) {
            Ok(Some(r)) => records.push(r),
            Ok(None) => {}
            Err(msg) => {
                skipped += 1;
                log::debug!("{}:{}: skipped ({msg})", path.display(), lineno + 1);
            }
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed rows", path.display());
    }
    Ok(AdultLoad { records, skipped })
}

/// Encoding fitted on training records: z-scored continuous fields,
/// one-hot categoricals (unseen test categories encode as all zeros) and
/// binary race/sex indicators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdultEncoder {
    means: [f64; 6],
    sds: [f64; 6],
    vocab: Vec<Vec<String>>,
}

impl AdultEncoder {
    pub fn fit(records: &[AdultRecord]) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::Input("cannot fit an encoder on zero records".into()));
        }
        let n = records.len() as f64;
        let mut means = [0.0; 6];
        let mut sds = [0.0; 6];
        for j in 0..6 {
            means[j] = records.iter().map(|r| r.continuous[j]).sum::<f64>() / n;
            let var = records.iter().map(|r| (r.continuous[j] - means[j]).powi(2)).sum::<f64>() / n;
            sds[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let vocab = (0..6)
            .map(|j| {
                records
                    .iter()
                    .map(|r| r.categorical[j].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        Ok(Self { means, sds, vocab })
    }

    pub fn width(&self) -> usize {
        6 + self.vocab.iter().map(Vec::len).sum::<usize>() + 2
    }

    pub fn encode_row(&self, r: &AdultRecord, out: &mut Vec<f64>) {
        for j in 0..6 {
            out.push((r.continuous[j] - self.means[j]) / self.sds[j]);
        }
        for (j, words) in self.vocab.iter().enumerate() {
            let hit = words.binary_search(&r.categorical[j]).ok();
            out.extend((0..words.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
        }
        out.push(f64::from(u8::from(r.black)));
        out.push(f64::from(u8::from(r.male)));
    }
}

/// Target `P(Y = 1 | SG)` for SG1..SG4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdultSplit(pub [f64; 4]);

impl AdultSplit {
    pub const TRAIN: AdultSplit = AdultSplit([0.9, 0.1, 0.9, 0.1]);
    pub const IID: AdultSplit = AdultSplit([0.9, 0.1, 0.9, 0.1]);
    pub const IND: AdultSplit = AdultSplit([0.5, 0.5, 0.5, 0.5]);
    pub const OOD: AdultSplit = AdultSplit([0.1, 0.9, 0.1, 0.9]);
}

/// Within every subgroup of size `n_g`, draws `round(p_g·n_g)` positives and
/// the rest negatives with replacement, then shuffles the rows.
pub fn resample_adult_confounded(
    records: &[AdultRecord],
    encoder: &AdultEncoder,
    split: AdultSplit,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    split.0.iter().try_for_each(|&p| check_probability("P(Y=1|SG)", p))?;
    let mut rng = rng::seeded(seed, stream::DATA);
    let mut chosen: Vec<(usize, bool)> = Vec::with_capacity(records.len());
    for (g, &p) in split.0.iter().enumerate() {
        let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].subgroup() == g).collect();
        let n_g = members.len();
        let n_pos = (p * n_g as f64).round() as usize;
        let (pos, neg): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| records[i].income_high);
        for (pool, want, label) in [(&pos, n_pos, true), (&neg, n_g - n_pos, false)] {
            if want == 0 {
                continue;
            }
            if pool.is_empty() {
                return Err(DataError::Input(format!(
                    "subgroup SG{} has no {} examples to resample",
                    g + 1,
                    if label { "positive" } else { "negative" }
                )));
            }
            chosen.extend((0..want).map(|_| (pool[rng.random_range(0..pool.len())], label)));
        }
    }
    chosen.shuffle(&mut rng);
    let mut x = Vec::with_capacity(chosen.len() * encoder.width());
    for &(i, _) in &chosen {
        encoder.encode_row(&records[i], &mut x);
    }
    let labels = chosen.iter().map(|&(_, l)| usize::from(l)).collect();
    let oracle = Oracle::Subgroup {
        black: chosen.iter().map(|&(i, _)| records[i].black).collect(),
        male: chosen.iter().map(|&(i, _)| records[i].male).collect(),
    };
    let provenance = Provenance {
        generator: "adult-confounded".into(),
        params: serde_json::json!({ "p_pos": split.0, "n": chosen.len() }),
        seed,
    };
    LabeledDataset::new(
        Tensor::matrix(chosen.len(), encoder.width(), x).map_err(|e| DataError::Input(e.to_string()))?,
        Targets::classes(labels, 2),
        Some(oracle),
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROW: &str = "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K";

    #[test]
    fn parses_uci_row() {
        let r = parse_adult_line(ROW).unwrap().unwrap();
        assert_eq!(r.continuous, [39.0, 77516.0, 13.0, 2174.0, 0.0, 40.0]);
        assert_eq!(r.categorical[0], "State-gov");
        assert!(!r.black && r.male && !r.income_high);
        assert_eq!(r.subgroup(), 0);
    }

    #[test]
    fn black_male_is_sg3_and_test_suffix_parses() {
        let line = ROW.replace("White", "Black").replace("<=50K", ">50K.");
        let r = parse_adult_line(&line).unwrap().unwrap();
        assert_eq!(r.subgroup(), 2);
        assert!(r.income_high);
    }

    #[test]
    fn missing_marker_is_a_category() {
        let line = ROW.replace("State-gov", "?");
        let r = parse_adult_line(&line).unwrap().unwrap();
        assert_eq!(r.categorical[0], "?");
        assert!(parse_adult_line("1, 2, 3").is_err());
        assert!(parse_adult_line("|1x3 Cross validator").unwrap().is_none());
    }

    fn synthetic(n: usize) -> Vec<AdultRecord> {
        (0..n)
            .map(|i| AdultRecord {
                continuous: [i as f64, 1.0, 2.0, 0.0, 0.0, 40.0],
                categorical: ["a", "b", "c", "d", "e", "f"].map(|s| format!("{s}{}", i % 3)),
                black: i % 4 >= 2,
                male: i % 2 == 0,
                income_high: i % 5 == 0,
            })
            .collect()
    }

    #[test]
    fn resampling_hits_targets_and_keeps_sizes() {
        let recs = synthetic(4000);
        let enc = AdultEncoder::fit(&recs).unwrap();
        let ds = resample_adult_confounded(&recs, &enc, AdultSplit::TRAIN, 1).unwrap();
        let Some(Oracle::Subgroup { black, male }) = &ds.oracle else { panic!() };
        let y = ds.targets.labels().unwrap();
        for g in 0..4 {
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| 2 * usize::from(black[i]) + usize::from(!male[i]) == g).collect();
            assert_eq!(rows.len(), 1000);
            let rate = rows.iter().filter(|&&i| y[i] == 1).count() as f64 / rows.len() as f64;
            assert!((rate - AdultSplit::TRAIN.0[g]).abs() <= 0.01, "SG{} {rate}", g + 1);
        }
        assert_eq!(ds.d(), enc.width());
    }

    #[test]
    fn resampling_needs_both_classes() {
        let mut recs = synthetic(40);
        recs.iter_mut().for_each(|r| r.income_high = false);
        let enc = AdultEncoder::fit(&recs).unwrap();
        assert!(resample_adult_confounded(&recs, &enc, AdultSplit::IND, 0).is_err());
    }
}
