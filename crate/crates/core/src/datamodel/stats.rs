//! Corpus statistics: counts, averages, and token frequencies, exported as a
//! two-block CSV (`metric,value` rows followed by `token,count` rows).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::datamodel::types::{MultimodalSample, SentimentLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub reviews: usize,
    pub mean_tokens: f64,
    pub mean_labeled_aspects: f64,
    /// Counts of explicit polar labels, indexed like `SentimentLabel::POLAR`.
    pub sentiment_counts: [usize; 3],
    pub images: usize,
    pub rois: usize,
    /// Token frequencies, most frequent first (ties lexicographic).
    pub top_tokens: Vec<(String, usize)>,
}

/// Computes dataset statistics. An empty dataset yields all-zero counts.
pub fn dataset_stats(samples: &[MultimodalSample], top_n: usize) -> DatasetStats {
    let reviews = samples.len();
    let token_total: usize = samples.iter().map(|s| s.tokens.len()).sum();
    let label_total: usize = samples.iter().map(|s| s.labels.len()).sum();
    let mut sentiment_counts = [0usize; 3];
    let mut images = 0;
    let mut rois = 0;
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for sample in samples {
        for label in sample.labels.values() {
            let polar = SentimentLabel::POLAR
                .iter()
                .position(|p| p == label)
                .expect("validated samples carry only polar labels");
            sentiment_counts[polar] += 1;
        }
        images += sample.images.len();
        rois += sample.images.iter().map(|i| i.rois.len()).sum::<usize>();
        for token in &sample.tokens {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let divide = |num: usize| if reviews == 0 { 0.0 } else { num as f64 / reviews as f64 };
    DatasetStats {
        reviews,
        mean_tokens: divide(token_total),
        mean_labeled_aspects: divide(label_total),
        sentiment_counts,
        images,
        rois,
        top_tokens: ranked
            .into_iter()
            .take(top_n)
            .map(|(t, c)| (t.to_owned(), c))
            .collect(),
    }
}

/// Writes the stats CSV: a `metric,value` block followed by a `token,count`
/// block.
pub fn write_stats_csv(stats: &DatasetStats, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer.write_record(["metric", "value"]).map_err(|e| csv_err(path, e))?;
    let mut metric = |name: &str, value: String| -> Result<()> {
        writer.write_record([name, &value]).map_err(|e| csv_err(path, e))
    };
    metric("reviews", stats.reviews.to_string())?;
    metric("mean_tokens", format!("{}", stats.mean_tokens))?;
    metric("mean_labeled_aspects", format!("{}", stats.mean_labeled_aspects))?;
    for (i, polar) in SentimentLabel::POLAR.iter().enumerate() {
        metric(&format!("labels_{polar}"), stats.sentiment_counts[i].to_string())?;
    }
    metric("images", stats.images.to_string())?;
    metric("rois", stats.rois.to_string())?;
    writer.write_record(["token", "count"]).map_err(|e| csv_err(path, e))?;
    for (token, count) in &stats.top_tokens {
        writer
            .write_record([token.as_str(), &count.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::types::AspectCategory;
    use std::collections::BTreeMap;

    fn sample(id: &str, tokens: &[&str], labels: &[(AspectCategory, SentimentLabel)]) -> MultimodalSample {
        MultimodalSample {
            id: id.into(),
            text: tokens.join(" "),
            images: vec![],
            labels: labels.iter().copied().collect::<BTreeMap<_, _>>(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn averages_match_hand_computation() {
        let samples = vec![
            sample("a", &["x", "y", "z"], &[(AspectCategory::Room, SentimentLabel::Positive),
                                            (AspectCategory::Food, SentimentLabel::Negative)]),
            sample("b", &["x", "y", "z", "w", "v"], &[]),
        ];
        let stats = dataset_stats(&samples, 10);
        assert_eq!(stats.reviews, 2);
        assert!((stats.mean_tokens - 4.0).abs() < 1e-12);
        assert!((stats.mean_labeled_aspects - 1.0).abs() < 1e-12);
        assert_eq!(stats.sentiment_counts, [1, 0, 1]);
        assert_eq!(stats.top_tokens[0], ("x".to_string(), 2));
    }

    #[test]
    fn empty_dataset_is_all_zeros() {
        let stats = dataset_stats(&[], 5);
        assert_eq!(stats.reviews, 0);
        assert_eq!(stats.mean_tokens, 0.0);
        assert_eq!(stats.mean_labeled_aspects, 0.0);
        assert_eq!(stats.images, 0);
        assert!(stats.top_tokens.is_empty());
    }

    #[test]
    fn csv_has_both_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.csv");
        let samples = vec![sample("a", &["tốt", "tốt", "quá"], &[])];
        write_stats_csv(&dataset_stats(&samples, 2), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("metric,value\n"));
        assert!(text.contains("reviews,1\n"));
        assert!(text.contains("token,count\n"));
        assert!(text.contains("tốt,2\n"));
    }
}
