//! Wild test mixtures: known-class samples (clean and/or shifted) plus
//! semantic outliers, labeled accept or reject under a fixed model.

use std::fmt;

use crate::arithmetic::ComposedModel;
use crate::error::{Error, Result};
use crate::rng::{seeded, shuffle};
use crate::tensor::Matrix;

use super::LabeledSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Clean,
    Cov,
    Sem,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Clean => "clean",
            Source::Cov => "cov",
            Source::Sem => "sem",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixtureCounts {
    pub clean_total: usize,
    pub clean_correct: usize,
    pub cov_total: usize,
    pub cov_correct: usize,
    /// Misclassified shifted samples kept after subsampling.
    pub cov_misclassified_kept: usize,
    pub sem_total: usize,
    pub sem_kept: usize,
}

/// A scored evaluation set. `accept[i]` holds iff sample `i` is a
/// known-class sample the model classifies correctly.
#[derive(Clone, Debug)]
pub struct WildMixture {
    pub inputs: Matrix,
    pub labels: Vec<Option<usize>>,
    pub predicted: Vec<usize>,
    pub sources: Vec<Source>,
    pub accept: Vec<bool>,
    pub counts: MixtureCounts,
}

impl WildMixture {
    pub fn len(&self) -> usize {
        self.accept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accept.is_empty()
    }

    fn push_rows(&mut self, set: &LabeledSet, rows: &[usize], predicted: &[usize], source: Source) {
        for &r in rows {
            let y = set.labels[r];
            self.labels.push(y);
            self.predicted.push(predicted[r]);
            self.sources.push(source);
            self.accept.push(source != Source::Sem && y == Some(predicted[r]));
        }
    }
}

/// Assembles the mixture for `model`.
///
/// With `equal_counts`, the larger of {misclassified shifted samples,
/// semantic samples} is subsampled (seeded by `subsample_seed`) to the size
/// of the smaller; this fails with a protocol error when the model
/// misclassifies no shifted sample. Correctly classified shifted samples and
/// the optional clean set are always kept whole. Sample order is clean,
/// shifted, semantic, each in original order.
pub fn build_wild_mixture(
    model: &ComposedModel,
    cov_test: &LabeledSet,
    sem_test: &LabeledSet,
    equal_counts: bool,
    include_clean: Option<&LabeledSet>,
    subsample_seed: u64,
) -> Result<WildMixture> {
    let cov_labels = cov_test.class_labels()?;
    let cov_pred = model.forward(&cov_test.inputs)?.argmax_rows();
    let sem_pred = model.forward(&sem_test.inputs)?.argmax_rows();

    let (cov_right, mut cov_wrong): (Vec<usize>, Vec<usize>) =
        (0..cov_test.len()).partition(|&i| cov_pred[i] == cov_labels[i]);
    let mut sem_rows: Vec<usize> = (0..sem_test.len()).collect();

    if equal_counts {
        if cov_wrong.is_empty() {
            return Err(Error::Protocol(
                "equal-count subsampling needs at least one misclassified shifted sample; the model has none".into(),
            ));
        }
        let mut rng = seeded(subsample_seed);
        let n = cov_wrong.len().min(sem_rows.len());
        let larger = if cov_wrong.len() > sem_rows.len() {
            &mut cov_wrong
        } else {
            &mut sem_rows
        };
        shuffle(&mut rng, larger);
        larger.truncate(n);
        larger.sort_unstable();
    }

    let mut cov_rows: Vec<usize> = cov_right.iter().chain(&cov_wrong).copied().collect();
    cov_rows.sort_unstable();

    let mut mixture = WildMixture {
        inputs: Matrix::zeros(0, 0),
        labels: Vec::new(),
        predicted: Vec::new(),
        sources: Vec::new(),
        accept: Vec::new(),
        counts: MixtureCounts {
            cov_total: cov_test.len(),
            cov_correct: cov_right.len(),
            cov_misclassified_kept: cov_wrong.len(),
            sem_total: sem_test.len(),
            sem_kept: sem_rows.len(),
            ..MixtureCounts::default()
        },
    };
    let mut parts = Vec::new();
    if let Some(clean) = include_clean {
        let labels = clean.class_labels()?;
        let pred = model.forward(&clean.inputs)?.argmax_rows();
        let rows: Vec<usize> = (0..clean.len()).collect();
        mixture.counts.clean_total = clean.len();
        mixture.counts.clean_correct = rows.iter().filter(|&&i| pred[i] == labels[i]).count();
        mixture.push_rows(clean, &rows, &pred, Source::Clean);
        parts.push(clean.inputs.clone());
    }
    mixture.push_rows(cov_test, &cov_rows, &cov_pred, Source::Cov);
    parts.push(cov_test.inputs.select_rows(&cov_rows));
    mixture.push_rows(sem_test, &sem_rows, &sem_pred, Source::Sem);
    parts.push(sem_test.inputs.select_rows(&sem_rows));
    let refs: Vec<&Matrix> = parts.iter().collect();
    mixture.inputs = Matrix::vstack(&refs)?;
    Ok(mixture)
}
