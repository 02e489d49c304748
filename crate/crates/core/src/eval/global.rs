use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::auc::roc_auc_multiclass;
use super::context::ContextProvider;
use super::gbdt::{GbdtClassifier, GbdtConfig};
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::store::AsOfIndex;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalEvalConfig {
    pub gbdt: GbdtConfig,
}

/// Dense class ids for the labels present in the dataset.
pub fn label_classes(dataset: &LabeledDataset) -> BTreeMap<i64, usize> {
    let labels: std::collections::BTreeSet<i64> = dataset.sequences.values().filter_map(|s| s.label).collect();
    labels.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

/// Per-user `[h; g]` at the user's final event time, with class ids.
pub fn global_features(
    index: &AsOfIndex,
    provider: &ContextProvider<'_>,
    dataset: &LabeledDataset,
    split: Split,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let classes = label_classes(dataset);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for seq in dataset.sequences_in(split) {
        let label = seq
            .label
            .ok_or_else(|| Error::invalid(format!("user {} has no label", seq.user_id)))?;
        let t = seq.last_time();
        let h = index
            .asof(&seq.user_id, t)
            .ok_or_else(|| Error::MissingArtifact(format!("embedding of user {}", seq.user_id)))?
            .to_array();
        let g = provider.context_at(h.view(), t)?;
        rows.push(concatenate(Axis(0), &[h.view(), g.view()]).expect("1-d"));
        labels.push(classes[&label]);
    }
    let width = index.width() + provider.width();
    let mut x = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).assign(r);
    }
    Ok((x, labels))
}

/// Sequence-label ROC-AUC on the test split from GBDT over final `[h; g]`.
pub fn eval_global(
    index: &AsOfIndex,
    provider: &ContextProvider<'_>,
    dataset: &LabeledDataset,
    cfg: &GlobalEvalConfig,
    seed: u64,
) -> Result<f64> {
    let n_classes = label_classes(dataset).len();
    let (x_train, y_train) = global_features(index, provider, dataset, Split::Train)?;
    let (x_test, y_test) = global_features(index, provider, dataset, Split::Test)?;
    if x_test.nrows() == 0 {
        return Err(Error::invalid("test split is empty"));
    }
    let model = GbdtClassifier::fit(x_train.view(), &y_train, n_classes, &cfg.gbdt, seed)?;
    roc_auc_multiclass(model.predict_scores(x_test.view()).view(), &y_test)
}
