//! Instances, schemas, CSV ingestion, batching and the synthetic generator.

mod batch;
mod csv_io;
mod synthetic;

pub use batch::{batch_indices, BatchIter};
pub use csv_io::{load_csv, read_csv, write_csv, write_csv_file};
pub use synthetic::{generate_splits, generate_synthetic, SampleCounts, Splits, SyntheticSpec, SyntheticWorld};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub features: Vec<FeatureSpec>,
}

/// One level of the scenario hierarchy, e.g. channel or domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioLevel {
    pub name: String,
    pub branches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub groups: Vec<FeatureGroup>,
    pub scenario_levels: Vec<ScenarioLevel>,
    pub tasks: Vec<String>,
}

impl DatasetSchema {
    /// Features in declared group order.
    pub fn features(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.groups.iter().flat_map(|g| g.features.iter())
    }

    pub fn n_features(&self) -> usize {
        self.groups.iter().map(|g| g.features.len()).sum()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.features().map(|f| f.vocab_size).collect()
    }

    pub fn level_branches(&self) -> Vec<usize> {
        self.scenario_levels.iter().map(|l| l.branches).collect()
    }

    /// Number of leaf scenarios (product of level cardinalities).
    pub fn n_scenarios(&self) -> usize {
        self.scenario_levels.iter().map(|l| l.branches).product()
    }

    /// Mixed-radix index of a scenario path, first level most significant.
    pub fn scenario_index(&self, path: &[usize]) -> usize {
        path.iter()
            .zip(&self.scenario_levels)
            .fold(0, |acc, (&p, l)| acc * l.branches + p)
    }

    pub fn scenario_path(&self, mut index: usize) -> Vec<usize> {
        let mut path = vec![0; self.scenario_levels.len()];
        for (slot, level) in path.iter_mut().zip(&self.scenario_levels).rev() {
            *slot = index % level.branches;
            index /= level.branches;
        }
        path
    }

    pub fn scenario_name(&self, index: usize) -> String {
        self.scenario_path(index)
            .iter()
            .zip(&self.scenario_levels)
            .map(|(p, l)| format!("{}{}", l.name, p))
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features() == 0 {
            return Err(Error::Config("schema declares no features".into()));
        }
        if self.scenario_levels.is_empty() {
            return Err(Error::Config("schema declares no scenario levels".into()));
        }
        if let Some(f) = self.features().find(|f| f.vocab_size == 0) {
            return Err(Error::Config(format!("feature {} has an empty vocabulary", f.name)));
        }
        if let Some(l) = self.scenario_levels.iter().find(|l| l.branches == 0) {
            return Err(Error::Config(format!("scenario level {} has no branches", l.name)));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("schema declares no tasks".into()));
        }
        Ok(())
    }

    /// Checks an instance against vocabularies, level cardinalities and the
    /// conversion-implies-click rule.
    pub fn check_instance(&self, inst: &Instance) -> Result<()> {
        if inst.features.len() != self.n_features() {
            return Err(Error::Data(format!(
                "instance has {} features, schema declares {}",
                inst.features.len(),
                self.n_features()
            )));
        }
        for (&id, f) in inst.features.iter().zip(self.features()) {
            if id >= f.vocab_size {
                return Err(Error::Data(format!(
                    "feature {} id {id} out of vocabulary (size {})",
                    f.name, f.vocab_size
                )));
            }
        }
        if inst.scenario_path.len() != self.scenario_levels.len() {
            return Err(Error::Data(format!(
                "scenario path has {} levels, schema declares {}",
                inst.scenario_path.len(),
                self.scenario_levels.len()
            )));
        }
        for (&p, l) in inst.scenario_path.iter().zip(&self.scenario_levels) {
            if p >= l.branches {
                return Err(Error::Data(format!(
                    "scenario level {} id {p} out of range ({} branches)",
                    l.name, l.branches
                )));
            }
        }
        if inst.click > 1 || inst.conversion > 1 {
            return Err(Error::Data(format!(
                "labels must be 0/1, got click={} conversion={}",
                inst.click, inst.conversion
            )));
        }
        if inst.conversion == 1 && inst.click == 0 {
            return Err(Error::Data("conversion=1 without a click".into()));
        }
        Ok(())
    }
}

/// One impression. `features[i]` is the value id of the i-th schema feature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<usize>,
    pub scenario_path: Vec<usize>,
    pub click: u8,
    pub conversion: u8,
}

impl Instance {
    /// `(group, feature-within-group, value)` triples in schema order.
    pub fn feature_triples(&self, schema: &DatasetSchema) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.features.len());
        let mut it = self.features.iter();
        for (g, group) in schema.groups.iter().enumerate() {
            for f in 0..group.features.len() {
                if let Some(&v) = it.next() {
                    out.push((g, f, v));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, instances: Vec<Instance>) -> Result<Self> {
        schema.validate()?;
        for (i, inst) in instances.iter().enumerate() {
            schema
                .check_instance(inst)
                .map_err(|e| Error::Data(format!("instance {i}: {e}")))?;
        }
        Ok(Dataset { schema, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn scenario_of(&self, inst: &Instance) -> usize {
        self.schema.scenario_index(&inst.scenario_path)
    }

    /// Instances of one leaf scenario, schema unchanged.
    pub fn filter_scenario(&self, scenario: usize) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            instances: self
                .instances
                .iter()
                .filter(|i| self.scenario_of(i) == scenario)
                .cloned()
                .collect(),
        }
    }

    pub fn scenario_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.n_scenarios()];
        for inst in &self.instances {
            counts[self.scenario_of(inst)] += 1;
        }
        counts
    }

    /// Per-scenario `(impressions, clicks, conversions)`.
    pub fn label_counts(&self) -> Vec<(usize, usize, usize)> {
        let mut counts = vec![(0, 0, 0); self.schema.n_scenarios()];
        for inst in &self.instances {
            let c = &mut counts[self.scenario_of(inst)];
            c.0 += 1;
            c.1 += inst.click as usize;
            c.2 += inst.conversion as usize;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_schema() -> DatasetSchema {
        DatasetSchema {
            groups: vec![
                FeatureGroup {
                    name: "user".into(),
                    features: vec![FeatureSpec { name: "age".into(), vocab_size: 4 }],
                },
                FeatureGroup {
                    name: "item".into(),
                    features: vec![FeatureSpec { name: "brand".into(), vocab_size: 5 }],
                },
            ],
            scenario_levels: vec![
                ScenarioLevel { name: "channel".into(), branches: 2 },
                ScenarioLevel { name: "domain".into(), branches: 3 },
            ],
            tasks: vec!["ctr".into(), "cvr".into()],
        }
    }

    #[test]
    fn scenario_index_round_trips() {
        let s = tiny_schema();
        assert_eq!(s.n_scenarios(), 6);
        for i in 0..6 {
            assert_eq!(s.scenario_index(&s.scenario_path(i)), i);
        }
        assert_eq!(s.scenario_index(&[1, 2]), 5);
        assert_eq!(s.scenario_name(4), "channel1/domain1");
    }

    #[test]
    fn instance_checks() {
        let s = tiny_schema();
        let ok = Instance { features: vec![3, 4], scenario_path: vec![1, 2], click: 1, conversion: 1 };
        assert!(s.check_instance(&ok).is_ok());
        let oov = Instance { features: vec![4, 0], ..ok.clone() };
        let msg = s.check_instance(&oov).unwrap_err().to_string();
        assert!(msg.contains("age") && msg.contains('4'), "{msg}");
        let bad_label = Instance { click: 0, conversion: 1, ..ok.clone() };
        assert!(s.check_instance(&bad_label).is_err());
        let bad_path = Instance { scenario_path: vec![2, 0], ..ok };
        assert!(s.check_instance(&bad_path).is_err());
    }

    #[test]
    fn triples_follow_group_order() {
        let s = tiny_schema();
        let inst = Instance { features: vec![3, 4], scenario_path: vec![0, 0], click: 0, conversion: 0 };
        assert_eq!(inst.feature_triples(&s), vec![(0, 0, 3), (1, 0, 4)]);
    }
}
