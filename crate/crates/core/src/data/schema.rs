use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MmflError, Result};

/// One attribute type and its mutually exclusive values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeType {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered list of attribute types used by the attribute heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub types: Vec<AttributeType>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let ty = |name: &str, values: &[&str]| AttributeType {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            types: vec![
                ty(
                    "Slv-Len",
                    &["Short Sleeves", "Sleeveless", "Half Sleeves", "Long Sleeves"],
                ),
                ty(
                    "Collar",
                    &["Crewneck", "Polo Collar", "Stand Collar", "V-neck"],
                ),
                ty(
                    "Fabric",
                    &[
                        "Cotton",
                        "Chiffon",
                        "Blended Yarn",
                        "Jeans Cloth",
                        "Lace",
                        "Hemp",
                    ],
                ),
                ty(
                    "Fitness",
                    &[
                        "Wide/Loose",
                        "Slim Fit",
                        "Rectangle-shaped",
                        "Hourglass-shaped",
                    ],
                ),
            ],
        }
    }
}

impl AttributeSchema {
    pub fn new(types: Vec<AttributeType>) -> Result<Self> {
        let schema = Self { types };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ty) in self.types.iter().enumerate() {
            if ty.values.len() < 2 {
                return Err(MmflError::Schema(format!(
                    "attribute type {} needs at least two values",
                    ty.name
                )));
            }
            for (j, v) in ty.values.iter().enumerate() {
                if ty.values[..j].contains(v) {
                    return Err(MmflError::Schema(format!(
                        "duplicate value {v:?} in attribute type {}",
                        ty.name
                    )));
                }
            }
            if self.types[..i].iter().any(|t| t.name == ty.name) {
                return Err(MmflError::Schema(format!(
                    "duplicate attribute type {}",
                    ty.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Value counts per type, in schema order.
    pub fn value_counts(&self) -> Vec<usize> {
        self.types.iter().map(|t| t.values.len()).collect()
    }

    pub fn total_values(&self) -> usize {
        self.types.iter().map(|t| t.values.len()).sum()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.name == name)
    }

    pub fn check_labels(&self, labels: &BTreeMap<String, usize>) -> Result<()> {
        for (name, &value) in labels {
            let idx = self
                .type_index(name)
                .ok_or_else(|| MmflError::Schema(format!("unknown attribute type {name:?}")))?;
            let count = self.types[idx].values.len();
            if value >= count {
                return Err(MmflError::Schema(format!(
                    "attribute {name} value {value} out of range (type has {count} values)"
                )));
            }
        }
        Ok(())
    }

    /// Dense per-type targets for one record; `None` where unlabeled.
    pub fn dense_targets(&self, labels: Option<&BTreeMap<String, usize>>) -> Vec<Option<usize>> {
        self.types
            .iter()
            .map(|t| labels.and_then(|l| l.get(&t.name).copied()))
            .collect()
    }
}
