//! Feature groups keyed by application-context ids, and assembly of
//! encoded feature vectors at decision time.
//!
//! Assembly is total: any lookup, decode or transform failure produces the
//! missing sentinel (NaN, or an all-zero one-hot block) with the mask bit
//! set, never an error.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Pseudo-group whose features are read straight from the application
/// context instead of the store.
pub const CONTEXT_GROUP: &str = "context";

pub type AppContext = serde_json::Map<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Real,
    Integer,
    Categorical,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub key_field: String,
    pub schema: Vec<FeatureField>,
}

impl FeatureGroup {
    pub fn new(name: &str, key_field: &str, schema: &[(&str, FeatureKind)]) -> Self {
        Self {
            name: name.to_string(),
            key_field: key_field.to_string(),
            schema: schema
                .iter()
                .map(|(n, k)| FeatureField { name: n.to_string(), kind: *k })
                .collect(),
        }
    }

    fn field(&self, name: &str) -> Option<&FeatureField> {
        self.schema.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl FeatureValue {
    fn from_json(v: &Value) -> Option<Self> {
        match v {
            Value::Bool(b) => Some(FeatureValue::Bool(*b)),
            Value::Number(n) => n
                .as_i64()
                .map(FeatureValue::Int)
                .or_else(|| n.as_f64().map(FeatureValue::Real)),
            Value::String(s) => Some(FeatureValue::Text(s.clone())),
            _ => None,
        }
    }

    fn as_number(&self) -> Option<f64> {
        let v = match self {
            FeatureValue::Bool(b) => f64::from(u8::from(*b)),
            FeatureValue::Int(i) => *i as f64,
            FeatureValue::Real(r) => *r,
            FeatureValue::Text(_) => return None,
        };
        v.is_finite().then_some(v)
    }

    fn as_category(&self) -> String {
        match self {
            FeatureValue::Bool(b) => b.to_string(),
            FeatureValue::Int(i) => i.to_string(),
            FeatureValue::Real(r) => r.to_string(),
            FeatureValue::Text(s) => s.clone(),
        }
    }

    /// Normalizes a value into the representation of `kind`, or `None` if
    /// the value cannot be stored under that kind.
    fn coerce(&self, kind: FeatureKind) -> Option<Self> {
        match (kind, self) {
            (FeatureKind::Real, FeatureValue::Real(r)) => Some(FeatureValue::Real(*r)),
            (FeatureKind::Real, FeatureValue::Int(i)) => Some(FeatureValue::Real(*i as f64)),
            (FeatureKind::Integer, FeatureValue::Int(i)) => Some(FeatureValue::Int(*i)),
            (FeatureKind::Categorical, FeatureValue::Text(s)) => Some(FeatureValue::Text(s.clone())),
            (FeatureKind::Categorical, FeatureValue::Int(i)) => Some(FeatureValue::Text(i.to_string())),
            (FeatureKind::Binary, FeatureValue::Bool(b)) => Some(FeatureValue::Bool(*b)),
            (FeatureKind::Binary, FeatureValue::Int(0)) => Some(FeatureValue::Bool(false)),
            (FeatureKind::Binary, FeatureValue::Int(1)) => Some(FeatureValue::Bool(true)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    Log1p,
    Bucketize { bounds: Vec<f64> },
    OneHot { vocabulary: Vec<String> },
    Clamp { lo: f64, hi: f64 },
}

impl TransformSpec {
    pub fn width(&self) -> usize {
        match self {
            TransformSpec::OneHot { vocabulary } => vocabulary.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            TransformSpec::Bucketize { bounds } => {
                if bounds.is_empty() {
                    return Err("bucketize needs at least one bound".into());
                }
                if bounds.iter().any(|b| !b.is_finite()) {
                    return Err("bucketize bounds must be finite".into());
                }
                if bounds.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("bucketize bounds must be strictly increasing".into());
                }
            }
            TransformSpec::OneHot { vocabulary } => {
                if vocabulary.is_empty() {
                    return Err("one_hot vocabulary must be nonempty".into());
                }
                let mut seen = std::collections::HashSet::new();
                if !vocabulary.iter().all(|v| seen.insert(v)) {
                    return Err("one_hot vocabulary has duplicates".into());
                }
            }
            TransformSpec::Clamp { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(format!("clamp bounds invalid: [{lo}, {hi}]"));
                }
            }
            TransformSpec::Identity | TransformSpec::Log1p => {}
        }
        Ok(())
    }

    /// Encodes into `out` (length `width()`); returns false for missing.
    fn encode(&self, raw: &FeatureValue, out: &mut [f64]) -> bool {
        match self {
            TransformSpec::OneHot { vocabulary } => {
                let cat = raw.as_category();
                match vocabulary.iter().position(|v| *v == cat) {
                    Some(i) => {
                        out.fill(0.0);
                        out[i] = 1.0;
                        true
                    }
                    None => false,
                }
            }
            _ => {
                let Some(x) = raw.as_number() else { return false };
                let y = match self {
                    TransformSpec::Identity => x,
                    TransformSpec::Log1p => {
                        if x <= -1.0 {
                            return false;
                        }
                        x.ln_1p()
                    }
                    TransformSpec::Bucketize { bounds } => bounds.partition_point(|b| *b <= x) as f64,
                    TransformSpec::Clamp { lo, hi } => x.clamp(*lo, *hi),
                    TransformSpec::OneHot { .. } => unreachable!(),
                };
                out[0] = y;
                y.is_finite()
            }
        }
    }
}

/// One entry of a blueprint's feature config. Two refs denote the same
/// feature only if group, name and transform all match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub group: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformSpec>,
}

impl FeatureRef {
    pub fn new(group: &str, name: &str) -> Self {
        Self { group: group.to_string(), name: name.to_string(), transform: None }
    }

    pub fn with_transform(mut self, t: TransformSpec) -> Self {
        self.transform = Some(t);
        self
    }

    pub fn transform(&self) -> &TransformSpec {
        const IDENTITY: TransformSpec = TransformSpec::Identity;
        self.transform.as_ref().unwrap_or(&IDENTITY)
    }

    pub fn width(&self) -> usize {
        self.transform().width()
    }

    /// Names of the encoded slots: the feature name, or `name=value` for
    /// each one-hot slot.
    pub fn slot_names(&self) -> Vec<String> {
        match self.transform() {
            TransformSpec::OneHot { vocabulary } => {
                vocabulary.iter().map(|v| format!("{}={v}", self.name)).collect()
            }
            _ => vec![self.name.clone()],
        }
    }
}

/// Total slot count for a feature config.
pub fn slot_count(features: &[FeatureRef]) -> usize {
    features.iter().map(FeatureRef::width).sum()
}

/// Slot names in order, for addressing slots from policies.
pub fn slot_names(features: &[FeatureRef]) -> Vec<String> {
    features.iter().flat_map(FeatureRef::slot_names).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    #[serde(with = "nan_as_null")]
    pub values: Vec<f64>,
    pub missing_mask: Vec<bool>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values with masked slots replaced by NaN, the form models consume.
    pub fn model_input(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.missing_mask)
            .map(|(v, m)| if *m { f64::NAN } else { *v })
            .collect()
    }
}

/// Serializes NaN entries of a float vector as JSON null and back.
pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

type Record = Arc<BTreeMap<String, FeatureValue>>;

struct GroupEntry {
    def: FeatureGroup,
    rows: HashMap<String, Record>,
}

/// In-process feature store. Writes to one `(group, key)` replace the
/// record pointer atomically, so readers see the old or new record whole.
#[derive(Default)]
pub struct FeatureStore {
    groups: RwLock<HashMap<String, GroupEntry>>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    groups: Vec<FeatureGroup>,
    rows: BTreeMap<String, BTreeMap<String, BTreeMap<String, FeatureValue>>>,
}

fn context_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_group(&self, group: FeatureGroup) -> Result<()> {
        let mut problems = Vec::new();
        if group.name.is_empty() {
            problems.push("group name is empty".to_string());
        }
        if group.name == CONTEXT_GROUP {
            problems.push(format!("`{CONTEXT_GROUP}` is reserved"));
        }
        if group.schema.is_empty() {
            problems.push("schema is empty".to_string());
        }
        let mut seen = std::collections::HashSet::new();
        for f in &group.schema {
            if !seen.insert(&f.name) {
                problems.push(format!("feature `{}` declared twice", f.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let mut groups = self.groups.write();
        if groups.contains_key(&group.name) {
            return Err(Error::duplicate("feature group", &group.name));
        }
        groups.insert(group.name.clone(), GroupEntry { def: group, rows: HashMap::new() });
        Ok(())
    }

    pub fn group(&self, name: &str) -> Option<FeatureGroup> {
        self.groups.read().get(name).map(|g| g.def.clone())
    }

    pub fn has_group(&self, name: &str) -> bool {
        name == CONTEXT_GROUP || self.groups.read().contains_key(name)
    }

    /// Merges `values` into the record for `key`; fields not mentioned keep
    /// their previous values.
    pub fn put_features(
        &self,
        group: &str,
        key: &str,
        values: &serde_json::Map<String, Value>,
    ) -> Result<()> {
        let mut groups = self.groups.write();
        let entry = groups.get_mut(group).ok_or_else(|| Error::not_found("feature group", group))?;
        let mut problems = Vec::new();
        let mut coerced = Vec::with_capacity(values.len());
        for (name, raw) in values {
            let Some(field) = entry.def.field(name) else {
                problems.push(format!("`{name}` is not in group `{group}`"));
                continue;
            };
            match FeatureValue::from_json(raw).and_then(|v| v.coerce(field.kind)) {
                Some(v) => coerced.push((name.clone(), v)),
                None => problems.push(format!("`{name}` expects {:?}, got {raw}", field.kind)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::KindMismatch(problems));
        }
        let mut record: BTreeMap<String, FeatureValue> =
            entry.rows.get(key).map(|r| (**r).clone()).unwrap_or_default();
        record.extend(coerced);
        entry.rows.insert(key.to_string(), Arc::new(record));
        Ok(())
    }

    fn raw_value(&self, fref: &FeatureRef, ctx: &AppContext) -> Option<FeatureValue> {
        if fref.group == CONTEXT_GROUP {
            return ctx.get(&fref.name).and_then(FeatureValue::from_json);
        }
        let record = {
            let groups = self.groups.read();
            let entry = groups.get(&fref.group)?;
            let key = ctx.get(&entry.def.key_field).and_then(context_key)?;
            entry.rows.get(&key).cloned()?
        };
        record.get(&fref.name).cloned()
    }

    /// Assembles the encoded vector for `features`. Never fails.
    pub fn assemble_vector(&self, features: &[FeatureRef], ctx: &AppContext) -> FeatureVector {
        let n = slot_count(features);
        let mut values = vec![0.0; n];
        let mut missing_mask = vec![false; n];
        let mut at = 0;
        for fref in features {
            let w = fref.width();
            let slots = &mut values[at..at + w];
            let ok = self
                .raw_value(fref, ctx)
                .map(|raw| fref.transform().encode(&raw, slots))
                .unwrap_or(false);
            if !ok {
                if w == 1 {
                    slots[0] = f64::NAN;
                } else {
                    slots.fill(0.0);
                }
                missing_mask[at..at + w].fill(true);
            }
            at += w;
        }
        FeatureVector { values, missing_mask }
    }

    /// Bulk-loads NDJSON rows; each row holds the group's key field plus
    /// feature values. Returns the number of rows loaded.
    pub fn load_ndjson(&self, group: &str, reader: impl BufRead) -> Result<usize> {
        let key_field = self
            .group(group)
            .ok_or_else(|| Error::not_found("feature group", group))?
            .key_field;
        let mut n = 0;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut row: serde_json::Map<String, Value> = serde_json::from_str(&line)?;
            let key = row
                .remove(&key_field)
                .as_ref()
                .and_then(context_key)
                .ok_or_else(|| Error::invalid(format!("line {}: missing key `{key_field}`", lineno + 1)))?;
            self.put_features(group, &key, &row)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let groups = self.groups.read();
        let mut snap = Snapshot { groups: Vec::new(), rows: BTreeMap::new() };
        for (name, entry) in groups.iter() {
            snap.groups.push(entry.def.clone());
            snap.rows.insert(
                name.clone(),
                entry.rows.iter().map(|(k, r)| (k.clone(), (**r).clone())).collect(),
            );
        }
        snap.groups.sort_by(|a, b| a.name.cmp(&b.name));
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&snap)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let snap: Snapshot = serde_json::from_slice(&std::fs::read(path)?)?;
        let store = Self::new();
        {
            let mut groups = store.groups.write();
            for def in snap.groups {
                let rows = snap
                    .rows
                    .get(&def.name)
                    .map(|r| r.iter().map(|(k, v)| (k.clone(), Arc::new(v.clone()))).collect())
                    .unwrap_or_default();
                groups.insert(def.name.clone(), GroupEntry { def, rows });
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ctx(v: Value) -> AppContext {
        v.as_object().unwrap().clone()
    }

    fn store() -> FeatureStore {
        let s = FeatureStore::new();
        s.register_group(FeatureGroup::new(
            "user_stats",
            "user_id",
            &[
                ("sessions_7d", FeatureKind::Real),
                ("country", FeatureKind::Categorical),
                ("age", FeatureKind::Integer),
                ("is_new", FeatureKind::Binary),
            ],
        ))
        .unwrap();
        s
    }

    #[test]
    fn register_errors() {
        let s = store();
        let dup = FeatureGroup::new("user_stats", "user_id", &[("x", FeatureKind::Real)]);
        assert!(matches!(s.register_group(dup), Err(Error::Duplicate { .. })));
        let empty = FeatureGroup::new("empty", "user_id", &[]);
        assert!(matches!(s.register_group(empty), Err(Error::Validation(_))));
    }

    #[test]
    fn log1p_slot() {
        let s = store();
        s.put_features("user_stats", "u1", &ctx(json!({"sessions_7d": 4.0}))).unwrap();
        let refs = [FeatureRef::new("user_stats", "sessions_7d").with_transform(TransformSpec::Log1p)];
        let v = s.assemble_vector(&refs, &ctx(json!({"user_id": "u1"})));
        assert!((v.values[0] - 5.0f64.ln()).abs() < 1e-12);
        assert!((v.values[0] - 1.6094).abs() < 1e-4);
        assert_eq!(v.missing_mask, vec![false]);
    }

    #[test]
    fn last_write_wins() {
        let s = store();
        s.put_features("user_stats", "u1", &ctx(json!({"sessions_7d": 4.0}))).unwrap();
        s.put_features("user_stats", "u1", &ctx(json!({"sessions_7d": 7}))).unwrap();
        let refs = [FeatureRef::new("user_stats", "sessions_7d")];
        let v = s.assemble_vector(&refs, &ctx(json!({"user_id": "u1"})));
        assert_eq!(v.values, vec![7.0]);
    }

    #[test]
    fn kind_mismatch() {
        let s = store();
        let err = s.put_features("user_stats", "u1", &ctx(json!({"sessions_7d": "four"})));
        assert!(matches!(err, Err(Error::KindMismatch(_))));
        let err = s.put_features("nope", "u1", &ctx(json!({"x": 1})));
        assert!(matches!(err, Err(Error::NotFound { .. })));
    }

    #[test]
    fn missing_context_key_masks_group_slots() {
        let s = store();
        s.put_features("user_stats", "u1", &ctx(json!({"sessions_7d": 4.0, "country": "b"}))).unwrap();
        let refs = [
            FeatureRef::new("user_stats", "sessions_7d"),
            FeatureRef::new("user_stats", "country").with_transform(TransformSpec::OneHot {
                vocabulary: vec!["a".into(), "b".into(), "c".into()],
            }),
            FeatureRef::new(CONTEXT_GROUP, "hour"),
        ];
        let v = s.assemble_vector(&refs, &ctx(json!({"hour": 13})));
        assert_eq!(v.len(), 5);
        assert!(v.values[0].is_nan());
        assert_eq!(&v.values[1..4], &[0.0, 0.0, 0.0]);
        assert_eq!(v.missing_mask, vec![true, true, true, true, false]);
        assert_eq!(v.values[4], 13.0);
    }

    #[test]
    fn one_hot_and_unknown_category() {
        let s = store();
        let vocab = TransformSpec::OneHot { vocabulary: vec!["a".into(), "b".into(), "c".into()] };
        let refs = [FeatureRef::new("user_stats", "country").with_transform(vocab)];
        s.put_features("user_stats", "u1", &ctx(json!({"country": "b"}))).unwrap();
        let v = s.assemble_vector(&refs, &ctx(json!({"user_id": "u1"})));
        assert_eq!(v.values, vec![0.0, 1.0, 0.0]);
        assert_eq!(v.missing_mask, vec![false; 3]);
        s.put_features("user_stats", "u1", &ctx(json!({"country": "zz"}))).unwrap();
        let v = s.assemble_vector(&refs, &ctx(json!({"user_id": "u1"})));
        assert_eq!(v.values, vec![0.0; 3]);
        assert_eq!(v.missing_mask, vec![true; 3]);
    }

    #[test]
    fn bucketize_and_clamp() {
        let s = store();
        s.put_features("user_stats", "u1", &ctx(json!({"age": 30, "is_new": 1}))).unwrap();
        let refs = [
            FeatureRef::new("user_stats", "age")
                .with_transform(TransformSpec::Bucketize { bounds: vec![18.0, 30.0, 65.0] }),
            FeatureRef::new("user_stats", "age").with_transform(TransformSpec::Clamp { lo: 0.0, hi: 25.0 }),
            FeatureRef::new("user_stats", "is_new"),
        ];
        let v = s.assemble_vector(&refs, &ctx(json!({"user_id": "u1"})));
        assert_eq!(v.values, vec![2.0, 25.0, 1.0]);
    }

    #[test]
    fn transform_validation() {
        assert!(TransformSpec::Bucketize { bounds: vec![1.0, 1.0] }.validate().is_err());
        assert!(TransformSpec::OneHot { vocabulary: vec![] }.validate().is_err());
        assert!(TransformSpec::OneHot { vocabulary: vec!["a".into(), "a".into()] }.validate().is_err());
        assert!(TransformSpec::Clamp { lo: 2.0, hi: 1.0 }.validate().is_err());
        assert!(TransformSpec::Bucketize { bounds: vec![0.0, 1.0] }.validate().is_ok());
    }

    #[test]
    fn ndjson_and_snapshot() {
        let s = store();
        let data = "{\"user_id\":\"u1\",\"sessions_7d\":2.5}\n\n{\"user_id\":7,\"age\":40}\n";
        assert_eq!(s.load_ndjson("user_stats", data.as_bytes()).unwrap(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.json");
        s.save_snapshot(&path).unwrap();
        let loaded = FeatureStore::load_snapshot(&path).unwrap();
        let refs = [FeatureRef::new("user_stats", "age")];
        let v = loaded.assemble_vector(&refs, &ctx(json!({"user_id": 7})));
        assert_eq!(v.values, vec![40.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clamp_stays_in_bounds(x in -1e9f64..1e9, lo in -100.0f64..0.0, width in 0.0f64..100.0) {
                let hi = lo + width;
                let t = TransformSpec::Clamp { lo, hi };
                let mut out = [0.0];
                prop_assert!(t.encode(&FeatureValue::Real(x), &mut out));
                prop_assert!(out[0] >= lo && out[0] <= hi);
            }

            #[test]
            fn bucketize_in_range(x in -1e6f64..1e6) {
                let bounds = vec![-10.0, 0.0, 5.0, 100.0];
                let t = TransformSpec::Bucketize { bounds: bounds.clone() };
                let mut out = [0.0];
                prop_assert!(t.encode(&FeatureValue::Real(x), &mut out));
                prop_assert!(out[0] >= 0.0 && out[0] <= bounds.len() as f64);
            }

            #[test]
            fn assembly_is_deterministic_and_fixed_length(user in "[a-z]{1,4}", v in proptest::option::of(-1e3f64..1e3)) {
                let s = store();
                if let Some(v) = v {
                    s.put_features("user_stats", &user, &ctx(json!({"sessions_7d": v}))).unwrap();
                }
                let refs = [
                    FeatureRef::new("user_stats", "sessions_7d").with_transform(TransformSpec::Log1p),
                    FeatureRef::new("user_stats", "country").with_transform(TransformSpec::OneHot { vocabulary: vec!["x".into(), "y".into()] }),
                ];
                let c = ctx(json!({"user_id": user}));
                let a = s.assemble_vector(&refs, &c);
                let b = s.assemble_vector(&refs, &c);
                prop_assert_eq!(a.len(), 3);
                prop_assert_eq!(a.missing_mask.clone(), b.missing_mask.clone());
                prop_assert_eq!(a.model_input().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                                b.model_input().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
