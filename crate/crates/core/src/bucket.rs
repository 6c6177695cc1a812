//! Request buckets: the 3×3 grid of input-length × output-length classes.
//!
//! Class maxima are the representative lengths: inputs ≤256 / ≤1024 /
//! ≤8192 tokens, outputs ≤100 / ≤350 / ≤610 tokens. Lengths beyond the top
//! boundary clamp into the long class, so classification is total.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Short / medium / long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LengthClass {
    Short,
    Medium,
    Long,
}

impl LengthClass {
    pub const ALL: [LengthClass; 3] = [LengthClass::Short, LengthClass::Medium, LengthClass::Long];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            LengthClass::Short => 'S',
            LengthClass::Medium => 'M',
            LengthClass::Long => 'L',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'S' => Some(LengthClass::Short),
            'M' => Some(LengthClass::Medium),
            'L' => Some(LengthClass::Long),
            _ => None,
        }
    }
}

pub const INPUT_BOUNDARIES: [u32; 3] = [256, 1024, 8192];
pub const OUTPUT_BOUNDARIES: [u32; 3] = [100, 350, 610];

pub fn input_class(tokens: u32) -> LengthClass {
    class_of(tokens, &INPUT_BOUNDARIES)
}

pub fn output_class(tokens: u32) -> LengthClass {
    class_of(tokens, &OUTPUT_BOUNDARIES)
}

fn class_of(tokens: u32, bounds: &[u32; 3]) -> LengthClass {
    if tokens <= bounds[0] {
        LengthClass::Short
    } else if tokens <= bounds[1] {
        LengthClass::Medium
    } else {
        LengthClass::Long
    }
}

/// One of the nine (input class, output class) buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BucketId {
    pub input: LengthClass,
    pub output: LengthClass,
}

impl BucketId {
    pub const COUNT: usize = 9;

    pub fn new(input: LengthClass, output: LengthClass) -> Self {
        Self { input, output }
    }

    /// Buckets in canonical order: S-S, S-M, S-L, M-S, … L-L.
    pub fn all() -> impl Iterator<Item = BucketId> + Clone {
        LengthClass::ALL.into_iter().flat_map(|i| LengthClass::ALL.into_iter().map(move |o| BucketId::new(i, o)))
    }

    pub fn index(self) -> usize {
        self.input.index() * 3 + self.output.index()
    }

    pub fn from_index(idx: usize) -> Self {
        assert!(idx < Self::COUNT, "bucket index {idx} out of range");
        BucketId::new(LengthClass::ALL[idx / 3], LengthClass::ALL[idx % 3])
    }

    /// Classify by true lengths.
    pub fn classify(input_tokens: u32, output_tokens: u32) -> Self {
        BucketId::new(input_class(input_tokens), output_class(output_tokens))
    }

    pub fn spec(self) -> BucketSpec {
        BucketSpec::of(self)
    }

    pub fn label(self) -> String {
        format!("{}-{}", self.input.letter(), self.output.letter())
    }
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.input.letter(), self.output.letter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown bucket label {0:?} (expected e.g. \"S-M\")")]
pub struct BadBucketLabel(pub String);

impl FromStr for BucketId {
    type Err = BadBucketLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        let parsed = match (chars.next(), chars.next(), chars.next(), chars.next()) {
            (Some(i), Some('-'), Some(o), None) => LengthClass::from_letter(i).zip(LengthClass::from_letter(o)),
            _ => None,
        };
        parsed.map(|(i, o)| BucketId::new(i, o)).ok_or_else(|| BadBucketLabel(s.to_string()))
    }
}

/// Class boundaries and representative lengths for one bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketSpec {
    pub id: BucketId,
    pub input_boundary: u32,
    pub output_boundary: u32,
    pub representative_input: u32,
    pub representative_output: u32,
}

impl BucketSpec {
    pub fn of(id: BucketId) -> Self {
        let input_boundary = INPUT_BOUNDARIES[id.input.index()];
        let output_boundary = OUTPUT_BOUNDARIES[id.output.index()];
        Self {
            id,
            input_boundary,
            output_boundary,
            representative_input: input_boundary,
            representative_output: output_boundary,
        }
    }

    /// Tokens a representative request holds at completion.
    pub fn representative_tokens(&self) -> u32 {
        self.representative_input + self.representative_output
    }
}

/// A value per bucket, stored in canonical order. Serialized as a map from
/// bucket label to value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BucketTable<T>(pub [T; BucketId::COUNT]);

impl<T: Copy> BucketTable<T> {
    pub fn splat(v: T) -> Self {
        Self([v; BucketId::COUNT])
    }

    pub fn iter(&self) -> impl Iterator<Item = (BucketId, T)> + '_ {
        self.0.iter().enumerate().map(|(i, v)| (BucketId::from_index(i), *v))
    }
}

impl<T> Index<BucketId> for BucketTable<T> {
    type Output = T;
    fn index(&self, b: BucketId) -> &T {
        &self.0[b.index()]
    }
}

impl<T> IndexMut<BucketId> for BucketTable<T> {
    fn index_mut(&mut self, b: BucketId) -> &mut T {
        &mut self.0[b.index()]
    }
}

impl<T: Serialize> Serialize for BucketTable<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(BucketId::COUNT))?;
        for (i, v) in self.0.iter().enumerate() {
            map.serialize_entry(&BucketId::from_index(i).label(), v)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de> + Copy + Default> Deserialize<'de> for BucketTable<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct TableVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Deserialize<'de> + Copy + Default> Visitor<'de> for TableVisitor<T> {
            type Value = BucketTable<T>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map with all nine bucket labels (S-S … L-L)")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = [T::default(); BucketId::COUNT];
                let mut seen = [false; BucketId::COUNT];
                while let Some((k, v)) = map.next_entry::<String, T>()? {
                    let id: BucketId = k.parse().map_err(de::Error::custom)?;
                    if seen[id.index()] {
                        return Err(de::Error::custom(format!("duplicate bucket {k}")));
                    }
                    seen[id.index()] = true;
                    out[id.index()] = v;
                }
                if let Some(missing) = seen.iter().position(|s| !s) {
                    return Err(de::Error::custom(format!("missing bucket {}", BucketId::from_index(missing))));
                }
                Ok(BucketTable(out))
            }
        }

        d.deserialize_map(TableVisitor(std::marker::PhantomData))
    }
}
