//! Band layouts and the gather rules that adapt one layout to another.
//!
//! Sentinel-2 bands use the 13-band order `B1 B2 B3 B4 B5 B6 B7 B8 B8A B9
//! B10 B11 B12`, so B4 is index 3 and B8 is index 7. Rule indices are always
//! 0-based into the available band list.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const S2_BANDS: [&str; 13] = [
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12",
];

/// Identifier of the implicit rule used when input and required specs match.
pub const IDENTITY_RULE: &str = "identity";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BandId {
    pub family: String,
    pub band: String,
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.family, self.band)
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl FromStr for BandId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, band) = s
            .split_once('/')
            .ok_or_else(|| Error::BandSpec(format!("band `{s}` is not `family/band`")))?;
        if !valid_token(family) || !valid_token(band) {
            return Err(Error::BandSpec(format!("malformed band `{s}`")));
        }
        Ok(BandId {
            family: family.to_string(),
            band: band.to_string(),
        })
    }
}

/// An ordered list of unique bands.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BandSpec {
    bands: Vec<BandId>,
}

impl BandSpec {
    pub fn new(bands: Vec<BandId>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::BandSpec("a band spec needs at least one band".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].contains(b) {
                return Err(Error::BandSpec(format!("duplicate band `{b}`")));
            }
        }
        Ok(Self { bands })
    }

    fn from_family(family: &str, names: &[&str]) -> Self {
        Self::new(
            names
                .iter()
                .map(|b| BandId {
                    family: family.to_string(),
                    band: b.to_string(),
                })
                .collect(),
        )
        .expect("static band lists are valid")
    }

    pub fn sentinel2() -> Self {
        Self::from_family("S2", &S2_BANDS)
    }

    pub fn sentinel1() -> Self {
        Self::from_family("S1", &["VV", "VH"])
    }

    pub fn rgb() -> Self {
        Self::from_family("RGB", &["R", "G", "B"])
    }

    pub fn irrg() -> Self {
        Self::from_family("IRRG", &["IR", "R", "G"])
    }

    /// Sentinel-2 followed by Sentinel-1: 15 co-registered bands.
    pub fn sentinel2_sentinel1() -> Self {
        let mut bands = Self::sentinel2().bands;
        bands.extend(Self::sentinel1().bands);
        Self { bands }
    }

    pub fn bands(&self) -> &[BandId] {
        &self.bands
    }

    pub fn count(&self) -> usize {
        self.bands.len()
    }
}

impl fmt::Display for BandSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.bands.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for BandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bands = s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<Vec<BandId>>>()?;
        Self::new(bands)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptationRule {
    pub rule_id: String,
    pub available: BandSpec,
    pub required: BandSpec,
    pub indices: Vec<usize>,
}

impl AdaptationRule {
    pub fn new(
        rule_id: impl Into<String>,
        available: BandSpec,
        required: BandSpec,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let rule = Self {
            rule_id: rule_id.into(),
            available,
            required,
            indices,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn identity(spec: &BandSpec) -> Self {
        Self {
            rule_id: IDENTITY_RULE.to_string(),
            available: spec.clone(),
            required: spec.clone(),
            indices: (0..spec.count()).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Rule {
            id: self.rule_id.clone(),
            reason,
        };
        if !valid_token(&self.rule_id) {
            return Err(fail("rule ids are non-empty [A-Za-z0-9_.-]".into()));
        }
        if self.indices.len() != self.required.count() {
            return Err(fail(format!(
                "{} indices for {} required bands",
                self.indices.len(),
                self.required.count()
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= self.available.count()) {
            return Err(fail(format!(
                "index {bad} out of range for {} available bands",
                self.available.count()
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rule_id == IDENTITY_RULE
    }
}

impl fmt::Display for AdaptationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(
            f,
            "{} | {} | {} | {}",
            self.rule_id,
            self.available,
            self.required,
            idx.join(",")
        )
    }
}

/// Output channel `j` is input channel `rule.indices[j]`. The channel axis is
/// the third from last, so both `C×H×W` and `N×C×H×W` images are accepted.
pub fn apply_rule(image: &Tensor, rule: &AdaptationRule) -> Result<Tensor> {
    let nd = image.ndim();
    if nd < 3 {
        return Err(Error::Shape(format!(
            "image needs channel and spatial axes, got {:?}",
            image.shape()
        )));
    }
    let c = image.shape()[nd - 3];
    if c != rule.available.count() {
        return Err(Error::Shape(format!(
            "rule `{}` expects {} channels, image has {c}",
            rule.rule_id,
            rule.available.count()
        )));
    }
    let hw = image.shape()[nd - 2] * image.shape()[nd - 1];
    let outer: usize = image.shape()[..nd - 3].iter().product();
    let mut data = Vec::with_capacity(outer * rule.indices.len() * hw);
    for o in 0..outer {
        for &src in &rule.indices {
            let start = (o * c + src) * hw;
            data.extend_from_slice(&image.data()[start..start + hw]);
        }
    }
    let mut shape = image.shape().to_vec();
    shape[nd - 3] = rule.indices.len();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Branch {
    pub encoder_id: String,
    pub rule_id: String,
}

impl Branch {
    /// Key of the branch's normalizer statistics slot.
    pub fn key(&self) -> String {
        format!("{}/{}", self.encoder_id, self.rule_id)
    }
}

/// Registration-ordered rules. Written once during setup, then shared.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RuleRegistry {
    rules: Vec<AdaptationRule>,
}

impl RuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rules for the four sensor layouts plus the stacked S2+S1 input.
    pub fn standard() -> Self {
        Self::parse(DEFAULT_RULES).expect("built-in rule file parses")
    }

    pub fn register(&mut self, rule: AdaptationRule) -> Result<String> {
        rule.validate()?;
        if rule.is_identity() {
            return Err(Error::Rule {
                id: rule.rule_id,
                reason: "`identity` is reserved for the implicit rule".into(),
            });
        }
        if self.get(&rule.rule_id).is_some() {
            return Err(Error::DuplicateId(rule.rule_id));
        }
        let id = rule.rule_id.clone();
        self.rules.push(rule);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&AdaptationRule> {
        self.rules.iter().find(|r| r.rule_id == id)
    }

    /// Resolves a rule id, including the implicit identity on `spec`.
    pub fn resolve(&self, id: &str, spec: &BandSpec) -> Result<AdaptationRule> {
        if id == IDENTITY_RULE {
            return Ok(AdaptationRule::identity(spec));
        }
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn rules(&self) -> &[AdaptationRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Every rule mapping `input` onto `required`, identity first.
    pub fn applicable_rules(&self, input: &BandSpec, required: &BandSpec) -> Vec<AdaptationRule> {
        let mut out = Vec::new();
        if input == required {
            out.push(AdaptationRule::identity(input));
        }
        out.extend(
            self.rules
                .iter()
                .filter(|r| &r.available == input && &r.required == required)
                .cloned(),
        );
        out
    }

    /// One branch per (encoder, applicable rule), ordered by encoder then
    /// rule registration. Encoders with no applicable rule are skipped.
    pub fn enumerate_branches<'a>(
        &self,
        input: &BandSpec,
        encoders: impl IntoIterator<Item = (&'a str, &'a BandSpec)>,
    ) -> Vec<Branch> {
        encoders
            .into_iter()
            .flat_map(|(id, required)| {
                self.applicable_rules(input, required)
                    .into_iter()
                    .map(move |r| Branch {
                        encoder_id: id.to_string(),
                        rule_id: r.rule_id,
                    })
            })
            .collect()
    }

    /// Parses the line format `rule_id | available | required | i0,i1,...`.
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reg = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let perr = |reason: String| Error::Parse {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = trimmed.split('|').map(str::trim).collect();
            let [id, available, required, indices] = fields[..] else {
                return Err(perr(format!("expected 4 `|`-separated fields, got {}", fields.len())));
            };
            let available: BandSpec = available.parse().map_err(|e: Error| perr(e.to_string()))?;
            let required: BandSpec = required.parse().map_err(|e: Error| perr(e.to_string()))?;
            let indices = indices
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| perr(format!("bad index `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let rule = AdaptationRule::new(id, available, required, indices)
                .map_err(|e| perr(e.to_string()))?;
            reg.register(rule).map_err(|e| perr(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn to_text(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }
}

pub const DEFAULT_RULES: &str = include_str!("../rules/default.rules");

#[cfg(test)]
mod tests {
    use super::*;

    fn s2_rgb_rules() -> RuleRegistry {
        let mut reg = RuleRegistry::new();
        reg.register(AdaptationRule::new("s2_rgb", BandSpec::sentinel2(), BandSpec::rgb(), vec![3, 2, 1]).unwrap())
            .unwrap();
        reg.register(AdaptationRule::new("s2_irrg_rgb", BandSpec::sentinel2(), BandSpec::rgb(), vec![7, 3, 2]).unwrap())
            .unwrap();
        reg
    }

    #[test]
    fn registers_gather_rules() {
        let reg = s2_rgb_rules();
        let mut reg2 = reg.clone();
        assert_eq!(
            reg2.register(AdaptationRule::new("s1_rgb", BandSpec::sentinel1(), BandSpec::rgb(), vec![0, 1, 1]).unwrap())
                .unwrap(),
            "s1_rgb"
        );
        assert_eq!(reg2.len(), 3);
        assert_eq!(reg2.rules()[2].rule_id, "s1_rgb");
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let err = AdaptationRule::new("bad", BandSpec::sentinel2(), BandSpec::rgb(), vec![13, 2, 1]).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        let mut reg = s2_rgb_rules();
        let dup = AdaptationRule::new("s2_rgb", BandSpec::sentinel2(), BandSpec::rgb(), vec![0, 0, 0]).unwrap();
        assert!(matches!(reg.register(dup), Err(Error::DuplicateId(_))));
        let ident = AdaptationRule::identity(&BandSpec::rgb());
        assert!(reg.register(ident).is_err());
    }

    #[test]
    fn applicable_rules_cases() {
        let reg = s2_rgb_rules();
        let got = reg.applicable_rules(&BandSpec::sentinel2(), &BandSpec::rgb());
        let ids: Vec<_> = got.iter().map(|r| r.rule_id.as_str()).collect();
        assert_eq!(ids, ["s2_rgb", "s2_irrg_rgb"]);

        let got = reg.applicable_rules(&BandSpec::rgb(), &BandSpec::rgb());
        assert_eq!(got, vec![AdaptationRule::identity(&BandSpec::rgb())]);

        assert!(reg
            .applicable_rules(&BandSpec::sentinel1(), &BandSpec::sentinel2())
            .is_empty());
    }

    #[test]
    fn apply_rule_gathers_channels() {
        let img = Tensor::from_fn(&[13, 2, 2], |i| (i / 4) as f64);
        let rule = AdaptationRule::new("r", BandSpec::sentinel2(), BandSpec::rgb(), vec![3, 2, 1]).unwrap();
        let out = apply_rule(&img, &rule).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
        assert_eq!(out.data(), &[3., 3., 3., 3., 2., 2., 2., 2., 1., 1., 1., 1.]);

        let sar = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 0.5 } else { -0.2 });
        let rule = AdaptationRule::new("r3", BandSpec::sentinel1(), BandSpec::rgb(), vec![0, 1, 1]).unwrap();
        let out = apply_rule(&sar, &rule).unwrap();
        let means: Vec<f64> = (0..3).map(|c| out.data()[c * 9]).collect();
        assert_eq!(means, [0.5, -0.2, -0.2]);

        let id = AdaptationRule::identity(&BandSpec::sentinel2());
        assert_eq!(apply_rule(&img, &id).unwrap(), img);
        assert!(apply_rule(&sar, &id).is_err());
    }

    #[test]
    fn enumerates_branches_in_registration_order() {
        let reg = s2_rgb_rules();
        let (rgb, s2, s1) = (BandSpec::rgb(), BandSpec::sentinel2(), BandSpec::sentinel1());
        let encs = [("rgb-enc", &rgb), ("s2-enc", &s2), ("sar-enc", &s1)];
        let got = reg.enumerate_branches(&s2, encs);
        let pairs: Vec<_> = got.iter().map(|b| (b.encoder_id.as_str(), b.rule_id.as_str())).collect();
        assert_eq!(
            pairs,
            [("rgb-enc", "s2_rgb"), ("rgb-enc", "s2_irrg_rgb"), ("s2-enc", "identity")]
        );
        assert_eq!(
            reg.enumerate_branches(&rgb, [("rgb-enc", &rgb)]),
            vec![Branch { encoder_id: "rgb-enc".into(), rule_id: "identity".into() }]
        );
        assert!(reg.enumerate_branches(&BandSpec::irrg(), encs).is_empty());
    }

    #[test]
    fn rule_file_round_trip() {
        let reg = RuleRegistry::standard();
        assert!(reg.len() >= 3);
        let text = reg.to_text();
        let again = RuleRegistry::parse(&text).unwrap();
        assert_eq!(again, reg);
        assert_eq!(again.to_text(), text);
    }

    #[test]
    fn rule_file_errors_name_the_line() {
        let err = RuleRegistry::parse("# header\n\nx | S1/VV | RGB/R,RGB/G | 0,zero\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = RuleRegistry::parse("x | S1/VV | RGB/R | 1\n").unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn band_spec_parsing() {
        let s: BandSpec = "S1/VV,S1/VH".parse().unwrap();
        assert_eq!(s, BandSpec::sentinel1());
        assert!("S1/VV,S1/VV".parse::<BandSpec>().is_err());
        assert!("".parse::<BandSpec>().is_err());
        assert!("VV".parse::<BandSpec>().is_err());
        assert_eq!(BandSpec::sentinel2().bands()[3].band, "B4");
        assert_eq!(BandSpec::sentinel2().bands()[7].band, "B8");
    }
}
