//! Acquisition geometry, stereo-pair selection and train/test pair grouping.
//!
//! Directions use a local east-north-up frame; azimuths are measured
//! clockwise from north.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Viewing and illumination geometry of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionMeta {
    pub image_id: String,
    /// Satellite azimuth, degrees in `[0, 360)`.
    pub azimuth: f64,
    /// Off-nadir (incidence) angle, degrees in `[0, 90)`.
    pub off_nadir: f64,
    pub sun_azimuth: f64,
    /// Sun elevation above the horizon, degrees in `[0, 90]`.
    pub sun_elevation: f64,
    pub date: NaiveDate,
    pub snow: bool,
    pub footprint_covers_area: bool,
}

impl AcquisitionMeta {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, lo: f64, hi: f64, closed: bool| {
            v >= lo && if closed { v <= hi } else { v < hi }
        };
        if !in_range(self.azimuth, 0.0, 360.0, false)
            || !in_range(self.off_nadir, 0.0, 90.0, false)
            || !in_range(self.sun_azimuth, 0.0, 360.0, false)
            || !in_range(self.sun_elevation, 0.0, 90.0, true)
        {
            return Err(Error::InvalidInput(format!(
                "image {}: angles out of range (az {}, off-nadir {}, sun az {}, sun el {})",
                self.image_id, self.azimuth, self.off_nadir, self.sun_azimuth, self.sun_elevation
            )));
        }
        Ok(())
    }

    pub fn view_vector(&self) -> [f64; 3] {
        view_vector(self.azimuth, self.off_nadir)
    }

    pub fn sun_vector(&self) -> [f64; 3] {
        view_vector(self.sun_azimuth, 90.0 - self.sun_elevation)
    }
}

/// Unit viewing vector: horizontal part along `azimuth_deg`, tilted
/// `off_nadir_deg` away from the vertical.
pub fn view_vector(azimuth_deg: f64, off_nadir_deg: f64) -> [f64; 3] {
    let (az, off) = (azimuth_deg.to_radians(), off_nadir_deg.to_radians());
    [az.sin() * off.sin(), az.cos() * off.sin(), off.cos()]
}

pub(crate) fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle between the two viewing rays in object space, degrees.
pub fn intersection_angle(a: &AcquisitionMeta, b: &AcquisitionMeta) -> f64 {
    angle_between(a.view_vector(), b.view_vector())
}

/// Angular distance between the two sun directions, degrees.
pub fn sun_angle_difference(a: &AcquisitionMeta, b: &AcquisitionMeta) -> f64 {
    angle_between(a.sun_vector(), b.sun_vector())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionProfile {
    /// Pairs for dense matching of the initial DSM.
    Matching,
    /// Pairs for guiding the refinement network; additionally requires
    /// snow-free images that cover the whole area.
    Refinement,
}

impl std::str::FromStr for SelectionProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "matching" => Ok(SelectionProfile::Matching),
            "refinement" => Ok(SelectionProfile::Refinement),
            other => Err(Error::Config(format!("unknown selection profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionCriteria {
    pub intersection_min: f64,
    pub intersection_max: f64,
    pub incidence_max: f64,
    pub sun_diff_max: f64,
    pub profile: SelectionProfile,
}

impl SelectionCriteria {
    pub fn matching() -> Self {
        SelectionCriteria {
            intersection_min: 5.0,
            intersection_max: 30.0,
            incidence_max: 40.0,
            sun_diff_max: 35.0,
            profile: SelectionProfile::Matching,
        }
    }

    pub fn refinement() -> Self {
        SelectionCriteria {
            intersection_min: 10.0,
            intersection_max: 28.0,
            incidence_max: 40.0,
            sun_diff_max: 35.0,
            profile: SelectionProfile::Refinement,
        }
    }

    pub fn for_profile(profile: SelectionProfile) -> Self {
        match profile {
            SelectionProfile::Matching => Self::matching(),
            SelectionProfile::Refinement => Self::refinement(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.intersection_min && self.intersection_min < self.intersection_max)
            || !(self.incidence_max > 0.0)
            || !(self.sun_diff_max >= 0.0)
        {
            return Err(Error::Config(format!("invalid selection criteria {self:?}")));
        }
        Ok(())
    }

    /// Evaluates the criteria for one candidate pair.
    pub fn accepts(&self, a: &AcquisitionMeta, b: &AcquisitionMeta) -> Option<StereoPair> {
        if self.profile == SelectionProfile::Refinement
            && (a.snow || b.snow || !a.footprint_covers_area || !b.footprint_covers_area)
        {
            return None;
        }
        let pair = StereoPair::from_meta(a, b);
        let ok = pair.intersection_angle >= self.intersection_min
            && pair.intersection_angle <= self.intersection_max
            && pair.mean_incidence <= self.incidence_max
            && pair.sun_diff <= self.sun_diff_max;
        ok.then_some(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoPair {
    pub left: String,
    pub right: String,
    pub intersection_angle: f64,
    /// Arithmetic mean of the two off-nadir angles.
    pub mean_incidence: f64,
    pub sun_diff: f64,
}

impl StereoPair {
    /// Builds the pair with its derived angles; `left` is the
    /// lexicographically smaller image id.
    pub fn from_meta(a: &AcquisitionMeta, b: &AcquisitionMeta) -> StereoPair {
        let (a, b) = if a.image_id <= b.image_id { (a, b) } else { (b, a) };
        StereoPair {
            left: a.image_id.clone(),
            right: b.image_id.clone(),
            intersection_angle: intersection_angle(a, b),
            mean_incidence: 0.5 * (a.off_nadir + b.off_nadir),
            sun_diff: sun_angle_difference(a, b),
        }
    }

    pub fn id(&self) -> String {
        format!("{}+{}", self.left, self.right)
    }
}

/// All unordered pairs satisfying `criteria`, sorted by `(left, right)`.
pub fn select_pairs(images: &[AcquisitionMeta], criteria: &SelectionCriteria) -> Vec<StereoPair> {
    let mut pairs = Vec::new();
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            if a.image_id == b.image_id {
                continue;
            }
            if let Some(p) = criteria.accepts(a, b) {
                pairs.push(p);
            }
        }
    }
    pairs.sort_by(|x, y| (&x.left, &x.right).cmp(&(&y.left, &y.right)));
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineOrientation {
    NorthSouth,
    WestEast,
}

/// Classifies the pair by the direction of its ground-projected baseline,
/// i.e. the difference of the two images' per-meter parallax displacements.
pub fn baseline_orientation(a: &AcquisitionMeta, b: &AcquisitionMeta) -> BaselineOrientation {
    let (va, vb) = (a.view_vector(), b.view_vector());
    let bx = va[0] / va[2] - vb[0] / vb[2];
    let by = va[1] / va[2] - vb[1] / vb[2];
    // within +-45 degrees of north or south
    if by.abs() >= bx.abs() {
        BaselineOrientation::NorthSouth
    } else {
        BaselineOrientation::WestEast
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPartition {
    pub group_a: Vec<StereoPair>,
    pub group_b: Vec<StereoPair>,
    /// Set when no balanced split keeps the two groups image-disjoint.
    pub image_overlap: bool,
}

/// Splits pairs into two groups, each with a balanced share of north-south
/// and west-east baselines.
///
/// Balance per orientation class (counts differ by at most one) is a hard
/// constraint. Among balanced splits, one that keeps the groups
/// image-disjoint is preferred; pairs sharing an image then always travel
/// together. When no such split exists the pair-level split is returned with
/// `image_overlap` set.
pub fn partition_pairs(pairs: &[StereoPair], images: &[AcquisitionMeta]) -> Result<PairPartition> {
    if pairs.is_empty() {
        return Ok(PairPartition {
            group_a: Vec::new(),
            group_b: Vec::new(),
            image_overlap: false,
        });
    }
    let by_id: HashMap<&str, &AcquisitionMeta> =
        images.iter().map(|m| (m.image_id.as_str(), m)).collect();
    let lookup = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("pair references unknown image `{id}`")))
    };
    let mut classes = Vec::with_capacity(pairs.len());
    for p in pairs {
        classes.push(baseline_orientation(lookup(&p.left)?, lookup(&p.right)?));
    }

    let components = image_components(pairs);
    if let Some(side) = balanced_component_assignment(&components, &classes) {
        let mut part = PairPartition {
            group_a: Vec::new(),
            group_b: Vec::new(),
            image_overlap: false,
        };
        for (comp, &to_a) in components.iter().zip(&side) {
            for &i in comp {
                let target = if to_a { &mut part.group_a } else { &mut part.group_b };
                target.push(pairs[i].clone());
            }
        }
        sort_pairs(&mut part.group_a);
        sort_pairs(&mut part.group_b);
        return Ok(part);
    }

    log::warn!("no image-disjoint balanced split exists; splitting at pair level");
    let mut part = PairPartition {
        group_a: Vec::new(),
        group_b: Vec::new(),
        image_overlap: true,
    };
    let mut seen: BTreeMap<bool, usize> = BTreeMap::new();
    for (pair, class) in pairs.iter().zip(&classes) {
        let n = seen.entry(*class == BaselineOrientation::NorthSouth).or_default();
        if *n % 2 == 0 {
            part.group_a.push(pair.clone());
        } else {
            part.group_b.push(pair.clone());
        }
        *n += 1;
    }
    Ok(part)
}

fn sort_pairs(pairs: &mut [StereoPair]) {
    pairs.sort_by(|x, y| (&x.left, &x.right).cmp(&(&y.left, &y.right)));
}

/// Groups pair indices into connected components of the image graph,
/// ordered by their first pair.
fn image_components(pairs: &[StereoPair]) -> Vec<Vec<usize>> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        let n = ids.len();
        ids.entry(&p.left).or_insert(n);
        let n = ids.len();
        ids.entry(&p.right).or_insert(n);
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for p in pairs {
        let (a, b) = (ids[p.left.as_str()], ids[p.right.as_str()]);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut order: Vec<usize> = Vec::new();
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let root = find(&mut parent, ids[p.left.as_str()]);
        members
            .entry(root)
            .or_insert_with(|| {
                order.push(root);
                Vec::new()
            })
            .push(i);
    }
    order.into_iter().map(|r| members.remove(&r).unwrap()).collect()
}

/// Searches for a component-to-group assignment with per-class count
/// differences in `[-1, 1]`. Prefers group A holding the surplus.
fn balanced_component_assignment(
    components: &[Vec<usize>],
    classes: &[BaselineOrientation],
) -> Option<Vec<bool>> {
    let counts: Vec<(i64, i64)> = components
        .iter()
        .map(|c| {
            let ns = c
                .iter()
                .filter(|&&i| classes[i] == BaselineOrientation::NorthSouth)
                .count() as i64;
            (ns, c.len() as i64 - ns)
        })
        .collect();
    // Reachable (A - B) differences after each prefix of components, with a
    // back-pointer to the previous state and the side chosen.
    let mut layers: Vec<HashMap<(i64, i64), ((i64, i64), bool)>> = Vec::with_capacity(counts.len());
    let mut frontier: Vec<(i64, i64)> = vec![(0, 0)];
    for &(ns, we) in &counts {
        let mut next: HashMap<(i64, i64), ((i64, i64), bool)> = HashMap::new();
        for &d in &frontier {
            for to_a in [true, false] {
                let s = if to_a { 1 } else { -1 };
                next.entry((d.0 + s * ns, d.1 + s * we)).or_insert((d, to_a));
            }
        }
        let mut keys: Vec<(i64, i64)> = next.keys().copied().collect();
        keys.sort_unstable();
        frontier = keys;
        layers.push(next);
    }
    let goal_order = [(0, 0), (1, 0), (0, 1), (1, 1), (1, -1), (-1, 1), (-1, 0), (0, -1), (-1, -1)];
    let last = layers.last()?;
    let goal = goal_order.iter().copied().find(|g| last.contains_key(g))?;
    let mut side = vec![false; counts.len()];
    let mut state = goal;
    for (k, layer) in layers.iter().enumerate().rev() {
        let (prev, to_a) = layer[&state];
        side[k] = to_a;
        state = prev;
    }
    Some(side)
}

fn parse_flag(v: &str, field: &str, line: usize) -> Result<bool> {
    match v.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            msg: format!("{field} must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Parses image metadata CSV: `image_id, azimuth, off_nadir, sun_azimuth,
/// sun_elevation, date, snow, footprint`. A header row is optional.
pub fn parse_metadata_csv(text: &str) -> Result<Vec<AcquisitionMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && record.get(0).is_some_and(|f| f.eq_ignore_ascii_case("image_id")) {
            continue;
        }
        if record.len() != 8 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 8 fields, found {}", record.len()),
            });
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            record[k].parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad {name} `{}`: {e}", &record[k]),
            })
        };
        let date = NaiveDate::parse_from_str(&record[5], "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            msg: format!("bad date `{}`: {e}", &record[5]),
        })?;
        let meta = AcquisitionMeta {
            image_id: record[0].to_string(),
            azimuth: num(1, "azimuth")?,
            off_nadir: num(2, "off_nadir")?,
            sun_azimuth: num(3, "sun_azimuth")?,
            sun_elevation: num(4, "sun_elevation")?,
            date,
            snow: parse_flag(&record[6], "snow", line)?,
            footprint_covers_area: parse_flag(&record[7], "footprint", line)?,
        };
        meta.validate()?;
        out.push(meta);
    }
    Ok(out)
}

pub fn read_metadata_csv(path: impl AsRef<Path>) -> Result<Vec<AcquisitionMeta>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn meta(id: &str, az: f64, off: f64, sun_az: f64, sun_el: f64) -> AcquisitionMeta {
        AcquisitionMeta {
            image_id: id.to_string(),
            azimuth: az,
            off_nadir: off,
            sun_azimuth: sun_az,
            sun_elevation: sun_el,
            date: NaiveDate::from_ymd_opt(2016, 6, 1).unwrap(),
            snow: false,
            footprint_covers_area: true,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn view_vector_examples() {
        assert_eq!(view_vector(0.0, 0.0), [0.0, 0.0, 1.0]);
        let v = view_vector(90.0, 30.0);
        assert!(close(v[0], 0.5, 1e-12) && close(v[1], 0.0, 1e-12));
        assert!(close(v[2], 3f64.sqrt() / 2.0, 1e-12));
        let v = view_vector(180.0, 20.0);
        let s = 20f64.to_radians();
        assert!(close(v[0], 0.0, 1e-12) && close(v[1], -s.sin(), 1e-12) && close(v[2], s.cos(), 1e-12));
    }

    #[test]
    fn intersection_angle_examples() {
        let a = meta("a", 0.0, 20.0, 0.0, 50.0);
        assert!(close(intersection_angle(&a, &a.clone()), 0.0, 1e-6));
        let b = meta("b", 180.0, 20.0, 0.0, 50.0);
        assert!(close(intersection_angle(&a, &b), 40.0, 1e-9));
        let n1 = meta("n1", 0.0, 0.0, 0.0, 50.0);
        let n2 = meta("n2", 90.0, 0.0, 0.0, 50.0);
        assert!(close(intersection_angle(&n1, &n2), 0.0, 1e-12));
    }

    #[test]
    fn sun_difference_examples() {
        let a = meta("a", 0.0, 10.0, 140.0, 40.0);
        let b = meta("b", 0.0, 10.0, 140.0, 50.0);
        assert!(close(sun_angle_difference(&a, &a.clone()), 0.0, 1e-6));
        assert!(close(sun_angle_difference(&a, &b), 10.0, 1e-9));
        let z1 = meta("z1", 0.0, 10.0, 10.0, 90.0);
        let z2 = meta("z2", 0.0, 10.0, 250.0, 90.0);
        assert!(close(sun_angle_difference(&z1, &z2), 0.0, 1e-12));
    }

    /// Two images whose intersection angle is exactly `angle` degrees,
    /// each at half the angle off nadir on opposite sides.
    fn pair_with_angle(angle: f64) -> (AcquisitionMeta, AcquisitionMeta) {
        (
            meta("l", 90.0, angle / 2.0, 150.0, 50.0),
            meta("r", 270.0, angle / 2.0, 150.0, 50.0),
        )
    }

    #[test]
    fn refinement_profile_accepts_moderate_pair() {
        // intersection 15, mean incidence 25, sun difference 10
        let a = meta("a", 0.0, 25.0 + 7.5, 140.0, 40.0);
        let b = meta("b", 0.0, 25.0 - 7.5, 140.0, 50.0);
        let p = SelectionCriteria::refinement().accepts(&a, &b).unwrap();
        assert!(close(p.intersection_angle, 15.0, 1e-9));
        assert!(close(p.mean_incidence, 25.0, 1e-12));
        assert!(close(p.sun_diff, 10.0, 1e-9));
    }

    #[test]
    fn thirty_degrees_is_matching_only() {
        let (a, b) = pair_with_angle(30.0);
        assert!(close(intersection_angle(&a, &b), 30.0, 1e-9));
        let imgs = vec![a, b];
        assert_eq!(select_pairs(&imgs, &SelectionCriteria::matching()).len(), 1);
        assert!(select_pairs(&imgs, &SelectionCriteria::refinement()).is_empty());
    }

    #[test]
    fn snow_excludes_pair_under_refinement() {
        let (a, mut b) = pair_with_angle(15.0);
        b.snow = true;
        let imgs = vec![a, b];
        assert!(select_pairs(&imgs, &SelectionCriteria::refinement()).is_empty());
        assert_eq!(select_pairs(&imgs, &SelectionCriteria::matching()).len(), 1);
    }

    #[test]
    fn fewer_than_two_images_gives_no_pairs() {
        assert!(select_pairs(&[], &SelectionCriteria::matching()).is_empty());
        let (a, _) = pair_with_angle(15.0);
        assert!(select_pairs(&[a], &SelectionCriteria::matching()).is_empty());
    }

    #[test]
    fn balanced_disjoint_partition() {
        // four north-south and four west-east pairs, each on its own images
        let mut images = Vec::new();
        let mut pairs = Vec::new();
        for k in 0..8 {
            let (az1, az2) = if k < 4 { (0.0, 180.0) } else { (90.0, 270.0) };
            let a = meta(&format!("i{k}a"), az1, 10.0, 150.0, 50.0);
            let b = meta(&format!("i{k}b"), az2, 10.0, 150.0, 50.0);
            pairs.push(StereoPair::from_meta(&a, &b));
            images.push(a);
            images.push(b);
        }
        let part = partition_pairs(&pairs, &images).unwrap();
        assert!(!part.image_overlap);
        let class_count = |g: &[StereoPair], ns: bool| {
            g.iter()
                .filter(|p| {
                    let a = images.iter().find(|m| m.image_id == p.left).unwrap();
                    let b = images.iter().find(|m| m.image_id == p.right).unwrap();
                    (baseline_orientation(a, b) == BaselineOrientation::NorthSouth) == ns
                })
                .count()
        };
        for ns in [true, false] {
            assert_eq!(class_count(&part.group_a, ns), 2);
            assert_eq!(class_count(&part.group_b, ns), 2);
        }
    }

    #[test]
    fn single_pair_goes_to_group_a() {
        let (a, b) = pair_with_angle(15.0);
        let pairs = vec![StereoPair::from_meta(&a, &b)];
        let part = partition_pairs(&pairs, &[a, b]).unwrap();
        assert_eq!(part.group_a.len(), 1);
        assert!(part.group_b.is_empty());
        let empty = partition_pairs(&[], &[]).unwrap();
        assert!(empty.group_a.is_empty() && empty.group_b.is_empty());
    }

    #[test]
    fn connected_images_fall_back_to_pair_split() {
        // a star of pairs sharing one image cannot be split image-disjointly
        let hub = meta("hub", 0.0, 5.0, 150.0, 50.0);
        let mut images = vec![hub.clone()];
        let mut pairs = Vec::new();
        for (k, az) in [180.0, 170.0, 190.0, 185.0].iter().enumerate() {
            let m = meta(&format!("s{k}"), *az, 15.0, 150.0, 50.0);
            pairs.push(StereoPair::from_meta(&hub, &m));
            images.push(m);
        }
        let part = partition_pairs(&pairs, &images).unwrap();
        assert!(part.image_overlap);
        assert_eq!(part.group_a.len(), 2);
        assert_eq!(part.group_b.len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let text = "image_id,azimuth,off_nadir,sun_azimuth,sun_elevation,date,snow,footprint\n\
                    img1, 10.5, 12, 150, 45, 2016-03-04, 0, 1\n\
                    img2, 200, 25.5, 160, 30, 2017-12-24, 1, 1\n";
        let metas = parse_metadata_csv(text).unwrap();
        assert_eq!(metas.len(), 2);
        assert!(metas[1].snow);
        assert_eq!(metas[0].date, NaiveDate::from_ymd_opt(2016, 3, 4).unwrap());
        let bad = "img1, 10.5, 95, 150, 45, 2016-03-04, 0, 1\n";
        assert!(parse_metadata_csv(bad).is_err());
        let bad_flag = "img1, 10.5, 15, 150, 45, 2016-03-04, 2, 1\n";
        assert!(matches!(parse_metadata_csv(bad_flag), Err(Error::Parse { .. })));
    }

    fn arb_meta(id: usize) -> impl Strategy<Value = AcquisitionMeta> {
        (0.0..360.0f64, 0.0..45.0f64, 0.0..360.0f64, 10.0..90.0f64, any::<bool>(), any::<bool>())
            .prop_map(move |(az, off, saz, sel, snow, fp)| {
                let mut m = meta(&format!("img{id:02}"), az, off, saz, sel);
                m.snow = snow && id % 3 == 0;
                m.footprint_covers_area = fp || id % 2 == 0;
                m
            })
    }

    proptest! {
        #[test]
        fn intersection_is_symmetric_metric(a in arb_meta(0), b in arb_meta(1), c in arb_meta(2)) {
            let ab = intersection_angle(&a, &b);
            prop_assert!((ab - intersection_angle(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=180.0).contains(&ab));
            let ac = intersection_angle(&a, &c);
            let cb = intersection_angle(&c, &b);
            prop_assert!(ab <= ac + cb + 1e-6);
        }

        #[test]
        fn selection_ignores_input_order(images in (2usize..12).prop_flat_map(|n| {
            (0..n).map(arb_meta).collect::<Vec<_>>()
        }), rot in 0usize..12) {
            for criteria in [SelectionCriteria::matching(), SelectionCriteria::refinement()] {
                let base = select_pairs(&images, &criteria);
                let mut shuffled = images.clone();
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
                prop_assert_eq!(select_pairs(&shuffled, &criteria), base);
            }
        }

        #[test]
        fn partition_is_disjoint_and_exhaustive(images in (2usize..10).prop_flat_map(|n| {
            (0..n).map(arb_meta).collect::<Vec<_>>()
        })) {
            let pairs = select_pairs(&images, &SelectionCriteria::matching());
            let part = partition_pairs(&pairs, &images).unwrap();
            let mut all: Vec<String> = part.group_a.iter().chain(&part.group_b).map(StereoPair::id).collect();
            all.sort();
            let mut expected: Vec<String> = pairs.iter().map(StereoPair::id).collect();
            expected.sort();
            prop_assert_eq!(all, expected);
            if !part.image_overlap {
                for p in &part.group_a {
                    let disjoint = part.group_b.iter().all(|q| {
                        q.left != p.left && q.left != p.right && q.right != p.left && q.right != p.right
                    });
                    prop_assert!(disjoint);
                }
            }
        }
    }
}
