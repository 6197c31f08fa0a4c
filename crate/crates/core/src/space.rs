//! Elastic search space and architecture specs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OqatError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub max_depth: usize,
    pub depth_choices: Vec<usize>,
    /// Output channel counts.
    pub width_choices: Vec<usize>,
    pub kernel_choices: Vec<usize>,
    /// Stride of the first block in the stage.
    pub stride: usize,
}

impl StageSpec {
    pub fn max_width(&self) -> usize {
        *self.width_choices.last().unwrap()
    }

    pub fn max_kernel(&self) -> usize {
        *self.kernel_choices.last().unwrap()
    }

    /// Number of distinct (depth, widths, kernels) settings of this stage.
    fn count(&self) -> u128 {
        let per_block = (self.width_choices.len() * self.kernel_choices.len()) as u128;
        self.depth_choices.iter().map(|&d| per_block.pow(d as u32)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub head_channels: usize,
    pub expand_ratio: usize,
    pub resolution_choices: Vec<usize>,
    pub stages: Vec<StageSpec>,
}

impl SearchSpace {
    /// Default desk-scale space: three stages, depth {1,2}, widths
    /// {8,12,16} scaled by per-stage multipliers {1, 1.5, 2}, kernels {3,5},
    /// resolutions {16,20,24}, expansion ratio 3.
    pub fn toy(in_channels: usize, num_classes: usize) -> Self {
        let stage = |widths: Vec<usize>, stride| StageSpec {
            max_depth: 2,
            depth_choices: vec![1, 2],
            width_choices: widths,
            kernel_choices: vec![3, 5],
            stride,
        };
        Self {
            in_channels,
            num_classes,
            stem_channels: 8,
            stem_stride: 2,
            head_channels: 48,
            expand_ratio: 3,
            resolution_choices: vec![16, 20, 24],
            stages: vec![stage(vec![8, 12, 16], 1), stage(vec![12, 18, 24], 2), stage(vec![16, 24, 32], 2)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sorted_nonempty = |name: &str, v: &[usize]| -> Result<()> {
            if v.is_empty() || v.windows(2).any(|w| w[0] >= w[1]) || v[0] == 0 {
                return Err(OqatError::Space(format!("{name} must be nonempty, positive and strictly ascending: {v:?}")));
            }
            Ok(())
        };
        if self.in_channels == 0 || self.num_classes < 2 || self.stem_channels == 0 || self.head_channels == 0 {
            return Err(OqatError::Space("channel and class counts must be positive (classes >= 2)".into()));
        }
        if self.expand_ratio == 0 || self.stem_stride == 0 {
            return Err(OqatError::Space("expand_ratio and stem_stride must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(OqatError::Space("at least one stage required".into()));
        }
        sorted_nonempty("resolution_choices", &self.resolution_choices)?;
        for (i, s) in self.stages.iter().enumerate() {
            sorted_nonempty(&format!("stages[{i}].depth_choices"), &s.depth_choices)?;
            sorted_nonempty(&format!("stages[{i}].width_choices"), &s.width_choices)?;
            sorted_nonempty(&format!("stages[{i}].kernel_choices"), &s.kernel_choices)?;
            if s.max_depth != *s.depth_choices.last().unwrap() {
                return Err(OqatError::Space(format!("stages[{i}].max_depth must equal the largest depth choice")));
            }
            if s.kernel_choices.iter().any(|k| k % 2 == 0) {
                return Err(OqatError::Space(format!("stages[{i}].kernel_choices must be odd")));
            }
            if s.stride == 0 {
                return Err(OqatError::Space(format!("stages[{i}].stride must be positive")));
            }
        }
        Ok(())
    }

    pub fn max_arch(&self) -> ArchSpec {
        self.extreme(|v| *v.last().unwrap())
    }

    pub fn min_arch(&self) -> ArchSpec {
        self.extreme(|v| v[0])
    }

    fn extreme(&self, pick: impl Fn(&[usize]) -> usize) -> ArchSpec {
        let depths: Vec<usize> = self.stages.iter().map(|s| pick(&s.depth_choices)).collect();
        ArchSpec {
            resolution: pick(&self.resolution_choices),
            widths: self.stages.iter().zip(&depths).map(|(s, &d)| vec![pick(&s.width_choices); d]).collect(),
            kernels: self.stages.iter().zip(&depths).map(|(s, &d)| vec![pick(&s.kernel_choices); d]).collect(),
            depths,
        }
    }

    /// Independent uniform draw of every architecture field.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchSpec {
        let pick = |rng: &mut R, v: &[usize]| v[rng.random_range(0..v.len())];
        let resolution = pick(rng, &self.resolution_choices);
        let mut depths = Vec::new();
        let mut widths = Vec::new();
        let mut kernels = Vec::new();
        for s in &self.stages {
            let d = pick(rng, &s.depth_choices);
            depths.push(d);
            let mut w = Vec::with_capacity(d);
            let mut k = Vec::with_capacity(d);
            for _ in 0..d {
                w.push(pick(rng, &s.width_choices));
                k.push(pick(rng, &s.kernel_choices));
            }
            widths.push(w);
            kernels.push(k);
        }
        ArchSpec { resolution, depths, widths, kernels }
    }

    /// Total number of distinct architectures.
    pub fn count(&self) -> u128 {
        self.stages.iter().map(StageSpec::count).product::<u128>() * self.resolution_choices.len() as u128
    }

    /// Every architecture, in a fixed order. Fails when the space holds more
    /// than `limit` architectures.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<ArchSpec>> {
        if self.count() > limit as u128 {
            return Err(OqatError::Space(format!("space holds {} architectures, above the limit {limit}", self.count())));
        }
        let mut per_stage: Vec<Vec<(Vec<usize>, Vec<usize>)>> = Vec::new();
        for s in &self.stages {
            let mut opts = Vec::new();
            for &d in &s.depth_choices {
                let blocks: Vec<(usize, usize)> = s
                    .width_choices
                    .iter()
                    .flat_map(|&w| s.kernel_choices.iter().map(move |&k| (w, k)))
                    .collect();
                let mut combos: Vec<Vec<(usize, usize)>> = vec![vec![]];
                for _ in 0..d {
                    combos = combos
                        .into_iter()
                        .flat_map(|c| {
                            blocks.iter().map(move |&b| {
                                let mut c = c.clone();
                                c.push(b);
                                c
                            })
                        })
                        .collect();
                }
                opts.extend(combos.into_iter().map(|c| c.into_iter().unzip()));
            }
            per_stage.push(opts);
        }
        let mut out = Vec::new();
        for &r in &self.resolution_choices {
            let mut partial: Vec<ArchSpec> = vec![ArchSpec { resolution: r, depths: vec![], widths: vec![], kernels: vec![] }];
            for opts in &per_stage {
                partial = partial
                    .into_iter()
                    .flat_map(|a| {
                        opts.iter().map(move |(w, k)| {
                            let mut a = a.clone();
                            a.depths.push(w.len());
                            a.widths.push(w.clone());
                            a.kernels.push(k.clone());
                            a
                        })
                    })
                    .collect();
            }
            out.extend(partial);
        }
        Ok(out)
    }

    /// Rejects `arch` naming the first offending field.
    pub fn check(&self, arch: &ArchSpec) -> Result<()> {
        let bad = |field: String, detail: String| Err(OqatError::ArchOutOfSpace { field, detail });
        if !self.resolution_choices.contains(&arch.resolution) {
            return bad("resolution".into(), format!("{} not in {:?}", arch.resolution, self.resolution_choices));
        }
        if arch.depths.len() != self.stages.len() {
            return bad("depths".into(), format!("{} stages given, space has {}", arch.depths.len(), self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let d = arch.depths[i];
            if !s.depth_choices.contains(&d) {
                return bad(format!("depths[{i}]"), format!("{d} not in {:?}", s.depth_choices));
            }
            if arch.widths.get(i).map(Vec::len) != Some(d) {
                return bad(format!("widths[{i}]"), format!("expected {d} block widths"));
            }
            if arch.kernels.get(i).map(Vec::len) != Some(d) {
                return bad(format!("kernels[{i}]"), format!("expected {d} block kernels"));
            }
            for (j, w) in arch.widths[i].iter().enumerate() {
                if !s.width_choices.contains(w) {
                    return bad(format!("widths[{i}][{j}]"), format!("{w} not in {:?}", s.width_choices));
                }
            }
            for (j, k) in arch.kernels[i].iter().enumerate() {
                if !s.kernel_choices.contains(k) {
                    return bad(format!("kernels[{i}][{j}]"), format!("{k} not in {:?}", s.kernel_choices));
                }
            }
        }
        if arch.widths.len() != self.stages.len() || arch.kernels.len() != self.stages.len() {
            return bad("widths".into(), "stage count mismatch".into());
        }
        Ok(())
    }

    /// Whether `self` only narrows the choice lists of `base` (same skeleton).
    pub fn is_restriction_of(&self, base: &SearchSpace) -> bool {
        let subset = |a: &[usize], b: &[usize]| a.iter().all(|x| b.contains(x));
        self.in_channels == base.in_channels
            && self.num_classes == base.num_classes
            && self.stem_channels == base.stem_channels
            && self.stem_stride == base.stem_stride
            && self.head_channels == base.head_channels
            && self.expand_ratio == base.expand_ratio
            && subset(&self.resolution_choices, &base.resolution_choices)
            && self.stages.len() == base.stages.len()
            && self.stages.iter().zip(&base.stages).all(|(a, b)| {
                a.stride == b.stride
                    && subset(&a.depth_choices, &b.depth_choices)
                    && subset(&a.width_choices, &b.width_choices)
                    && subset(&a.kernel_choices, &b.kernel_choices)
            })
    }
}

/// One subnet: resolution, per-stage depth and per-active-block width and kernel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchSpec {
    pub resolution: usize,
    pub depths: Vec<usize>,
    pub widths: Vec<Vec<usize>>,
    pub kernels: Vec<Vec<usize>>,
}

impl ArchSpec {
    pub fn total_depth(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn total_width(&self) -> usize {
        self.widths.iter().flatten().sum()
    }

    pub fn total_kernel(&self) -> usize {
        self.kernels.iter().flatten().sum()
    }

    /// Same skeleton (resolution, depth, width), kernels ignored.
    pub fn skeleton(&self) -> (usize, Vec<usize>, Vec<Vec<usize>>) {
        (self.resolution, self.depths.clone(), self.widths.clone())
    }

    /// Compact form `r{res}-d{d1,d2,..}-w{..}-k{..}` with widths and kernels
    /// flattened over active blocks.
    pub fn compact(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = &usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "r{}-d{}-w{}-k{}",
            self.resolution,
            join(&mut self.depths.iter()),
            join(&mut self.widths.iter().flatten()),
            join(&mut self.kernels.iter().flatten()),
        )
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.compact())
    }
}

impl FromStr for ArchSpec {
    type Err = OqatError;

    fn from_str(s: &str) -> Result<Self> {
        let err = |m: &str| OqatError::Invalid(format!("malformed arch string `{s}`: {m}"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        if parts.len() != 4 {
            return Err(err("expected r..-d..-w..-k.."));
        }
        let list = |p: &str, tag: char| -> Result<Vec<usize>> {
            let body = p.strip_prefix(tag).ok_or_else(|| err(&format!("missing `{tag}` section")))?;
            body.split(',').map(|x| x.parse::<usize>().map_err(|_| err(&format!("bad number `{x}`")))).collect()
        };
        let res = list(parts[0], 'r')?;
        if res.len() != 1 {
            return Err(err("one resolution expected"));
        }
        let depths = list(parts[1], 'd')?;
        let flat_w = list(parts[2], 'w')?;
        let flat_k = list(parts[3], 'k')?;
        let total: usize = depths.iter().sum();
        if flat_w.len() != total || flat_k.len() != total {
            return Err(err("width/kernel count does not match total depth"));
        }
        let mut widths = Vec::new();
        let mut kernels = Vec::new();
        let mut at = 0;
        for &d in &depths {
            widths.push(flat_w[at..at + d].to_vec());
            kernels.push(flat_k[at..at + d].to_vec());
            at += d;
        }
        Ok(ArchSpec { resolution: res[0], depths, widths, kernels })
    }
}

/// JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_space_is_valid() {
        let s = SearchSpace::toy(1, 10);
        s.validate().unwrap();
        s.check(&s.max_arch()).unwrap();
        s.check(&s.min_arch()).unwrap();
        assert_eq!(s.count(), 3 * 42u128.pow(3));
    }

    #[test]
    fn compact_string_round_trips() {
        let s = SearchSpace::toy(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = s.sample(&mut rng);
            s.check(&a).unwrap();
            let parsed: ArchSpec = a.compact().parse().unwrap();
            assert_eq!(parsed, a);
        }
        assert_eq!(s.max_arch().compact(), "r24-d2,2,2-w16,16,24,24,32,32-k5,5,5,5,5,5");
    }

    #[test]
    fn check_names_offending_field() {
        let s = SearchSpace::toy(1, 10);
        let mut a = s.max_arch();
        a.widths[1][0] = 13;
        match s.check(&a).unwrap_err() {
            OqatError::ArchOutOfSpace { field, .. } => assert_eq!(field, "widths[1][0]"),
            e => panic!("{e}"),
        }
        let mut a = s.max_arch();
        a.resolution = 17;
        assert!(s.check(&a).unwrap_err().to_string().contains("resolution"));
    }

    #[test]
    fn enumeration_matches_count() {
        let mut s = SearchSpace::toy(1, 4);
        s.resolution_choices = vec![16, 24];
        s.stages[0].width_choices = vec![8];
        s.stages[1].depth_choices = vec![1];
        s.stages[1].max_depth = 1;
        let all = s.enumerate(100_000).unwrap();
        assert_eq!(all.len() as u128, s.count());
        let uniq: std::collections::BTreeSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), all.len());
        assert!(all.iter().all(|a| s.check(a).is_ok()));
        assert!(s.is_restriction_of(&SearchSpace::toy(1, 4)));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let j = canonical_json(&SearchSpace::toy(1, 10).max_arch());
        assert!(j.starts_with("{\"depths\""));
        assert!(j.find("\"kernels\"").unwrap() < j.find("\"resolution\"").unwrap());
    }
}
