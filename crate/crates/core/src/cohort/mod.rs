//! Synthetic participants, recordings and frames, plus the membership
//! labelling and attack split rules.
//!
//! Each participant carries a latent identity vector per input stream. A
//! frame's streams are `projection · latent + s · identity + σ · noise`, where
//! the latent for the eyes is the gaze direction and the latent for the face
//! and face grid is the head position. The gaze label depends only on the
//! per-frame latents, never on identity.

mod io;

pub use io::{parse_frames_csv, read_cohort, write_frames_csv, CohortSidecar, SidecarEntry};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// How much the head position shifts the gaze label.
const HEAD_TO_GAZE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub participant_id: u32,
    pub recording_id: u32,
    pub frame_index: u32,
    pub left_eye: Vec<f64>,
    pub right_eye: Vec<f64>,
    pub face: Vec<f64>,
    pub face_grid: Vec<f64>,
    pub gaze: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub recording_id: u32,
    pub participant_id: u32,
    pub frames: Vec<Frame>,
    pub in_target_train: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub eye: usize,
    pub face: usize,
    pub face_grid: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            eye: 16,
            face: 24,
            face_grid: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_participants: usize,
    /// How many of the participants have more than one recording.
    pub multi_participants: usize,
    pub recordings_per_multi: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub dims: FeatureDims,
    pub identity_signal_strength: f64,
    pub noise_scale: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_participants: 50,
            multi_participants: 10,
            recordings_per_multi: 2,
            frames_min: 30,
            frames_max: 50,
            dims: FeatureDims::default(),
            identity_signal_strength: 0.0,
            noise_scale: 1.0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_participants == 0 {
            return Err(Error::invalid("n_participants must be positive"));
        }
        if self.multi_participants > self.n_participants {
            return Err(Error::invalid("multi_participants exceeds n_participants"));
        }
        if self.multi_participants > 0 && self.recordings_per_multi < 2 {
            return Err(Error::invalid("recordings_per_multi must be at least 2"));
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return Err(Error::invalid("frame range must satisfy 1 <= min <= max"));
        }
        if self.dims.eye == 0 || self.dims.face == 0 || self.dims.face_grid == 0 {
            return Err(Error::invalid("feature dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.identity_signal_strength) {
            return Err(Error::invalid(
                "identity_signal_strength must lie in [0, 1]",
            ));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid(
                "noise_scale must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn recording_count(&self) -> usize {
        self.n_participants + self.multi_participants * (self.recordings_per_multi.max(1) - 1)
    }
}

struct Projection {
    rows: usize,
    // row-major rows × 2
    m: Vec<f64>,
}

impl Projection {
    fn sample(rng: &mut ChaCha8Rng, rows: usize) -> Self {
        Self {
            rows,
            m: normals(rng, rows * 2),
        }
    }

    fn apply(&self, latent: [f64; 2]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.m[2 * r] * latent[0] + self.m[2 * r + 1] * latent[1])
            .collect()
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

struct Identity {
    left_eye: Vec<f64>,
    right_eye: Vec<f64>,
    face: Vec<f64>,
    face_grid: Vec<f64>,
}

/// Generates the cohort. Participants `0..multi_participants` are the
/// multi-recording ones; recording ids are assigned sequentially.
pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<Vec<Recording>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.dims;
    let p_left = Projection::sample(&mut rng, d.eye);
    let p_right = Projection::sample(&mut rng, d.eye);
    let p_face = Projection::sample(&mut rng, d.face);
    let p_grid = Projection::sample(&mut rng, d.face_grid);
    let s = config.identity_signal_strength;
    let sigma = config.noise_scale;

    let mut recordings = Vec::with_capacity(config.recording_count());
    let mut next_recording = 0u32;
    for pid in 0..config.n_participants {
        let identity = Identity {
            left_eye: normals(&mut rng, d.eye),
            right_eye: normals(&mut rng, d.eye),
            face: normals(&mut rng, d.face),
            face_grid: normals(&mut rng, d.face_grid),
        };
        let n_rec = if pid < config.multi_participants {
            config.recordings_per_multi
        } else {
            1
        };
        for _ in 0..n_rec {
            let n_frames = rng.random_range(config.frames_min..=config.frames_max);
            let frames = (0..n_frames)
                .map(|fi| {
                    let gaze_dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    let head = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    let mut stream = |proj: &Projection, id: &[f64], latent| {
                        let mut v = proj.apply(latent);
                        for (x, i) in v.iter_mut().zip(id) {
                            *x += s * i + sigma * rng.sample::<f64, _>(StandardNormal);
                        }
                        v
                    };
                    let left_eye = stream(&p_left, &identity.left_eye, gaze_dir);
                    let right_eye = stream(&p_right, &identity.right_eye, gaze_dir);
                    let face = stream(&p_face, &identity.face, head);
                    let face_grid = stream(&p_grid, &identity.face_grid, head);
                    Frame {
                        participant_id: pid as u32,
                        recording_id: next_recording,
                        frame_index: fi as u32,
                        left_eye,
                        right_eye,
                        face,
                        face_grid,
                        gaze: [
                            gaze_dir[0] + HEAD_TO_GAZE * head[0],
                            gaze_dir[1] + HEAD_TO_GAZE * head[1],
                        ],
                    }
                })
                .collect();
            recordings.push(Recording {
                recording_id: next_recording,
                participant_id: pid as u32,
                frames,
                in_target_train: false,
            });
            next_recording += 1;
        }
    }
    Ok(recordings)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetAssignment {
    pub fraction: f64,
    /// Mark exactly `round(fraction · n)` of the free recordings instead of
    /// flipping a coin per recording.
    pub exact_count: bool,
    /// Number of multi-recording participants forced to have one recording in
    /// and one out of the target training set.
    pub forced_multi: usize,
}

/// Marks `in_target_train` on every recording (overwriting previous marks).
pub fn assign_target_train(
    recordings: &mut [Recording],
    assignment: &TargetAssignment,
    seed: u64,
) -> Result<()> {
    if recordings.len() < 2 {
        return Err(Error::invalid(
            "need at least 2 recordings to assign target membership",
        ));
    }
    if !(assignment.fraction > 0.0 && assignment.fraction < 1.0) {
        return Err(Error::invalid(
            "target fraction must lie strictly between 0 and 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in recordings.iter_mut() {
        r.in_target_train = false;
    }

    let mut multi = multi_participants(recordings);
    if assignment.forced_multi > multi.len() {
        return Err(Error::invalid(format!(
            "cannot force {} multi-recording participants, only {} exist",
            assignment.forced_multi,
            multi.len()
        )));
    }
    multi.shuffle(&mut rng);
    let mut fixed = vec![false; recordings.len()];
    for &pid in &multi[..assignment.forced_multi] {
        let mut idx: Vec<usize> = (0..recordings.len())
            .filter(|&i| recordings[i].participant_id == pid)
            .collect();
        idx.shuffle(&mut rng);
        recordings[idx[0]].in_target_train = true;
        fixed[idx[0]] = true;
        fixed[idx[1]] = true;
    }

    let mut free: Vec<usize> = (0..recordings.len()).filter(|&i| !fixed[i]).collect();
    if assignment.exact_count {
        free.shuffle(&mut rng);
        let k = (assignment.fraction * free.len() as f64).round() as usize;
        for &i in &free[..k] {
            recordings[i].in_target_train = true;
        }
    } else {
        for &i in &free {
            recordings[i].in_target_train = rng.random_bool(assignment.fraction);
        }
    }
    Ok(())
}

fn multi_participants(recordings: &[Recording]) -> Vec<u32> {
    let mut counts = std::collections::BTreeMap::new();
    for r in recordings {
        *counts.entry(r.participant_id).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c > 1)
        .map(|(p, _)| p)
        .collect()
}

pub fn label_instance(recording: &Recording) -> u8 {
    recording.in_target_train as u8
}

/// `siblings` is every recording of the participant; `recording` itself
/// counts whether or not it is included.
pub fn label_person(recording: &Recording, siblings: &[&Recording]) -> u8 {
    let any = recording.in_target_train
        || siblings
            .iter()
            .any(|s| s.participant_id == recording.participant_id && s.in_target_train);
    any as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSplit {
    AttackTrain,
    AttackValid,
    AttackTest,
}

impl AttackSplit {
    pub const ALL: [AttackSplit; 3] = [
        AttackSplit::AttackTrain,
        AttackSplit::AttackValid,
        AttackSplit::AttackTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackSplit::AttackTrain => "attack_train",
            AttackSplit::AttackValid => "attack_valid",
            AttackSplit::AttackTest => "attack_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub recording_id: u32,
    pub participant_id: u32,
    pub split: AttackSplit,
    pub y_instance: u8,
    pub y_person: u8,
}

/// One entry per recording, in the order of the recordings given to
/// [`split_for_attack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub entries: Vec<SplitEntry>,
}

impl CohortSplit {
    pub fn entry(&self, recording_id: u32) -> Option<&SplitEntry> {
        self.entries.iter().find(|e| e.recording_id == recording_id)
    }

    pub fn in_split(&self, split: AttackSplit) -> impl Iterator<Item = &SplitEntry> + '_ {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Recordings whose person label and instance label disagree: the
    /// participant has another recording in the target training set.
    pub fn cross_label(&self, split: AttackSplit) -> impl Iterator<Item = &SplitEntry> + '_ {
        self.in_split(split)
            .filter(|e| e.y_person == 1 && e.y_instance == 0)
    }
}

/// Largest-remainder allocation of `n` items over `ratios`.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Assigns every recording to an attack split.
///
/// In-training recordings of multi-recording participants always go to
/// `attack_train`. Everything else is split by `ratios` in three
/// separately shuffled pools: out-of-training recordings of multi-recording
/// participants, single-recording members, single-recording non-members.
pub fn split_for_attack(
    recordings: &[Recording],
    ratios: [f64; 3],
    seed: u64,
) -> Result<CohortSplit> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite())
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(
            "split ratios must be non-negative and sum to 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let multi: std::collections::BTreeSet<u32> =
        multi_participants(recordings).into_iter().collect();

    let mut splits: Vec<Option<AttackSplit>> = vec![None; recordings.len()];
    let mut pools: [Vec<usize>; 3] = Default::default();
    for (i, r) in recordings.iter().enumerate() {
        if multi.contains(&r.participant_id) {
            if r.in_target_train {
                splits[i] = Some(AttackSplit::AttackTrain);
            } else {
                pools[0].push(i);
            }
        } else if r.in_target_train {
            pools[1].push(i);
        } else {
            pools[2].push(i);
        }
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
        let counts = allocate(pool.len(), &ratios);
        let mut it = pool.iter();
        for (split, &c) in AttackSplit::ALL.iter().zip(&counts) {
            for &i in it.by_ref().take(c) {
                splits[i] = Some(*split);
            }
        }
    }

    let entries: Vec<SplitEntry> = recordings
        .iter()
        .zip(&splits)
        .map(|(r, s)| {
            let siblings: Vec<&Recording> = recordings
                .iter()
                .filter(|o| o.participant_id == r.participant_id)
                .collect();
            SplitEntry {
                recording_id: r.recording_id,
                participant_id: r.participant_id,
                split: s.expect("every recording is placed"),
                y_instance: label_instance(r),
                y_person: label_person(r, &siblings),
            }
        })
        .collect();
    for split in AttackSplit::ALL {
        if ratios[split as usize] > 0.0 && !entries.iter().any(|e| e.split == split) {
            return Err(Error::invalid(format!(
                "too few recordings: {} would be empty",
                split.name()
            )));
        }
    }
    Ok(CohortSplit { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> CohortConfig {
        CohortConfig {
            n_participants: 10,
            multi_participants: 0,
            recordings_per_multi: 2,
            frames_min: 5,
            frames_max: 5,
            dims: FeatureDims {
                eye: 3,
                face: 4,
                face_grid: 2,
            },
            identity_signal_strength: 0.5,
            noise_scale: 1.0,
        }
    }

    fn marked_cohort(n: usize, multi: usize, seed: u64) -> Vec<Recording> {
        let cfg = CohortConfig {
            n_participants: n,
            multi_participants: multi,
            frames_min: 1,
            frames_max: 2,
            ..tiny()
        };
        let mut recs = generate_cohort(&cfg, seed).unwrap();
        assign_target_train(
            &mut recs,
            &TargetAssignment {
                fraction: 0.5,
                exact_count: true,
                forced_multi: multi,
            },
            seed + 1,
        )
        .unwrap();
        recs
    }

    #[test]
    fn counts_recordings_and_frames() {
        let recs = generate_cohort(&tiny(), 1).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(recs.iter().map(|r| r.frames.len()).sum::<usize>(), 50);
        for r in &recs {
            assert!(r.frames.iter().all(|f| f.recording_id == r.recording_id
                && f.participant_id == r.participant_id
                && f.left_eye.len() == 3
                && f.face.len() == 4
                && f.face_grid.len() == 2));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_cohort(&tiny(), 9).unwrap(),
            generate_cohort(&tiny(), 9).unwrap()
        );
        assert_ne!(
            generate_cohort(&tiny(), 9).unwrap(),
            generate_cohort(&tiny(), 10).unwrap()
        );
    }

    #[test]
    fn rejects_empty_dims() {
        let mut cfg = tiny();
        cfg.dims.face = 0;
        assert!(generate_cohort(&cfg, 0).is_err());
    }

    #[test]
    fn zero_identity_signal_is_indistinguishable() {
        // Two participants, 1000 frames each; compare per-coordinate means of the face stream.
        let cfg = CohortConfig {
            n_participants: 2,
            frames_min: 1000,
            frames_max: 1000,
            identity_signal_strength: 0.0,
            ..tiny()
        };
        let recs = generate_cohort(&cfg, 5).unwrap();
        let stats = |r: &Recording, c: usize| {
            let xs: Vec<f64> = r.frames.iter().map(|f| f.face[c]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            (m, v, xs.len() as f64)
        };
        for c in 0..4 {
            let (m0, v0, n0) = stats(&recs[0], c);
            let (m1, v1, n1) = stats(&recs[1], c);
            let se = (v0 / n0 + v1 / n1).sqrt();
            assert!((m0 - m1).abs() < 3.0 * se, "coordinate {c}");
        }
        // With full identity signal, the same check separates them on some coordinate.
        let strong = generate_cohort(
            &CohortConfig {
                identity_signal_strength: 1.0,
                ..cfg
            },
            5,
        )
        .unwrap();
        let separated = (0..4).any(|c| {
            let (m0, v0, n0) = stats(&strong[0], c);
            let (m1, v1, n1) = stats(&strong[1], c);
            (m0 - m1).abs() > 3.0 * (v0 / n0 + v1 / n1).sqrt()
        });
        assert!(separated);
    }

    #[test]
    fn exact_fraction_marks_exact_count() {
        let cfg = CohortConfig {
            n_participants: 200,
            frames_min: 1,
            frames_max: 1,
            ..tiny()
        };
        let mut recs = generate_cohort(&cfg, 2).unwrap();
        let a = TargetAssignment {
            fraction: 0.5,
            exact_count: true,
            forced_multi: 0,
        };
        assign_target_train(&mut recs, &a, 3).unwrap();
        assert_eq!(recs.iter().filter(|r| r.in_target_train).count(), 100);
        let mut again = recs.clone();
        assign_target_train(&mut again, &a, 3).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn forced_multi_has_one_in_one_out() {
        let recs = marked_cohort(20, 6, 4);
        for pid in 0..6u32 {
            let flags: Vec<bool> = recs
                .iter()
                .filter(|r| r.participant_id == pid)
                .map(|r| r.in_target_train)
                .collect();
            assert_eq!(flags.len(), 2);
            assert_eq!(flags.iter().filter(|&&b| b).count(), 1);
        }
    }

    #[test]
    fn assignment_rejects_bad_input() {
        let mut one = generate_cohort(
            &CohortConfig {
                n_participants: 1,
                ..tiny()
            },
            0,
        )
        .unwrap();
        let a = TargetAssignment {
            fraction: 0.5,
            exact_count: false,
            forced_multi: 0,
        };
        assert!(assign_target_train(&mut one, &a, 0).is_err());
        let mut recs = generate_cohort(&tiny(), 0).unwrap();
        assert!(
            assign_target_train(&mut recs, &TargetAssignment { fraction: 1.0, ..a }, 0).is_err()
        );
        assert!(assign_target_train(
            &mut recs,
            &TargetAssignment {
                forced_multi: 1,
                ..a
            },
            0
        )
        .is_err());
    }

    #[test]
    fn instance_and_person_labels() {
        let rec = |id, pid, inside| Recording {
            recording_id: id,
            participant_id: pid,
            frames: vec![],
            in_target_train: inside,
        };
        let a1 = rec(0, 7, true);
        let a2 = rec(1, 7, false);
        let b = rec(2, 8, false);
        assert_eq!(label_instance(&a1), 1);
        assert_eq!(label_instance(&a2), 0);
        assert_eq!(label_instance(&b), 0);
        assert_eq!(label_person(&a1, &[&a1, &a2]), 1);
        assert_eq!(label_person(&a2, &[&a1, &a2]), 1);
        assert_eq!(label_person(&b, &[&b]), 0);
        assert_eq!(label_person(&a1, &[]), 1);
    }

    #[test]
    fn split_matches_reference_proportions_at_desk_scale() {
        // Ratios 242/170/198 over 610 recordings.
        let ratios = [242.0 / 610.0, 170.0 / 610.0, 198.0 / 610.0];
        let recs = marked_cohort(55, 6, 12); // 61 recordings
        assert_eq!(recs.len(), 61);
        let split = split_for_attack(&recs, ratios, 13).unwrap();
        for s in AttackSplit::ALL {
            let n = split.in_split(s).count();
            let pos = split.in_split(s).filter(|e| e.y_instance == 1).count();
            assert!(n > 0);
            let frac = pos as f64 / n as f64;
            assert!((0.3..=0.7).contains(&frac), "{s:?}: {frac}");
        }
    }

    #[test]
    fn split_rejects_bad_ratios_and_tiny_input() {
        let recs = marked_cohort(10, 0, 1);
        assert!(split_for_attack(&recs, [0.5, 0.5, 0.5], 0).is_err());
        let few = &recs[..2];
        assert!(split_for_attack(few, [0.4, 0.3, 0.3], 0).is_err());
    }

    #[test]
    fn allocation_sums() {
        assert_eq!(allocate(10, &[0.4, 0.3, 0.3]), [4, 3, 3]);
        assert_eq!(allocate(7, &[0.4, 0.3, 0.3]), [3, 2, 2]);
        assert_eq!(allocate(0, &[0.4, 0.3, 0.3]), [0, 0, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn split_invariants(n in 12usize..40, multi in 0usize..6, seed in any::<u64>()) {
            let recs = marked_cohort(n, multi, seed % 1000);
            let split = split_for_attack(&recs, [0.4, 0.3, 0.3], seed).unwrap();
            // disjoint cover, in recording order
            prop_assert_eq!(split.entries.len(), recs.len());
            for (e, r) in split.entries.iter().zip(&recs) {
                prop_assert_eq!(e.recording_id, r.recording_id);
                prop_assert_eq!(e.y_instance == 1, r.in_target_train);
                prop_assert!(e.y_person >= e.y_instance);
                if (r.participant_id as usize) < multi && r.in_target_train {
                    prop_assert_eq!(e.split, AttackSplit::AttackTrain);
                }
            }
            let again = split_for_attack(&recs, [0.4, 0.3, 0.3], seed).unwrap();
            prop_assert_eq!(split, again);
        }
    }
}
