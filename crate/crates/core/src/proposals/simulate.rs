use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationRecord, SoftLabel};
use crate::error::{Error, Result};

use super::{AnnotationSession, ProposalMode, ProposalSet};

/// How a simulated annotator treats proposals and how long it takes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorBehavior {
    /// Probability of accepting a proposal that matches the majority class.
    pub accept_prob: f64,
    /// Seconds per image when annotating from scratch.
    pub base_time: f64,
    /// Seconds per image when accepting a proposal.
    pub proposal_time: f64,
    /// Half-width of uniform timing noise, in seconds.
    pub noise: f64,
}

impl Default for AnnotatorBehavior {
    fn default() -> Self {
        AnnotatorBehavior {
            accept_prob: 0.9,
            base_time: 12.0,
            proposal_time: 5.0,
            noise: 1.0,
        }
    }
}

impl AnnotatorBehavior {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accept_prob) {
            return Err(Error::InvalidConfig("accept_prob must be in [0, 1]".into()));
        }
        if !(self.base_time > 0.0 && self.proposal_time > 0.0 && self.noise >= 0.0) {
            return Err(Error::InvalidConfig("times must be positive and noise >= 0".into()));
        }
        Ok(())
    }
}

/// Annotates `images` once. A proposal equal to the image's majority class
/// is accepted with `accept_prob` at `proposal_time`; otherwise the class is
/// drawn from the soft label at `base_time`. Durations never drop below 1 ms.
pub fn simulate_annotator<R: Rng + ?Sized>(
    annotator: &str,
    repetition: u32,
    images: &[(String, SoftLabel)],
    proposals: Option<&ProposalSet>,
    behavior: &AnnotatorBehavior,
    rng: &mut R,
) -> Result<AnnotationSession> {
    behavior.validate()?;
    let lookup = proposals.map(|p| p.proposed_classes());
    let mut clock = 0.0;
    let mut records = Vec::with_capacity(images.len());
    for (id, gt) in images {
        let proposed = lookup.as_ref().and_then(|l| l.get(id.as_str()).copied());
        let accepted = proposed == Some(gt.argmax()) && rng.random_bool(behavior.accept_prob);
        let (class, base) = if accepted {
            (gt.argmax(), behavior.proposal_time)
        } else {
            (gt.sample(rng), behavior.base_time)
        };
        let jitter = if behavior.noise > 0.0 {
            rng.random_range(-behavior.noise..=behavior.noise)
        } else {
            0.0
        };
        let duration = (base + jitter).max(1e-3);
        clock += duration;
        records.push(AnnotationRecord {
            timestamp: Some(clock),
            duration: Some(duration),
            repetition,
            ..AnnotationRecord::new(id.clone(), annotator, class)
        });
    }
    Ok(AnnotationSession {
        annotator_id: annotator.to_string(),
        proposal_mode: proposals.map_or(ProposalMode::None, |p| p.mode),
        repetition,
        manifest: proposals.map(|p| p.manifest.clone()).unwrap_or_default(),
        started: Some(0.0),
        ended: Some(clock),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::{consistency, speed_up, ImageProposal, ProposalKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perfect(images: &[(String, SoftLabel)]) -> ProposalSet {
        ProposalSet {
            manifest: "m".into(),
            mode: ProposalMode::Dc3,
            images: images
                .iter()
                .map(|(id, g)| ImageProposal {
                    id: id.clone(),
                    kind: ProposalKind::Certain,
                    class: Some(g.argmax()),
                    cluster: None,
                    p_a: 0.1,
                })
                .collect(),
            clusters: vec![],
        }
    }

    fn fuzzy_images(n: usize) -> Vec<(String, SoftLabel)> {
        (0..n)
            .map(|i| (format!("img{i}"), SoftLabel::new(vec![0.5, 0.5]).unwrap()))
            .collect()
    }

    #[test]
    fn always_accepting_perfect_proposals_is_consistent() {
        let imgs = fuzzy_images(50);
        let props = perfect(&imgs);
        let b = AnnotatorBehavior {
            accept_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reps: Vec<_> = (1..=3)
            .map(|r| simulate_annotator("a", r, &imgs, Some(&props), &b, &mut rng).unwrap())
            .collect();
        assert_eq!(consistency(&reps).unwrap(), 1.0);
    }

    #[test]
    fn no_proposals_on_uniform_labels_agree_half_the_time() {
        let imgs = fuzzy_images(20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = AnnotatorBehavior::default();
        let reps: Vec<_> = (1..=2)
            .map(|r| simulate_annotator("a", r, &imgs, None, &b, &mut rng).unwrap())
            .collect();
        let c = consistency(&reps).unwrap();
        assert!((c - 0.5).abs() < 0.02, "{c}");
    }

    #[test]
    fn all_accepted_speed_up_is_time_ratio() {
        let imgs = fuzzy_images(10);
        let props = perfect(&imgs);
        let b = AnnotatorBehavior {
            accept_prob: 1.0,
            base_time: 10.0,
            proposal_time: 2.0,
            noise: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = vec![
            simulate_annotator("a", 1, &imgs, None, &b, &mut rng).unwrap(),
            simulate_annotator("a", 1, &imgs, Some(&props), &b, &mut rng).unwrap(),
        ];
        assert_eq!(speed_up(&s, ProposalMode::Dc3).unwrap(), 5.0);
    }

    #[test]
    fn invalid_behavior_rejected() {
        let b = AnnotatorBehavior {
            accept_prob: 1.5,
            ..Default::default()
        };
        assert!(simulate_annotator("a", 1, &[], None, &b, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
