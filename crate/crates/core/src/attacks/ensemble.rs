//! Worst-case combination of attacks, used as the stand-in for external
//! parameter-free attack suites.

use super::{Attack, AttackConfig};
use crate::error::{Error, Result};
use crate::network::{argmax_rows, Network};
use crate::tape::LOG_CLAMP;
use crate::tensor::Tensor;

/// Runs every member and keeps, per sample, the first member's image that
/// makes the argmax prediction miss the label; if no member succeeds, the
/// image with the highest cross-entropy loss. Robust accuracy under the
/// ensemble can therefore never exceed any single member's.
pub struct WorstCaseEnsemble {
    members: Vec<Box<dyn Attack>>,
}

impl WorstCaseEnsemble {
    pub fn new(members: Vec<Box<dyn Attack>>) -> Result<WorstCaseEnsemble> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member attack".into()));
        }
        Ok(WorstCaseEnsemble { members })
    }

    /// Convenience constructor from registered names sharing one config.
    pub fn from_names(names: &[&str], cfg: &AttackConfig) -> Result<WorstCaseEnsemble> {
        let members = names
            .iter()
            .map(|name| super::build_attack(name, cfg))
            .collect::<Result<Vec<_>>>()?;
        WorstCaseEnsemble::new(members)
    }

    pub fn members(&self) -> &[Box<dyn Attack>] {
        &self.members
    }
}

impl Attack for WorstCaseEnsemble {
    fn name(&self) -> &'static str {
        "ensemble"
    }

    fn perturb(&self, net: &Network, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let [b, h, w, c] = images.dims4()?;
        let sample = h * w * c;
        let mut out = images.clone();
        // (flipped, best loss, member) per sample; start below any real loss.
        let mut chosen: Vec<(bool, f32)> = vec![(false, f32::NEG_INFINITY); b];

        for member in &self.members {
            let adv = member.perturb(net, images, labels)?;
            let probs = net.predict_probs(&adv)?;
            let preds = argmax_rows(&probs);
            let k = probs.shape()[1];
            for t in 0..b {
                let (already_flipped, best_loss) = chosen[t];
                if already_flipped {
                    continue;
                }
                let flipped = preds[t] != labels[t];
                let loss = -probs.data()[t * k + labels[t]].max(LOG_CLAMP).ln();
                if flipped || loss > best_loss {
                    chosen[t] = (flipped, loss);
                    out.data_mut()[t * sample..(t + 1) * sample]
                        .copy_from_slice(&adv.data()[t * sample..(t + 1) * sample]);
                }
            }
        }
        Ok(out)
    }
}
