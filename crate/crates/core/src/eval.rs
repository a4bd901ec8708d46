//! Measurements: natural and adversarial accuracy, epsilon sweeps, metrics
//! CSV files, run comparison, and signed input-gradient image export.
//!
//! Evaluation always uses argmax predictions; sampling is a training-time
//! device only.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attacks::{self, Attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::objectives::LossMode;
use crate::tensor::Tensor;

/// Batch size used when walking a dataset through the network.
pub const EVAL_BATCH: usize = 64;

/// Generalization-gap level flagged by [`compare_runs`].
pub const GAP_THRESHOLD: f32 = 0.02;

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f32> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f32 / predictions.len() as f32)
}

fn batched_correct_count(
    net: &Network,
    ds: &Dataset,
    attack: Option<&dyn Attack>,
) -> Result<usize> {
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < ds.len() {
        let end = (start + EVAL_BATCH).min(ds.len());
        let indices: Vec<usize> = (start..end).collect();
        let (images, labels) = ds.batch(&indices);
        let images = match attack {
            Some(a) => a.perturb(net, &images, &labels)?,
            None => images,
        };
        let preds = net.predict_classes(&images)?;
        correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        start = end;
    }
    Ok(correct)
}

/// Argmax accuracy on the clean dataset.
pub fn natural_accuracy(net: &Network, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    Ok(batched_correct_count(net, ds, None)? as f32 / ds.len() as f32)
}

/// Argmax accuracy on attacked images.
pub fn adversarial_accuracy(net: &Network, ds: &Dataset, attack: &dyn Attack) -> Result<f32> {
    if ds.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    Ok(batched_correct_count(net, ds, Some(attack))? as f32 / ds.len() as f32)
}

/// One checkpoint's measurements; the gap is train minus test accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_mode: LossMode,
    pub train_accuracy: f32,
    pub test_accuracy: f32,
    pub adv_accuracy: f32,
    pub generalization_gap: f32,
}

impl MetricsRecord {
    pub fn new(
        epoch: usize,
        loss_mode: LossMode,
        train_accuracy: f32,
        test_accuracy: f32,
        adv_accuracy: f32,
    ) -> MetricsRecord {
        MetricsRecord {
            epoch,
            loss_mode,
            train_accuracy,
            test_accuracy,
            adv_accuracy,
            generalization_gap: train_accuracy - test_accuracy,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,loss_mode,train_acc,test_acc,adv_fgsm_acc,gap";

pub fn format_metrics_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6}",
        r.epoch,
        r.loss_mode.as_str(),
        r.train_accuracy,
        r.test_accuracy,
        r.adv_accuracy,
        r.generalization_gap
    )
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format_metrics_row(r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    parse_metrics_csv(&text, &path.display().to_string())
}

pub fn parse_metrics_csv(text: &str, origin: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "{origin}: expected header {METRICS_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "{origin}: line {} has {} fields, expected 6",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Format(format!("{origin}: line {}: bad {what}", lineno + 2));
        let epoch: usize = fields[0].parse().map_err(|_| bad("epoch"))?;
        let loss_mode = LossMode::parse(fields[1]).map_err(|_| bad("loss_mode"))?;
        let train: f32 = fields[2].parse().map_err(|_| bad("train_acc"))?;
        let test: f32 = fields[3].parse().map_err(|_| bad("test_acc"))?;
        let adv: f32 = fields[4].parse().map_err(|_| bad("adv_acc"))?;
        let gap: f32 = fields[5].parse().map_err(|_| bad("gap"))?;
        records.push(MetricsRecord {
            epoch,
            loss_mode,
            train_accuracy: train,
            test_accuracy: test,
            adv_accuracy: adv,
            generalization_gap: gap,
        });
    }
    Ok(records)
}

/// Adversarial accuracy of one checkpoint across perturbation budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub attack: String,
    pub rows: Vec<(f32, f32)>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,adv_accuracy\n");
        for (eps, acc) in &self.rows {
            out.push_str(&format!("{:.6},{:.6}\n", eps, acc));
        }
        out
    }
}

/// Accuracy under `attack_name` at each epsilon. The list must be ascending
/// and start at 0, so the first row doubles as the natural accuracy.
pub fn epsilon_sweep(
    net: &Network,
    ds: &Dataset,
    attack_name: &str,
    base_cfg: &AttackConfig,
    eps_list: &[f32],
) -> Result<SweepResult> {
    if eps_list.is_empty() {
        return Err(Error::Input("epsilon list is empty".into()));
    }
    if eps_list[0] != 0.0 {
        return Err(Error::Input("epsilon list must start at 0".into()));
    }
    if eps_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("epsilon list must be sorted ascending".into()));
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let cfg = AttackConfig { epsilon: eps, ..*base_cfg };
        let attack = attacks::build_attack(attack_name, &cfg)?;
        rows.push((eps, adversarial_accuracy(net, ds, attack.as_ref())?));
    }
    Ok(SweepResult { attack: attack_name.to_string(), rows })
}

fn write_ppm(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes, per sample, the original image, the signed input-gradient map
/// (sign -1/0/+1 drawn as 0/128/255), and the FGSM adversarial image, as
/// binary PPM files. Returns the paths in sample order.
pub fn export_gradients(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let [b, h, w, c] = images.dims4()?;
    if c != 3 {
        return Err(Error::Input("gradient export needs 3-channel images".into()));
    }
    if labels.len() != b {
        return Err(Error::Input(format!("{b} images vs {} labels", labels.len())));
    }
    fs::create_dir_all(out_dir)?;
    let grad = attacks::input_gradient(net, images, labels)?;
    let adv = attacks::Fgsm::new(*cfg).perturb(net, images, labels)?;

    let sample = h * w * c;
    let mut paths = Vec::with_capacity(3 * b);
    for t in 0..b {
        let slice = t * sample..(t + 1) * sample;
        let orig_path = out_dir.join(format!("sample{t:03}_original.ppm"));
        write_ppm(&orig_path, &to_bytes(&images.data()[slice.clone()]), h, w)?;

        let grad_bytes: Vec<u8> = grad[slice.clone()]
            .iter()
            .map(|&g| if g > 0.0 { 255u8 } else if g < 0.0 { 0 } else { 128 })
            .collect();
        let grad_path = out_dir.join(format!("sample{t:03}_gradient.ppm"));
        write_ppm(&grad_path, &grad_bytes, h, w)?;

        let adv_path = out_dir.join(format!("sample{t:03}_adversarial.ppm"));
        write_ppm(&adv_path, &to_bytes(&adv.data()[slice]), h, w)?;

        paths.extend([orig_path, grad_path, adv_path]);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub epoch: usize,
    pub delta_train: f32,
    pub delta_test: f32,
    pub delta_adv: f32,
}

/// Side-by-side report over two metrics files.
#[derive(Debug, Clone)]
pub struct RunComparison {
    pub rows: Vec<ComparisonRow>,
    /// (epoch, adversarial accuracy) of the best checkpoint per run.
    pub best_a: (usize, f32),
    pub best_b: (usize, f32),
    /// Epochs whose generalization gap exceeds [`GAP_THRESHOLD`], per run.
    pub gap_flags_a: Vec<(usize, f32)>,
    pub gap_flags_b: Vec<(usize, f32)>,
}

fn best_checkpoint(records: &[MetricsRecord]) -> (usize, f32) {
    let mut best = (records[0].epoch, records[0].adv_accuracy);
    for r in records {
        if r.adv_accuracy > best.1 {
            best = (r.epoch, r.adv_accuracy);
        }
    }
    best
}

fn gap_flags(records: &[MetricsRecord]) -> Vec<(usize, f32)> {
    records
        .iter()
        .filter(|r| r.generalization_gap > GAP_THRESHOLD)
        .map(|r| (r.epoch, r.generalization_gap))
        .collect()
}

/// Compares two runs checkpoint by checkpoint (b minus a, joined on epoch).
pub fn compare_runs(a: &[MetricsRecord], b: &[MetricsRecord]) -> Result<RunComparison> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Format("cannot compare empty metrics".into()));
    }
    let mut rows = Vec::new();
    for ra in a {
        if let Some(rb) = b.iter().find(|r| r.epoch == ra.epoch) {
            rows.push(ComparisonRow {
                epoch: ra.epoch,
                delta_train: rb.train_accuracy - ra.train_accuracy,
                delta_test: rb.test_accuracy - ra.test_accuracy,
                delta_adv: rb.adv_accuracy - ra.adv_accuracy,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Format("runs share no checkpoint epochs".into()));
    }
    Ok(RunComparison {
        rows,
        best_a: best_checkpoint(a),
        best_b: best_checkpoint(b),
        gap_flags_a: gap_flags(a),
        gap_flags_b: gap_flags(b),
    })
}

pub fn compare_run_files(path_a: &Path, path_b: &Path) -> Result<RunComparison> {
    let a = read_metrics_csv(path_a)?;
    let b = read_metrics_csv(path_b)?;
    compare_runs(&a, &b)
}

impl fmt::Display for RunComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epoch  d_train    d_test     d_adv")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>5}  {:+.6}  {:+.6}  {:+.6}",
                r.epoch, r.delta_train, r.delta_test, r.delta_adv
            )?;
        }
        writeln!(f, "best adv checkpoint A: epoch {} ({:.6})", self.best_a.0, self.best_a.1)?;
        writeln!(f, "best adv checkpoint B: epoch {} ({:.6})", self.best_b.0, self.best_b.1)?;
        let flag = |name: &str, flags: &[(usize, f32)], f: &mut fmt::Formatter<'_>| -> fmt::Result {
            if flags.is_empty() {
                writeln!(f, "run {name}: no epochs with gap > {GAP_THRESHOLD}")
            } else {
                let list: Vec<String> =
                    flags.iter().map(|(e, g)| format!("{e} ({g:+.4})")).collect();
                writeln!(f, "run {name}: gap > {GAP_THRESHOLD} at epochs {}", list.join(", "))
            }
        };
        flag("A", &self.gap_flags_a, f)?;
        flag("B", &self.gap_flags_b, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::network::{build_network, ConvBlock, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(seed: u64) -> Network {
        let cfg = NetworkConfig {
            conv_blocks: vec![ConvBlock { layers: 1, channels: 4 }],
            dense_units: vec![],
            num_classes: 10,
            input_shape: [32, 32, 3],
        };
        build_network(&cfg, seed).unwrap()
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn zero_epsilon_attack_accuracy_equals_natural_exactly() {
        let net = tiny_net(1);
        let ds = make_synthetic(50, 10, 2).unwrap();
        let natural = natural_accuracy(&net, &ds).unwrap();
        for name in ["fgsm", "pgd", "ensemble"] {
            let attack = attacks::build_attack(
                name,
                &AttackConfig { epsilon: 0.0, ..Default::default() },
            )
            .unwrap();
            let adv = adversarial_accuracy(&net, &ds, attack.as_ref()).unwrap();
            assert_eq!(adv, natural, "{name}");
        }
    }

    #[test]
    fn untrained_network_sits_at_chance_level() {
        // Labels are assigned independently of the images, so any fixed
        // predictor scores 1/10 in expectation on them. The attack targets
        // the labels, so it can only push accuracy below that.
        let net = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1000;
        let images = Tensor::from_vec(
            &[n, 32, 32, 3],
            (0..n * 32 * 32 * 3).map(|_| rng.gen_range(0.0f32..=1.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let ds = Dataset::new(images, labels, "noise").unwrap();
        let natural = natural_accuracy(&net, &ds).unwrap();
        assert!((natural - 0.1).abs() < 0.03, "natural accuracy {natural}");

        let attack = attacks::build_attack("fgsm", &AttackConfig::default()).unwrap();
        let adv = adversarial_accuracy(&net, &ds, attack.as_ref()).unwrap();
        assert!(adv <= natural + 0.02, "adversarial {adv} vs natural {natural}");
    }

    #[test]
    fn sweep_requires_ascending_list_from_zero() {
        let net = tiny_net(5);
        let ds = make_synthetic(20, 10, 6).unwrap();
        let cfg = AttackConfig::default();
        assert!(epsilon_sweep(&net, &ds, "fgsm", &cfg, &[]).is_err());
        assert!(epsilon_sweep(&net, &ds, "fgsm", &cfg, &[0.01]).is_err());
        assert!(epsilon_sweep(&net, &ds, "fgsm", &cfg, &[0.0, 0.02, 0.01]).is_err());

        let sweep = epsilon_sweep(&net, &ds, "fgsm", &cfg, &[0.0]).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert_eq!(sweep.rows[0].1, natural_accuracy(&net, &ds).unwrap());
    }

    #[test]
    fn sweep_duplicate_epsilons_agree() {
        let net = tiny_net(7);
        let ds = make_synthetic(20, 10, 8).unwrap();
        let sweep = epsilon_sweep(
            &net,
            &ds,
            "fgsm",
            &AttackConfig::default(),
            &[0.0, 4.0 / 255.0, 4.0 / 255.0],
        )
        .unwrap();
        assert_eq!(sweep.rows[1].1, sweep.rows[2].1);
        let csv = sweep.to_csv();
        assert!(csv.starts_with("epsilon,adv_accuracy\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn metrics_csv_round_trips() {
        let records = vec![
            MetricsRecord::new(20, LossMode::PolicyGradient, 0.5125, 0.5, 0.37),
            MetricsRecord::new(40, LossMode::CrossEntropy, 0.75, 0.70125, 0.25),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &records).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.loss_mode, b.loss_mode);
            assert!((a.train_accuracy - b.train_accuracy).abs() < 1e-6);
            assert!((a.generalization_gap - b.generalization_gap).abs() < 1e-6);
        }
    }

    #[test]
    fn metrics_csv_rejects_bad_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "epoch,foo\n1,2\n").unwrap();
        assert!(matches!(read_metrics_csv(&path), Err(Error::Format(_))));
        fs::write(&path, format!("{METRICS_HEADER}\n1,ce,0.5\n")).unwrap();
        assert!(matches!(read_metrics_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn comparing_a_run_with_itself_gives_zero_deltas() {
        let records = vec![
            MetricsRecord::new(20, LossMode::CrossEntropy, 0.6, 0.55, 0.3),
            MetricsRecord::new(40, LossMode::CrossEntropy, 0.8, 0.7, 0.35),
        ];
        let cmp = compare_runs(&records, &records).unwrap();
        assert_eq!(cmp.rows.len(), 2);
        for row in &cmp.rows {
            assert_eq!(row.delta_train, 0.0);
            assert_eq!(row.delta_test, 0.0);
            assert_eq!(row.delta_adv, 0.0);
        }
        assert_eq!(cmp.best_a, cmp.best_b);
    }

    #[test]
    fn best_checkpoint_and_gap_flags_on_fabricated_series() {
        let a = vec![
            MetricsRecord::new(20, LossMode::CrossEntropy, 0.60, 0.59, 0.20),
            MetricsRecord::new(40, LossMode::CrossEntropy, 0.80, 0.70, 0.33),
            MetricsRecord::new(60, LossMode::CrossEntropy, 0.90, 0.75, 0.28),
        ];
        let b = vec![
            MetricsRecord::new(20, LossMode::PolicyGradient, 0.55, 0.54, 0.22),
            MetricsRecord::new(40, LossMode::PolicyGradient, 0.70, 0.69, 0.30),
            MetricsRecord::new(60, LossMode::PolicyGradient, 0.76, 0.745, 0.37),
        ];
        let cmp = compare_runs(&a, &b).unwrap();
        assert_eq!(cmp.best_a, (40, 0.33));
        assert_eq!(cmp.best_b, (60, 0.37));
        // Run A exceeds the 2% gap at epochs 40 and 60; run B never does.
        assert_eq!(cmp.gap_flags_a.iter().map(|&(e, _)| e).collect::<Vec<_>>(), vec![40, 60]);
        assert!(cmp.gap_flags_b.is_empty());
        let rendered = cmp.to_string();
        assert!(rendered.contains("best adv checkpoint"));
    }

    #[test]
    fn gradient_export_writes_ppm_triples() {
        let net = tiny_net(9);
        let ds = make_synthetic(4, 4, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = ds.batch(&[0, 1, 2, 3]);
        let paths =
            export_gradients(&net, &images, &labels, &AttackConfig::default(), dir.path()).unwrap();
        assert_eq!(paths.len(), 12);
        for p in &paths {
            assert!(p.exists());
        }

        // The gradient maps carry only the three sign levels.
        for t in 0..4 {
            let bytes = fs::read(dir.path().join(format!("sample{t:03}_gradient.ppm"))).unwrap();
            let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
            assert!(bytes[header_end..].iter().all(|b| matches!(b, 0 | 128 | 255)));
        }

        // Determinism: a second export is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        export_gradients(&net, &images, &labels, &AttackConfig::default(), dir2.path()).unwrap();
        for t in 0..4 {
            for kind in ["original", "gradient", "adversarial"] {
                let a = fs::read(dir.path().join(format!("sample{t:03}_{kind}.ppm"))).unwrap();
                let b = fs::read(dir2.path().join(format!("sample{t:03}_{kind}.ppm"))).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn adversarial_image_matches_fgsm_op() {
        let net = tiny_net(11);
        let ds = make_synthetic(2, 2, 12).unwrap();
        let (images, labels) = ds.batch(&[0, 1]);
        let cfg = AttackConfig::default();
        let dir = tempfile::tempdir().unwrap();
        export_gradients(&net, &images, &labels, &cfg, dir.path()).unwrap();
        let adv = attacks::Fgsm::new(cfg).perturb(&net, &images, &labels).unwrap();
        let bytes = fs::read(dir.path().join("sample000_adversarial.ppm")).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        let expected = to_bytes(&adv.data()[0..32 * 32 * 3]);
        assert_eq!(&bytes[header_end..], &expected[..]);
    }
}
