use rand::Rng;
use serde::Serialize;
use twinseg_tensor::{Mode, Tape, Tensor, Var};

use crate::model::{ModelConfig, TwinSegNet};
use crate::seed::rng_for;

/// How the output shape in a [`PaperPresetReport`] was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeSource {
    Forward,
    Analytic,
}

#[derive(Clone, Debug, Serialize)]
pub struct PaperPresetReport {
    pub config: ModelConfig,
    /// `None` when the configuration is valid.
    pub validation_error: Option<String>,
    pub trainable_parameters: usize,
    pub closed_form_parameters: usize,
    pub bottleneck_extent: usize,
    pub tokens: usize,
    pub patch_dim: usize,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub shape_source: ShapeSource,
    pub estimated_forward_bytes: u64,
    pub available_bytes: Option<u64>,
    /// Why the forward pass was skipped, if it was.
    pub note: Option<String>,
}

impl PaperPresetReport {
    pub fn passed(&self) -> bool {
        let s = self.config.input_extent;
        self.validation_error.is_none()
            && self.trainable_parameters == self.closed_form_parameters
            && self.output_shape == [1, self.config.num_classes, s, s, s]
    }
}

/// Parameter count summed layer by layer from the architecture formulas.
pub fn closed_form_parameters(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k * k + cout;
    let mut total = 0;
    let mut cin = c.in_modalities;
    for level in 0..c.encoder_levels {
        let ch = c.channels_at(level);
        total += conv(cin, ch, 3) + 2 * ch + conv(ch, ch, 3) + 2 * ch;
        cin = ch;
    }
    let (e, p, t) = (c.vit.embed_dim, c.patch_dim(), c.tokens());
    let hidden = c.vit.mlp_ratio * e;
    total += p * e + e + t * e;
    total += c.vit.layers * (4 * e + 4 * (e * e + e) + (e * hidden + hidden) + (hidden * e + e));
    total += e * p + p;
    for level in (0..c.encoder_levels).rev() {
        let ch = c.channels_at(level);
        let incoming = if level + 1 == c.encoder_levels { ch } else { 2 * ch };
        total += incoming * ch * 8 + ch;
        total += conv(2 * ch, ch, 3) + 2 * ch + conv(ch, ch, 3) + 2 * ch;
    }
    total + conv(c.base_channels, c.num_classes, 1)
}

/// Rough peak memory of one eval-mode forward pass on a single volume.
pub fn estimated_forward_bytes(c: &ModelConfig) -> u64 {
    let voxels = (c.input_extent as u64).pow(3);
    8 * voxels * (c.in_modalities as u64 + 12 * c.base_channels as u64)
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// Builds the 128³ model without training it, checks its configuration and
/// parameter count, and runs one forward pass when memory allows.
pub fn validate_paper_preset(try_forward: bool) -> PaperPresetReport {
    let config = ModelConfig::paper();
    check_model(&config, try_forward)
}

pub fn check_model(config: &ModelConfig, try_forward: bool) -> PaperPresetReport {
    let s = config.input_extent;
    let input_shape = vec![1, config.in_modalities, s, s, s];
    let analytic = vec![1, config.num_classes, s, s, s];
    let estimated = estimated_forward_bytes(config);
    let available = available_memory();
    let mut report = PaperPresetReport {
        config: config.clone(),
        validation_error: config.validate().err().map(|e| e.to_string()),
        trainable_parameters: 0,
        closed_form_parameters: 0,
        bottleneck_extent: 0,
        tokens: 0,
        patch_dim: 0,
        input_shape: input_shape.clone(),
        output_shape: analytic.clone(),
        shape_source: ShapeSource::Analytic,
        estimated_forward_bytes: estimated,
        available_bytes: available,
        note: None,
    };
    let net = match TwinSegNet::new(config.clone()) {
        Ok(net) => net,
        Err(e) => {
            report.output_shape.clear();
            report.note = Some(format!("model not constructible: {e}"));
            return report;
        }
    };
    report.trainable_parameters = net.trainable_count();
    report.closed_form_parameters = closed_form_parameters(config);
    report.bottleneck_extent = config.bottleneck_extent();
    report.tokens = config.tokens();
    report.patch_dim = config.patch_dim();

    if !try_forward {
        report.note = Some("forward pass not requested".into());
        return report;
    }
    match available {
        Some(bytes) if bytes > estimated + estimated / 4 => {}
        Some(bytes) => {
            report.note = Some(format!(
                "forward pass skipped: needs about {estimated} bytes, {bytes} available"
            ));
            return report;
        }
        None => {
            report.note = Some("forward pass skipped: available memory unknown".into());
            return report;
        }
    }
    let outcome = (|| -> crate::Result<Vec<usize>> {
        let params = net.init(0)?;
        let mut rng = rng_for(&[0x128]);
        let x = Tensor::from_fn(&input_shape, |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut tape = Tape::no_grad();
        let bound = net.bind(&mut tape, &params);
        let pass = net.forward(&mut tape, &bound, &params, &Var::constant(x), Mode::Eval)?;
        Ok(pass.logits.shape().to_vec())
    })();
    match outcome {
        Ok(shape) => {
            report.output_shape = shape;
            report.shape_source = ShapeSource::Forward;
        }
        Err(e) => {
            report.output_shape.clear();
            report.shape_source = ShapeSource::Forward;
            report.note = Some(format!("forward pass failed: {e}"));
        }
    }
    report
}
